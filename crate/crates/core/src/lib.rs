//! Feature-palette style transfer: a frozen VGG-19 encoder, k-means feature
//! palettes, per-entry AdaIN, attention coloring and a trained decoder, with
//! the training loop and a depth-error evaluation harness.

pub mod container;
pub mod depth_eval;
pub mod encoder;
pub mod error;
pub mod imaging;
mod net;
pub mod nn;
pub mod palette;
pub mod real;
pub mod stylizer;
pub mod tensor;
pub mod training;

pub use container::TensorStore;
pub use encoder::{
    encode, load_encoder, EncoderParams, FeatureMap, FeaturePyramid, Layer, Preprocessing,
};
pub use error::{Error, Result};
pub use imaging::{load_image, save_image, ImageTensor};
pub use palette::{ChannelStats, FeaturePalette, PaletteMode};
pub use real::Real;
pub use stylizer::{Checkpoint, StyleConfig, StyleModel};
pub use tensor::Tensor;
pub use training::{LossBreakdown, TrainConfig};

/// The guide's chapters, compiled as doc-tests so their snippets stay current.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/images.md")]
    mod images {}
    #[doc = include_str!("../../../book/src/encoder.md")]
    mod encoder {}
    #[doc = include_str!("../../../book/src/palettes.md")]
    mod palettes {}
    #[doc = include_str!("../../../book/src/stylizing.md")]
    mod stylizing {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/depth.md")]
    mod depth {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
