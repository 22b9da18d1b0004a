//! AdaIN first stylization, attention coloring, decoding and the
//! application-level compositions built on them.

mod adain;
pub(crate) mod attention;
pub(crate) mod decoder;
mod model;
mod pipeline;

pub use adain::{adain, first_stylize, ADAIN_EPS};
pub use attention::{
    attention_color, attention_color_detailed, attention_color_gradients, AcParams, AttentionMap,
    AttentionOutput,
};
pub use decoder::{decode, DecoderParams, DECODER_CONVS, DECODER_INPUT_CHANNELS};
pub use model::{Checkpoint, StyleConfig, StyleModel};
pub use pipeline::{
    blend_features, compose_masked, content_features, interpolate_styles, multi_style_palette,
    spatial_control, style_palette, stylize, stylize_features, stylize_multi, validate_partition,
    Mask,
};
