//! Losses, gradients, the Adam optimizer and the training loop. Only the
//! attention block and decoder are trained; the encoder stays frozen.

mod config;
mod loss;
mod optim;
mod trainer;

pub use config::{parse_key_values, TrainConfig, TRAIN_CONFIG_KEYS};
pub use loss::{
    activation_pattern, batch_gradients, batch_loss, content_loss, loss_stats, pair_gradients,
    pair_loss, style_loss, style_loss_features, style_loss_from_stats, EncodedImage, Gradients,
    LossBreakdown, PreparedPair,
};
pub use optim::Adam;
pub use trainer::{
    checkpoint_file_name, list_images, train, train_step, TrainSummary, Trainer,
    FINAL_CHECKPOINT_FILE, LOSS_LOG_FILE,
};
