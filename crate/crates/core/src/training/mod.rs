//! Loss composition, label-fraction masking and the training loop.

mod config;
mod labels;
mod losses;
mod trainer;

pub use config::{Ablation, LossWeights, TrainConfig};
pub use labels::assign_label_fraction;
pub use losses::{
    attribute_loss, malignancy_kl_grad, malignancy_kl_loss, reconstruction_loss, total_loss, LossTerms, KL_CLAMP,
};
pub use trainer::{
    init_model, latents, predict_malignancy, prepare, read_epochs_csv, sample_loss_and_grads, train,
    write_epochs_csv, EpochReport, PreparedSample, TrainOutcome,
};
