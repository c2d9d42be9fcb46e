//! Target assignment, loss terms and the alternating training loop.

mod alignment;
mod config;
mod losses;
mod run;


pub use alignment::{adversarial_alignment, AlignmentConfig, AlignmentReport};
pub use config::{LossMode, LossWeights, TrainConfig, CONFIG_KEYS};
pub use losses::{
    adversarial_step_losses, cell_targets, detection_loss, encode_text, greedy_match, match_candidates_to_gt,
    recognition_loss, recognition_loss_batch, total_loss, AdversarialLosses, MatchAssignment,
};
pub use run::{
    batch_indices, load_trained, read_train_state, train_loop, train_on, train_step, StepMetrics, TrainOutcome,
    TrainState, METRICS_FILE,
};
