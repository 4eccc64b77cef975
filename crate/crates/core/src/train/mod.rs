//! Loss, optimizer, training loop and gradient verification.

mod gradcheck;
mod loss;
mod optim;
mod trainer;

pub use gradcheck::{gradcheck_model, GradcheckOptions, GroupCheck, MAX_GRADCHECK_LEN, MAX_GRADCHECK_PARAMS};
pub use loss::next_item_loss;
pub use optim::{adam_step, global_norm, AdamState, TrainConfig};
pub use trainer::{train_loop, EpochRecord, TrainReport, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT, REPORT_FILE};
