//! Interaction logs, per-user sequences, splits, batches and synthetic data.

mod batch;
mod log;
mod sequence;
mod split;
mod synthetic;

pub use batch::{make_batches, Batch};
pub use log::{parse_interaction_log, parse_interaction_text, InteractionEvent, LogFormat, ParsedLog, Vocabulary};
pub use sequence::{build_sequences, compact_vocabulary, filter_sequences, to_log_text, UserSequence};
pub use split::{decompose, decompose_context, leave_one_out, read_examples, write_examples, DatasetSplit, DecomposedSequence};
pub use synthetic::{generate_synthetic_drift, SyntheticConfig, SyntheticDataset};
