//! The HyTRec network, its configuration and checkpoints.

mod checkpoint;
mod config;
mod network;
mod schedule;

pub use checkpoint::Checkpoint;
pub use config::{LinearKind, ModelConfig, ScheduleKind, DEFAULT_DECAY_PERIOD};
pub use network::{HyTRecModel, ModelInput};
pub use schedule::{build_layer_schedule, LayerKind, LayerSchedule};
