//! Alternating CT/MR training.

pub mod alt;
pub mod augment;
pub mod checkpoint;
pub mod loader;
pub mod loss;
pub mod ratio;
pub mod schedule;
pub mod trainer;

pub use alt::{alt_epoch, EpochTrace, StepOutcome, TraceEntry, TrainMode};
pub use augment::{augment, AugmentConfig};
pub use checkpoint::{load_model, Checkpoint};
pub use loader::{CyclicLoader, Draw};
pub use loss::{bce_loss, combined_loss, dice_loss, LossTerms};
pub use ratio::{plan_ratio, Ratio, RatioPlan, RatioStrategy};
pub use schedule::{lr_at, WarmupCosine};
pub use trainer::{read_log, EpochSummary, LogRecord, TrainConfig, TrainState, Trainer};
