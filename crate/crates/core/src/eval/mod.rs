//! Sliding-window inference, Dice scoring and run reports.

pub mod metrics;
pub mod report;
pub mod window;

pub use metrics::{dice_per_class, dice_score};
pub use report::{abbreviate, evaluate, mistaken_prompt_eval, EvalConfig, ModalitySummary, RunReport, SegmentationResult, VolumeScores};
pub use window::{padded_len, predict_volume, sliding_window_predict, window_starts, Blend, WindowConfig};
