//! Dataset manifests, volume files, preprocessing, patch sampling and the
//! synthetic phantom generator.

mod dataset;
pub mod io;
pub mod manifest;
pub mod patch;
pub mod preprocess;
pub mod synthetic;

pub use dataset::{load_cases, Case};
pub use manifest::{DatasetManifest, ManifestEntry, Split};
pub use patch::sample_patch;
pub use preprocess::{percentile, preprocess_ct, preprocess_mr, resample, resample_labels, PreprocessSpec};
pub use synthetic::{gen_synthetic, synth_case, SyntheticSpec};
