use std::fmt::Write as _;
use std::time::Instant;

use modseg_tensor::Scalar;
use serde::{Deserialize, Serialize};

use super::metrics::dice_per_class;
use super::window::{predict_volume, WindowConfig};
use crate::data::Case;
use crate::domain::{LabelMask, Modality};
use crate::error::{bail, Result};
use crate::head::fuse_multiclass;
use crate::model::{ParamCounts, Segmenter};
use crate::prompts::EmbeddingTable;

pub const AGGREGATION: &str = "per-case mean";
pub const EMPTY_CONVENTION: &str = "both-empty = 1.0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub window: WindowConfig,
    /// Sigmoid threshold for one-vs-all fusion.
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { window: WindowConfig::default(), threshold: 0.5 }
    }
}

#[derive(Clone, Debug)]
pub struct SegmentationResult {
    pub id: String,
    pub modality: Modality,
    pub pred: LabelMask,
    /// `(K, H, W, D)` probabilities.
    pub probs: Vec<f32>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeScores {
    pub id: String,
    pub modality: Modality,
    pub dice: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySummary {
    pub modality: Modality,
    pub volumes: usize,
    pub per_class: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub mistaken_prompts: bool,
    pub aggregation: String,
    pub empty_convention: String,
    pub classes: Vec<String>,
    pub volumes: Vec<VolumeScores>,
    pub per_modality: Vec<ModalitySummary>,
    pub per_class_mean: Vec<f64>,
    pub overall_mean: f64,
    pub config_hash: String,
    pub param_counts: ParamCounts,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn class_means(rows: &[&VolumeScores], k: usize) -> Vec<f64> {
    (0..k).map(|c| mean(rows.iter().map(|r| r.dice[c]))).collect()
}

/// Three-letter column code: `spleen` -> `SPL`, `right kidney` -> `RKI`.
pub fn abbreviate(name: &str) -> String {
    let words: Vec<&str> = name.split_whitespace().collect();
    let code: String = match words.as_slice() {
        [] => String::new(),
        [one] => one.chars().take(3).collect(),
        [first, .., last] => first.chars().take(1).chain(last.chars().take(2)).collect(),
    };
    code.to_uppercase()
}

impl RunReport {
    /// Aggregates per-volume scores; every summary is derived from `volumes`.
    pub fn from_volumes(
        label: impl Into<String>,
        mistaken_prompts: bool,
        classes: Vec<String>,
        volumes: Vec<VolumeScores>,
        config_hash: String,
        param_counts: ParamCounts,
    ) -> Result<Self> {
        let k = classes.len();
        if volumes.is_empty() {
            bail!(Config, "no volumes to report on");
        }
        if let Some(v) = volumes.iter().find(|v| v.dice.len() != k) {
            bail!(Shape, "volume {} has {} scores for {k} classes", v.id, v.dice.len());
        }
        let all: Vec<&VolumeScores> = volumes.iter().collect();
        let per_class_mean = class_means(&all, k);
        let overall_mean = mean(per_class_mean.iter().copied());
        let per_modality = Modality::ALL
            .into_iter()
            .filter_map(|m| {
                let rows: Vec<&VolumeScores> = volumes.iter().filter(|v| v.modality == m).collect();
                if rows.is_empty() {
                    return None;
                }
                let per_class = class_means(&rows, k);
                let mean = mean(per_class.iter().copied());
                Some(ModalitySummary { modality: m, volumes: rows.len(), per_class, mean })
            })
            .collect();
        Ok(RunReport {
            label: label.into(),
            mistaken_prompts,
            aggregation: AGGREGATION.into(),
            empty_convention: EMPTY_CONVENTION.into(),
            classes,
            volumes,
            per_modality,
            per_class_mean,
            overall_mean,
            config_hash,
            param_counts,
        })
    }

    pub fn modality(&self, m: Modality) -> Option<&ModalitySummary> {
        self.per_modality.iter().find(|s| s.modality == m)
    }

    /// Recomputes every aggregate from the per-volume table.
    pub fn verify(&self) -> Result<()> {
        let again = RunReport::from_volumes(
            self.label.clone(),
            self.mistaken_prompts,
            self.classes.clone(),
            self.volumes.clone(),
            self.config_hash.clone(),
            self.param_counts,
        )?;
        if again != *self {
            bail!(Validation, "report aggregates do not match the per-volume table");
        }
        if self.volumes.iter().flat_map(|v| &v.dice).any(|d| !(0.0..=1.0).contains(d)) {
            bail!(Validation, "Dice value outside [0, 1]");
        }
        Ok(())
    }

    /// Dice x 100 per organ column, one row per modality plus the average.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let title = if self.mistaken_prompts { format!("{} (mistaken prompts)", self.label) } else { self.label.clone() };
        let _ = writeln!(out, "{title}");
        let _ = write!(out, "{:<10}", "Modality");
        for c in &self.classes {
            let _ = write!(out, "{:>7}", abbreviate(c));
        }
        let _ = writeln!(out, "{:>7}", "Mean");
        let row = |out: &mut String, name: &str, vals: &[f64], mean: f64| {
            let _ = write!(out, "{name:<10}");
            for v in vals {
                let _ = write!(out, "{:>7.2}", v * 100.0);
            }
            let _ = writeln!(out, "{:>7.2}", mean * 100.0);
        };
        for s in &self.per_modality {
            row(&mut out, s.modality.tag(), &s.per_class, s.mean);
        }
        row(&mut out, "All", &self.per_class_mean, self.overall_mean);
        let _ = writeln!(out, "({}; {})", self.aggregation, self.empty_convention);
        out
    }
}

fn run<T: Scalar>(
    model: &Segmenter<T>,
    cases: &[Case],
    table: Option<&EmbeddingTable>,
    cfg: &EvalConfig,
    mistaken: bool,
) -> Result<(RunReport, Vec<SegmentationResult>)> {
    if cases.is_empty() {
        bail!(Config, "empty test split");
    }
    let k = model.num_classes();
    let classes = cases[0].mask.classes.names().to_vec();
    if classes.len() != k {
        bail!(Compatibility, "model predicts {k} classes, labels define {}", classes.len());
    }
    let mut scores = Vec::with_capacity(cases.len());
    let mut results = Vec::with_capacity(cases.len());
    for case in cases {
        let t0 = Instant::now();
        let m = case.modality();
        let prompt = if mistaken { m.flipped() } else { m };
        let image = case.image.cast::<T>();
        let probs = predict_volume(model, &image, table, prompt, &cfg.window)?;
        let dims = case.image.dims();
        let batched = probs.reshape(&[1, k, dims[0], dims[1], dims[2]])?;
        let labels = fuse_multiclass(&batched, cfg.threshold)?;
        let dice = dice_per_class(&labels, case.mask.data(), k)?;
        let pred = LabelMask::new(case.id(), case.mask.classes.clone(), dims, labels)?;
        scores.push(VolumeScores { id: case.id().to_string(), modality: m, dice });
        results.push(SegmentationResult {
            id: case.id().to_string(),
            modality: m,
            pred,
            probs: batched.data().iter().map(|v| v.as_f64() as f32).collect(),
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    let label = if mistaken { "mistaken-prompt" } else { "evaluate" };
    let report = RunReport::from_volumes(label, mistaken, classes, scores, model.cfg.hash_hex(), model.count_params())?;
    Ok((report, results))
}

/// Scores every case: per-class binary Dice per volume, then means.
pub fn evaluate<T: Scalar>(
    model: &Segmenter<T>,
    cases: &[Case],
    table: Option<&EmbeddingTable>,
    cfg: &EvalConfig,
) -> Result<(RunReport, Vec<SegmentationResult>)> {
    run(model, cases, table, cfg, false)
}

/// Like [`evaluate`] but each volume is prompted with the other modality's
/// text vectors.
pub fn mistaken_prompt_eval<T: Scalar>(
    model: &Segmenter<T>,
    cases: &[Case],
    table: Option<&EmbeddingTable>,
    cfg: &EvalConfig,
) -> Result<(RunReport, Vec<SegmentationResult>)> {
    run(model, cases, table, cfg, true)
}
