//! The alternating schedule: every iteration draws one CT batch and then one
//! MR batch, and each batch gets its own optimizer step.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::loader::{CyclicLoader, Draw};
use crate::domain::Modality;
use crate::error::{bail, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// CT and MR batches alternate.
    #[default]
    Alt,
    CtOnly,
    MrOnly,
}

impl TrainMode {
    pub fn label(self) -> &'static str {
        match self {
            TrainMode::Alt => "ALT",
            TrainMode::CtOnly => "CT-only",
            TrainMode::MrOnly => "MR-only",
        }
    }

    /// Optimizer steps per epoch for loaders of the given lengths.
    pub fn steps_per_epoch(self, ct_len: usize, mr_len: usize) -> usize {
        match self {
            TrainMode::Alt => 2 * ct_len.max(mr_len),
            TrainMode::CtOnly => ct_len,
            TrainMode::MrOnly => mr_len,
        }
    }

    pub fn uses(self, m: Modality) -> bool {
        match self {
            TrainMode::Alt => true,
            TrainMode::CtOnly => m == Modality::Ct,
            TrainMode::MrOnly => m == Modality::Mr,
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "alt" => Ok(TrainMode::Alt),
            "ct_only" => Ok(TrainMode::CtOnly),
            "mr_only" => Ok(TrainMode::MrOnly),
            _ => Err(Error::Config(format!("unknown training mode {s:?} (alt, ct_only, mr_only)"))),
        }
    }
}

/// What a training step reports back.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss_dice: f64,
    pub loss_ce: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub modality: Modality,
    pub batch_index: usize,
    pub samples: Vec<usize>,
    pub loss_dice: f64,
    pub loss_ce: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub max_iter: usize,
    pub entries: Vec<TraceEntry>,
}

impl EpochTrace {
    /// One optimizer step per entry.
    pub fn optimizer_steps(&self) -> usize {
        self.entries.len()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.entries.iter().map(|e| e.modality).collect()
    }

    pub fn batch_indices(&self, m: Modality) -> Vec<usize> {
        self.entries.iter().filter(|e| e.modality == m).map(|e| e.batch_index).collect()
    }

    /// Mean `(dice, ce)` over the steps of one modality.
    pub fn mean_losses(&self, m: Modality) -> Option<(f64, f64)> {
        let rows: Vec<&TraceEntry> = self.entries.iter().filter(|e| e.modality == m).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((rows.iter().map(|e| e.loss_dice).sum::<f64>() / n, rows.iter().map(|e| e.loss_ce).sum::<f64>() / n))
    }
}

/// Runs one epoch. `step` performs forward, loss, zero-grad, backward and
/// one optimizer update for a single-modality batch.
pub fn alt_epoch<F>(ct: &mut CyclicLoader, mr: &mut CyclicLoader, mode: TrainMode, mut step: F) -> Result<EpochTrace>
where
    F: FnMut(Modality, &Draw) -> Result<StepOutcome>,
{
    let max_iter = match mode {
        TrainMode::Alt => ct.len().max(mr.len()),
        TrainMode::CtOnly => ct.len(),
        TrainMode::MrOnly => mr.len(),
    };
    if max_iter == 0 {
        bail!(Config, "empty loader");
    }
    let mut trace = EpochTrace { max_iter, entries: Vec::with_capacity(2 * max_iter) };
    for iter in 0..max_iter {
        for (modality, loader) in [(Modality::Ct, &mut *ct), (Modality::Mr, &mut *mr)] {
            if !mode.uses(modality) {
                continue;
            }
            let draw = loader.next_batch();
            let out = step(modality, &draw)?;
            if !(out.loss_dice.is_finite() && out.loss_ce.is_finite()) {
                return Err(Error::NanLoss {
                    iter,
                    modality: modality.to_string(),
                    batch: draw.batch_index,
                    dice: out.loss_dice,
                    ce: out.loss_ce,
                });
            }
            trace.entries.push(TraceEntry {
                iter,
                modality,
                batch_index: draw.batch_index,
                samples: draw.samples,
                loss_dice: out.loss_dice,
                loss_ce: out.loss_ce,
                lr: out.lr,
            });
        }
    }
    Ok(trace)
}
