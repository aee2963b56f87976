use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use modseg_tensor::{AdamW, AdamWConfig, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::alt::{alt_epoch, EpochTrace, StepOutcome, TrainMode};
use super::augment::{augment, AugmentConfig};
use super::loader::CyclicLoader;
use super::loss::combined_loss;
use super::ratio::{Ratio, RatioStrategy};
use super::schedule::WarmupCosine;
use crate::data::{sample_patch, Case};
use crate::domain::{Modality, PatchBatch};
use crate::error::{bail, Error, Result};
use crate::model::Segmenter;
use crate::prompts::EmbeddingTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub dice_weight: f64,
    pub ce_weight: f64,
    pub seed: u64,
    /// CT:MR training-pool ratio; `None` uses the manifest as is.
    pub ratio: Option<Ratio>,
    pub ratio_strategy: RatioStrategy,
    pub mode: TrainMode,
    /// Probability that a sampled patch is centred on foreground.
    pub fg_prob: f64,
    /// Reshuffle each loader when it wraps.
    pub reshuffle: bool,
    pub augment: AugmentConfig,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            warmup_epochs: 10,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 2,
            patch_size: 96,
            dice_weight: 1.0,
            ce_weight: 1.0,
            seed: 0,
            ratio: None,
            ratio_strategy: RatioStrategy::ExpandCt,
            mode: TrainMode::Alt,
            fg_prob: 0.5,
            reshuffle: true,
            augment: AugmentConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bail!(Config, "lr must be positive, got {}", self.lr);
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            bail!(Config, "warmup_epochs ({}) must be below epochs ({})", self.warmup_epochs, self.epochs);
        }
        if self.batch_size == 0 || self.patch_size == 0 {
            bail!(Config, "batch_size and patch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.fg_prob) {
            bail!(Config, "fg_prob must be in [0, 1]");
        }
        if self.weight_decay < 0.0 || self.dice_weight < 0.0 || self.ce_weight < 0.0 {
            bail!(Config, "weight decay and loss weights must be non-negative");
        }
        if let Some(r) = self.ratio {
            if !Ratio::SUPPORTED.contains(&r) {
                bail!(Config, "unsupported ratio {r}");
            }
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, ..Default::default() }
    }
}

/// Per-epoch aggregate, also the unit of the determinism audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    /// Mean `(dice, ce)` over CT steps.
    pub ct: Option<(f64, f64)>,
    pub mr: Option<(f64, f64)>,
    pub mean_loss: f64,
    pub last_lr: f64,
}

impl EpochSummary {
    fn from_trace(epoch: usize, trace: &EpochTrace) -> Self {
        let n = trace.entries.len().max(1) as f64;
        EpochSummary {
            epoch,
            steps: trace.optimizer_steps(),
            ct: trace.mean_losses(Modality::Ct),
            mr: trace.mean_losses(Modality::Mr),
            mean_loss: trace.entries.iter().map(|e| e.loss_dice + e.loss_ce).sum::<f64>() / n,
            last_lr: trace.entries.last().map_or(0.0, |e| e.lr),
        }
    }
}

/// One line of the JSONL training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub iter: usize,
    pub step: u64,
    pub modality: Modality,
    pub batch_index: usize,
    pub loss_dice: f64,
    pub loss_ce: f64,
    pub lr: f64,
}

struct TrainLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl TrainLog {
    fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(TrainLog { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    fn write(&mut self, rec: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a JSONL training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Mutable training state that a checkpoint must capture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub rng: ChaCha8Rng,
    pub ct_loader: CyclicLoader,
    pub mr_loader: CyclicLoader,
}

/// Owns the model, optimizer and data for one training run.
pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub model: Segmenter<T>,
    pub opt: AdamW<T>,
    pub state: TrainState,
    pub schedule: WarmupCosine,
    pub history: Vec<EpochSummary>,
    table: Option<EmbeddingTable>,
    ct: Vec<Case>,
    mr: Vec<Case>,
    log: Option<TrainLog>,
}

fn loader_for(cases: &[Case], used: bool, cfg: &TrainConfig, salt: u64) -> Result<CyclicLoader> {
    if used && cases.is_empty() {
        bail!(Config, "no training cases for a modality the {} mode needs", cfg.mode.label());
    }
    // A placeholder loader keeps the unused side of a single-modality run
    // well-formed; it is never drawn from.
    CyclicLoader::new(cases.len().max(1), cfg.batch_size, cfg.reshuffle, cfg.seed.wrapping_add(salt))
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        cfg: TrainConfig,
        model: Segmenter<T>,
        table: Option<EmbeddingTable>,
        ct: Vec<Case>,
        mr: Vec<Case>,
    ) -> Result<Self> {
        cfg.validate()?;
        if model.uses_text() && table.is_none() {
            bail!(Config, "a text-conditioned model needs an embedding table");
        }
        if cfg.patch_size != model.cfg.backbone.patch_size {
            bail!(
                Validation,
                "train.patch_size {} differs from backbone.patch_size {}",
                cfg.patch_size,
                model.cfg.backbone.patch_size
            );
        }
        let ct_loader = loader_for(&ct, cfg.mode.uses(Modality::Ct), &cfg, 1)?;
        let mr_loader = loader_for(&mr, cfg.mode.uses(Modality::Mr), &cfg, 2)?;
        let spe = cfg.mode.steps_per_epoch(ct_loader.len(), mr_loader.len()) as u64;
        let schedule = WarmupCosine::new(cfg.lr, cfg.warmup_epochs as u64 * spe, cfg.epochs as u64 * spe)?;
        let opt = AdamW::new(cfg.optimizer(), model.store.len());
        let state = TrainState { epoch: 0, global_step: 0, rng: ChaCha8Rng::seed_from_u64(cfg.seed), ct_loader, mr_loader };
        Ok(Trainer { cfg, model, opt, state, schedule, history: Vec::new(), table, ct, mr, log: None })
    }

    /// Appends per-step records to a JSONL file.
    pub fn with_log(mut self, path: &Path) -> Result<Self> {
        self.log = Some(TrainLog::open(path)?);
        Ok(self)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cfg.mode.steps_per_epoch(self.state.ct_loader.len(), self.state.mr_loader.len())
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
    }

    pub fn table(&self) -> Option<&EmbeddingTable> {
        self.table.as_ref()
    }

    /// Runs the next epoch and returns its full trace.
    pub fn run_epoch(&mut self) -> Result<EpochTrace> {
        if self.is_done() {
            bail!(Config, "all {} epochs are already complete", self.cfg.epochs);
        }
        let Trainer { cfg, model, opt, state, schedule, table, ct, mr, .. } = self;
        let TrainState { rng, ct_loader, mr_loader, global_step, .. } = state;
        let trace = alt_epoch(ct_loader, mr_loader, cfg.mode, |modality, draw| {
            let cases = match modality {
                Modality::Ct => &*ct,
                Modality::Mr => &*mr,
            };
            let patches = draw
                .samples
                .iter()
                .map(|&i| {
                    let c = &cases[i];
                    let p = sample_patch(&c.image, &c.mask, cfg.patch_size, cfg.fg_prob, rng)?;
                    let image = p.image.iter().map(|&v| T::lit(v as f64)).collect();
                    Ok(crate::domain::Patch { id: p.id, modality: p.modality, size: p.size, image, labels: p.labels })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut batch = PatchBatch::<T>::new(patches, cfg.patch_size)?;
            augment(&mut batch, &cfg.augment, rng);
            let lr = schedule.lr_at(*global_step)?;
            let probs = model.forward(&Var::constant(batch.images), modality, table.as_ref(), true)?;
            let terms = combined_loss(&probs, &batch.labels, cfg.dice_weight, cfg.ce_weight)?;
            let (dice, ce, _) = terms.values();
            if dice.is_finite() && ce.is_finite() {
                let grads = terms.total.backward()?;
                opt.step(&mut model.store, &grads, lr);
            }
            *global_step += 1;
            Ok(StepOutcome { loss_dice: dice, loss_ce: ce, lr })
        })?;
        let epoch = self.state.epoch;
        if let Some(log) = &mut self.log {
            let first = self.state.global_step - trace.entries.len() as u64;
            for (i, e) in trace.entries.iter().enumerate() {
                log.write(&LogRecord {
                    epoch,
                    iter: e.iter,
                    step: first + i as u64,
                    modality: e.modality,
                    batch_index: e.batch_index,
                    loss_dice: e.loss_dice,
                    loss_ce: e.loss_ce,
                    lr: e.lr,
                })?;
            }
            log.flush()?;
        }
        self.history.push(EpochSummary::from_trace(epoch, &trace));
        self.state.epoch += 1;
        Ok(trace)
    }

    /// Trains until `cfg.epochs`, calling `on_epoch` after each one.
    pub fn fit<F>(&mut self, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&Self, &EpochTrace) -> Result<()>,
    {
        while !self.is_done() {
            let trace = self.run_epoch()?;
            on_epoch(self, &trace)?;
        }
        Ok(())
    }

    pub(crate) fn restore(&mut self, opt: AdamW<T>, state: TrainState, history: Vec<EpochSummary>) {
        self.opt = opt;
        self.state = state;
        self.history = history;
    }
}
