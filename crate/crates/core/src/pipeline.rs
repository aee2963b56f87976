//! End-to-end runs driven by an [`ExperimentConfig`]: embedding
//! precompute, training into a self-contained run directory, evaluation and
//! the text x schedule ablation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::data::{load_cases, Case, DatasetManifest, PreprocessSpec, Split};
use crate::domain::{ClassTable, Modality};
use crate::error::{bail, Error, Result};
use crate::eval::{evaluate, mistaken_prompt_eval, EvalConfig, RunReport};
use crate::model::Segmenter;
use crate::prompts::{build_embedding_table, provider_from_id, EmbeddingHeader, EmbeddingTable};
use crate::training::{load_model, plan_ratio, EpochSummary, TrainMode, Trainer};

pub const CONFIG_FILE: &str = "config.toml";
pub const STAMP_FILE: &str = "stamp.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.mmckpt";
pub const REPORT_FILE: &str = "report.json";

/// Provenance of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStamp {
    pub tool_version: String,
    /// Short digest over every input, in the style of a commit id.
    pub stamp: String,
    pub config_hash: String,
    pub manifest_hash: String,
    pub embeddings: Option<EmbeddingHeader>,
    pub model_hash: String,
}

/// Manifest, class table and (for text runs) the embedding table, after the
/// cross-input checks.
pub struct Inputs {
    pub manifest: DatasetManifest,
    pub classes: ClassTable,
    pub table: Option<EmbeddingTable>,
}

pub fn load_inputs(cfg: &ExperimentConfig) -> Result<Inputs> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(&cfg.manifest)?;
    let classes = manifest.class_table()?;
    let table = match (&cfg.embeddings, cfg.text_embedding) {
        (Some(p), true) => Some(EmbeddingTable::load(p, &classes)?),
        (_, false) => None,
        (None, true) => bail!(Config, "text_embedding = true needs an `embeddings` path"),
    };
    Ok(Inputs { manifest, classes, table })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Embeds every (modality, class) prompt for the manifest's classes.
pub fn precompute_embeddings(cfg: &ExperimentConfig, out: &Path) -> Result<EmbeddingTable> {
    let manifest = DatasetManifest::load(&cfg.manifest)?;
    let classes = manifest.class_table()?;
    let mut provider = provider_from_id(&cfg.text.encoder)?;
    let table = build_embedding_table(provider.as_mut(), cfg.text.template, &classes)?;
    table.save(out)?;
    Ok(table)
}

/// Training cases of each modality after the optional ratio plan.
pub fn training_cases(cfg: &ExperimentConfig, manifest: &DatasetManifest) -> Result<(Vec<Case>, Vec<Case>)> {
    let mode = cfg.train.mode;
    let load = |m: Modality| -> Result<Vec<Case>> {
        if mode.uses(m) {
            load_cases(manifest, Split::Train, m, &cfg.preprocess)
        } else {
            Ok(Vec::new())
        }
    };
    let (mut ct, mut mr) = (load(Modality::Ct)?, load(Modality::Mr)?);
    if let Some(ratio) = cfg.train.ratio {
        let plan = plan_ratio(ratio, cfg.train.ratio_strategy, ct.len(), mr.len(), 0)?;
        ct.truncate(plan.ct_train);
        mr.truncate(plan.mr_train);
    }
    Ok((ct, mr))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub history: Vec<EpochSummary>,
}

fn stamp(cfg: &ExperimentConfig, inputs: &Inputs, model_hash: String) -> RunStamp {
    let config_hash = cfg.hash_hex();
    let manifest_hash = inputs.manifest.hash_hex();
    let embeddings = inputs.table.as_ref().map(|t| t.header().clone());
    let mut h = Sha256::new();
    h.update(config_hash.as_bytes());
    h.update(manifest_hash.as_bytes());
    h.update(serde_json::to_vec(&embeddings).expect("header serializes"));
    h.update(model_hash.as_bytes());
    RunStamp {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        stamp: hex::encode(&h.finalize()[..6]),
        config_hash,
        manifest_hash,
        embeddings,
        model_hash,
    }
}

/// Trains into `cfg.output_dir`. With `resume` and an existing checkpoint
/// the run continues where it stopped; otherwise it starts fresh.
pub fn run_train(cfg: &ExperimentConfig, resume: bool) -> Result<TrainOutcome> {
    let inputs = load_inputs(cfg)?;
    let (ct, mr) = training_cases(cfg, &inputs.manifest)?;
    let run_dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let ckpt = run_dir.join(CHECKPOINT_FILE);
    let log = run_dir.join(LOG_FILE);
    let mut trainer = if resume && ckpt.is_file() {
        let t = Trainer::<f32>::resume(&ckpt, inputs.table.clone(), ct, mr)?;
        if t.cfg != cfg.train {
            bail!(Compatibility, "training settings differ from the checkpointed run; resume needs the original config");
        }
        t
    } else {
        if log.exists() {
            std::fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
        }
        let model_cfg = cfg.model_config(inputs.classes.len(), inputs.table.as_ref().map(EmbeddingTable::d_txt))?;
        let model = Segmenter::<f32>::new(model_cfg, cfg.seed)?;
        Trainer::new(cfg.train.clone(), model, inputs.table.clone(), ct, mr)?
    };
    write(&run_dir.join(CONFIG_FILE), cfg.to_toml())?;
    let st = stamp(cfg, &inputs, trainer.model.cfg.hash_hex());
    write(&run_dir.join(STAMP_FILE), serde_json::to_string_pretty(&st).expect("stamp serializes"))?;
    trainer = trainer.with_log(&log)?;
    let every = cfg.train.checkpoint_every;
    trainer.fit(|t, _| {
        if every > 0 && t.state.epoch % every == 0 && !t.is_done() {
            t.save_checkpoint(&ckpt)?;
        }
        Ok(())
    })?;
    trainer.save_checkpoint(&ckpt)?;
    Ok(TrainOutcome { run_dir, checkpoint: ckpt, history: trainer.history.clone() })
}

/// Evaluates a checkpoint on one split of a manifest.
pub fn run_evaluate(
    checkpoint: &Path,
    manifest: &Path,
    embeddings: Option<&Path>,
    preprocess: &PreprocessSpec,
    eval: &EvalConfig,
    split: Split,
    mistaken: bool,
) -> Result<RunReport> {
    let (model, header) = load_model::<f32>(checkpoint)?;
    let manifest = DatasetManifest::load(manifest)?;
    let classes = manifest.class_table()?;
    let table = match (model.uses_text(), embeddings) {
        (true, Some(p)) => Some(EmbeddingTable::load(p, &classes)?),
        (true, None) => bail!(Config, "this checkpoint has a text-conditioned head; pass --embeddings"),
        (false, _) => None,
    };
    if let (Some(t), Some(h)) = (&table, &header.embeddings) {
        if t.header() != h {
            bail!(Compatibility, "embedding table differs from the one used for training");
        }
    }
    let mut cases = Vec::new();
    for m in Modality::ALL {
        cases.extend(load_cases(&manifest, split, m, preprocess)?);
    }
    let (report, _) = if mistaken {
        mistaken_prompt_eval(&model, &cases, table.as_ref(), eval)?
    } else {
        evaluate(&model, &cases, table.as_ref(), eval)?
    };
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub text: bool,
    pub mode: TrainMode,
    pub ct_mean: Option<f64>,
    pub mr_mean: Option<f64>,
    pub report: RunReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// One row per cell: text on/off, schedule, mean Dice per modality.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<6}{:<10}{:>8}{:>8}{:>8}", "Text", "Schedule", "CT", "MR", "Mean");
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", v * 100.0));
        for r in &self.rows {
            let both: Vec<f64> = [r.ct_mean, r.mr_mean].into_iter().flatten().collect();
            let mean = (!both.is_empty()).then(|| both.iter().sum::<f64>() / both.len() as f64);
            let text = if r.text { "yes" } else { "no" };
            let _ = writeln!(
                out,
                "{text:<6}{:<10}{:>8}{:>8}{:>8}",
                r.mode.label(),
                pct(r.ct_mean),
                pct(r.mr_mean),
                pct(mean)
            );
        }
        out
    }
}

pub fn cell_name(text: bool, mode: TrainMode) -> String {
    let m = match mode {
        TrainMode::Alt => "alt",
        TrainMode::CtOnly => "ct_only",
        TrainMode::MrOnly => "mr_only",
    };
    format!("{}_{m}", if text { "text" } else { "vision" })
}

/// Trains and evaluates every (text, mode) cell of `cfg.ablation` on the
/// test split, each in `output_dir/<cell>`.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &text in &cfg.ablation.text {
        for &mode in &cfg.ablation.modes {
            let cell = cell_name(text, mode);
            let mut c = cfg.clone();
            c.text_embedding = text;
            c.train.mode = mode;
            c.output_dir = cfg.output_dir.join(&cell);
            let outcome = run_train(&c, false)?;
            let report = run_evaluate(
                &outcome.checkpoint,
                &c.manifest,
                c.embeddings.as_deref().filter(|_| text),
                &c.preprocess,
                &c.eval,
                Split::Test,
                false,
            )?;
            write(&c.output_dir.join(REPORT_FILE), serde_json::to_string_pretty(&report).expect("report serializes"))?;
            rows.push(AblationRow {
                cell,
                text,
                mode,
                ct_mean: report.modality(Modality::Ct).map(|s| s.mean),
                mr_mean: report.modality(Modality::Mr).map(|s| s.mean),
                report,
            });
        }
    }
    let report = AblationReport { rows };
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write(&cfg.output_dir.join("ablation.json"), serde_json::to_string_pretty(&report).expect("report serializes"))?;
    write(&cfg.output_dir.join("ablation.txt"), report.render_table())?;
    Ok(report)
}
