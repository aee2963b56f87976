//! Experiment configuration: one TOML file with full defaulting, dotted
//! `key=value` overrides on top (flag > file > default), and cross-field
//! validation before any compute starts.
//!
//! ```toml
//! seed = 0
//! manifest = "data/manifest.jsonl"
//! embeddings = "data/embeddings.mmemb"
//! output_dir = "runs/toy"
//! text_embedding = true
//!
//! [backbone]
//! kind = "unet3d"
//! base_channels = 8
//! patch_size = 32
//!
//! [train]
//! epochs = 100
//! mode = "alt"
//! ```
//!
//! `train.patch_size`, `preprocess.patch` and `eval.window.roi` default to
//! `backbone.patch_size`; `train.seed` always equals the top-level `seed`.
//! Relative paths are resolved against the config file's directory, except
//! that a relative `output_dir` is placed under `$MODSEG_OUTPUT_ROOT` when
//! that variable is set.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Value;

use crate::backbone::BackboneConfig;
use crate::data::PreprocessSpec;
use crate::error::{bail, Error, Result};
use crate::eval::EvalConfig;
use crate::head::HeadConfig;
use crate::model::ModelConfig;
use crate::prompts::PromptTemplate;
use crate::training::{TrainConfig, TrainMode};

pub const OUTPUT_ROOT_ENV: &str = "MODSEG_OUTPUT_ROOT";

/// Head settings; the dimensions are normally derived from the backbone
/// and the embedding table, but may be pinned for a consistency check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    pub c_pre: usize,
    pub hidden: usize,
    pub activation: bool,
    pub s1: Option<usize>,
    pub s2: Option<usize>,
    pub d_txt: Option<usize>,
}

impl Default for HeadSection {
    fn default() -> Self {
        HeadSection { c_pre: 8, hidden: 256, activation: true, s1: None, s2: None, d_txt: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextSection {
    /// `hash:<dim>` or `cmd:<program args>`.
    pub encoder: String,
    pub template: PromptTemplate,
}

impl Default for TextSection {
    fn default() -> Self {
        TextSection { encoder: "hash:512".into(), template: PromptTemplate::V3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub text: Vec<bool>,
    pub modes: Vec<TrainMode>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection { text: vec![true, false], modes: vec![TrainMode::Alt, TrainMode::CtOnly, TrainMode::MrOnly] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub manifest: PathBuf,
    pub embeddings: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// `false` replaces the text-conditioned head with a plain conv head.
    pub text_embedding: bool,
    pub backbone: BackboneConfig,
    pub head: HeadSection,
    pub train: TrainConfig,
    pub preprocess: PreprocessSpec,
    pub eval: EvalConfig,
    pub text: TextSection,
    pub ablation: AblationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            manifest: PathBuf::from("manifest.jsonl"),
            embeddings: None,
            output_dir: PathBuf::from("runs/default"),
            text_embedding: true,
            backbone: BackboneConfig::default(),
            head: HeadSection::default(),
            train: TrainConfig::default(),
            preprocess: PreprocessSpec::default(),
            eval: EvalConfig::default(),
            text: TextSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a string.
fn parse_literal(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(Config, "bad override key {key:?}");
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| Value::Table(toml::Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => bail!(Config, "override {key:?}: {part} is not a table"),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn get_path<'a>(root: &'a toml::Table, key: &str) -> Option<&'a Value> {
    let mut parts = key.split('.');
    let mut v = root.get(parts.next()?)?;
    for p in parts {
        v = v.as_table()?.get(p)?;
    }
    Some(v)
}

impl ExperimentConfig {
    /// Builds a config from TOML text plus `key=value` overrides. Paths stay
    /// as written; see [`ExperimentConfig::load`] for resolution.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = text.parse().map_err(|e| Error::Config(format!("config: {e}")))?;
        for ov in overrides {
            let Some((k, v)) = ov.split_once('=') else {
                bail!(Config, "override {ov:?} is not key=value");
            };
            set_path(&mut root, k.trim(), parse_literal(v.trim()))?;
        }
        let patch = get_path(&root, "backbone.patch_size")
            .cloned()
            .unwrap_or(Value::Integer(BackboneConfig::default().patch_size as i64));
        for key in ["train.patch_size", "preprocess.patch", "eval.window.roi"] {
            if get_path(&root, key).is_none() {
                set_path(&mut root, key, patch.clone())?;
            }
        }
        let seed = get_path(&root, "seed").cloned().unwrap_or(Value::Integer(0));
        if get_path(&root, "train.seed").is_some_and(|s| *s != seed) {
            bail!(Config, "train.seed is taken from the top-level seed; set `seed` instead");
        }
        set_path(&mut root, "train.seed", seed)?;
        let cfg: ExperimentConfig =
            Value::Table(root).try_into().map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, overrides, resolves paths and validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base, std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).as_deref());
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path, output_root: Option<&Path>) {
        let abs = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        self.manifest = abs(&self.manifest);
        self.embeddings = self.embeddings.as_deref().map(abs);
        if self.output_dir.is_relative() {
            self.output_dir = match output_root {
                Some(root) => root.join(&self.output_dir),
                None => base.join(&self.output_dir),
            };
        }
    }

    /// Checks every constraint that does not need the input files.
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        self.preprocess.validate()?;
        self.eval.window.validate()?;
        let p = self.backbone.patch_size;
        if self.train.patch_size != p {
            bail!(Validation, "train.patch_size {} differs from backbone.patch_size {p}", self.train.patch_size);
        }
        if self.preprocess.patch != p {
            bail!(Validation, "preprocess.patch {} differs from backbone.patch_size {p}", self.preprocess.patch);
        }
        let roi = self.eval.window.roi;
        if !roi.is_multiple_of(self.backbone.downsample_factor()) {
            bail!(Validation, "eval roi {roi} is not divisible by the backbone downsampling factor");
        }
        if let Some(s1) = self.head.s1 {
            if s1 != self.backbone.s1() {
                bail!(Validation, "head.s1 = {s1} but the backbone produces S1 = {}", self.backbone.s1());
            }
        }
        if let Some(s2) = self.head.s2 {
            if s2 != self.backbone.s2() {
                bail!(Validation, "head.s2 = {s2} but the backbone produces S2 = {}", self.backbone.s2());
            }
        }
        if self.head.c_pre == 0 {
            bail!(Config, "head.c_pre must be positive");
        }
        if self.text_embedding && self.embeddings.is_none() {
            bail!(Config, "text_embedding = true needs an `embeddings` path");
        }
        if self.ablation.text.is_empty() || self.ablation.modes.is_empty() {
            bail!(Config, "ablation matrix must have at least one cell");
        }
        Ok(())
    }

    /// Model for `num_classes` classes and (text head only) `d_txt`.
    pub fn model_config(&self, num_classes: usize, d_txt: Option<usize>) -> Result<ModelConfig> {
        if !self.text_embedding {
            return Ok(ModelConfig::vision(self.backbone.clone(), num_classes));
        }
        let Some(d) = d_txt else {
            bail!(Config, "text-conditioned model needs the embedding dimension");
        };
        if let Some(want) = self.head.d_txt {
            if want != d {
                bail!(Validation, "head.d_txt = {want} but the embedding table has d_txt = {d}");
            }
        }
        let head = HeadConfig {
            c_pre: self.head.c_pre,
            hidden: self.head.hidden,
            activation: self.head.activation,
            ..HeadConfig::new(d, self.backbone.s1(), self.backbone.s2())
        };
        let cfg = ModelConfig { backbone: self.backbone.clone(), head: crate::model::HeadSpec::Text(head), num_classes };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
