//! Self-describing checkpoint container.
//!
//! ```text
//! magic    8 bytes "MMSEGCKP"
//! version  u32
//! hdr_len  u64, followed by hdr_len bytes of JSON (CheckpointHeader)
//! tensors  parameters in store order, then for each parameter with
//!          optimizer state its first and second moments, all
//!          little-endian in the header's dtype
//! ```

use std::path::Path;

use modseg_tensor::{AdamW, AdamWConfig, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use super::trainer::{EpochSummary, TrainConfig, TrainState, Trainer};
use crate::data::Case;
use crate::error::{bail, Error, Result};
use crate::model::{ModelConfig, Segmenter};
use crate::prompts::{EmbeddingHeader, EmbeddingTable};

pub const CKPT_MAGIC: &[u8; 8] = b"MMSEGCKP";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub config: AdamWConfig,
    pub step: u64,
    /// Which parameters carry moment buffers.
    pub present: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub model: ModelConfig,
    pub model_hash: String,
    pub train: Option<TrainConfig>,
    pub state: Option<TrainState>,
    #[serde(default)]
    pub history: Vec<EpochSummary>,
    pub embeddings: Option<EmbeddingHeader>,
    pub params: Vec<TensorMeta>,
    pub optimizer: Option<OptimizerMeta>,
}

pub struct Checkpoint<T: Scalar> {
    pub header: CheckpointHeader,
    pub params: Vec<Tensor<T>>,
    pub first: Vec<Option<Tensor<T>>>,
    pub second: Vec<Option<Tensor<T>>>,
}

fn dtype_of<T: Scalar>() -> &'static str {
    if std::mem::size_of::<T>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

impl<T: Scalar> Checkpoint<T> {
    /// Weights only, for inference.
    pub fn from_model(model: &Segmenter<T>, embeddings: Option<&EmbeddingHeader>) -> Self {
        let (metas, params) = model
            .store
            .iter()
            .map(|(_, p)| (TensorMeta { name: p.name.clone(), shape: p.value.shape().to_vec() }, p.value.clone()))
            .unzip();
        let header = CheckpointHeader {
            dtype: dtype_of::<T>().into(),
            model: model.cfg.clone(),
            model_hash: model.cfg.hash_hex(),
            train: None,
            state: None,
            history: Vec::new(),
            embeddings: embeddings.cloned(),
            params: metas,
            optimizer: None,
        };
        Checkpoint { header, params, first: Vec::new(), second: Vec::new() }
    }

    /// Full resumable state.
    pub fn from_trainer(tr: &Trainer<T>) -> Self {
        let mut ck = Self::from_model(&tr.model, tr.table().map(EmbeddingTable::header));
        let (step, first, second) = tr.opt.state();
        ck.header.train = Some(tr.cfg.clone());
        ck.header.state = Some(tr.state.clone());
        ck.header.history = tr.history.clone();
        ck.header.optimizer = Some(OptimizerMeta {
            config: tr.opt.config,
            step,
            present: first.iter().map(Option::is_some).collect(),
        });
        ck.first = first.to_vec();
        ck.second = second.to_vec();
        ck
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let moments = self.first.iter().zip(&self.second).filter_map(|(m, v)| Some([m.as_ref()?, v.as_ref()?]));
        for t in self.params.iter().chain(moments.flatten()) {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CKPT_MAGIC {
            bail!(Format, "not a checkpoint (bad magic)");
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CKPT_VERSION {
            bail!(Format, "unsupported checkpoint version {version}");
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20usize.saturating_add(hlen)).ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            d => bail!(Format, "unknown checkpoint dtype {d:?}"),
        };
        let mut pos = 20 + hlen;
        let mut read = |shape: &[usize]| -> Result<Tensor<T>> {
            let n: usize = shape.iter().product();
            let Some(raw) = bytes.get(pos..pos + n * width) else {
                bail!(Format, "truncated checkpoint payload");
            };
            pos += n * width;
            let data = raw
                .chunks_exact(width)
                .map(|c| match width {
                    4 => T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                    _ => T::lit(f64::from_le_bytes(c.try_into().unwrap())),
                })
                .collect();
            Ok(Tensor::new(shape, data)?)
        };
        let params = header.params.iter().map(|m| read(&m.shape)).collect::<Result<Vec<_>>>()?;
        let (mut first, mut second) = (Vec::new(), Vec::new());
        if let Some(opt) = &header.optimizer {
            if opt.present.len() != header.params.len() {
                bail!(Format, "optimizer state covers {} of {} parameters", opt.present.len(), header.params.len());
            }
            for (meta, &has) in header.params.iter().zip(&opt.present) {
                if has {
                    first.push(Some(read(&meta.shape)?));
                    second.push(Some(read(&meta.shape)?));
                } else {
                    first.push(None);
                    second.push(None);
                }
            }
        }
        if pos != bytes.len() {
            bail!(Format, "{} trailing bytes in checkpoint", bytes.len() - pos);
        }
        Ok(Checkpoint { header, params, first, second })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the network and copies the stored weights into it.
    pub fn to_model(&self) -> Result<Segmenter<T>> {
        if self.header.model.hash_hex() != self.header.model_hash {
            bail!(Compatibility, "checkpoint model config does not match its recorded hash");
        }
        let mut model = Segmenter::new(self.header.model.clone(), 0)?;
        if model.store.len() != self.params.len() {
            bail!(Compatibility, "checkpoint has {} tensors, model expects {}", self.params.len(), model.store.len());
        }
        let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec())).collect();
        for ((id, name, shape), (meta, value)) in ids.into_iter().zip(self.header.params.iter().zip(&self.params)) {
            if name != meta.name || shape != meta.shape {
                bail!(Compatibility, "checkpoint tensor {} {:?} does not match model tensor {name} {shape:?}", meta.name, meta.shape);
            }
            *model.store.value_mut(id) = value.clone();
        }
        Ok(model)
    }
}

/// Loads weights for inference.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(Segmenter<T>, CheckpointHeader)> {
    let ck = Checkpoint::<T>::load(path)?;
    Ok((ck.to_model()?, ck.header))
}

impl<T: Scalar> Trainer<T> {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        Checkpoint::from_trainer(self).save(path)
    }

    /// Restores a run written by [`Trainer::save_checkpoint`]; training
    /// continues at the next epoch with the same schedule, rng streams and
    /// loader positions.
    pub fn resume(path: &Path, table: Option<EmbeddingTable>, ct: Vec<Case>, mr: Vec<Case>) -> Result<Self> {
        let ck = Checkpoint::<T>::load(path)?;
        let (Some(cfg), Some(state), Some(opt_meta)) = (&ck.header.train, &ck.header.state, &ck.header.optimizer) else {
            bail!(Compatibility, "{} holds weights only and cannot be resumed", path.display());
        };
        if let (Some(want), Some(t)) = (&ck.header.embeddings, &table) {
            if want != t.header() {
                bail!(Compatibility, "embedding table differs from the one used for training");
            }
        }
        let model = ck.to_model()?;
        let mut tr = Trainer::new(cfg.clone(), model, table, ct, mr)?;
        if tr.state.ct_loader.n_samples() != state.ct_loader.n_samples()
            || tr.state.mr_loader.n_samples() != state.mr_loader.n_samples()
        {
            bail!(Compatibility, "training set sizes differ from the checkpointed run");
        }
        let opt = AdamW::restore(opt_meta.config, opt_meta.step, ck.first, ck.second);
        tr.restore(opt, state.clone(), ck.header.history.clone());
        Ok(tr)
    }
}
