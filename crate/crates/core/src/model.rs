//! Backbone plus head, with all parameters in one store.

use modseg_tensor::{ParamStore, Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{build_backbone, Backbone, BackboneConfig, FeatureBundle};
use crate::domain::Modality;
use crate::error::{bail, Result};
use crate::head::{HeadConfig, TextHead, VisionHead};
use crate::nn::{Builder, Ctx};
use crate::prompts::EmbeddingTable;

pub const BACKBONE_PREFIX: &str = "backbone";
pub const HEAD_PREFIX: &str = "head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadSpec {
    /// Text-conditioned dynamic head.
    Text(HeadConfig),
    /// Plain `K`-channel 1x1x1 convolution.
    Vision { num_classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadSpec,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn text(backbone: BackboneConfig, num_classes: usize, d_txt: usize) -> Self {
        let head = HeadConfig::new(d_txt, backbone.s1(), backbone.s2());
        ModelConfig { backbone, head: HeadSpec::Text(head), num_classes }
    }

    pub fn vision(backbone: BackboneConfig, num_classes: usize) -> Self {
        ModelConfig { backbone, head: HeadSpec::Vision { num_classes }, num_classes }
    }

    pub fn uses_text(&self) -> bool {
        matches!(self.head, HeadSpec::Text(_))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes == 0 {
            bail!(Config, "num_classes must be positive");
        }
        match &self.head {
            HeadSpec::Text(h) => {
                h.validate()?;
                if h.s1 != self.backbone.s1() {
                    bail!(Validation, "head.s1 = {} but the backbone produces S1 = {}", h.s1, self.backbone.s1());
                }
                if h.s2 != self.backbone.s2() {
                    bail!(Validation, "head.s2 = {} but the backbone produces S2 = {}", h.s2, self.backbone.s2());
                }
            }
            HeadSpec::Vision { num_classes } => {
                if *num_classes != self.num_classes {
                    bail!(Validation, "vision head has {num_classes} outputs for {} classes", self.num_classes);
                }
            }
        }
        Ok(())
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Clone, Debug)]
enum Head {
    Text(TextHead),
    Vision(VisionHead),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub head: usize,
    pub total: usize,
}

/// A segmentation network: shared backbone and a text or vision head.
#[derive(Clone, Debug)]
pub struct Segmenter<T: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    backbone: Backbone,
    head: Head,
}

impl<T: Scalar> Segmenter<T> {
    /// Builds the network with parameters drawn from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = build_backbone(&cfg.backbone, &mut store, &mut rng, BACKBONE_PREFIX)?;
        let mut bld = Builder::new(&mut store, &mut rng, HEAD_PREFIX);
        let head = match &cfg.head {
            HeadSpec::Text(h) => Head::Text(TextHead::new(h.clone(), &mut bld)?),
            HeadSpec::Vision { num_classes } => Head::Vision(VisionHead::new(cfg.backbone.s2(), *num_classes, &mut bld)),
        };
        Ok(Segmenter { cfg, store, backbone, head })
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    pub fn uses_text(&self) -> bool {
        self.cfg.uses_text()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn text_head(&self) -> Option<&TextHead> {
        match &self.head {
            Head::Text(h) => Some(h),
            Head::Vision(_) => None,
        }
    }

    pub fn forward_features(&self, images: &Var<T>, trainable: bool) -> Result<FeatureBundle<T>> {
        self.backbone.forward(Ctx::new(&self.store, trainable), images)
    }

    /// Class probabilities `(B, K, H, W, D)`. `modality` selects the text
    /// vectors; the backbone itself is modality-agnostic.
    pub fn forward(
        &self,
        images: &Var<T>,
        modality: Modality,
        table: Option<&EmbeddingTable>,
        trainable: bool,
    ) -> Result<Var<T>> {
        let ctx = Ctx::new(&self.store, trainable);
        let bundle = self.backbone.forward(ctx, images)?;
        match &self.head {
            Head::Text(h) => {
                let Some(table) = table else {
                    bail!(Config, "the text-conditioned head needs an embedding table");
                };
                if table.num_classes() != self.cfg.num_classes {
                    bail!(Compatibility, "table has {} classes, model {}", table.num_classes(), self.cfg.num_classes);
                }
                h.predict_all_classes(ctx, &bundle, table, modality)
            }
            Head::Vision(h) => h.predict_all_classes(ctx, &bundle),
        }
    }

    pub fn count_params(&self) -> ParamCounts {
        let backbone = self.store.num_scalars_with_prefix(&format!("{BACKBONE_PREFIX}."));
        let head = self.store.num_scalars_with_prefix(&format!("{HEAD_PREFIX}."));
        ParamCounts { backbone, head, total: self.store.num_scalars() }
    }
}
