//! Encoder-decoder vision backbones behind one feature contract: the last
//! encoder map (`S1` channels, downsampled) and the last decoder map (`S2`
//! channels, input resolution).

mod swin;
mod unet;

use modseg_tensor::{ParamStore, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use swin::Swin3d;
pub use unet::Unet3d;

use crate::error::{bail, Result};
use crate::nn::{Builder, Ctx};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Unet3d,
    Swin3d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// `S2`: channels of the last decoder map.
    pub base_channels: usize,
    /// Number of 2x downsamplings (unet3d only; swin3d is fixed at 5).
    pub depth: usize,
    pub patch_size: usize,
    /// Attention window edge (swin3d), clamped to the feature size.
    pub window_size: usize,
    /// Target channels per attention head (swin3d).
    pub head_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Unet3d,
            base_channels: 64,
            depth: 3,
            patch_size: 96,
            window_size: 7,
            head_dim: 16,
        }
    }
}

impl BackboneConfig {
    pub fn unet(base_channels: usize, depth: usize, patch_size: usize) -> Self {
        BackboneConfig { kind: BackboneKind::Unet3d, base_channels, depth, patch_size, ..Default::default() }
    }

    pub fn swin(base_channels: usize, patch_size: usize) -> Self {
        BackboneConfig { kind: BackboneKind::Swin3d, base_channels, depth: 5, patch_size, ..Default::default() }
    }

    /// Small configuration used by tests and desk-scale experiments.
    pub fn toy() -> Self {
        Self::unet(8, 3, 32)
    }

    pub fn num_downsamplings(&self) -> usize {
        match self.kind {
            BackboneKind::Unet3d => self.depth,
            BackboneKind::Swin3d => 5,
        }
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.num_downsamplings()
    }

    pub fn s1(&self) -> usize {
        match self.kind {
            BackboneKind::Unet3d => self.base_channels << self.depth,
            BackboneKind::Swin3d => self.base_channels * 16,
        }
    }

    pub fn s2(&self) -> usize {
        self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            bail!(Config, "base_channels must be positive");
        }
        if self.kind == BackboneKind::Unet3d && !(1..=8).contains(&self.depth) {
            bail!(Config, "unet3d depth must be in 1..=8, got {}", self.depth);
        }
        if self.kind == BackboneKind::Swin3d && (self.window_size == 0 || self.head_dim == 0) {
            bail!(Config, "swin3d window_size and head_dim must be positive");
        }
        let f = self.downsample_factor();
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(f) {
            bail!(Config, "patch size {} is not divisible by the downsampling factor {f}", self.patch_size);
        }
        Ok(())
    }

    /// Shapes of `(f_enc_last, f_dec_last)` for a batch of input patches.
    pub fn feature_shapes(&self, batch: usize) -> ([usize; 5], [usize; 5]) {
        let p = self.patch_size;
        let q = p / self.downsample_factor();
        ([batch, self.s1(), q, q, q], [batch, self.s2(), p, p, p])
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash_hex(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

pub struct FeatureBundle<T: Scalar> {
    pub f_enc_last: Var<T>,
    pub f_dec_last: Var<T>,
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Unet3d(Unet3d),
    Swin3d(Swin3d),
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        match self {
            Backbone::Unet3d(n) => &n.cfg,
            Backbone::Swin3d(n) => &n.cfg,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: Ctx<T>, images: &Var<T>) -> Result<FeatureBundle<T>> {
        let s = images.shape();
        let f = self.config().downsample_factor();
        if s.len() != 5 || s[1] != 1 {
            bail!(Shape, "backbone expects (B, 1, H, W, D) input, got {s:?}");
        }
        if s[2..].iter().any(|&d| d == 0 || d % f != 0) {
            bail!(Shape, "spatial dims {:?} must be divisible by {f}", &s[2..]);
        }
        match self {
            Backbone::Unet3d(n) => n.forward(ctx, images),
            Backbone::Swin3d(n) => n.forward(ctx, images),
        }
    }
}

/// Registers backbone parameters under `prefix` and returns the network.
pub fn build_backbone<T: Scalar, R: Rng>(
    cfg: &BackboneConfig,
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
) -> Result<Backbone> {
    cfg.validate()?;
    let mut bld = Builder::new(store, rng, prefix);
    Ok(match cfg.kind {
        BackboneKind::Unet3d => Backbone::Unet3d(Unet3d::new(cfg.clone(), &mut bld)),
        BackboneKind::Swin3d => Backbone::Swin3d(Swin3d::new(cfg.clone(), &mut bld)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use modseg_tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(cfg: &BackboneConfig, batch: usize) -> (Vec<usize>, Vec<usize>, Vec<f32>) {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = build_backbone(cfg, &mut store, &mut rng, "backbone").unwrap();
        let p = cfg.patch_size;
        let x = Tensor::uniform(&[batch, 1, p, p, p], 0.0, 1.0, &mut rng);
        let out = net.forward(Ctx::new(&store, false), &Var::constant(x)).unwrap();
        (out.f_enc_last.shape().to_vec(), out.f_dec_last.shape().to_vec(), out.f_dec_last.value().data().to_vec())
    }

    #[test]
    fn toy_unet_shapes() {
        let cfg = BackboneConfig::toy();
        let (enc, dec, _) = run(&cfg, 2);
        assert_eq!(enc, [2, 64, 4, 4, 4]);
        assert_eq!(dec, [2, 8, 32, 32, 32]);
        let (e, d) = cfg.feature_shapes(2);
        assert_eq!((e.to_vec(), d.to_vec()), (enc, dec));
    }

    #[test]
    fn full_scale_shape_inference() {
        let deep = BackboneConfig::unet(64, 5, 96);
        deep.validate().unwrap();
        let (enc, dec) = deep.feature_shapes(1);
        assert_eq!(enc[2..], [3, 3, 3]);
        assert_eq!(dec, [1, 64, 96, 96, 96]);
        assert!(deep.s1() > deep.s2());
        let swin = BackboneConfig::swin(48, 96);
        swin.validate().unwrap();
        let (enc, dec) = swin.feature_shapes(1);
        assert_eq!(enc, [1, 768, 3, 3, 3]);
        assert_eq!(dec, [1, 48, 96, 96, 96]);
    }

    #[test]
    fn indivisible_patch_is_config_error() {
        assert!(matches!(BackboneConfig::unet(8, 3, 36).validate(), Err(crate::Error::Config(_))));
        assert!(BackboneConfig::swin(12, 48).validate().is_err());
    }

    #[test]
    fn swin_shapes_and_determinism() {
        let cfg = BackboneConfig { window_size: 4, ..BackboneConfig::swin(6, 32) };
        let (enc, dec, a) = run(&cfg, 2);
        assert_eq!(enc, [2, 96, 1, 1, 1]);
        assert_eq!(dec, [2, 6, 32, 32, 32]);
        let (_, _, b) = run(&cfg, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn unet_large_patch_tiny_channels() {
        let cfg = BackboneConfig::unet(2, 3, 96);
        let (enc, dec, _) = run(&cfg, 1);
        assert_eq!(enc, [1, 16, 12, 12, 12]);
        assert_eq!(dec, [1, 2, 96, 96, 96]);
    }

    #[test]
    fn wrong_input_is_shape_error() {
        let cfg = BackboneConfig::toy();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = build_backbone(&cfg, &mut store, &mut rng, "b").unwrap();
        let ctx = Ctx::new(&store, false);
        let two_channels = Var::constant(Tensor::zeros(&[1, 2, 32, 32, 32]));
        assert!(matches!(net.forward(ctx, &two_channels), Err(crate::Error::Shape(_))));
        let rank4 = Var::constant(Tensor::zeros(&[1, 32, 32, 32]));
        assert!(net.forward(ctx, &rank4).is_err());
        let odd = Var::constant(Tensor::zeros(&[1, 1, 20, 32, 32]));
        assert!(net.forward(ctx, &odd).is_err());
    }

    #[test]
    fn unet_param_count_at_defaults() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        build_backbone(&BackboneConfig::default(), &mut store, &mut rng, "backbone").unwrap();
        let n = store.num_scalars() as f64;
        assert!((n / 19.1e6 - 1.0).abs() < 0.15, "{n}");
    }
}
