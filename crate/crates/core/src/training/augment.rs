use modseg_tensor::Scalar;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::PatchBatch;

/// Random intensity shift (`v + o`) and scale (`v * (1 + f)`) with
/// `o, f ~ U(-magnitude, magnitude)`, applied per patch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub shift_prob: f64,
    pub shift: f64,
    pub scale_prob: f64,
    pub scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { enabled: true, shift_prob: 0.1, shift: 0.1, scale_prob: 0.1, scale: 0.1 }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig { enabled: false, ..Default::default() }
    }
}

pub fn shift_intensity<T: Scalar>(values: &mut [T], offset: f64) {
    let o = T::lit(offset);
    values.iter_mut().for_each(|v| *v += o);
}

pub fn scale_intensity<T: Scalar>(values: &mut [T], factor: f64) {
    let f = T::lit(1.0 + factor);
    values.iter_mut().for_each(|v| *v *= f);
}

/// Augments images in place; labels are never touched.
pub fn augment<T: Scalar, R: Rng>(batch: &mut PatchBatch<T>, cfg: &AugmentConfig, rng: &mut R) {
    if !cfg.enabled {
        return;
    }
    let b = batch.batch_size();
    let n = batch.images.numel() / b.max(1);
    for bi in 0..b {
        let patch = &mut batch.images.data_mut()[bi * n..(bi + 1) * n];
        if rng.gen::<f64>() < cfg.shift_prob {
            shift_intensity(patch, rng.gen_range(-cfg.shift..=cfg.shift));
        }
        if rng.gen::<f64>() < cfg.scale_prob {
            scale_intensity(patch, rng.gen_range(-cfg.scale..=cfg.scale));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Modality, Patch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch() -> PatchBatch<f64> {
        let p = |i: usize| Patch {
            id: format!("p{i}"),
            modality: Modality::Ct,
            size: 2,
            image: (0..8).map(|v| (v + i) as f64 / 10.0).collect(),
            labels: vec![1; 8],
        };
        PatchBatch::new(vec![p(0), p(1), p(2)], 2).unwrap()
    }

    #[test]
    fn disabled_is_identity() {
        let mut b = batch();
        let before = b.images.clone();
        augment(&mut b, &AugmentConfig::disabled(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(b.images, before);
    }

    #[test]
    fn shift_example() {
        let mut v = vec![0.5f64; 8];
        shift_intensity(&mut v, 0.1);
        assert!(v.iter().all(|&x| (x - 0.6).abs() < 1e-15));
        scale_intensity(&mut v, -0.5);
        assert!(v.iter().all(|&x| (x - 0.3).abs() < 1e-15));
    }

    #[test]
    fn seeded_and_label_preserving() {
        let cfg = AugmentConfig { shift_prob: 1.0, scale_prob: 1.0, ..Default::default() };
        let (mut a, mut b) = (batch(), batch());
        augment(&mut a, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        augment(&mut b, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a.images, b.images);
        assert_ne!(a.images, batch().images);
        assert_eq!(a.labels, vec![1; 24]);
    }
}
