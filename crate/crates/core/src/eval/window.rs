use modseg_tensor::{Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::domain::{Modality, Volume};
use crate::error::{bail, Result};
use crate::model::Segmenter;
use crate::prompts::EmbeddingTable;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Blend {
    /// Plain average of overlapping windows.
    #[default]
    Uniform,
    /// Window-centred Gaussian weights with sigma = roi / 8.
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub roi: usize,
    pub overlap: f64,
    pub blend: Blend,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { roi: 96, overlap: 0.5, blend: Blend::Uniform }
    }
}

impl WindowConfig {
    pub fn stride(&self) -> usize {
        ((self.roi as f64 * (1.0 - self.overlap)).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.roi == 0 {
            bail!(Config, "roi must be positive");
        }
        if !(0.0..1.0).contains(&self.overlap) {
            bail!(Config, "overlap must be in [0, 1), got {}", self.overlap);
        }
        Ok(())
    }
}

/// Each axis is zero-padded up to a whole number of ROIs.
pub fn padded_len(len: usize, roi: usize) -> usize {
    len.div_ceil(roi).max(1) * roi
}

/// Window origins along one axis of length `len` after padding.
pub fn window_starts(len: usize, roi: usize, stride: usize) -> Vec<usize> {
    let last = padded_len(len, roi) - roi;
    let mut starts: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

fn gaussian_weights(roi: usize) -> Vec<f64> {
    let sigma = roi as f64 / 8.0;
    let c = (roi as f64 - 1.0) / 2.0;
    let axis: Vec<f64> = (0..roi).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let mut w = Vec::with_capacity(roi * roi * roi);
    for &a in &axis {
        for &b in &axis {
            for &c in &axis {
                w.push((a * b * c).max(1e-6));
            }
        }
    }
    w
}

/// Tiles `vol` with cubic windows, runs `predict` on each `(1, 1, r, r, r)`
/// window and blends the `(1, K, r, r, r)` outputs into `(K, H, W, D)`.
/// Accumulation is in f64.
pub fn sliding_window_predict<T, F>(vol: &Volume<T>, cfg: &WindowConfig, mut predict: F) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
{
    cfg.validate()?;
    let r = cfg.roi;
    let dims = vol.dims();
    let stride = cfg.stride();
    let starts = dims.map(|d| window_starts(d, r, stride));
    let n = dims.iter().product::<usize>();
    let weights = match cfg.blend {
        Blend::Uniform => None,
        Blend::Gaussian => Some(gaussian_weights(r)),
    };
    let mut acc: Vec<f64> = Vec::new();
    let mut norm = vec![0f64; n];
    let mut k = 0;
    let mut window = vec![T::zero(); r * r * r];
    for &s0 in &starts[0] {
        for &s1 in &starts[1] {
            for &s2 in &starts[2] {
                let origin = [s0, s1, s2];
                let ext = [0, 1, 2].map(|a| r.min(dims[a].saturating_sub(origin[a])));
                if ext.contains(&0) {
                    continue;
                }
                window.fill(T::zero());
                for i in 0..ext[0] {
                    for j in 0..ext[1] {
                        let src = vol.offset(s0 + i, s1 + j, s2);
                        let dst = (i * r + j) * r;
                        window[dst..dst + ext[2]].copy_from_slice(&vol.data()[src..src + ext[2]]);
                    }
                }
                let out = predict(&Tensor::new(&[1, 1, r, r, r], window.clone())?)?;
                let s = out.shape();
                if s.len() != 5 || s[0] != 1 || s[2..] != [r, r, r] {
                    bail!(Shape, "window model returned {s:?} for a {r}^3 window");
                }
                if k == 0 {
                    k = s[1];
                    acc = vec![0f64; k * n];
                } else if s[1] != k {
                    bail!(Shape, "window model changed its class count from {k} to {}", s[1]);
                }
                let od = out.data();
                for i in 0..ext[0] {
                    for j in 0..ext[1] {
                        for l in 0..ext[2] {
                            let wi = (i * r + j) * r + l;
                            let w = weights.as_ref().map_or(1.0, |w| w[wi]);
                            let vi = vol.offset(s0 + i, s1 + j, s2 + l);
                            norm[vi] += w;
                            for c in 0..k {
                                acc[c * n + vi] += w * od[c * r * r * r + wi].as_f64();
                            }
                        }
                    }
                }
            }
        }
    }
    let data = acc.iter().enumerate().map(|(i, &a)| T::lit(a / norm[i % n])).collect();
    Ok(Tensor::new(&[k, dims[0], dims[1], dims[2]], data)?)
}

/// Class probabilities `(K, H, W, D)` for a full volume.
pub fn predict_volume<T: Scalar>(
    model: &Segmenter<T>,
    vol: &Volume<T>,
    table: Option<&EmbeddingTable>,
    prompt_modality: Modality,
    cfg: &WindowConfig,
) -> Result<Tensor<T>> {
    sliding_window_predict(vol, cfg, |w| {
        Ok(model.forward(&Var::constant(w.clone()), prompt_modality, table, false)?.value().clone())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts() {
        assert_eq!(window_starts(96, 96, 48), vec![0]);
        assert_eq!(window_starts(144, 96, 48), vec![0, 48, 96]);
        assert_eq!(window_starts(40, 96, 48), vec![0]);
        assert_eq!(window_starts(100, 32, 20), vec![0, 20, 40, 60, 80, 96]);
        assert_eq!(padded_len(144, 96), 192);
    }

    fn ramp(dims: [usize; 3]) -> Volume<f32> {
        let n = dims.iter().product::<usize>();
        Volume::new("r", Modality::Ct, dims, [1.0; 3], (0..n).map(|i| (i % 97) as f32 / 97.0).collect()).unwrap()
    }

    #[test]
    fn constant_model_gives_constant_output() {
        let vol = ramp([10, 7, 13]);
        for blend in [Blend::Uniform, Blend::Gaussian] {
            let cfg = WindowConfig { roi: 4, overlap: 0.5, blend };
            let out = sliding_window_predict(&vol, &cfg, |_| Ok(Tensor::full(&[1, 2, 4, 4, 4], 0.3f32))).unwrap();
            assert_eq!(out.shape(), &[2, 10, 7, 13]);
            assert!(out.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
        }
    }

    #[test]
    fn per_voxel_model_matches_whole_volume() {
        let vol = ramp([9, 12, 5]);
        let f = |x: f32| x * x * 0.5 + 0.1;
        let cfg = WindowConfig { roi: 4, overlap: 0.5, blend: Blend::Uniform };
        let out = sliding_window_predict(&vol, &cfg, |w| Ok(w.map(f))).unwrap();
        let whole: Vec<f32> = vol.data().iter().map(|&v| f(v)).collect();
        assert_eq!(out.data(), &whole[..]);
    }

    #[test]
    fn bad_config() {
        let vol = ramp([4, 4, 4]);
        let cfg = WindowConfig { roi: 4, overlap: 1.0, blend: Blend::Uniform };
        assert!(sliding_window_predict(&vol, &cfg, |w| Ok(w.clone())).is_err());
    }
}
