//! Modality-specific intensity normalization and resampling.

use modseg_tensor::Scalar;
use serde::{Deserialize, Serialize};

use crate::domain::{LabelMask, Modality, Volume};
use crate::error::{bail, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSpec {
    /// CT intensity window `[lo, hi]` in HU.
    pub ct_window: [f64; 2],
    /// Percent of voxels clipped at each MR histogram tail.
    pub mr_percentile_clip: f64,
    pub target_spacing_mm: [f64; 3],
    /// Resample both modalities to `target_spacing_mm`.
    pub resample: bool,
    pub patch: usize,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec {
            ct_window: [-275.0, 125.0],
            mr_percentile_clip: 0.5,
            target_spacing_mm: [1.5, 1.5, 2.0],
            resample: true,
            patch: 96,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.ct_window;
        if !(lo < hi) {
            bail!(Config, "CT window lower bound {lo} must be below the upper bound {hi}");
        }
        if !(0.0..50.0).contains(&self.mr_percentile_clip) {
            bail!(Config, "MR percentile clip must be in [0, 50), got {}", self.mr_percentile_clip);
        }
        check_spacing(self.target_spacing_mm)?;
        if self.patch == 0 {
            bail!(Config, "patch size must be positive");
        }
        Ok(())
    }
}

fn check_spacing(s: [f64; 3]) -> Result<()> {
    if s.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        bail!(Config, "spacing must be positive, got {s:?}");
    }
    Ok(())
}

fn expect(vol_modality: Modality, want: Modality) -> Result<()> {
    if vol_modality != want {
        return Err(Error::Modality { expected: want.to_string(), got: vol_modality.to_string() });
    }
    Ok(())
}

/// Linear-interpolation percentile (`q` in percent) of an ascending slice,
/// the same rule as numpy's default.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty slice");
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn rescale<T: Scalar>(vol: &Volume<T>, lo: f64, hi: f64) -> Volume<T> {
    let span = hi - lo;
    let data = vol.data().iter().map(|&v| T::lit((v.as_f64().clamp(lo, hi) - lo) / span)).collect();
    vol.with_data(data).expect("same geometry")
}

fn maybe_resample<T: Scalar>(vol: &Volume<T>, spec: &PreprocessSpec) -> Result<Volume<T>> {
    if spec.resample {
        resample(vol, spec.target_spacing_mm)
    } else {
        Ok(vol.clone())
    }
}

/// Window clamp, linear map to `[0, 1]`, then resampling.
pub fn preprocess_ct<T: Scalar>(vol: &Volume<T>, spec: &PreprocessSpec) -> Result<Volume<T>> {
    expect(vol.modality, Modality::Ct)?;
    spec.validate()?;
    let [lo, hi] = spec.ct_window;
    maybe_resample(&rescale(vol, lo, hi), spec)
}

/// Resampling, then percentile clip and min-max to `[0, 1]`.
pub fn preprocess_mr<T: Scalar>(vol: &Volume<T>, spec: &PreprocessSpec) -> Result<Volume<T>> {
    expect(vol.modality, Modality::Mr)?;
    spec.validate()?;
    let vol = maybe_resample(vol, spec)?;
    let mut sorted: Vec<f64> = vol.data().iter().map(|v| v.as_f64()).collect();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile(&sorted, spec.mr_percentile_clip);
    let hi = percentile(&sorted, 100.0 - spec.mr_percentile_clip);
    if !(hi > lo) {
        return Err(Error::DegenerateRange(format!("MR volume {} (clip bounds {lo}..{hi})", vol.id)));
    }
    Ok(rescale(&vol, lo, hi))
}

/// Dispatches on the volume's modality.
pub fn preprocess<T: Scalar>(vol: &Volume<T>, spec: &PreprocessSpec) -> Result<Volume<T>> {
    match vol.modality {
        Modality::Ct => preprocess_ct(vol, spec),
        Modality::Mr => preprocess_mr(vol, spec),
    }
}

/// Per-axis source coordinates of output voxel centers.
fn axis_map(n_in: usize, s_in: f64, s_out: f64) -> Vec<f64> {
    let n_out = ((n_in as f64 * s_in / s_out).round() as usize).max(1);
    let r = s_out / s_in;
    (0..n_out).map(|o| ((o as f64 + 0.5) * r - 0.5).clamp(0.0, (n_in - 1) as f64)).collect()
}

fn axis_maps(dims: [usize; 3], from: [f64; 3], to: [f64; 3]) -> [Vec<f64>; 3] {
    [0, 1, 2].map(|a| axis_map(dims[a], from[a], to[a]))
}

/// Trilinear resampling to `target` spacing. Output voxel centers keep
/// the physical position of the source grid.
pub fn resample<T: Scalar>(vol: &Volume<T>, target: [f64; 3]) -> Result<Volume<T>> {
    check_spacing(target)?;
    let dims = vol.dims();
    if vol.spacing == target {
        return Ok(vol.clone());
    }
    let maps = axis_maps(dims, vol.spacing, target);
    let split = |m: &Vec<f64>, n: usize| -> Vec<(usize, usize, f64)> {
        m.iter()
            .map(|&x| {
                let lo = x.floor() as usize;
                (lo, (lo + 1).min(n - 1), x - lo as f64)
            })
            .collect()
    };
    let (ax, ay, az) = (split(&maps[0], dims[0]), split(&maps[1], dims[1]), split(&maps[2], dims[2]));
    let src = vol.data();
    let at = |i: usize, j: usize, k: usize| src[(i * dims[1] + j) * dims[2] + k].as_f64();
    let mut out = Vec::with_capacity(ax.len() * ay.len() * az.len());
    for &(i0, i1, fx) in &ax {
        for &(j0, j1, fy) in &ay {
            for &(k0, k1, fz) in &az {
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let c00 = lerp(at(i0, j0, k0), at(i0, j0, k1), fz);
                let c01 = lerp(at(i0, j1, k0), at(i0, j1, k1), fz);
                let c10 = lerp(at(i1, j0, k0), at(i1, j0, k1), fz);
                let c11 = lerp(at(i1, j1, k0), at(i1, j1, k1), fz);
                out.push(T::lit(lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fx)));
            }
        }
    }
    let mut res = Volume::new(vol.id.clone(), vol.modality, [ax.len(), ay.len(), az.len()], target, out)?;
    res.spacing = target;
    Ok(res)
}

/// Nearest-neighbour label resampling on the same grid as [`resample`].
pub fn resample_labels(mask: &LabelMask, from: [f64; 3], target: [f64; 3]) -> Result<LabelMask> {
    check_spacing(from)?;
    check_spacing(target)?;
    if from == target {
        return Ok(mask.clone());
    }
    let dims = mask.dims();
    let maps = axis_maps(dims, from, target).map(|m| m.iter().map(|&x| (x + 0.5).floor() as usize).collect::<Vec<_>>());
    let src = mask.data();
    let mut out = Vec::with_capacity(maps.iter().map(Vec::len).product());
    for &i in &maps[0] {
        for &j in &maps[1] {
            for &k in &maps[2] {
                out.push(src[(i.min(dims[0] - 1) * dims[1] + j.min(dims[1] - 1)) * dims[2] + k.min(dims[2] - 1)]);
            }
        }
    }
    LabelMask::new(mask.id.clone(), mask.classes.clone(), [maps[0].len(), maps[1].len(), maps[2].len()], out)
}
