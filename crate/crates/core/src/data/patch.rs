use modseg_tensor::Scalar;
use rand::Rng;

use crate::domain::{LabelMask, Patch, Volume};
use crate::error::Result;

/// Patch origin along one axis so that `center` lies inside the patch.
fn origin_around(center: usize, n: usize, p: usize) -> usize {
    if n <= p {
        0
    } else {
        center.saturating_sub(p / 2).min(n - p)
    }
}

/// Draws one cubic patch. With probability `fg_prob` (and if the mask has
/// any foreground) the patch is centred on a uniformly chosen foreground
/// voxel; otherwise the origin is uniform over valid positions. Axes
/// shorter than the patch are zero-padded at the far end.
pub fn sample_patch<T: Scalar, R: Rng>(
    vol: &Volume<T>,
    mask: &LabelMask,
    patch_size: usize,
    fg_prob: f64,
    rng: &mut R,
) -> Result<Patch<T>> {
    mask.check_aligned(vol)?;
    let dims = vol.dims();
    let p = patch_size;
    let want_fg = rng.gen::<f64>() < fg_prob;
    let fg_count = if want_fg { mask.data().iter().filter(|&&v| v != 0).count() } else { 0 };
    let origin: [usize; 3] = if fg_count > 0 {
        let pick = rng.gen_range(0..fg_count);
        let flat = mask.data().iter().enumerate().filter(|(_, &v)| v != 0).nth(pick).expect("pick < count").0;
        let c = [flat / (dims[1] * dims[2]), (flat / dims[2]) % dims[1], flat % dims[2]];
        [0, 1, 2].map(|a| origin_around(c[a], dims[a], p))
    } else {
        [0, 1, 2].map(|a| if dims[a] > p { rng.gen_range(0..=dims[a] - p) } else { 0 })
    };
    let n = p * p * p;
    let mut image = vec![T::zero(); n];
    let mut labels = vec![0u8; n];
    let ext = [0, 1, 2].map(|a| p.min(dims[a] - origin[a]));
    for i in 0..ext[0] {
        for j in 0..ext[1] {
            let src = vol.offset(origin[0] + i, origin[1] + j, origin[2]);
            let dst = (i * p + j) * p;
            image[dst..dst + ext[2]].copy_from_slice(&vol.data()[src..src + ext[2]]);
            labels[dst..dst + ext[2]].copy_from_slice(&mask.data()[src..src + ext[2]]);
        }
    }
    Ok(Patch { id: vol.id.clone(), modality: vol.modality, size: p, image, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ClassTable, Modality};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    use std::sync::Arc;

    fn case(dims: [usize; 3], fg: &[[usize; 3]]) -> (Volume<f32>, LabelMask) {
        let n: usize = dims.iter().product();
        let vol = Volume::new("v", Modality::Ct, dims, [1.0; 3], (0..n).map(|i| i as f32 + 1.0).collect()).unwrap();
        let mut lab = vec![0u8; n];
        for c in fg {
            lab[(c[0] * dims[1] + c[1]) * dims[2] + c[2]] = 1;
        }
        let classes = Arc::new(ClassTable::new(&["x"], "t").unwrap());
        (vol, LabelMask::new("v", classes, dims, lab).unwrap())
    }

    #[test]
    fn forced_foreground_contains_the_voxel() {
        let (vol, mask) = case([20, 18, 16], &[[17, 2, 9]]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = sample_patch(&vol, &mask, 6, 1.0, &mut rng).unwrap();
            assert_eq!(p.labels.iter().filter(|&&v| v == 1).count(), 1);
        }
    }

    #[test]
    fn background_origins_are_uniform() {
        let (vol, mask) = case([6, 6, 6], &[[0, 0, 0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 27];
        let draws = 1000;
        for _ in 0..draws {
            let p = sample_patch(&vol, &mask, 4, 0.0, &mut rng).unwrap();
            // first voxel value encodes the origin
            let flat = p.image[0] as usize - 1;
            let (i, j, k) = (flat / 36, (flat / 6) % 6, flat % 6);
            counts[(i * 3 + j) * 3 + k] += 1;
        }
        let expected = draws as f64 / 27.0;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p_value = 1.0 - ChiSquared::new(26.0).unwrap().cdf(stat);
        assert!(p_value > 0.01, "chi2 = {stat}, p = {p_value}");
    }

    #[test]
    fn small_volume_is_zero_padded() {
        let (vol, mask) = case([2, 3, 1], &[[1, 1, 0]]);
        let p = sample_patch(&vol, &mask, 4, 0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.image.len(), 64);
        assert_eq!(p.image[0], 1.0);
        assert_eq!(p.image[(4 + 2) * 4], 6.0);
        assert_eq!(p.image.iter().filter(|&&v| v != 0.0).count(), 6);
        assert_eq!(p.labels.iter().filter(|&&v| v == 1).count(), 1);
    }

    #[test]
    fn seeded_draws_repeat() {
        let (vol, mask) = case([12, 12, 12], &[[3, 4, 5], [8, 8, 8]]);
        let a = sample_patch(&vol, &mask, 5, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_patch(&vol, &mask, 5, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.image, b.image);
    }
}
