//! Unpaired two-modality ellipsoid phantoms.
//!
//! Each scan gets its own random geometry. CT renders organ `k` brighter
//! than background in HU; MR inverts the ordering and adds a smooth bias
//! field, so a model that has only seen one modality transfers poorly to
//! the other.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::{write_mask, write_volume};
use super::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::domain::{ClassTable, LabelMask, Modality, Volume};
use crate::error::{bail, Error, Result};

pub const ORGAN_NAMES: [&str; 5] = ["spleen", "right kidney", "left kidney", "liver", "stomach"];
const MAX_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub n_ct: usize,
    pub n_mr: usize,
    /// Scans of each modality assigned to the test split (taken from the
    /// end of each modality's list).
    pub test_per_modality: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// File extension: `nii.gz`, `nii` or `mmvol`.
    pub format: String,
    pub task_id: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 3,
            n_ct: 6,
            n_mr: 6,
            test_per_modality: 2,
            dims: [32, 32, 32],
            spacing: [1.5, 1.5, 2.0],
            format: "nii.gz".into(),
            task_id: "synthetic".into(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=ORGAN_NAMES.len()).contains(&self.num_classes) {
            bail!(Config, "synthetic tasks support 1..=5 classes, got {}", self.num_classes);
        }
        if self.n_ct == 0 || self.n_mr == 0 {
            bail!(Config, "need at least one volume per modality");
        }
        if self.test_per_modality >= self.n_ct.min(self.n_mr) {
            bail!(Config, "test_per_modality {} leaves no training scans", self.test_per_modality);
        }
        if self.dims.iter().any(|&d| d < 8) {
            bail!(Config, "synthetic volumes need every dim >= 8, got {:?}", self.dims);
        }
        if !["nii.gz", "nii", "mmvol"].contains(&self.format.as_str()) {
            bail!(Config, "unknown synthetic file format {:?}", self.format);
        }
        Ok(())
    }

    pub fn class_table(&self) -> Result<ClassTable> {
        ClassTable::new(&ORGAN_NAMES[..self.num_classes], self.task_id.clone())
    }

    pub fn count(&self, m: Modality) -> usize {
        match m {
            Modality::Ct => self.n_ct,
            Modality::Mr => self.n_mr,
        }
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).map(|a| ((p[a] as f64 - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Label map with one ellipsoid per class; later classes overwrite earlier
/// ones. Returns the labels and the number of overwritten voxels.
fn draw_geometry(dims: [usize; 3], k: usize, rng: &mut ChaCha8Rng) -> Option<(Vec<u8>, usize)> {
    let n = dims.iter().product();
    let mut labels = vec![0u8; n];
    let mut overlap = 0;
    for cls in 1..=k {
        let shape = Ellipsoid {
            center: dims.map(|d| rng.gen_range(d as f64 * 0.25..d as f64 * 0.75)),
            radii: dims.map(|d| rng.gen_range(d as f64 / 8.0..d as f64 / 4.5)),
        };
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for l in 0..dims[2] {
                    if shape.contains([i, j, l]) {
                        let v = &mut labels[(i * dims[1] + j) * dims[2] + l];
                        overlap += usize::from(*v != 0);
                        *v = cls as u8;
                    }
                }
            }
        }
    }
    let mut present = vec![false; k + 1];
    labels.iter().for_each(|&v| present[v as usize] = true);
    present[1..].iter().all(|&p| p).then_some((labels, overlap))
}

/// Renders scan `index` of `modality`. Each (modality, index) pair has its
/// own random stream, so CT and MR geometry are unrelated.
pub fn synth_case(
    spec: &SyntheticSpec,
    modality: Modality,
    index: usize,
    seed: u64,
) -> Result<(Volume<f32>, LabelMask, usize)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((modality.index() as u64) << 32) | index as u64);
    let dims = spec.dims;
    let k = spec.num_classes;
    let (labels, overlap) = (0..MAX_ATTEMPTS)
        .find_map(|_| draw_geometry(dims, k, &mut rng))
        .ok_or_else(|| Error::Validation(format!("could not place {k} visible organs in {dims:?}")))?;
    let kf = k as f64;
    let id = format!("{}_{index:03}", modality.tag().to_lowercase());
    let data: Vec<f32> = match modality {
        Modality::Ct => {
            let noise = Normal::new(0.0, 20.0).expect("valid sigma");
            labels.iter().map(|&c| (-150.0 + 250.0 * c as f64 / kf + noise.sample(&mut rng)) as f32).collect()
        }
        Modality::Mr => {
            let noise = Normal::new(0.0, 25.0).expect("valid sigma");
            let dir: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let strength = rng.gen_range(0.15..0.35);
            let mut out = Vec::with_capacity(labels.len());
            for (flat, &c) in labels.iter().enumerate() {
                let p = [flat / (dims[1] * dims[2]), (flat / dims[2]) % dims[1], flat % dims[2]];
                let t: f64 = (0..3).map(|a| dir[a] * (p[a] as f64 / dims[a] as f64 - 0.5)).sum();
                let bias = 1.0 + strength * t;
                out.push(((1000.0 - 600.0 * c as f64 / kf) * bias + noise.sample(&mut rng)) as f32);
            }
            out
        }
    };
    let classes = Arc::new(spec.class_table()?);
    let vol = Volume::new(id.clone(), modality, dims, spec.spacing, data)?;
    let mask = LabelMask::new(id, classes, dims, labels)?;
    Ok((vol, mask, overlap))
}

/// Writes every scan plus `manifest.jsonl` into `out_dir`.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let classes = spec.class_table()?;
    let mut manifest = DatasetManifest::new(spec.task_id.clone(), classes.names().to_vec(), out_dir);
    for m in Modality::ALL {
        let n = spec.count(m);
        for index in 0..n {
            let (vol, mask, overlap) = synth_case(spec, m, index, seed)?;
            let image = format!("{}_img.{}", vol.id, spec.format);
            let label = format!("{}_lab.{}", vol.id, spec.format);
            write_volume(&out_dir.join(&image), &vol)?;
            write_mask(&out_dir.join(&label), &mask, vol.spacing)?;
            manifest.entries.push(ManifestEntry {
                id: vol.id.clone(),
                modality: m,
                split: if index + spec.test_per_modality >= n { Split::Test } else { Split::Train },
                image: image.into(),
                label: label.into(),
                overlap_voxels: Some(overlap),
            });
        }
    }
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
