use std::sync::Arc;

use super::io::{read_mask, read_volume};
use super::manifest::{DatasetManifest, Split};
use super::preprocess::{preprocess, resample_labels, PreprocessSpec};
use crate::domain::{LabelMask, Modality, Volume};
use crate::error::{bail, Result};

/// A preprocessed scan with its aligned labels.
#[derive(Clone, Debug)]
pub struct Case {
    pub image: Volume<f32>,
    pub mask: LabelMask,
}

impl Case {
    pub fn new(image: Volume<f32>, mask: LabelMask) -> Result<Self> {
        mask.check_aligned(&image)?;
        Ok(Case { image, mask })
    }

    pub fn id(&self) -> &str {
        &self.image.id
    }

    pub fn modality(&self) -> Modality {
        self.image.modality
    }
}

/// Reads and preprocesses every scan of one split and modality, in
/// manifest order.
pub fn load_cases(manifest: &DatasetManifest, split: Split, modality: Modality, spec: &PreprocessSpec) -> Result<Vec<Case>> {
    spec.validate()?;
    let classes = Arc::new(manifest.class_table()?);
    let mut out = Vec::new();
    for e in manifest.select(split, modality) {
        let raw = read_volume(&manifest.resolve(&e.image), &e.id, modality)?;
        let (mask, label_spacing) = read_mask(&manifest.resolve(&e.label), &e.id, classes.clone())?;
        if mask.dims() != raw.dims() {
            bail!(Shape, "{}: label dims {:?} differ from image dims {:?}", e.id, mask.dims(), raw.dims());
        }
        let image = preprocess(&raw, spec)?;
        let mask = if spec.resample { resample_labels(&mask, label_spacing, spec.target_spacing_mm)? } else { mask };
        out.push(Case::new(image, mask)?);
    }
    Ok(out)
}
