//! Volumes, masks, modalities and class tables shared by every stage.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use modseg_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "MR")]
    Mr,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Ct, Modality::Mr];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Ct => "CT",
            Modality::Mr => "MR",
        }
    }

    /// Expansion used inside prompts.
    pub fn long_name(self) -> &'static str {
        match self {
            Modality::Ct => "computerized tomography",
            Modality::Mr => "magnetic resonance",
        }
    }

    pub fn flipped(self) -> Modality {
        match self {
            Modality::Ct => Modality::Mr,
            Modality::Mr => Modality::Ct,
        }
    }

    /// Position in [`Modality::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CT" => Ok(Modality::Ct),
            "MR" | "MRI" => Ok(Modality::Mr),
            _ => Err(Error::Validation(format!("unknown modality {s:?}"))),
        }
    }
}

/// Dense 3D scalar image. Voxels are stored row-major over `dims`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T = f32> {
    pub id: String,
    pub modality: Modality,
    pub spacing: [f64; 3],
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Scalar> Volume<T> {
    pub fn new(
        id: impl Into<String>,
        modality: Modality,
        dims: [usize; 3],
        spacing: [f64; 3],
        data: Vec<T>,
    ) -> Result<Self> {
        let id = id.into();
        if dims.contains(&0) {
            bail!(Validation, "volume {id}: zero-sized dimension in {dims:?}");
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            bail!(Validation, "volume {id}: spacing must be positive, got {spacing:?}");
        }
        if data.len() != dims.iter().product::<usize>() {
            bail!(Shape, "volume {id}: {} voxels for dims {dims:?}", data.len());
        }
        Ok(Volume { id, modality, spacing, dims, data })
    }

    pub fn filled(id: impl Into<String>, modality: Modality, dims: [usize; 3], spacing: [f64; 3], v: T) -> Result<Self> {
        Self::new(id, modality, dims, spacing, vec![v; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.offset(i, j, k)]
    }

    /// Same geometry and metadata with new voxel values.
    pub fn with_data<U: Scalar>(&self, data: Vec<U>) -> Result<Volume<U>> {
        Volume::new(self.id.clone(), self.modality, self.dims, self.spacing, data)
    }

    pub fn cast<U: Scalar>(&self) -> Volume<U> {
        let data = self.data.iter().map(|&v| U::lit(v.as_f64())).collect();
        Volume { id: self.id.clone(), modality: self.modality, spacing: self.spacing, dims: self.dims, data }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            let v = v.as_f64();
            (lo.min(v), hi.max(v))
        })
    }
}

/// Ordered, named foreground classes; index `k` in `1..=K` identifies a
/// class and 0 is reserved for background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    task_id: String,
    names: Vec<String>,
}

impl ClassTable {
    pub fn new(names: &[impl AsRef<str>], task_id: impl Into<String>) -> Result<Self> {
        let names: Vec<String> = names.iter().map(|n| n.as_ref().to_string()).collect();
        if names.is_empty() {
            bail!(Validation, "class table needs at least one class");
        }
        if names.len() > u8::MAX as usize {
            bail!(Validation, "at most {} classes are supported", u8::MAX);
        }
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                bail!(Validation, "class {} has an empty name", i + 1);
            }
            if names[..i].contains(n) {
                bail!(Validation, "duplicate class name {n:?}");
            }
        }
        Ok(ClassTable { task_id: task_id.into(), names })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Number of foreground classes `K`.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Name of class `k` (1-based).
    pub fn name(&self, k: usize) -> Result<&str> {
        if k == 0 || k > self.names.len() {
            bail!(Index, "class {k} outside 1..={}", self.names.len());
        }
        Ok(&self.names[k - 1])
    }

    /// SHA-256 over the canonical JSON form; pins embedding caches and
    /// checkpoints to one class ordering.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("class table serializes");
        Sha256::digest(json).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }
}

pub fn make_class_table(names: &[impl AsRef<str>], task_id: &str) -> Result<ClassTable> {
    ClassTable::new(names, task_id)
}

/// Integer class map aligned with a [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    pub id: String,
    pub classes: Arc<ClassTable>,
    dims: [usize; 3],
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(id: impl Into<String>, classes: Arc<ClassTable>, dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        let id = id.into();
        if data.len() != dims.iter().product::<usize>() {
            bail!(Shape, "mask {id}: {} voxels for dims {dims:?}", data.len());
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize > classes.len()) {
            bail!(Validation, "mask {id}: class id {bad} outside 0..={}", classes.len());
        }
        Ok(LabelMask { id, classes, dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Voxel count per class id `0..=K`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len() + 1];
        for &v in &self.data {
            counts[v as usize] += 1;
        }
        counts
    }

    pub fn check_aligned<T: Scalar>(&self, vol: &Volume<T>) -> Result<()> {
        if self.dims != vol.dims() {
            bail!(Shape, "mask {} dims {:?} vs volume {} dims {:?}", self.id, self.dims, vol.id, vol.dims());
        }
        Ok(())
    }
}

/// Binary indicator of class `k` (1-based).
pub fn one_hot_mask(mask: &LabelMask, k: usize) -> Result<Vec<u8>> {
    if k == 0 || k > mask.num_classes() {
        bail!(Index, "class {k} outside 1..={}", mask.num_classes());
    }
    Ok(mask.data.iter().map(|&v| u8::from(v as usize == k)).collect())
}

/// One training patch: image and labels of identical cubic shape.
#[derive(Clone, Debug)]
pub struct Patch<T> {
    pub id: String,
    pub modality: Modality,
    pub size: usize,
    pub image: Vec<T>,
    pub labels: Vec<u8>,
}

/// A single-modality batch of patches.
#[derive(Clone, Debug)]
pub struct PatchBatch<T: Scalar> {
    pub images: Tensor<T>,
    pub labels: Vec<u8>,
    pub modality: Modality,
    pub ids: Vec<String>,
}

impl<T: Scalar> PatchBatch<T> {
    pub fn new(patches: Vec<Patch<T>>, patch_size: usize) -> Result<Self> {
        let Some(first) = patches.first() else {
            bail!(Validation, "empty batch");
        };
        let modality = first.modality;
        let n = patch_size.pow(3);
        for p in &patches {
            if p.modality != modality {
                return Err(Error::Modality { expected: modality.to_string(), got: p.modality.to_string() });
            }
            if p.size != patch_size || p.image.len() != n || p.labels.len() != n {
                bail!(Shape, "patch {} is not {patch_size}^3", p.id);
            }
        }
        let b = patches.len();
        let mut images = Vec::with_capacity(b * n);
        let mut labels = Vec::with_capacity(b * n);
        let mut ids = Vec::with_capacity(b);
        for p in patches {
            images.extend(p.image);
            labels.extend(p.labels);
            ids.push(p.id);
        }
        let images = Tensor::new(&[b, 1, patch_size, patch_size, patch_size], images)?;
        Ok(PatchBatch { images, labels, modality, ids })
    }

    pub fn batch_size(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[2], s[3], s[4]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(k: usize) -> Arc<ClassTable> {
        let names: Vec<String> = (1..=k).map(|i| format!("c{i}")).collect();
        Arc::new(ClassTable::new(&names, "t").unwrap())
    }

    #[test]
    fn class_table_examples() {
        let amos = [
            "spleen", "right kidney", "left kidney", "gallbladder", "esophagus", "liver", "stomach",
            "aorta", "inferior vena cava", "pancreas", "right adrenal gland", "left adrenal gland",
            "duodenum",
        ];
        assert_eq!(make_class_table(&amos, "amos").unwrap().len(), 13);
        let whs = ["MY", "LA", "LV", "RA", "RV", "AA", "PA"];
        assert_eq!(make_class_table(&whs, "mmwhs").unwrap().len(), 7);
        let toy = make_class_table(&["a"], "toy").unwrap();
        assert_eq!(toy.name(1).unwrap(), "a");
        assert!(toy.name(0).is_err());
        assert!(matches!(make_class_table(&["a", "a"], "x"), Err(Error::Validation(_))));
        assert!(matches!(make_class_table(&["a", " "], "x"), Err(Error::Validation(_))));
        assert!(matches!(make_class_table(&[] as &[&str], "x"), Err(Error::Validation(_))));
    }

    #[test]
    fn class_hash_depends_on_order() {
        let a = ClassTable::new(&["x", "y"], "t").unwrap();
        let b = ClassTable::new(&["y", "x"], "t").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
    }

    #[test]
    fn one_hot_examples() {
        let t = table(2);
        let bg = LabelMask::new("m", t.clone(), [2, 2, 1], vec![0; 4]).unwrap();
        assert_eq!(one_hot_mask(&bg, 1).unwrap(), vec![0; 4]);
        let full = LabelMask::new("m", t.clone(), [2, 2, 1], vec![2; 4]).unwrap();
        assert_eq!(one_hot_mask(&full, 2).unwrap(), vec![1; 4]);
        let mixed = LabelMask::new("m", t.clone(), [2, 2, 1], vec![1, 2, 0, 1]).unwrap();
        assert_eq!(one_hot_mask(&mixed, 1).unwrap(), vec![1, 0, 0, 1]);
        assert!(matches!(one_hot_mask(&mixed, 3), Err(Error::Index(_))));
        assert!(matches!(one_hot_mask(&mixed, 0), Err(Error::Index(_))));
    }

    #[test]
    fn one_hot_partition() {
        let t = table(3);
        let data: Vec<u8> = (0..27).map(|i| (i * 7 % 4) as u8).collect();
        let m = LabelMask::new("m", t, [3, 3, 3], data.clone()).unwrap();
        let mut sum: Vec<u8> = data.iter().map(|&v| u8::from(v == 0)).collect();
        for k in 1..=3 {
            for (s, v) in sum.iter_mut().zip(one_hot_mask(&m, k).unwrap()) {
                *s += v;
            }
        }
        assert!(sum.iter().all(|&s| s == 1));
    }

    #[test]
    fn mask_rejects_unknown_ids() {
        assert!(LabelMask::new("m", table(1), [1, 1, 2], vec![0, 2]).is_err());
    }

    #[test]
    fn batch_rejects_mixed_modalities() {
        let p = |m| Patch::<f32> { id: "p".into(), modality: m, size: 2, image: vec![0.0; 8], labels: vec![0; 8] };
        let err = PatchBatch::new(vec![p(Modality::Ct), p(Modality::Mr)], 2).unwrap_err();
        assert!(matches!(err, Error::Modality { .. }));
        let ok = PatchBatch::new(vec![p(Modality::Mr), p(Modality::Mr)], 2).unwrap();
        assert_eq!(ok.images.shape(), &[2, 1, 2, 2, 2]);
        assert!(PatchBatch::new(vec![p(Modality::Ct)], 3).is_err());
    }

    #[test]
    fn volume_validation() {
        assert!(Volume::<f32>::new("v", Modality::Ct, [0, 1, 1], [1.0; 3], vec![]).is_err());
        assert!(Volume::<f32>::new("v", Modality::Ct, [1, 1, 1], [1.0, 0.0, 1.0], vec![0.0]).is_err());
        assert!(Volume::<f32>::new("v", Modality::Ct, [1, 1, 2], [1.0; 3], vec![0.0]).is_err());
        let v = Volume::<f32>::new("v", Modality::Mr, [1, 2, 3], [1.0; 3], (0..6).map(|i| i as f32).collect()).unwrap();
        assert_eq!(v.at(0, 1, 2), 5.0);
    }

    #[test]
    fn modality_names() {
        assert_eq!(Modality::Ct.long_name(), "computerized tomography");
        assert_eq!(Modality::Mr.long_name(), "magnetic resonance");
        assert_eq!("mr".parse::<Modality>().unwrap(), Modality::Mr);
        assert_eq!(Modality::Ct.flipped(), Modality::Mr);
    }
}
