//! Volume and label files: NIfTI (`.nii`, `.nii.gz`) or the raw container
//! (`.mmvol`).
//!
//! Raw layout, little-endian:
//!
//! ```text
//! magic   8 bytes "MMSEGVOL"
//! version u32     1
//! dtype   u8      0 = f32, 1 = u8
//! dims    3 x u64 (row-major, last axis fastest)
//! spacing 3 x f64 mm
//! data    prod(dims) values
//! ```

use std::path::Path;
use std::sync::Arc;

use ndarray::Array3;
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::domain::{ClassTable, LabelMask, Modality, Volume};
use crate::error::{bail, Error, Result};

pub const RAW_MAGIC: &[u8; 8] = b"MMSEGVOL";
const RAW_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Nifti,
    Raw,
}

fn format_of(path: &Path) -> Result<Format> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        Ok(Format::Nifti)
    } else if name.ends_with(".mmvol") {
        Ok(Format::Raw)
    } else {
        bail!(Format, "{}: unknown volume extension (use .nii, .nii.gz or .mmvol)", path.display())
    }
}

/// Dims, spacing and voxel values as f64.
fn read_any(path: &Path) -> Result<([usize; 3], [f64; 3], Vec<f64>)> {
    match format_of(path)? {
        Format::Nifti => read_nifti(path),
        Format::Raw => read_raw(path),
    }
}

fn read_nifti(path: &Path) -> Result<([usize; 3], [f64; 3], Vec<f64>)> {
    let bad = |e: nifti::NiftiError| Error::Format(format!("{}: {e}", path.display()));
    let obj = ReaderOptions::new().read_file(path).map_err(bad)?;
    let h = obj.header();
    let spacing = [h.pixdim[1] as f64, h.pixdim[2] as f64, h.pixdim[3] as f64];
    let arr = obj.into_volume().into_ndarray::<f64>().map_err(bad)?;
    let shape = arr.shape().to_vec();
    if shape.len() != 3 && !(shape.len() == 4 && shape[3] == 1) {
        bail!(Format, "{}: expected a 3D volume, got shape {shape:?}", path.display());
    }
    let dims = [shape[0], shape[1], shape[2]];
    let mut data = Vec::with_capacity(dims.iter().product());
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let v = if shape.len() == 3 { arr[[i, j, k]] } else { arr[[i, j, k, 0]] };
                data.push(v);
            }
        }
    }
    Ok((dims, spacing, data))
}

fn read_raw(path: &Path) -> Result<([usize; 3], [f64; 3], Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    if bytes.len() < 8 + 4 + 1 + 24 + 24 || &bytes[..8] != RAW_MAGIC {
        return Err(fail("not a raw volume (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != RAW_VERSION {
        return Err(fail(&format!("unsupported raw volume version {version}")));
    }
    let dtype = bytes[12];
    let mut pos = 13;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
    }
    let mut spacing = [0f64; 3];
    for s in &mut spacing {
        *s = f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        pos += 8;
    }
    let n: usize = dims.iter().product();
    let body = &bytes[pos..];
    let data: Vec<f64> = match dtype {
        0 if body.len() == 4 * n => body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        1 if body.len() == n => body.iter().map(|&v| v as f64).collect(),
        0 | 1 => return Err(fail(&format!("payload of {} bytes does not match dims {dims:?}", body.len()))),
        t => return Err(fail(&format!("unknown dtype code {t}"))),
    };
    Ok((dims, spacing, data))
}

fn write_raw(path: &Path, dims: [usize; 3], spacing: [f64; 3], dtype: u8, payload: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(64 + payload.len());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&RAW_VERSION.to_le_bytes());
    out.push(dtype);
    for d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(payload);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

macro_rules! nifti_writer {
    ($name:ident, $ty:ty) => {
        fn $name(path: &Path, dims: [usize; 3], spacing: [f64; 3], data: Vec<$ty>) -> Result<()> {
            let arr = Array3::from_shape_vec((dims[0], dims[1], dims[2]), data).expect("length checked by the caller");
            let header = NiftiHeader {
                pixdim: [1.0, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 1.0, 1.0, 1.0, 1.0],
                ..Default::default()
            };
            WriterOptions::new(path)
                .reference_header(&header)
                .write_nifti(&arr)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        }
    };
}

nifti_writer!(write_nifti_f32, f32);
nifti_writer!(write_nifti_u8, u8);

pub fn read_volume(path: &Path, id: &str, modality: Modality) -> Result<Volume<f32>> {
    let (dims, spacing, data) = read_any(path)?;
    Volume::new(id, modality, dims, spacing, data.into_iter().map(|v| v as f32).collect())
}

pub fn write_volume(path: &Path, vol: &Volume<f32>) -> Result<()> {
    match format_of(path)? {
        Format::Nifti => write_nifti_f32(path, vol.dims(), vol.spacing, vol.data().to_vec()),
        Format::Raw => {
            let payload: Vec<u8> = vol.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            write_raw(path, vol.dims(), vol.spacing, 0, &payload)
        }
    }
}

/// Reads a label map; returns the mask and the spacing stored in the file.
pub fn read_mask(path: &Path, id: &str, classes: Arc<ClassTable>) -> Result<(LabelMask, [f64; 3])> {
    let (dims, spacing, data) = read_any(path)?;
    let mut labels = Vec::with_capacity(data.len());
    for v in data {
        if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
            bail!(Format, "{}: label value {v} is not a class id", path.display());
        }
        labels.push(v as u8);
    }
    Ok((LabelMask::new(id, classes, dims, labels)?, spacing))
}

pub fn write_mask(path: &Path, mask: &LabelMask, spacing: [f64; 3]) -> Result<()> {
    match format_of(path)? {
        Format::Nifti => write_nifti_u8(path, mask.dims(), spacing, mask.data().to_vec()),
        Format::Raw => write_raw(path, mask.dims(), spacing, 1, mask.data()),
    }
}
