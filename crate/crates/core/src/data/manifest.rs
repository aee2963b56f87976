//! JSON-lines dataset manifest. The first line is a header record, every
//! following line one scan:
//!
//! ```text
//! {"format":"modseg-manifest","version":1,"task_id":"...","classes":["spleen",...]}
//! {"id":"ct_000","modality":"CT","split":"train","image":"ct_000_img.nii.gz","label":"ct_000_lab.nii.gz"}
//! ```
//!
//! Relative file paths are resolved against the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{ClassTable, Modality};
use crate::error::{bail, Error, Result};

pub const MANIFEST_FORMAT: &str = "modseg-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (train or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub modality: Modality,
    pub split: Split,
    pub image: PathBuf,
    pub label: PathBuf,
    /// Voxels where a later synthetic organ overwrote an earlier one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap_voxels: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    task_id: String,
    classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub task_id: String,
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative entry paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(task_id: impl Into<String>, classes: Vec<String>, base_dir: impl Into<PathBuf>) -> Self {
        DatasetManifest { task_id: task_id.into(), classes, entries: Vec::new(), base_dir: base_dir.into() }
    }

    pub fn class_table(&self) -> Result<ClassTable> {
        ClassTable::new(&self.classes, self.task_id.clone())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn select(&self, split: Split, modality: Modality) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split && e.modality == modality).collect()
    }

    pub fn count(&self, split: Split, modality: Modality) -> usize {
        self.select(split, modality).len()
    }

    /// Ids unique, class table valid; with `check_files`, every referenced
    /// file exists.
    pub fn validate(&self, check_files: bool) -> Result<()> {
        self.class_table()?;
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                bail!(Validation, "duplicate manifest id {:?}", e.id);
            }
            if check_files {
                for p in [&e.image, &e.label] {
                    let full = self.resolve(p);
                    if !full.is_file() {
                        bail!(Validation, "manifest entry {}: missing file {}", e.id, full.display());
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let header = Header {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            task_id: self.task_id.clone(),
            classes: self.classes.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let Some((_, first)) = lines.next() else {
            bail!(Format, "empty manifest");
        };
        let header: Header = serde_json::from_str(first).map_err(|e| Error::Format(format!("manifest header: {e}")))?;
        if header.format != MANIFEST_FORMAT {
            bail!(Format, "not a manifest (format {:?})", header.format);
        }
        if header.version != MANIFEST_VERSION {
            bail!(Format, "unsupported manifest version {}", header.version);
        }
        let mut m = DatasetManifest::new(header.task_id, header.classes, base_dir);
        for (no, line) in lines {
            let e: ManifestEntry =
                serde_json::from_str(line).map_err(|e| Error::Format(format!("manifest line {}: {e}", no + 1)))?;
            m.entries.push(e);
        }
        m.validate(false)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Parses the manifest and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::from_jsonl(&text, base)?;
        m.validate(true)?;
        Ok(m)
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash_hex(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DatasetManifest {
        let mut m = DatasetManifest::new("toy", vec!["spleen".into(), "liver".into()], "/data");
        for (i, modality) in [Modality::Ct, Modality::Mr, Modality::Mr].into_iter().enumerate() {
            m.entries.push(ManifestEntry {
                id: format!("s{i}"),
                modality,
                split: if i == 2 { Split::Test } else { Split::Train },
                image: format!("s{i}_img.nii.gz").into(),
                label: format!("s{i}_lab.nii.gz").into(),
                overlap_voxels: (i == 1).then_some(7),
            });
        }
        m
    }

    #[test]
    fn round_trip_is_lossless() {
        let m = sample();
        let back = DatasetManifest::from_jsonl(&m.to_jsonl(), "/data").unwrap();
        assert_eq!(back, m);
        assert_eq!(back.hash_hex(), m.hash_hex());
        assert_eq!(m.count(Split::Train, Modality::Mr), 1);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut m = sample();
        m.entries[1].id = "s0".into();
        assert!(matches!(DatasetManifest::from_jsonl(&m.to_jsonl(), "/"), Err(Error::Validation(_))));
    }

    #[test]
    fn bad_modality_and_header_rejected() {
        let text = sample().to_jsonl().replace("\"MR\"", "\"PET\"");
        assert!(matches!(DatasetManifest::from_jsonl(&text, "/"), Err(Error::Format(_))));
        assert!(DatasetManifest::from_jsonl("{\"id\":\"x\"}", "/").is_err());
    }

    #[test]
    fn missing_files_fail_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        sample().save(&p).unwrap();
        assert!(matches!(DatasetManifest::load(&p), Err(Error::Validation(_))));
    }
}
