//! Prompt rendering, frozen text-encoder providers and the binary
//! embedding cache.
//!
//! Cache layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MMSEGEMB"
//! version  u32      1
//! id_len   u32      followed by id_len bytes of UTF-8 encoder id
//! template u8       0=v1 1=v2 2=v3 3=one_hot
//! K        u32
//! d_txt    u32
//! hash     32 bytes SHA-256 of the class table
//! vectors  2*K*d_txt f32, CT k=1..K then MR k=1..K
//! ```

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{ClassTable, Modality};
use crate::error::{bail, Error, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"MMSEGEMB";
pub const CACHE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTemplate {
    V1,
    V2,
    V3,
    OneHot,
}

impl PromptTemplate {
    pub fn pattern(self) -> Option<&'static str> {
        match self {
            PromptTemplate::V1 => Some("A photo of a {CLS}."),
            PromptTemplate::V2 => Some("There is a {CLS} in this {MODALITY}."),
            PromptTemplate::V3 => Some("A {MODALITY} imaging of a {CLS}."),
            PromptTemplate::OneHot => None,
        }
    }

    fn code(self) -> u8 {
        match self {
            PromptTemplate::V1 => 0,
            PromptTemplate::V2 => 1,
            PromptTemplate::V3 => 2,
            PromptTemplate::OneHot => 3,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => PromptTemplate::V1,
            1 => PromptTemplate::V2,
            2 => PromptTemplate::V3,
            3 => PromptTemplate::OneHot,
            _ => bail!(Format, "unknown template code {code}"),
        })
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptTemplate::V1 => "v1",
            PromptTemplate::V2 => "v2",
            PromptTemplate::V3 => "v3",
            PromptTemplate::OneHot => "one_hot",
        })
    }
}

impl FromStr for PromptTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "v1" => Ok(PromptTemplate::V1),
            "v2" => Ok(PromptTemplate::V2),
            "v3" => Ok(PromptTemplate::V3),
            "one_hot" | "onehot" => Ok(PromptTemplate::OneHot),
            _ => Err(Error::Validation(format!("unknown prompt template {s:?}"))),
        }
    }
}

pub fn render_prompt(template: PromptTemplate, modality: Modality, cls_name: &str) -> Result<String> {
    let Some(pattern) = template.pattern() else {
        bail!(Unsupported, "the one-hot template has no text form");
    };
    Ok(pattern.replace("{MODALITY}", modality.long_name()).replace("{CLS}", cls_name))
}

/// A frozen text encoder. Implementations must map identical text to
/// identical vectors.
pub trait TextEncoder {
    fn encoder_id(&self) -> String;
    fn embed(&mut self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
}

/// Deterministic pseudo-encoder: each text seeds a Gaussian draw through its
/// SHA-256 digest, normalized to unit length.
#[derive(Clone, Debug)]
pub struct HashEncoder {
    pub dim: usize,
}

impl HashEncoder {
    pub fn new(dim: usize) -> Self {
        HashEncoder { dim }
    }

    pub fn vector(&self, text: &str) -> Vec<f32> {
        let seed: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let raw: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        raw.iter().map(|v| (v / norm) as f32).collect()
    }
}

impl TextEncoder for HashEncoder {
    fn encoder_id(&self) -> String {
        format!("hash:{}", self.dim)
    }

    fn embed(&mut self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Adapter for an out-of-process encoder (for example a CLIP text tower).
/// The program receives a JSON array of strings on stdin and must print a
/// JSON array of float arrays, one per input, on stdout.
#[derive(Clone, Debug)]
pub struct CommandEncoder {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandEncoder {
    pub fn parse(spec: &str) -> Result<Self> {
        let mut parts = spec.split_whitespace().map(str::to_string);
        let Some(program) = parts.next() else {
            bail!(Config, "empty encoder command");
        };
        Ok(CommandEncoder { program, args: parts.collect() })
    }
}

impl TextEncoder for CommandEncoder {
    fn encoder_id(&self) -> String {
        let mut id = format!("cmd:{}", self.program);
        for a in &self.args {
            id.push(' ');
            id.push_str(a);
        }
        id
    }

    fn embed(&mut self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(&self.program, e))?;
        let input = serde_json::to_vec(texts).expect("strings serialize");
        child
            .stdin
            .take()
            .expect("stdin is piped")
            .write_all(&input)
            .map_err(|e| Error::io(&self.program, e))?;
        let out = child.wait_with_output().map_err(|e| Error::io(&self.program, e))?;
        if !out.status.success() {
            bail!(Protocol, "encoder {} exited with {}", self.program, out.status);
        }
        let vectors: Vec<Vec<f32>> = serde_json::from_slice(&out.stdout)
            .map_err(|e| Error::Protocol(format!("encoder {} output: {e}", self.program)))?;
        if vectors.len() != texts.len() {
            bail!(Protocol, "encoder returned {} vectors for {} texts", vectors.len(), texts.len());
        }
        Ok(vectors)
    }
}

/// Resolves an encoder id of the form `hash:<dim>` or `cmd:<program args>`.
pub fn provider_from_id(id: &str) -> Result<Box<dyn TextEncoder>> {
    if let Some(dim) = id.strip_prefix("hash:") {
        let dim: usize = dim.parse().map_err(|_| Error::Config(format!("bad hash encoder dim in {id:?}")))?;
        if dim == 0 {
            bail!(Config, "encoder dimension must be positive");
        }
        return Ok(Box::new(HashEncoder::new(dim)));
    }
    if let Some(cmd) = id.strip_prefix("cmd:") {
        return Ok(Box::new(CommandEncoder::parse(cmd)?));
    }
    bail!(Config, "unknown encoder {id:?} (expected hash:<dim> or cmd:<program>)")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub encoder_id: String,
    pub template: PromptTemplate,
    pub num_classes: usize,
    pub d_txt: usize,
    #[serde(with = "hex_bytes")]
    pub class_hash: [u8; 32],
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        bytes.try_into().map_err(|_| serde::de::Error::custom("expected 32 bytes"))
    }
}

/// Frozen text vectors for every (modality, class) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    header: EmbeddingHeader,
    vectors: Vec<f32>,
}

impl EmbeddingTable {
    /// `vectors` holds `2 * K * d_txt` values ordered CT k=1..K then MR.
    pub fn from_parts(header: EmbeddingHeader, vectors: Vec<f32>) -> Result<Self> {
        if header.num_classes == 0 || header.d_txt == 0 {
            bail!(Validation, "embedding table needs K >= 1 and d_txt >= 1");
        }
        let want = 2 * header.num_classes * header.d_txt;
        if vectors.len() != want {
            bail!(Shape, "{} values for {want} expected", vectors.len());
        }
        Ok(EmbeddingTable { header, vectors })
    }

    pub fn header(&self) -> &EmbeddingHeader {
        &self.header
    }

    pub fn num_classes(&self) -> usize {
        self.header.num_classes
    }

    pub fn d_txt(&self) -> usize {
        self.header.d_txt
    }

    /// Vector for class `k` (1-based) under `modality`.
    pub fn vector(&self, modality: Modality, k: usize) -> Result<&[f32]> {
        let (kk, d) = (self.header.num_classes, self.header.d_txt);
        if k == 0 || k > kk {
            bail!(Compatibility, "no text vector for class {k} (table has {kk})");
        }
        let row = modality.index() * kk + (k - 1);
        Ok(&self.vectors[row * d..(row + 1) * d])
    }

    pub fn raw(&self) -> &[f32] {
        &self.vectors
    }

    pub fn check_classes(&self, classes: &ClassTable) -> Result<()> {
        if self.header.class_hash != classes.hash() || self.header.num_classes != classes.len() {
            bail!(
                Compatibility,
                "embedding table was built for class table {} but the experiment uses {} ({})",
                hex::encode(self.header.class_hash),
                classes.hash_hex(),
                classes.task_id()
            );
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(64 + h.encoder_id.len() + 4 * self.vectors.len());
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(h.encoder_id.len() as u32).to_le_bytes());
        out.extend_from_slice(h.encoder_id.as_bytes());
        out.push(h.template.code());
        out.extend_from_slice(&(h.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(h.d_txt as u32).to_le_bytes());
        out.extend_from_slice(&h.class_hash);
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CACHE_MAGIC {
            bail!(Format, "not an embedding cache (bad magic)");
        }
        let version = r.u32()?;
        if version != CACHE_VERSION {
            bail!(Format, "unsupported embedding cache version {version}");
        }
        let id_len = r.u32()? as usize;
        let encoder_id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| Error::Format("encoder id is not UTF-8".into()))?;
        let template = PromptTemplate::from_code(r.take(1)?[0])?;
        let num_classes = r.u32()? as usize;
        let d_txt = r.u32()? as usize;
        let class_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let n = 2 * num_classes * d_txt;
        let body = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("vector count overflows".into()))?)?;
        if r.pos != bytes.len() {
            bail!(Format, "{} trailing bytes after {n} vectors values", bytes.len() - r.pos);
        }
        let vectors = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::from_parts(EmbeddingHeader { encoder_id, template, num_classes, d_txt, class_hash }, vectors)
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads a cache and verifies it was built for `classes`.
    pub fn load(path: &Path, classes: &ClassTable) -> Result<Self> {
        let table = Self::load_unchecked(path)?;
        table.check_classes(classes)?;
        Ok(table)
    }

    pub fn load_unchecked(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copy whose MR vectors equal its CT vectors.
    pub fn with_shared_modalities(&self) -> Self {
        let half = self.vectors.len() / 2;
        let mut vectors = self.vectors.clone();
        vectors.copy_within(0..half, half);
        EmbeddingTable { header: self.header.clone(), vectors }
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            bail!(Format, "truncated embedding cache: need {n} bytes at offset {}", self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Embeds every (modality, class) prompt. For [`PromptTemplate::OneHot`]
/// the provider is not consulted and vectors are standard basis vectors.
pub fn build_embedding_table(
    provider: &mut dyn TextEncoder,
    template: PromptTemplate,
    classes: &ClassTable,
) -> Result<EmbeddingTable> {
    let k = classes.len();
    if template == PromptTemplate::OneHot {
        let mut vectors = vec![0.0f32; 2 * k * k];
        for m in 0..2 {
            for c in 0..k {
                vectors[(m * k + c) * k + c] = 1.0;
            }
        }
        let header = EmbeddingHeader {
            encoder_id: "one-hot".into(),
            template,
            num_classes: k,
            d_txt: k,
            class_hash: classes.hash(),
        };
        return EmbeddingTable::from_parts(header, vectors);
    }
    let mut texts = Vec::with_capacity(2 * k);
    for m in Modality::ALL {
        for name in classes.names() {
            texts.push(render_prompt(template, m, name)?);
        }
    }
    let embedded = provider.embed(&texts)?;
    if embedded.len() != texts.len() {
        bail!(Protocol, "provider returned {} vectors for {} prompts", embedded.len(), texts.len());
    }
    let d = embedded[0].len();
    if d == 0 || embedded.iter().any(|v| v.len() != d) {
        let dims: Vec<usize> = embedded.iter().map(Vec::len).collect();
        bail!(Protocol, "provider returned inconsistent dimensions {dims:?}");
    }
    if embedded.iter().flatten().any(|v| !v.is_finite()) {
        bail!(Protocol, "provider returned non-finite values");
    }
    let header = EmbeddingHeader {
        encoder_id: provider.encoder_id(),
        template,
        num_classes: k,
        d_txt: d,
        class_hash: classes.hash(),
    };
    EmbeddingTable::from_parts(header, embedded.concat())
}
