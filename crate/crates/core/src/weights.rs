//! `MSW1` weight container and the canonical tensor schema of the encoder.
//!
//! Layout:
//!
//! ```text
//! "MSW1" | u64 LE header length | UTF-8 JSON header | zero pad to 64 | tensor data
//! ```
//!
//! The header is `{version, config, tensors: [{name, shape, byte_offset}]}`;
//! `byte_offset` is relative to the start of the data section and every
//! tensor starts on a 64-byte boundary. Values are little-endian `f32`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, DEFAULT_LN_EPS};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"MSW1";
pub const FORMAT_VERSION: u32 = 1;
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalMode {
    Learned,
    Sinusoidal,
}

impl std::str::FromStr for PositionalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Self::Learned),
            "sinusoidal" => Ok(Self::Sinusoidal),
            other => Err(Error::Argument(format!("unknown positional mode {other:?}"))),
        }
    }
}

/// Encoder geometry. The default is ViT-L/32 at 384×384 input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub positional_mode: PositionalMode,
    pub final_layer_norm: bool,
    pub ln_eps: f32,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_side: 384,
            patch_side: 32,
            hidden_dim: 1024,
            depth: 24,
            heads: 16,
            mlp_dim: 4096,
            positional_mode: PositionalMode::Learned,
            final_layer_norm: true,
            ln_eps: DEFAULT_LN_EPS,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("image_side", self.image_side),
            ("patch_side", self.patch_side),
            ("hidden_dim", self.hidden_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Schema(format!("config field {name} must be positive")));
        }
        if !self.image_side.is_multiple_of(self.patch_side) {
            return Err(Error::Schema(format!(
                "image side {} is not a multiple of patch side {}",
                self.image_side, self.patch_side
            )));
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Schema(format!(
                "hidden dim {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if self.positional_mode == PositionalMode::Sinusoidal && !self.hidden_dim.is_multiple_of(2) {
            return Err(Error::Schema("sinusoidal positions need an even hidden dim".into()));
        }
        if !(self.ln_eps.is_finite() && self.ln_eps >= 0.0) {
            return Err(Error::Schema(format!("bad layer norm eps {}", self.ln_eps)));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    /// Number of image patches, N.
    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Sequence length including the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * 3
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    /// Canonical tensor names with their shapes, in file order.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.hidden_dim;
        let mut s: Vec<(String, Vec<usize>)> = vec![
            ("embed.patch.weight".into(), vec![self.patch_dim(), d]),
            ("embed.patch.bias".into(), vec![d]),
            ("cls_token".into(), vec![d]),
        ];
        if self.positional_mode == PositionalMode::Learned {
            s.push(("pos_embed".into(), vec![self.num_tokens(), d]));
        }
        for l in 0..self.depth {
            let p = |suffix: &str| format!("blocks.{l}.{suffix}");
            s.push((p("ln1.gamma"), vec![d]));
            s.push((p("ln1.beta"), vec![d]));
            for proj in ["q", "k", "v", "out"] {
                s.push((p(&format!("attn.{proj}.weight")), vec![d, d]));
                s.push((p(&format!("attn.{proj}.bias")), vec![d]));
            }
            s.push((p("ln2.gamma"), vec![d]));
            s.push((p("ln2.beta"), vec![d]));
            s.push((p("mlp.fc1.weight"), vec![d, self.mlp_dim]));
            s.push((p("mlp.fc1.bias"), vec![self.mlp_dim]));
            s.push((p("mlp.fc2.weight"), vec![self.mlp_dim, d]));
            s.push((p("mlp.fc2.bias"), vec![d]));
        }
        if self.final_layer_norm {
            s.push(("final_ln.gamma".into(), vec![d]));
            s.push(("final_ln.beta".into(), vec![d]));
        }
        s
    }

    pub fn parameter_count(&self) -> usize {
        self.schema().iter().map(|(_, shape)| shape.iter().product::<usize>()).sum()
    }
}

/// Named parameter set. Vectors are held as `1 × n` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub config: ViTConfig,
    entries: BTreeMap<String, Matrix>,
}

fn shape_of(m: &Matrix, expected: &[usize]) -> Vec<usize> {
    if expected.len() == 1 && m.rows() == 1 {
        vec![m.cols()]
    } else {
        vec![m.rows(), m.cols()]
    }
}

fn matrix_for_shape(shape: &[usize], data: Vec<f32>) -> Result<Matrix> {
    match *shape {
        [n] => Matrix::new(1, n, data),
        [r, c] => Matrix::new(r, c, data),
        _ => Err(Error::Schema(format!("unsupported tensor rank {}", shape.len()))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Missing(String),
    Extra(String),
    Misshaped { name: String, expected: Vec<usize>, found: Vec<usize> },
    NonFinite(String),
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::Missing(n) => write!(f, "missing tensor {n}"),
            Violation::Extra(n) => write!(f, "unexpected tensor {n}"),
            Violation::Misshaped { name, expected, found } => {
                write!(f, "tensor {name} has shape {found:?}, expected {expected:?}")
            }
            Violation::NonFinite(n) => write!(f, "tensor {n} has non-finite values"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    /// Only missing or misshaped tensors; extras do not stop inference.
    pub fn blocking(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| !matches!(v, Violation::Extra(_)))
    }

    fn into_error(self) -> Result<()> {
        match self.violations.first() {
            None => Ok(()),
            Some(_) => {
                let msg: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
                Err(Error::Schema(msg.join("; ")))
            }
        }
    }
}

/// Lists missing, extra, misshaped and non-finite tensors.
pub fn validate_schema(bundle: &WeightBundle, config: &ViTConfig) -> ValidationReport {
    let schema = config.schema();
    let mut violations = Vec::new();
    for (name, expected) in &schema {
        match bundle.entries.get(name) {
            None => violations.push(Violation::Missing(name.clone())),
            Some(m) => {
                let found = shape_of(m, expected);
                if &found != expected {
                    violations.push(Violation::Misshaped {
                        name: name.clone(),
                        expected: expected.clone(),
                        found,
                    });
                } else if !m.is_finite() {
                    violations.push(Violation::NonFinite(name.clone()));
                }
            }
        }
    }
    for name in bundle.entries.keys() {
        if !schema.iter().any(|(n, _)| n == name) {
            violations.push(Violation::Extra(name.clone()));
        }
    }
    ValidationReport { violations }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    byte_offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    version: u32,
    config: ViTConfig,
    tensors: Vec<TensorHeader>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl WeightBundle {
    pub fn new(config: ViTConfig) -> Self {
        Self { config, entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) -> Option<Matrix> {
        self.entries.insert(name.into(), m)
    }

    pub fn remove(&mut self, name: &str) -> Option<Matrix> {
        self.entries.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Looks up a tensor, failing with a schema error that names it.
    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Schema(format!("missing tensor {name}")))
    }

    /// A vector-shaped tensor as a slice.
    pub fn vector(&self, name: &str) -> Result<&[f32]> {
        let m = self.tensor(name)?;
        if m.rows() != 1 {
            return Err(Error::Schema(format!("tensor {name} is not a vector")));
        }
        Ok(m.data())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.values().map(|m| m.data().len()).sum()
    }

    /// Random parameters for every tensor of `config`.
    ///
    /// Weight matrices are uniform with unit output variance for unit input,
    /// layer-norm scales sit near one, everything else is small.
    pub fn random(config: &ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bundle = Self::new(config.clone());
        for (name, shape) in config.schema() {
            let len: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with(".gamma") {
                (0..len).map(|_| 1.0 + rng.random_range(-0.1f32..0.1)).collect()
            } else if shape.len() == 2 && name != "pos_embed" {
                let a = (3.0 / shape[0] as f32).sqrt();
                (0..len).map(|_| rng.random_range(-a..a)).collect()
            } else if name == "pos_embed" || name == "cls_token" {
                (0..len).map(|_| rng.random_range(-0.5f32..0.5)).collect()
            } else {
                (0..len).map(|_| rng.random_range(-0.05f32..0.05)).collect()
            };
            bundle.insert(name, matrix_for_shape(&shape, data)?);
        }
        Ok(bundle)
    }

    /// Content digest over the canonical serialization.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        // Writing into the hasher cannot fail.
        let _ = self.write_to(&mut HashWriter(&mut hasher));
        hex::encode(hasher.finalize())
    }

    fn header(&self) -> Result<FileHeader> {
        let mut tensors = Vec::new();
        let mut offset = 0usize;
        for (name, shape) in self.config.schema() {
            let m = self.tensor(&name)?;
            tensors.push(TensorHeader { name, shape, byte_offset: offset as u64 });
            offset = align_up(offset + 4 * m.data().len());
        }
        Ok(FileHeader { version: FORMAT_VERSION, config: self.config.clone(), tensors })
    }

    fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = self.header()?;
        let json = serde_json::to_vec(&header)?;
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let prefix = WEIGHTS_MAGIC.len() + 8 + json.len();
        w.write_all(&vec![0u8; align_up(prefix) - prefix])?;

        let mut written = 0usize;
        let mut buf = Vec::new();
        for t in &header.tensors {
            let pad = t.byte_offset as usize - written;
            w.write_all(&vec![0u8; pad])?;
            let m = self.tensor(&t.name)?;
            buf.clear();
            buf.reserve(m.data().len() * 4);
            for v in m.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
            written = t.byte_offset as usize + buf.len();
        }
        Ok(())
    }
}

struct HashWriter<'a>(&'a mut Sha256);

impl Write for HashWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// Writes `bundle` in the `MSW1` layout. The bundle must validate.
pub fn save_weights(bundle: &WeightBundle, path: impl AsRef<Path>) -> Result<()> {
    bundle.config.validate()?;
    if bundle.is_empty() {
        return Err(Error::Schema("refusing to save an empty bundle".into()));
    }
    validate_schema(bundle, &bundle.config).into_error()?;
    let mut w = BufWriter::new(File::create(path)?);
    bundle.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

fn read_exact_or_corrupt(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corruption(format!("truncated {what}")),
        _ => Error::Io(e),
    })
}

/// Reads an `MSW1` file and validates it against the config in its header.
pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightBundle> {
    let mut r = BufReader::with_capacity(1 << 20, File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_corrupt(&mut r, &mut magic, "magic")?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"MSW1\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut len = [0u8; 8];
    read_exact_or_corrupt(&mut r, &mut len, "header length")?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 64 << 20 {
        return Err(Error::Corruption(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    read_exact_or_corrupt(&mut r, &mut json, "header")?;
    let header: FileHeader = serde_json::from_slice(&json)
        .map_err(|e| Error::Format(format!("bad header JSON: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", header.version)));
    }
    header.config.validate()?;
    let prefix = WEIGHTS_MAGIC.len() + 8 + len;
    let mut pad = vec![0u8; align_up(prefix) - prefix];
    read_exact_or_corrupt(&mut r, &mut pad, "header padding")?;

    let mut bundle = WeightBundle::new(header.config.clone());
    let mut pos = 0usize;
    let mut bytes = Vec::new();
    for t in &header.tensors {
        let offset = t.byte_offset as usize;
        if offset < pos {
            return Err(Error::Corruption(format!("tensor {} overlaps its predecessor", t.name)));
        }
        let mut skip = vec![0u8; offset - pos];
        read_exact_or_corrupt(&mut r, &mut skip, &format!("padding before {}", t.name))?;
        let count: usize = t.shape.iter().product();
        bytes.resize(count * 4, 0);
        read_exact_or_corrupt(&mut r, &mut bytes, &format!("tensor {}", t.name))?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let m = matrix_for_shape(&t.shape, data).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("tensor {}: {msg}", t.name)),
            other => other,
        })?;
        if bundle.insert(t.name.clone(), m).is_some() {
            return Err(Error::Schema(format!("tensor {} appears twice", t.name)));
        }
        pos = offset + count * 4;
    }
    validate_schema(&bundle, &header.config).into_error()?;
    Ok(bundle)
}
