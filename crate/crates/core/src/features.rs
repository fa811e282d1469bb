//! `MSF1` feature cache.
//!
//! ```text
//! "MSF1" | u32 LE count | u32 LE dim | count × (u32 LE id length | UTF-8 id | dim × f32 LE)
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::vit::FeatureVector;

pub const FEATURES_MAGIC: &[u8; 4] = b"MSF1";

/// Ordered feature records sharing one dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    records: Vec<FeatureVector>,
    index: HashMap<String, usize>,
}

impl FeatureSet {
    pub fn new(dim: usize) -> Self {
        Self { dim, records: Vec::new(), index: HashMap::new() }
    }

    pub fn from_records(dim: usize, records: impl IntoIterator<Item = FeatureVector>) -> Result<Self> {
        let mut set = Self::new(dim);
        for r in records {
            set.push(r)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, record: FeatureVector) -> Result<()> {
        if record.dim() != self.dim {
            return Err(Error::Shape(format!(
                "feature {} has dim {}, cache holds dim {}",
                record.id,
                record.dim(),
                self.dim
            )));
        }
        if self.index.contains_key(&record.id) {
            return Err(Error::Data(format!("duplicate feature id {}", record.id)));
        }
        self.index.insert(record.id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&FeatureVector> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[FeatureVector] {
        &self.records
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.records.len() * (self.dim * 4 + 24));
        out.extend_from_slice(FEATURES_MAGIC);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.id.len() as u32).to_le_bytes());
            out.extend_from_slice(r.id.as_bytes());
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_reader(r: &mut impl Read) -> Result<Self> {
        let mut word = [0u8; 4];
        read_or_corrupt(r, &mut word)?;
        if &word != FEATURES_MAGIC {
            return Err(Error::Format("bad magic, expected \"MSF1\"".into()));
        }
        read_or_corrupt(r, &mut word)?;
        let count = u32::from_le_bytes(word) as usize;
        read_or_corrupt(r, &mut word)?;
        let dim = u32::from_le_bytes(word) as usize;
        let mut set = Self::new(dim);
        let mut buf = vec![0u8; dim * 4];
        for _ in 0..count {
            read_or_corrupt(r, &mut word)?;
            let len = u32::from_le_bytes(word) as usize;
            if len > 1 << 20 {
                return Err(Error::Corruption(format!("implausible id length {len}")));
            }
            let mut id = vec![0u8; len];
            read_or_corrupt(r, &mut id)?;
            let id = String::from_utf8(id).map_err(|_| Error::Corruption("id is not UTF-8".into()))?;
            read_or_corrupt(r, &mut buf)?;
            let values = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            set.push(FeatureVector::new(id, values)?)?;
        }
        Ok(set)
    }
}

fn read_or_corrupt(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Corruption("truncated feature cache".into()),
        _ => Error::Io(e),
    })
}

pub fn save_features(set: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&set.to_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    FeatureSet::from_reader(&mut BufReader::new(File::open(path)?))
}
