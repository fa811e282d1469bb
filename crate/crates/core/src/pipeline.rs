//! Manifest-wide feature extraction with an optional on-disk cache.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::preprocess::{ImageFormat, PreprocessConfig};
use crate::protocol::DatasetManifest;
use crate::vit::{Encoder, FeatureVector};

pub const CACHE_ENV: &str = "MORPHSCOPE_CACHE";

/// Images decoded and encoded per chunk; bounds peak memory.
const CHUNK: usize = 32;

/// Directory of per-image feature entries.
///
/// Entries are keyed by the image bytes, the preprocessing settings, the
/// crop box and the weight fingerprint, so any change to those misses.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    /// Cache named by `MORPHSCOPE_CACHE`, if set and nonempty.
    pub fn from_env() -> Result<Option<Self>> {
        match std::env::var_os(CACHE_ENV) {
            Some(dir) if !dir.is_empty() => Self::new(PathBuf::from(dir)).map(Some),
            _ => Ok(None),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(image: &[u8], preprocess: &PreprocessConfig, bbox: Option<[f64; 4]>, fingerprint: &str) -> String {
        let mut h = Sha256::new();
        h.update(Sha256::digest(image));
        h.update(serde_json::to_vec(preprocess).unwrap_or_default());
        h.update(serde_json::to_vec(&bbox).unwrap_or_default());
        h.update(fingerprint.as_bytes());
        hex::encode(h.finalize())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.msf"))
    }

    pub fn get(&self, key: &str) -> Option<Vec<f32>> {
        let bytes = fs::read(self.path(key)).ok()?;
        let set = FeatureSet::from_reader(&mut bytes.as_slice()).ok()?;
        set.records().first().map(|r| r.values.clone())
    }

    pub fn put(&self, key: &str, values: &[f32]) -> Result<()> {
        let set = FeatureSet::from_records(values.len(), [FeatureVector::new(key, values.to_vec())?])?;
        let tmp = self.dir.join(format!("{key}.tmp{}", std::process::id()));
        fs::write(&tmp, set.to_bytes())?;
        fs::rename(&tmp, self.path(key))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExtractStats {
    pub encoded: usize,
    pub cached: usize,
}

/// Extracts CLS features for every manifest record, ids being the manifest
/// paths. Record order follows the manifest regardless of `workers`.
pub fn extract_manifest(
    manifest: &DatasetManifest,
    encoder: &Encoder<'_>,
    preprocess: &PreprocessConfig,
    workers: usize,
    cache: Option<&FeatureCache>,
) -> Result<(FeatureSet, ExtractStats)> {
    if preprocess.side != encoder.config().image_side {
        return Err(Error::Argument(format!(
            "preprocessing side {} does not match encoder input {}",
            preprocess.side,
            encoder.config().image_side
        )));
    }
    let fingerprint = match cache {
        Some(_) => {
            let config = serde_json::to_string(encoder.config())?;
            format!("{}:{config}", encoder.bundle().fingerprint())
        }
        None => String::new(),
    };
    let mut set = FeatureSet::new(encoder.config().hidden_dim);
    let mut stats = ExtractStats::default();
    for chunk in manifest.records.chunks(CHUNK) {
        let mut slots: Vec<Option<FeatureVector>> = Vec::with_capacity(chunk.len());
        let mut pending = Vec::new();
        let mut keys = Vec::new();
        for rec in chunk {
            let path = manifest.resolve(rec);
            let bytes = fs::read(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let key = cache.map(|_| FeatureCache::key(&bytes, preprocess, rec.bbox, &fingerprint));
            if let (Some(c), Some(k)) = (cache, key.as_deref()) {
                if let Some(values) = c.get(k).filter(|v| v.len() == set.dim()) {
                    slots.push(Some(FeatureVector::new(rec.path.clone(), values)?));
                    stats.cached += 1;
                    continue;
                }
            }
            let image = preprocess
                .run(&bytes, ImageFormat::from_extension(&path), rec.bbox().as_ref())
                .map_err(|e| annotate(e, &path))?;
            pending.push((slots.len(), (rec.path.clone(), image)));
            keys.push(key);
            slots.push(None);
        }
        let (positions, items): (Vec<usize>, Vec<_>) = pending.into_iter().unzip();
        let encoded = encoder.extract_batch(&items, workers)?;
        stats.encoded += encoded.len();
        for ((pos, fv), key) in positions.into_iter().zip(encoded).zip(keys) {
            if let (Some(c), Some(k)) = (cache, key) {
                c.put(&k, &fv.values)?;
            }
            slots[pos] = Some(fv);
        }
        for fv in slots.into_iter().flatten() {
            set.push(fv)?;
        }
    }
    Ok((set, stats))
}

fn annotate(e: Error, path: &Path) -> Error {
    match e {
        Error::Decode(m) => Error::Decode(format!("{}: {m}", path.display())),
        Error::UnsupportedFormat(m) => Error::UnsupportedFormat(format!("{}: {m}", path.display())),
        other => other,
    }
}
