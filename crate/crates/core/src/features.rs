//! On-disk cache of frozen-encoder features. Training against cached targets
//! avoids re-running the encoding net every epoch; the manifest pins the
//! cache to the exact encoder checkpoint that produced it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::tsr;
use crate::net::NetGraph;
use crate::tensor::Tensor;
use crate::threads::parallel_map;

#[derive(Serialize, Deserialize)]
struct CacheManifest {
    encoder_hash: String,
    /// Encoder levels stored per sample (1..=depth; level 0 is the input's
    /// own resolution and is never supervised).
    levels: Vec<usize>,
    entries: Vec<CacheEntry>,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    stem: String,
}

/// Run the frozen encoder over `(key, input)` pairs and persist features for
/// levels 1..=depth of each input.
pub fn extract_features(
    encoder: &NetGraph,
    encoder_hash: &str,
    inputs: &[(String, Tensor)],
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let depth = encoder.cfg.depth;
    let features: Vec<Result<Vec<Tensor>>> = parallel_map(inputs, |_, (_, x)| {
        let fwd = encoder.forward_eval(x)?;
        Ok(fwd.encoder[1..=depth].to_vec())
    });

    let mut entries = Vec::with_capacity(inputs.len());
    for (i, ((key, _), feats)) in inputs.iter().zip(features).enumerate() {
        let feats = feats?;
        let stem = format!("f{i:05}");
        for (level, t) in (1..=depth).zip(&feats) {
            tsr::write_tensor(&dir.join(format!("{stem}.l{level}.tsr")), t)?;
        }
        entries.push(CacheEntry { key: key.clone(), stem });
    }

    let manifest = CacheManifest {
        encoder_hash: encoder_hash.to_string(),
        levels: (1..=depth).collect(),
        entries,
    };
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&manifest_path, e))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

pub struct FeatureCache {
    dir: PathBuf,
    manifest: CacheManifest,
}

impl FeatureCache {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: CacheManifest = serde_json::from_str(&text)
            .map_err(|e| Error::bad_format(&manifest_path, e.to_string()))?;
        Ok(FeatureCache { dir: dir.to_path_buf(), manifest })
    }

    pub fn encoder_hash(&self) -> &str {
        &self.manifest.encoder_hash
    }

    pub fn levels(&self) -> &[usize] {
        &self.manifest.levels
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    /// Refuse to serve features produced by a different encoder.
    pub fn verify_encoder(&self, expected_hash: &str) -> Result<()> {
        if self.manifest.encoder_hash != expected_hash {
            return Err(Error::CacheMismatch(format!(
                "cache was built by encoder {} but expected {}",
                &self.manifest.encoder_hash[..12.min(self.manifest.encoder_hash.len())],
                &expected_hash[..12.min(expected_hash.len())],
            )));
        }
        Ok(())
    }

    /// Cached feature tensors for one sample, shallowest supervised level first.
    pub fn load(&self, key: &str) -> Result<Vec<Tensor>> {
        let entry = self
            .manifest
            .entries
            .iter()
            .find(|e| e.key == key)
            .ok_or_else(|| Error::CacheMismatch(format!("no cached features for {key}")))?;
        let mut out = Vec::with_capacity(self.manifest.levels.len());
        for level in &self.manifest.levels {
            out.push(tsr::read_tensor(&self.dir.join(format!("{}.l{level}.tsr", entry.stem)))?);
        }
        Ok(out)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.manifest.entries.iter().map(|e| e.key.as_str())
    }
}
