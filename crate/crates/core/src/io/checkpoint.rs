//! Checkpoint directories: one TSR1 file per parameter (grouped into a
//! subdirectory per graph node) plus a manifest identifying the architecture.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::tsr;
use crate::net::{NetConfig, NetGraph, Variant};

#[derive(Serialize, Deserialize)]
struct Manifest {
    variant: String,
    depth: usize,
    base_channels: usize,
    in_channels: usize,
    input_size: usize,
    seed: u64,
}

/// `node_1_0.conv1.kernel` is stored as `node_1_0/conv1.kernel.tsr`.
fn file_of(name: &str) -> Result<(String, String)> {
    match name.split_once('.') {
        Some((block, rest)) => Ok((block.to_string(), format!("{rest}.tsr"))),
        None => Err(Error::InvalidParam(format!("unqualified parameter name {name}"))),
    }
}

pub fn save_checkpoint(dir: &Path, graph: &NetGraph) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = &graph.cfg;
    let manifest = Manifest {
        variant: cfg.variant.as_str().to_string(),
        depth: cfg.depth,
        base_channels: cfg.base_channels,
        in_channels: cfg.in_channels,
        input_size: cfg.input_size,
        seed: cfg.seed,
    };
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&manifest_path, e))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;

    for (name, tensor) in graph.state_dict() {
        let (block, file) = file_of(&name)?;
        let block_dir = dir.join(block);
        fs::create_dir_all(&block_dir).map_err(|e| Error::io(&block_dir, e))?;
        tsr::write_tensor(&block_dir.join(file), &tensor)?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<NetGraph> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::bad_format(&manifest_path, e.to_string()))?;
    let cfg = NetConfig::new(
        Variant::parse(&manifest.variant)?,
        manifest.depth,
        manifest.base_channels,
        manifest.in_channels,
        manifest.input_size,
        manifest.seed,
    );
    let mut graph = NetGraph::build(cfg)?;

    // read every tensor first so a truncated checkpoint can't leave the
    // graph half-loaded
    let mut state = BTreeMap::new();
    for name in graph.state_dict().keys() {
        let (block, file) = file_of(name)?;
        state.insert(name.clone(), tsr::read_tensor(&dir.join(block).join(file))?);
    }
    graph.load_state_dict(&state)?;
    Ok(graph)
}

/// Content hash of a checkpoint directory (manifest + every parameter file,
/// in sorted order), used to pin feature caches to their encoder.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let mut files = vec![dir.join("manifest.json")];
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut blocks: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    blocks.sort();
    for block in blocks {
        let mut params: Vec<_> = fs::read_dir(&block)
            .map_err(|e| Error::io(&block, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "tsr"))
            .collect();
        params.sort();
        files.extend(params);
    }
    let mut hasher = Sha256::new();
    for f in files {
        hasher.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
