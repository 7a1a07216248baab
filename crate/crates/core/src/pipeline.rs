//! End-to-end run driver: one [`RunConfig`] takes a dataset directory
//! through the full protocol — label autoencoder, frozen feature cache,
//! the grid of feature-supervision × head-supervision training runs, and
//! the final dice table — writing every artifact under one output root.
//!
//! Layout of an output root:
//!
//! ```text
//! out/
//!   liver/encoder/           label-autoencoder checkpoint
//!   liver/encoder_loss.csv
//!   liver/cache/             frozen encoder features, keyed by slice
//!   un-ns/liver/             one segmentation checkpoint per grid cell
//!   un-ns/liver_loss.csv
//!   ...
//!   eval.csv, eval.txt       dice table over the held-out test cases
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate::{evaluate_checkpoint, EvalTable};
use crate::features::{extract_features, FeatureCache};
use crate::io::checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint};
use crate::losses::LossSpec;
use crate::net::{FeatureSupervision, NetConfig, NetGraph, Supervision};
use crate::synth::{load_dataset, split_by_case, SampleRecord};
use crate::tensor::Tensor;
use crate::train::{
    liver_items, rows_to_csv, to_label_items, train_encoding_net, train_segmentation_net,
    tumor_items, EpochRow, Phase, Prep, TrainItem, TrainOptions,
};

/// What the frozen encoder reads during feature extraction: the ground-truth
/// label map (its own training distribution) or the intensity image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodeFrom {
    Labels,
    Images,
}

/// One grid cell: encoder-feature mode × head supervision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSel {
    pub mode: FeatureSupervision,
    pub supervision: Supervision,
}

impl GridSel {
    /// Directory / table tag, e.g. `es-ds`.
    pub fn tag(self) -> String {
        format!("{}-{}", self.mode.as_str(), self.supervision.as_str())
    }
}

/// The full six-cell grid in table order.
pub fn full_grid() -> Vec<GridSel> {
    let mut grid = Vec::new();
    for mode in [FeatureSupervision::None, FeatureSupervision::Bs, FeatureSupervision::Es] {
        for supervision in [Supervision::Ns, Supervision::Ds] {
            grid.push(GridSel { mode, supervision });
        }
    }
    grid
}

fn default_encode_from() -> EncodeFrom {
    EncodeFrom::Labels
}

fn default_phases() -> Vec<Phase> {
    vec![Phase::Liver, Phase::Tumor]
}

/// Everything a reproducible run needs. Identical configs produce
/// byte-identical loss and evaluation tables.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    /// Segmentation-net template; the grid varies its supervision fields.
    pub net: NetConfig,
    /// Base loss knobs; each phase applies its own term flags.
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default)]
    pub train: TrainOptions,
    pub grid: Vec<GridSel>,
    #[serde(default = "default_phases")]
    pub phases: Vec<Phase>,
    #[serde(default = "default_encode_from")]
    pub encode_from: EncodeFrom,
    #[serde(default)]
    pub prep: Prep,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.grid.is_empty() || self.phases.is_empty() {
            return Err(Error::InvalidConfig("run needs at least one grid cell and phase".into()));
        }
        if !self.net.variant.full_lattice() {
            return Err(Error::InvalidConfig(
                "grid runs need the full-lattice variant so every head exists".into(),
            ));
        }
        Ok(())
    }
}

/// In-memory results of a run, alongside the artifacts on disk.
pub struct RunOutput {
    pub table: EvalTable,
    /// `(grid tag, phase)` → per-epoch training rows.
    pub curves: BTreeMap<(String, Phase), Vec<EpochRow>>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn phase_items(records: &[SampleRecord], phase: Phase, cfg: &RunConfig) -> Result<Vec<TrainItem>> {
    match phase {
        Phase::Liver => liver_items(records, &cfg.prep),
        Phase::Tumor => tumor_items(records, &cfg.prep, cfg.net.input_size),
    }
}

/// Train the phase's label autoencoder and cache its frozen encoder features
/// for every training item. Returns the verified cache.
fn build_phase_cache(
    cfg: &RunConfig,
    phase: Phase,
    train: &[TrainItem],
    val: &[TrainItem],
) -> Result<FeatureCache> {
    let train_labels = to_label_items(train);
    let val_labels = to_label_items(val);
    let (encoder, rows) = train_encoding_net(&cfg.net, &train_labels, &val_labels, &cfg.train)?;

    let phase_dir = cfg.out_dir.join(phase.as_str());
    let ckpt_dir = phase_dir.join("encoder");
    save_checkpoint(&ckpt_dir, &encoder)?;
    write_text(&phase_dir.join("encoder_loss.csv"), &rows_to_csv(&rows))?;

    let hash = checkpoint_hash(&ckpt_dir)?;
    let inputs: Vec<(String, Tensor)> = match cfg.encode_from {
        EncodeFrom::Labels => {
            train_labels.iter().map(|it| (it.key.clone(), it.image.clone())).collect()
        }
        EncodeFrom::Images => train.iter().map(|it| (it.key.clone(), it.image.clone())).collect(),
    };
    let cache_dir = phase_dir.join("cache");
    extract_features(&encoder, &hash, &inputs, &cache_dir)?;

    let cache = FeatureCache::open(&cache_dir)?;
    cache.verify_encoder(&hash)?;
    Ok(cache)
}

/// Run the configured grid end to end. Artifacts land under `out_dir`; the
/// returned curves and table carry the same values for in-process checks.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let records = load_dataset(&cfg.data_dir)?;
    let split = split_by_case(&records)?;

    let mut curves = BTreeMap::new();
    let mut table = EvalTable::default();
    // liver nets seed their grid cell's tumor net, mirroring the cascade
    let mut liver_nets: BTreeMap<String, NetGraph> = BTreeMap::new();

    let mut phases = cfg.phases.clone();
    phases.sort_by_key(|p| *p != Phase::Liver); // liver first for transfer init
    phases.dedup();

    for phase in phases {
        let train = phase_items(&split.train, phase, cfg)?;
        let val = phase_items(&split.val, phase, cfg)?;
        let test = phase_items(&split.test, phase, cfg)?;
        let cache = build_phase_cache(cfg, phase, &train, &val)?;
        let spec = phase.loss_spec(&cfg.loss);

        for sel in &cfg.grid {
            let tag = sel.tag();
            let mut net_cfg = cfg.net;
            net_cfg.feature_supervision = sel.mode;
            net_cfg.supervision = sel.supervision;
            let mut net = NetGraph::build(net_cfg)?;
            if phase == Phase::Tumor {
                if let Some(liver) = liver_nets.get(&tag) {
                    net.transfer_init(liver)?;
                }
            }

            let rows =
                train_segmentation_net(&mut net, &train, &val, Some(&cache), &spec, &cfg.train)?;
            let cell_dir = cfg.out_dir.join(&tag);
            save_checkpoint(&cell_dir.join(phase.as_str()), &net)?;
            write_text(
                &cell_dir.join(format!("{}_loss.csv", phase.as_str())),
                &rows_to_csv(&rows),
            )?;

            let stats = evaluate_checkpoint(&net, &test, &[])?;
            table.push_stats(&tag, phase, &stats);
            curves.insert((tag.clone(), phase), rows);
            if phase == Phase::Liver {
                liver_nets.insert(tag, net);
            }
        }
    }

    table.validate()?;
    write_text(&cfg.out_dir.join("eval.csv"), &table.to_csv())?;
    write_text(&cfg.out_dir.join("eval.txt"), &table.render_text())?;
    Ok(RunOutput { table, curves })
}

/// Rebuild the dice table from checkpoints on disk (the `evaluate` command):
/// every configured grid cell × phase must already have its checkpoint.
pub fn evaluate_grid(
    cfg: &RunConfig,
    pruning_levels: &[usize],
) -> Result<EvalTable> {
    cfg.validate()?;
    let records = load_dataset(&cfg.data_dir)?;
    let split = split_by_case(&records)?;

    let mut table = EvalTable::default();
    for phase in &cfg.phases {
        let test = phase_items(&split.test, *phase, cfg)?;
        for sel in &cfg.grid {
            let tag = sel.tag();
            let ckpt = cfg.out_dir.join(&tag).join(phase.as_str());
            if !ckpt.is_dir() {
                return Err(Error::InvalidConfig(format!(
                    "missing checkpoint for {tag}/{}: {}",
                    phase.as_str(),
                    ckpt.display()
                )));
            }
            let net = load_checkpoint(&ckpt)?;
            let stats = evaluate_checkpoint(&net, &test, pruning_levels)?;
            table.push_stats(&tag, *phase, &stats);
        }
    }
    table.validate()?;
    Ok(table)
}

/// Evaluate whatever grid checkpoints exist under `ckpt_root` (laid out as
/// `{tag}/{phase}` the way [`run_pipeline`] writes them) on the dataset's
/// test split. Tumor crops follow each checkpoint's own input size.
pub fn evaluate_dir(
    data_dir: &Path,
    ckpt_root: &Path,
    prep: &Prep,
    pruning_levels: &[usize],
) -> Result<EvalTable> {
    let records = load_dataset(data_dir)?;
    let split = split_by_case(&records)?;

    let mut table = EvalTable::default();
    let mut liver_cache: Option<Vec<TrainItem>> = None;
    let mut tumor_cache: BTreeMap<usize, Vec<TrainItem>> = BTreeMap::new();
    for phase in [Phase::Liver, Phase::Tumor] {
        for sel in full_grid() {
            let tag = sel.tag();
            let ckpt = ckpt_root.join(&tag).join(phase.as_str());
            if !ckpt.is_dir() {
                continue;
            }
            let net = load_checkpoint(&ckpt)?;
            let items: &Vec<TrainItem> = match phase {
                Phase::Liver => {
                    if liver_cache.is_none() {
                        liver_cache = Some(liver_items(&split.test, prep)?);
                    }
                    liver_cache.as_ref().expect("just filled")
                }
                Phase::Tumor => {
                    let size = net.cfg.input_size;
                    if !tumor_cache.contains_key(&size) {
                        tumor_cache.insert(size, tumor_items(&split.test, prep, size)?);
                    }
                    &tumor_cache[&size]
                }
            };
            let stats = evaluate_checkpoint(&net, items, pruning_levels)?;
            table.push_stats(&tag, phase, &stats);
        }
    }
    if table.rows.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no grid checkpoints found under {}",
            ckpt_root.display()
        )));
    }
    table.validate()?;
    Ok(table)
}
