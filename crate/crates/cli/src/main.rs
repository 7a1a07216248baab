//! `esupp` — drive the segmentation pipeline from the shell: synthesize
//! phantom datasets, train the label autoencoder and the grid of
//! segmentation nets, cache encoder features, run the liver→tumor cascade,
//! refine maps with the dense CRF, and benchmark pruned subgraphs.
//!
//! Exit codes: 0 on success, 2 when inputs fail validation, 3 on runtime
//! failures.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Deserialize;

use esupp_core::cascade::cascade_predict;
use esupp_core::crf::{crf_refine_budgeted, CrfParams};
use esupp_core::error::{Error, Result};
use esupp_core::evaluate::{prune_bench, prune_bench_csv};
use esupp_core::features::{extract_features, FeatureCache};
use esupp_core::gradcheck::run_standard_suite;
use esupp_core::io::checkpoint::{checkpoint_hash, load_checkpoint, save_checkpoint};
use esupp_core::io::nifti::read_nifti;
use esupp_core::io::tsr;
use esupp_core::io::volume::{IntensityUnit, Volume};
use esupp_core::losses::LossSpec;
use esupp_core::net::NetConfig;
use esupp_core::net::NetGraph;
use esupp_core::pipeline::evaluate_dir;
use esupp_core::synth::{load_dataset, save_dataset, split_by_case, synth_dataset, SynthConfig};
use esupp_core::tensor::Tensor;
use esupp_core::train::{
    liver_items, rows_to_csv, to_label_items, train_encoding_net, train_segmentation_net,
    tumor_items, Phase, Prep, TrainItem, TrainOptions,
};

#[derive(Parser)]
#[command(name = "esupp", version, about = "Encoder-supervised nested U-Net segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Training-side settings shared by `train-encoder` and `train`, read from a
/// JSON file. Only `net` is mandatory; the rest fall back to defaults.
#[derive(Debug, Deserialize)]
struct TrainFileConfig {
    net: NetConfig,
    #[serde(default)]
    train: TrainOptions,
    #[serde(default)]
    loss: LossSpec,
    #[serde(default)]
    prep: Prep,
}

#[derive(Args)]
struct ConfigArg {
    /// JSON config with `net` (required) plus `train`, `loss`, `prep`.
    #[arg(long)]
    config: PathBuf,
}

impl ConfigArg {
    fn load(&self) -> Result<TrainFileConfig> {
        let text = fs::read_to_string(&self.config).map_err(|e| Error::io(&self.config, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", self.config.display())))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic phantom CT dataset with liver/tumor masks.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        cases: usize,
        /// Slices per case.
        #[arg(long, default_value_t = 4)]
        slices: usize,
        /// Square slice side, multiple of 16.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the label autoencoder (labels in, labels out) on the train split.
    TrainEncoder {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Receives `encoder/` (checkpoint) and `encoder_loss.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "liver")]
        phase: String,
    },
    /// Cache the frozen encoder's per-level features for every sample.
    ExtractFeatures {
        /// Encoder checkpoint directory.
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "liver")]
        phase: String,
        /// What the encoder reads: "labels" (its training distribution) or
        /// "images" (the raw intensity reading).
        #[arg(long, default_value = "labels")]
        from: String,
    },
    /// Train one grid cell's segmentation net.
    Train {
        /// Encoder-feature mode: un, bs, or es.
        #[arg(long)]
        mode: String,
        /// Head supervision: ns or ds.
        #[arg(long)]
        supervision: String,
        #[arg(long)]
        phase: String,
        #[arg(long)]
        data: PathBuf,
        /// Feature cache directory (required for bs/es, optional monitoring
        /// for un).
        #[arg(long)]
        cache: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
        /// Receives `checkpoint/` and `loss.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Encoder checkpoint to verify the cache against before training.
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Warm-start from this checkpoint (e.g. liver net for the tumor phase).
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Run the liver→tumor cascade over a volume.
    Predict {
        #[arg(long)]
        liver_net: PathBuf,
        #[arg(long)]
        tumor_net: PathBuf,
        /// NIfTI file (.nii), saved volume directory, or single-slice .tsr.
        #[arg(long)]
        input: PathBuf,
        /// JSON CRF parameters; defaults when omitted.
        #[arg(long)]
        crf_params: Option<PathBuf>,
        /// Receives `liver_mask/` and `tumor_mask/` volumes.
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean-field CRF refinement of a probability map into a binary mask.
    Crf {
        /// Probability map, .tsr of shape (h, w).
        #[arg(long)]
        probs: PathBuf,
        /// Intensity image in [0, 1], same shape.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Output mask .tsr path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the dice table for every grid checkpoint found on disk.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Root holding `{mode}-{supervision}/{phase}` checkpoints.
        #[arg(long)]
        checkpoints_dir: PathBuf,
        /// Receives `eval.csv` and `eval.txt`.
        #[arg(long)]
        out: PathBuf,
        /// Also verify these pruning levels against the full graph, e.g. "1,2".
        #[arg(long)]
        prune_levels: Option<String>,
    },
    /// Time pruned subgraphs against the full net on random inputs.
    PruneBench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "1,2,3,4")]
        levels: String,
        /// Number of timed inputs.
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every op's analytic gradient against finite differences.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(if e.is_validation() { 2 } else { 3 });
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_levels(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("bad pruning level '{p}'")))
        })
        .collect()
}

fn load_crf_params(path: Option<&Path>) -> Result<CrfParams> {
    let Some(path) = path else { return Ok(CrfParams::default()) };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let params: CrfParams = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    params.validate()?;
    Ok(params)
}

/// Phase-appropriate items for a record list.
fn items_for(
    phase: Phase,
    records: &[esupp_core::synth::SampleRecord],
    prep: &Prep,
    crop_size: usize,
) -> Result<Vec<TrainItem>> {
    match phase {
        Phase::Liver => liver_items(records, prep),
        Phase::Tumor => tumor_items(records, prep, crop_size),
    }
}

fn load_volume(path: &Path) -> Result<Volume> {
    if path.is_dir() {
        Volume::load(path)
    } else if path.extension().is_some_and(|e| e == "nii") {
        read_nifti(path)
    } else if path.extension().is_some_and(|e| e == "tsr") {
        let slice = tsr::read_tensor(path)?;
        Volume::from_slices(&[slice], [1.0, 1.0, 1.0], IntensityUnit::Hu)
    } else {
        Err(Error::InvalidConfig(format!(
            "cannot tell the volume format of {} (expected dir, .nii, or .tsr)",
            path.display()
        )))
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth { seed, cases, slices, size, out } => {
            let cfg = SynthConfig { seed, n_cases: cases, slices_per_case: slices, size };
            let records = synth_dataset(&cfg)?;
            save_dataset(&out, &records)?;
            println!("wrote {} slices ({} cases, {size}x{size}) to {}", records.len(), cases, out.display());
        }
        Cmd::TrainEncoder { data, config, out, phase } => {
            let cfg = config.load()?;
            let phase = Phase::parse(&phase)?;
            let records = load_dataset(&data)?;
            let split = split_by_case(&records)?;
            let train = to_label_items(&items_for(phase, &split.train, &cfg.prep, cfg.net.input_size)?);
            let val = to_label_items(&items_for(phase, &split.val, &cfg.prep, cfg.net.input_size)?);
            let (net, rows) = train_encoding_net(&cfg.net, &train, &val, &cfg.train)?;
            save_checkpoint(&out.join("encoder"), &net)?;
            write_text(&out.join("encoder_loss.csv"), &rows_to_csv(&rows))?;
            let last = rows.last().expect("at least one epoch");
            let dice = last.val_dice.values().next_back().copied().unwrap_or(f64::NAN);
            println!(
                "encoder ({}) trained {} epochs; final reconstruction dice {dice:.4}",
                net.cfg.variant,
                rows.len()
            );
        }
        Cmd::ExtractFeatures { encoder, data, out, phase, from } => {
            let phase = Phase::parse(&phase)?;
            let net = load_checkpoint(&encoder)?;
            let hash = checkpoint_hash(&encoder)?;
            let records = load_dataset(&data)?;
            let items = items_for(phase, &records, &Prep::default(), net.cfg.input_size)?;
            let inputs: Vec<(String, Tensor)> = match from.as_str() {
                "labels" => items.iter().map(|it| (it.key.clone(), it.gt.clone())).collect(),
                "images" => items.iter().map(|it| (it.key.clone(), it.image.clone())).collect(),
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "--from must be labels or images, got '{other}'"
                    )))
                }
            };
            extract_features(&net, &hash, &inputs, &out)?;
            let cache = FeatureCache::open(&out)?;
            println!(
                "cached {} samples x {} levels from {} to {}",
                cache.len(),
                cache.levels().len(),
                encoder.display(),
                out.display()
            );
        }
        Cmd::Train {
            mode,
            supervision,
            phase,
            data,
            cache,
            config,
            out,
            encoder,
            init_from,
        } => {
            let cfg = config.load()?;
            let phase = Phase::parse(&phase)?;
            let mut net_cfg = cfg.net;
            net_cfg.feature_supervision = esupp_core::net::FeatureSupervision::parse(&mode)?;
            net_cfg.supervision = esupp_core::net::Supervision::parse(&supervision)?;
            let spec = phase.loss_spec(&cfg.loss);

            let records = load_dataset(&data)?;
            let split = split_by_case(&records)?;
            let train = items_for(phase, &split.train, &cfg.prep, net_cfg.input_size)?;
            let val = items_for(phase, &split.val, &cfg.prep, net_cfg.input_size)?;

            let cache = cache.map(|dir| FeatureCache::open(&dir)).transpose()?;
            if let (Some(cache), Some(encoder)) = (&cache, &encoder) {
                cache.verify_encoder(&checkpoint_hash(encoder)?)?;
            }

            let mut net = NetGraph::build(net_cfg)?;
            if let Some(source) = init_from {
                net.transfer_init(&load_checkpoint(&source)?)?;
            }
            let rows =
                train_segmentation_net(&mut net, &train, &val, cache.as_ref(), &spec, &cfg.train)?;
            save_checkpoint(&out.join("checkpoint"), &net)?;
            write_text(&out.join("loss.csv"), &rows_to_csv(&rows))?;
            let last = rows.last().expect("at least one epoch");
            println!(
                "{mode}-{supervision} {} net trained {} epochs; seg loss {:.4}{}",
                phase.as_str(),
                rows.len(),
                last.seg_loss,
                match last.feature_loss {
                    Some(f) => format!(", feature loss {f:.4}"),
                    None => String::new(),
                }
            );
        }
        Cmd::Predict { liver_net, tumor_net, input, crf_params, out } => {
            let liver = load_checkpoint(&liver_net)?;
            let tumor = load_checkpoint(&tumor_net)?;
            let params = load_crf_params(crf_params.as_deref())?;
            let volume = load_volume(&input)?;
            let prep = Prep::default();

            let mut liver_slices = Vec::with_capacity(volume.num_slices());
            let mut tumor_slices = Vec::with_capacity(volume.num_slices());
            let mut tumor_px = 0usize;
            for i in 0..volume.num_slices() {
                let pred = cascade_predict(&liver, &tumor, &volume.slice(i)?, &prep, &params)?;
                tumor_px += pred.tumor_mask.iter().filter(|&&v| v == 1.0).count();
                liver_slices.push(pred.liver_mask);
                tumor_slices.push(pred.tumor_mask);
            }
            let spacing = volume.spacing;
            Volume::from_slices(&liver_slices, spacing, IntensityUnit::Normalized)?
                .save(&out.join("liver_mask"))?;
            Volume::from_slices(&tumor_slices, spacing, IntensityUnit::Normalized)?
                .save(&out.join("tumor_mask"))?;
            println!(
                "cascade over {} slices: {tumor_px} tumor pixels; masks in {}",
                volume.num_slices(),
                out.display()
            );
        }
        Cmd::Crf { probs, image, params, out } => {
            let probs_t = tsr::read_tensor(&probs)?;
            let image_t = tsr::read_tensor(&image)?;
            let params = load_crf_params(params.as_deref())?;
            let mask = crf_refine_budgeted(&probs_t, &image_t, &params)?;
            tsr::write_tensor(&out, &mask)?;
            let fg = mask.iter().filter(|&&v| v == 1.0).count();
            println!("refined {} -> {} ({fg} foreground pixels)", probs.display(), out.display());
        }
        Cmd::Evaluate { data, checkpoints_dir, out, prune_levels } => {
            let levels = match prune_levels.as_deref() {
                Some(s) => parse_levels(s)?,
                None => Vec::new(),
            };
            let table = evaluate_dir(&data, &checkpoints_dir, &Prep::default(), &levels)?;
            write_text(&out.join("eval.csv"), &table.to_csv())?;
            write_text(&out.join("eval.txt"), &table.render_text())?;
            print!("{}", table.render_text());
            println!("table written to {}", out.display());
        }
        Cmd::PruneBench { checkpoint, levels, n, seed, out } => {
            let net = load_checkpoint(&checkpoint)?;
            let levels = parse_levels(&levels)?;
            if n == 0 {
                return Err(Error::InvalidConfig("need at least one benchmark input".into()));
            }
            let size = net.cfg.input_size;
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = (0..n)
                .map(|_| {
                    Tensor::from_fn(&[1, net.cfg.in_channels, size, size], |_| {
                        rng.random_range(-1.0..1.0)
                    })
                })
                .collect();
            let rows = prune_bench(&net, &inputs, &levels)?;
            let csv = prune_bench_csv(&rows);
            print!("{csv}");
            if let Some(path) = out {
                write_text(&path, &csv)?;
            }
            if rows.iter().any(|r| !r.matches_full) {
                return Err(Error::Contract("a pruned head diverged from the full graph".into()));
            }
        }
        Cmd::GradCheck { reps, eps, tol, seed } => {
            let mut worst: Vec<(String, f64)> = Vec::new();
            let mut checked = 0usize;
            for rep in 0..reps {
                let reports = run_standard_suite(eps, tol, seed.wrapping_add(rep as u64))?;
                for r in &reports {
                    checked += r.checked;
                    match worst.iter_mut().find(|(name, _)| *name == r.name) {
                        Some((_, w)) => *w = w.max(r.max_err),
                        None => worst.push((r.name.clone(), r.max_err)),
                    }
                    if !r.ok() {
                        return Err(Error::Contract(format!(
                            "gradient check failed: {} rel err {:.3e} > {tol:.1e} (rep {rep})",
                            r.name, r.max_err
                        )));
                    }
                }
            }
            for (name, err) in &worst {
                println!("{name:<28} max rel err {err:.3e}");
            }
            println!("{checked} gradient entries over {reps} reps, all within {tol:.1e}");
        }
    }
    Ok(())
}
