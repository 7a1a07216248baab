//! Training drivers for the two-step protocol: fit a label autoencoder,
//! cache its encoder features, then fit segmentation nets whose encoders are
//! pulled toward those cached features. One epoch loop serves every mode —
//! the net's `feature_supervision` decides which levels contribute to the
//! loss, and a cache passed to a plain net is monitored without training on
//! it.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::distmap::weight_map;
use crate::error::{Error, Result};
use crate::features::FeatureCache;
use crate::losses::{ds_loss, smooth_l1, total_loss, LossSpec};
use crate::metrics::{dice_score, threshold_mask};
use crate::net::{NetConfig, NetGraph};
use crate::optim::{Adam, AdamConfig};
use crate::preprocess::{
    clahe, crop_companion_mask, liver_crop, normalize, window_image, ClaheConfig,
};
use crate::synth::SampleRecord;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Intensity preprocessing and crop geometry shared by training and
/// inference.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Prep {
    pub window_lo: f64,
    pub window_hi: f64,
    pub clahe: ClaheConfig,
    /// Crop dilation at the 64-pixel reference scale.
    pub crop_margin: usize,
}

impl Default for Prep {
    fn default() -> Self {
        Prep {
            window_lo: -100.0,
            window_hi: 400.0,
            clahe: ClaheConfig::default(),
            crop_margin: 8,
        }
    }
}

/// Cascade stage: organ localization or in-organ lesion segmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Liver,
    Tumor,
}

impl Phase {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "liver" => Ok(Phase::Liver),
            "tumor" => Ok(Phase::Tumor),
            other => Err(Error::InvalidConfig(format!(
                "unknown phase '{other}' (expected liver or tumor)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Liver => "liver",
            Phase::Tumor => "tumor",
        }
    }

    /// Phase-appropriate loss flags on top of a base spec: boundary-weighted
    /// dice + plain CE for the organ, plain dice + focal for the lesion.
    pub fn loss_spec(self, base: &LossSpec) -> LossSpec {
        match self {
            Phase::Liver => LossSpec { use_weighted_dice: true, use_focal: false, ..base.clone() },
            Phase::Tumor => LossSpec { use_weighted_dice: false, use_focal: true, ..base.clone() },
        }
    }
}

/// One network-ready pair: input in `(1, 1, h, w)`, binary target alongside.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub key: String,
    pub image: Tensor,
    pub gt: Tensor,
}

/// Stable per-slice key, `{case_id}_s{index}` — the same stem the dataset
/// files use, so caches, loss tables, and sample files all line up.
pub fn slice_key(r: &SampleRecord) -> String {
    format!("{}_s{:03}", r.case_id, r.slice_index)
}

/// Window + CLAHE + z-score one HU slice into network layout.
pub fn network_image(img: &Tensor, prep: &Prep) -> Result<Tensor> {
    let (h, w) = img.dims2()?;
    let windowed = window_image(img, prep.window_lo, prep.window_hi)?;
    let x = normalize(&clahe(&windowed, &prep.clahe)?)?;
    x.reshaped(vec![1, 1, h, w])
}

/// Whole-slice pairs for the liver stage.
pub fn liver_items(records: &[SampleRecord], prep: &Prep) -> Result<Vec<TrainItem>> {
    records
        .iter()
        .map(|r| {
            let (h, w) = r.liver.dims2()?;
            Ok(TrainItem {
                key: slice_key(r),
                image: network_image(&r.image, prep)?,
                gt: r.liver.reshaped(vec![1, 1, h, w])?,
            })
        })
        .collect()
}

/// Label-autoencoding pairs: the liver mask is both input and target.
pub fn label_items(records: &[SampleRecord]) -> Result<Vec<TrainItem>> {
    records
        .iter()
        .map(|r| {
            let (h, w) = r.liver.dims2()?;
            let m = r.liver.reshaped(vec![1, 1, h, w])?;
            Ok(TrainItem { key: slice_key(r), image: m.clone(), gt: m })
        })
        .collect()
}

/// Whole-slice pairs targeting the tumor directly (the no-cascade baseline).
pub fn direct_tumor_items(records: &[SampleRecord], prep: &Prep) -> Result<Vec<TrainItem>> {
    records
        .iter()
        .map(|r| {
            let (h, w) = r.tumor.dims2()?;
            Ok(TrainItem {
                key: slice_key(r),
                image: network_image(&r.image, prep)?,
                gt: r.tumor.reshaped(vec![1, 1, h, w])?,
            })
        })
        .collect()
}

/// Autoencoding pairs derived from any item list: the target doubles as the
/// input, preserving keys (so caches line up with the source items).
pub fn to_label_items(items: &[TrainItem]) -> Vec<TrainItem> {
    items
        .iter()
        .map(|it| TrainItem { key: it.key.clone(), image: it.gt.clone(), gt: it.gt.clone() })
        .collect()
}

/// Liver-cropped pairs for the tumor stage, built from ground-truth liver
/// boxes. Slices without liver have nothing to crop and are skipped.
pub fn tumor_items(
    records: &[SampleRecord],
    prep: &Prep,
    target: usize,
) -> Result<Vec<TrainItem>> {
    let mut items = Vec::new();
    for r in records {
        if r.liver.iter().all(|&v| v == 0.0) {
            continue;
        }
        let windowed = window_image(&r.image, prep.window_lo, prep.window_hi)?;
        let enhanced = clahe(&windowed, &prep.clahe)?;
        let (crop, t) = liver_crop(&enhanced, &r.liver, prep.crop_margin, target)?;
        let gt = crop_companion_mask(&r.tumor, &t)?;
        items.push(TrainItem {
            key: slice_key(r),
            image: crop.reshaped(vec![1, 1, target, target])?,
            gt: gt.reshaped(vec![1, 1, target, target])?,
        });
    }
    Ok(items)
}

/// Stack per-item `(1, …)` tensors into one `(B, …)` batch.
pub fn stack_batch(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("cannot stack an empty batch".into()))?;
    if first.shape().first() != Some(&1) {
        return Err(Error::Contract(format!(
            "batch parts need a leading 1 axis, got {:?}",
            first.shape()
        )));
    }
    let mut data = Vec::with_capacity(first.numel() * parts.len());
    for p in parts {
        if p.shape() != first.shape() {
            return Err(Error::ShapeMismatch(format!(
                "batch part {:?} vs {:?}",
                p.shape(),
                first.shape()
            )));
        }
        data.extend_from_slice(p.data());
    }
    let mut shape = first.shape().to_vec();
    shape[0] = parts.len();
    Tensor::new(shape, data)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { epochs: 30, batch_size: 4, lr: 1e-3, seed: 0 }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch size must be positive".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// Per-epoch record: training losses plus validation dice for every head.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean supervised-head loss over the epoch.
    pub seg_loss: f64,
    /// Mean encoder-feature distance (trained on or merely monitored);
    /// absent without a cache.
    pub feature_loss: Option<f64>,
    /// Head column → mean validation dice at threshold 0.5.
    pub val_dice: BTreeMap<usize, f64>,
}

/// Render epoch rows as CSV, one row per epoch.
pub fn rows_to_csv(rows: &[EpochRow]) -> String {
    let heads: Vec<usize> =
        rows.first().map(|r| r.val_dice.keys().copied().collect()).unwrap_or_default();
    let mut out = String::from("epoch,seg_loss,feature_loss");
    for j in &heads {
        out.push_str(&format!(",val_dice_x0_{j}"));
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!("{},{:.6},", row.epoch, row.seg_loss));
        if let Some(f) = row.feature_loss {
            out.push_str(&format!("{f:.6}"));
        }
        for j in &heads {
            out.push_str(&format!(",{:.6}", row.val_dice.get(j).copied().unwrap_or(f64::NAN)));
        }
        out.push('\n');
    }
    out
}

/// Boundary weight maps for a batch of masks, stacked to the batch layout.
/// Slices whose map is undefined (no boundary, or a flat map) fall back to
/// uniform weights.
fn batch_weight_map(gts: &[&TrainItem], spec: &LossSpec) -> Result<Tensor> {
    let mut maps = Vec::with_capacity(gts.len());
    for item in gts {
        let shape = item.gt.shape().to_vec();
        let (h, w) = (shape[2], shape[3]);
        let mask = item.gt.reshaped(vec![h, w])?;
        let m = match weight_map(&mask, spec.map_w, spec.map_sigma) {
            Ok(wm) => wm.weights,
            Err(Error::EmptyBoundary | Error::DegenerateMap) => {
                Tensor::new(vec![h, w], vec![1.0; h * w])?
            }
            Err(e) => return Err(e),
        };
        maps.push(m.reshaped(vec![1, 1, h, w])?);
    }
    stack_batch(&maps)
}

/// Cached feature targets for a batch, one `(B, C, h, w)` tensor per level.
fn batch_feature_targets(
    batch: &[&TrainItem],
    cache: &FeatureCache,
    levels: &[usize],
) -> Result<Vec<Tensor>> {
    let cache_levels = cache.levels().to_vec();
    let mut per_level: Vec<Vec<Tensor>> = vec![Vec::with_capacity(batch.len()); levels.len()];
    for item in batch {
        let feats = cache.load(&item.key)?;
        for (slot, &level) in levels.iter().enumerate() {
            let idx = cache_levels.iter().position(|&l| l == level).ok_or_else(|| {
                Error::CacheMismatch(format!("cache holds levels {cache_levels:?}, need {level}"))
            })?;
            per_level[slot].push(feats[idx].clone());
        }
    }
    per_level.iter().map(|parts| stack_batch(parts)).collect()
}

/// Mean validation dice per head at threshold 0.5.
fn validate_heads(net: &NetGraph, val: &[TrainItem]) -> Result<BTreeMap<usize, f64>> {
    let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
    for item in val {
        let fwd = net.forward_eval(&item.image)?;
        for (&j, prob) in &fwd.heads {
            let mask = threshold_mask(prob, 0.5);
            *sums.entry(j).or_insert(0.0) += dice_score(&item.gt, &mask)?;
        }
    }
    let n = val.len() as f64;
    Ok(sums.into_iter().map(|(j, s)| (j, s / n)).collect())
}

/// Fit a net on `train`, validating on `val` after every epoch.
///
/// The feature term follows the net's `feature_supervision`: supervised
/// levels need `cache` and join the loss; a plain net with a cache gets the
/// all-level distance measured but not trained on. Divergent losses abort.
pub fn train_segmentation_net(
    net: &mut NetGraph,
    train: &[TrainItem],
    val: &[TrainItem],
    cache: Option<&FeatureCache>,
    spec: &LossSpec,
    opts: &TrainOptions,
) -> Result<Vec<EpochRow>> {
    opts.validate()?;
    spec.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidConfig("training and validation sets must be non-empty".into()));
    }
    let depth = net.cfg.depth;
    let supervision = net.cfg.supervision;
    let trained_levels = net.cfg.feature_supervision.levels(depth);
    if !trained_levels.is_empty() && cache.is_none() {
        return Err(Error::InvalidConfig(format!(
            "feature supervision '{}' needs a feature cache",
            net.cfg.feature_supervision.as_str()
        )));
    }
    // monitored levels: what the loss trains on, or everything when only watching
    let loss_levels: Vec<usize> = if trained_levels.is_empty() && cache.is_some() {
        (1..=depth).collect()
    } else {
        trained_levels.clone()
    };
    let train_features = !trained_levels.is_empty();

    let params: Vec<Tensor> = net.params().iter().map(|(_, t)| t.clone()).collect();
    let mut adam = Adam::new(AdamConfig::with_lr(opts.lr), &params)?;
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rows = Vec::with_capacity(opts.epochs);

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut seg_sum = 0.0;
        let mut feat_sum = 0.0;
        let mut seen = 0usize;

        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&TrainItem> = chunk.iter().map(|&i| &train[i]).collect();
            let images = stack_batch(&batch.iter().map(|it| it.image.clone()).collect::<Vec<_>>())?;
            let gts = stack_batch(&batch.iter().map(|it| it.gt.clone()).collect::<Vec<_>>())?;

            let mut tape = Tape::new();
            let fwd = net.forward_train(&mut tape, &images)?;
            let gt = tape.leaf(gts);
            let wm = if spec.use_weighted_dice {
                Some(tape.leaf(batch_weight_map(&batch, spec)?))
            } else {
                None
            };
            let seg = ds_loss(&mut tape, &fwd.heads, gt, wm, spec, supervision, depth)?;

            let feature = if loss_levels.is_empty() {
                None
            } else {
                let targets = batch_feature_targets(&batch, cache.expect("cache checked"), &loss_levels)?;
                let target_vars: Vec<_> = targets.into_iter().map(|t| tape.leaf(t)).collect();
                let feats: Vec<_> = loss_levels.iter().map(|&l| fwd.encoder[l]).collect();
                Some(smooth_l1(&mut tape, &feats, &target_vars, spec.huber_beta, spec.feature_reduction)?)
            };

            let root = total_loss(&mut tape, seg, feature.filter(|_| train_features), spec)?;
            let loss = tape.value(root).scalar_value()?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}: loss {loss}")));
            }
            let b = batch.len() as f64;
            seg_sum += tape.value(seg).scalar_value()? * b;
            if let Some(f) = feature {
                feat_sum += tape.value(f).scalar_value()? * b;
            }
            seen += batch.len();

            let mut grads = tape.backward(root)?;
            let grad_list: Vec<Option<Tensor>> =
                fwd.param_vars.iter().map(|&v| grads.take(v)).collect();
            adam.step(net.params_mut().tensors_mut(), &grad_list)?;
        }

        let n = seen as f64;
        rows.push(EpochRow {
            epoch,
            seg_loss: seg_sum / n,
            feature_loss: (!loss_levels.is_empty()).then_some(feat_sum / n),
            val_dice: validate_heads(net, val)?,
        });
    }
    Ok(rows)
}

/// Config for the label autoencoder matching a segmentation net: the
/// skip-free counterpart variant, deep supervision where the lattice allows.
pub fn encoder_config(seg: &NetConfig) -> NetConfig {
    NetConfig::new(
        seg.variant.encoding_counterpart(),
        seg.depth,
        seg.base_channels,
        seg.in_channels,
        seg.input_size,
        seg.seed,
    )
}

/// Step one of the protocol: fit the label autoencoder on mask→mask pairs.
pub fn train_encoding_net(
    seg_cfg: &NetConfig,
    train: &[TrainItem],
    val: &[TrainItem],
    opts: &TrainOptions,
) -> Result<(NetGraph, Vec<EpochRow>)> {
    let mut net = NetGraph::build(encoder_config(seg_cfg))?;
    let rows = train_segmentation_net(&mut net, train, val, None, &LossSpec::default(), opts)?;
    Ok((net, rows))
}
