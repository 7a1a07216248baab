//! Differentiable training losses, built as tape graphs.
//!
//! Segmentation loss = w1·dice + w2·cross-entropy (focal for the tumor
//! phase, boundary-weighted dice for the liver phase). Deep supervision
//! averages the segmentation loss over every head; feature supervision adds
//! a Huber penalty pulling the segmentation encoder's features toward the
//! cached label-autoencoder features.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Supervision;
use crate::tape::{Tape, Var};
use crate::tensor::check_same_shape;

/// Smoothing added to soft-dice numerator and denominator.
pub const DICE_EPS: f64 = 1.0;
/// Probability clamp for log-based losses.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSpec {
    /// Dice term weight inside the segmentation loss.
    pub seg_dice_weight: f64,
    /// Cross-entropy (or focal) term weight inside the segmentation loss.
    pub seg_ce_weight: f64,
    /// Per-head weights under deep supervision; `None` means uniform 1/n.
    pub head_weights: Option<Vec<f64>>,
    /// Supervised-head term weight inside the total loss.
    pub total_ds_weight: f64,
    /// Feature term weight inside the total loss.
    pub total_feature_weight: f64,
    pub focal_gamma: f64,
    pub huber_beta: f64,
    /// Boundary weight-map amplitude.
    pub map_w: f64,
    /// Boundary weight-map length scale.
    pub map_sigma: f64,
    pub use_weighted_dice: bool,
    pub use_focal: bool,
    pub feature_reduction: Reduction,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            seg_dice_weight: 1.0,
            seg_ce_weight: 1.0,
            head_weights: None,
            total_ds_weight: 1.0,
            total_feature_weight: 1.0,
            focal_gamma: 2.0,
            huber_beta: 1.0,
            map_w: 0.05,
            map_sigma: 20.0,
            use_weighted_dice: false,
            use_focal: false,
            feature_reduction: Reduction::Mean,
        }
    }
}

impl LossSpec {
    /// Liver phase: boundary-weighted dice + plain cross-entropy.
    pub fn liver() -> Self {
        Self { use_weighted_dice: true, use_focal: false, ..Self::default() }
    }

    /// Tumor phase: plain dice + focal loss for the tiny foreground.
    pub fn tumor() -> Self {
        Self { use_weighted_dice: false, use_focal: true, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.seg_dice_weight,
            self.seg_ce_weight,
            self.total_ds_weight,
            self.total_feature_weight,
            self.focal_gamma,
        ];
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidParam("loss weights must be finite and >= 0".into()));
        }
        if let Some(hw) = &self.head_weights {
            if hw.iter().any(|w| *w < 0.0 || !w.is_finite()) {
                return Err(Error::InvalidParam("head weights must be finite and >= 0".into()));
            }
        }
        if self.huber_beta <= 0.0 {
            return Err(Error::InvalidParam("huber beta must be positive".into()));
        }
        if self.map_sigma <= 0.0 {
            return Err(Error::InvalidParam("weight-map sigma must be positive".into()));
        }
        if self.map_w < 0.0 {
            return Err(Error::InvalidParam("weight-map amplitude must be >= 0".into()));
        }
        Ok(())
    }
}

fn check_probabilities(tape: &Tape, prob: Var) -> Result<()> {
    if tape.value(prob).iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Contract("predicted probabilities outside [0, 1]".into()));
    }
    Ok(())
}

/// Soft dice loss `1 - (2 Σ gt·p + ε) / (Σ gt + Σ p + ε)`.
pub fn dice_loss(tape: &mut Tape, gt: Var, prob: Var) -> Result<Var> {
    check_same_shape("dice_loss", tape.value(gt), tape.value(prob))?;
    check_probabilities(tape, prob)?;
    let inter = tape.mul(gt, prob)?;
    let inter = tape.sum(inter);
    let sum_gt = tape.sum(gt);
    let sum_p = tape.sum(prob);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, DICE_EPS);
    let den = tape.add(sum_gt, sum_p)?;
    let den = tape.add_scalar(den, DICE_EPS);
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Dice loss with a per-pixel weight applied to both masks:
/// `1 - (2 Σ W·gt·p + ε) / (Σ W·gt + Σ W·p + ε)`.
pub fn weighted_dice_loss(tape: &mut Tape, gt: Var, prob: Var, weights: Var) -> Result<Var> {
    check_same_shape("weighted_dice_loss", tape.value(gt), tape.value(prob))?;
    check_same_shape("weighted_dice_loss weights", tape.value(gt), tape.value(weights))?;
    check_probabilities(tape, prob)?;
    let wg = tape.mul(weights, gt)?;
    let wp = tape.mul(weights, prob)?;
    let inter = tape.mul(wg, prob)?;
    let inter = tape.sum(inter);
    let sum_wg = tape.sum(wg);
    let sum_wp = tape.sum(wp);
    let num = tape.scale(inter, 2.0);
    let num = tape.add_scalar(num, DICE_EPS);
    let den = tape.add(sum_wg, sum_wp)?;
    let den = tape.add_scalar(den, DICE_EPS);
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

fn clamped_complements(tape: &mut Tape, gt: Var, prob: Var) -> Result<(Var, Var, Var, Var)> {
    let p = tape.clamp(prob, PROB_EPS, 1.0 - PROB_EPS)?;
    let neg_p = tape.scale(p, -1.0);
    let q = tape.add_scalar(neg_p, 1.0); // 1 - p
    let neg_gt = tape.scale(gt, -1.0);
    let gt_c = tape.add_scalar(neg_gt, 1.0); // 1 - gt
    Ok((p, q, gt_c, prob))
}

/// Mean binary cross-entropy with probability clamping.
pub fn cross_entropy(tape: &mut Tape, gt: Var, prob: Var) -> Result<Var> {
    check_same_shape("cross_entropy", tape.value(gt), tape.value(prob))?;
    let (p, q, gt_c, _) = clamped_complements(tape, gt, prob)?;
    let ln_p = tape.ln(p);
    let ln_q = tape.ln(q);
    let t1 = tape.mul(gt, ln_p)?;
    let t2 = tape.mul(gt_c, ln_q)?;
    let s = tape.add(t1, t2)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -1.0))
}

/// Focal loss: `-mean(gt (1-p)^γ ln p + (1-gt) p^γ ln(1-p))`.
/// `γ = 0` reduces exactly to cross-entropy.
pub fn focal_loss(tape: &mut Tape, gt: Var, prob: Var, gamma: f64) -> Result<Var> {
    check_same_shape("focal_loss", tape.value(gt), tape.value(prob))?;
    if gamma < 0.0 {
        return Err(Error::InvalidParam("focal gamma must be >= 0".into()));
    }
    let (p, q, gt_c, _) = clamped_complements(tape, gt, prob)?;
    let ln_p = tape.ln(p);
    let ln_q = tape.ln(q);
    let q_pow = tape.pow_const(q, gamma);
    let p_pow = tape.pow_const(p, gamma);
    let m1 = tape.mul(q_pow, ln_p)?;
    let t1 = tape.mul(gt, m1)?;
    let m2 = tape.mul(p_pow, ln_q)?;
    let t2 = tape.mul(gt_c, m2)?;
    let s = tape.add(t1, t2)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, -1.0))
}

/// One head's segmentation loss: `w1 · dice + w2 · (ce | focal)`.
pub fn seg_loss(
    tape: &mut Tape,
    gt: Var,
    prob: Var,
    weight_map: Option<Var>,
    spec: &LossSpec,
) -> Result<Var> {
    let dice = match (spec.use_weighted_dice, weight_map) {
        (true, Some(w)) => weighted_dice_loss(tape, gt, prob, w)?,
        (true, None) => {
            return Err(Error::Contract(
                "weighted dice requested but no weight map provided".into(),
            ))
        }
        (false, _) => dice_loss(tape, gt, prob)?,
    };
    let ce = if spec.use_focal {
        focal_loss(tape, gt, prob, spec.focal_gamma)?
    } else {
        cross_entropy(tape, gt, prob)?
    };
    let d = tape.scale(dice, spec.seg_dice_weight);
    let c = tape.scale(ce, spec.seg_ce_weight);
    tape.add(d, c)
}

/// Supervised-heads loss. Deep supervision sums `w_j · seg_loss(head_j)`
/// over every head (uniform `1/n` by default); normal supervision uses the
/// deepest head alone with weight 1.
pub fn ds_loss(
    tape: &mut Tape,
    heads: &BTreeMap<usize, Var>,
    gt: Var,
    weight_map: Option<Var>,
    spec: &LossSpec,
    supervision: Supervision,
    depth: usize,
) -> Result<Var> {
    let columns: Vec<usize> = match supervision {
        Supervision::Ns => vec![depth],
        Supervision::Ds => (1..=depth).collect(),
    };
    let weights: Vec<f64> = match (&spec.head_weights, supervision) {
        (_, Supervision::Ns) => vec![1.0],
        (Some(w), Supervision::Ds) => {
            if w.len() != columns.len() {
                return Err(Error::InvalidParam(format!(
                    "{} head weights for {} supervised heads",
                    w.len(),
                    columns.len()
                )));
            }
            w.clone()
        }
        (None, Supervision::Ds) => vec![1.0 / columns.len() as f64; columns.len()],
    };

    let mut total: Option<Var> = None;
    for (&j, &w) in columns.iter().zip(&weights) {
        let head = *heads.get(&j).ok_or_else(|| {
            Error::Contract(format!("supervision needs head {j} but the forward pass has none"))
        })?;
        let term = seg_loss(tape, gt, head, weight_map, spec)?;
        let term = tape.scale(term, w);
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Contract("no supervised heads".into()))
}

/// Per-level Huber feature distance, summed over levels.
pub fn smooth_l1(
    tape: &mut Tape,
    features: &[Var],
    targets: &[Var],
    beta: f64,
    reduction: Reduction,
) -> Result<Var> {
    if features.is_empty() || features.len() != targets.len() {
        return Err(Error::Contract(format!(
            "feature loss needs matching non-empty level lists, got {} vs {}",
            features.len(),
            targets.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&f, &t) in features.iter().zip(targets) {
        let mut term = tape.huber(f, t, beta)?;
        if reduction == Reduction::Sum {
            let numel = tape.value(f).numel() as f64;
            term = tape.scale(term, numel);
        }
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty levels"))
}

/// Mean squared error `mean((x - y)^2)`.
pub fn mse_loss(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    check_same_shape("mse_loss", tape.value(x), tape.value(y))?;
    let d = tape.sub(x, y)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Combined objective: `w1 · supervised-head loss + w2 · feature loss`.
/// `feature_term` is `None` when no feature supervision is active.
pub fn total_loss(tape: &mut Tape, ds: Var, feature_term: Option<Var>, spec: &LossSpec) -> Result<Var> {
    let d = tape.scale(ds, spec.total_ds_weight);
    match feature_term {
        Some(f) => {
            let f = tape.scale(f, spec.total_feature_weight);
            tape.add(d, f)
        }
        None => Ok(d),
    }
}
