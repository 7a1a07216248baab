//! Evaluation metrics: dice score per case and pooled over all cases.

use crate::error::{Error, Result};
use crate::tensor::{check_same_shape, Tensor};

/// Voxel counts sufficient to compute dice for one case and to pool cases.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CaseCounts {
    pub intersection: u64,
    pub gt: u64,
    pub mp: u64,
}

impl CaseCounts {
    pub fn add(&mut self, other: CaseCounts) {
        self.intersection += other.intersection;
        self.gt += other.gt;
        self.mp += other.mp;
    }

    pub fn dice(&self) -> f64 {
        if self.gt + self.mp == 0 {
            1.0 // both empty: perfect agreement by convention
        } else {
            2.0 * self.intersection as f64 / (self.gt + self.mp) as f64
        }
    }
}

/// Binarize a probability map at `thr` (strictly greater goes to 1).
pub fn threshold_mask(prob: &Tensor, thr: f64) -> Tensor {
    prob.map(|v| if v > thr { 1.0 } else { 0.0 })
}

/// Counts foreground overlap between two binary masks.
pub fn case_counts(gt: &Tensor, mp: &Tensor) -> Result<CaseCounts> {
    check_same_shape("case_counts", gt, mp)?;
    if !gt.is_binary() || !mp.is_binary() {
        return Err(Error::Contract("dice inputs must be binary 0/1 masks".into()));
    }
    let mut c = CaseCounts::default();
    for (&g, &m) in gt.iter().zip(mp.iter()) {
        c.gt += g as u64;
        c.mp += m as u64;
        c.intersection += (g * m) as u64;
    }
    Ok(c)
}

/// `2|GT ∩ MP| / (|GT| + |MP|)`, with both-empty masks scoring 1.
pub fn dice_score(gt: &Tensor, mp: &Tensor) -> Result<f64> {
    Ok(case_counts(gt, mp)?.dice())
}

/// Mean of the per-case dice scores.
pub fn dice_per_case(cases: &[CaseCounts]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::InvalidParam("dice_per_case needs at least one case".into()));
    }
    Ok(cases.iter().map(CaseCounts::dice).sum::<f64>() / cases.len() as f64)
}

/// Dice over the concatenation of all cases (pooled counts).
pub fn dice_global(cases: &[CaseCounts]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::InvalidParam("dice_global needs at least one case".into()));
    }
    let mut pooled = CaseCounts::default();
    for c in cases {
        pooled.add(*c);
    }
    Ok(pooled.dice())
}

/// Renders the per-case metrics table: one row per case with liver and
/// tumor dice, then a summary row with DPC means and pooled DG values.
pub fn metrics_csv(rows: &[(String, CaseCounts, CaseCounts)]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::InvalidParam("metrics report needs at least one case".into()));
    }
    let mut out = String::from("case_id,liver_dice,tumor_dice\n");
    for (id, liver, tumor) in rows {
        out.push_str(&format!("{id},{:.6},{:.6}\n", liver.dice(), tumor.dice()));
    }
    let liver: Vec<CaseCounts> = rows.iter().map(|r| r.1).collect();
    let tumor: Vec<CaseCounts> = rows.iter().map(|r| r.2).collect();
    out.push_str(&format!(
        "dpc,{:.6},{:.6}\n",
        dice_per_case(&liver)?,
        dice_per_case(&tumor)?
    ));
    out.push_str(&format!(
        "dg,{:.6},{:.6}\n",
        dice_global(&liver)?,
        dice_global(&tumor)?
    ));
    Ok(out)
}
