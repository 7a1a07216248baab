//! Test-split evaluation: per-head dice tables over the training grid, and
//! the pruning benchmark that times the trimmed subgraphs.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{case_counts, dice_global, dice_per_case, threshold_mask, CaseCounts};
use crate::net::NetGraph;
use crate::tensor::Tensor;
use crate::threads::parallel_map;
use crate::train::{Phase, TrainItem};

/// Case id prefix of a slice key (`case_003_s007` → `case_003`).
pub fn case_of(key: &str) -> &str {
    key.rsplit_once("_s").map(|(case, _)| case).unwrap_or(key)
}

/// Dice statistics of one head over a test split.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct HeadStats {
    pub head: usize,
    /// Mean of per-case dice.
    pub dpc: f64,
    /// Dice over pooled counts of all cases.
    pub dg: f64,
}

/// Evaluate every head of one net at threshold 0.5, grouping slices into
/// cases by key prefix. For each level in `pruning_levels`, the trimmed
/// subgraph must reproduce the full graph's head exactly on every item.
pub fn evaluate_checkpoint(
    net: &NetGraph,
    items: &[TrainItem],
    pruning_levels: &[usize],
) -> Result<Vec<HeadStats>> {
    if items.is_empty() {
        return Err(Error::InvalidConfig("evaluation needs at least one item".into()));
    }
    let pruned: Vec<(usize, NetGraph)> = pruning_levels
        .iter()
        .map(|&l| net.prune(l).map(|p| (l, p)))
        .collect::<Result<_>>()?;

    type SliceOut = Result<BTreeMap<usize, CaseCounts>>;
    let per_item: Vec<SliceOut> = parallel_map(items, |_, item| {
        let fwd = net.forward_eval(&item.image)?;
        for (l, pnet) in &pruned {
            let pf = pnet.forward_eval(&item.image)?;
            if pf.heads[l].data() != fwd.heads[l].data() {
                return Err(Error::Contract(format!(
                    "pruned level {l} diverges from the full graph on {}",
                    item.key
                )));
            }
        }
        fwd.heads
            .iter()
            .map(|(&j, prob)| {
                let mask = threshold_mask(prob, 0.5);
                Ok((j, case_counts(&item.gt, &mask)?))
            })
            .collect()
    });

    let mut per_head: BTreeMap<usize, BTreeMap<String, CaseCounts>> = BTreeMap::new();
    for (item, out) in items.iter().zip(per_item) {
        for (j, counts) in out? {
            per_head
                .entry(j)
                .or_default()
                .entry(case_of(&item.key).to_string())
                .or_default()
                .add(counts);
        }
    }

    per_head
        .into_iter()
        .map(|(head, cases)| {
            let counts: Vec<CaseCounts> = cases.into_values().collect();
            Ok(HeadStats { head, dpc: dice_per_case(&counts)?, dg: dice_global(&counts)? })
        })
        .collect()
}

/// One table row: a grid cell's head scores for one phase.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub mode: String,
    pub phase: Phase,
    pub head: usize,
    pub dpc: f64,
    pub dg: f64,
}

/// The grid's dice table, one row per (mode, phase, head).
#[derive(Debug, Clone, Default, Serialize)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn push_stats(&mut self, mode: &str, phase: Phase, stats: &[HeadStats]) {
        for s in stats {
            self.rows.push(EvalRow {
                mode: mode.to_string(),
                phase,
                head: s.head,
                dpc: s.dpc,
                dg: s.dg,
            });
        }
    }

    pub fn get(&self, mode: &str, phase: Phase, head: usize) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.mode == mode && r.phase == phase && r.head == head)
    }

    /// Every score must be a valid dice value.
    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            for v in [r.dpc, r.dg] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Contract(format!(
                        "dice {v} outside [0, 1] at {}/{}/head {}",
                        r.mode,
                        r.phase.as_str(),
                        r.head
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,phase,head,dice_per_case,dice_global\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6}\n",
                r.mode,
                r.phase.as_str(),
                r.head,
                r.dpc,
                r.dg
            ));
        }
        out
    }

    /// Aligned text rendering: one block per phase, modes down, heads across,
    /// `dpc/dg` in each cell.
    pub fn render_text(&self) -> String {
        let mut heads: Vec<usize> = self.rows.iter().map(|r| r.head).collect();
        heads.sort_unstable();
        heads.dedup();
        let mut modes: Vec<&str> = self.rows.iter().map(|r| r.mode.as_str()).collect();
        modes.dedup();

        let mut out = String::new();
        for phase in [Phase::Liver, Phase::Tumor] {
            if !self.rows.iter().any(|r| r.phase == phase) {
                continue;
            }
            out.push_str(&format!("{:<8}", phase.as_str()));
            for j in &heads {
                out.push_str(&format!("{:>16}", format!("head x0_{j}")));
            }
            out.push('\n');
            for mode in &modes {
                out.push_str(&format!("{mode:<8}"));
                for j in &heads {
                    match self.get(mode, phase, *j) {
                        Some(r) => {
                            out.push_str(&format!("{:>16}", format!("{:.3}/{:.3}", r.dpc, r.dg)))
                        }
                        None => out.push_str(&format!("{:>16}", "-")),
                    }
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }
}

/// One pruning level's benchmark outcome.
#[derive(Debug, Clone, Serialize)]
pub struct PruneBenchRow {
    pub level: usize,
    pub params: usize,
    pub median_ms: f64,
    /// Pruned head equals the full graph's same-column head on every input.
    pub matches_full: bool,
}

/// Median per-image inference time at each pruning level, with an exactness
/// check of each trimmed head against the full graph.
pub fn prune_bench(net: &NetGraph, inputs: &[Tensor], levels: &[usize]) -> Result<Vec<PruneBenchRow>> {
    if inputs.is_empty() || levels.is_empty() {
        return Err(Error::InvalidConfig("pruning benchmark needs inputs and levels".into()));
    }
    let full: Vec<_> = inputs.iter().map(|x| net.forward_eval(x)).collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let pruned = net.prune(level)?;
        let mut times = Vec::with_capacity(inputs.len());
        let mut matches_full = true;
        for (x, f) in inputs.iter().zip(&full) {
            let t0 = Instant::now();
            let out = pruned.forward_eval(x)?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
            if out.heads[&level].data() != f.heads[&level].data() {
                matches_full = false;
            }
        }
        times.sort_by(|a, b| a.total_cmp(b));
        let n = times.len();
        let median_ms =
            if n % 2 == 1 { times[n / 2] } else { (times[n / 2 - 1] + times[n / 2]) / 2.0 };
        rows.push(PruneBenchRow { level, params: pruned.param_count(), median_ms, matches_full });
    }
    Ok(rows)
}

/// Benchmark report: timing column varies run to run, the rest is stable.
pub fn prune_bench_csv(rows: &[PruneBenchRow]) -> String {
    let mut out = String::from("level,params,median_ms,matches_full\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.3},{}\n", r.level, r.params, r.median_ms, r.matches_full));
    }
    out
}
