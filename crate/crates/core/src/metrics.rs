//! Clustering quality and per-group fairness statistics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::Partition;

fn check_len(pred: &Partition, truth: &Partition) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            what: "partition",
            expected: truth.len(),
            got: pred.len(),
        });
    }
    Ok(())
}

fn sizes(p: &Partition) -> Vec<usize> {
    let mut s = vec![0usize; p.cluster_count];
    for &a in &p.assignment {
        s[a] += 1;
    }
    s
}

/// Non-empty cells of the contingency table, in key order.
fn contingency(pred: &Partition, truth: &Partition) -> Vec<((usize, usize), usize)> {
    let mut table = HashMap::new();
    for (&a, &b) in pred.assignment.iter().zip(&truth.assignment) {
        *table.entry((a, b)).or_insert(0) += 1;
    }
    let mut cells: Vec<_> = table.into_iter().collect();
    cells.sort_unstable();
    cells
}

fn pairs(c: usize) -> f64 {
    (c * c.saturating_sub(1) / 2) as f64
}

/// Pairwise F-score. Two partitions with no co-clustered pairs at all agree
/// perfectly and score 1.
pub fn pairwise_f(pred: &Partition, truth: &Partition) -> Result<f64> {
    check_len(pred, truth)?;
    let tp: f64 = contingency(pred, truth)
        .into_iter()
        .map(|(_, c)| pairs(c))
        .sum();
    let pred_pairs: f64 = sizes(pred).into_iter().map(pairs).sum();
    let truth_pairs: f64 = sizes(truth).into_iter().map(pairs).sum();
    if pred_pairs == 0.0 && truth_pairs == 0.0 {
        return Ok(1.0);
    }
    if tp == 0.0 {
        return Ok(0.0);
    }
    let precision = tp / pred_pairs;
    let recall = tp / truth_pairs;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// BCubed F-score of the averaged per-sample precision and recall.
pub fn bcubed_f(pred: &Partition, truth: &Partition) -> Result<f64> {
    check_len(pred, truth)?;
    if pred.is_empty() {
        return Ok(1.0);
    }
    let (ps, ts) = (sizes(pred), sizes(truth));
    let mut precision = 0.0;
    let mut recall = 0.0;
    for ((a, b), c) in contingency(pred, truth) {
        let c = c as f64;
        precision += c * c / ps[a] as f64;
        recall += c * c / ts[b] as f64;
    }
    let n = pred.len() as f64;
    let (precision, recall) = (precision / n, recall / n);
    Ok(2.0 * precision * recall / (precision + recall))
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information over the arithmetic mean of the two entropies.
///
/// Two single-cluster partitions are identical and score 1; a single-cluster
/// partition against anything else scores 0.
pub fn nmi(pred: &Partition, truth: &Partition) -> Result<f64> {
    check_len(pred, truth)?;
    let n = pred.len() as f64;
    if pred.is_empty() {
        return Ok(1.0);
    }
    let (ps, ts) = (sizes(pred), sizes(truth));
    let (hp, ht) = (entropy(&ps, n), entropy(&ts, n));
    if hp == 0.0 && ht == 0.0 {
        return Ok(1.0);
    }
    if hp == 0.0 || ht == 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = contingency(pred, truth)
        .into_iter()
        .map(|((a, b), c)| {
            let c = c as f64;
            c / n * (n * c / (ps[a] as f64 * ts[b] as f64)).ln()
        })
        .sum();
    Ok((mi / (0.5 * (hp + ht))).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PartitionMetrics {
    pub pairwise_f: f64,
    pub bcubed_f: f64,
    pub nmi: f64,
}

impl PartitionMetrics {
    pub fn compute(pred: &Partition, truth: &Partition) -> Result<Self> {
        Ok(PartitionMetrics {
            pairwise_f: pairwise_f(pred, truth)?,
            bcubed_f: bcubed_f(pred, truth)?,
            nmi: nmi(pred, truth)?,
        })
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::PairwiseF => self.pairwise_f,
            Metric::BcubedF => self.bcubed_f,
            Metric::Nmi => self.nmi,
        }
    }

    fn from_fn(f: impl Fn(Metric) -> f64) -> Self {
        PartitionMetrics {
            pairwise_f: f(Metric::PairwiseF),
            bcubed_f: f(Metric::BcubedF),
            nmi: f(Metric::Nmi),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    PairwiseF,
    BcubedF,
    Nmi,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::PairwiseF, Metric::BcubedF, Metric::Nmi];

    pub fn label(self) -> &'static str {
        match self {
            Metric::PairwiseF => "F_P",
            Metric::BcubedF => "F_B",
            Metric::Nmi => "NMI",
        }
    }
}

/// Arithmetic mean and Bessel-corrected standard deviation (0 for fewer than two values).
pub fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Half the summed absolute differences over all ordered pairs.
pub fn demographic_discrepancy(values: &[f64]) -> f64 {
    let mut total = 0.0;
    for a in values {
        for b in values {
            total += (a - b).abs();
        }
    }
    0.5 * total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub per_group: BTreeMap<u32, PartitionMetrics>,
    pub mean: PartitionMetrics,
    pub std: PartitionMetrics,
    pub delta_dp: f64,
    pub delta_dp_metric: Metric,
    /// Metrics over all samples, ignoring groups.
    pub overall: PartitionMetrics,
}

impl FairnessReport {
    /// Build from already-computed per-group metrics.
    pub fn from_groups(
        per_group: BTreeMap<u32, PartitionMetrics>,
        overall: PartitionMetrics,
        delta_dp_metric: Metric,
    ) -> Self {
        let column = |m: Metric| per_group.values().map(|g| g.get(m)).collect::<Vec<_>>();
        let mean = PartitionMetrics::from_fn(|m| mean_and_sample_std(&column(m)).0);
        let std = PartitionMetrics::from_fn(|m| mean_and_sample_std(&column(m)).1);
        let delta_dp = demographic_discrepancy(&column(delta_dp_metric));
        FairnessReport {
            per_group,
            mean,
            std,
            delta_dp,
            delta_dp_metric,
            overall,
        }
    }

    /// Table with metrics as rows, groups as columns, then Mean and STD.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for g in self.per_group.keys() {
            write!(out, ",group_{g}").unwrap();
        }
        out.push_str(",Mean,STD\n");
        for m in Metric::ALL {
            out.push_str(m.label());
            for g in self.per_group.values() {
                write!(out, ",{}", g.get(m)).unwrap();
            }
            writeln!(out, ",{},{}", self.mean.get(m), self.std.get(m)).unwrap();
        }
        out
    }
}

/// Per-group metrics on the induced sub-partitions, with mean, std and discrepancy.
pub fn group_report(
    pred: &Partition,
    truth: &Partition,
    groups: &[u32],
    delta_dp_metric: Metric,
) -> Result<FairnessReport> {
    check_len(pred, truth)?;
    if groups.len() != pred.len() {
        return Err(Error::LengthMismatch {
            what: "groups",
            expected: pred.len(),
            got: groups.len(),
        });
    }
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    let mut per_group = BTreeMap::new();
    for (g, rows) in members {
        if rows.len() < 2 {
            log::warn!(
                "group {g} has {} sample(s); excluded from the report",
                rows.len()
            );
            continue;
        }
        per_group.insert(
            g,
            PartitionMetrics::compute(&pred.restrict(&rows), &truth.restrict(&rows))?,
        );
    }
    let overall = PartitionMetrics::compute(pred, truth)?;
    Ok(FairnessReport::from_groups(
        per_group,
        overall,
        delta_dp_metric,
    ))
}
