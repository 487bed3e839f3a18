//! Evaluation metrics: top-1 accuracy, PPV / sensitivity / F1, exact
//! rank AUC, and Dice overlap.
//!
//! Undefined ratios (zero denominators) surface as `None`, never as a
//! silent zero, so macro averages stay honest.

use std::collections::BTreeMap;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scored binary outcomes: (score, true label).
#[derive(Debug, Clone, Default)]
pub struct BinaryOutcomes {
    pub items: Vec<(f64, bool)>,
}

impl BinaryOutcomes {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, score: f64, label: bool) {
        self.items.push((score, label));
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Confusion counts at a decision threshold (predict positive iff
    /// score >= threshold). Returns (tp, fp, tn, fn).
    pub fn confusion(&self, threshold: f64) -> (usize, usize, usize, usize) {
        let (mut tp, mut fp, mut tn, mut fun) = (0, 0, 0, 0);
        for &(score, label) in &self.items {
            let pred = score >= threshold;
            match (pred, label) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fun += 1,
            }
        }
        (tp, fp, tn, fun)
    }
}

/// PPV / sensitivity / F1 at a threshold. `None` marks an undefined ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryStats {
    pub ppv: Option<f64>,
    pub sensitivity: Option<f64>,
    pub f1: Option<f64>,
}

/// Fraction of exact matches between predictions and truth.
pub fn top1_accuracy(pred: &[u32], truth: &[u32]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::validation(format!(
            "top1_accuracy length mismatch: {} predictions vs {} truths",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::validation("top1_accuracy on empty input"));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Harmonic mean of precision and recall. Zero when both are zero.
pub fn f1_score(ppv: f64, sensitivity: f64) -> f64 {
    if ppv + sensitivity == 0.0 {
        0.0
    } else {
        2.0 * ppv * sensitivity / (ppv + sensitivity)
    }
}

/// PPV, sensitivity, and F1 at the given threshold.
pub fn binary_stats(outcomes: &BinaryOutcomes, threshold: f64) -> BinaryStats {
    let (tp, fp, _tn, fun) = outcomes.confusion(threshold);
    let ppv = if tp + fp > 0 {
        Some(tp as f64 / (tp + fp) as f64)
    } else {
        None
    };
    let sensitivity = if tp + fun > 0 {
        Some(tp as f64 / (tp + fun) as f64)
    } else {
        None
    };
    let f1 = match (ppv, sensitivity) {
        (Some(p), Some(s)) => Some(f1_score(p, s)),
        _ => None,
    };
    BinaryStats {
        ppv,
        sensitivity,
        f1,
    }
}

/// Exact rank AUC: P(score_pos > score_neg) + 0.5 * P(equal), via the
/// Mann-Whitney U statistic with average ranks for ties.
///
/// Errors if only one class is present.
pub fn auc(outcomes: &BinaryOutcomes) -> Result<f64> {
    let n_pos = outcomes.items.iter().filter(|(_, l)| *l).count();
    let n_neg = outcomes.items.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::validation(format!(
            "auc undefined: {} positives, {} negatives",
            n_pos, n_neg
        )));
    }
    let mut sorted: Vec<(f64, bool)> = outcomes.items.clone();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores must be finite"));

    // Sum of average ranks over positives; ties share (lo + hi) / 2.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        // ranks are 1-based: this tie group spans ranks i+1 ..= j+1
        let avg_rank = ((i + 1 + j + 1) as f64) / 2.0;
        for item in &sorted[i..=j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Voxel overlap 2|A∩B| / (|A|+|B|) for one class. Both-empty is 1.0.
pub fn dice_score(pred: &Array3<u16>, truth: &Array3<u16>, class_id: u16) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(Error::validation(format!(
            "dice_score shape mismatch: {:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        let pa = p == class_id;
        let tb = t == class_id;
        a += pa as usize;
        b += tb as usize;
        inter += (pa && tb) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Metrics for one group plus the micro/macro roll-up of many groups.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Pooled over every outcome.
    pub micro: GroupMetrics,
    /// Unweighted mean over groups where the metric is defined; `None`
    /// when no group defines it.
    pub macro_: GroupMetrics,
    /// Per-group metrics keyed by group name.
    pub per_group: BTreeMap<String, GroupMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub n: usize,
    pub ppv: Option<f64>,
    pub sensitivity: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
}

fn group_metrics(outcomes: &BinaryOutcomes, threshold: f64) -> GroupMetrics {
    let stats = binary_stats(outcomes, threshold);
    GroupMetrics {
        n: outcomes.len(),
        ppv: stats.ppv,
        sensitivity: stats.sensitivity,
        f1: stats.f1,
        auc: auc(outcomes).ok(),
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Micro (pooled) and macro (per-group mean) aggregation of grouped
/// binary outcomes, e.g. detection results grouped by abnormality.
pub fn aggregate_binary(
    groups: &BTreeMap<String, BinaryOutcomes>,
    threshold: f64,
) -> MetricsReport {
    let mut pooled = BinaryOutcomes::new();
    let mut per_group = BTreeMap::new();
    for (name, outcomes) in groups {
        pooled.items.extend_from_slice(&outcomes.items);
        per_group.insert(name.clone(), group_metrics(outcomes, threshold));
    }
    let micro = group_metrics(&pooled, threshold);
    let macro_ = GroupMetrics {
        n: pooled.len(),
        ppv: mean_defined(per_group.values().map(|g| g.ppv)),
        sensitivity: mean_defined(per_group.values().map(|g| g.sensitivity)),
        f1: mean_defined(per_group.values().map(|g| g.f1)),
        auc: mean_defined(per_group.values().map(|g| g.auc)),
    };
    MetricsReport {
        micro,
        macro_,
        per_group,
    }
}
