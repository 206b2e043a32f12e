//! Localization and detection metrics.
//!
//! Scores are pixel- or image-level anomaly scores (higher = more anomalous),
//! labels mark ground-truth anomalies. The [`reference`] submodule holds
//! deliberately naive re-implementations (pairwise counting, exhaustive
//! threshold scans) used to cross-check the fast versions in tests; keep the
//! two in sync when semantics change.

use crate::error::{CoreError, Result};

fn validate_scored(scores: &[f64], labels: &[bool], context: &'static str) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(CoreError::Shape {
            context,
            expected: vec![scores.len()],
            got: vec![labels.len()],
        });
    }
    if scores.is_empty() {
        return Err(CoreError::Domain {
            context,
            message: "empty score set".to_string(),
        });
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(CoreError::Domain {
            context,
            message: format!("non-finite score {s}"),
        });
    }
    Ok(())
}

/// Indices of `scores` in descending score order (stable).
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    idx
}

/// Area under the ROC curve by the rank-sum statistic. Tied scores get their
/// average rank, which credits tied positive/negative pairs with 1/2.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    validate_scored(scores, labels, "auroc")?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::Domain {
            context: "auroc",
            message: format!("need both classes, got {n_pos} positive / {n_neg} negative"),
        });
    }

    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Average ranks (1-based) over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let avg_rank = ((i + 1 + j) as f64) / 2.0;
        for &k in &idx[i..j] {
            if labels[k] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }

    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Area under the precision-recall curve as average precision: the sum of
/// `delta_recall * precision` over descending score groups, with tied scores
/// entering as one group.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    validate_scored(scores, labels, "auprc")?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(CoreError::Domain {
            context: "auprc",
            message: "no positive labels".to_string(),
        });
    }

    let idx = descending_order(scores);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let mut group_tp = 0usize;
        let mut group_fp = 0usize;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                group_tp += 1;
            } else {
                group_fp += 1;
            }
            j += 1;
        }
        tp += group_tp;
        fp += group_fp;
        if group_tp > 0 {
            let precision = tp as f64 / (tp + fp) as f64;
            ap += (group_tp as f64 / n_pos as f64) * precision;
        }
        i = j;
    }
    Ok(ap)
}

/// Binary confusion counts over paired masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_masks(pred: &[bool], truth: &[bool]) -> Result<Confusion> {
        if pred.len() != truth.len() {
            return Err(CoreError::Shape {
                context: "confusion",
                expected: vec![pred.len()],
                got: vec![truth.len()],
            });
        }
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    /// `2 TP / (2 TP + FP + FN)`; 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    /// `TP / (TP + FP + FN)`; 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }
}

pub fn dice(pred: &[bool], truth: &[bool]) -> Result<f64> {
    Ok(Confusion::from_masks(pred, truth)?.dice())
}

pub fn iou(pred: &[bool], truth: &[bool]) -> Result<f64> {
    Ok(Confusion::from_masks(pred, truth)?.iou())
}

/// Threshold and the pooled overlap score it achieves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub dice: f64,
}

/// Pooled-overlap-maximizing threshold over the candidate set of distinct
/// scores, with masks formed by `score >= threshold`. Ties in the objective
/// resolve to the smallest optimal threshold (the most inclusive mask).
pub fn optimal_threshold(scores: &[f64], labels: &[bool]) -> Result<OperatingPoint> {
    validate_scored(scores, labels, "optimal_threshold")?;
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    if n_pos == 0.0 {
        return Err(CoreError::Domain {
            context: "optimal_threshold",
            message: "no positive labels".to_string(),
        });
    }

    let idx = descending_order(scores);
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut best = OperatingPoint {
        threshold: f64::INFINITY,
        dice: -1.0,
    };
    let mut i = 0;
    while i < idx.len() {
        let tau = scores[idx[i]];
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == tau {
            if labels[idx[j]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        let fn_ = n_pos - tp;
        let d = 2.0 * tp / (2.0 * tp + fp + fn_);
        // >= keeps the last (smallest) threshold among equally good ones.
        if d >= best.dice {
            best = OperatingPoint {
                threshold: tau,
                dice: d,
            };
        }
        i = j;
    }
    Ok(best)
}

/// Mean and population standard deviation of per-group overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub mean: f64,
    pub std: f64,
    pub per_group: Vec<f64>,
}

/// Per-group (per-scan) overlap of thresholded predictions against truth.
pub fn dice_by_group(groups: &[(&[bool], &[bool])]) -> Result<GroupStats> {
    if groups.is_empty() {
        return Err(CoreError::Domain {
            context: "dice_by_group",
            message: "no groups".to_string(),
        });
    }
    let per_group: Vec<f64> = groups
        .iter()
        .map(|(p, t)| dice(p, t))
        .collect::<Result<_>>()?;
    let n = per_group.len() as f64;
    let mean = per_group.iter().sum::<f64>() / n;
    let var = per_group.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    Ok(GroupStats {
        mean,
        std: var.sqrt(),
        per_group,
    })
}

/// Naive counterparts of every metric, kept independent of the fast
/// implementations so tests can cross-check them.
pub mod reference {
    /// AUROC by counting concordant positive/negative pairs (ties count 1/2).
    pub fn auroc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    /// Average precision by evaluating a full confusion matrix at every
    /// distinct threshold in descending order.
    pub fn average_precision_scan(scores: &[f64], labels: &[bool]) -> f64 {
        let mut taus: Vec<f64> = scores.to_vec();
        taus.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
        taus.dedup();
        let n_pos = labels.iter().filter(|&&l| l).count() as f64;

        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for tau in taus {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (&s, &l) in scores.iter().zip(labels) {
                if s >= tau {
                    if l {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
            }
            let recall = tp / n_pos;
            let precision = tp / (tp + fp);
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        ap
    }

    pub fn dice_recount(pred: &[bool], truth: &[bool]) -> f64 {
        let tp = pred.iter().zip(truth).filter(|(&p, &t)| p && t).count() as f64;
        let pos_pred = pred.iter().filter(|&&p| p).count() as f64;
        let pos_truth = truth.iter().filter(|&&t| t).count() as f64;
        if pos_pred + pos_truth == 0.0 {
            1.0
        } else {
            2.0 * tp / (pos_pred + pos_truth)
        }
    }

    pub fn iou_recount(pred: &[bool], truth: &[bool]) -> f64 {
        let tp = pred.iter().zip(truth).filter(|(&p, &t)| p && t).count() as f64;
        let union = pred.iter().zip(truth).filter(|(&p, &t)| p || t).count() as f64;
        if union == 0.0 {
            1.0
        } else {
            tp / union
        }
    }

    /// Exhaustive scan over every distinct score as a threshold candidate,
    /// recomputing pooled overlap from scratch; smallest optimal threshold.
    pub fn optimal_threshold_exhaustive(scores: &[f64], labels: &[bool]) -> (f64, f64) {
        let mut taus: Vec<f64> = scores.to_vec();
        taus.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        taus.dedup();

        let mut best = (f64::INFINITY, -1.0);
        for &tau in &taus {
            let pred: Vec<bool> = scores.iter().map(|&s| s >= tau).collect();
            let d = dice_recount(&pred, labels);
            if d > best.1 || (d == best.1 && tau < best.0) {
                best = (tau, d);
            }
        }
        best
    }
}
