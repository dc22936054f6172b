//! Sequence diagnostics: weighted transition entropy (WTE), local smoothness
//! influence index (LSII), accuracy and support-weighted F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smoothers::{window_partition, StageSequence};
use crate::sum::kahan_sum;

/// Empirical first-order transition structure of a label sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionStats {
    pub counts: Vec<Vec<u64>>,
    /// Row-normalized counts; rows of absent classes are all zero.
    pub row_probs: Vec<Vec<f64>>,
    pub row_totals: Vec<u64>,
    pub class_weights: Vec<f64>,
}

pub fn transition_stats(s: &StageSequence) -> Result<TransitionStats> {
    let labels = s.labels();
    if labels.len() < 2 {
        return Err(Error::SequenceTooShort {
            needed: 2,
            got: labels.len(),
        });
    }
    let c = s.n_classes();
    let mut counts = vec![vec![0u64; c]; c];
    for w in labels.windows(2) {
        counts[w[0]][w[1]] += 1;
    }
    let row_totals: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
    let total: u64 = row_totals.iter().sum();
    let row_probs = counts
        .iter()
        .zip(&row_totals)
        .map(|(row, &r)| {
            row.iter()
                .map(|&n| if r > 0 { n as f64 / r as f64 } else { 0.0 })
                .collect()
        })
        .collect();
    let class_weights = row_totals.iter().map(|&r| r as f64 / total as f64).collect();
    Ok(TransitionStats {
        counts,
        row_probs,
        row_totals,
        class_weights,
    })
}

/// Class-weighted conditional entropy of the transition matrix, in nats.
pub fn wte(s: &StageSequence) -> Result<f64> {
    let st = transition_stats(s)?;
    let terms = st
        .row_probs
        .iter()
        .zip(&st.class_weights)
        .zip(&st.row_totals)
        .filter(|(_, &r)| r > 0)
        .map(|((row, &pi), _)| {
            let h = -kahan_sum(row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()));
            pi * h
        });
    Ok(kahan_sum(terms))
}

/// Per-correction agreement scores, one per corrected index whose window has
/// other members. Shared by [`lsii`] and pooled multi-sequence reporting.
pub fn lsii_terms(none_preds: &StageSequence, corr_preds: &StageSequence, w: usize) -> Result<Vec<f64>> {
    let (none, corr) = (none_preds.labels(), corr_preds.labels());
    if none.len() != corr.len() {
        return Err(Error::shape(format!(
            "prediction lengths differ: {} vs {}",
            none.len(),
            corr.len()
        )));
    }
    if w < 2 {
        return Err(Error::invalid(format!("LSII window must be at least 2, got {w}")));
    }
    let mut terms = Vec::new();
    for (start, end) in window_partition(none.len(), w) {
        if end - start < 2 {
            continue;
        }
        for t in start..end {
            if none[t] == corr[t] {
                continue;
            }
            let agree = (start..end).filter(|&k| k != t && corr[k] == corr[t]).count();
            terms.push(agree as f64 / (end - start - 1) as f64);
        }
    }
    Ok(terms)
}

/// Mean agreement between each correction and the rest of its non-overlapping
/// window. `None` when nothing was corrected.
///
/// `y_true` is only length-checked; the index depends on the two prediction
/// sequences alone.
pub fn lsii(
    none_preds: &StageSequence,
    corr_preds: &StageSequence,
    y_true: &StageSequence,
    w: usize,
) -> Result<Option<f64>> {
    if y_true.len() != none_preds.len() {
        return Err(Error::shape("ground truth length differs from predictions"));
    }
    let terms = lsii_terms(none_preds, corr_preds, w)?;
    Ok(mean_or_none(&terms))
}

pub(crate) fn mean_or_none(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(kahan_sum(v.iter().copied()) / v.len() as f64)
    }
}

pub fn accuracy(pred: &StageSequence, truth: &StageSequence) -> Result<f64> {
    check_lengths(pred, truth)?;
    if pred.is_empty() {
        return Err(Error::invalid("accuracy of an empty sequence"));
    }
    let hits = pred.labels().iter().zip(truth.labels()).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

fn check_lengths(a: &StageSequence, b: &StageSequence) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("sequence lengths differ: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// Per-class F1 and the support-weighted mean over classes present in `truth`.
pub fn f1_scores(pred: &StageSequence, truth: &StageSequence, c: usize) -> Result<(Vec<f64>, f64)> {
    check_lengths(pred, truth)?;
    if pred.labels().iter().chain(truth.labels()).any(|&l| l >= c) {
        return Err(Error::invalid(format!("label outside 0..{c}")));
    }
    let mut tp = vec![0usize; c];
    let mut fp = vec![0usize; c];
    let mut support = vec![0usize; c];
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        support[t] += 1;
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
        }
    }
    let per_class: Vec<f64> = (0..c)
        .map(|k| {
            let denom = 2 * tp[k] + fp[k] + (support[k] - tp[k]);
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[k] as f64 / denom as f64
            }
        })
        .collect();
    let n = truth.len().max(1) as f64;
    let weighted = kahan_sum((0..c).map(|k| support[k] as f64 / n * per_class[k]));
    Ok((per_class, weighted))
}

pub fn weighted_f1(pred: &StageSequence, truth: &StageSequence, c: usize) -> Result<f64> {
    Ok(f1_scores(pred, truth, c)?.1)
}

/// Pearson correlation of two equally long samples.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::shape("correlation inputs differ in length"));
    }
    let n = xs.len() as f64;
    let mx = kahan_sum(xs.iter().copied()) / n;
    let my = kahan_sum(ys.iter().copied()) / n;
    let sxy = kahan_sum(xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)));
    let sxx = kahan_sum(xs.iter().map(|x| (x - mx).powi(2)));
    let syy = kahan_sum(ys.iter().map(|y| (y - my).powi(2)));
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson r between a diagnostic metric and accuracy over run points.
pub fn metric_accuracy_correlation(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
    pearson(&xs, &ys)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub smoother: String,
    pub seed: u64,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub wte: f64,
    pub lsii: Option<f64>,
    pub per_class_f1: Vec<f64>,
    pub config_digest: String,
}
