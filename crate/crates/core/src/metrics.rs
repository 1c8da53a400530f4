//! Offline evaluation metrics: ROC AUC and log loss.

use crate::error::{Error, Result};

pub const LOGLOSS_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub score: f64,
    pub label: bool,
}

impl EvalRecord {
    pub fn new(score: f64, label: bool) -> Self {
        Self { score, label }
    }
}

/// Probability that a random positive outscores a random negative, with ties
/// worth one half. Sort-and-rank, `O(n log n)`.
pub fn auc(records: &[EvalRecord]) -> Result<f64> {
    if let Some(r) = records.iter().find(|r| !r.score.is_finite()) {
        return Err(Error::Metric(format!("non-finite score {}", r.score)));
    }
    let n_pos = records.iter().filter(|r| r.label).count();
    let n_neg = records.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(format!("AUC needs both classes (got {n_pos} positive, {n_neg} negative)")));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].score.total_cmp(&records[b].score));
    // sum of 1-based midranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && records[order[j + 1]].score == records[order[i]].score {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| records[k].label).count();
        rank_sum += mid * pos_in_group as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 − 1e-7]`.
pub fn logloss(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("logloss"));
    }
    let total: f64 = records
        .iter()
        .map(|r| {
            let p = r.score.clamp(LOGLOSS_CLAMP, 1.0 - LOGLOSS_CLAMP);
            if r.label {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / records.len() as f64)
}

pub fn records(scores: &[f64], labels: &[bool]) -> Vec<EvalRecord> {
    scores.iter().zip(labels).map(|(&s, &l)| EvalRecord::new(s, l)).collect()
}
