//! Logloss and rank-based AUC.

use serde::{Deserialize, Serialize};

use crate::error::{CellError, Result};

pub const PROB_CLAMP: f64 = 1e-7;

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary cross-entropy of one prediction, after clamping.
#[inline]
pub fn instance_logloss(pred: f64, label: u8) -> f64 {
    let p = clamp_prob(pred);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 - 1e-7]`.
pub fn logloss(preds: &[f64], labels: &[u8]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(CellError::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(CellError::Empty);
    }
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| instance_logloss(p, y))
        .sum();
    Ok(total / preds.len() as f64)
}

/// Area under the ROC curve via the Mann-Whitney rank sum, ties given average rank.
pub fn auc(preds: &[f64], labels: &[u8]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(CellError::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.iter().any(|p| p.is_nan()) {
        return Err(CellError::NonFinite("auc scores".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CellError::SingleClass(format!(
            "auc needs both classes ({n_pos} positives, {n_neg} negatives)"
        )));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].total_cmp(&preds[b]));

    // Sum of (doubled) ranks of the positives keeps everything integral.
    let mut pos_rank2: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && preds[order[end]] == preds[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end, doubled average = start + 1 + end
        let rank2 = (start + 1 + end) as u128;
        let pos_in_group = order[start..end].iter().filter(|&&k| labels[k] == 1).count() as u128;
        pos_rank2 += rank2 * pos_in_group;
        start = end;
    }
    let np = n_pos as u128;
    // 2 * (R_pos - n_pos (n_pos + 1) / 2)
    let u2 = pos_rank2 - np * (np + 1);
    Ok(u2 as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub logloss: f64,
    pub n: usize,
    pub positive_ratio: f64,
}

impl EvalReport {
    pub fn compute(preds: &[f64], labels: &[u8]) -> Result<Self> {
        let auc = auc(preds, labels)?;
        let logloss = logloss(preds, labels)?;
        Ok(EvalReport {
            auc,
            logloss,
            n: labels.len(),
            positive_ratio: labels.iter().filter(|&&y| y == 1).count() as f64 / labels.len() as f64,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}
