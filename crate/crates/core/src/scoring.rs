//! Window scores, threshold rule, window-level metrics and the plotting shift.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Scores aligned to window start indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub starts: Vec<usize>,
    pub scores: Vec<f64>,
}

impl ScoreSeries {
    pub fn new(starts: Vec<usize>, scores: Vec<f64>) -> Result<Self> {
        if starts.len() != scores.len() {
            return Err(Error::invalid("scores and start indices differ in length"));
        }
        Ok(Self { starts, scores })
    }

    pub fn from_scalars<T: Scalar>(starts: &[usize], scores: &[T]) -> Result<Self> {
        Self::new(starts.to_vec(), scores.iter().map(|s| s.as_f64()).collect())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Plotting coordinates of a score series, displaced by `offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftedScores {
    pub x: Vec<usize>,
    pub scores: Vec<f64>,
    pub offset: usize,
}

impl ShiftedScores {
    pub fn unshift(&self) -> ScoreSeries {
        ScoreSeries {
            starts: self.x.iter().map(|x| x - self.offset).collect(),
            scores: self.scores.clone(),
        }
    }
}

/// Places each score at `start + w`, the end of the window that produced it.
pub fn shift_for_plot(series: &ScoreSeries, w: usize) -> ShiftedScores {
    ShiftedScores {
        x: series.starts.iter().map(|s| s + w).collect(),
        scores: series.scores.clone(),
        offset: w,
    }
}

/// Empirical `q`-quantile with linear interpolation between order statistics
/// at position `q * (n - 1)`.
pub fn pick_threshold(scores: &[f64], q: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("threshold scores"));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(format!("quantile {q} outside (0, 1]")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("threshold scores"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// `1` where `score >= threshold`.
pub fn classify(scores: &[f64], threshold: f64) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s >= threshold)).collect()
}

/// Rank-based (Mann-Whitney) ROC AUC; tied scores get average ranks.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUC needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg_rank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

pub fn confusion(predictions: &[u8], labels: &[u8]) -> Result<Confusion> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid("predictions and labels differ in length"));
    }
    let mut c = Confusion::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == 1, l == 1) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub predicted_anomalies: usize,
    pub threshold: f64,
    pub windows: usize,
}

impl EvalReport {
    /// Metrics of test scores against window labels at a fixed threshold.
    pub fn evaluate(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        let auc = roc_auc(scores, labels)?;
        let preds = classify(scores, threshold);
        let c = confusion(&preds, labels)?;
        Ok(Self {
            auc,
            tp: c.tp,
            tn: c.tn,
            fp: c.fp,
            fn_: c.fn_,
            predicted_anomalies: c.tp + c.fp,
            threshold,
            windows: scores.len(),
        })
    }
}
