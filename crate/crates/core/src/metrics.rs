//! Accuracy, macro one-vs-rest AUC, mean average precision and PSNR.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Classification (and optionally reconstruction) results on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub auc: f64,
    pub map: f64,
    /// Reconstruction only; `f64::INFINITY` for an exact reconstruction.
    pub psnr: Option<f64>,
    pub n_samples: usize,
    /// Classes without any positive in the truth, left out of AUC and mAP.
    pub skipped_classes: Vec<usize>,
}

/// Fraction of exactly matching entries.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dim("accuracy", &[pred.len()], &[truth.len()]));
    }
    if truth.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of zero samples".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

fn check_scores<T: Scalar>(scores: &Tensor<T>, truth: &[usize]) -> Result<usize> {
    if scores.rank() != 2 || scores.batch() != truth.len() {
        return Err(Error::dim("score matrix", scores.shape(), &[truth.len()]));
    }
    let k = scores.shape()[1];
    if let Some(&bad) = truth.iter().find(|&&t| t >= k) {
        return Err(Error::Input(format!("label {bad} outside {k} score columns")));
    }
    let first = truth[0];
    if truth.iter().all(|&t| t == first) {
        return Err(Error::UndefinedMetric(format!(
            "every sample has class {first}; one-vs-rest scores need two classes"
        )));
    }
    Ok(k)
}

/// Classes in `0..k` with no sample in `truth`.
pub fn absent_classes(truth: &[usize], k: usize) -> Vec<usize> {
    let mut seen = vec![false; k];
    for &t in truth {
        if t < k {
            seen[t] = true;
        }
    }
    (0..k).filter(|&c| !seen[c]).collect()
}

fn column<T: Scalar>(scores: &Tensor<T>, class: usize) -> Vec<f64> {
    scores.samples().map(|row| row[class].as_f64()).collect()
}

/// Binary AUC by the rank-sum formula; tied scores share their mean rank.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share their mean
        let mean = (i + 1 + j) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = mean;
        }
        i = j;
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = n as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return None;
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    Some((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// Average precision of one ranking: descending score, ties by index.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

fn macro_average<T: Scalar>(
    scores: &Tensor<T>,
    truth: &[usize],
    per_class: impl Fn(&[f64], &[bool]) -> Option<f64>,
) -> Result<f64> {
    let k = check_scores(scores, truth)?;
    let mut total = 0.0;
    let mut counted = 0usize;
    for class in 0..k {
        let positive: Vec<bool> = truth.iter().map(|&t| t == class).collect();
        if let Some(v) = per_class(&column(scores, class), &positive) {
            total += v;
            counted += 1;
        }
    }
    Ok(total / counted as f64)
}

/// Macro average over present classes of the one-vs-rest AUC of each score
/// column.
pub fn auc_macro_ovr<T: Scalar>(scores: &Tensor<T>, truth: &[usize]) -> Result<f64> {
    macro_average(scores, truth, binary_auc)
}

/// Macro average over present classes of the per-class average precision.
pub fn mean_average_precision<T: Scalar>(scores: &Tensor<T>, truth: &[usize]) -> Result<f64> {
    macro_average(scores, truth, average_precision)
}

/// `10 log10(range² / MSE)`, `+inf` when the inputs are identical.
pub fn psnr<T: Scalar>(x: &Tensor<T>, reference: &Tensor<T>, data_range: f64) -> Result<f64> {
    if x.shape() != reference.shape() {
        return Err(Error::dim("psnr", x.shape(), reference.shape()));
    }
    if !(data_range > 0.0) {
        return Err(Error::Input(format!("data range must be positive, got {data_range}")));
    }
    let mse = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

/// Accuracy, AUC and mAP of a goodness-score matrix `[N, K]`.
pub fn evaluate_scores<T: Scalar>(pred: &[usize], scores: &Tensor<T>, truth: &[usize]) -> Result<EvalResult> {
    Ok(EvalResult {
        accuracy: accuracy(pred, truth)?,
        auc: auc_macro_ovr(scores, truth)?,
        map: mean_average_precision(scores, truth)?,
        psnr: None,
        n_samples: truth.len(),
        skipped_classes: absent_classes(truth, scores.shape()[1]),
    })
}
