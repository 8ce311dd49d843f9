//! Forward-forward layers and networks: goodness, orientation forwarding,
//! closed-form local gradients and goodness-sum classification.

mod adam;
mod layer;
mod network;

pub use adam::{AdamConfig, AdamState};
pub use layer::{
    goodness, probability_real, FFLayer, LayerGrad, LayerKind, LayerOutput, CONV_LR, CONV_THETA,
    DENSE_LR, DENSE_THETA,
};
pub use network::{FFNetwork, ResidualLink};
pub(crate) use adam::Step;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::sampling::{embed_constant, LabelEmbedder};
use crate::scalar::Scalar;

/// Samples scored per forward batch during inference.
const INFERENCE_CHUNK: usize = 1000;

/// Predicted labels and the per-label goodness sums behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification<T> {
    pub predictions: Vec<usize>,
    /// `[B, n_labels]`.
    pub scores: Tensor<T>,
}

/// Embeds every candidate label, scores it by the goodness summed over all
/// layers except the first, and picks the best label (lowest index on ties).
pub fn classify_by_goodness<T: Scalar>(
    net: &FFNetwork<T>,
    x: &Tensor<T>,
    emb: &LabelEmbedder,
) -> Result<Classification<T>> {
    classify_with_depth(net, x, emb, net.len())
}

/// As [`classify_by_goodness`] using only the first `depth` layers.
pub fn classify_with_depth<T: Scalar>(
    net: &FFNetwork<T>,
    x: &Tensor<T>,
    emb: &LabelEmbedder,
    depth: usize,
) -> Result<Classification<T>> {
    let n = emb.n_classes;
    if net.label_slots > 0 && n > net.label_slots {
        return Err(Error::Config(format!(
            "{n} labels exceed the network's {} label slots",
            net.label_slots
        )));
    }
    emb.check_fits(x.sample_len())?;
    let batch = x.batch();
    let mut scores = vec![T::zero(); batch * n];
    for start in (0..batch).step_by(INFERENCE_CHUNK) {
        let idx: Vec<usize> = (start..(start + INFERENCE_CHUNK).min(batch)).collect();
        let chunk = x.gather(&idx);
        for label in 0..n {
            let candidate = embed_constant(&chunk, label, emb)?;
            let s = net.goodness_score(&candidate, depth)?;
            for (i, v) in s.into_iter().enumerate() {
                scores[(start + i) * n + label] = v;
            }
        }
    }
    let predictions = scores.chunks_exact(n).map(argmax).collect();
    Ok(Classification {
        predictions,
        scores: Tensor::new(&[batch, n], scores)?,
    })
}

/// Index of the largest value, first one on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
