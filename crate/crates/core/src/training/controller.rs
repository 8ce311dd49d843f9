//! Self-adaptation decisions: early stopping on iterations, layers and
//! epochs, and magnitude pruning.

use crate::error::{Error, Result};
use crate::ffnet::{FFLayer, FFNetwork};
use crate::scalar::Scalar;

/// Early-stopping rule on a history of monitored losses (one entry per
/// check): stop once the best of the last `patience` checks improves on the
/// best before them by less than `min_delta`. Needs `patience + 1` checks.
pub fn es_check_history(checks: &[f64], patience: usize, min_delta: f64) -> bool {
    if checks.len() <= patience {
        return false;
    }
    let split = checks.len() - patience;
    let before = checks[..split].iter().copied().fold(f64::INFINITY, f64::min);
    let recent = checks[split..].iter().copied().fold(f64::INFINITY, f64::min);
    before - recent < min_delta
}

/// Iteration-level early stopping on a per-iteration loss trace: checks are
/// taken at iterations `0, check_every, 2·check_every, …` present in the
/// trace and judged by [`es_check_history`].
pub fn es_iterations_check(trace: &[f64], patience: usize, min_delta: f64, check_every: usize) -> bool {
    let checks: Vec<f64> = trace.iter().copied().step_by(check_every.max(1)).collect();
    es_check_history(&checks, patience, min_delta)
}

/// Smallest depth `d` (1-based) such that no deeper prefix improves on the
/// score at depth `d` by at least `min_delta`.
pub fn es_layers_check(val_scores: &[f64], min_delta: f64) -> usize {
    let n = val_scores.len();
    let mut best_deeper = f64::NEG_INFINITY;
    let mut keep = n;
    for d in (1..=n).rev() {
        if best_deeper - val_scores[d - 1] < min_delta {
            keep = d;
        }
        best_deeper = best_deeper.max(val_scores[d - 1]);
    }
    keep.max(1)
}

/// Masks the `round(ratio·|W|)` smallest-magnitude weights of a layer (ties
/// by flat index). Already masked weights count among the smallest, so a
/// smaller ratio than before changes nothing.
pub fn prune_layer<T: Scalar>(layer: &mut FFLayer<T>, ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("prune ratio must lie in [0, 1), got {ratio}")));
    }
    let n = layer.weights.len();
    let k = (ratio * n as f64).round() as usize;
    let w = layer.weights.data();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        w[a].abs()
            .partial_cmp(&w[b].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &i in &order[..k] {
        layer.mask.data_mut()[i] = T::zero();
        layer.weights.data_mut()[i] = T::zero();
        layer.opt.m_weights[i] = T::zero();
        layer.opt.v_weights[i] = T::zero();
    }
    Ok(())
}

/// Layer-local unstructured magnitude pruning of every layer.
pub fn prune<T: Scalar>(net: &FFNetwork<T>, ratio: f64) -> Result<FFNetwork<T>> {
    let mut pruned = net.clone();
    for layer in &mut pruned.layers {
        prune_layer(layer, ratio)?;
    }
    Ok(pruned)
}
