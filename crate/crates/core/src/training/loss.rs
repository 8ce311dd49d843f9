//! Per-layer objectives and their closed-form gradients.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Mean softplus over the signed goodness matrix `(-g⁺ ‖ g⁻)`:
/// `L = (1/2B) Σᵢ [softplus(-g⁺ᵢ) + softplus(g⁻ᵢ)]`.
pub fn contrastive_loss<T: Scalar>(g_pos: &[T], g_neg: &[T]) -> T {
    contrastive_loss_grad(g_pos, g_neg).0
}

/// Loss plus its derivatives with respect to each `g⁺ᵢ` and `g⁻ᵢ`.
pub fn contrastive_loss_grad<T: Scalar>(g_pos: &[T], g_neg: &[T]) -> (T, Vec<T>, Vec<T>) {
    assert_eq!(g_pos.len(), g_neg.len(), "positive/negative batch sizes differ");
    let denom = T::of(2.0 * g_pos.len() as f64);
    let mut total = T::zero();
    for (&p, &n) in g_pos.iter().zip(g_neg) {
        total += softplus(-p) + softplus(n);
    }
    let d_pos = g_pos.iter().map(|&p| -sigmoid(-p) / denom).collect();
    let d_neg = g_neg.iter().map(|&n| sigmoid(n) / denom).collect();
    (total / denom, d_pos, d_neg)
}

/// Running-mean state for the peer-normalization term.
#[derive(Debug, Clone, Copy)]
pub struct PeerNorm<'a, T> {
    pub running_mean: &'a [T],
    pub momentum: T,
    pub weight: T,
}

fn unit_layout<T: Scalar>(x: &Tensor<T>) -> (usize, usize) {
    let units = if x.rank() >= 2 { x.shape()[1] } else { 1 };
    (units, x.sample_len() / units)
}

fn batch_mean_activity<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let (units, spatial) = unit_layout(x);
    let mut mean = vec![T::zero(); units];
    for s in x.samples() {
        for (u, chunk) in s.chunks_exact(spatial).enumerate() {
            mean[u] += chunk.iter().copied().sum::<T>();
        }
    }
    let count = T::of((x.batch() * spatial) as f64);
    mean.iter_mut().for_each(|m| *m /= count);
    mean
}

/// Updates the running mean activity per unit (features for dense, channels
/// for conv) and returns `mean_u (rm_u - mean(rm))²` with the new mean.
pub fn peer_norm_loss<T: Scalar>(
    pre_norm: &Tensor<T>,
    running_mean: &[T],
    momentum: T,
) -> Result<(T, Vec<T>)> {
    let (units, _) = unit_layout(pre_norm);
    if running_mean.len() != units {
        return Err(Error::dim("peer_norm_loss", pre_norm.shape(), &[running_mean.len()]));
    }
    let bm = batch_mean_activity(pre_norm);
    let rm: Vec<T> = running_mean
        .iter()
        .zip(&bm)
        .map(|(&r, &m)| momentum * r + (T::one() - momentum) * m)
        .collect();
    let u = T::of(units as f64);
    let centre = rm.iter().copied().sum::<T>() / u;
    let loss = rm.iter().map(|&r| (r - centre) * (r - centre)).sum::<T>() / u;
    Ok((loss, rm))
}

/// Peer loss, its gradient with respect to every activation of `pre_norm`,
/// and the updated running mean.
pub fn peer_norm_grad<T: Scalar>(
    pre_norm: &Tensor<T>,
    peer: PeerNorm<'_, T>,
) -> Result<(T, Tensor<T>, Vec<T>)> {
    let (loss, rm) = peer_norm_loss(pre_norm, peer.running_mean, peer.momentum)?;
    let (units, spatial) = unit_layout(pre_norm);
    let u = T::of(units as f64);
    let centre = rm.iter().copied().sum::<T>() / u;
    let per_activation =
        (T::one() - peer.momentum) / T::of((pre_norm.batch() * spatial) as f64);
    let coef: Vec<T> = rm
        .iter()
        .map(|&r| T::of(2.0) * (r - centre) / u * per_activation)
        .collect();
    let mut grad = Tensor::zeros(pre_norm.shape());
    let n = pre_norm.sample_len();
    for s in grad.data_mut().chunks_exact_mut(n) {
        for (uu, chunk) in s.chunks_exact_mut(spatial).enumerate() {
            chunk.fill(coef[uu]);
        }
    }
    Ok((loss, grad, rm))
}

fn row_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt()
}

/// `mean_i max(0, ‖aᵢ - pᵢ‖ - ‖aᵢ - nᵢ‖ + margin)`.
pub fn triplet_margin_loss<T: Scalar>(
    a: &Tensor<T>,
    p: &Tensor<T>,
    n: &Tensor<T>,
    margin: T,
) -> Result<T> {
    Ok(triplet_margin_grad(a, p, n, margin)?.0)
}

/// Triplet loss with gradients for anchor, positive and negative. The
/// distance derivative at a zero difference is taken as zero.
pub fn triplet_margin_grad<T: Scalar>(
    a: &Tensor<T>,
    p: &Tensor<T>,
    n: &Tensor<T>,
    margin: T,
) -> Result<(T, Tensor<T>, Tensor<T>, Tensor<T>)> {
    if a.shape() != p.shape() || a.shape() != n.shape() {
        return Err(Error::dim("triplet_margin_loss", a.shape(), p.shape()));
    }
    let batch = T::of(a.batch() as f64);
    let mut da = Tensor::zeros(a.shape());
    let mut dp = Tensor::zeros(a.shape());
    let mut dn = Tensor::zeros(a.shape());
    let mut total = T::zero();
    for i in 0..a.batch() {
        let (ai, pi, ni) = (a.sample(i), p.sample(i), n.sample(i));
        let d_ap = row_distance(ai, pi);
        let d_an = row_distance(ai, ni);
        let hinge = d_ap - d_an + margin;
        if hinge <= T::zero() {
            continue;
        }
        total += hinge;
        for j in 0..ai.len() {
            let mut ga = T::zero();
            if d_ap > T::zero() {
                let u = (ai[j] - pi[j]) / d_ap / batch;
                ga += u;
                dp.sample_mut(i)[j] = -u;
            }
            if d_an > T::zero() {
                let v = (ai[j] - ni[j]) / d_an / batch;
                ga -= v;
                dn.sample_mut(i)[j] = v;
            }
            da.sample_mut(i)[j] = ga;
        }
    }
    Ok((total / batch, da, dp, dn))
}
