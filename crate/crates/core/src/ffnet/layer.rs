use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState, Step};
use crate::error::{Error, Result};
use crate::numerics::{self, conv2d, conv2d_param_grads, l2_normalize, matmul, matmul_tn, ConvGeometry, Rng, Tensor};
use crate::scalar::Scalar;
use crate::training::loss::{self, PeerNorm};

/// Default threshold and learning rate per layer kind.
pub const DENSE_THETA: f64 = 2.0;
pub const CONV_THETA: f64 = 10.0;
pub const DENSE_LR: f64 = 0.03;
pub const CONV_LR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense,
    Conv { stride: usize, padding: usize },
}

/// Result of one layer pass: `pre_norm` carries the length used for goodness,
/// `forwarded` is its unit-norm orientation handed to the next layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput<T> {
    pub pre_norm: Tensor<T>,
    pub forwarded: Tensor<T>,
}

/// Gradient of a per-layer objective with respect to the layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub theta: T,
    pub loss: T,
}

/// One trainable forward-forward layer.
///
/// Dense weights are `[inputs, outputs]`, conv weights `[Cout, Cin, K, K]`.
/// `mask` has the weights' shape and holds 0/1; masked weights are kept at
/// exactly zero by every update.
#[derive(Debug, Clone, PartialEq)]
pub struct FFLayer<T> {
    pub kind: LayerKind,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub theta: T,
    pub theta_trainable: bool,
    pub mask: Tensor<T>,
    pub adam: AdamConfig,
    pub opt: AdamState<T>,
}

impl<T: Scalar> FFLayer<T> {
    /// Dense layer with weights uniform in `±sqrt(1/inputs)` and zero bias.
    pub fn dense(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = (1.0 / inputs as f64).sqrt();
        let w = (0..inputs * outputs)
            .map(|_| T::of(rng.uniform_in(-bound, bound)))
            .collect();
        let weights = Tensor::new(&[inputs, outputs], w).expect("dense shape");
        Self::assemble(LayerKind::Dense, weights, outputs, DENSE_THETA, DENSE_LR)
    }

    /// Square-kernel conv layer with weights uniform in `±sqrt(1/(Cin·K·K))`.
    pub fn conv(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {kernel}")));
        }
        let fan_in = in_channels * kernel * kernel;
        let bound = (1.0 / fan_in as f64).sqrt();
        let w = (0..out_channels * fan_in)
            .map(|_| T::of(rng.uniform_in(-bound, bound)))
            .collect();
        let weights = Tensor::new(&[out_channels, in_channels, kernel, kernel], w)?;
        Ok(Self::assemble(
            LayerKind::Conv { stride, padding },
            weights,
            out_channels,
            CONV_THETA,
            CONV_LR,
        ))
    }

    fn assemble(kind: LayerKind, weights: Tensor<T>, units: usize, theta: f64, lr: f64) -> Self {
        let mask = Tensor::filled(weights.shape(), T::one());
        let opt = AdamState::new(weights.len(), units);
        Self {
            kind,
            bias: Tensor::zeros(&[units]),
            weights,
            theta: T::of(theta),
            theta_trainable: true,
            mask,
            adam: AdamConfig::with_lr(lr),
            opt,
        }
    }

    pub fn with_theta(mut self, theta: f64, trainable: bool) -> Self {
        self.theta = T::of(theta);
        self.theta_trainable = trainable;
        self
    }

    pub fn with_adam(mut self, adam: AdamConfig) -> Self {
        self.adam = adam;
        self
    }

    /// Rebuilds a layer from stored parts, checking every invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        kind: LayerKind,
        weights: Tensor<T>,
        bias: Tensor<T>,
        theta: T,
        theta_trainable: bool,
        mask: Tensor<T>,
        adam: AdamConfig,
        opt: AdamState<T>,
    ) -> Result<Self> {
        let expected_rank = match kind {
            LayerKind::Dense => 2,
            LayerKind::Conv { .. } => 4,
        };
        if weights.rank() != expected_rank {
            return Err(Error::Consistency(format!(
                "{kind:?} layer with weight shape {:?}",
                weights.shape()
            )));
        }
        let layer = Self {
            kind,
            weights,
            bias,
            theta,
            theta_trainable,
            mask,
            adam,
            opt,
        };
        let units = layer.units();
        if layer.bias.len() != units
            || layer.mask.shape() != layer.weights.shape()
            || layer.opt.m_weights.len() != layer.weights.len()
            || layer.opt.v_weights.len() != layer.weights.len()
            || layer.opt.m_bias.len() != units
            || layer.opt.v_bias.len() != units
        {
            return Err(Error::Consistency("layer part shapes disagree".into()));
        }
        if !layer.theta.is_finite() {
            return Err(Error::Consistency("non-finite threshold".into()));
        }
        if layer
            .mask
            .data()
            .iter()
            .any(|&m| m != T::zero() && m != T::one())
        {
            return Err(Error::Consistency("mask entries must be 0 or 1".into()));
        }
        Ok(layer)
    }

    /// Output features (dense) or channels (conv).
    pub fn units(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.weights.shape()[1],
            LayerKind::Conv { .. } => self.weights.shape()[0],
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self.kind {
            LayerKind::Dense => {
                let n: usize = input.iter().product();
                if n != self.weights.shape()[0] {
                    return Err(Error::dim("dense layer input", input, &self.weights.shape()[..1]));
                }
                Ok(vec![self.units()])
            }
            LayerKind::Conv { stride, padding } => {
                let g = self.geometry(input, stride, padding)?;
                Ok(vec![self.units(), g.out_height, g.out_width])
            }
        }
    }

    fn geometry(&self, input: &[usize], stride: usize, padding: usize) -> Result<ConvGeometry> {
        let ws = self.weights.shape();
        if input.len() != 3 || input[0] != ws[1] {
            return Err(Error::dim("conv layer input", input, ws));
        }
        ConvGeometry::new(input[0], input[1], input[2], ws[2], stride, padding)
    }

    /// Affine map (or convolution) before the activation.
    pub fn pre_activation(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self.kind {
            LayerKind::Dense => {
                let inputs = self.weights.shape()[0];
                if x.sample_len() != inputs {
                    return Err(Error::dim("dense layer input", x.shape(), self.weights.shape()));
                }
                let flat = x.clone().reshape(&[x.batch(), inputs])?;
                let mut z = matmul(&flat, &self.weights)?;
                let b = self.bias.data();
                let n = b.len();
                for row in z.data_mut().chunks_exact_mut(n) {
                    for (v, &bb) in row.iter_mut().zip(b) {
                        *v += bb;
                    }
                }
                Ok(z)
            }
            LayerKind::Conv { stride, padding } => {
                if x.rank() != 4 {
                    return Err(Error::dim("conv layer input", x.shape(), self.weights.shape()));
                }
                conv2d(x, &self.weights, &self.bias, stride, padding)
            }
        }
    }

    /// `pre_norm = relu(affine(x))`, `forwarded = l2_normalize(pre_norm)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<LayerOutput<T>> {
        let pre_norm = numerics::relu(&self.pre_activation(x)?);
        let forwarded = l2_normalize(&pre_norm, T::of(numerics::NORM_EPS));
        Ok(LayerOutput {
            pre_norm,
            forwarded,
        })
    }

    /// Parameter gradients for an upstream gradient `dz` at the
    /// pre-activation. Masked positions receive zero.
    pub fn param_grads(&self, x: &Tensor<T>, dz: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (mut dw, db) = match self.kind {
            LayerKind::Dense => {
                let inputs = self.weights.shape()[0];
                let flat = x.clone().reshape(&[x.batch(), inputs])?;
                let dw = matmul_tn(&flat, dz)?;
                let units = self.units();
                let mut db = vec![T::zero(); units];
                for row in dz.data().chunks_exact(units) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                (dw, Tensor::new(&[units], db)?)
            }
            LayerKind::Conv { stride, padding } => {
                conv2d_param_grads(x, dz, self.weights.shape(), stride, padding)?
            }
        };
        for (g, &m) in dw.data_mut().iter_mut().zip(self.mask.data()) {
            *g *= m;
        }
        Ok((dw, db))
    }

    /// Analytic gradient of the per-layer contrastive objective (plus the
    /// optional peer-normalization term) on a positive and a negative batch.
    ///
    /// Returns the gradient and, when `peer` is given, the updated running
    /// mean activity per unit.
    pub fn local_gradient(
        &self,
        x_pos: &Tensor<T>,
        x_neg: &Tensor<T>,
        peer: Option<PeerNorm<'_, T>>,
    ) -> Result<(LayerGrad<T>, Option<Vec<T>>)> {
        if x_pos.shape() != x_neg.shape() {
            return Err(Error::dim("local_gradient", x_pos.shape(), x_neg.shape()));
        }
        let b = x_pos.batch();
        let x = Tensor::concat_batch(&[x_pos, x_neg])?;
        let y = numerics::relu(&self.pre_activation(&x)?);
        let per = y.sample_len();
        let s: Vec<T> = y
            .samples()
            .map(|row| row.iter().map(|&v| v * v).sum())
            .collect();
        let g_pos: Vec<T> = s[..b].iter().map(|&v| v - self.theta).collect();
        let g_neg: Vec<T> = s[b..].iter().map(|&v| v - self.theta).collect();
        let (mut loss_value, d_pos, d_neg) = loss::contrastive_loss_grad(&g_pos, &g_neg);

        // dL/dy = dL/dS · 2y, zero where relu is inactive
        let mut dz = y.clone();
        for (i, row) in dz.data_mut().chunks_exact_mut(per).enumerate() {
            let ds = if i < b { d_pos[i] } else { d_neg[i - b] };
            let scale = ds + ds;
            for v in row {
                *v *= scale;
            }
        }

        let mut running = None;
        if let Some(peer) = peer {
            let (pos_y, _) = y.split_batch(b);
            let (pl, dy_peer, rm) = loss::peer_norm_grad(&pos_y, peer)?;
            loss_value += peer.weight * pl;
            for (d, &g) in dz.data_mut()[..b * per].iter_mut().zip(dy_peer.data()) {
                *d += peer.weight * g;
            }
            running = Some(rm);
        }
        for (d, &v) in dz.data_mut().iter_mut().zip(y.data()) {
            if v <= T::zero() {
                *d = T::zero();
            }
        }

        let (weights, bias) = self.param_grads(&x, &dz)?;
        let theta = if self.theta_trainable {
            // dS/dθ = -1 for every sample
            -(d_pos.iter().copied().sum::<T>() + d_neg.iter().copied().sum::<T>())
        } else {
            T::zero()
        };
        Ok((
            LayerGrad {
                weights,
                bias,
                theta,
                loss: loss_value,
            },
            running,
        ))
    }

    /// One Adam step. Masked weights stay exactly zero and a fixed threshold
    /// is left untouched.
    pub fn apply_gradient(&mut self, grad: &LayerGrad<T>) -> Result<()> {
        if grad.weights.shape() != self.weights.shape() || grad.bias.shape() != self.bias.shape() {
            return Err(Error::dim("apply_gradient", grad.weights.shape(), self.weights.shape()));
        }
        self.opt.step += 1;
        let step = Step::new(&self.adam, self.opt.step);
        let opt = &mut self.opt;
        for i in 0..self.weights.len() {
            if self.mask.data()[i] == T::zero() {
                self.weights.data_mut()[i] = T::zero();
                continue;
            }
            step.apply(
                &mut self.weights.data_mut()[i],
                &mut opt.m_weights[i],
                &mut opt.v_weights[i],
                grad.weights.data()[i],
            );
        }
        for i in 0..self.bias.len() {
            step.apply(
                &mut self.bias.data_mut()[i],
                &mut opt.m_bias[i],
                &mut opt.v_bias[i],
                grad.bias.data()[i],
            );
        }
        if self.theta_trainable {
            step.apply(&mut self.theta, &mut opt.m_theta, &mut opt.v_theta, grad.theta);
        }
        Ok(())
    }

    /// Trainable scalars: unmasked weights, biases and a trainable threshold.
    pub fn param_count(&self) -> usize {
        let live = self.mask.data().iter().filter(|&&m| m != T::zero()).count();
        live + self.bias.len() + usize::from(self.theta_trainable)
    }

    /// Fraction of weights currently masked.
    pub fn masked_fraction(&self) -> f64 {
        let masked = self.mask.data().iter().filter(|&&m| m == T::zero()).count();
        masked as f64 / self.mask.len() as f64
    }
}

/// Per-sample goodness: sum of squared activities minus the threshold.
pub fn goodness<T: Scalar>(pre_norm: &Tensor<T>, theta: T) -> Vec<T> {
    pre_norm
        .samples()
        .map(|row| row.iter().map(|&v| v * v).sum::<T>() - theta)
        .collect()
}

/// Logistic probability that an input is positive data.
pub fn probability_real<T: Scalar>(g: &[T]) -> Vec<T> {
    g.iter().map(|&v| loss::sigmoid(v)).collect()
}
