//! Contrastive encoder pretraining and single-layer downstream heads.

use serde::{Deserialize, Serialize};

use super::config::{BatchMode, TrainConfig};
use super::loss;
use super::trainer::{train_layerwise, NfeCounter, TrainData, TrainReport};
use crate::error::{Error, Result};
use crate::ffnet::{AdamConfig, AdamState, FFLayer, FFNetwork, LayerGrad, Step};
use crate::numerics::{self, matmul, matmul_tn, Rng, Tensor, NORM_EPS};
use crate::sampling::{embed_uniform, LabelEmbedder};
use crate::scalar::Scalar;

/// Gradient of the triplet margin loss on a layer's forwarded (normalized)
/// activations. The threshold receives no gradient.
pub fn triplet_layer_gradient<T: Scalar>(
    layer: &FFLayer<T>,
    anchor: &Tensor<T>,
    positive: &Tensor<T>,
    negative: &Tensor<T>,
    margin: T,
) -> Result<LayerGrad<T>> {
    let b = anchor.batch();
    let x = Tensor::concat_batch(&[anchor, positive, negative])?;
    let y = numerics::relu(&layer.pre_activation(&x)?);
    let eps = T::of(NORM_EPS);
    let f = numerics::l2_normalize(&y, eps);
    let idx = |k: usize| (k * b..(k + 1) * b).collect::<Vec<_>>();
    let (value, da, dp, dn) =
        loss::triplet_margin_grad(&f.gather(&idx(0)), &f.gather(&idx(1)), &f.gather(&idx(2)), margin)?;
    let df = Tensor::concat_batch(&[&da, &dp, &dn])?;

    // f = y / (n + eps), n = ‖y‖  ⇒  dy = g/s − y (y·g) / (n s²), s = n + eps
    let norms = numerics::sample_norms(&y);
    let per = y.sample_len();
    let mut dz = df;
    for (i, row) in dz.data_mut().chunks_exact_mut(per).enumerate() {
        let yr = y.sample(i);
        let n = norms[i];
        let s = n + eps;
        let dot: T = yr.iter().zip(row.iter()).map(|(&a, &g)| a * g).sum();
        let radial = if n > T::zero() { dot / (n * s * s) } else { T::zero() };
        for (g, &yv) in row.iter_mut().zip(yr) {
            *g = if yv > T::zero() { *g / s - yv * radial } else { T::zero() };
        }
    }
    let (weights, bias) = layer.param_grads(&x, &dz)?;
    Ok(LayerGrad {
        weights,
        bias,
        theta: T::zero(),
        loss: value,
    })
}

/// Trains the encoder layer-wise with `cfg.objective` and freezes every
/// layer afterwards.
pub fn pretrain_encoder<T: Scalar>(
    net: &mut FFNetwork<T>,
    data: &TrainData<'_, T>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let report = train_layerwise(net, data, cfg)?;
    net.freeze_all();
    Ok(report)
}

/// Concatenated forwarded activations of layers 2..L (layer 1 alone for a
/// single-layer encoder). With an embedder and label slots, inputs carry the
/// neutral label code.
pub fn encoder_features<T: Scalar>(
    net: &FFNetwork<T>,
    x: &Tensor<T>,
    embedder: Option<&LabelEmbedder>,
) -> Result<Tensor<T>> {
    let input = match embedder {
        Some(emb) if net.label_slots > 0 => embed_uniform(x, emb)?,
        _ => x.clone(),
    };
    let outputs = net.forward(&input)?;
    let used = if outputs.len() >= 2 { &outputs[1..] } else { &outputs[..] };
    let width: usize = used.iter().map(|o| o.forwarded.sample_len()).sum();
    let mut data = Vec::with_capacity(x.batch() * width);
    for i in 0..x.batch() {
        for o in used {
            data.extend_from_slice(o.forwarded.sample(i));
        }
    }
    Tensor::new(&[x.batch(), width], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadTask {
    /// Softmax over classes with cross-entropy.
    Classification,
    /// Linear map back to the input with mean squared error.
    Reconstruction,
}

/// What a head is trained to produce.
#[derive(Debug, Clone, Copy)]
pub enum HeadTarget<'a, T> {
    Labels(&'a [usize]),
    Values(&'a Tensor<T>),
}

/// A single dense layer on top of frozen encoder features.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub task: HeadTask,
    /// `[features, outputs]`.
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub adam: AdamConfig,
    pub opt: AdamState<T>,
}

impl<T: Scalar> Head<T> {
    pub fn new(task: HeadTask, features: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = (1.0 / features as f64).sqrt();
        let w = (0..features * outputs)
            .map(|_| T::of(rng.uniform_in(-bound, bound)))
            .collect();
        Self {
            task,
            weights: Tensor::new(&[features, outputs], w).expect("head shape"),
            bias: Tensor::zeros(&[outputs]),
            adam: AdamConfig::with_lr(0.01),
            opt: AdamState::new(features * outputs, outputs),
        }
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Logits (classification) or reconstruction `[B, outputs]`.
    pub fn forward(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut z = matmul(features, &self.weights)?;
        let k = self.outputs();
        for row in z.data_mut().chunks_exact_mut(k) {
            for (v, &b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Ok(z)
    }

    /// Class with the largest logit, lowest index on ties.
    pub fn predict(&self, features: &Tensor<T>) -> Result<Vec<usize>> {
        let z = self.forward(features)?;
        Ok(z.samples().map(crate::ffnet::argmax).collect())
    }

    /// Mean loss and its gradient with respect to weights and bias.
    pub fn loss_grad(&self, features: &Tensor<T>, target: HeadTarget<'_, T>) -> Result<(T, Tensor<T>, Tensor<T>)> {
        let z = self.forward(features)?;
        let (b, k) = (z.batch(), self.outputs());
        let mut dz = z.clone();
        let mut total = T::zero();
        match (self.task, target) {
            (HeadTask::Classification, HeadTarget::Labels(labels)) => {
                if labels.len() != b {
                    return Err(Error::dim("head labels", &[labels.len()], &[b]));
                }
                let inv_b = T::one() / T::of(b as f64);
                for (row, &label) in dz.data_mut().chunks_exact_mut(k).zip(labels) {
                    if label >= k {
                        return Err(Error::Input(format!("label {label} outside {k} classes")));
                    }
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
                    total += sum.ln() + max - row[label];
                    for (j, v) in row.iter_mut().enumerate() {
                        let p = (*v - max).exp() / sum;
                        *v = (p - if j == label { T::one() } else { T::zero() }) * inv_b;
                    }
                }
                total *= inv_b;
            }
            (HeadTask::Reconstruction, HeadTarget::Values(t)) => {
                if t.batch() != b || t.sample_len() != k {
                    return Err(Error::dim("head target", t.shape(), z.shape()));
                }
                let scale = T::one() / T::of((b * k) as f64);
                for (d, &tv) in dz.data_mut().iter_mut().zip(t.data()) {
                    let diff = *d - tv;
                    total += diff * diff;
                    *d = T::of(2.0) * diff * scale;
                }
                total *= scale;
            }
            _ => {
                return Err(Error::Contract(format!(
                    "target kind does not match a {:?} head",
                    self.task
                )))
            }
        }
        let dw = matmul_tn(features, &dz)?;
        let mut db = vec![T::zero(); k];
        for row in dz.data().chunks_exact(k) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        Ok((total, dw, Tensor::new(&[k], db)?))
    }

    fn apply(&mut self, dw: &Tensor<T>, db: &Tensor<T>) {
        self.opt.step += 1;
        let step = Step::new(&self.adam, self.opt.step);
        for (i, p) in self.weights.data_mut().iter_mut().enumerate() {
            step.apply(p, &mut self.opt.m_weights[i], &mut self.opt.v_weights[i], dw.data()[i]);
        }
        for (i, p) in self.bias.data_mut().iter_mut().enumerate() {
            step.apply(p, &mut self.opt.m_bias[i], &mut self.opt.v_bias[i], db.data()[i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub iterations: usize,
    pub batch_mode: BatchMode,
    pub lr: f64,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_mode: BatchMode::FullBatch,
            lr: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub nfe: NfeCounter,
    pub losses: Vec<f64>,
}

/// Trains `head` on features of the frozen encoder `net` by the head's own
/// local gradient. The encoder is never modified.
pub fn train_head<T: Scalar>(
    net: &FFNetwork<T>,
    head: &mut Head<T>,
    x: &Tensor<T>,
    target: HeadTarget<'_, T>,
    embedder: Option<&LabelEmbedder>,
    cfg: &HeadConfig,
) -> Result<HeadReport> {
    if !net.all_frozen() {
        return Err(Error::Contract("head training needs a frozen encoder".into()));
    }
    if cfg.iterations == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("head training needs iterations >= 1 and lr > 0".into()));
    }
    let features = encoder_features(net, x, embedder)?;
    if features.shape()[1] != head.weights.shape()[0] {
        return Err(Error::dim("head features", features.shape(), head.weights.shape()));
    }
    head.adam.lr = cfg.lr;
    let mut rng = Rng::new(cfg.seed);
    let n = features.batch();
    let mut order = rng.permutation(n);
    let mut cursor = 0;
    let mut report = HeadReport {
        nfe: NfeCounter::default(),
        losses: Vec::with_capacity(cfg.iterations),
    };
    for _ in 0..cfg.iterations {
        let idx = match cfg.batch_mode {
            BatchMode::MiniBatch(size) if size < n => {
                if cursor + size > n {
                    rng.shuffle(&mut order);
                    cursor = 0;
                }
                cursor += size;
                Some(order[cursor - size..cursor].to_vec())
            }
            _ => None,
        };
        let (value, dw, db) = match &idx {
            Some(idx) => {
                let f = features.gather(idx);
                match target {
                    HeadTarget::Labels(l) => {
                        let l: Vec<usize> = idx.iter().map(|&i| l[i]).collect();
                        head.loss_grad(&f, HeadTarget::Labels(&l))?
                    }
                    HeadTarget::Values(t) => head.loss_grad(&f, HeadTarget::Values(&t.gather(idx)))?,
                }
            }
            None => head.loss_grad(&features, target)?,
        };
        report.nfe.record_update();
        report.losses.push(value.as_f64());
        head.apply(&dw, &db);
    }
    Ok(report)
}
