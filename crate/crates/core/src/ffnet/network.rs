use serde::{Deserialize, Serialize};

use super::layer::{goodness, FFLayer, LayerOutput};
use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, Rng, Tensor, NORM_EPS};
use crate::scalar::Scalar;

/// The forwarded output of layer `source` is added to the input of layer
/// `target` (both 0-based) before that input is re-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualLink {
    pub source: usize,
    pub target: usize,
}

/// Ordered forward-forward layers with optional residual wiring.
#[derive(Debug, Clone, PartialEq)]
pub struct FFNetwork<T> {
    pub layers: Vec<FFLayer<T>>,
    pub frozen: Vec<bool>,
    /// Number of classes encoded into the inputs (0 when unused).
    pub label_slots: usize,
    residual_links: Vec<ResidualLink>,
    input_shape: Vec<usize>,
}

impl<T: Scalar> FFNetwork<T> {
    /// `input_shape` is the per-sample shape, e.g. `[784]` or `[1, 28, 28]`.
    pub fn new(
        input_shape: &[usize],
        layers: Vec<FFLayer<T>>,
        residual_links: Vec<ResidualLink>,
        label_slots: usize,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        let net = Self {
            frozen: vec![false; layers.len()],
            layers,
            label_slots,
            residual_links,
            input_shape: input_shape.to_vec(),
        };
        let shapes = net.output_shapes()?;
        for link in &net.residual_links {
            if link.source >= link.target || link.target >= net.layers.len() {
                return Err(Error::Config(format!(
                    "residual link {} -> {} must point forward inside {} layers",
                    link.source,
                    link.target,
                    net.layers.len()
                )));
            }
            if shapes[link.source] != shapes[link.target - 1] {
                return Err(Error::Config(format!(
                    "residual link {} -> {}: shapes {:?} and {:?} differ",
                    link.source,
                    link.target,
                    shapes[link.source],
                    shapes[link.target - 1]
                )));
            }
        }
        let per_sample: usize = net.input_shape.iter().product();
        if label_slots > per_sample {
            return Err(Error::Config(format!(
                "{label_slots} label slots exceed {per_sample} input values"
            )));
        }
        Ok(net)
    }

    /// Dense network on flattened inputs with the given hidden widths.
    pub fn dense(input_len: usize, widths: &[usize], label_slots: usize, rng: &mut Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input_len;
        for &w in widths {
            layers.push(FFLayer::dense(fan_in, w, rng));
            fan_in = w;
        }
        Self::new(&[input_len], layers, Vec::new(), label_slots)
    }

    /// Conv network; `strides` has one entry per layer, padding is `kernel/2`.
    pub fn convolutional(
        input_shape: &[usize],
        channels: &[usize],
        kernel: usize,
        strides: &[usize],
        residual_links: Vec<ResidualLink>,
        label_slots: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if input_shape.len() != 3 {
            return Err(Error::Config(format!(
                "conv input must be [C, H, W], got {input_shape:?}"
            )));
        }
        if strides.len() != channels.len() {
            return Err(Error::Config(format!(
                "{} strides for {} conv layers",
                strides.len(),
                channels.len()
            )));
        }
        let mut layers = Vec::with_capacity(channels.len());
        let mut cin = input_shape[0];
        for (&c, &s) in channels.iter().zip(strides) {
            layers.push(FFLayer::conv(cin, c, kernel, s, kernel / 2, rng)?);
            cin = c;
        }
        Self::new(input_shape, layers, residual_links, label_slots)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn residual_links(&self) -> &[ResidualLink] {
        &self.residual_links
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Per-sample output shape of every layer.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut current = self.input_shape.clone();
        for layer in &self.layers {
            current = layer.output_shape(&current)?;
            shapes.push(current.clone());
        }
        Ok(shapes)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape()[1..] != self.input_shape[..]
            && x.sample_len() != self.input_shape.iter().product::<usize>()
        {
            return Err(Error::dim("network input", &x.shape()[1..], &self.input_shape));
        }
        Ok(())
    }

    /// Input of layer `index` given the network input and the outputs of all
    /// earlier layers.
    pub fn layer_input(&self, index: usize, x: &Tensor<T>, earlier: &[LayerOutput<T>]) -> Result<Tensor<T>> {
        if index == 0 {
            return self.shaped_input(x);
        }
        self.combine_input(index, &earlier[index - 1].forwarded, |s| {
            earlier.get(s).map(|o| &o.forwarded)
        })
    }

    /// Input of layer `index >= 1` from the previous layer's forwarded output
    /// and, through `forwarded`, any residual sources feeding `index`.
    pub fn combine_input<'a>(
        &self,
        index: usize,
        prev: &Tensor<T>,
        forwarded: impl Fn(usize) -> Option<&'a Tensor<T>>,
    ) -> Result<Tensor<T>>
    where
        T: 'a,
    {
        let mut sources = self.residual_sources(index).peekable();
        if sources.peek().is_none() {
            return Ok(prev.clone());
        }
        let mut sum = prev.clone();
        for s in sources {
            let src = forwarded(s).ok_or_else(|| {
                Error::Contract(format!("residual source {s} of layer {index} not available"))
            })?;
            sum = sum.zip_map(src, |a, b| a + b)?;
        }
        Ok(l2_normalize(&sum, T::of(NORM_EPS)))
    }

    /// Layers whose forwarded output is added into the input of `target`.
    pub fn residual_sources(&self, target: usize) -> impl Iterator<Item = usize> + '_ {
        self.residual_links
            .iter()
            .filter(move |l| l.target == target)
            .map(|l| l.source)
    }

    /// Input of layer 0: `x` reshaped to the network's per-sample shape.
    pub fn shaped_input(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut shape = vec![x.batch()];
        shape.extend_from_slice(&self.input_shape);
        x.clone().reshape(&shape)
    }

    /// Runs the first `depth` layers.
    pub fn forward_prefix(&self, x: &Tensor<T>, depth: usize) -> Result<Vec<LayerOutput<T>>> {
        let mut outputs: Vec<LayerOutput<T>> = Vec::with_capacity(depth);
        for i in 0..depth.min(self.layers.len()) {
            let input = self.layer_input(i, x, &outputs)?;
            outputs.push(self.layers[i].forward(&input)?);
        }
        Ok(outputs)
    }

    /// Per-layer `(pre_norm, forwarded)` for the whole network.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Vec<LayerOutput<T>>> {
        self.forward_prefix(x, self.layers.len())
    }

    /// Per-sample goodness summed over layers `1..depth` (layer 0 excluded).
    pub fn goodness_score(&self, x: &Tensor<T>, depth: usize) -> Result<Vec<T>> {
        if depth < 2 {
            return Err(Error::Config(
                "goodness inference needs at least two layers".into(),
            ));
        }
        let outputs = self.forward_prefix(x, depth)?;
        let mut total = vec![T::zero(); x.batch()];
        for (layer, out) in self.layers[1..depth].iter().zip(&outputs[1..]) {
            for (t, g) in total.iter_mut().zip(goodness(&out.pre_norm, layer.theta)) {
                *t += g;
            }
        }
        Ok(total)
    }

    /// Trainable scalars over all layers.
    pub fn count_parameters(&self) -> usize {
        self.layers.iter().map(FFLayer::param_count).sum()
    }

    /// Drops every layer at or beyond `depth`, along with links into them.
    pub fn truncate(&mut self, depth: usize) {
        let depth = depth.clamp(1, self.layers.len());
        self.layers.truncate(depth);
        self.frozen.truncate(depth);
        self.residual_links.retain(|l| l.target < depth);
    }

    pub fn freeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = true);
    }

    pub fn all_frozen(&self) -> bool {
        self.frozen.iter().all(|&f| f)
    }

    /// Weight fraction masked over all layers.
    pub fn masked_fraction(&self) -> f64 {
        let total: usize = self.layers.iter().map(|l| l.mask.len()).sum();
        let masked: f64 = self
            .layers
            .iter()
            .map(|l| l.masked_fraction() * l.mask.len() as f64)
            .sum();
        masked / total as f64
    }
}
