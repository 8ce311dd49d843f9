//! Datasets: IDX and SFD1 readers, z-score normalization, seeded splits and
//! a synthetic blob corpus.

mod idx;
mod sfd;

pub use idx::{load_idx, read_idx, write_idx, IdxArray, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use sfd::{read_sfd, write_sfd, SFD_HEADER_LEN, SFD_MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;

/// Pixel statistics of the training split a dataset was normalized with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

/// Images `[N, C, H, W]` with optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T = f64> {
    pub name: String,
    pub images: Tensor<T>,
    pub labels: Option<Vec<usize>>,
    pub normalization: Option<Normalization>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(name: impl Into<String>, images: Tensor<T>, labels: Option<Vec<usize>>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Input(format!(
                "dataset images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != images.batch() {
                return Err(Error::Consistency(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.batch()
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// One more than the largest label (0 without labels).
    pub fn n_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |&m| m + 1)
    }

    pub fn labels_or_err(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Input(format!("dataset '{}' has no labels", self.name)))
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Config(format!("empty subset of '{}'", self.name)));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Input(format!("index {bad} outside {} samples", self.len())));
        }
        Ok(Self {
            name: self.name.clone(),
            images: self.images.gather(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            normalization: self.normalization,
        })
    }

    /// The first `n` samples (all of them when `n` exceeds the length).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn max_value(&self) -> f64 {
        self.images
            .data()
            .iter()
            .fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()))
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            name: self.name.clone(),
            images: self.images.cast(),
            labels: self.labels.clone(),
            normalization: self.normalization,
        }
    }
}

/// Fits mean and (population) standard deviation over every pixel of
/// `train` and applies `(x - mean) / std` to `train` and every other split.
pub fn zscore_fit_apply<T: Scalar>(
    train: &mut Dataset<T>,
    others: &mut [&mut Dataset<T>],
) -> Result<Normalization> {
    let data = train.images.data();
    let n = data.len() as f64;
    let mean = data.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = data
        .iter()
        .map(|v| {
            let d = v.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::Degenerate(format!(
            "pixel standard deviation of '{}' is {std}",
            train.name
        )));
    }
    let norm = Normalization { mean, std };
    for ds in std::iter::once(train).chain(others.iter_mut().map(|d| &mut **d)) {
        ds.images
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = T::of(norm.apply(v.as_f64())));
        ds.normalization = Some(norm);
    }
    Ok(norm)
}

fn cut_points(n: usize, fractions: &[f64]) -> Vec<usize> {
    let mut cum = 0.0;
    let mut cuts = Vec::with_capacity(fractions.len() + 1);
    cuts.push(0);
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        let c = if i + 1 == fractions.len() {
            n
        } else {
            ((cum * n as f64).round() as usize).min(n)
        };
        cuts.push(c);
    }
    cuts
}

/// Index sets of a seeded split. Stratification splits every class
/// separately so per-class proportions hold to within one sample.
pub fn split_indices(
    n: usize,
    labels: Option<&[usize]>,
    fractions: &[f64],
    seed: u64,
    stratified: bool,
) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
        return Err(Error::Config(format!("invalid split fractions {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {total}, not 1")));
    }
    let mut rng = Rng::new(seed);
    let mut parts = vec![Vec::new(); fractions.len()];
    match labels.filter(|_| stratified) {
        Some(labels) => {
            if labels.len() != n {
                return Err(Error::Consistency(format!("{} labels for {n} samples", labels.len())));
            }
            let classes = labels.iter().max().map_or(0, |&m| m + 1);
            let mut members = vec![Vec::new(); classes];
            for (i, &l) in labels.iter().enumerate() {
                members[l].push(i);
            }
            // interleave classes by relative position within their shuffled
            // member list, then cut the joint order once: every contiguous
            // range holds each class in proportion, to within one sample
            let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
            for (class, mut m) in members.into_iter().enumerate() {
                rng.shuffle(&mut m);
                let len = m.len() as f64;
                keyed.extend(m.into_iter().enumerate().map(|(j, i)| ((j as f64 + 0.5) / len, class, i)));
            }
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let cuts = cut_points(n, fractions);
            for (p, w) in parts.iter_mut().zip(cuts.windows(2)) {
                p.extend(keyed[w[0]..w[1]].iter().map(|k| k.2));
            }
            for p in &mut parts {
                rng.shuffle(p);
            }
        }
        None => {
            let perm = rng.permutation(n);
            let cuts = cut_points(n, fractions);
            for (p, w) in parts.iter_mut().zip(cuts.windows(2)) {
                p.extend_from_slice(&perm[w[0]..w[1]]);
            }
        }
    }
    if let Some(k) = parts.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!(
            "split {k} (fraction {}) of {n} samples is empty",
            fractions[k]
        )));
    }
    Ok(parts)
}

/// Splits a dataset into disjoint parts covering every sample.
pub fn split<T: Scalar>(
    ds: &Dataset<T>,
    fractions: &[f64],
    seed: u64,
    stratified: bool,
) -> Result<Vec<Dataset<T>>> {
    split_indices(ds.len(), ds.labels.as_deref(), fractions, seed, stratified)?
        .iter()
        .map(|idx| ds.subset(idx))
        .collect()
}

/// `n` single-channel `size × size` images, each with a bright Gaussian blob
/// centred in the quadrant of its class (0 top-left, 1 top-right,
/// 2 bottom-left, 3 bottom-right) plus Gaussian pixel noise of std `noise`.
pub fn synthetic(n: usize, classes: usize, size: usize, noise: f64, seed: u64) -> Result<Dataset<f64>> {
    if classes == 0 || classes > 4 {
        return Err(Error::Config(format!("synthetic data supports 1..=4 classes, got {classes}")));
    }
    if n == 0 || size < 2 {
        return Err(Error::Config(format!("synthetic data needs n >= 1 and size >= 2, got {n}, {size}")));
    }
    let mut rng = Rng::new(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);
    let s = size as f64;
    let sigma = s / 8.0;
    let mut data = Vec::with_capacity(n * size * size);
    for &label in &labels {
        let cy = if label >= 2 { 0.75 * s } else { 0.25 * s } - 0.5;
        let cx = if label % 2 == 1 { 0.75 * s } else { 0.25 * s } - 0.5;
        for y in 0..size {
            for x in 0..size {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let blob = (-d2 / (2.0 * sigma * sigma)).exp();
                data.push(blob + noise * rng.normal());
            }
        }
    }
    let images = Tensor::new(&[n, 1, size, size], data)?;
    Dataset::new("synthetic", images, Some(labels))
}
