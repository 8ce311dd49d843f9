//! Positive/negative sample synthesis by label encoding, and triplet batches
//! for contrastive pretraining.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::scalar::Scalar;

/// Writes a one-hot class code into fixed pixel slots of each sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEmbedder {
    pub n_classes: usize,
    /// Flat per-sample indices, one per class.
    pub slot_positions: Vec<usize>,
    /// Value written into the active slot.
    pub max_intensity: f64,
}

impl LabelEmbedder {
    /// Slots at the first `n_classes` pixels of each sample.
    pub fn new(n_classes: usize, max_intensity: f64) -> Self {
        Self {
            n_classes,
            slot_positions: (0..n_classes).collect(),
            max_intensity,
        }
    }

    pub fn with_slots(n_classes: usize, slots: Vec<usize>, max_intensity: f64) -> Result<Self> {
        let emb = Self {
            n_classes,
            slot_positions: slots,
            max_intensity,
        };
        if emb.slot_positions.len() != n_classes {
            return Err(Error::Config(format!(
                "{} slot positions for {n_classes} classes",
                emb.slot_positions.len()
            )));
        }
        let mut sorted = emb.slot_positions.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != n_classes {
            return Err(Error::Config("slot positions must be distinct".into()));
        }
        Ok(emb)
    }

    /// Checks that every slot lies inside a sample of `sample_len` values.
    pub fn check_fits(&self, sample_len: usize) -> Result<()> {
        match self.slot_positions.iter().find(|&&p| p >= sample_len) {
            Some(p) => Err(Error::Config(format!(
                "label slot {p} outside sample of {sample_len} values"
            ))),
            None => Ok(()),
        }
    }

    fn write<T: Scalar>(&self, sample: &mut [T], values: impl Fn(usize) -> f64) {
        for (class, &pos) in self.slot_positions.iter().enumerate() {
            sample[pos] = T::of(values(class));
        }
    }
}

/// Copy of `x` where each sample's slots encode its label: the label's slot
/// gets `max_intensity`, the other slots are zeroed.
pub fn embed_label<T: Scalar>(x: &Tensor<T>, labels: &[usize], emb: &LabelEmbedder) -> Result<Tensor<T>> {
    if labels.len() != x.batch() {
        return Err(Error::Input(format!(
            "{} labels for a batch of {}",
            labels.len(),
            x.batch()
        )));
    }
    emb.check_fits(x.sample_len())?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= emb.n_classes) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {} classes",
            emb.n_classes
        )));
    }
    let mut out = x.clone();
    for (i, &label) in labels.iter().enumerate() {
        emb.write(out.sample_mut(i), |c| if c == label { emb.max_intensity } else { 0.0 });
    }
    Ok(out)
}

/// Same label for every sample.
pub fn embed_constant<T: Scalar>(x: &Tensor<T>, label: usize, emb: &LabelEmbedder) -> Result<Tensor<T>> {
    embed_label(x, &vec![label; x.batch()], emb)
}

/// Neutral code: every slot set to `max_intensity / n`.
pub fn embed_uniform<T: Scalar>(x: &Tensor<T>, emb: &LabelEmbedder) -> Result<Tensor<T>> {
    emb.check_fits(x.sample_len())?;
    let level = emb.max_intensity / emb.n_classes as f64;
    let mut out = x.clone();
    for i in 0..x.batch() {
        emb.write(out.sample_mut(i), |_| level);
    }
    Ok(out)
}

/// Positive and negative batches of equal shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair<T> {
    pub x_pos: Tensor<T>,
    pub x_neg: Tensor<T>,
}

/// Anchor, positive and negative batches of equal shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet<T> {
    pub anchor: Tensor<T>,
    pub positive: Tensor<T>,
    pub negative: Tensor<T>,
}

/// Uniform draw from `0..n` excluding `skip`.
fn other_class(rng: &mut Rng, n: usize, skip: usize) -> usize {
    let r = rng.below(n - 1);
    if r >= skip {
        r + 1
    } else {
        r
    }
}

/// Positives carry the true label, negatives a uniformly drawn wrong one.
pub fn make_pairs_supervised<T: Scalar>(
    x: &Tensor<T>,
    labels: &[usize],
    emb: &LabelEmbedder,
    rng: &mut Rng,
) -> Result<SamplePair<T>> {
    if emb.n_classes < 2 {
        return Err(Error::Config("supervised negatives need at least 2 classes".into()));
    }
    let x_pos = embed_label(x, labels, emb)?;
    let wrong: Vec<usize> = labels
        .iter()
        .map(|&l| other_class(rng, emb.n_classes, l))
        .collect();
    let x_neg = embed_label(x, &wrong, emb)?;
    Ok(SamplePair { x_pos, x_neg })
}

/// Positives carry the neutral code, negatives a random one-hot code.
pub fn make_pairs_unsupervised<T: Scalar>(
    x: &Tensor<T>,
    emb: &LabelEmbedder,
    rng: &mut Rng,
) -> Result<SamplePair<T>> {
    let x_pos = embed_uniform(x, emb)?;
    let random: Vec<usize> = (0..x.batch()).map(|_| rng.below(emb.n_classes)).collect();
    let x_neg = embed_label(x, &random, emb)?;
    Ok(SamplePair { x_pos, x_neg })
}

/// Per anchor: a positive from the same class (another index) and a negative
/// from a uniformly chosen other class, both uniform within their class.
pub fn make_triplets<T: Scalar>(x: &Tensor<T>, labels: &[usize], rng: &mut Rng) -> Result<Triplet<T>> {
    if labels.len() != x.batch() {
        return Err(Error::Input(format!(
            "{} labels for a batch of {}",
            labels.len(),
            x.batch()
        )));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Input("triplets need at least two classes in the batch".into()));
    }
    let members: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    if let Some(k) = members.iter().position(|m| m.len() < 2) {
        return Err(Error::Input(format!(
            "class {} has a single sample; cannot pick a positive",
            classes[k]
        )));
    }
    let class_slot = |l: usize| classes.binary_search(&l).expect("label present");
    let mut pos_idx = Vec::with_capacity(labels.len());
    let mut neg_idx = Vec::with_capacity(labels.len());
    for (i, &l) in labels.iter().enumerate() {
        let k = class_slot(l);
        let same = &members[k];
        let own = same.iter().position(|&j| j == i).expect("anchor in its class");
        pos_idx.push(same[other_class(rng, same.len(), own)]);
        let nk = other_class(rng, classes.len(), k);
        let others = &members[nk];
        neg_idx.push(others[rng.below(others.len())]);
    }
    Ok(Triplet {
        anchor: x.clone(),
        positive: x.gather(&pos_idx),
        negative: x.gather(&neg_idx),
    })
}
