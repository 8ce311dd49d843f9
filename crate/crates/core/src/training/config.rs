use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffnet::{CONV_LR, DENSE_LR};

/// How update batches are drawn from the training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    /// Every update uses the same single batch (the whole split); one epoch.
    OneShot,
    /// Every update uses the whole split.
    FullBatch,
    /// Every update uses the next batch of a per-epoch shuffle.
    MiniBatch(usize),
}

/// Per-layer objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Softplus contrastive loss on positive/negative goodness.
    GoodnessContrastive,
    /// Triplet margin loss on the layer's forwarded activations.
    Triplet { margin: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsIterations {
    pub enabled: bool,
    pub patience: usize,
    pub min_delta: f64,
    pub check_every: usize,
}

impl Default for EsIterations {
    fn default() -> Self {
        Self {
            enabled: false,
            patience: 5,
            min_delta: 1e-4,
            check_every: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsLayers {
    pub enabled: bool,
    pub min_delta: f64,
}

impl Default for EsLayers {
    fn default() -> Self {
        Self {
            enabled: false,
            min_delta: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsEpochs {
    pub enabled: bool,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EsEpochs {
    fn default() -> Self {
        Self {
            enabled: false,
            patience: 2,
            min_delta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Fraction of weights masked per layer; 0 disables pruning.
    pub ratio: f64,
    /// Update steps per layer after pruning; 0 disables retraining.
    pub retrain_iterations: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            ratio: 0.0,
            retrain_iterations: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    pub enabled: bool,
    /// Hidden widths of each dense candidate.
    pub candidate_widths: Vec<Vec<usize>>,
    /// Update steps per layer for every candidate.
    pub iterations: usize,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            candidate_widths: [500, 1000, 2000, 3000].iter().map(|&w| vec![w; 4]).collect(),
            iterations: 1000,
        }
    }
}

/// Everything that drives layer-wise training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub layer_iterations: usize,
    pub batch_mode: BatchMode,
    pub objective: Objective,
    /// 0 disables the peer-normalization term.
    pub peer_norm_weight: f64,
    pub peer_norm_momentum: f64,
    /// Also apply the peer term to conv layers.
    pub peer_norm_conv: bool,
    pub theta_trainable: bool,
    pub es_iterations: EsIterations,
    pub es_layers: EsLayers,
    pub es_epochs: EsEpochs,
    pub prune: PruneConfig,
    pub warmup: WarmupConfig,
    /// Share of the training split held out for early stopping.
    pub validation_fraction: f64,
    pub seed: u64,
    pub dense_lr: f64,
    pub conv_lr: f64,
    /// Learning rate of layer 0, which sees un-normalized pixels; `None`
    /// uses the rate of its kind.
    pub first_layer_lr: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            layer_iterations: 1000,
            batch_mode: BatchMode::FullBatch,
            objective: Objective::GoodnessContrastive,
            peer_norm_weight: 0.0,
            peer_norm_momentum: 0.9,
            peer_norm_conv: false,
            theta_trainable: true,
            es_iterations: EsIterations::default(),
            es_layers: EsLayers::default(),
            es_epochs: EsEpochs::default(),
            prune: PruneConfig::default(),
            warmup: WarmupConfig::default(),
            validation_fraction: 0.1,
            seed: 0,
            dense_lr: DENSE_LR,
            conv_lr: CONV_LR,
            first_layer_lr: None,
        }
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be at least 1")));
    }
    Ok(())
}

impl TrainConfig {
    /// Epochs actually run: one-shot training is a single epoch.
    pub fn effective_epochs(&self) -> usize {
        match self.batch_mode {
            BatchMode::OneShot => 1,
            _ => self.epochs,
        }
    }

    pub fn needs_validation(&self) -> bool {
        self.es_iterations.enabled || self.es_layers.enabled || self.es_epochs.enabled
    }

    pub fn validate(&self) -> Result<()> {
        positive("epochs", self.epochs)?;
        positive("layer_iterations", self.layer_iterations)?;
        if let BatchMode::MiniBatch(size) = self.batch_mode {
            positive("batch size", size)?;
        }
        positive("es_iterations.patience", self.es_iterations.patience)?;
        positive("es_iterations.check_every", self.es_iterations.check_every)?;
        positive("es_epochs.patience", self.es_epochs.patience)?;
        positive("warmup.iterations", self.warmup.iterations)?;
        if !(0.0..1.0).contains(&self.prune.ratio) {
            return Err(Error::Config(format!(
                "prune ratio must lie in [0, 1), got {}",
                self.prune.ratio
            )));
        }
        if self.prune.ratio > 0.0 && self.prune.retrain_iterations > 0 {
            positive("prune.retrain_iterations", self.prune.retrain_iterations)?;
        }
        if !(self.peer_norm_weight >= 0.0) {
            return Err(Error::Config("peer_norm_weight must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.peer_norm_momentum) {
            return Err(Error::Config("peer_norm_momentum must lie in [0, 1)".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation_fraction must lie in (0, 1)".into()));
        }
        if !(self.dense_lr > 0.0 && self.conv_lr > 0.0 && self.first_layer_lr.is_none_or(|lr| lr > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if let Objective::Triplet { margin } = self.objective {
            if !(margin >= 0.0) {
                return Err(Error::Config("triplet margin must be non-negative".into()));
            }
        }
        if self.warmup.enabled && self.warmup.candidate_widths.iter().any(|w| w.is_empty()) {
            return Err(Error::Config("warm-up candidates need at least one layer".into()));
        }
        Ok(())
    }
}
