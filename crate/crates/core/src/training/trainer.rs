use std::borrow::Cow;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{BatchMode, Objective, TrainConfig};
use super::controller::{es_check_history, es_layers_check, prune};
use super::encoder::triplet_layer_gradient;
use super::loss::{self, PeerNorm};
use crate::data::{split, Dataset};
use crate::error::{Error, Result};
use crate::ffnet::{classify_with_depth, goodness, FFNetwork, LayerGrad, LayerKind};
use crate::metrics::accuracy;
use crate::numerics::{Rng, Tensor};
use crate::sampling::{make_pairs_supervised, make_pairs_unsupervised, make_triplets, LabelEmbedder};
use crate::scalar::Scalar;

/// Function evaluations: one forward and one backward pass per parameter
/// update of one layer.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NfeCounter {
    pub forward_passes: u64,
    pub backward_passes: u64,
}

impl NfeCounter {
    pub fn record_update(&mut self) {
        self.forward_passes += 1;
        self.backward_passes += 1;
    }

    pub fn total(&self) -> u64 {
        self.forward_passes + self.backward_passes
    }

    /// Total in units of 10³.
    pub fn thousands(&self) -> f64 {
        self.total() as f64 / 1000.0
    }

    pub fn add(&mut self, other: &NfeCounter) {
        self.forward_passes += other.forward_passes;
        self.backward_passes += other.backward_passes;
    }
}

/// Training loss of every update step of one layer, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: usize,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub nfe: NfeCounter,
    pub traces: Vec<LayerTrace>,
    /// Layers that received updates (including one discarded by ES-layers).
    pub layers_trained: usize,
    /// Largest number of epochs run by any layer.
    pub epochs_run: usize,
    pub layer_epochs: Vec<usize>,
    /// Update steps per layer and epoch actually run.
    pub layer_iterations: Vec<Vec<usize>>,
    /// Validation accuracy at depths 2, 3, … (ES-layers only).
    pub depth_scores: Vec<f64>,
    pub final_depth: usize,
    pub masked_fraction: f64,
    pub selected_config: Option<usize>,
    pub parameters: usize,
}

impl TrainReport {
    fn new(layers: usize) -> Self {
        Self {
            nfe: NfeCounter::default(),
            traces: (0..layers)
                .map(|layer| LayerTrace {
                    layer,
                    losses: Vec::new(),
                })
                .collect(),
            layers_trained: 0,
            epochs_run: 0,
            layer_epochs: vec![0; layers],
            layer_iterations: vec![Vec::new(); layers],
            depth_scores: Vec::new(),
            final_depth: layers,
            masked_fraction: 0.0,
            selected_config: None,
            parameters: 0,
        }
    }
}

/// Training split, optional validation split, and the label code used to
/// build positive and negative data.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a, T> {
    pub train: &'a Dataset<T>,
    pub validation: Option<&'a Dataset<T>>,
    pub embedder: &'a LabelEmbedder,
}

/// Parallel input batches (pos/neg or anchor/positive/negative) pushed
/// through the network one layer at a time.
struct Streams<T> {
    current: Vec<Tensor<T>>,
    kept: Vec<BTreeMap<usize, Tensor<T>>>,
    depth: usize,
}

impl<T: Scalar> Streams<T> {
    fn new(net: &FFNetwork<T>, base: &[Tensor<T>]) -> Result<Self> {
        Ok(Self {
            current: base
                .iter()
                .map(|x| net.shaped_input(x))
                .collect::<Result<_>>()?,
            kept: vec![BTreeMap::new(); base.len()],
            depth: 0,
        })
    }

    fn len(&self) -> usize {
        self.current[0].batch()
    }

    /// Moves from the input of layer `depth` to the input of `depth + 1`.
    fn advance(&mut self, net: &FFNetwork<T>) -> Result<()> {
        let d = self.depth;
        let links = net.residual_links();
        for (cur, kept) in self.current.iter_mut().zip(&mut self.kept) {
            let out = net.layers[d].forward(cur)?.forwarded;
            if links.iter().any(|l| l.source == d) {
                kept.insert(d, out.clone());
            }
            *cur = net.combine_input(d + 1, &out, |s| kept.get(&s))?;
            kept.retain(|&s, _| links.iter().any(|l| l.source == s && l.target > d + 1));
        }
        self.depth += 1;
        Ok(())
    }

    fn batch(&self, indices: Option<&[usize]>) -> Vec<Cow<'_, Tensor<T>>> {
        self.current
            .iter()
            .map(|t| match indices {
                Some(idx) => Cow::Owned(t.gather(idx)),
                None => Cow::Borrowed(t),
            })
            .collect()
    }
}

/// Yields the sample indices of each update step.
struct Batcher {
    size: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl Batcher {
    fn new(mode: BatchMode, n: usize, rng: &mut Rng) -> Self {
        match mode {
            BatchMode::MiniBatch(size) if size < n => Self {
                size,
                order: rng.permutation(n),
                cursor: 0,
            },
            _ => Self {
                size: n,
                order: Vec::new(),
                cursor: 0,
            },
        }
    }

    /// `None` means the whole split.
    fn next(&mut self, rng: &mut Rng) -> Option<Vec<usize>> {
        if self.order.is_empty() {
            return None;
        }
        if self.cursor + self.size > self.order.len() {
            rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor..self.cursor + self.size].to_vec();
        self.cursor += self.size;
        Some(idx)
    }
}

fn make_streams<T: Scalar>(
    ds: &Dataset<T>,
    emb: &LabelEmbedder,
    objective: Objective,
    rng: &mut Rng,
) -> Result<Vec<Tensor<T>>> {
    match objective {
        Objective::GoodnessContrastive => {
            let pair = match &ds.labels {
                Some(labels) => make_pairs_supervised(&ds.images, labels, emb, rng)?,
                None => make_pairs_unsupervised(&ds.images, emb, rng)?,
            };
            Ok(vec![pair.x_pos, pair.x_neg])
        }
        Objective::Triplet { .. } => {
            let t = make_triplets(&ds.images, ds.labels_or_err()?, rng)?;
            Ok(vec![t.anchor, t.positive, t.negative])
        }
    }
}

struct Validation<'a, T> {
    dataset: &'a Dataset<T>,
    base: Vec<Tensor<T>>,
}

struct Phase {
    iterations: usize,
    epochs: usize,
    early_stopping: bool,
}

fn step_gradient<T: Scalar>(
    net: &FFNetwork<T>,
    l: usize,
    batch: &[Cow<'_, Tensor<T>>],
    cfg: &TrainConfig,
    running_mean: &mut Vec<T>,
) -> Result<LayerGrad<T>> {
    let layer = &net.layers[l];
    match cfg.objective {
        Objective::GoodnessContrastive => {
            let peer_on = cfg.peer_norm_weight > 0.0
                && (layer.kind == LayerKind::Dense || cfg.peer_norm_conv);
            let peer = peer_on.then(|| PeerNorm {
                running_mean: running_mean.as_slice(),
                momentum: T::of(cfg.peer_norm_momentum),
                weight: T::of(cfg.peer_norm_weight),
            });
            let (grad, rm) = layer.local_gradient(&batch[0], &batch[1], peer)?;
            if let Some(rm) = rm {
                *running_mean = rm;
            }
            Ok(grad)
        }
        Objective::Triplet { margin } => {
            triplet_layer_gradient(layer, &batch[0], &batch[1], &batch[2], T::of(margin))
        }
    }
}

/// Objective value of layer `l` on fixed validation streams (no update).
fn validation_loss<T: Scalar>(net: &FFNetwork<T>, l: usize, streams: &Streams<T>, cfg: &TrainConfig) -> Result<f64> {
    let layer = &net.layers[l];
    match cfg.objective {
        Objective::GoodnessContrastive => {
            let gp = goodness(&layer.forward(&streams.current[0])?.pre_norm, layer.theta);
            let gn = goodness(&layer.forward(&streams.current[1])?.pre_norm, layer.theta);
            Ok(loss::contrastive_loss(&gp, &gn).as_f64())
        }
        Objective::Triplet { margin } => {
            let f: Vec<Tensor<T>> = streams
                .current
                .iter()
                .map(|x| layer.forward(x).map(|o| o.forwarded))
                .collect::<Result<_>>()?;
            Ok(loss::triplet_margin_loss(&f[0], &f[1], &f[2], T::of(margin))?.as_f64())
        }
    }
}

fn validation_accuracy<T: Scalar>(
    net: &FFNetwork<T>,
    val: &Dataset<T>,
    emb: &LabelEmbedder,
    depth: usize,
) -> Result<f64> {
    let truth = val.labels_or_err()?;
    let c = classify_with_depth(net, &val.images, emb, depth)?;
    accuracy(&c.predictions, truth)
}

#[allow(clippy::too_many_arguments)]
fn run_phase<T: Scalar>(
    net: &mut FFNetwork<T>,
    base: &[Tensor<T>],
    val: Option<&Validation<'_, T>>,
    emb: &LabelEmbedder,
    cfg: &TrainConfig,
    phase: &Phase,
    report: &mut TrainReport,
    rng: &mut Rng,
) -> Result<()> {
    let mut streams = Streams::new(net, base)?;
    let mut vstreams = val.map(|v| Streams::new(net, &v.base)).transpose()?;
    let es = &cfg.es_iterations;
    let mut l = 0;
    while l < net.len() {
        if l > 0 {
            streams.advance(net)?;
            if let Some(v) = vstreams.as_mut() {
                v.advance(net)?;
            }
        }
        if net.frozen[l] {
            l += 1;
            continue;
        }
        let mut layer_rng = rng.fork(l as u64);
        let mut running_mean = vec![T::zero(); net.layers[l].units()];
        let mut epoch_losses = Vec::new();
        for _ in 0..phase.epochs {
            let mut batcher = Batcher::new(cfg.batch_mode, streams.len(), &mut layer_rng);
            let mut checks = Vec::new();
            let mut steps = 0;
            for it in 0..phase.iterations {
                if phase.early_stopping && es.enabled && it % es.check_every == 0 {
                    let v = vstreams.as_ref().expect("validation streams");
                    checks.push(validation_loss(net, l, v, cfg)?);
                    if es_check_history(&checks, es.patience, es.min_delta) {
                        break;
                    }
                }
                let idx = batcher.next(&mut layer_rng);
                let batch = streams.batch(idx.as_deref());
                let grad = step_gradient(net, l, &batch, cfg, &mut running_mean)?;
                report.nfe.record_update();
                report.traces[l].losses.push(grad.loss.as_f64());
                net.layers[l].apply_gradient(&grad)?;
                steps += 1;
            }
            report.layer_iterations[l].push(steps);
            report.layer_epochs[l] += 1;
            if phase.early_stopping && cfg.es_epochs.enabled {
                let v = vstreams.as_ref().expect("validation streams");
                epoch_losses.push(validation_loss(net, l, v, cfg)?);
                if es_check_history(&epoch_losses, cfg.es_epochs.patience, cfg.es_epochs.min_delta) {
                    break;
                }
            }
        }
        report.layers_trained = report.layers_trained.max(l + 1);
        if phase.early_stopping && cfg.es_layers.enabled && l >= 1 {
            let v = val.expect("validation split");
            report
                .depth_scores
                .push(validation_accuracy(net, v.dataset, emb, l + 1)?);
            let keep = es_layers_check(&report.depth_scores, cfg.es_layers.min_delta) + 1;
            if keep < l + 1 {
                net.truncate(keep);
                break;
            }
        }
        l += 1;
    }
    report.epochs_run = report.layer_epochs.iter().copied().max().unwrap_or(0);
    report.final_depth = net.len();
    Ok(())
}

/// Carves the validation split out of the training data when early stopping
/// needs one and none was given.
fn resolve_validation<'a, T: Scalar>(
    data: &TrainData<'a, T>,
    cfg: &TrainConfig,
    required: bool,
) -> Result<(Cow<'a, Dataset<T>>, Option<Cow<'a, Dataset<T>>>)> {
    match data.validation {
        Some(v) => Ok((Cow::Borrowed(data.train), Some(Cow::Borrowed(v)))),
        None if required => {
            let f = cfg.validation_fraction;
            let stratified = data.train.labels.is_some();
            let mut parts = split(data.train, &[1.0 - f, f], cfg.seed, stratified)?;
            let val = parts.pop().expect("two parts");
            let train = parts.pop().expect("two parts");
            Ok((Cow::Owned(train), Some(Cow::Owned(val))))
        }
        None => Ok((Cow::Borrowed(data.train), None)),
    }
}

/// Trains the network layer by layer: every non-frozen layer runs its epochs
/// of update steps on the outputs of the already trained layers before the
/// next layer starts. Early stopping, pruning and retraining follow `cfg`.
pub fn train_layerwise<T: Scalar>(
    net: &mut FFNetwork<T>,
    data: &TrainData<'_, T>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    if matches!(cfg.objective, Objective::Triplet { .. }) && cfg.es_layers.enabled {
        return Err(Error::Config(
            "layer early stopping scores goodness inference; not available for triplet training".into(),
        ));
    }
    let (train, val) = resolve_validation(data, cfg, cfg.needs_validation())?;
    if cfg.es_layers.enabled {
        val.as_ref()
            .expect("validation split")
            .labels_or_err()?;
    }
    for (i, layer) in net.layers.iter_mut().enumerate().filter(|(i, _)| !net.frozen[*i]) {
        layer.theta_trainable = cfg.theta_trainable;
        layer.adam.lr = match (i, layer.kind, cfg.first_layer_lr) {
            (0, _, Some(lr)) => lr,
            (_, LayerKind::Dense, _) => cfg.dense_lr,
            (_, LayerKind::Conv { .. }, _) => cfg.conv_lr,
        };
    }

    let mut rng = Rng::new(cfg.seed);
    let base = make_streams(&train, data.embedder, cfg.objective, &mut rng.fork(1))?;
    let validation = match &val {
        Some(v) => Some(Validation {
            dataset: v.as_ref(),
            base: make_streams(v, data.embedder, cfg.objective, &mut rng.fork(2))?,
        }),
        None => None,
    };
    let mut report = TrainReport::new(net.len());
    let phase = Phase {
        iterations: cfg.layer_iterations,
        epochs: cfg.effective_epochs(),
        early_stopping: true,
    };
    run_phase(net, &base, validation.as_ref(), data.embedder, cfg, &phase, &mut report, &mut rng.fork(3))?;

    if cfg.prune.ratio > 0.0 {
        *net = prune(net, cfg.prune.ratio)?;
        if cfg.prune.retrain_iterations > 0 {
            let retrain = Phase {
                iterations: cfg.prune.retrain_iterations,
                epochs: 1,
                early_stopping: false,
            };
            let mut retrain_report = TrainReport::new(net.len());
            run_phase(net, &base, None, data.embedder, cfg, &retrain, &mut retrain_report, &mut rng.fork(4))?;
            report.nfe.add(&retrain_report.nfe);
            for (t, r) in report.traces.iter_mut().zip(retrain_report.traces) {
                t.losses.extend(r.losses);
            }
        }
        report.masked_fraction = net.masked_fraction();
    }
    report.traces.truncate(report.layers_trained);
    report.parameters = net.count_parameters();
    Ok(report)
}

/// A network and the configuration it would be trained with.
#[derive(Debug, Clone)]
pub struct WarmupCandidate<T> {
    pub net: FFNetwork<T>,
    pub cfg: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub index: usize,
    pub val_accuracy: f64,
    /// Trained thresholds, first layer first.
    pub thetas: Vec<f64>,
    pub parameters: usize,
    pub nfe: NfeCounter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    pub selected: usize,
    pub candidates: Vec<CandidateScore>,
    pub nfe: NfeCounter,
}

/// Trains every candidate for `iterations` steps per layer (one epoch, no
/// early stopping or pruning) and picks the highest validation accuracy;
/// ties go to the larger trained first-layer threshold, then the lower index.
pub fn warmup_select<T: Scalar>(
    candidates: &mut [WarmupCandidate<T>],
    data: &TrainData<'_, T>,
    iterations: usize,
) -> Result<WarmupReport> {
    let first = candidates
        .first()
        .ok_or_else(|| Error::Config("warm-up needs at least one candidate".into()))?;
    let (train, val) = resolve_validation(data, &first.cfg, true)?;
    let val = val.expect("validation split");
    let warm_data = TrainData {
        train: &train,
        validation: Some(&val),
        embedder: data.embedder,
    };
    let mut scores = Vec::with_capacity(candidates.len());
    let mut nfe = NfeCounter::default();
    for (index, cand) in candidates.iter_mut().enumerate() {
        let mut cfg = cand.cfg.clone();
        cfg.layer_iterations = iterations;
        cfg.epochs = 1;
        cfg.es_iterations.enabled = false;
        cfg.es_layers.enabled = false;
        cfg.es_epochs.enabled = false;
        cfg.prune.ratio = 0.0;
        let report = train_layerwise(&mut cand.net, &warm_data, &cfg)?;
        nfe.add(&report.nfe);
        scores.push(CandidateScore {
            index,
            val_accuracy: validation_accuracy(&cand.net, &val, data.embedder, cand.net.len())?,
            thetas: cand.net.layers.iter().map(|l| l.theta.as_f64()).collect(),
            parameters: report.parameters,
            nfe: report.nfe,
        });
    }
    let mut selected = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        let best = &scores[selected];
        if s.val_accuracy > best.val_accuracy
            || (s.val_accuracy == best.val_accuracy && s.thetas[0] > best.thetas[0])
        {
            selected = i;
        }
    }
    Ok(WarmupReport {
        selected,
        candidates: scores,
        nfe,
    })
}
