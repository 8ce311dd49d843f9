//! The `saff` commands. Each returns the JSON document it reports and writes
//! its artifacts (checkpoint, report.json, traces.csv, selection.json).

use std::io::Write;
use std::path::{Path, PathBuf};

use saff_core::data::{load_idx, read_sfd, split, synthetic, zscore_fit_apply, Dataset, Normalization};
use saff_core::ffnet::{argmax, classify_by_goodness, FFLayer, FFNetwork, ResidualLink};
use saff_core::metrics::{accuracy, evaluate_scores, psnr};
use saff_core::sampling::LabelEmbedder;
use saff_core::training::{
    encoder_features, pretrain_encoder, prune_layer, train_head, train_layerwise, warmup_select, Head, HeadTarget,
    HeadTask, NfeCounter, Objective, TrainConfig, TrainData, TrainReport, WarmupCandidate,
};
use saff_core::{Real, Rng, Scalar};
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::config::{Arch, DataConfig, DataFormat, ExperimentConfig, Metric, ModelConfig, Split};
use crate::error::{CliError, Result};

/// NFE in units of 10³, rounded to one decimal.
pub fn nfe_thousands(nfe: &NfeCounter) -> f64 {
    (nfe.total() as f64 / 100.0).round() / 10.0
}

/// Train, optional validation and optional test splits, ready for use.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset<Real>,
    pub validation: Option<Dataset<Real>>,
    pub test: Option<Dataset<Real>>,
    pub n_classes: usize,
    pub normalization: Option<Normalization>,
}

fn limit(ds: Dataset, n: Option<usize>) -> Result<Dataset> {
    match n {
        Some(n) if n < ds.len() => Ok(ds.head(n)?),
        _ => Ok(ds),
    }
}

fn load_raw(d: &DataConfig) -> Result<(Dataset, Option<Dataset>)> {
    let path = |p: &Option<PathBuf>| p.clone().expect("validated path");
    let (train, test) = match d.format {
        DataFormat::Idx => {
            let train = load_idx(&path(&d.train_images), Some(&path(&d.train_labels)))?;
            let test = match (&d.test_images, &d.test_labels) {
                (Some(i), Some(l)) => Some(load_idx(i, Some(l))?),
                _ => None,
            };
            (train, test)
        }
        DataFormat::Sfd => (read_sfd(&path(&d.train))?, d.test.as_deref().map(read_sfd).transpose()?),
        DataFormat::Synthetic => {
            let all = synthetic(d.n, d.classes, d.size, d.noise, d.seed)?;
            let mut parts = split(&all, &[1.0 - d.test_fraction, d.test_fraction], d.seed, true)?;
            let test = parts.pop();
            (parts.pop().expect("two parts"), test)
        }
    };
    Ok((limit(train, d.train_limit)?, test.map(|t| limit(t, d.test_limit)).transpose()?))
}

fn apply_normalization(ds: &mut Dataset, norm: Normalization) {
    ds.images = ds.images.map(|v| norm.apply(v));
    ds.normalization = Some(norm);
}

/// Loads the configured splits. Normalization statistics are fitted on the
/// training split, or taken from `fixed` (a checkpoint) when given.
pub fn load_data(d: &DataConfig, fixed: Option<Normalization>) -> Result<Splits> {
    let (train, mut test) = load_raw(d)?;
    let (mut train, mut validation) = if d.validation_fraction > 0.0 {
        let stratified = train.labels.is_some();
        let mut parts = split(&train, &[1.0 - d.validation_fraction, d.validation_fraction], d.seed, stratified)?;
        let v = parts.pop();
        (parts.pop().expect("two parts"), v)
    } else {
        (train, None)
    };
    let normalization = match fixed {
        Some(norm) => {
            for ds in std::iter::once(&mut train).chain(validation.iter_mut()).chain(test.iter_mut()) {
                apply_normalization(ds, norm);
            }
            Some(norm)
        }
        None if d.zscore => {
            let mut others: Vec<&mut Dataset> = validation.iter_mut().chain(test.iter_mut()).collect();
            Some(zscore_fit_apply(&mut train, &mut others)?)
        }
        None => None,
    };
    let n_classes = std::iter::once(&train)
        .chain(&validation)
        .chain(&test)
        .filter_map(|ds| ds.labels.as_ref())
        .flatten()
        .max()
        .map_or(0, |&m| m + 1);
    if train.sample_shape().len() != 3 {
        return Err(CliError::Data(format!("images must be [N, C, H, W], got {:?}", train.images.shape())));
    }
    Ok(Splits {
        train: train.cast(),
        validation: validation.map(|v| v.cast()),
        test: test.map(|t| t.cast()),
        n_classes,
        normalization,
    })
}

fn label_slots(cfg: &ExperimentConfig, n_classes: usize) -> Result<usize> {
    let default = match cfg.train.objective {
        Objective::Triplet { .. } => 0,
        Objective::GoodnessContrastive => n_classes,
    };
    let slots = cfg.model.label_slots.unwrap_or(default);
    if slots > 0 && slots < n_classes {
        return Err(CliError::Config(format!(
            "model.label_slots = {slots} cannot encode {n_classes} classes"
        )));
    }
    Ok(slots)
}

/// Builds the configured network for per-sample input shape `[C, H, W]`.
pub fn build_network(model: &ModelConfig, widths: Option<&[usize]>, input: &[usize], slots: usize) -> Result<FFNetwork<Real>> {
    let mut rng = Rng::new(model.seed);
    let mut net = match model.arch {
        Arch::Ffa => {
            let w = widths.map_or_else(|| model.dense_widths(), <[usize]>::to_vec);
            FFNetwork::dense(input.iter().product(), &w, slots, &mut rng)?
        }
        Arch::Cffa | Arch::Rescffa => {
            let spec = model.conv_spec();
            let mut layers = Vec::with_capacity(spec.channels.len());
            let mut cin = input[0];
            for (&c, &s) in spec.channels.iter().zip(&spec.strides) {
                layers.push(FFLayer::conv(cin, c, spec.kernel, s, spec.padding, &mut rng)?);
                cin = c;
            }
            let links = spec
                .residual
                .iter()
                .map(|&[source, target]| ResidualLink { source, target })
                .collect();
            FFNetwork::new(input, layers, links, slots)?
        }
    };
    if let Some(thetas) = &model.theta_init {
        if thetas.len() != net.len() {
            return Err(CliError::Config(format!(
                "model.theta_init has {} values for {} layers",
                thetas.len(),
                net.len()
            )));
        }
        for (l, &t) in net.layers.iter_mut().zip(thetas) {
            l.theta = Real::of(t);
        }
    }
    Ok(net)
}

fn embedder(splits: &Splits) -> LabelEmbedder {
    LabelEmbedder::new(splits.n_classes, splits.train.max_value())
}

fn check_input(net: &FFNetwork<Real>, ds: &Dataset<Real>) -> Result<()> {
    let want: usize = net.input_shape().iter().product();
    let dense_ok = net.input_shape().len() == 1 && ds.images.sample_len() == want;
    if !dense_ok && net.input_shape() != ds.sample_shape() {
        return Err(CliError::Config(format!(
            "network expects inputs {:?}, data has {:?}",
            net.input_shape(),
            ds.sample_shape()
        )));
    }
    Ok(())
}

/// Metrics of a checkpoint on one split: goodness inference, or the head
/// when the checkpoint carries one.
pub fn evaluate(ck: &Checkpoint<Real>, ds: &Dataset<Real>, metrics: &[Metric]) -> Result<Value> {
    check_input(&ck.net, ds)?;
    let mut out = serde_json::Map::new();
    out.insert("n_samples".into(), json!(ds.len()));
    let want = |m: Metric| metrics.contains(&m);
    if let Some(head) = &ck.head {
        let features = encoder_features(&ck.net, &ds.images, ck.embedder.as_ref())?;
        let z = head.forward(&features)?;
        match head.task {
            HeadTask::Classification => {
                let truth = ds.labels_or_err()?;
                let pred: Vec<usize> = z.samples().map(argmax).collect();
                ranking_metrics(&mut out, &pred, &z, truth, &want)?;
            }
            HeadTask::Reconstruction => {
                let flat = ds.images.clone().reshape(&[ds.len(), ds.images.sample_len()])?;
                let range = flat.data().iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()))
                    - flat.data().iter().fold(f64::INFINITY, |m, v| m.min(v.as_f64()));
                let mse = flat
                    .data()
                    .iter()
                    .zip(z.data())
                    .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                    .sum::<f64>()
                    / flat.len() as f64;
                out.insert("mse".into(), json!(mse));
                out.insert("psnr".into(), json!(psnr(&z, &flat, range)?));
            }
        }
    } else {
        let emb = ck
            .embedder
            .as_ref()
            .ok_or_else(|| CliError::Config("checkpoint has no label code for goodness inference".into()))?;
        let truth = ds.labels_or_err()?;
        let c = classify_by_goodness(&ck.net, &ds.images, emb)?;
        ranking_metrics(&mut out, &c.predictions, &c.scores, truth, &want)?;
    }
    Ok(Value::Object(out))
}

fn ranking_metrics(
    out: &mut serde_json::Map<String, Value>,
    pred: &[usize],
    scores: &saff_core::Tensor<Real>,
    truth: &[usize],
    want: &dyn Fn(Metric) -> bool,
) -> Result<()> {
    if want(Metric::Accuracy) {
        out.insert("accuracy".into(), json!(accuracy(pred, truth)?));
    }
    if want(Metric::Auc) || want(Metric::Map) {
        let r = evaluate_scores(pred, scores, truth)?;
        if want(Metric::Auc) {
            out.insert("auc".into(), json!(r.auc));
        }
        if want(Metric::Map) {
            out.insert("map".into(), json!(r.map));
        }
        out.insert("skipped_classes".into(), json!(r.skipped_classes));
    }
    Ok(())
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("json serializes");
    std::fs::write(path, text + "\n").map_err(CliError::io(path))
}

fn write_traces(path: &Path, report: &TrainReport) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(CliError::io(path))?);
    let mut rows = String::from("layer,iteration,loss\n");
    for t in &report.traces {
        for (i, l) in t.losses.iter().enumerate() {
            rows.push_str(&format!("{},{},{}\n", t.layer, i, l));
        }
    }
    f.write_all(rows.as_bytes())
        .and_then(|_| f.flush())
        .map_err(CliError::io(path))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn report_json(cfg: &ExperimentConfig, command: &str, net: &FFNetwork<Real>, report: &TrainReport, nfe: &NfeCounter) -> Value {
    json!({
        "command": command,
        "config_hash": format!("{:016x}", cfg.hash()),
        "seed": cfg.train.seed,
        "nfe": nfe_thousands(nfe),
        "nfe_forward": nfe.forward_passes,
        "nfe_backward": nfe.backward_passes,
        "parameters": net.count_parameters(),
        "layers": net.len(),
        "layers_trained": report.layers_trained,
        "final_depth": report.final_depth,
        "epochs_run": report.epochs_run,
        "layer_iterations": report.layer_iterations,
        "depth_scores": report.depth_scores,
        "thetas": net.layers.iter().map(|l| l.theta.as_f64()).collect::<Vec<_>>(),
        "masked_fraction": report.masked_fraction,
        "selected_config": report.selected_config,
    })
}

fn test_metrics(ck: &Checkpoint<Real>, splits: &Splits, cfg: &ExperimentConfig) -> Result<Value> {
    let ds = match cfg.eval.split {
        Split::Test => splits.test.as_ref(),
        Split::Train => Some(&splits.train),
    };
    let name = match cfg.eval.split {
        Split::Test => "test",
        Split::Train => "train",
    };
    match ds {
        Some(ds) if ck.head.is_some() || (ck.net.len() >= 2 && ds.labels.is_some()) => {
            let mut m = evaluate(ck, ds, &cfg.eval.metrics)?;
            m["split"] = json!(name);
            Ok(m)
        }
        _ => Ok(Value::Null),
    }
}

/// Scores every warm-up candidate; returns the report JSON and the widths
/// of the selected one.
fn run_warmup(cfg: &ExperimentConfig, splits: &Splits, emb: &LabelEmbedder, slots: usize) -> Result<(Value, Vec<usize>, NfeCounter)> {
    let widths = &cfg.train.warmup.candidate_widths;
    if widths.is_empty() {
        return Err(CliError::Config("train.warmup.candidate_widths is empty".into()));
    }
    let mut model = cfg.model.clone();
    model.theta_init = model.theta_init.filter(|t| widths.iter().all(|w| w.len() == t.len()));
    let mut candidates = widths
        .iter()
        .map(|w| {
            Ok(WarmupCandidate {
                net: build_network(&model, Some(w), splits.train.sample_shape(), slots)?,
                cfg: cfg.train.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let data = TrainData {
        train: &splits.train,
        validation: splits.validation.as_ref(),
        embedder: emb,
    };
    let r = warmup_select(&mut candidates, &data, cfg.train.warmup.iterations)?;
    let selection = json!({
        "selected": r.selected,
        "selected_widths": widths[r.selected],
        "nfe": nfe_thousands(&r.nfe),
        "candidates": r.candidates.iter().map(|c| json!({
            "index": c.index,
            "widths": widths[c.index],
            "val_accuracy": c.val_accuracy,
            "thetas": c.thetas,
            "parameters": c.parameters,
            "nfe": nfe_thousands(&c.nfe),
        })).collect::<Vec<_>>(),
    });
    Ok((selection, widths[r.selected].clone(), r.nfe))
}

pub fn warmup(cfg: &ExperimentConfig, report_dir: &Path) -> Result<Value> {
    let splits = load_data(&cfg.data, None)?;
    let slots = label_slots(cfg, splits.n_classes)?;
    let (selection, _, _) = run_warmup(cfg, &splits, &embedder(&splits), slots)?;
    ensure_dir(report_dir)?;
    write_json(&report_dir.join("selection.json"), &selection)?;
    Ok(selection)
}

fn train_impl(cfg: &ExperimentConfig, checkpoint: &Path, report_dir: &Path, pretrain: bool) -> Result<Value> {
    let splits = load_data(&cfg.data, None)?;
    let emb = embedder(&splits);
    let slots = label_slots(cfg, splits.n_classes)?;
    ensure_dir(report_dir)?;
    let mut total = NfeCounter::default();
    let mut selected = None;
    let mut widths = None;
    if cfg.train.warmup.enabled && !pretrain {
        let (selection, w, nfe) = run_warmup(cfg, &splits, &emb, slots)?;
        write_json(&report_dir.join("selection.json"), &selection)?;
        total.add(&nfe);
        selected = selection["selected"].as_u64().map(|v| v as usize);
        widths = Some(w);
    }
    let mut model = cfg.model.clone();
    if widths.is_some() {
        model.theta_init = model.theta_init.filter(|t| Some(t.len()) == widths.as_ref().map(Vec::len));
    }
    let mut net = build_network(&model, widths.as_deref(), splits.train.sample_shape(), slots)?;
    let data = TrainData {
        train: &splits.train,
        validation: splits.validation.as_ref(),
        embedder: &emb,
    };
    let mut report = if pretrain {
        pretrain_encoder(&mut net, &data, &cfg.train)?
    } else {
        train_layerwise(&mut net, &data, &cfg.train)?
    };
    report.selected_config = selected;
    total.add(&report.nfe);

    let ck = Checkpoint {
        net,
        embedder: Some(emb),
        normalization: splits.normalization,
        head: None,
        config_hash: cfg.hash(),
    };
    ck.save(checkpoint)?;
    let command = if pretrain { "pretrain" } else { "train" };
    let mut out = report_json(cfg, command, &ck.net, &report, &total);
    if selected.is_some() {
        out["warmup_nfe"] = json!(nfe_thousands(&NfeCounter {
            forward_passes: total.forward_passes - report.nfe.forward_passes,
            backward_passes: total.backward_passes - report.nfe.backward_passes,
        }));
    }
    out["metrics"] = if pretrain { Value::Null } else { test_metrics(&ck, &splits, cfg)? };
    write_json(&report_dir.join("report.json"), &out)?;
    write_traces(&report_dir.join("traces.csv"), &report)?;
    Ok(out)
}

pub fn train(cfg: &ExperimentConfig, checkpoint: &Path, report_dir: &Path) -> Result<Value> {
    train_impl(cfg, checkpoint, report_dir, false)
}

/// Layer-wise training followed by freezing the whole encoder.
pub fn pretrain(cfg: &ExperimentConfig, checkpoint: &Path, report_dir: &Path) -> Result<Value> {
    train_impl(cfg, checkpoint, report_dir, true)
}

pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Value> {
    let ck = Checkpoint::<Real>::load(checkpoint)?;
    let splits = load_data(&cfg.data, ck.normalization)?;
    let (ds, name) = match cfg.eval.split {
        Split::Test => (
            splits
                .test
                .as_ref()
                .ok_or_else(|| CliError::Config("config has no test split".into()))?,
            "test",
        ),
        Split::Train => (&splits.train, "train"),
    };
    let mut m = evaluate(&ck, ds, &cfg.eval.metrics)?;
    m["split"] = json!(name);
    Ok(m)
}

/// Masks the smallest weights of every layer; `retrain` gives the config and
/// steps per layer for retraining with the mask fixed.
pub fn prune(checkpoint: &Path, ratio: f64, output: &Path, retrain: Option<(&ExperimentConfig, usize)>) -> Result<Value> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(CliError::Config(format!("--ratio must lie in [0, 1), got {ratio}")));
    }
    let mut ck = Checkpoint::<Real>::load(checkpoint)?;
    let before = ck.net.masked_fraction();
    if ratio < before {
        eprintln!("warning: ratio {ratio} is below the current masked fraction {before:.4}; nothing to prune");
    }
    for layer in &mut ck.net.layers {
        prune_layer(layer, ratio)?;
    }
    let mut nfe = NfeCounter::default();
    if let Some((cfg, iterations)) = retrain.filter(|(_, it)| *it > 0) {
        let splits = load_data(&cfg.data, ck.normalization)?;
        check_input(&ck.net, &splits.train)?;
        let emb = ck.embedder.clone().unwrap_or_else(|| embedder(&splits));
        let mut tc: TrainConfig = cfg.train.clone();
        tc.layer_iterations = iterations;
        tc.epochs = 1;
        tc.es_iterations.enabled = false;
        tc.es_layers.enabled = false;
        tc.es_epochs.enabled = false;
        tc.prune.ratio = 0.0;
        let data = TrainData {
            train: &splits.train,
            validation: None,
            embedder: &emb,
        };
        nfe = train_layerwise(&mut ck.net, &data, &tc)?.nfe;
    }
    ck.save(output)?;
    Ok(json!({
        "ratio": ratio,
        "masked_fraction": ck.net.masked_fraction(),
        "layer_masked_fraction": ck.net.layers.iter().map(FFLayer::masked_fraction).collect::<Vec<_>>(),
        "parameters": ck.net.count_parameters(),
        "nfe": nfe_thousands(&nfe),
    }))
}

/// Trains the configured head on a frozen encoder checkpoint.
pub fn head(cfg: &ExperimentConfig, encoder: &Path, checkpoint: &Path, report_dir: &Path) -> Result<Value> {
    let mut ck = Checkpoint::<Real>::load(encoder)?;
    if !ck.net.all_frozen() {
        return Err(saff_core::Error::Contract("head training needs a frozen encoder; run pretrain first".into()).into());
    }
    let splits = load_data(&cfg.data, ck.normalization)?;
    check_input(&ck.net, &splits.train)?;
    let train = &splits.train;
    let emb = ck.embedder.as_ref();
    let features = encoder_features(&ck.net, &train.images, emb)?;
    let task = cfg.head.task;
    let flat;
    let (outputs, target) = match task {
        HeadTask::Classification => (splits.n_classes, HeadTarget::Labels(train.labels_or_err()?)),
        HeadTask::Reconstruction => {
            flat = train.images.clone().reshape(&[train.len(), train.images.sample_len()])?;
            (flat.shape()[1], HeadTarget::Values(&flat))
        }
    };
    let mut head = Head::new(task, features.shape()[1], outputs, &mut Rng::new(cfg.head.seed));
    let r = train_head(&ck.net, &mut head, &train.images, target, emb, &cfg.head.train_config())?;
    ck.head = Some(head);
    ck.config_hash = cfg.hash();
    ck.save(checkpoint)?;
    ensure_dir(report_dir)?;
    let mut out = json!({
        "command": "head",
        "config_hash": format!("{:016x}", cfg.hash()),
        "task": task,
        "nfe": nfe_thousands(&r.nfe),
        "nfe_forward": r.nfe.forward_passes,
        "nfe_backward": r.nfe.backward_passes,
        "parameters": ck.head.as_ref().map_or(0, |h| h.weights.len() + h.bias.len()),
        "final_loss": r.losses.last(),
    });
    out["metrics"] = test_metrics(&ck, &splits, cfg)?;
    write_json(&report_dir.join("report.json"), &out)?;
    Ok(out)
}

/// Summary of a checkpoint.
pub fn report(checkpoint: &Path) -> Result<Value> {
    let ck = Checkpoint::<Real>::load(checkpoint)?;
    let net = &ck.net;
    Ok(json!({
        "input_shape": net.input_shape(),
        "layers": net.layers.iter().zip(&net.frozen).map(|(l, &frozen)| json!({
            "kind": l.kind,
            "weights": l.weights.shape(),
            "theta": l.theta.as_f64(),
            "theta_trainable": l.theta_trainable,
            "masked_fraction": l.masked_fraction(),
            "parameters": l.param_count(),
            "frozen": frozen,
        })).collect::<Vec<_>>(),
        "residual_links": net.residual_links().iter().map(|l| [l.source, l.target]).collect::<Vec<_>>(),
        "label_slots": net.label_slots,
        "parameters": net.count_parameters(),
        "masked_fraction": net.masked_fraction(),
        "normalization": ck.normalization,
        "head": ck.head.as_ref().map(|h| json!({"task": h.task, "weights": h.weights.shape()})),
        "config_hash": format!("{:016x}", ck.config_hash),
    }))
}

/// Writes `v` to `path` when given.
pub fn save_json(path: Option<&Path>, v: &Value) -> Result<()> {
    path.map_or(Ok(()), |p| write_json(p, v))
}
