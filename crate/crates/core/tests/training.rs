use proptest::prelude::*;
use saff_core::data::{split, synthetic, Dataset};
use saff_core::ffnet::{FFNetwork, LayerKind};
use saff_core::metrics::accuracy;
use saff_core::sampling::LabelEmbedder;
use saff_core::training::{
    encoder_features, es_iterations_check, es_layers_check, pretrain_encoder, prune, train_head, train_layerwise,
    warmup_select, BatchMode, HeadConfig, HeadTarget, HeadTask, Head, Objective, TrainConfig, TrainData,
    WarmupCandidate,
};
use saff_core::{Error, Rng};

fn tiny() -> (Dataset, LabelEmbedder) {
    let ds = synthetic(12, 4, 4, 0.1, 0).unwrap();
    let emb = LabelEmbedder::new(4, ds.max_value());
    (ds, emb)
}

fn net(widths: &[usize], seed: u64) -> FFNetwork<f64> {
    FFNetwork::dense(16, widths, 4, &mut Rng::new(seed)).unwrap()
}

fn run(widths: &[usize], cfg: &TrainConfig) -> (FFNetwork<f64>, saff_core::training::TrainReport) {
    let (ds, emb) = tiny();
    let mut n = net(widths, 1);
    let data = TrainData { train: &ds, validation: None, embedder: &emb };
    let report = train_layerwise(&mut n, &data, cfg).unwrap();
    (n, report)
}

#[test]
fn nfe_matches_the_counting_convention() {
    let one_shot = TrainConfig { batch_mode: BatchMode::OneShot, ..TrainConfig::default() };
    assert_eq!(run(&[4; 4], &one_shot).1.nfe.total(), 8_000);

    let epochs = TrainConfig { batch_mode: BatchMode::FullBatch, epochs: 10, ..TrainConfig::default() };
    let (_, r) = run(&[4; 4], &epochs);
    assert_eq!(r.nfe.total(), 80_000);
    assert_eq!(r.nfe.forward_passes, r.nfe.backward_passes);

    let mut pruned = epochs.clone();
    pruned.prune.ratio = 0.5;
    pruned.prune.retrain_iterations = 100;
    assert_eq!(run(&[4; 4], &pruned).1.nfe.total(), 80_800);
}

#[test]
fn warmup_accrues_candidate_nfe() {
    let (ds, emb) = tiny();
    let data = TrainData { train: &ds, validation: None, embedder: &emb };
    let cfg = TrainConfig { batch_mode: BatchMode::OneShot, ..TrainConfig::default() };
    let mut cands: Vec<WarmupCandidate<f64>> = [2, 3, 4, 5]
        .iter()
        .map(|&w| WarmupCandidate { net: net(&[w; 4], w as u64), cfg: cfg.clone() })
        .collect();
    let report = warmup_select(&mut cands, &data, 1000).unwrap();
    assert_eq!(report.nfe.total(), 32_000);
    assert_eq!(report.candidates.len(), 4);
    let best = &report.candidates[report.selected];
    for c in &report.candidates {
        assert!(c.val_accuracy < best.val_accuracy
            || (c.val_accuracy == best.val_accuracy && (c.thetas[0] < best.thetas[0] || (c.thetas[0] == best.thetas[0] && c.index >= best.index))));
    }
}

#[test]
fn one_shot_loss_decreases_with_trainable_threshold() {
    let cfg = TrainConfig { batch_mode: BatchMode::OneShot, layer_iterations: 200, ..TrainConfig::default() };
    let (_, r) = run(&[8, 8], &cfg);
    for t in &r.traces {
        assert!(t.losses.last().unwrap() < t.losses.first().unwrap(), "layer {}", t.layer);
    }
}

#[test]
fn fixed_threshold_is_never_modified() {
    let cfg = TrainConfig { layer_iterations: 20, epochs: 2, theta_trainable: false, ..TrainConfig::default() };
    let (n, _) = run(&[6, 6], &cfg);
    assert!(n.layers.iter().all(|l| l.theta == 2.0));
}

#[test]
fn layers_train_in_isolation() {
    // layer 0 of a deeper net ends exactly as when trained alone
    let cfg = TrainConfig { layer_iterations: 30, epochs: 2, ..TrainConfig::default() };
    let (deep, _) = run(&[6, 5, 4], &cfg);
    let (alone, _) = run(&[6], &cfg);
    assert_eq!(deep.layers[0], alone.layers[0]);

    // frozen layers are untouched
    let (ds, emb) = tiny();
    let mut n = net(&[6, 5], 1);
    n.frozen[0] = true;
    let before = n.layers[0].clone();
    let data = TrainData { train: &ds, validation: None, embedder: &emb };
    let r = train_layerwise(&mut n, &data, &cfg).unwrap();
    assert_eq!(n.layers[0], before);
    assert_eq!(r.nfe.total(), 2 * 30 * 2);
}

#[test]
fn training_is_deterministic() {
    let mut cfg = TrainConfig { batch_mode: BatchMode::MiniBatch(4), layer_iterations: 25, epochs: 3, ..TrainConfig::default() };
    cfg.peer_norm_weight = 0.03;
    cfg.es_iterations.enabled = true;
    cfg.prune.ratio = 0.3;
    cfg.prune.retrain_iterations = 5;
    let a = run(&[6, 5], &cfg);
    let b = run(&[6, 5], &cfg);
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

/// Iteration at which checking stops on `trace` (checks before each step).
fn stop_iteration(trace: &[f64], patience: usize, c: usize) -> Option<usize> {
    (0..trace.len()).step_by(c).find(|&it| es_iterations_check(&trace[..=it], patience, 1e-4, c))
}

proptest! {
    #[test]
    fn es_iterations_stops_within_patience_of_plateau(onset in 0usize..300, patience in 1usize..8, c in 1usize..20) {
        let trace: Vec<f64> = (0..onset + patience * c + 2 * c + 1)
            .map(|i| if i < onset { 10.0 - 0.01 * i as f64 } else { 10.0 - 0.01 * onset as f64 })
            .collect();
        let stop = stop_iteration(&trace, patience, c).expect("plateau detected");
        // the first check that sees the plateau, then `patience` more checks
        let first_flat = onset.div_ceil(c) * c;
        prop_assert_eq!(stop, first_flat + patience * c);
        if onset % c == 0 {
            prop_assert!(stop - onset <= patience * c);
        }
    }

    #[test]
    fn es_layers_matches_its_definition(scores in prop::collection::vec(0.0f64..1.0, 1..8), delta in 0.0f64..0.1) {
        let keep = es_layers_check(&scores, delta);
        let ok = |d: usize| scores[d..].iter().all(|&s| s - scores[d - 1] < delta);
        let brute = (1..=scores.len()).find(|&d| ok(d)).unwrap();
        prop_assert_eq!(keep, brute);
    }
}

#[test]
fn es_layers_keeps_two_layers_on_a_saturated_profile() {
    assert_eq!(es_layers_check(&[0.5, 0.9, 0.9, 0.9], 1e-3), 2);
}

#[test]
fn es_iterations_stops_on_a_flat_validation_loss() {
    let mut cfg = TrainConfig { layer_iterations: 500, epochs: 1, dense_lr: 1e-300, ..TrainConfig::default() };
    cfg.es_iterations.enabled = true;
    let (_, r) = run(&[6, 6], &cfg);
    // the loss never moves: checks at 0, 10, …, 50 and the sixth one stops
    let expected = cfg.es_iterations.patience * cfg.es_iterations.check_every;
    assert_eq!(r.layer_iterations, vec![vec![expected], vec![expected]]);
    assert_eq!(r.nfe.total(), 2 * 2 * expected as u64);
}

#[test]
fn es_epochs_stops_after_patience_flat_epochs() {
    let mut cfg = TrainConfig { layer_iterations: 5, epochs: 10, dense_lr: 1e-300, ..TrainConfig::default() };
    cfg.es_epochs.enabled = true;
    let (_, r) = run(&[6, 6], &cfg);
    assert_eq!(r.layer_epochs, vec![3, 3]);
}

#[test]
fn es_layers_truncates_on_training_data() {
    let (ds, emb) = tiny();
    let mut n = net(&[6, 6, 6, 6], 1);
    let mut cfg = TrainConfig { layer_iterations: 5, epochs: 1, dense_lr: 1e-300, ..TrainConfig::default() };
    cfg.es_layers.enabled = true;
    let data = TrainData { train: &ds, validation: Some(&ds), embedder: &emb };
    let r = train_layerwise(&mut n, &data, &cfg).unwrap();
    assert_eq!(r.final_depth, es_layers_check(&r.depth_scores, 1e-3) + 1);
    assert_eq!(n.len(), r.final_depth);
    assert!(n.len() < 4);
}

#[test]
fn pruning_hits_the_ratio_and_masked_weights_stay_zero() {
    for ratio in [0.1, 0.37, 0.5, 0.9] {
        let mut cfg = TrainConfig { layer_iterations: 20, epochs: 1, ..TrainConfig::default() };
        cfg.prune.ratio = ratio;
        cfg.prune.retrain_iterations = 30;
        let (n, r) = run(&[7, 5], &cfg);
        for l in &n.layers {
            let w = l.weights.len() as f64;
            let masked = l.mask.data().iter().filter(|&&m| m == 0.0).count() as f64;
            assert!((masked / w - ratio).abs() <= 1.0 / w, "ratio {ratio}");
            for (&m, &v) in l.mask.data().iter().zip(l.weights.data()) {
                if m == 0.0 {
                    assert_eq!(v, 0.0);
                }
            }
        }
        assert_eq!(r.masked_fraction, n.masked_fraction());
    }
    let n = net(&[7, 5], 2);
    let p = prune(&n, 0.4).unwrap();
    assert_eq!(n.masked_fraction(), 0.0);
    assert!(p.count_parameters() < n.count_parameters());
}

#[test]
fn triplet_training_rejects_layer_early_stopping() {
    let mut cfg = TrainConfig { objective: Objective::Triplet { margin: 1.0 }, ..TrainConfig::default() };
    cfg.es_layers.enabled = true;
    let (ds, emb) = tiny();
    let mut n = net(&[4, 4], 0);
    let data = TrainData { train: &ds, validation: None, embedder: &emb };
    assert!(matches!(train_layerwise(&mut n, &data, &cfg), Err(Error::Config(_))));
}

#[test]
fn pretrained_encoder_supports_a_frozen_head() {
    // noise level at which the nearest-centroid oracle is already perfect
    let ds = synthetic(400, 4, 8, 0.3, 21).unwrap();
    let parts = split(&ds, &[0.5, 0.5], 3, true).unwrap();
    let (train, test) = (&parts[0], &parts[1]);
    let emb = LabelEmbedder::new(4, train.max_value());
    let mut enc = FFNetwork::<f64>::dense(64, &[32, 32], 0, &mut Rng::new(5)).unwrap();
    let cfg = TrainConfig {
        objective: Objective::Triplet { margin: 1.0 },
        batch_mode: BatchMode::FullBatch,
        layer_iterations: 100,
        epochs: 1,
        ..TrainConfig::default()
    };
    let data = TrainData { train, validation: None, embedder: &emb };
    pretrain_encoder(&mut enc, &data, &cfg).unwrap();
    assert!(enc.all_frozen());
    let frozen = enc.clone();

    let features = encoder_features(&enc, &train.images, None).unwrap();
    let mut head = Head::new(HeadTask::Classification, features.shape()[1], 4, &mut Rng::new(6));
    let hc = HeadConfig { iterations: 300, ..HeadConfig::default() };
    let r = train_head(&enc, &mut head, &train.images, HeadTarget::Labels(train.labels.as_ref().unwrap()), None, &hc).unwrap();
    assert_eq!(r.nfe.total(), 600);
    assert_eq!(enc, frozen);

    let pred = head.predict(&encoder_features(&enc, &test.images, None).unwrap()).unwrap();
    let acc = accuracy(&pred, test.labels.as_ref().unwrap()).unwrap();
    assert!(acc >= 0.9, "head accuracy {acc}");

    let mut rec = Head::new(HeadTask::Reconstruction, features.shape()[1], 64, &mut Rng::new(7));
    let flat = train.images.clone().reshape(&[train.len(), 64]).unwrap();
    let r = train_head(&enc, &mut rec, &train.images, HeadTarget::Values(&flat), None, &hc).unwrap();
    // beats predicting every pixel's mean
    let n = train.len() as f64;
    let mean_mse: f64 = (0..64)
        .map(|j| {
            let col: Vec<f64> = flat.samples().map(|s| s[j]).collect();
            let m = col.iter().sum::<f64>() / n;
            col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
        })
        .sum::<f64>()
        / 64.0;
    let last = *r.losses.last().unwrap();
    assert!(last < r.losses[0] && last < mean_mse, "{last} vs mean predictor {mean_mse}");
}

#[test]
fn heads_need_a_frozen_encoder() {
    let (ds, _) = tiny();
    let enc = net(&[4, 4], 0);
    let mut head = Head::new(HeadTask::Classification, 4, 4, &mut Rng::new(0));
    let r = train_head(&enc, &mut head, &ds.images, HeadTarget::Labels(ds.labels.as_ref().unwrap()), None, &HeadConfig::default());
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn conv_networks_train() {
    let ds = synthetic(16, 4, 9, 0.1, 1).unwrap();
    let emb = LabelEmbedder::new(4, ds.max_value());
    let mut n = FFNetwork::<f64>::convolutional(&[1, 9, 9], &[3, 3], 3, &[1, 2], vec![], 4, &mut Rng::new(0)).unwrap();
    assert!(matches!(n.layers[1].kind, LayerKind::Conv { stride: 2, padding: 1 }));
    let cfg = TrainConfig { batch_mode: BatchMode::OneShot, layer_iterations: 30, ..TrainConfig::default() };
    let data = TrainData { train: &ds, validation: None, embedder: &emb };
    let r = train_layerwise(&mut n, &data, &cfg).unwrap();
    assert_eq!(r.nfe.total(), 120);
    assert!(n.layers.iter().all(|l| l.adam.lr == cfg.conv_lr));
}
