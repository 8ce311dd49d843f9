//! Goodness inference re-scored by brute force.

use saff_core::ffnet::{classify_by_goodness, goodness, FFNetwork, LayerKind};
use saff_core::sampling::LabelEmbedder;
use saff_core::{Rng, Tensor};

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Naive dense forward through every layer, normalizing between layers.
pub fn naive_scores(net: &FFNetwork<f64>, x: &[f64]) -> f64 {
    let mut input = x.to_vec();
    let mut score = 0.0;
    for (li, layer) in net.layers.iter().enumerate() {
        assert_eq!(layer.kind, LayerKind::Dense);
        let (fan_in, out) = (layer.weights.shape()[0], layer.weights.shape()[1]);
        let y: Vec<f64> = (0..out)
            .map(|j| {
                let z: f64 = layer.bias.data()[j] + (0..fan_in).map(|i| input[i] * layer.weights.data()[i * out + j]).sum::<f64>();
                z.max(0.0)
            })
            .collect();
        let s: f64 = y.iter().map(|v| v * v).sum();
        if li > 0 {
            score += s - layer.theta;
        }
        let n = s.sqrt() + 1e-8;
        input = y.iter().map(|v| v / n).collect();
    }
    score
}

pub fn materialize(x: &Tensor<f64>, emb: &LabelEmbedder) -> Tensor<f64> {
    // every sample repeated once per candidate label, label-major
    let mut data = Vec::new();
    for label in 0..emb.n_classes {
        for s in x.samples() {
            let mut s = s.to_vec();
            for (c, &pos) in emb.slot_positions.iter().enumerate() {
                s[pos] = if c == label { emb.max_intensity } else { 0.0 };
            }
            data.extend(s);
        }
    }
    Tensor::new(&[emb.n_classes * x.batch(), x.sample_len()], data).unwrap()
}

/// Builds a random dense network and compares `classify_by_goodness` with
/// (a) every label copy pushed through the network as one batch (exact),
/// (b) a naive per-sample forward (1e-10), and (c) checks that the first
/// layer's threshold never enters the score.
pub fn check_classification(seed: u64, depth: usize, n: usize, batch: usize) -> Result<(), String> {
    let mut rng = Rng::new(seed);
    let input = 12;
    let widths: Vec<usize> = (0..depth).map(|_| 3 + rng.below(6)).collect();
    let mut net = FFNetwork::<f64>::dense(input, &widths, n, &mut rng).unwrap();
    for l in &mut net.layers {
        l.theta = rng.normal();
        l.bias = random(&[l.units()], &mut rng).map(|v| 0.1 * v);
    }
    let x = random(&[batch, input], &mut rng);
    let emb = LabelEmbedder::new(n, 1.0 + rng.uniform());
    let got = classify_by_goodness(&net, &x, &emb).map_err(|e| e.to_string())?;

    let big = materialize(&x, &emb);
    let outputs = net.forward(&big).unwrap();
    let mut brute = vec![0.0; n * batch];
    for (layer, out) in net.layers.iter().zip(&outputs).skip(1) {
        for (b, g) in brute.iter_mut().zip(goodness(&out.pre_norm, layer.theta)) {
            *b += g;
        }
    }
    for i in 0..batch {
        let row: Vec<f64> = (0..n).map(|l| brute[l * batch + i]).collect();
        if got.scores.sample(i) != &row[..] {
            return Err(format!("sample {i}: scores {:?} != brute force {row:?}", got.scores.sample(i)));
        }
        let best = (0..n).fold(0, |b, l| if row[l] > row[b] { l } else { b });
        if got.predictions[i] != best {
            return Err(format!("sample {i}: predicted {} != {best}", got.predictions[i]));
        }
        for (l, &v) in row.iter().enumerate() {
            let naive = naive_scores(&net, big.sample(l * batch + i));
            if (v - naive).abs() > 1e-10 * (1.0 + v.abs()) {
                return Err(format!("sample {i} label {l}: {v} vs naive {naive}"));
            }
        }
    }
    net.layers[0].theta += 17.0;
    if classify_by_goodness(&net, &x, &emb).unwrap().scores != got.scores {
        return Err("first layer's threshold changed the scores".into());
    }
    Ok(())
}
