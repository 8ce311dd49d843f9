//! Central finite differences (h = 1e-5, f64) of independent, naive
//! re-implementations of each objective.

use saff_core::ffnet::{FFLayer, LayerKind};
use saff_core::numerics::{Rng, Tensor, NORM_EPS};
use saff_core::training::loss::PeerNorm;
use saff_core::training::{triplet_layer_gradient, Head, HeadTarget, HeadTask};

/// Relative errors of one case's gradient blocks, the gap between the
/// analytic and naive loss, and whether the objective was active at all.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub weights: f64,
    pub bias: f64,
    pub theta: f64,
    pub loss_gap: f64,
    pub active: bool,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.weights.max(self.bias).max(self.theta)
    }

    pub fn passes(&self) -> bool {
        self.worst() <= TOL && self.loss_gap < 1e-10
    }
}

pub const H: f64 = 1e-5;
/// Relative-error tolerance of every gradient block.
pub const TOL: f64 = 1e-4;

pub fn random(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// ‖a − n‖ / max(‖a‖, ‖n‖): vector relative error of a gradient block.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        return norm(&diff);
    }
    norm(&diff) / scale
}

fn central(mut f: impl FnMut(f64) -> f64, x0: f64) -> f64 {
    (f(x0 + H) - f(x0 - H)) / (2.0 * H)
}

/// Naive pre-activation: dense `x·W + b` or a direct convolution.
fn naive_pre(kind: LayerKind, w: &Tensor<f64>, b: &[f64], x: &Tensor<f64>) -> Vec<Vec<f64>> {
    match kind {
        LayerKind::Dense => {
            let (inp, out) = (w.shape()[0], w.shape()[1]);
            x.samples()
                .map(|s| {
                    (0..out)
                        .map(|j| b[j] + (0..inp).map(|i| s[i] * w.data()[i * out + j]).sum::<f64>())
                        .collect()
                })
                .collect()
        }
        LayerKind::Conv { stride, padding } => {
            let [cout, cin, k, _] = [0, 1, 2, 3].map(|i| w.shape()[i]);
            let (h, wd) = (x.shape()[2], x.shape()[3]);
            let oh = (h + 2 * padding - k) / stride + 1;
            let ow = (wd + 2 * padding - k) / stride + 1;
            x.samples()
                .map(|s| {
                    let mut out = vec![0.0; cout * oh * ow];
                    for o in 0..cout {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let mut acc = b[o];
                                for c in 0..cin {
                                    for dy in 0..k {
                                        for dx in 0..k {
                                            let iy = (y * stride + dy) as isize - padding as isize;
                                            let ix = (xx * stride + dx) as isize - padding as isize;
                                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                                continue;
                                            }
                                            acc += w.data()[((o * cin + c) * k + dy) * k + dx]
                                                * s[(c * h + iy as usize) * wd + ix as usize];
                                        }
                                    }
                                }
                                out[(o * oh + y) * ow + xx] = acc;
                            }
                        }
                    }
                    out
                })
                .collect()
        }
    }
}

fn relu_rows(rows: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    rows.into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect()
}

/// Contrastive loss plus optional peer term, all computed naively.
fn naive_ff_loss(
    kind: LayerKind,
    w: &Tensor<f64>,
    b: &[f64],
    theta: f64,
    xp: &Tensor<f64>,
    xn: &Tensor<f64>,
    peer: Option<(&[f64], f64, f64)>,
) -> f64 {
    let yp = relu_rows(naive_pre(kind, w, b, xp));
    let yn = relu_rows(naive_pre(kind, w, b, xn));
    let g = |y: &Vec<f64>| y.iter().map(|v| v * v).sum::<f64>() - theta;
    let batch = yp.len() as f64;
    let mut loss = (yp.iter().map(|y| softplus(-g(y))).sum::<f64>()
        + yn.iter().map(|y| softplus(g(y))).sum::<f64>())
        / (2.0 * batch);
    if let Some((rm, momentum, weight)) = peer {
        let units = rm.len();
        let spatial = yp[0].len() / units;
        let mut mean = vec![0.0; units];
        for y in &yp {
            for u in 0..units {
                mean[u] += y[u * spatial..(u + 1) * spatial].iter().sum::<f64>();
            }
        }
        let new: Vec<f64> = (0..units)
            .map(|u| momentum * rm[u] + (1.0 - momentum) * mean[u] / (batch * spatial as f64))
            .collect();
        let centre = new.iter().sum::<f64>() / units as f64;
        loss += weight * new.iter().map(|r| (r - centre).powi(2)).sum::<f64>() / units as f64;
    }
    loss
}

pub struct Case {
    pub layer: FFLayer<f64>,
    pub xp: Tensor<f64>,
    pub xn: Tensor<f64>,
}

pub fn dense_case(seed: u64) -> Case {
    let mut rng = Rng::new(seed);
    let (b, i, o) = (2 + rng.below(4), 2 + rng.below(6), 2 + rng.below(6));
    let mut layer = FFLayer::dense(i, o, &mut rng).with_theta(0.5 + rng.uniform(), true);
    layer.bias = random(&[o], 0.3, &mut rng);
    Case {
        layer,
        xp: random(&[b, i], 1.0, &mut rng),
        xn: random(&[b, i], 1.0, &mut rng),
    }
}

pub fn conv_case(seed: u64) -> Case {
    let mut rng = Rng::new(seed);
    let stride = 1 + rng.below(2);
    let padding = rng.below(2);
    let k = 3;
    let (cin, cout, b) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
    // side with an integral output size
    let side = 2 * stride + k - 2 * padding + stride * rng.below(2);
    let mut layer = FFLayer::conv(cin, cout, k, stride, padding, &mut rng)
        .unwrap()
        .with_theta(1.0 + rng.uniform(), true);
    layer.bias = random(&[cout], 0.3, &mut rng);
    Case {
        layer,
        xp: random(&[b, cin, side, side], 1.0, &mut rng),
        xn: random(&[b, cin, side, side], 1.0, &mut rng),
    }
}

/// Checks every weight, bias and θ gradient of one case; returns the worst
/// block error.
pub fn check_ff_case(case: &Case, peer: Option<(&[f64], f64, f64)>) -> GradCheck {
    let l = &case.layer;
    let peer_arg = peer.map(|(rm, m, w)| PeerNorm {
        running_mean: rm,
        momentum: m,
        weight: w,
    });
    let (grad, _) = l.local_gradient(&case.xp, &case.xn, peer_arg).unwrap();
    let loss_at = |w: &Tensor<f64>, b: &[f64], t: f64| naive_ff_loss(l.kind, w, b, t, &case.xp, &case.xn, peer);
    let loss_gap = (grad.loss - loss_at(&l.weights, l.bias.data(), l.theta)).abs();

    let num_w: Vec<f64> = (0..l.weights.len())
        .map(|i| {
            central(
                |v| {
                    let mut w = l.weights.clone();
                    w.data_mut()[i] = v;
                    loss_at(&w, l.bias.data(), l.theta)
                },
                l.weights.data()[i],
            )
        })
        .collect();
    let num_b: Vec<f64> = (0..l.bias.len())
        .map(|i| {
            central(
                |v| {
                    let mut b = l.bias.data().to_vec();
                    b[i] = v;
                    loss_at(&l.weights, &b, l.theta)
                },
                l.bias.data()[i],
            )
        })
        .collect();
    let num_t = central(|t| loss_at(&l.weights, l.bias.data(), t), l.theta);
    GradCheck {
        weights: rel_err(grad.weights.data(), &num_w),
        bias: rel_err(grad.bias.data(), &num_b),
        theta: rel_err(&[grad.theta], &[num_t]),
        loss_gap,
        active: true,
    }
}


pub fn naive_triplet_loss(layer: &FFLayer<f64>, w: &Tensor<f64>, b: &[f64], xs: [&Tensor<f64>; 3], margin: f64) -> f64 {
    let f: Vec<Vec<Vec<f64>>> = xs
        .iter()
        .map(|x| {
            relu_rows(naive_pre(layer.kind, w, b, x))
                .into_iter()
                .map(|r| {
                    let n = r.iter().map(|v| v * v).sum::<f64>().sqrt() + NORM_EPS;
                    r.into_iter().map(|v| v / n).collect()
                })
                .collect()
        })
        .collect();
    let dist = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let batch = f[0].len();
    (0..batch)
        .map(|i| (dist(&f[0][i], &f[1][i]) - dist(&f[0][i], &f[2][i]) + margin).max(0.0))
        .sum::<f64>()
        / batch as f64
}


pub fn naive_head_loss(task: HeadTask, w: &Tensor<f64>, b: &[f64], f: &Tensor<f64>, labels: &[usize], target: &Tensor<f64>) -> f64 {
    let k = w.shape()[1];
    let z: Vec<Vec<f64>> = f
        .samples()
        .map(|s| {
            (0..k)
                .map(|j| b[j] + s.iter().enumerate().map(|(i, v)| v * w.data()[i * k + j]).sum::<f64>())
                .collect()
        })
        .collect();
    let batch = z.len() as f64;
    match task {
        HeadTask::Classification => {
            z.iter()
                .zip(labels)
                .map(|(row, &l)| row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[l])
                .sum::<f64>()
                / batch
        }
        HeadTask::Reconstruction => {
            z.iter()
                .flatten()
                .zip(target.data())
                .map(|(a, t)| (a - t).powi(2))
                .sum::<f64>()
                / (batch * k as f64)
        }
    }
}


fn numeric_grad(values: &[f64], mut loss_with: impl FnMut(usize, f64) -> f64) -> Vec<f64> {
    (0..values.len()).map(|i| central(|v| loss_with(i, v), values[i])).collect()
}

pub fn dense_check(seed: u64) -> GradCheck {
    check_ff_case(&dense_case(seed), None)
}

pub fn conv_check(seed: u64) -> GradCheck {
    check_ff_case(&conv_case(seed), None)
}

/// Contrastive loss plus the peer term, alternating dense and conv layers.
pub fn peer_check(seed: u64) -> GradCheck {
    let case = if seed % 2 == 0 { dense_case(seed) } else { conv_case(seed) };
    let mut rng = Rng::new(seed ^ 0x5eed);
    let rm: Vec<f64> = (0..case.layer.units()).map(|_| rng.uniform()).collect();
    check_ff_case(&case, Some((&rm, 0.9, 0.5 + rng.uniform())))
}

/// `active` is false when every hinge is flat and the gradient trivially 0.
pub fn triplet_check(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let (b, i, o) = (2 + rng.below(4), 2 + rng.below(6), 3 + rng.below(6));
    let mut layer = FFLayer::dense(i, o, &mut rng);
    layer.bias = random(&[o], 0.5, &mut rng).map(|v| v.abs() + 0.1);
    let xs: Vec<Tensor<f64>> = (0..3).map(|_| random(&[b, i], 1.0, &mut rng)).collect();
    let margin = 0.5 + rng.uniform();
    let grad = triplet_layer_gradient(&layer, &xs[0], &xs[1], &xs[2], margin).unwrap();
    let loss_at = |w: &Tensor<f64>, bias: &[f64]| naive_triplet_loss(&layer, w, bias, [&xs[0], &xs[1], &xs[2]], margin);
    let num_w = numeric_grad(layer.weights.data(), |k, v| {
        let mut w = layer.weights.clone();
        w.data_mut()[k] = v;
        loss_at(&w, layer.bias.data())
    });
    let num_b = numeric_grad(layer.bias.data(), |k, v| {
        let mut bias = layer.bias.data().to_vec();
        bias[k] = v;
        loss_at(&layer.weights, &bias)
    });
    GradCheck {
        weights: rel_err(grad.weights.data(), &num_w),
        bias: rel_err(grad.bias.data(), &num_b),
        // the triplet objective has no threshold
        theta: grad.theta.abs(),
        loss_gap: (grad.loss - loss_at(&layer.weights, layer.bias.data())).abs(),
        active: grad.loss > 0.0,
    }
}

/// Softmax cross-entropy on even seeds, mean squared error on odd ones.
pub fn head_check(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let task = if seed % 2 == 0 {
        HeadTask::Classification
    } else {
        HeadTask::Reconstruction
    };
    let (b, fdim, k) = (2 + rng.below(5), 2 + rng.below(6), 2 + rng.below(4));
    let mut head = Head::new(task, fdim, k, &mut rng);
    head.bias = random(&[k], 0.3, &mut rng);
    let f = random(&[b, fdim], 1.0, &mut rng);
    let labels: Vec<usize> = (0..b).map(|_| rng.below(k)).collect();
    let target = random(&[b, k], 1.0, &mut rng);
    let t = match task {
        HeadTask::Classification => HeadTarget::Labels(&labels),
        HeadTask::Reconstruction => HeadTarget::Values(&target),
    };
    let (loss, dw, db) = head.loss_grad(&f, t).unwrap();
    let loss_at = |w: &Tensor<f64>, bias: &[f64]| naive_head_loss(task, w, bias, &f, &labels, &target);
    let num_w = numeric_grad(head.weights.data(), |i, v| {
        let mut w = head.weights.clone();
        w.data_mut()[i] = v;
        loss_at(&w, head.bias.data())
    });
    let num_b = numeric_grad(head.bias.data(), |i, v| {
        let mut bias = head.bias.data().to_vec();
        bias[i] = v;
        loss_at(&head.weights, &bias)
    });
    GradCheck {
        weights: rel_err(dw.data(), &num_w),
        bias: rel_err(db.data(), &num_b),
        theta: 0.0,
        loss_gap: (loss - loss_at(&head.weights, head.bias.data())).abs(),
        active: true,
    }
}
