//! Dense tensor kernels: matrix products, 2-D convolution, ReLU and per-sample
//! L2 normalization.

mod gemm;
mod rng;
mod tensor;

use std::sync::OnceLock;

pub use rng::Rng;
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use gemm::{gemm, Lhs};

/// Added to every norm before dividing by it.
pub const NORM_EPS: f64 = 1e-8;

/// Worker threads for batch-parallel kernels: `SAFF_THREADS` if set to a
/// positive integer, otherwise the machine's available parallelism.
pub fn worker_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("SAFF_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            })
    })
}

/// `[B, M] × [M, N] → [B, N]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || w.rank() != 2 || a.shape()[1] != w.shape()[0] {
        return Err(Error::dim("matmul", a.shape(), w.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], w.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, Lhs::row_major(a.data(), k), w.data(), &mut out, false);
    Tensor::new(&[m, n], out)
}

/// `aᵀ · b` for `a: [K, M]`, `b: [K, N]` → `[M, N]`, reduced over `K` in order.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::dim("matmul_tn", a.shape(), b.shape()));
    }
    let (k, m, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, Lhs::transposed(a.data(), m), b.data(), &mut out, false);
    Tensor::new(&[m, n], out)
}

/// Output geometry of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {kernel}")));
        }
        if stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        let out = |size: usize, axis: &str| -> Result<usize> {
            let span = size + 2 * padding;
            if span < kernel || (span - kernel) % stride != 0 {
                return Err(Error::Config(format!(
                    "non-integral {axis} output: ({size} + 2*{padding} - {kernel}) / {stride}"
                )));
            }
            Ok((span - kernel) / stride + 1)
        };
        Ok(Self {
            in_channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_height: out(height, "height")?,
            out_width: out(width, "width")?,
        })
    }

    /// Output positions per sample.
    pub fn positions(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Length of one unrolled receptive field (`Cin·K·K`).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    if x.rank() != 4 || k.rank() != 4 || x.shape()[1] != k.shape()[1] || k.shape()[2] != k.shape()[3]
    {
        return Err(Error::dim("conv2d", x.shape(), k.shape()));
    }
    ConvGeometry::new(x.shape()[1], x.shape()[2], x.shape()[3], k.shape()[2], stride, padding)
}

/// Unrolls samples `b0..b1` of `x` into rows of receptive fields:
/// row `(b - b0)·P + p` holds the `(ci, kh, kw)` patch of output position `p`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, b0: usize, b1: usize, cols: &mut Vec<T>) {
    let (h, w, kk) = (g.height, g.width, g.kernel);
    let q = g.patch_len();
    let plane = h * w;
    let sample = g.in_channels * plane;
    cols.clear();
    cols.resize((b1 - b0) * g.positions() * q, T::zero());
    let mut row = 0;
    for b in b0..b1 {
        let xs = &x[b * sample..(b + 1) * sample];
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let dst = &mut cols[row * q..(row + 1) * q];
                let mut idx = 0;
                for ci in 0..g.in_channels {
                    let xc = &xs[ci * plane..(ci + 1) * plane];
                    for ky in 0..kk {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        for kx in 0..kk {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                dst[idx] = xc[iy as usize * w + ix as usize];
                            }
                            idx += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Samples per im2col chunk, bounding the unrolled buffer to about 4M scalars.
fn chunk_samples(g: &ConvGeometry) -> usize {
    (4 << 20) / (g.positions() * g.patch_len()).max(1)
}

/// Cross-correlation with zero padding plus per-channel bias.
///
/// `x: [B, Cin, H, W]`, `k: [Cout, Cin, K, K]`, `b: [Cout]` →
/// `[B, Cout, H', W']` with `H' = (H + 2·padding − K)/stride + 1`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x, k, stride, padding)?;
    let cout = k.shape()[0];
    if b.len() != cout {
        return Err(Error::dim("conv2d bias", b.shape(), &[cout]));
    }
    let batch = x.batch();
    let (p, q) = (g.positions(), g.patch_len());
    // kernel as [Q, Cout] so the product yields one row per output position
    let kt = Tensor::new(&[cout, q], k.data().to_vec())?.transpose()?;
    let mut out = vec![T::zero(); batch * cout * p];
    let mut cols = Vec::new();
    let mut rows = Vec::new();
    let step = chunk_samples(&g).max(1);
    for b0 in (0..batch).step_by(step) {
        let b1 = (b0 + step).min(batch);
        im2col(x.data(), &g, b0, b1, &mut cols);
        let m = (b1 - b0) * p;
        rows.clear();
        rows.resize(m * cout, T::zero());
        gemm(m, q, cout, Lhs::row_major(&cols, q), kt.data(), &mut rows, false);
        for bi in 0..(b1 - b0) {
            let dst = &mut out[(b0 + bi) * cout * p..][..cout * p];
            for pos in 0..p {
                let src = &rows[(bi * p + pos) * cout..][..cout];
                for (co, &v) in src.iter().enumerate() {
                    dst[co * p + pos] = v + b.data()[co];
                }
            }
        }
    }
    Tensor::new(&[batch, cout, g.out_height, g.out_width], out)
}

/// Gradients of a convolution with respect to its kernel and bias, given the
/// upstream gradient `dy: [B, Cout, H', W']`. Reductions run over samples
/// then positions in ascending order.
pub fn conv2d_param_grads<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    kernel_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let cout = kernel_shape[0];
    let probe = Tensor::<T>::zeros(kernel_shape);
    let g = conv_geometry(x, &probe, stride, padding)?;
    let batch = x.batch();
    let (p, q) = (g.positions(), g.patch_len());
    if dy.shape() != [batch, cout, g.out_height, g.out_width] {
        return Err(Error::dim(
            "conv2d_param_grads",
            dy.shape(),
            &[batch, cout, g.out_height, g.out_width],
        ));
    }
    let mut dkt = vec![T::zero(); q * cout];
    let mut db = vec![T::zero(); cout];
    let mut cols = Vec::new();
    let mut dy_rows = Vec::new();
    let step = chunk_samples(&g).max(1);
    for b0 in (0..batch).step_by(step) {
        let b1 = (b0 + step).min(batch);
        im2col(x.data(), &g, b0, b1, &mut cols);
        let m = (b1 - b0) * p;
        dy_rows.clear();
        dy_rows.resize(m * cout, T::zero());
        for bi in 0..(b1 - b0) {
            let src = dy.sample(b0 + bi);
            for co in 0..cout {
                for pos in 0..p {
                    dy_rows[(bi * p + pos) * cout + co] = src[co * p + pos];
                }
            }
        }
        for row in dy_rows.chunks_exact(cout) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        gemm(q, m, cout, Lhs::transposed(&cols, q), &dy_rows, &mut dkt, true);
    }
    let dk = Tensor::new(&[q, cout], dkt)?.transpose()?.reshape(kernel_shape)?;
    Ok((dk, Tensor::new(&[cout], db)?))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Per-sample Euclidean norms over all non-batch axes.
pub fn sample_norms<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    x.samples()
        .map(|s| s.iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect()
}

/// Divides every sample by `(‖sample‖₂ + eps)`; conv samples use one norm over
/// the whole `C×H×W` map.
pub fn l2_normalize<T: Scalar>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    let norms = sample_norms(x);
    let mut out = x.clone();
    let n = x.sample_len();
    for (s, norm) in out.data_mut().chunks_exact_mut(n).zip(norms) {
        let d = norm + eps;
        for v in s {
            *v /= d;
        }
    }
    out
}
