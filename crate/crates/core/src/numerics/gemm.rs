//! Blocked matrix product with a fixed per-element summation order.
//!
//! Every output element is reduced over `k` in ascending order starting from
//! zero (or from the existing value when accumulating) with one fused
//! multiply-add per term, exactly like a naive triple loop using `mul_add`.
//! Fused multiply-add is correctly rounded everywhere, so results are
//! reproducible bit-for-bit and do not depend on the tiling, the instruction
//! set picked at runtime, or the thread count.
//! Threads split the output rows, never the reduction axis.

use crate::scalar::Scalar;

const MR: usize = 8;
const NR: usize = 16;
const ROW_BLOCK: usize = 64;
const K_BLOCK: usize = 256;

/// Strided read-only view of the left operand: element `(i, k)` lives at
/// `data[i * row_stride + k * col_stride]`.
#[derive(Clone, Copy)]
pub(crate) struct Lhs<'a, T> {
    pub data: &'a [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> Lhs<'a, T> {
    pub fn row_major(data: &'a [T], k: usize) -> Self {
        Self {
            data,
            row_stride: k,
            col_stride: 1,
        }
    }

    /// View of `data` (stored row-major as `[k, m]`) as its transpose `[m, k]`.
    pub fn transposed(data: &'a [T], m: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: m,
        }
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`, or `c += a · b` when `accumulate` is set.
/// `b` and `c` are dense row-major.
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: Lhs<'_, T>,
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let threads = super::worker_threads().min(m.div_ceil(ROW_BLOCK)).max(1);
    if threads == 1 || m * k * n < 1 << 20 {
        gemm_rows(0, m, k, n, a, b, c, accumulate);
        return;
    }
    let rows_per = m.div_ceil(threads).next_multiple_of(MR);
    std::thread::scope(|s| {
        for (t, chunk) in c.chunks_mut(rows_per * n).enumerate() {
            let rows = chunk.len() / n;
            s.spawn(move || gemm_rows(t * rows_per, rows, k, n, a, b, chunk, accumulate));
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn gemm_rows<T: Scalar>(
    row0: usize,
    rows: usize,
    k: usize,
    n: usize,
    a: Lhs<'_, T>,
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemm_rows_avx512(row0, rows, k, n, a, b, c, accumulate) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemm_rows_avx2(row0, rows, k, n, a, b, c, accumulate) };
            return;
        }
    }
    gemm_rows_impl(row0, rows, k, n, a, b, c, accumulate)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_rows_avx512<T: Scalar>(
    row0: usize,
    rows: usize,
    k: usize,
    n: usize,
    a: Lhs<'_, T>,
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    gemm_rows_impl(row0, rows, k, n, a, b, c, accumulate)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_rows_avx2<T: Scalar>(
    row0: usize,
    rows: usize,
    k: usize,
    n: usize,
    a: Lhs<'_, T>,
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    gemm_rows_impl(row0, rows, k, n, a, b, c, accumulate)
}

/// Computes output rows `row0..row0 + rows`; `c` holds exactly those rows.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_rows_impl<T: Scalar>(
    row0: usize,
    rows: usize,
    k: usize,
    n: usize,
    a: Lhs<'_, T>,
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    let col_panels = n.div_ceil(NR);
    let mut packed = vec![T::zero(); ROW_BLOCK * K_BLOCK];
    let mut packed_b = vec![T::zero(); K_BLOCK * col_panels * NR];
    // k-blocks resume from the partial sums stored in `c`, which keeps the
    // per-element reduction order identical to an unblocked loop
    for kb in (0..k).step_by(K_BLOCK) {
        let ks = kb..(kb + K_BLOCK).min(k);
        let kc = ks.len();
        let acc_in = accumulate || kb > 0;
        // micro-panel p holds columns p·NR.. as [kc][NR], zero-padded
        for (p, panel) in packed_b[..kc * col_panels * NR].chunks_exact_mut(kc * NR).enumerate() {
            let width = NR.min(n - p * NR);
            for (kk, dst) in ks.clone().zip(panel.chunks_exact_mut(NR)) {
                dst[..width].copy_from_slice(&b[kk * n + p * NR..][..width]);
                dst[width..].fill(T::zero());
            }
        }
        for ib in (0..rows).step_by(ROW_BLOCK) {
            let block_rows = ROW_BLOCK.min(rows - ib);
            let groups = block_rows.div_ceil(MR);
            // panel g holds rows ib + g·MR.. as [kc][MR], zero-padded
            for g in 0..groups {
                let panel = &mut packed[g * kc * MR..(g + 1) * kc * MR];
                let height = MR.min(block_rows - g * MR);
                for (kk, dst) in ks.clone().zip(panel.chunks_exact_mut(MR)) {
                    for (r, d) in dst.iter_mut().enumerate() {
                        *d = if r < height {
                            a.data[(row0 + ib + g * MR + r) * a.row_stride + kk * a.col_stride]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
            for p in 0..col_panels {
                let b_panel = &packed_b[p * kc * NR..(p + 1) * kc * NR];
                let extent = Extent {
                    rows: MR,
                    cols: NR.min(n - p * NR),
                };
                for g in 0..groups {
                    let panel = &packed[g * kc * MR..(g + 1) * kc * MR];
                    let extent = Extent {
                        rows: MR.min(block_rows - g * MR),
                        ..extent
                    };
                    tile::<T>(panel, b_panel, ib + g * MR, p * NR, n, c, acc_in, extent);
                }
            }
        }
    }
    if k == 0 && !accumulate {
        c.fill(T::zero());
    }
}

/// Valid part of a micro-tile at the matrix border.
#[derive(Clone, Copy)]
struct Extent {
    rows: usize,
    cols: usize,
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tile<T: Scalar>(
    panel: &[T],
    b_panel: &[T],
    c_row: usize,
    j0: usize,
    n: usize,
    c: &mut [T],
    accumulate: bool,
    extent: Extent,
) {
    let mut acc = [[T::zero(); NR]; MR];
    if accumulate {
        for (r, row) in acc.iter_mut().enumerate().take(extent.rows) {
            row[..extent.cols].copy_from_slice(&c[(c_row + r) * n + j0..][..extent.cols]);
        }
    }
    let [mut r0, mut r1, mut r2, mut r3, mut r4, mut r5, mut r6, mut r7] = acc;
    for (av, bv) in panel.chunks_exact(MR).zip(b_panel.chunks_exact(NR)) {
        let bv: &[T; NR] = bv.try_into().unwrap();
        let av: &[T; MR] = av.try_into().unwrap();
        axpy(&mut r0, av[0], bv);
        axpy(&mut r1, av[1], bv);
        axpy(&mut r2, av[2], bv);
        axpy(&mut r3, av[3], bv);
        axpy(&mut r4, av[4], bv);
        axpy(&mut r5, av[5], bv);
        axpy(&mut r6, av[6], bv);
        axpy(&mut r7, av[7], bv);
    }
    let rows = [r0, r1, r2, r3, r4, r5, r6, r7];
    for (r, row) in rows.iter().enumerate().take(extent.rows) {
        c[(c_row + r) * n + j0..][..extent.cols].copy_from_slice(&row[..extent.cols]);
    }
}

#[inline(always)]
fn axpy<T: Scalar>(acc: &mut [T; NR], a: T, b: &[T; NR]) {
    for j in 0..NR {
        acc[j] = a.mul_add(b[j], acc[j]);
    }
}

