//! Inner-loop kernels shared by the pure ops and the tape.
//!
//! Each kernel has a sequential body; `matmul` and `conv2d` dispatch to a
//! rayon variant over output rows/channels when the `parallel` feature is on
//! and the problem is large enough. Every output element is produced by a
//! single sequential accumulation either way, keeping results bit-identical
//! across thread counts.

use crate::parallel::for_each_chunk_mut;

/// Work threshold (multiply-adds) below which parallel dispatch is skipped.
const PAR_MIN_FLOPS: usize = 1 << 16;

pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (i, row) in out.chunks_mut(n).enumerate() {
        matmul_row(a, b, k, n, i, row);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    use rayon::prelude::*;
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| matmul_row(a, b, k, n, i, row));
    out
}

/// `a[m x k] * b[k x n]`, row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        if m * k * n >= PAR_MIN_FLOPS && m > 1 {
            return matmul_par(a, b, m, k, n);
        }
    }
    matmul_seq(a, b, m, k, n)
}

#[inline]
fn matmul_row(a: &[f64], b: &[f64], k: usize, n: usize, i: usize, row: &mut [f64]) {
    let a_row = &a[i * k..(i + 1) * k];
    for (p, &av) in a_row.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in row.iter_mut().zip(b_row.iter()) {
            *o += av * bv;
        }
    }
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Output spatial size of a convolution: `floor((size + 2*pad - k)/stride) + 1`.
pub fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Cross-correlation of `x[c_in x h x w]` with `kernels[c_out x c_in x kh x kw]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    kernels: &[f64],
    bias: Option<&[f64]>,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = conv_out_dim(h, kh, stride, pad).expect("checked by caller");
    let ow = conv_out_dim(w, kw, stride, pad).expect("checked by caller");
    let mut out = vec![0.0; c_out * oh * ow];
    let flops = c_out * c_in * oh * ow * kh * kw;
    let min_chunks = if flops >= PAR_MIN_FLOPS { 2 } else { usize::MAX };
    for_each_chunk_mut(&mut out, oh * ow, min_chunks, |co, plane| {
        let b = bias.map_or(0.0, |b| b[co]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for ci in 0..c_in {
                    let xplane = &x[ci * h * w..(ci + 1) * h * w];
                    let kplane = &kernels[(co * c_in + ci) * kh * kw..(co * c_in + ci + 1) * kh * kw];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += xplane[iy as usize * w + ix as usize] * kplane[ky * kw + kx];
                        }
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
    });
    out
}

/// `log(exp(a) + exp(b))` with max-subtraction; `-inf` absorbing.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Stable `log(sum(exp(xs)))`; `-inf` entries contribute nothing.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// In-place stable softmax of one lane.
pub fn softmax_lane(lane: &mut [f64]) {
    let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in lane.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in lane.iter_mut() {
        *v /= sum;
    }
}
