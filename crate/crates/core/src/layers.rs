//! Batched forward and backward kernels for each layer kind.
//!
//! Activations are NHWC. Convolutions lower to a single GEMM through an
//! im2col buffer whose row `(b, y, x)` holds the 3×3×C patch in
//! `(ky, kx, c)` order, matching the `[3, 3, c_in, c_out]` weight layout.

use alloc::vec;
use alloc::vec::Vec;

use crate::Real;

/// Geometry of a batched NHWC activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Nhwc {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Nhwc {
    pub fn len(&self) -> usize {
        self.batch * self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn pixels(&self) -> usize {
        self.batch * self.height * self.width
    }
}

pub fn im2col<T: Real>(input: &[T], g: Nhwc, cols: &mut Vec<T>) {
    let c = g.channels;
    let patch = 9 * c;
    cols.clear();
    cols.resize(g.pixels() * patch, T::zero());
    for b in 0..g.batch {
        for y in 0..g.height {
            for x in 0..g.width {
                let row = ((b * g.height + y) * g.width + x) * patch;
                for ky in 0..3 {
                    let iy = y + ky;
                    if iy < 1 || iy > g.height {
                        continue;
                    }
                    let iy = iy - 1;
                    for kx in 0..3 {
                        let ix = x + kx;
                        if ix < 1 || ix > g.width {
                            continue;
                        }
                        let ix = ix - 1;
                        let src = ((b * g.height + iy) * g.width + ix) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&input[src..src + c]);
                    }
                }
            }
        }
    }
}

pub fn col2im<T: Real>(cols: &[T], g: Nhwc) -> Vec<T> {
    let c = g.channels;
    let patch = 9 * c;
    let mut out = vec![T::zero(); g.len()];
    for b in 0..g.batch {
        for y in 0..g.height {
            for x in 0..g.width {
                let row = ((b * g.height + y) * g.width + x) * patch;
                for ky in 0..3 {
                    let iy = y + ky;
                    if iy < 1 || iy > g.height {
                        continue;
                    }
                    let iy = iy - 1;
                    for kx in 0..3 {
                        let ix = x + kx;
                        if ix < 1 || ix > g.width {
                            continue;
                        }
                        let ix = ix - 1;
                        let dst = ((b * g.height + iy) * g.width + ix) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for (o, &v) in out[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *o = *o + v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o = *o + b;
        }
    }
}

fn column_sums<T: Real>(grad: &[T], width: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); width];
    for row in grad.chunks_exact(width) {
        for (s, &g) in sums.iter_mut().zip(row) {
            *s = *s + g;
        }
    }
    sums
}

/// 3×3 same-padded convolution. Returns the output and fills `cols` with
/// the im2col buffer needed by [`conv_backward`].
pub fn conv_forward<T: Real>(input: &[T], g: Nhwc, weight: &[T], bias: &[T], cols: &mut Vec<T>) -> Vec<T> {
    let out_c = bias.len();
    im2col(input, g, cols);
    let mut out = vec![T::zero(); g.pixels() * out_c];
    T::gemm(g.pixels(), 9 * g.channels, out_c, cols, false, weight, false, T::zero(), &mut out);
    add_bias(&mut out, bias);
    out
}

pub struct ParamGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub input: Option<Vec<T>>,
}

pub fn conv_backward<T: Real>(
    cols: &[T],
    g: Nhwc,
    weight: &[T],
    out_channels: usize,
    grad_out: &[T],
    need_input: bool,
) -> ParamGrads<T> {
    let rows = g.pixels();
    let patch = 9 * g.channels;
    let mut dw = vec![T::zero(); patch * out_channels];
    T::gemm(patch, rows, out_channels, cols, true, grad_out, false, T::zero(), &mut dw);
    let db = column_sums(grad_out, out_channels);
    let input = need_input.then(|| {
        let mut dcols = vec![T::zero(); rows * patch];
        T::gemm(rows, out_channels, patch, grad_out, false, weight, true, T::zero(), &mut dcols);
        col2im(&dcols, g)
    });
    ParamGrads { weight: dw, bias: db, input }
}

pub fn dense_forward<T: Real>(input: &[T], batch: usize, in_dim: usize, weight: &[T], bias: &[T]) -> Vec<T> {
    let out_dim = bias.len();
    let mut out = vec![T::zero(); batch * out_dim];
    T::gemm(batch, in_dim, out_dim, input, false, weight, false, T::zero(), &mut out);
    add_bias(&mut out, bias);
    out
}

pub fn dense_backward<T: Real>(
    input: &[T],
    batch: usize,
    in_dim: usize,
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
) -> ParamGrads<T> {
    let out_dim = grad_out.len() / batch.max(1);
    let mut dw = vec![T::zero(); in_dim * out_dim];
    T::gemm(in_dim, batch, out_dim, input, true, grad_out, false, T::zero(), &mut dw);
    let db = column_sums(grad_out, out_dim);
    let input = need_input.then(|| {
        let mut dx = vec![T::zero(); batch * in_dim];
        T::gemm(batch, out_dim, in_dim, grad_out, false, weight, true, T::zero(), &mut dx);
        dx
    });
    ParamGrads { weight: dw, bias: db, input }
}

/// 2×2 stride-2 max pooling; odd trailing rows/columns are dropped. Returns
/// the output and, per output element, the flat input index that won (the
/// first maximum in scan order).
pub fn maxpool_forward<T: Real>(input: &[T], g: Nhwc) -> (Vec<T>, Vec<u32>) {
    let (oh, ow, c) = (g.height / 2, g.width / 2, g.channels);
    let n = g.batch * oh * ow * c;
    let mut out = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n);
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_idx = ((b * g.height + 2 * oy) * g.width + 2 * ox) * c + ch;
                    let mut best = input[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ((b * g.height + 2 * oy + dy) * g.width + 2 * ox + dx) * c + ch;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx as u32);
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_backward<T: Real>(argmax: &[u32], grad_out: &[T], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        dx[i as usize] = dx[i as usize] + g;
    }
    dx
}

pub fn relu_forward<T: Real>(input: &[T]) -> (Vec<T>, Vec<bool>) {
    let active: Vec<bool> = input.iter().map(|&v| v > T::zero()).collect();
    let out = input.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    (out, active)
}

pub fn relu_backward<T: Real>(active: &[bool], grad_out: &[T]) -> Vec<T> {
    grad_out.iter().zip(active).map(|(&g, &a)| if a { g } else { T::zero() }).collect()
}
