//! Raw forward/backward kernels for the spatial layers.
//!
//! All buffers are row-major NCHW. Parallelism is over independent output
//! planes, so every element sees the same summation order with or without
//! the `parallel` feature.

use crate::par;

/// Spatial extent shared by the 3x3 same-padding kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
}

const K: usize = 3;

/// Valid output index range for tap offset `d` on an axis of length `n`.
#[inline]
fn tap_range(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo, hi)
}

/// Conv forward. Each output element is `bias[o]` plus taps accumulated in
/// `(c, ky, kx)` order.
pub fn conv3x3_forward(x: &[f64], w: &[f64], b: &[f64], d: Dims) -> Vec<f64> {
    let Dims {
        batch,
        in_channels: ci,
        out_channels: co,
        height: h,
        width: wd,
    } = d;
    let plane = h * wd;
    let mut out = vec![0.0; batch * co * plane];
    par::for_each_chunk_mut(&mut out, plane, |idx, dst| {
        let (n, o) = (idx / co, idx % co);
        dst.fill(b[o]);
        for c in 0..ci {
            let src = &x[(n * ci + c) * plane..(n * ci + c + 1) * plane];
            let wk = &w[(o * ci + c) * K * K..(o * ci + c + 1) * K * K];
            for ky in 0..K {
                let dy = ky as isize - 1;
                let (y0, y1) = tap_range(dy, h);
                for kx in 0..K {
                    let dx = kx as isize - 1;
                    let (x0, x1) = tap_range(dx, wd);
                    let wv = wk[ky * K + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let srow = &src[sy * wd..(sy + 1) * wd];
                        let drow = &mut dst[y * wd..(y + 1) * wd];
                        let sx0 = (x0 as isize + dx) as usize;
                        for (o_, i_) in drow[x0..x1].iter_mut().zip(&srow[sx0..sx0 + (x1 - x0)]) {
                            *o_ += wv * i_;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient with respect to the conv input.
pub fn conv3x3_backward_input(dy: &[f64], w: &[f64], d: Dims) -> Vec<f64> {
    let Dims {
        batch,
        in_channels: ci,
        out_channels: co,
        height: h,
        width: wd,
    } = d;
    let plane = h * wd;
    let mut dx = vec![0.0; batch * ci * plane];
    par::for_each_chunk_mut(&mut dx, plane, |idx, dst| {
        let (n, c) = (idx / ci, idx % ci);
        for o in 0..co {
            let g = &dy[(n * co + o) * plane..(n * co + o + 1) * plane];
            let wk = &w[(o * ci + c) * K * K..(o * ci + c + 1) * K * K];
            for ky in 0..K {
                let oy = ky as isize - 1;
                let (y0, y1) = tap_range(oy, h);
                for kx in 0..K {
                    let ox = kx as isize - 1;
                    let (x0, x1) = tap_range(ox, wd);
                    let wv = wk[ky * K + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + oy) as usize;
                        let grow = &g[y * wd..(y + 1) * wd];
                        let sx0 = (x0 as isize + ox) as usize;
                        let drow = &mut dst[sy * wd..(sy + 1) * wd];
                        for (d_, g_) in drow[sx0..sx0 + (x1 - x0)].iter_mut().zip(&grow[x0..x1]) {
                            *d_ += wv * g_;
                        }
                    }
                }
            }
        }
    });
    dx
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Gradients with respect to the conv weights `[O, C, 3, 3]` and bias `[O]`.
pub fn conv3x3_backward_params(dy: &[f64], x: &[f64], d: Dims) -> (Vec<f64>, Vec<f64>) {
    let Dims {
        batch,
        in_channels: ci,
        out_channels: co,
        height: h,
        width: wd,
    } = d;
    let plane = h * wd;
    let per_o = ci * K * K;
    let mut dw = vec![0.0; co * per_o];
    par::for_each_chunk_mut(&mut dw, per_o, |o, dst| {
        for n in 0..batch {
            let g = &dy[(n * co + o) * plane..(n * co + o + 1) * plane];
            for c in 0..ci {
                let src = &x[(n * ci + c) * plane..(n * ci + c + 1) * plane];
                for ky in 0..K {
                    let oy = ky as isize - 1;
                    let (y0, y1) = tap_range(oy, h);
                    for kx in 0..K {
                        let ox = kx as isize - 1;
                        let (x0, x1) = tap_range(ox, wd);
                        let sx0 = (x0 as isize + ox) as usize;
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + oy) as usize;
                            acc += dot(
                                &g[y * wd + x0..y * wd + x1],
                                &src[sy * wd + sx0..sy * wd + sx0 + (x1 - x0)],
                            );
                        }
                        dst[c * K * K + ky * K + kx] += acc;
                    }
                }
            }
        }
    });
    let db = (0..co)
        .map(|o| {
            (0..batch)
                .map(|n| dy[(n * co + o) * plane..(n * co + o + 1) * plane].iter().sum::<f64>())
                .sum()
        })
        .collect();
    (dw, db)
}

/// 2x2 max pooling with stride 2; trailing odd rows/columns are dropped.
/// Returns the pooled values and, per output cell, the flat input index of
/// the winning element (first index wins on ties, scanning row-major).
pub fn maxpool2x2_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let oplane = oh * ow;
    let mut packed = vec![(0.0f64, 0usize); planes * oplane];
    par::for_each_chunk_mut(&mut packed, oplane.max(1), |p, dst| {
        if oplane == 0 {
            return;
        }
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + (2 * oy) * w + 2 * ox;
                let mut best = x[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                dst[oy * ow + ox] = (best, best_idx);
            }
        }
    });
    packed.into_iter().unzip()
}
