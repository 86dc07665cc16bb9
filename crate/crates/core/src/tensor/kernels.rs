//! Shape-checked compute kernels, generic over the element type so the tape
//! can execute in f32 and replay in f64 with identical code paths.

use super::Real;

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;
pub(crate) const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_C1: f64 = 0.044_715;

/// Lane decomposition of a shape around `axis`: iterate `outer * inner`
/// lanes of length `lane`, stepping by `inner` inside a lane.
#[derive(Clone, Copy)]
pub(crate) struct AxisLanes {
    pub outer: usize,
    pub lane: usize,
    pub inner: usize,
}

pub(crate) fn axis_lanes(shape: &[usize], axis: usize) -> AxisLanes {
    let outer = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    AxisLanes { outer, lane, inner }
}

pub(crate) fn for_each_lane<F: FnMut(usize, usize)>(lanes: AxisLanes, mut body: F) {
    for o in 0..lanes.outer {
        for i in 0..lanes.inner {
            let base = o * lanes.lane * lanes.inner + i;
            body(base, lanes.inner);
        }
    }
}

pub(crate) fn matmul<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::ZERO; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
    out
}

pub(crate) fn transpose<R: Real>(a: &[R], rows: usize, cols: usize) -> Vec<R> {
    let mut out = vec![R::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub(crate) fn gelu<R: Real>(x: R) -> R {
    let c0 = R::from_f64(GELU_C0);
    let c1 = R::from_f64(GELU_C1);
    let half = R::from_f64(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (R::ONE + u.tanh())
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let x = x as f64;
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    let du = GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x);
    (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du) as f32
}

/// Sum with a 64-bit accumulator.
pub(crate) fn sum_f64<R: Real>(xs: &[R]) -> f64 {
    xs.iter().map(|v| v.to_f64()).sum()
}

/// Softmax along `axis` lanes with max-subtraction stabilization.
pub(crate) fn softmax<R: Real>(x: &[R], lanes: AxisLanes) -> Vec<R> {
    let mut out = vec![R::ZERO; x.len()];
    for_each_lane(lanes, |base, stride| {
        let mut mx = x[base];
        for j in 1..lanes.lane {
            mx = mx.maximum(x[base + j * stride]);
        }
        let mut denom = 0.0f64;
        for j in 0..lanes.lane {
            let e = (x[base + j * stride] - mx).exp();
            out[base + j * stride] = e;
            denom += e.to_f64();
        }
        let inv = R::from_f64(1.0 / denom);
        for j in 0..lanes.lane {
            out[base + j * stride] = out[base + j * stride] * inv;
        }
    });
    out
}

/// Log-softmax along `axis` lanes via the stabilized log-sum-exp.
pub(crate) fn log_softmax<R: Real>(x: &[R], lanes: AxisLanes) -> Vec<R> {
    let mut out = vec![R::ZERO; x.len()];
    for_each_lane(lanes, |base, stride| {
        let mut mx = x[base];
        for j in 1..lanes.lane {
            mx = mx.maximum(x[base + j * stride]);
        }
        let mut acc = 0.0f64;
        for j in 0..lanes.lane {
            acc += (x[base + j * stride] - mx).exp().to_f64();
        }
        let lse = R::from_f64(acc.ln()) + mx;
        for j in 0..lanes.lane {
            out[base + j * stride] = x[base + j * stride] - lse;
        }
    });
    out
}

/// Per-row log-sum-exp of a [rows, cols] matrix, in f64.
pub(crate) fn row_lse_f64<R: Real>(row: &[R]) -> f64 {
    let mx = row
        .iter()
        .map(|v| v.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let acc: f64 = row.iter().map(|v| (v.to_f64() - mx).exp()).sum();
    mx + acc.ln()
}

/// Layer normalization over the last axis with learned gain and bias.
pub(crate) fn layer_norm<R: Real>(x: &[R], gain: &[R], bias: &[R], width: usize) -> Vec<R> {
    let rows = x.len() / width;
    let mut out = vec![R::ZERO; x.len()];
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = sum_f64(row) / width as f64;
        let var = row
            .iter()
            .map(|v| {
                let d = v.to_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / width as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..width {
            let xhat = R::from_f64((row[j].to_f64() - mean) * rstd);
            out[r * width + j] = xhat * gain[j] + bias[j];
        }
    }
    out
}

/// Row/normalization statistics needed by the layer-norm backward rule.
pub(crate) fn layer_norm_stats(x: &[f32], width: usize, row: usize) -> (f64, f64) {
    let slice = &x[row * width..(row + 1) * width];
    let mean = sum_f64(slice) / width as f64;
    let var = slice
        .iter()
        .map(|v| {
            let d = *v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / width as f64;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Extracts non-overlapping `patch x patch` blocks per frame:
/// [F,H,W,C] -> [F * (H/p) * (W/p), p * p * C], patches in row-major scan order.
pub(crate) fn patchify<R: Real>(
    x: &[R],
    dims: [usize; 4],
    patch: usize,
    body: &mut dyn FnMut(usize, usize, R),
) {
    let [f, h, w, c] = dims;
    let ph = h / patch;
    let pw = w / patch;
    let row_w = patch * patch * c;
    for fi in 0..f {
        for py in 0..ph {
            for px in 0..pw {
                let row = fi * ph * pw + py * pw + px;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ch in 0..c {
                            let src = ((fi * h + py * patch + dy) * w + px * patch + dx) * c + ch;
                            let dst = row * row_w + (dy * patch + dx) * c + ch;
                            body(dst, src, x[src]);
                        }
                    }
                }
            }
        }
    }
}

/// One bilinear sample position: source coordinates and weights for an
/// output index along a single spatial axis. Half-pixel centers, clamped.
pub(crate) fn bilinear_axis(out_i: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = (out_i as f64 + 0.5) * scale - 0.5;
    let src = src.clamp(0.0, (in_len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Visits the four taps of each bilinear output sample on an [F,H,W,C] stack.
pub(crate) fn bilinear_taps(
    dims: [usize; 4],
    out_h: usize,
    out_w: usize,
    body: &mut dyn FnMut(usize, usize, f64),
) {
    let [f, h, w, c] = dims;
    for fi in 0..f {
        for oy in 0..out_h {
            let (y0, y1, wy) = bilinear_axis(oy, out_h, h);
            for ox in 0..out_w {
                let (x0, x1, wx) = bilinear_axis(ox, out_w, w);
                for ch in 0..c {
                    let dst = ((fi * out_h + oy) * out_w + ox) * c + ch;
                    let at = |y: usize, x: usize| ((fi * h + y) * w + x) * c + ch;
                    body(dst, at(y0, x0), (1.0 - wy) * (1.0 - wx));
                    body(dst, at(y0, x1), (1.0 - wy) * wx);
                    body(dst, at(y1, x0), wy * (1.0 - wx));
                    body(dst, at(y1, x1), wy * wx);
                }
            }
        }
    }
}

/// Visits every (output index, input index) pair of a k x k box filter with
/// edge replication on an [F,H,W,C] stack.
pub(crate) fn box_filter_taps(dims: [usize; 4], k: usize, body: &mut dyn FnMut(usize, usize)) {
    let [f, h, w, c] = dims;
    let r = (k / 2) as isize;
    for fi in 0..f {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let dst = ((fi * h + y) * w + x) * c + ch;
                    for dy in -r..=r {
                        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        for dx in -r..=r {
                            let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                            body(dst, ((fi * h + sy) * w + sx) * c + ch);
                        }
                    }
                }
            }
        }
    }
}
