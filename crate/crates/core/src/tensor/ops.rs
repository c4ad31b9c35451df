//! Raw numeric kernels: forward implementations and their vector-Jacobian
//! products, all mask-aware.
//!
//! Every kernel counts the work it performs into an [`OpCounters`] bucket so
//! the analytic cost model can be checked against what actually ran. The
//! conventions are:
//!
//! * conv: `k²·Cin_alive·Cout_alive·Hout·Wout` multiply-accumulates per image
//!   (zero-padding taps are charged; masked channels are skipped and never
//!   charged),
//! * fc: `in_alive·out` MACs per row,
//! * bn: 2 ops per element of an alive channel (fused scale + shift),
//! * relu: 1 op per alive element,
//! * maxpool: `k²` compares per alive output element,
//! * roi-align: 4 MACs per sampled output element (bilinear corners),
//! * means: 1 op per alive input element read.
//!
//! Only forward work is counted; backward cost is a closed-form model layered
//! on top elsewhere.

use super::{Real, Shape4, Tensor4};

/// Forward work counters, one bucket per kernel family.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct OpCounters {
    pub conv: u64,
    pub fc: u64,
    pub bn: u64,
    pub relu: u64,
    pub pool: u64,
    pub add: u64,
    pub roi: u64,
    pub mean: u64,
}

impl OpCounters {
    pub fn total(&self) -> u64 {
        self.conv + self.fc + self.bn + self.relu + self.pool + self.add + self.roi + self.mean
    }
}

#[inline]
fn alive_or_true(mask: Option<&[bool]>, c: usize) -> bool {
    mask.map_or(true, |m| m[c])
}

fn count_alive(mask: Option<&[bool]>, c: usize) -> usize {
    mask.map_or(c, |m| m.iter().filter(|&&a| a).count())
}

/// Output length of a strided window sweep.
#[inline]
pub fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Range of output positions whose tap `k_off` lands inside `[0, in_len)`.
#[inline]
fn valid_out_range(k_off: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let k_off = k_off as i64;
    let pad = pad as i64;
    let s = stride as i64;
    // in_pos = out·s + k_off − pad must satisfy 0 ≤ in_pos < in_len
    let lo = (pad - k_off + s - 1).div_euclid(s).max(0);
    let hi = ((in_len as i64 - 1 - k_off + pad).div_euclid(s) + 1).min(out_len as i64);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

/// Cross-correlation with optional bias and channel masks.
///
/// `w` has shape (out_ch, in_ch, k, k). Masked input channels contribute
/// nothing; masked output channels are exact zero planes.
pub fn conv2d(
    x: &Tensor4,
    w: &Tensor4,
    bias: Option<&[Real]>,
    stride: usize,
    pad: usize,
    in_alive: Option<&[bool]>,
    out_alive: Option<&[bool]>,
    counters: &mut OpCounters,
) -> Tensor4 {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(ws.c, xs.c, "kernel input channels {} vs tensor channels {}", ws.c, xs.c);
    assert_eq!(ws.h, ws.w, "only square kernels supported");
    let k = ws.h;
    let (ho, wo) = (conv_out_len(xs.h, k, stride, pad), conv_out_len(xs.w, k, stride, pad));
    let os = Shape4::new(xs.n, ws.n, ho, wo);
    let mut out = vec![0.0; os.numel()];

    let per_channel_macs = (k * k * ho * wo) as u64;
    for n in 0..xs.n {
        for co in 0..ws.n {
            if !alive_or_true(out_alive, co) {
                continue;
            }
            let out_plane = &mut out[(n * ws.n + co) * ho * wo..(n * ws.n + co + 1) * ho * wo];
            if let Some(b) = bias {
                out_plane.fill(b[co]);
                counters.conv += (ho * wo) as u64;
            }
            for ci in 0..xs.c {
                if !alive_or_true(in_alive, ci) {
                    continue;
                }
                counters.conv += per_channel_macs;
                let xp = x.plane(n, ci);
                let wk = w.plane(co, ci);
                for oy in 0..ho {
                    let orow = &mut out_plane[oy * wo..(oy + 1) * wo];
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        if iy < 0 || iy >= xs.h as i64 {
                            continue;
                        }
                        let xrow = &xp[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                        for kx in 0..k {
                            let wv = wk[ky * k + kx];
                            let (lo, hi) = valid_out_range(kx, pad, stride, xs.w, wo);
                            for ox in lo..hi {
                                orow[ox] += wv * xrow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor4::from_raw_unchecked(os, out)
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_vjp_x(
    dy: &Tensor4,
    w: &Tensor4,
    x_shape: Shape4,
    stride: usize,
    pad: usize,
    in_alive: Option<&[bool]>,
    out_alive: Option<&[bool]>,
) -> Tensor4 {
    let ws = w.shape();
    let ds = dy.shape();
    let k = ws.h;
    let mut dx = vec![0.0; x_shape.numel()];
    for n in 0..ds.n {
        for co in 0..ws.n {
            if !alive_or_true(out_alive, co) {
                continue;
            }
            let dyp = dy.plane(n, co);
            for ci in 0..x_shape.c {
                if !alive_or_true(in_alive, ci) {
                    continue;
                }
                let base = (n * x_shape.c + ci) * x_shape.plane();
                let dxp = &mut dx[base..base + x_shape.plane()];
                let wk = w.plane(co, ci);
                for oy in 0..ds.h {
                    let dyrow = &dyp[oy * ds.w..(oy + 1) * ds.w];
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        if iy < 0 || iy >= x_shape.h as i64 {
                            continue;
                        }
                        let dxrow = &mut dxp[iy as usize * x_shape.w..(iy as usize + 1) * x_shape.w];
                        for kx in 0..k {
                            let wv = wk[ky * k + kx];
                            let (lo, hi) = valid_out_range(kx, pad, stride, x_shape.w, ds.w);
                            for ox in lo..hi {
                                dxrow[ox * stride + kx - pad] += wv * dyrow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor4::from_raw_unchecked(x_shape, dx)
}

/// Gradient of `conv2d` with respect to the kernel.
pub fn conv2d_vjp_w(
    dy: &Tensor4,
    x: &Tensor4,
    w_shape: Shape4,
    stride: usize,
    pad: usize,
    in_alive: Option<&[bool]>,
    out_alive: Option<&[bool]>,
) -> Tensor4 {
    let xs = x.shape();
    let ds = dy.shape();
    let k = w_shape.h;
    let mut dw = vec![0.0; w_shape.numel()];
    for n in 0..ds.n {
        for co in 0..w_shape.n {
            if !alive_or_true(out_alive, co) {
                continue;
            }
            let dyp = dy.plane(n, co);
            for ci in 0..xs.c {
                if !alive_or_true(in_alive, ci) {
                    continue;
                }
                let xp = x.plane(n, ci);
                let dwk = &mut dw[(co * xs.c + ci) * k * k..(co * xs.c + ci + 1) * k * k];
                for oy in 0..ds.h {
                    let dyrow = &dyp[oy * ds.w..(oy + 1) * ds.w];
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as i64 - pad as i64;
                        if iy < 0 || iy >= xs.h as i64 {
                            continue;
                        }
                        let xrow = &xp[iy as usize * xs.w..(iy as usize + 1) * xs.w];
                        for kx in 0..k {
                            let (lo, hi) = valid_out_range(kx, pad, stride, xs.w, ds.w);
                            let mut acc = 0.0;
                            for ox in lo..hi {
                                acc += dyrow[ox] * xrow[ox * stride + kx - pad];
                            }
                            dwk[ky * k + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    Tensor4::from_raw_unchecked(w_shape, dw)
}

/// Gradient of `conv2d` with respect to the bias.
pub fn conv2d_vjp_b(dy: &Tensor4, out_alive: Option<&[bool]>) -> Vec<Real> {
    let ds = dy.shape();
    let mut db = vec![0.0; ds.c];
    for n in 0..ds.n {
        for c in 0..ds.c {
            if !alive_or_true(out_alive, c) {
                continue;
            }
            db[c] += dy.plane(n, c).iter().sum::<Real>();
        }
    }
    db
}

/// Channel-wise affine normalization with fixed running statistics:
/// `y = γ·(x−μ)/sqrt(σ²+eps) + β`. Channels masked dead produce exact zeros.
pub fn bn_apply(
    x: &Tensor4,
    gamma: &[Real],
    beta: &[Real],
    mean: &[Real],
    var: &[Real],
    eps: Real,
    alive: Option<&[bool]>,
    counters: &mut OpCounters,
) -> Tensor4 {
    let xs = x.shape();
    assert!(eps > 0.0, "normalization eps must be positive");
    assert_eq!(gamma.len(), xs.c);
    let mut out = vec![0.0; xs.numel()];
    let plane = xs.plane();
    for c in 0..xs.c {
        if !alive_or_true(alive, c) {
            continue; // output stays exactly zero
        }
        let inv_std = 1.0 / (var[c] + eps).sqrt();
        let scale = gamma[c] * inv_std;
        let shift = beta[c] - mean[c] * scale;
        counters.bn += 2 * (xs.n * plane) as u64;
        for n in 0..xs.n {
            let xp = x.plane(n, c);
            let op = &mut out[(n * xs.c + c) * plane..(n * xs.c + c + 1) * plane];
            for (o, &v) in op.iter_mut().zip(xp) {
                *o = scale * v + shift;
            }
        }
    }
    Tensor4::from_raw_unchecked(xs, out)
}

/// Gradients of `bn_apply`: input, γ, and β cotangents.
pub fn bn_vjp(
    dy: &Tensor4,
    x: &Tensor4,
    gamma: &[Real],
    mean: &[Real],
    var: &[Real],
    eps: Real,
    alive: Option<&[bool]>,
    need_dx: bool,
    need_dgamma: bool,
    need_dbeta: bool,
) -> (Option<Tensor4>, Option<Vec<Real>>, Option<Vec<Real>>) {
    let xs = x.shape();
    let plane = xs.plane();
    let mut dx = if need_dx { Some(vec![0.0; xs.numel()]) } else { None };
    let mut dgamma = if need_dgamma { Some(vec![0.0; xs.c]) } else { None };
    let mut dbeta = if need_dbeta { Some(vec![0.0; xs.c]) } else { None };
    for c in 0..xs.c {
        if !alive_or_true(alive, c) {
            continue;
        }
        let inv_std = 1.0 / (var[c] + eps).sqrt();
        for n in 0..xs.n {
            let base = (n * xs.c + c) * plane;
            let dyp = &dy.data()[base..base + plane];
            if let Some(dx) = dx.as_mut() {
                let scale = gamma[c] * inv_std;
                for (o, &g) in dx[base..base + plane].iter_mut().zip(dyp) {
                    *o = scale * g;
                }
            }
            if let Some(dg) = dgamma.as_mut() {
                let xp = x.plane(n, c);
                let mut acc = 0.0;
                for (&g, &v) in dyp.iter().zip(xp) {
                    acc += g * (v - mean[c]) * inv_std;
                }
                dg[c] += acc;
            }
            if let Some(db) = dbeta.as_mut() {
                db[c] += dyp.iter().sum::<Real>();
            }
        }
    }
    (
        dx.map(|d| Tensor4::from_raw_unchecked(xs, d)),
        dgamma,
        dbeta,
    )
}

/// Rectifier over alive channels; dead channels stay exact zeros.
pub fn relu(x: &Tensor4, alive: Option<&[bool]>, counters: &mut OpCounters) -> Tensor4 {
    let xs = x.shape();
    let plane = xs.plane();
    let mut out = vec![0.0; xs.numel()];
    for c in 0..xs.c {
        if !alive_or_true(alive, c) {
            continue;
        }
        counters.relu += (xs.n * plane) as u64;
        for n in 0..xs.n {
            let base = (n * xs.c + c) * plane;
            for (o, &v) in out[base..base + plane].iter_mut().zip(&x.data()[base..base + plane]) {
                *o = if v > 0.0 { v } else { 0.0 };
            }
        }
    }
    Tensor4::from_raw_unchecked(xs, out)
}

pub fn relu_vjp(dy: &Tensor4, x: &Tensor4, alive: Option<&[bool]>) -> Tensor4 {
    let xs = x.shape();
    let plane = xs.plane();
    let mut dx = vec![0.0; xs.numel()];
    for c in 0..xs.c {
        if !alive_or_true(alive, c) {
            continue;
        }
        for n in 0..xs.n {
            let base = (n * xs.c + c) * plane;
            for i in base..base + plane {
                if x.data()[i] > 0.0 {
                    dx[i] = dy.data()[i];
                }
            }
        }
    }
    Tensor4::from_raw_unchecked(xs, dx)
}

/// Square max-pool; spatial dims must divide evenly. Returns the pooled map
/// and the flat in-plane argmax index per output element (for the reverse pass).
pub fn maxpool(
    x: &Tensor4,
    k: usize,
    alive: Option<&[bool]>,
    counters: &mut OpCounters,
) -> (Tensor4, Vec<u32>) {
    let xs = x.shape();
    assert!(xs.h % k == 0 && xs.w % k == 0, "pool input {}x{} not divisible by {}", xs.h, xs.w, k);
    let (ho, wo) = (xs.h / k, xs.w / k);
    let os = Shape4::new(xs.n, xs.c, ho, wo);
    let mut out = vec![0.0; os.numel()];
    let mut arg = vec![0u32; os.numel()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            if !alive_or_true(alive, c) {
                continue;
            }
            counters.pool += (k * k * ho * wo) as u64;
            let xp = x.plane(n, c);
            let obase = (n * xs.c + c) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = Real::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = (oy * k + ky) * xs.w + ox * k + kx;
                            if xp[idx] > best {
                                best = xp[idx];
                                best_i = idx;
                            }
                        }
                    }
                    out[obase + oy * wo + ox] = best;
                    arg[obase + oy * wo + ox] = best_i as u32;
                }
            }
        }
    }
    (Tensor4::from_raw_unchecked(os, out), arg)
}

pub fn maxpool_vjp(dy: &Tensor4, arg: &[u32], x_shape: Shape4, alive: Option<&[bool]>) -> Tensor4 {
    let os = dy.shape();
    let mut dx = vec![0.0; x_shape.numel()];
    let in_plane = x_shape.plane();
    let out_plane = os.plane();
    for n in 0..os.n {
        for c in 0..os.c {
            if !alive_or_true(alive, c) {
                continue;
            }
            let obase = (n * os.c + c) * out_plane;
            let ibase = (n * x_shape.c + c) * in_plane;
            for i in 0..out_plane {
                dx[ibase + arg[obase + i] as usize] += dy.data()[obase + i];
            }
        }
    }
    Tensor4::from_raw_unchecked(x_shape, dx)
}

/// Row-matrix product: rows (n, in, 1, 1) × weights (out, in, 1, 1) + bias.
/// `in_alive` masks input features (e.g. flattened pruned channels).
pub fn fc(
    x: &Tensor4,
    w: &Tensor4,
    bias: Option<&[Real]>,
    in_alive: Option<&[bool]>,
    counters: &mut OpCounters,
) -> Tensor4 {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.h * xs.w, 1, "fc expects row vectors, got {}", xs);
    assert_eq!(ws.c, xs.c, "fc weight in-dim {} vs input dim {}", ws.c, xs.c);
    let alive_in = count_alive(in_alive, ws.c);
    counters.fc += (xs.n * ws.n * alive_in) as u64;
    if bias.is_some() {
        counters.fc += (xs.n * ws.n) as u64;
    }
    let mut out = vec![0.0; xs.n * ws.n];
    for n in 0..xs.n {
        let xrow = &x.data()[n * xs.c..(n + 1) * xs.c];
        for o in 0..ws.n {
            let wrow = &w.data()[o * ws.c..(o + 1) * ws.c];
            let mut acc = bias.map_or(0.0, |b| b[o]);
            match in_alive {
                None => {
                    for i in 0..ws.c {
                        acc += wrow[i] * xrow[i];
                    }
                }
                Some(m) => {
                    for i in 0..ws.c {
                        if m[i] {
                            acc += wrow[i] * xrow[i];
                        }
                    }
                }
            }
            out[n * ws.n + o] = acc;
        }
    }
    Tensor4::from_raw_unchecked(Shape4::rows(xs.n, ws.n), out)
}

pub fn fc_vjp_x(dy: &Tensor4, w: &Tensor4, in_alive: Option<&[bool]>) -> Tensor4 {
    let ds = dy.shape();
    let ws = w.shape();
    let mut dx = vec![0.0; ds.n * ws.c];
    for n in 0..ds.n {
        for o in 0..ws.n {
            let g = dy.data()[n * ws.n + o];
            if g == 0.0 {
                continue;
            }
            let wrow = &w.data()[o * ws.c..(o + 1) * ws.c];
            let drow = &mut dx[n * ws.c..(n + 1) * ws.c];
            for i in 0..ws.c {
                if alive_or_true(in_alive, i) {
                    drow[i] += g * wrow[i];
                }
            }
        }
    }
    Tensor4::from_raw_unchecked(Shape4::rows(ds.n, ws.c), dx)
}

pub fn fc_vjp_w(dy: &Tensor4, x: &Tensor4, in_alive: Option<&[bool]>) -> Tensor4 {
    let ds = dy.shape();
    let xs = x.shape();
    let mut dw = vec![0.0; ds.c * xs.c];
    for n in 0..ds.n {
        let xrow = &x.data()[n * xs.c..(n + 1) * xs.c];
        for o in 0..ds.c {
            let g = dy.data()[n * ds.c + o];
            if g == 0.0 {
                continue;
            }
            let drow = &mut dw[o * xs.c..(o + 1) * xs.c];
            for i in 0..xs.c {
                if alive_or_true(in_alive, i) {
                    drow[i] += g * xrow[i];
                }
            }
        }
    }
    Tensor4::from_raw_unchecked(Shape4::rows(ds.c, xs.c), dw)
}

pub fn fc_vjp_b(dy: &Tensor4) -> Vec<Real> {
    let ds = dy.shape();
    let mut db = vec![0.0; ds.c];
    for n in 0..ds.n {
        for o in 0..ds.c {
            db[o] += dy.data()[n * ds.c + o];
        }
    }
    db
}

/// Row-wise softmax over the channel axis of (n, c, 1, 1) rows.
pub fn softmax_rows(x: &Tensor4) -> Tensor4 {
    let xs = x.shape();
    let mut out = vec![0.0; xs.numel()];
    for n in 0..xs.n {
        let row = &x.data()[n * xs.c..(n + 1) * xs.c];
        let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let orow = &mut out[n * xs.c..(n + 1) * xs.c];
        let mut z = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    Tensor4::from_raw_unchecked(xs, out)
}

pub fn softmax_rows_vjp(dy: &Tensor4, y: &Tensor4) -> Tensor4 {
    let ys = y.shape();
    let mut dx = vec![0.0; ys.numel()];
    for n in 0..ys.n {
        let yr = &y.data()[n * ys.c..(n + 1) * ys.c];
        let gr = &dy.data()[n * ys.c..(n + 1) * ys.c];
        let dot: Real = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for i in 0..ys.c {
            dx[n * ys.c + i] = yr[i] * (gr[i] - dot);
        }
    }
    Tensor4::from_raw_unchecked(ys, dx)
}

/// Per-sample per-channel spatial mean: (n, c, h, w) → (n, c, 1, 1).
pub fn spatial_mean(x: &Tensor4, alive: Option<&[bool]>, counters: &mut OpCounters) -> Tensor4 {
    let xs = x.shape();
    let plane = xs.plane();
    let mut out = vec![0.0; xs.n * xs.c];
    for n in 0..xs.n {
        for c in 0..xs.c {
            if !alive_or_true(alive, c) {
                continue;
            }
            counters.mean += plane as u64;
            out[n * xs.c + c] = x.plane(n, c).iter().sum::<Real>() / plane as Real;
        }
    }
    Tensor4::from_raw_unchecked(Shape4::rows(xs.n, xs.c), out)
}

pub fn spatial_mean_vjp(dy: &Tensor4, x_shape: Shape4, alive: Option<&[bool]>) -> Tensor4 {
    let plane = x_shape.plane();
    let mut dx = vec![0.0; x_shape.numel()];
    for n in 0..x_shape.n {
        for c in 0..x_shape.c {
            if !alive_or_true(alive, c) {
                continue;
            }
            let g = dy.data()[n * x_shape.c + c] / plane as Real;
            let base = (n * x_shape.c + c) * plane;
            dx[base..base + plane].fill(g);
        }
    }
    Tensor4::from_raw_unchecked(x_shape, dx)
}

/// Per-channel mean over batch and space: (n, c, h, w) → (1, c, 1, 1).
pub fn global_channel_mean(x: &Tensor4, alive: Option<&[bool]>, counters: &mut OpCounters) -> Tensor4 {
    let xs = x.shape();
    let plane = xs.plane();
    let denom = (xs.n * plane) as Real;
    let mut out = vec![0.0; xs.c];
    for c in 0..xs.c {
        if !alive_or_true(alive, c) {
            continue;
        }
        counters.mean += (xs.n * plane) as u64;
        let mut acc = 0.0;
        for n in 0..xs.n {
            acc += x.plane(n, c).iter().sum::<Real>();
        }
        out[c] = acc / denom;
    }
    Tensor4::from_raw_unchecked(Shape4::vector(xs.c), out)
}

pub fn global_channel_mean_vjp(dy: &Tensor4, x_shape: Shape4, alive: Option<&[bool]>) -> Tensor4 {
    let plane = x_shape.plane();
    let denom = (x_shape.n * plane) as Real;
    let mut dx = vec![0.0; x_shape.numel()];
    for c in 0..x_shape.c {
        if !alive_or_true(alive, c) {
            continue;
        }
        let g = dy.data()[c] / denom;
        for n in 0..x_shape.n {
            let base = (n * x_shape.c + c) * plane;
            dx[base..base + plane].fill(g);
        }
    }
    Tensor4::from_raw_unchecked(x_shape, dx)
}

/// Mean over a subset of rows: (n, c, 1, 1) + indices → (1, c, 1, 1).
pub fn row_select_mean(x: &Tensor4, rows: &[usize], counters: &mut OpCounters) -> Tensor4 {
    let xs = x.shape();
    assert!(!rows.is_empty());
    counters.mean += (rows.len() * xs.c) as u64;
    let mut out = vec![0.0; xs.c];
    for &r in rows {
        for c in 0..xs.c {
            out[c] += x.data()[r * xs.c + c];
        }
    }
    let inv = 1.0 / rows.len() as Real;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Tensor4::from_raw_unchecked(Shape4::vector(xs.c), out)
}

pub fn row_select_mean_vjp(dy: &Tensor4, rows: &[usize], x_shape: Shape4) -> Tensor4 {
    let mut dx = vec![0.0; x_shape.numel()];
    let inv = 1.0 / rows.len() as Real;
    for &r in rows {
        for c in 0..x_shape.c {
            dx[r * x_shape.c + c] += dy.data()[c] * inv;
        }
    }
    Tensor4::from_raw_unchecked(x_shape, dx)
}

/// A region of interest in continuous feature coordinates: the map spans
/// `[0, W] × [0, H]` and pixel (r, c) has its center at (c + 0.5, r + 0.5).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiBox {
    pub batch: usize,
    pub x0: Real,
    pub y0: Real,
    pub x1: Real,
    pub y1: Real,
}

impl RoiBox {
    pub fn is_degenerate(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    /// Same region expressed on a map scaled by `1/stride`.
    pub fn scaled(&self, inv_stride: Real) -> RoiBox {
        RoiBox {
            batch: self.batch,
            x0: self.x0 * inv_stride,
            y0: self.y0 * inv_stride,
            x1: self.x1 * inv_stride,
            y1: self.y1 * inv_stride,
        }
    }
}

/// Bilinear sample at a continuous point (center-based coordinates).
/// Returns the four corner flat indices and weights.
#[inline]
fn bilinear_taps(xc: Real, yc: Real, h: usize, w: usize) -> ([usize; 4], [Real; 4]) {
    let u = (xc - 0.5).clamp(0.0, (w - 1) as Real);
    let v = (yc - 0.5).clamp(0.0, (h - 1) as Real);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = u - x0 as Real;
    let fy = v - y0 as Real;
    (
        [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        [
            (1.0 - fy) * (1.0 - fx),
            (1.0 - fy) * fx,
            fy * (1.0 - fx),
            fy * fx,
        ],
    )
}

/// Bilinear RoI pooling: one sample per output cell, taken at the cell center.
/// Boxes must be pre-validated (non-degenerate, within bounds after clamping).
pub fn roi_align_values(
    feature: &Tensor4,
    boxes: &[RoiBox],
    out_hw: (usize, usize),
    alive: Option<&[bool]>,
    counters: &mut OpCounters,
) -> Tensor4 {
    let fs = feature.shape();
    let (hr, wr) = out_hw;
    let os = Shape4::new(boxes.len(), fs.c, hr, wr);
    let mut out = vec![0.0; os.numel()];
    for (m, bx) in boxes.iter().enumerate() {
        debug_assert!(!bx.is_degenerate());
        let cw = (bx.x1 - bx.x0) / wr as Real;
        let ch = (bx.y1 - bx.y0) / hr as Real;
        for c in 0..fs.c {
            if !alive_or_true(alive, c) {
                continue;
            }
            counters.roi += (4 * hr * wr) as u64;
            let fp = feature.plane(bx.batch, c);
            let op = &mut out[(m * fs.c + c) * hr * wr..(m * fs.c + c + 1) * hr * wr];
            for oy in 0..hr {
                let yc = bx.y0 + (oy as Real + 0.5) * ch;
                for ox in 0..wr {
                    let xc = bx.x0 + (ox as Real + 0.5) * cw;
                    let (idx, wgt) = bilinear_taps(xc, yc, fs.h, fs.w);
                    op[oy * wr + ox] = idx
                        .iter()
                        .zip(&wgt)
                        .map(|(&i, &w)| fp[i] * w)
                        .sum();
                }
            }
        }
    }
    Tensor4::from_raw_unchecked(os, out)
}

pub fn roi_align_vjp(
    dy: &Tensor4,
    boxes: &[RoiBox],
    feature_shape: Shape4,
    out_hw: (usize, usize),
    alive: Option<&[bool]>,
) -> Tensor4 {
    let (hr, wr) = out_hw;
    let mut dx = vec![0.0; feature_shape.numel()];
    let plane = feature_shape.plane();
    for (m, bx) in boxes.iter().enumerate() {
        let cw = (bx.x1 - bx.x0) / wr as Real;
        let ch = (bx.y1 - bx.y0) / hr as Real;
        for c in 0..feature_shape.c {
            if !alive_or_true(alive, c) {
                continue;
            }
            let base = (bx.batch * feature_shape.c + c) * plane;
            let dyp = dy.plane(m, c);
            for oy in 0..hr {
                let yc = bx.y0 + (oy as Real + 0.5) * ch;
                for ox in 0..wr {
                    let xc = bx.x0 + (ox as Real + 0.5) * cw;
                    let g = dyp[oy * wr + ox];
                    if g == 0.0 {
                        continue;
                    }
                    let (idx, wgt) = bilinear_taps(xc, yc, feature_shape.h, feature_shape.w);
                    for (&i, &w) in idx.iter().zip(&wgt) {
                        dx[base + i] += g * w;
                    }
                }
            }
        }
    }
    Tensor4::from_raw_unchecked(feature_shape, dx)
}

/// Elementwise sum of two same-shape tensors (residual join). Charged over the
/// full element count: the masked branch still feeds zeros into every lane.
pub fn add(a: &Tensor4, b: &Tensor4, counters: &mut OpCounters) -> Tensor4 {
    assert_eq!(a.shape(), b.shape());
    counters.add += a.shape().numel() as u64;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor4::from_raw_unchecked(a.shape(), data)
}
