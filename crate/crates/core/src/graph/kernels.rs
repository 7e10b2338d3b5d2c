//! Numeric kernels behind the graph ops.
//!
//! All kernels take flat `f64` slices plus explicit extents, are
//! single-threaded, and accumulate into gradient buffers (callers zero
//! them). Activations are `[n, c, h, w]` row-major.

use crate::math;

/// `(h + 2 pad - k) / stride + 1`, or `None` when the kernel does not fit.
pub fn conv_out_extent(h: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = h + 2 * pad;
    if k == 0 || stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

// Indexed loops keep the padding arithmetic next to the bounds checks.
#[allow(clippy::too_many_arguments, clippy::needless_range_loop)]
pub fn conv2d_forward(
    x: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(x.len(), n * ci * h * w);
    debug_assert_eq!(wt.len(), co * ci * k * k);
    debug_assert_eq!(out.len(), n * co * ho * wo);
    for b in 0..n {
        let xb = &x[b * ci * h * w..][..ci * h * w];
        let ob = &mut out[b * co * ho * wo..][..co * ho * wo];
        for oc in 0..co {
            let wk = &wt[oc * ci * k * k..][..ci * k * k];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..ci {
                        let xc = &xb[ic * h * w..][..h * w];
                        let wc = &wk[ic * k * k..][..k * k];
                        for kh in 0..k {
                            let ih = (oh * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let row = &xc[ih as usize * w..][..w];
                            let wrow = &wc[kh * k..][..k];
                            for kw in 0..k {
                                let iw = (ow * stride + kw) as isize - pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                acc += row[iw as usize] * wrow[kw];
                            }
                        }
                    }
                    ob[oc * ho * wo + oh * wo + ow] = acc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    let mut dx = dx;
    let mut dw = dw;
    for b in 0..n {
        let xb = &x[b * ci * h * w..][..ci * h * w];
        let dyb = &dy[b * co * ho * wo..][..co * ho * wo];
        for oc in 0..co {
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = dyb[oc * ho * wo + oh * wo + ow];
                    if g == 0.0 {
                        continue;
                    }
                    for ic in 0..ci {
                        for kh in 0..k {
                            let ih = (oh * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kw in 0..k {
                                let iw = (ow * stride + kw) as isize - pad as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let xi = ic * h * w + ih as usize * w + iw as usize;
                                let wi = oc * ci * k * k + ic * k * k + kh * k + kw;
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[b * ci * h * w + xi] += g * wt[wi];
                                }
                                if let Some(dw) = dw.as_deref_mut() {
                                    dw[wi] += g * xb[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
pub struct BnStats {
    /// Normalized activations, same layout as the input.
    pub xhat: alloc::vec::Vec<f64>,
    /// Per-channel `1 / sqrt(var + eps)` actually used for normalization.
    pub invstd: alloc::vec::Vec<f64>,
    /// Per-channel biased batch mean/variance (train mode only).
    pub batch_mean: alloc::vec::Vec<f64>,
    pub batch_var: alloc::vec::Vec<f64>,
    pub trained: bool,
}

/// Batch norm over `[n, c, h, w]` with per-channel statistics.
///
/// Train mode normalizes with the biased batch variance; eval mode uses
/// the provided running statistics. Output is `gamma * xhat + beta`.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_forward(
    x: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
    train: bool,
    out: &mut [f64],
) -> BnStats {
    use alloc::vec;
    let m = n * hw;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    if train {
        for b in 0..n {
            for (ch, mv) in mean.iter_mut().enumerate() {
                let base = b * c * hw + ch * hw;
                *mv += x[base..][..hw].iter().sum::<f64>();
            }
        }
        for mv in &mut mean {
            *mv /= m as f64;
        }
        for b in 0..n {
            for (ch, vv) in var.iter_mut().enumerate() {
                let base = b * c * hw + ch * hw;
                let mc = mean[ch];
                for &xi in &x[base..][..hw] {
                    let d = xi - mc;
                    *vv += d * d;
                }
            }
        }
        for vv in &mut var {
            *vv /= m as f64;
        }
    } else {
        mean.copy_from_slice(running_mean);
        var.copy_from_slice(running_var);
    }
    let mut invstd = vec![0.0; c];
    for ch in 0..c {
        invstd[ch] = 1.0 / math::sqrt(var[ch] + eps);
    }
    let mut xhat = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = b * c * hw + ch * hw;
            for i in 0..hw {
                let xh = (x[base + i] - mean[ch]) * invstd[ch];
                xhat[base + i] = xh;
                out[base + i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    BnStats { xhat, invstd, batch_mean: mean, batch_var: var, trained: train }
}

#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward(
    stats: &BnStats,
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dgamma: Option<&mut [f64]>,
    dbeta: Option<&mut [f64]>,
) {
    use alloc::vec;
    let m = (n * hw) as f64;
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = b * c * hw + ch * hw;
            for i in 0..hw {
                sum_dy[ch] += dy[base + i];
                sum_dy_xhat[ch] += dy[base + i] * stats.xhat[base + i];
            }
        }
    }
    if let Some(dgamma) = dgamma {
        for ch in 0..c {
            dgamma[ch] += sum_dy_xhat[ch];
        }
    }
    if let Some(dbeta) = dbeta {
        for ch in 0..c {
            dbeta[ch] += sum_dy[ch];
        }
    }
    if let Some(dx) = dx {
        for b in 0..n {
            for ch in 0..c {
                let base = b * c * hw + ch * hw;
                let g = gamma[ch] * stats.invstd[ch];
                for i in 0..hw {
                    let v = if stats.trained {
                        dy[base + i]
                            - sum_dy[ch] / m
                            - stats.xhat[base + i] * sum_dy_xhat[ch] / m
                    } else {
                        dy[base + i]
                    };
                    dx[base + i] += g * v;
                }
            }
        }
    }
}

/// Max pooling over `[n, c, h, w]`; padding cells count as -inf.
///
/// Returns per-output argmax indices into the input (flat, per batch
/// element absent), `usize::MAX` when a window is entirely padding.
#[allow(clippy::too_many_arguments)]
pub fn max_pool_forward(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    out: &mut [f64],
    argmax: &mut alloc::vec::Vec<usize>,
) {
    argmax.clear();
    argmax.resize(n * c * ho * wo, usize::MAX);
    for b in 0..n {
        for ch in 0..c {
            let xc = &x[(b * c + ch) * h * w..][..h * w];
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for kh in 0..k {
                        let ih = (oh * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kw in 0..k {
                            let iw = (ow * stride + kw) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let idx = ih as usize * w + iw as usize;
                            if xc[idx] > best {
                                best = xc[idx];
                                best_i = idx;
                            }
                        }
                    }
                    let oi = (b * c + ch) * ho * wo + oh * wo + ow;
                    out[oi] = if best_i == usize::MAX { 0.0 } else { best };
                    argmax[oi] = if best_i == usize::MAX {
                        usize::MAX
                    } else {
                        (b * c + ch) * h * w + best_i
                    };
                }
            }
        }
    }
}

/// Stable binary cross-entropy on logits, averaged over the batch.
///
/// Per sample: `max(z, 0) - z y + ln(1 + exp(-|z|))`.
pub fn bce_forward(logits: &[f64], labels: &[f64]) -> f64 {
    let n = logits.len() as f64;
    let mut total = 0.0;
    for (&z, &y) in logits.iter().zip(labels) {
        let zpos = if z > 0.0 { z } else { 0.0 };
        total += zpos - z * y + math::ln_1p(math::exp(-math::abs(z)));
    }
    total / n
}

/// d(loss)/d(logit_i) = (sigmoid(z_i) - y_i) / n, scaled by `upstream`.
pub fn bce_backward(logits: &[f64], labels: &[f64], upstream: f64, dlogits: &mut [f64]) {
    let n = logits.len() as f64;
    for i in 0..logits.len() {
        dlogits[i] += upstream * (math::sigmoid(logits[i]) - labels[i]) / n;
    }
}

/// `out[b, g] = sum_f x[b, f] w[f, g] + bias[g]`.
pub fn dense_forward(x: &[f64], n: usize, f: usize, g: usize, w: &[f64], b: &[f64], out: &mut [f64]) {
    for bi in 0..n {
        let xb = &x[bi * f..][..f];
        let ob = &mut out[bi * g..][..g];
        ob.copy_from_slice(&b[..g]);
        for (fi, &xv) in xb.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &w[fi * g..][..g];
            for gi in 0..g {
                ob[gi] += xv * wrow[gi];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward(
    x: &[f64],
    n: usize,
    f: usize,
    g: usize,
    w: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let mut dx = dx;
    let mut dw = dw;
    let mut db = db;
    for bi in 0..n {
        let xb = &x[bi * f..][..f];
        let dyb = &dy[bi * g..][..g];
        if let Some(db) = db.as_deref_mut() {
            for gi in 0..g {
                db[gi] += dyb[gi];
            }
        }
        for fi in 0..f {
            let wrow = &w[fi * g..][..g];
            if let Some(dx) = dx.as_deref_mut() {
                let mut acc = 0.0;
                for gi in 0..g {
                    acc += dyb[gi] * wrow[gi];
                }
                dx[bi * f + fi] += acc;
            }
            if let Some(dw) = dw.as_deref_mut() {
                let xv = xb[fi];
                if xv != 0.0 {
                    let drow = &mut dw[fi * g..][..g];
                    for gi in 0..g {
                        drow[gi] += xv * dyb[gi];
                    }
                }
            }
        }
    }
}
