//! Raw forward and backward numeric routines for the network primitives.
//!
//! Everything here is a pure function from slices to freshly allocated
//! buffers with a fixed summation order, so outputs are bitwise reproducible
//! run to run. The 4-d layout is `(batch, channel, row, col)`, row-major.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Valid output index range `[lo, hi)` such that
/// `0 <= o * stride + k - pad < in_extent` for every `o` in the range.
#[inline]
fn valid_out_range(in_extent: usize, out_extent: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let s = stride as i64;
    let shift = k as i64 - pad as i64;
    let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
    let hi_inclusive = (in_extent as i64 - 1 - shift).div_euclid(s);
    let hi = (hi_inclusive + 1).clamp(0, out_extent as i64);
    (lo.clamp(0, out_extent as i64) as usize, hi as usize)
}

pub fn conv2d_out_size(h: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = h + 2 * pad;
    if padded < k {
        return Err(Error::ShapeMismatch(format!(
            "kernel size {k} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn check_conv_args(stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::InvalidParam("stride must be positive".into()));
    }
    Ok(())
}

pub fn conv2d_fwd(x: &Tensor, k: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    check_conv_args(stride)?;
    let (b, ci, h, w) = x.dims4()?;
    let (co, kci, kh, kw) = k.dims4()?;
    if kci != ci {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: input has {ci} channels but kernel expects {kci}"
        )));
    }
    if bias.shape() != [co] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: bias shape {:?} does not match {co} output channels",
            bias.shape()
        )));
    }
    let oh = conv2d_out_size(h, kh, stride, pad)?;
    let ow = conv2d_out_size(w, kw, stride, pad)?;

    let xd = x.data();
    let kd = k.data();
    let bd = bias.data();
    let mut out = vec![0.0f64; b * co * oh * ow];

    for bi in 0..b {
        for c_out in 0..co {
            let plane = &mut out[(bi * co + c_out) * oh * ow..(bi * co + c_out + 1) * oh * ow];
            plane.fill(bd[c_out]);
            for c_in in 0..ci {
                let x_plane = &xd[(bi * ci + c_in) * h * w..(bi * ci + c_in + 1) * h * w];
                for krow in 0..kh {
                    for kcol in 0..kw {
                        let weight = kd[((c_out * ci + c_in) * kh + krow) * kw + kcol];
                        if weight == 0.0 {
                            continue;
                        }
                        let (or_lo, or_hi) = valid_out_range(h, oh, stride, pad, krow);
                        let (oc_lo, oc_hi) = valid_out_range(w, ow, stride, pad, kcol);
                        if oc_lo >= oc_hi {
                            continue;
                        }
                        for o_row in or_lo..or_hi {
                            let i_row = o_row * stride + krow - pad;
                            let out_row = &mut plane[o_row * ow + oc_lo..o_row * ow + oc_hi];
                            if stride == 1 {
                                let i_col0 = oc_lo + kcol - pad;
                                let x_row = &x_plane[i_row * w + i_col0..i_row * w + i_col0 + out_row.len()];
                                for (o, &xv) in out_row.iter_mut().zip(x_row) {
                                    *o += weight * xv;
                                }
                            } else {
                                for (idx, o) in out_row.iter_mut().enumerate() {
                                    let i_col = (oc_lo + idx) * stride + kcol - pad;
                                    *o += weight * x_plane[i_row * w + i_col];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, co, oh, ow], out)
}

pub fn conv2d_bwd_input(g_out: &Tensor, k: &Tensor, stride: usize, pad: usize, in_shape: &[usize]) -> Result<Tensor> {
    let (b, co, oh, ow) = g_out.dims4()?;
    let (kco, ci, kh, kw) = k.dims4()?;
    debug_assert_eq!(kco, co);
    let (h, w) = (in_shape[2], in_shape[3]);
    let gd = g_out.data();
    let kd = k.data();
    let mut g_in = vec![0.0f64; b * ci * h * w];

    for bi in 0..b {
        for c_out in 0..co {
            let g_plane = &gd[(bi * co + c_out) * oh * ow..(bi * co + c_out + 1) * oh * ow];
            for c_in in 0..ci {
                let gi_plane = &mut g_in[(bi * ci + c_in) * h * w..(bi * ci + c_in + 1) * h * w];
                for krow in 0..kh {
                    for kcol in 0..kw {
                        let weight = kd[((c_out * ci + c_in) * kh + krow) * kw + kcol];
                        if weight == 0.0 {
                            continue;
                        }
                        let (or_lo, or_hi) = valid_out_range(h, oh, stride, pad, krow);
                        let (oc_lo, oc_hi) = valid_out_range(w, ow, stride, pad, kcol);
                        if oc_lo >= oc_hi {
                            continue;
                        }
                        for o_row in or_lo..or_hi {
                            let i_row = o_row * stride + krow - pad;
                            let g_row = &g_plane[o_row * ow + oc_lo..o_row * ow + oc_hi];
                            if stride == 1 {
                                let i_col0 = oc_lo + kcol - pad;
                                let gi_row = &mut gi_plane[i_row * w + i_col0..i_row * w + i_col0 + g_row.len()];
                                for (gi, &gv) in gi_row.iter_mut().zip(g_row) {
                                    *gi += weight * gv;
                                }
                            } else {
                                for (idx, &gv) in g_row.iter().enumerate() {
                                    let i_col = (oc_lo + idx) * stride + kcol - pad;
                                    gi_plane[i_row * w + i_col] += weight * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), g_in)
}

pub fn conv2d_bwd_kernel(g_out: &Tensor, x: &Tensor, stride: usize, pad: usize, k_shape: &[usize]) -> Result<Tensor> {
    let (b, co, oh, ow) = g_out.dims4()?;
    let (_, ci, h, w) = x.dims4()?;
    let (kh, kw) = (k_shape[2], k_shape[3]);
    let gd = g_out.data();
    let xd = x.data();
    let mut g_k = vec![0.0f64; co * ci * kh * kw];

    for c_out in 0..co {
        for c_in in 0..ci {
            for krow in 0..kh {
                for kcol in 0..kw {
                    let (or_lo, or_hi) = valid_out_range(h, oh, stride, pad, krow);
                    let (oc_lo, oc_hi) = valid_out_range(w, ow, stride, pad, kcol);
                    let mut acc = 0.0f64;
                    for bi in 0..b {
                        let g_plane = &gd[(bi * co + c_out) * oh * ow..(bi * co + c_out + 1) * oh * ow];
                        let x_plane = &xd[(bi * ci + c_in) * h * w..(bi * ci + c_in + 1) * h * w];
                        for o_row in or_lo..or_hi {
                            let i_row = o_row * stride + krow - pad;
                            let g_row = &g_plane[o_row * ow + oc_lo..o_row * ow + oc_hi];
                            if stride == 1 {
                                let i_col0 = oc_lo + kcol - pad;
                                let x_row = &x_plane[i_row * w + i_col0..i_row * w + i_col0 + g_row.len()];
                                for (&gv, &xv) in g_row.iter().zip(x_row) {
                                    acc += gv * xv;
                                }
                            } else {
                                for (idx, &gv) in g_row.iter().enumerate() {
                                    let i_col = (oc_lo + idx) * stride + kcol - pad;
                                    acc += gv * x_plane[i_row * w + i_col];
                                }
                            }
                        }
                    }
                    g_k[((c_out * ci + c_in) * kh + krow) * kw + kcol] = acc;
                }
            }
        }
    }
    Tensor::new(k_shape.to_vec(), g_k)
}

pub fn sum_over_spatial_and_batch(g_out: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = g_out.dims4()?;
    let gd = g_out.data();
    let mut out = vec![0.0f64; c];
    for bi in 0..b {
        for ch in 0..c {
            let plane = &gd[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
            let mut acc = 0.0;
            for &v in plane {
                acc += v;
            }
            out[ch] += acc;
        }
    }
    Tensor::new(vec![c], out)
}

/// Transposed convolution. Kernel layout is `(in_channels, out_channels, kh, kw)`;
/// output extent is `(in - 1) * stride - 2 * pad + k`.
pub fn convt2d_fwd(x: &Tensor, k: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    check_conv_args(stride)?;
    let (b, ci, h, w) = x.dims4()?;
    let (kci, co, kh, kw) = k.dims4()?;
    if kci != ci {
        return Err(Error::ShapeMismatch(format!(
            "conv_transpose2d: input has {ci} channels but kernel expects {kci}"
        )));
    }
    if bias.shape() != [co] {
        return Err(Error::ShapeMismatch(format!(
            "conv_transpose2d: bias shape {:?} does not match {co} output channels",
            bias.shape()
        )));
    }
    let oh_calc = (h - 1) * stride + kh;
    let ow_calc = (w - 1) * stride + kw;
    if oh_calc < 2 * pad || ow_calc < 2 * pad {
        return Err(Error::ShapeMismatch(
            "conv_transpose2d: padding larger than produced extent".into(),
        ));
    }
    let oh = oh_calc - 2 * pad;
    let ow = ow_calc - 2 * pad;

    let xd = x.data();
    let kd = k.data();
    let bd = bias.data();
    let mut out = vec![0.0f64; b * co * oh * ow];

    for bi in 0..b {
        for c_out in 0..co {
            let plane = &mut out[(bi * co + c_out) * oh * ow..(bi * co + c_out + 1) * oh * ow];
            plane.fill(bd[c_out]);
            for c_in in 0..ci {
                let x_plane = &xd[(bi * ci + c_in) * h * w..(bi * ci + c_in + 1) * h * w];
                for krow in 0..kh {
                    for kcol in 0..kw {
                        let weight = kd[((c_in * co + c_out) * kh + krow) * kw + kcol];
                        if weight == 0.0 {
                            continue;
                        }
                        // Input index ranges whose scattered target stays in bounds.
                        let (ir_lo, ir_hi) = valid_out_range(oh, h, stride, pad, krow);
                        let (ic_lo, ic_hi) = valid_out_range(ow, w, stride, pad, kcol);
                        for i_row in ir_lo..ir_hi {
                            let o_row = i_row * stride + krow - pad;
                            let x_row = &x_plane[i_row * w + ic_lo..i_row * w + ic_hi];
                            let out_row = &mut plane[o_row * ow..(o_row + 1) * ow];
                            for (idx, &xv) in x_row.iter().enumerate() {
                                let o_col = (ic_lo + idx) * stride + kcol - pad;
                                out_row[o_col] += weight * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, co, oh, ow], out)
}

pub fn convt2d_bwd_input(g_out: &Tensor, k: &Tensor, stride: usize, pad: usize, in_shape: &[usize]) -> Result<Tensor> {
    let (b, co, oh, ow) = g_out.dims4()?;
    let (ci, kco, kh, kw) = k.dims4()?;
    debug_assert_eq!(kco, co);
    let (h, w) = (in_shape[2], in_shape[3]);
    let gd = g_out.data();
    let kd = k.data();
    let mut g_in = vec![0.0f64; b * ci * h * w];

    for bi in 0..b {
        for c_in in 0..ci {
            let gi_plane = &mut g_in[(bi * ci + c_in) * h * w..(bi * ci + c_in + 1) * h * w];
            for c_out in 0..co {
                let g_plane = &gd[(bi * co + c_out) * oh * ow..(bi * co + c_out + 1) * oh * ow];
                for krow in 0..kh {
                    for kcol in 0..kw {
                        let weight = kd[((c_in * co + c_out) * kh + krow) * kw + kcol];
                        if weight == 0.0 {
                            continue;
                        }
                        let (ir_lo, ir_hi) = valid_out_range(oh, h, stride, pad, krow);
                        let (ic_lo, ic_hi) = valid_out_range(ow, w, stride, pad, kcol);
                        for i_row in ir_lo..ir_hi {
                            let o_row = i_row * stride + krow - pad;
                            let gi_row = &mut gi_plane[i_row * w + ic_lo..i_row * w + ic_hi];
                            let g_row = &g_plane[o_row * ow..(o_row + 1) * ow];
                            for (idx, gi) in gi_row.iter_mut().enumerate() {
                                let o_col = (ic_lo + idx) * stride + kcol - pad;
                                *gi += weight * g_row[o_col];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), g_in)
}

pub fn convt2d_bwd_kernel(g_out: &Tensor, x: &Tensor, stride: usize, pad: usize, k_shape: &[usize]) -> Result<Tensor> {
    let (b, co, oh, ow) = g_out.dims4()?;
    let (_, ci, h, w) = x.dims4()?;
    let (kh, kw) = (k_shape[2], k_shape[3]);
    let gd = g_out.data();
    let xd = x.data();
    let mut g_k = vec![0.0f64; ci * co * kh * kw];

    for c_in in 0..ci {
        for c_out in 0..co {
            for krow in 0..kh {
                for kcol in 0..kw {
                    let (ir_lo, ir_hi) = valid_out_range(oh, h, stride, pad, krow);
                    let (ic_lo, ic_hi) = valid_out_range(ow, w, stride, pad, kcol);
                    let mut acc = 0.0f64;
                    for bi in 0..b {
                        let x_plane = &xd[(bi * ci + c_in) * h * w..(bi * ci + c_in + 1) * h * w];
                        let g_plane = &gd[(bi * co + c_out) * oh * ow..(bi * co + c_out + 1) * oh * ow];
                        for i_row in ir_lo..ir_hi {
                            let o_row = i_row * stride + krow - pad;
                            let x_row = &x_plane[i_row * w + ic_lo..i_row * w + ic_hi];
                            let g_row = &g_plane[o_row * ow..(o_row + 1) * ow];
                            for (idx, &xv) in x_row.iter().enumerate() {
                                let o_col = (ic_lo + idx) * stride + kcol - pad;
                                acc += xv * g_row[o_col];
                            }
                        }
                    }
                    g_k[((c_in * co + c_out) * kh + krow) * kw + kcol] = acc;
                }
            }
        }
    }
    Tensor::new(k_shape.to_vec(), g_k)
}

/// Max pooling with `stride == window`. Returns the pooled tensor and the
/// flat input index of each window maximum (first maximum in row-major
/// order when values tie).
pub fn maxpool_fwd(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<u32>)> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidParam("pool window and stride must be positive".into()));
    }
    if window != stride {
        return Err(Error::InvalidParam(
            "max_pool2d supports window == stride only".into(),
        ));
    }
    let (b, c, h, w) = x.dims4()?;
    if h % window != 0 || w % window != 0 {
        return Err(Error::ShapeMismatch(format!(
            "max_pool2d: spatial dims ({h},{w}) not divisible by window {window}"
        )));
    }
    let (oh, ow) = (h / window, w / window);
    let xd = x.data();
    let mut out = vec![0.0f64; b * c * oh * ow];
    let mut argmax = vec![0u32; b * c * oh * ow];

    for bi in 0..b {
        for ch in 0..c {
            let plane_off = (bi * c + ch) * h * w;
            let out_off = (bi * c + ch) * oh * ow;
            for o_row in 0..oh {
                for o_col in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dr in 0..window {
                        let row = o_row * window + dr;
                        for dc in 0..window {
                            let col = o_col * window + dc;
                            let idx = plane_off + row * w + col;
                            let v = xd[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    out[out_off + o_row * ow + o_col] = best;
                    argmax[out_off + o_row * ow + o_col] = best_idx as u32;
                }
            }
        }
    }
    Ok((Tensor::new(vec![b, c, oh, ow], out)?, argmax))
}

pub fn maxpool_bwd(g_out: &Tensor, argmax: &[u32], in_shape: &[usize]) -> Result<Tensor> {
    let numel: usize = in_shape.iter().product();
    let mut g_in = vec![0.0f64; numel];
    for (&g, &idx) in g_out.data().iter().zip(argmax) {
        g_in[idx as usize] += g;
    }
    Tensor::new(in_shape.to_vec(), g_in)
}

/// Per-channel mean and biased variance over batch and spatial dims.
pub fn bn_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (b, c, h, w) = x.dims4()?;
    let n = (b * h * w) as f64;
    let xd = x.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for bi in 0..b {
            let plane = &xd[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
            for &v in plane {
                acc += v;
            }
        }
        mean[ch] = acc / n;
    }
    for ch in 0..c {
        let m = mean[ch];
        let mut acc = 0.0;
        for bi in 0..b {
            let plane = &xd[(bi * c + ch) * h * w..(bi * c + ch + 1) * h * w];
            for &v in plane {
                let d = v - m;
                acc += d * d;
            }
        }
        var[ch] = acc / n;
    }
    Ok((mean, var))
}

/// Normalizes with the given per-channel statistics. Returns `(output, x_hat,
/// inv_std)`; `x_hat` and `inv_std` are the values the backward pass needs.
pub fn bn_normalize(
    x: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (b, c, h, w) = x.dims4()?;
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "batch_norm: scale/shift must have shape [{c}], got {:?}/{:?}",
            scale.shape(),
            shift.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidParam("batch_norm eps must be positive".into()));
    }
    let xd = x.data();
    let sd = scale.data();
    let bd = shift.data();
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0f64; xd.len()];
    let mut xhat = vec![0.0f64; xd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * h * w;
            let (m, is, g, be) = (mean[ch], inv_std[ch], sd[ch], bd[ch]);
            for i in 0..h * w {
                let xh = (xd[off + i] - m) * is;
                xhat[off + i] = xh;
                out[off + i] = g * xh + be;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        Tensor::new(x.shape().to_vec(), xhat)?,
        inv_std,
    ))
}

/// Backward pass of training-mode batch norm.
/// Returns `(g_input, g_scale, g_shift)`.
pub fn bn_bwd(
    g_out: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    scale: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, c, h, w) = g_out.dims4()?;
    let n = (b * h * w) as f64;
    let gd = g_out.data();
    let xh = xhat.data();
    let sd = scale.data();

    let mut g_scale = vec![0.0f64; c];
    let mut g_shift = vec![0.0f64; c];
    for ch in 0..c {
        let mut s_g = 0.0;
        let mut s_gx = 0.0;
        for bi in 0..b {
            let off = (bi * c + ch) * h * w;
            for i in 0..h * w {
                s_g += gd[off + i];
                s_gx += gd[off + i] * xh[off + i];
            }
        }
        g_shift[ch] = s_g;
        g_scale[ch] = s_gx;
    }

    let mut g_in = vec![0.0f64; gd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * h * w;
            let coeff = sd[ch] * inv_std[ch];
            let mean_g = g_shift[ch] / n;
            let mean_gx = g_scale[ch] / n;
            for i in 0..h * w {
                g_in[off + i] = coeff * (gd[off + i] - mean_g - xh[off + i] * mean_gx);
            }
        }
    }
    Ok((
        Tensor::new(g_out.shape().to_vec(), g_in)?,
        Tensor::new(vec![c], g_scale)?,
        Tensor::new(vec![c], g_shift)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(b: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![b, c, h, w], data).unwrap()
    }

    /// Direct nested-sum convolution used as the independent oracle.
    pub(crate) fn conv2d_oracle(x: &Tensor, k: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (b, ci, h, w) = x.dims4().unwrap();
        let (co, _, kh, kw) = k.dims4().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[b, co, oh, ow]);
        let out_d = out.data_mut();
        for bi in 0..b {
            for c_out in 0..co {
                for o_row in 0..oh {
                    for o_col in 0..ow {
                        let mut acc = bias.data()[c_out];
                        for c_in in 0..ci {
                            for krow in 0..kh {
                                for kcol in 0..kw {
                                    let ir = o_row as i64 * stride as i64 + krow as i64 - pad as i64;
                                    let ic = o_col as i64 * stride as i64 + kcol as i64 - pad as i64;
                                    if ir >= 0 && (ir as usize) < h && ic >= 0 && (ic as usize) < w {
                                        acc += x.at(&[bi, c_in, ir as usize, ic as usize])
                                            * k.at(&[c_out, c_in, krow, kcol]);
                                    }
                                }
                            }
                        }
                        out_d[((bi * co + c_out) * oh + o_row) * ow + o_col] = acc;
                    }
                }
            }
        }
        out
    }

    /// Direct scatter-sum transposed convolution oracle.
    pub(crate) fn convt2d_oracle(x: &Tensor, k: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (b, ci, h, w) = x.dims4().unwrap();
        let (_, co, kh, kw) = k.dims4().unwrap();
        let oh = (h - 1) * stride + kh - 2 * pad;
        let ow = (w - 1) * stride + kw - 2 * pad;
        let mut out = Tensor::zeros(&[b, co, oh, ow]);
        let out_d = out.data_mut();
        for v in out_d.iter_mut().enumerate() {
            let (idx, slot) = v;
            let c_out = (idx / (oh * ow)) % co;
            *slot = bias.data()[c_out];
        }
        for bi in 0..b {
            for c_in in 0..ci {
                for i_row in 0..h {
                    for i_col in 0..w {
                        let xv = x.at(&[bi, c_in, i_row, i_col]);
                        for c_out in 0..co {
                            for krow in 0..kh {
                                for kcol in 0..kw {
                                    let or = i_row as i64 * stride as i64 + krow as i64 - pad as i64;
                                    let oc = i_col as i64 * stride as i64 + kcol as i64 - pad as i64;
                                    if or >= 0 && (or as usize) < oh && oc >= 0 && (oc as usize) < ow {
                                        out_d[((bi * co + c_out) * oh + or as usize) * ow + oc as usize] +=
                                            xv * k.at(&[c_in, c_out, krow, kcol]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let x = t4(1, 1, 3, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0; // center tap
        let bias = Tensor::zeros(&[1]);
        let y = conv2d_fwd(&x, &k, &bias, 1, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn all_ones_kernel_center_sum() {
        let x = t4(1, 1, 3, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let bias = Tensor::zeros(&[1]);
        let y = conv2d_fwd(&x, &k, &bias, 1, 1).unwrap();
        assert_eq!(y.at(&[0, 0, 1, 1]), 45.0);
        // corner sums only the in-bounds taps
        assert_eq!(y.at(&[0, 0, 0, 0]), 1.0 + 2.0 + 4.0 + 5.0);
    }

    #[test]
    fn conv2d_matches_direct_sum_oracle() {
        let mut state = 0x243f6a8885a308d3u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for &(b, ci, co, h, w, kh, stride, pad) in &[
            (2usize, 3usize, 4usize, 5usize, 6usize, 3usize, 1usize, 1usize),
            (1, 2, 2, 7, 7, 3, 2, 1),
            (2, 1, 3, 4, 4, 1, 1, 0),
            (1, 3, 2, 6, 5, 3, 1, 0),
        ] {
            let x = Tensor::from_fn(&[b, ci, h, w], |_| next());
            let k = Tensor::from_fn(&[co, ci, kh, kh], |_| next());
            let bias = Tensor::from_fn(&[co], |_| next());
            let got = conv2d_fwd(&x, &k, &bias, stride, pad).unwrap();
            let want = conv2d_oracle(&x, &k, &bias, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (g, w_) in got.data().iter().zip(want.data()) {
                assert!((g - w_).abs() < 1e-10, "conv mismatch: {g} vs {w_}");
            }
        }
    }

    #[test]
    fn conv2d_rejects_bad_args() {
        let x = t4(1, 2, 4, 4, vec![0.0; 32]);
        let k = Tensor::zeros(&[3, 3, 3, 3]); // wrong input channels
        let bias = Tensor::zeros(&[3]);
        assert!(matches!(
            conv2d_fwd(&x, &k, &bias, 1, 1),
            Err(Error::ShapeMismatch(_))
        ));
        let k_ok = Tensor::zeros(&[3, 2, 3, 3]);
        assert!(matches!(
            conv2d_fwd(&x, &k_ok, &bias, 0, 1),
            Err(Error::InvalidParam(_))
        ));
    }

    #[test]
    fn convt2d_single_pixel_is_cropped_kernel() {
        let x = t4(1, 1, 1, 1, vec![3.0]);
        let k = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let bias = Tensor::zeros(&[1]);
        let y = convt2d_fwd(&x, &k, &bias, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        // output = v * K[1..3, 1..3]
        assert_eq!(y.data(), &[3.0 * 5.0, 3.0 * 6.0, 3.0 * 9.0, 3.0 * 10.0]);
    }

    #[test]
    fn convt2d_matches_scatter_oracle() {
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for &(b, ci, co, h, w) in &[(1usize, 2usize, 3usize, 3usize, 4usize), (2, 3, 2, 5, 5)] {
            let x = Tensor::from_fn(&[b, ci, h, w], |_| next());
            let k = Tensor::from_fn(&[ci, co, 4, 4], |_| next());
            let bias = Tensor::from_fn(&[co], |_| next());
            let got = convt2d_fwd(&x, &k, &bias, 2, 1).unwrap();
            let want = convt2d_oracle(&x, &k, &bias, 2, 1);
            assert_eq!(got.shape(), want.shape());
            assert_eq!(got.shape()[2], 2 * h);
            for (g, w_) in got.data().iter().zip(want.data()) {
                assert!((g - w_).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn maxpool_basic_and_tie_break() {
        let x = t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let (y, _) = maxpool_fwd(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);

        // constant input routes gradient to the first element of the window
        let c = t4(1, 1, 2, 2, vec![7.0; 4]);
        let (y, argmax) = maxpool_fwd(&c, 2, 2).unwrap();
        assert_eq!(y.data(), &[7.0]);
        assert_eq!(argmax, vec![0]);
        let g = maxpool_bwd(&Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(), &argmax, &[1, 1, 2, 2]).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_matches_bruteforce_windows() {
        let mut state = 77u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let x = Tensor::from_fn(&[2, 3, 4, 4], |_| next());
        let (y, _) = maxpool_fwd(&x, 2, 2).unwrap();
        for bi in 0..2 {
            for ch in 0..3 {
                for or in 0..2 {
                    for oc in 0..2 {
                        let mut best = f64::NEG_INFINITY;
                        for dr in 0..2 {
                            for dc in 0..2 {
                                best = best.max(x.at(&[bi, ch, or * 2 + dr, oc * 2 + dc]));
                            }
                        }
                        assert_eq!(y.at(&[bi, ch, or, oc]), best);
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let x = t4(1, 1, 3, 4, vec![0.0; 12]);
        assert!(matches!(maxpool_fwd(&x, 2, 2), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn bn_constant_channel_maps_to_shift() {
        let x = t4(2, 1, 2, 2, vec![5.0; 8]);
        let scale = Tensor::full(&[1], 2.0);
        let shift = Tensor::full(&[1], -3.0);
        let (mean, var) = bn_stats(&x).unwrap();
        assert_eq!(mean, vec![5.0]);
        assert_eq!(var, vec![0.0]);
        let (y, _, _) = bn_normalize(&x, &scale, &shift, &mean, &var, 1e-5).unwrap();
        for &v in y.data() {
            assert!((v - -3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_unit_scale_keeps_standardized_input() {
        // batch mean 0, variance 1 per channel
        let x = t4(1, 1, 1, 2, vec![-1.0, 1.0]);
        let scale = Tensor::full(&[1], 1.0);
        let shift = Tensor::zeros(&[1]);
        let (mean, var) = bn_stats(&x).unwrap();
        let eps = 1e-9;
        let (y, _, _) = bn_normalize(&x, &scale, &shift, &mean, &var, eps).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bn_rejects_nonpositive_eps() {
        let x = t4(1, 1, 2, 2, vec![0.0; 4]);
        let s = Tensor::full(&[1], 1.0);
        let b = Tensor::zeros(&[1]);
        let (mean, var) = bn_stats(&x).unwrap();
        assert!(matches!(
            bn_normalize(&x, &s, &b, &mean, &var, 0.0),
            Err(Error::InvalidParam(_))
        ));
    }
}
