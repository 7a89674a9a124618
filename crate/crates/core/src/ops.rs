//! Forward and backward kernels on plain tensors.
//!
//! Every kernel accumulates in a fixed sequential order, so identical
//! inputs always produce bit-identical outputs. The differentiable wrappers
//! in [`crate::autograd`] are built from these.

use crate::error::{dim_err, Result};
use crate::tensor::{mismatch, Shape, Tensor};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(dim_err!("kernel ({kernel}) and stride ({stride}) must be positive"));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(dim_err!(
            "kernel {kernel} larger than padded input {padded} (input {input}, padding {padding})"
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

pub fn conv_transpose_out_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if kernel == 0 || stride == 0 || input == 0 {
        return Err(dim_err!(
            "transposed convolution needs positive input ({input}), kernel ({kernel}) and stride ({stride})"
        ));
    }
    let full = (input - 1) * stride + kernel;
    if full <= 2 * padding {
        return Err(dim_err!(
            "transposed convolution output size {full} - 2*{padding} is not positive"
        ));
    }
    Ok(full - 2 * padding)
}

/// Range of output coordinates `o` for which `o*stride + k - pad` lands in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let (k, s, p, len) = (k as isize, stride as isize, pad as isize, len as isize);
    let lo = if p - k > 0 { (p - k + s - 1) / s } else { 0 };
    let hi_num = len - 1 + p - k;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num / s + 1).min(out_len as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn check_conv(x: Shape, w: Shape, bias: Option<&Tensor>) -> Result<()> {
    if x.c() != w.0[1] {
        return Err(dim_err!(
            "conv2d: input channel axis has {} but weight {:?} expects {}",
            x.c(),
            w,
            w.0[1]
        ));
    }
    if w.h() != w.w() {
        return Err(dim_err!("conv2d: non-square kernel {w:?}"));
    }
    if let Some(b) = bias {
        if b.numel() != w.n() {
            return Err(dim_err!(
                "conv2d: bias has {} entries for {} output channels",
                b.numel(),
                w.n()
            ));
        }
    }
    Ok(())
}

/// Cross-correlation of `x (n, ci, h, w)` with `weight (co, ci, k, k)`,
/// zero padding.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), weight.shape());
    check_conv(xs, ws, bias)?;
    let k = ws.h();
    let ho = conv_out_size(xs.h(), k, stride, padding)?;
    let wo = conv_out_size(xs.w(), k, stride, padding)?;
    let (n, ci, h, w, co) = (xs.n(), xs.c(), xs.h(), xs.w(), ws.n());
    let mut out = vec![0.0; n * co * ho * wo];
    let xd = x.data();
    let wd = weight.data();
    let (oy_lo, oy_hi): (Vec<_>, Vec<_>) = (0..k).map(|ky| valid_range(ho, h, ky, stride, padding)).unzip();
    let (ox_lo, ox_hi): (Vec<_>, Vec<_>) = (0..k).map(|kx| valid_range(wo, w, kx, stride, padding)).unzip();
    for b in 0..n {
        for o in 0..co {
            let plane = &mut out[(b * co + o) * ho * wo..(b * co + o + 1) * ho * wo];
            if let Some(bias) = bias {
                plane.fill(bias.data()[o]);
            }
            for i in 0..ci {
                let xin = &xd[(b * ci + i) * h * w..(b * ci + i + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wd[((o * ci + i) * k + ky) * k + kx];
                        for oy in oy_lo[ky]..oy_hi[ky] {
                            let iy = oy * stride + ky - padding;
                            let row = &xin[iy * w..(iy + 1) * w];
                            let orow = &mut plane[oy * wo..(oy + 1) * wo];
                            for ox in ox_lo[kx]..ox_hi[kx] {
                                orow[ox] += wv * row[ox * stride + kx - padding];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(Shape::new(n, co, ho, wo), out))
}

/// Gradient of `conv2d` with respect to its input; also the forward pass of
/// the transposed convolution.
pub fn conv2d_grad_input(
    gy: &Tensor,
    weight: &Tensor,
    x_shape: Shape,
    stride: usize,
    padding: usize,
) -> Tensor {
    let (gs, ws) = (gy.shape(), weight.shape());
    let (n, co, ho, wo) = (gs.n(), gs.c(), gs.h(), gs.w());
    let (ci, h, w, k) = (ws.0[1], x_shape.h(), x_shape.w(), ws.h());
    let mut gx = vec![0.0; n * ci * h * w];
    let gd = gy.data();
    let wd = weight.data();
    let (oy_lo, oy_hi): (Vec<_>, Vec<_>) = (0..k).map(|ky| valid_range(ho, h, ky, stride, padding)).unzip();
    let (ox_lo, ox_hi): (Vec<_>, Vec<_>) = (0..k).map(|kx| valid_range(wo, w, kx, stride, padding)).unzip();
    for b in 0..n {
        for o in 0..co {
            let gplane = &gd[(b * co + o) * ho * wo..(b * co + o + 1) * ho * wo];
            for i in 0..ci {
                let xplane = &mut gx[(b * ci + i) * h * w..(b * ci + i + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wd[((o * ci + i) * k + ky) * k + kx];
                        for oy in oy_lo[ky]..oy_hi[ky] {
                            let iy = oy * stride + ky - padding;
                            let grow = &gplane[oy * wo..(oy + 1) * wo];
                            let xrow = &mut xplane[iy * w..(iy + 1) * w];
                            for ox in ox_lo[kx]..ox_hi[kx] {
                                xrow[ox * stride + kx - padding] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(Shape::new(n, ci, h, w), gx)
}

/// Gradient of `conv2d` with respect to its weight.
pub fn conv2d_grad_weight(
    gy: &Tensor,
    x: &Tensor,
    w_shape: Shape,
    stride: usize,
    padding: usize,
) -> Tensor {
    let (gs, xs) = (gy.shape(), x.shape());
    let (n, co, ho, wo) = (gs.n(), gs.c(), gs.h(), gs.w());
    let (ci, h, w, k) = (xs.c(), xs.h(), xs.w(), w_shape.h());
    let mut gw = vec![0.0; w_shape.numel()];
    let gd = gy.data();
    let xd = x.data();
    let (oy_lo, oy_hi): (Vec<_>, Vec<_>) = (0..k).map(|ky| valid_range(ho, h, ky, stride, padding)).unzip();
    let (ox_lo, ox_hi): (Vec<_>, Vec<_>) = (0..k).map(|kx| valid_range(wo, w, kx, stride, padding)).unzip();
    for o in 0..co {
        for i in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for b in 0..n {
                        let gplane = &gd[(b * co + o) * ho * wo..(b * co + o + 1) * ho * wo];
                        let xplane = &xd[(b * ci + i) * h * w..(b * ci + i + 1) * h * w];
                        for oy in oy_lo[ky]..oy_hi[ky] {
                            let iy = oy * stride + ky - padding;
                            let grow = &gplane[oy * wo..(oy + 1) * wo];
                            let xrow = &xplane[iy * w..(iy + 1) * w];
                            for ox in ox_lo[kx]..ox_hi[kx] {
                                acc += grow[ox] * xrow[ox * stride + kx - padding];
                            }
                        }
                    }
                    gw[((o * ci + i) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    Tensor::from_parts(w_shape, gw)
}

/// Per-channel sum over batch and spatial axes, as a `(1, c, 1, 1)` vector.
pub fn channel_sum(t: &Tensor) -> Tensor {
    let s = t.shape();
    let plane = s.h() * s.w();
    let mut out = vec![0.0; s.c()];
    for b in 0..s.n() {
        for (c, acc) in out.iter_mut().enumerate() {
            let start = (b * s.c() + c) * plane;
            *acc = t.data()[start..start + plane].iter().fold(*acc, |a, &v| a + v);
        }
    }
    Tensor::vector(out)
}

/// Transposed convolution of `x (n, ci, h, w)` with `weight (ci, co, k, k)`.
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.c() != ws.n() {
        return Err(dim_err!(
            "conv_transpose2d: input channel axis has {} but weight {:?} expects {}",
            xs.c(),
            ws,
            ws.n()
        ));
    }
    if ws.h() != ws.w() {
        return Err(dim_err!("conv_transpose2d: non-square kernel {ws:?}"));
    }
    let k = ws.h();
    let ho = conv_transpose_out_size(xs.h(), k, stride, padding)?;
    let wo = conv_transpose_out_size(xs.w(), k, stride, padding)?;
    let co = ws.0[1];
    if let Some(b) = bias {
        if b.numel() != co {
            return Err(dim_err!(
                "conv_transpose2d: bias has {} entries for {co} output channels",
                b.numel()
            ));
        }
    }
    let mut out = conv2d_grad_input(x, weight, Shape::new(xs.n(), co, ho, wo), stride, padding);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b);
    }
    Ok(out)
}

pub fn add_channel_bias(t: &mut Tensor, bias: &Tensor) {
    let s = t.shape();
    let plane = s.h() * s.w();
    let bd: Vec<f64> = bias.data().to_vec();
    for b in 0..s.n() {
        for (c, &bv) in bd.iter().enumerate() {
            let start = (b * s.c() + c) * plane;
            for v in &mut t.data_mut()[start..start + plane] {
                *v += bv;
            }
        }
    }
}

/// Elementwise `f(a, b)` with size-1 axes broadcast.
pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return a.zip_map(b, f);
    }
    let out = sa.broadcast(&sb)?;
    let st_a = broadcast_strides(sa);
    let st_b = broadcast_strides(sb);
    let [n, c, h, w] = out.0;
    let mut data = Vec::with_capacity(out.numel());
    let (ad, bd) = (a.data(), b.data());
    for i0 in 0..n {
        for i1 in 0..c {
            for i2 in 0..h {
                let base_a = i0 * st_a[0] + i1 * st_a[1] + i2 * st_a[2];
                let base_b = i0 * st_b[0] + i1 * st_b[1] + i2 * st_b[2];
                for i3 in 0..w {
                    data.push(f(ad[base_a + i3 * st_a[3]], bd[base_b + i3 * st_b[3]]));
                }
            }
        }
    }
    Ok(Tensor::from_parts(out, data))
}

fn broadcast_strides(s: Shape) -> [usize; 4] {
    let mut st = s.strides();
    for axis in 0..4 {
        if s.0[axis] == 1 {
            st[axis] = 0;
        }
    }
    st
}

/// Sum `grad` over the axes on which `target` was broadcast.
pub fn reduce_to(grad: &Tensor, target: Shape) -> Tensor {
    let gs = grad.shape();
    if gs == target {
        return grad.clone();
    }
    let st = broadcast_strides(target);
    let mut out = vec![0.0; target.numel()];
    let [n, c, h, w] = gs.0;
    let gd = grad.data();
    let mut idx = 0;
    for i0 in 0..n {
        for i1 in 0..c {
            for i2 in 0..h {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..w {
                    out[base + i3 * st[3]] += gd[idx];
                    idx += 1;
                }
            }
        }
    }
    Tensor::from_parts(target, out)
}

/// Concatenate along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| dim_err!("concat of zero tensors"))?
        .shape();
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        if s.n() != first.n() || s.h() != first.h() || s.w() != first.w() {
            return Err(mismatch("concat_channels", s.with_c(first.c()), first));
        }
        c_total += s.c();
    }
    let out_shape = first.with_c(c_total);
    let mut data = Vec::with_capacity(out_shape.numel());
    for b in 0..first.n() {
        for p in parts {
            let per = p.numel() / first.n();
            data.extend_from_slice(&p.data()[b * per..(b + 1) * per]);
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels(t: &Tensor, sizes: &[usize]) -> Vec<Tensor> {
    let s = t.shape();
    let plane = s.h() * s.w();
    let mut outs: Vec<Vec<f64>> = sizes.iter().map(|&c| Vec::with_capacity(s.n() * c * plane)).collect();
    for b in 0..s.n() {
        let mut offset = b * s.c() * plane;
        for (k, &c) in sizes.iter().enumerate() {
            outs[k].extend_from_slice(&t.data()[offset..offset + c * plane]);
            offset += c * plane;
        }
    }
    outs.into_iter()
        .zip(sizes)
        .map(|(d, &c)| Tensor::from_parts(s.with_c(c), d))
        .collect()
}

/// Softmax across the channel axis at every `(n, y, x)`.
pub fn softmax_channels(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (c, plane) = (s.c(), s.h() * s.w());
    let mut out = t.clone();
    let d = t.data();
    let o = out.data_mut();
    for b in 0..s.n() {
        let base = b * c * plane;
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(d[base + ch * plane + p]);
            }
            let mut z = 0.0;
            for ch in 0..c {
                let e = (d[base + ch * plane + p] - m).exp();
                o[base + ch * plane + p] = e;
                z += e;
            }
            for ch in 0..c {
                o[base + ch * plane + p] /= z;
            }
        }
    }
    out
}

pub fn softmax_channels_grad(y: &Tensor, gy: &Tensor) -> Tensor {
    let s = y.shape();
    let (c, plane) = (s.c(), s.h() * s.w());
    let mut gx = vec![0.0; s.numel()];
    let (yd, gd) = (y.data(), gy.data());
    for b in 0..s.n() {
        let base = b * c * plane;
        for p in 0..plane {
            let mut dot = 0.0;
            for ch in 0..c {
                let i = base + ch * plane + p;
                dot += yd[i] * gd[i];
            }
            for ch in 0..c {
                let i = base + ch * plane + p;
                gx[i] = yd[i] * (gd[i] - dot);
            }
        }
    }
    Tensor::from_parts(s, gx)
}

/// Mean over the `side x side` spatial neighbourhood of each position,
/// counting only in-bounds terms. The operator is linear, so its adjoint
/// is [`box_mean_adjoint`].
pub fn box_mean(t: &Tensor, side: usize) -> Tensor {
    let s = t.shape();
    let (h, w) = (s.h(), s.w());
    let r = (side / 2) as isize;
    let mut out = vec![0.0; s.numel()];
    for (plane_idx, plane) in t.data().chunks(h * w).enumerate() {
        let o = &mut out[plane_idx * h * w..(plane_idx + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut count = 0usize;
                for dy in -r..=r {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        let xx = x as isize + dx;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        acc += plane[yy as usize * w + xx as usize];
                        count += 1;
                    }
                }
                o[y * w + x] = acc / count as f64;
            }
        }
    }
    Tensor::from_parts(s, out)
}

pub fn box_mean_adjoint(g: &Tensor, side: usize) -> Tensor {
    let s = g.shape();
    let (h, w) = (s.h(), s.w());
    let r = (side / 2) as isize;
    let count_at = |y: usize, x: usize| -> f64 {
        let ys = (y as isize - r).max(0)..=(y as isize + r).min(h as isize - 1);
        let xs = (x as isize - r).max(0)..=(x as isize + r).min(w as isize - 1);
        (ys.count() * xs.count()) as f64
    };
    let mut out = vec![0.0; s.numel()];
    for (plane_idx, plane) in g.data().chunks(h * w).enumerate() {
        let o = &mut out[plane_idx * h * w..(plane_idx + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let share = plane[y * w + x] / count_at(y, x);
                for dy in -r..=r {
                    let yy = y as isize + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        let xx = x as isize + dx;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        o[yy as usize * w + xx as usize] += share;
                    }
                }
            }
        }
    }
    Tensor::from_parts(s, out)
}

/// Channel-vector norms, one per `(n, y, x)`, shape `(n, 1, h, w)`.
pub fn channel_norms(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (c, plane) = (s.c(), s.h() * s.w());
    let mut out = vec![0.0; s.n() * plane];
    for b in 0..s.n() {
        for p in 0..plane {
            let mut acc = 0.0;
            for ch in 0..c {
                let v = t.data()[(b * c + ch) * plane + p];
                acc += v * v;
            }
            out[b * plane + p] = acc.sqrt();
        }
    }
    Tensor::from_parts(s.with_c(1), out)
}

/// Divide every channel vector by `max(norm, floor)`.
pub fn normalize_channels(t: &Tensor, floor: f64) -> (Tensor, Tensor) {
    let norms = channel_norms(t);
    let s = t.shape();
    let (c, plane) = (s.c(), s.h() * s.w());
    let mut out = t.clone();
    for b in 0..s.n() {
        for p in 0..plane {
            let d = norms.data()[b * plane + p].max(floor);
            for ch in 0..c {
                out.data_mut()[(b * c + ch) * plane + p] /= d;
            }
        }
    }
    (out, norms)
}

pub fn normalize_channels_grad(y: &Tensor, norms: &Tensor, gy: &Tensor, floor: f64) -> Tensor {
    let s = y.shape();
    let (c, plane) = (s.c(), s.h() * s.w());
    let mut gx = vec![0.0; s.numel()];
    for b in 0..s.n() {
        for p in 0..plane {
            let norm = norms.data()[b * plane + p];
            let idx = |ch: usize| (b * c + ch) * plane + p;
            if norm > floor {
                let dot = (0..c).fold(0.0, |a, ch| a + y.data()[idx(ch)] * gy.data()[idx(ch)]);
                for ch in 0..c {
                    gx[idx(ch)] = (gy.data()[idx(ch)] - y.data()[idx(ch)] * dot) / norm;
                }
            } else {
                for ch in 0..c {
                    gx[idx(ch)] = gy.data()[idx(ch)] / floor;
                }
            }
        }
    }
    Tensor::from_parts(s, gx)
}

/// `out[n, k, q] = sum_c a[n, c, k] * a[n, c, q]` where `k` and `q` index
/// spatial positions; the output is `(n, h*w, h, w)` with the key position
/// on the channel axis.
pub fn spatial_gram(a: &Tensor) -> Tensor {
    let s = a.shape();
    let (c, p) = (s.c(), s.h() * s.w());
    let mut out = vec![0.0; s.n() * p * p];
    for b in 0..s.n() {
        let ad = &a.data()[b * c * p..(b + 1) * c * p];
        let o = &mut out[b * p * p..(b + 1) * p * p];
        for k in 0..p {
            let row = &mut o[k * p..(k + 1) * p];
            for ch in 0..c {
                let akc = ad[ch * p + k];
                let arow = &ad[ch * p..(ch + 1) * p];
                for q in 0..p {
                    row[q] += akc * arow[q];
                }
            }
        }
    }
    Tensor::from_parts(Shape::new(s.n(), p, s.h(), s.w()), out)
}

pub fn spatial_gram_grad(a: &Tensor, g: &Tensor) -> Tensor {
    let s = a.shape();
    let (c, p) = (s.c(), s.h() * s.w());
    let mut ga = vec![0.0; s.numel()];
    for b in 0..s.n() {
        let ad = &a.data()[b * c * p..(b + 1) * c * p];
        let gd = &g.data()[b * p * p..(b + 1) * p * p];
        let out = &mut ga[b * c * p..(b + 1) * c * p];
        for ch in 0..c {
            let arow = &ad[ch * p..(ch + 1) * p];
            for k in 0..p {
                let mut acc = 0.0;
                for q in 0..p {
                    acc += (gd[k * p + q] + gd[q * p + k]) * arow[q];
                }
                out[ch * p + k] = acc;
            }
        }
    }
    Tensor::from_parts(s, ga)
}

/// Attention read-out: `out[n, c, q] = sum_k score[n, k, q] * f[n, c, k]`.
pub fn attend(score: &Tensor, f: &Tensor) -> Result<Tensor> {
    let (ss, fs) = (score.shape(), f.shape());
    let keys = fs.h() * fs.w();
    if ss.n() != fs.n() || ss.c() != keys {
        return Err(dim_err!(
            "attend: score {ss:?} needs {} key channels for features {fs:?}",
            keys
        ));
    }
    let (c, q) = (fs.c(), ss.h() * ss.w());
    let mut out = vec![0.0; ss.n() * c * q];
    for b in 0..ss.n() {
        let sd = &score.data()[b * keys * q..(b + 1) * keys * q];
        let fd = &f.data()[b * c * keys..(b + 1) * c * keys];
        let o = &mut out[b * c * q..(b + 1) * c * q];
        for ch in 0..c {
            let orow = &mut o[ch * q..(ch + 1) * q];
            for k in 0..keys {
                let fv = fd[ch * keys + k];
                let srow = &sd[k * q..(k + 1) * q];
                for qi in 0..q {
                    orow[qi] += fv * srow[qi];
                }
            }
        }
    }
    Ok(Tensor::from_parts(Shape::new(ss.n(), c, ss.h(), ss.w()), out))
}

/// Gradients of [`attend`] with respect to `(score, f)`.
pub fn attend_grad(score: &Tensor, f: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (ss, fs) = (score.shape(), f.shape());
    let keys = fs.h() * fs.w();
    let (c, q) = (fs.c(), ss.h() * ss.w());
    let mut gs = vec![0.0; ss.numel()];
    let mut gf = vec![0.0; fs.numel()];
    for b in 0..ss.n() {
        let sd = &score.data()[b * keys * q..(b + 1) * keys * q];
        let fd = &f.data()[b * c * keys..(b + 1) * c * keys];
        let gd = &g.data()[b * c * q..(b + 1) * c * q];
        let gso = &mut gs[b * keys * q..(b + 1) * keys * q];
        let gfo = &mut gf[b * c * keys..(b + 1) * c * keys];
        for k in 0..keys {
            for ch in 0..c {
                let fv = fd[ch * keys + k];
                let grow = &gd[ch * q..(ch + 1) * q];
                let srow = &sd[k * q..(k + 1) * q];
                let mut acc = 0.0;
                for qi in 0..q {
                    gso[k * q + qi] += grow[qi] * fv;
                    acc += grow[qi] * srow[qi];
                }
                gfo[ch * keys + k] = acc;
            }
        }
    }
    (Tensor::from_parts(ss, gs), Tensor::from_parts(fs, gf))
}

/// Channel Gram matrix per batch item: `(n, c, h, w) -> (n, 1, c, c)`.
pub fn channel_gram(f: &Tensor) -> Tensor {
    let s = f.shape();
    let (c, p) = (s.c(), s.h() * s.w());
    let mut out = vec![0.0; s.n() * c * c];
    for b in 0..s.n() {
        let fd = &f.data()[b * c * p..(b + 1) * c * p];
        for i in 0..c {
            for j in 0..c {
                let (ri, rj) = (&fd[i * p..(i + 1) * p], &fd[j * p..(j + 1) * p]);
                out[(b * c + i) * c + j] = ri.iter().zip(rj).fold(0.0, |a, (&x, &y)| a + x * y);
            }
        }
    }
    Tensor::from_parts(Shape::new(s.n(), 1, c, c), out)
}

pub fn channel_gram_grad(f: &Tensor, g: &Tensor) -> Tensor {
    let s = f.shape();
    let (c, p) = (s.c(), s.h() * s.w());
    let mut gf = vec![0.0; s.numel()];
    for b in 0..s.n() {
        let fd = &f.data()[b * c * p..(b + 1) * c * p];
        let gd = &g.data()[b * c * c..(b + 1) * c * c];
        for i in 0..c {
            let out = &mut gf[(b * c + i) * p..(b * c + i + 1) * p];
            for j in 0..c {
                let coef = gd[i * c + j] + gd[j * c + i];
                for (o, &v) in out.iter_mut().zip(&fd[j * p..(j + 1) * p]) {
                    *o += coef * v;
                }
            }
        }
    }
    Tensor::from_parts(s, gf)
}

/// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
pub fn avg_pool2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (h, w) = (s.h() / 2, s.w() / 2);
    let mut out = vec![0.0; s.n() * s.c() * h * w];
    for (pi, plane) in t.data().chunks(s.h() * s.w()).enumerate() {
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * s.w() + 2 * x;
                out[pi * h * w + y * w + x] =
                    (plane[i] + plane[i + 1] + plane[i + s.w()] + plane[i + s.w() + 1]) * 0.25;
            }
        }
    }
    Tensor::from_parts(Shape::new(s.n(), s.c(), h, w), out)
}

pub fn avg_pool2_grad(g: &Tensor, x_shape: Shape) -> Tensor {
    let s = g.shape();
    let mut out = vec![0.0; x_shape.numel()];
    let xw = x_shape.w();
    let xplane = x_shape.h() * xw;
    for (pi, plane) in g.data().chunks(s.h() * s.w()).enumerate() {
        for y in 0..s.h() {
            for x in 0..s.w() {
                let v = plane[y * s.w() + x] * 0.25;
                let i = pi * xplane + 2 * y * xw + 2 * x;
                out[i] += v;
                out[i + 1] += v;
                out[i + xw] += v;
                out[i + xw + 1] += v;
            }
        }
    }
    Tensor::from_parts(x_shape, out)
}

/// Per-channel mean and biased variance over `(n, h, w)`.
pub fn channel_moments(t: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = t.shape();
    let count = s.n() * s.h() * s.w();
    if count == 0 {
        return Err(dim_err!("batch_norm: zero-element channel in {s:?}"));
    }
    let plane = s.h() * s.w();
    let mut mean = vec![0.0; s.c()];
    let mut var = vec![0.0; s.c()];
    for c in 0..s.c() {
        let mut acc = 0.0;
        for b in 0..s.n() {
            let start = (b * s.c() + c) * plane;
            acc = t.data()[start..start + plane].iter().fold(acc, |a, &v| a + v);
        }
        mean[c] = acc / count as f64;
        let mut acc = 0.0;
        for b in 0..s.n() {
            let start = (b * s.c() + c) * plane;
            acc = t.data()[start..start + plane]
                .iter()
                .fold(acc, |a, &v| a + (v - mean[c]) * (v - mean[c]));
        }
        var[c] = acc / count as f64;
    }
    Ok((mean, var))
}

/// `(x - mean) * inv_std` per channel.
pub fn normalize_with(t: &Tensor, mean: &[f64], inv_std: &[f64]) -> Tensor {
    let s = t.shape();
    let plane = s.h() * s.w();
    let mut out = t.clone();
    for b in 0..s.n() {
        for c in 0..s.c() {
            let start = (b * s.c() + c) * plane;
            for v in &mut out.data_mut()[start..start + plane] {
                *v = (*v - mean[c]) * inv_std[c];
            }
        }
    }
    out
}

/// Input gradient of training-mode batch normalisation.
pub fn batch_norm_train_grad(xhat: &Tensor, gamma: &[f64], inv_std: &[f64], gy: &Tensor) -> Tensor {
    let s = xhat.shape();
    let plane = s.h() * s.w();
    let count = (s.n() * plane) as f64;
    let mut gx = vec![0.0; s.numel()];
    for c in 0..s.c() {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..s.n() {
            let start = (b * s.c() + c) * plane;
            for i in start..start + plane {
                sum_g += gy.data()[i];
                sum_gx += gy.data()[i] * xhat.data()[i];
            }
        }
        let k = gamma[c] * inv_std[c] / count;
        for b in 0..s.n() {
            let start = (b * s.c() + c) * plane;
            for i in start..start + plane {
                gx[i] = k * (count * gy.data()[i] - sum_g - xhat.data()[i] * sum_gx);
            }
        }
    }
    Tensor::from_parts(s, gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_returns_input() {
        let x = t([1, 1, 2, 3], &[1., 2., 3., 4., 5., 6.]);
        let w = t([1, 1, 1, 1], &[1.0]);
        let y = conv2d(&x, &w, Some(&Tensor::vector(vec![0.0])), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn three_by_three_box_sum() {
        let x = t([1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let w = Tensor::ones([1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 45.0);
        assert_eq!(y.at(0, 0, 0, 0), 12.0);
    }

    #[test]
    fn zero_input_gives_bias() {
        let x = Tensor::zeros([2, 3, 5, 5]);
        let w = Tensor::full([4, 3, 3, 3], 0.7);
        let b = Tensor::vector(vec![0.5, -1.0, 2.0, 3.0]);
        let y = conv2d(&x, &w, Some(&b), 2, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 4, 3, 3));
        for n in 0..2 {
            for c in 0..4 {
                assert!(y.batch_item(n).data()[c * 9..(c + 1) * 9].iter().all(|&v| v == b.data()[c]));
            }
        }
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let x = Tensor::zeros([1, 2, 4, 4]);
        let w = Tensor::zeros([1, 3, 3, 3]);
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channel"));
    }

    #[test]
    fn transposed_sizes() {
        assert_eq!(conv_transpose_out_size(8, 4, 2, 1).unwrap(), 16);
        assert!(conv_transpose_out_size(1, 1, 1, 1).is_err());
        let x = Tensor::ones([1, 2, 8, 8]);
        let w = Tensor::zeros([2, 3, 4, 4]);
        let b = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let y = conv_transpose2d(&x, &w, Some(&b), 2, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 16, 16));
        assert!(y.batch_item(0).data()[256..512].iter().all(|&v| v == 2.0));
    }

    #[test]
    fn transposed_single_pixel_scatter() {
        let v = 2.5;
        let x = t([1, 1, 1, 1], &[v]);
        let w = Tensor::ones([1, 1, 4, 4]);
        let y = conv_transpose2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert!(y.data().iter().all(|&o| o == v));
    }

    #[test]
    fn softmax_two_logits() {
        let x = t([1, 2, 1, 1], &[0.0, 1.0]);
        let y = softmax_channels(&x);
        assert!((y.data()[0] - 0.2689).abs() < 1e-4);
        assert!((y.data()[1] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn concat_and_split() {
        let a = Tensor::ones([2, 64, 3, 3]);
        let b = Tensor::zeros([2, 3, 3, 3]);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), Shape::new(2, 67, 3, 3));
        let parts = split_channels(&c, &[64, 3]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert!(concat_channels(&[&a, &Tensor::zeros([2, 3, 4, 3])]).is_err());
    }

    #[test]
    fn box_mean_counts_in_bounds_terms() {
        let x = t([1, 1, 2, 2], &[1., 2., 3., 4.]);
        let y = box_mean(&x, 3);
        assert!(y.data().iter().all(|&v| v == 2.5));
        assert_eq!(box_mean(&x, 1), x);
    }

    #[test]
    fn channel_moments_of_empty_channel() {
        let x = Tensor::zeros([0, 2, 3, 3]);
        assert!(channel_moments(&x).is_err());
    }
}
