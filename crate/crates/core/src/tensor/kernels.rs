//! Forward and backward kernels over plain tensors.
//!
//! These do no recording; [`super::Graph`] calls them and keeps whatever the
//! backward pass needs.

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};

use super::Tensor;

/// Output extent of a strided window.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvGeometry { stride, padding }
    }
}

fn conv_shapes<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    geo: ConvGeometry,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, cin, h, wd) = x.dims4()?;
    let [cout, wcin, kh, kw] = w.shape()[..] else {
        return Err(Error::shape(op, format!("weight must be rank 4, got {:?}", w.shape())));
    };
    if kh == 0 || kw == 0 {
        return Err(Error::shape(op, "kernel height and width must be at least 1"));
    }
    if wcin != cin {
        return Err(Error::shape(
            op,
            format!("input channels: x has {cin}, weight expects {wcin}"),
        ));
    }
    let ho = conv_out_extent(h, kh, geo.stride, geo.padding)
        .ok_or_else(|| Error::shape(op, format!("height {h} too small for kernel {kh} with padding {}", geo.padding)))?;
    let wo = conv_out_extent(wd, kw, geo.stride, geo.padding)
        .ok_or_else(|| Error::shape(op, format!("width {wd} too small for kernel {kw} with padding {}", geo.padding)))?;
    Ok((n, cin, h, wd, cout, kh, kw, ho, wo))
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geo: ConvGeometry,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let p = ho * wo;
    let (s, pad) = (geo.stride as isize, geo.padding as isize);
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut col[((c * kh + ky) * kw + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = oy as isize * s - pad + ky as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s - pad + kx as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    geo: ConvGeometry,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let p = ho * wo;
    let (s, pad) = (geo.stride as isize, geo.padding as isize);
    for c in 0..cin {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &col[((c * kh + ky) * kw + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = oy as isize * s - pad + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = ox as isize * s - pad + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(kh: usize, kw: usize, geo: ConvGeometry) -> bool {
    kh == 1 && kw == 1 && geo.stride == 1 && geo.padding == 0
}

/// Cross-correlation `[N,Cin,H,W] ⋆ [Cout,Cin,kh,kw] → [N,Cout,H',W']`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geo: ConvGeometry,
) -> Result<Tensor<T>> {
    let (n, cin, h, wd, cout, kh, kw, ho, wo) = conv_shapes("conv2d", x, w, geo)?;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape("conv2d", format!("bias shape {:?}, expected [{cout}]", b.shape())));
        }
    }
    let k = cin * kh * kw;
    let p = ho * wo;
    let mut out = vec![T::zero(); n * cout * p];
    let wm = MatRef::row_major(w.data(), cout, k);
    let pointwise = is_pointwise(kh, kw, geo);
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); k * p] };
    for b in 0..n {
        let xs = &x.data()[b * cin * h * wd..(b + 1) * cin * h * wd];
        let cm = if pointwise {
            MatRef::row_major(xs, k, p)
        } else {
            im2col(xs, cin, h, wd, kh, kw, geo, ho, wo, &mut col);
            MatRef::row_major(&col, k, p)
        };
        let dst = &mut out[b * cout * p..(b + 1) * cout * p];
        if let Some(bias) = bias {
            for (o, row) in dst.chunks_mut(p).enumerate() {
                row.fill(bias.data()[o]);
            }
        }
        gemm(wm, cm, T::one(), dst);
    }
    Tensor::new(&[n, cout, ho, wo], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and (optionally) bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    geo: ConvGeometry,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, cin, h, wd, cout, kh, kw, ho, wo) = conv_shapes("conv2d_backward", x, w, geo)?;
    let k = cin * kh * kw;
    let p = ho * wo;
    let pointwise = is_pointwise(kh, kw, geo);
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut col = if pointwise || !need_dw { Vec::new() } else { vec![T::zero(); k * p] };
    let mut dcol = if pointwise || !need_dx { Vec::new() } else { vec![T::zero(); k * p] };
    let wm = MatRef::row_major(w.data(), cout, k);
    for b in 0..n {
        let dys = MatRef::row_major(&dy.data()[b * cout * p..(b + 1) * cout * p], cout, p);
        let xs = &x.data()[b * cin * h * wd..(b + 1) * cin * h * wd];
        if let Some(dw) = dw.as_mut() {
            let cm = if pointwise {
                MatRef::row_major(xs, k, p)
            } else {
                im2col(xs, cin, h, wd, kh, kw, geo, ho, wo, &mut col);
                MatRef::row_major(&col, k, p)
            };
            gemm(dys, cm.t(), T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[b * cin * h * wd..(b + 1) * cin * h * wd];
            if pointwise {
                gemm(wm.t(), dys, T::one(), dxs);
            } else {
                gemm(wm.t(), dys, T::zero(), &mut dcol);
                col2im(&dcol, cin, h, wd, kh, kw, geo, ho, wo, dxs);
            }
        }
    }
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); cout];
        for b in 0..n {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += dy.data()[(b * cout + o) * p..(b * cout + o + 1) * p].iter().copied().sum::<T>();
            }
        }
        Tensor::new(&[cout], db).unwrap()
    });
    Ok((
        dx.map(|d| Tensor::new(x.shape(), d).unwrap()),
        dw.map(|d| Tensor::new(w.shape(), d).unwrap()),
        db,
    ))
}

fn depthwise_shapes<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geo: ConvGeometry,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, wd) = x.dims4()?;
    let [wc, one, kh, kw] = w.shape()[..] else {
        return Err(Error::shape("depthwise_conv2d", format!("weight must be rank 4, got {:?}", w.shape())));
    };
    if wc != c || one != 1 {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("channels: x has {c}, weight is {:?} (expected [{c},1,k,k])", w.shape()),
        ));
    }
    let ho = conv_out_extent(h, kh, geo.stride, geo.padding)
        .ok_or_else(|| Error::shape("depthwise_conv2d", format!("height {h} too small for kernel {kh}")))?;
    let wo = conv_out_extent(wd, kw, geo.stride, geo.padding)
        .ok_or_else(|| Error::shape("depthwise_conv2d", format!("width {wd} too small for kernel {kw}")))?;
    Ok((n, c, h, wd, kh, kw, ho, wo))
}

/// Valid output-x range `[lo, hi)` for kernel column `kx`.
fn valid_ox(kx: usize, w: usize, wo: usize, s: usize, pad: usize) -> (usize, usize) {
    // ix = ox*s - pad + kx must lie in [0, w)
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(s) };
    let hi = if w + pad > kx { ((w + pad - kx - 1) / s + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// One filter per channel: `[N,C,H,W] ⋆ [C,1,k,k]`.
pub fn depthwise_conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, geo: ConvGeometry) -> Result<Tensor<T>> {
    let (n, c, h, wd, kh, kw, ho, wo) = depthwise_shapes(x, w, geo)?;
    let (s, pad) = (geo.stride, geo.padding);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for b in 0..n {
        for ch in 0..c {
            let xp = &x.data()[(b * c + ch) * h * wd..][..h * wd];
            let op = &mut out[(b * c + ch) * ho * wo..][..ho * wo];
            let kern = &w.data()[ch * kh * kw..][..kh * kw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = kern[ky * kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let (lo, hi) = valid_ox(kx, wd, wo, s, pad);
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &xp[iy as usize * wd..][..wd];
                        let dst = &mut op[oy * wo..][..wo];
                        for ox in lo..hi {
                            dst[ox] += wv * src[ox * s + kx - pad];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    geo: ConvGeometry,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, c, h, wd, kh, kw, ho, wo) = depthwise_shapes(x, w, geo)?;
    let (s, pad) = (geo.stride, geo.padding);
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    for b in 0..n {
        for ch in 0..c {
            let xp = &x.data()[(b * c + ch) * h * wd..][..h * wd];
            let dyp = &dy.data()[(b * c + ch) * ho * wo..][..ho * wo];
            let kern = &w.data()[ch * kh * kw..][..kh * kw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let (lo, hi) = valid_ox(kx, wd, wo, s, pad);
                    let wv = kern[ky * kw + kx];
                    let mut acc = T::zero();
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let g = &dyp[oy * wo..][..wo];
                        if dw.is_some() {
                            let src = &xp[iy * wd..][..wd];
                            for ox in lo..hi {
                                acc += g[ox] * src[ox * s + kx - pad];
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let dst = &mut dx[(b * c + ch) * h * wd + iy * wd..][..wd];
                            for ox in lo..hi {
                                dst[ox * s + kx - pad] += wv * g[ox];
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[ch * kh * kw + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        dx.map(|d| Tensor::new(x.shape(), d).unwrap()),
        dw.map(|d| Tensor::new(w.shape(), d).unwrap()),
    ))
}

/// Batch statistics and normalized values retained for the backward pass.
#[derive(Debug, Clone)]
pub struct BnSaved<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Biased batch variance.
    pub batch_var: Vec<T>,
}

fn bn_check<T: Scalar>(x: &Tensor<T>, params: &[&Tensor<T>], eps: f64) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid("batchnorm", format!("epsilon must be positive, got {eps}")));
    }
    for p in params {
        if p.shape() != [c] {
            return Err(Error::shape("batchnorm", format!("parameter shape {:?}, expected [{c}]", p.shape())));
        }
    }
    Ok((n, c, h * w))
}

/// Batch normalization using the batch's own per-channel moments over N, H, W.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let (n, c, plane) = bn_check(x, &[gamma, beta], eps)?;
    let count = (n * plane).max(1) as f64;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            s += x.data()[(b * c + ch) * plane..][..plane].iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        }
        let m = s / count;
        let mut sq = 0.0f64;
        for b in 0..n {
            sq += x.data()[(b * c + ch) * plane..][..plane]
                .iter()
                .map(|v| {
                    let d = v.to_f64_lossy() - m;
                    d * d
                })
                .sum::<f64>();
        }
        let v = sq / count;
        mean[ch] = T::from_f64_lossy(m);
        var[ch] = T::from_f64_lossy(v);
        inv_std[ch] = T::from_f64_lossy(1.0 / (v + eps).sqrt());
    }
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (m, is, g, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in off..off + plane {
                let xh = (x.data()[i] - m) * is;
                xhat[i] = xh;
                y[i] = g * xh + bt;
            }
        }
    }
    let shape = x.shape();
    Ok((
        Tensor::new(shape, y)?,
        BnSaved { xhat: Tensor::new(shape, xhat)?, inv_std, batch_mean: mean, batch_var: var },
    ))
}

/// Batch normalization with fixed (running) statistics.
pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let (n, c, plane) = bn_check(x, &[gamma, beta, running_mean, running_var], eps)?;
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::from_f64_lossy(1.0 / (v.to_f64_lossy() + eps).sqrt()))
        .collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (m, is, g, bt) = (running_mean.data()[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in off..off + plane {
                let xh = (x.data()[i] - m) * is;
                xhat[i] = xh;
                y[i] = g * xh + bt;
            }
        }
    }
    let shape = x.shape();
    Ok((
        Tensor::new(shape, y)?,
        BnSaved {
            xhat: Tensor::new(shape, xhat)?,
            inv_std,
            batch_mean: running_mean.data().to_vec(),
            batch_var: running_var.data().to_vec(),
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`. `train` selects whether the batch moments
/// depend on `x`.
pub fn batchnorm_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
    train: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = dy.dims4()?;
    let plane = h * w;
    let count = (n * plane).max(1) as f64;
    // the reductions and the centering below cancel heavily when a channel
    // has few elements, so they are carried out in double precision
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let g = dy.data()[i].to_f64_lossy();
                dbeta[ch] += g;
                dgamma[ch] += g * saved.xhat.data()[i].to_f64_lossy();
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let scale = gamma.data()[ch].to_f64_lossy() * saved.inv_std[ch].to_f64_lossy();
            let (sb, sg) = if train { (dbeta[ch] / count, dgamma[ch] / count) } else { (0.0, 0.0) };
            for i in off..off + plane {
                let centered = dy.data()[i].to_f64_lossy() - sb - saved.xhat.data()[i].to_f64_lossy() * sg;
                dx[i] = T::from_f64_lossy(scale * centered);
            }
        }
    }
    let dgamma = dgamma.into_iter().map(T::from_f64_lossy).collect();
    let dbeta = dbeta.into_iter().map(T::from_f64_lossy).collect();
    Ok((Tensor::new(dy.shape(), dx)?, Tensor::new(&[c], dgamma)?, Tensor::new(&[c], dbeta)?))
}

/// 3×3 max pooling, stride 2, padding 1. Also returns the flat input index of
/// each output's first (row-major) maximum.
pub fn max_pool3x3s2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let (k, s, p) = (3usize, 2usize, 1usize);
    let ho = conv_out_extent(h, k, s, p)
        .filter(|_| h > 0)
        .ok_or_else(|| Error::shape("max_pool", format!("height {h} smaller than the padded 3x3 window")))?;
    let wo = conv_out_extent(w, k, s, p)
        .filter(|_| w > 0)
        .ok_or_else(|| Error::shape("max_pool", format!("width {w} smaller than the padded 3x3 window")))?;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        let xp = &x.data()[base..base + h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = iy as usize * w + ix as usize;
                        if best_i == usize::MAX || xp[i] > best {
                            best = xp[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(base + best_i);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, arg))
}

pub fn max_pool_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i] += g;
    }
    dx
}

/// Global average pooling to `[N,C,1,1]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    if plane == 0 {
        return Err(Error::shape("global_avg_pool", "empty spatial extent"));
    }
    let inv = T::one() / T::from_count(plane);
    let data = x.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor::new(&[n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let plane = input_shape[2] * input_shape[3];
    let inv = T::one() / T::from_count(plane);
    let mut dx = Vec::with_capacity(input_shape.iter().product());
    for &g in dy.data() {
        dx.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::new(input_shape, dx).unwrap()
}

/// Channel concatenation of two NCHW tensors.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("N,H,W differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for s in 0..n {
        out.extend_from_slice(&a.data()[s * ca * plane..(s + 1) * ca * plane]);
        out.extend_from_slice(&b.data()[s * cb * plane..(s + 1) * cb * plane]);
    }
    Tensor::new(&[n, ca + cb, h, w], out)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = vec![T::zero(); n * c * 4 * h * w];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(&[n, c, 2 * h, 2 * w], out)
}

pub fn upsample2x_backward<T: Scalar>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input_shape[..] else { unreachable!() };
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let src = &dy.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
            }
        }
    }
    Tensor::new(input_shape, dx).unwrap()
}

/// Keeps the top-left `h × w` window of each plane.
pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, hi, wi) = x.dims4()?;
    if h > hi || w > wi {
        return Err(Error::shape("crop", format!("cannot crop {hi}x{wi} to {h}x{w}")));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for p in 0..n * c {
        for y in 0..h {
            out.extend_from_slice(&x.data()[p * hi * wi + y * wi..][..w]);
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

pub fn crop_backward<T: Scalar>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, hi, wi] = input_shape[..] else { unreachable!() };
    let [_, _, h, w] = dy.shape()[..] else { unreachable!() };
    let mut dx = vec![T::zero(); n * c * hi * wi];
    for p in 0..n * c {
        for y in 0..h {
            dx[p * hi * wi + y * wi..][..w].copy_from_slice(&dy.data()[(p * h + y) * w..][..w]);
        }
    }
    Tensor::new(input_shape, dx).unwrap()
}

/// `[N,Cin] · [Cout,Cin]ᵀ + b`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, cin] = x.shape()[..] else {
        return Err(Error::shape("fully_connected", format!("input must be [N,Cin], got {:?}", x.shape())));
    };
    let [cout, wcin] = w.shape()[..] else {
        return Err(Error::shape("fully_connected", format!("weight must be [Cout,Cin], got {:?}", w.shape())));
    };
    if wcin != cin {
        return Err(Error::shape("fully_connected", format!("input features {cin}, weight expects {wcin}")));
    }
    if b.shape() != [cout] {
        return Err(Error::shape("fully_connected", format!("bias shape {:?}, expected [{cout}]", b.shape())));
    }
    let mut out = Vec::with_capacity(n * cout);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm(
        MatRef::row_major(x.data(), n, cin),
        MatRef::row_major(w.data(), cout, cin).t(),
        T::one(),
        &mut out,
    );
    Tensor::new(&[n, cout], out)
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, cin] = x.shape()[..] else { unreachable!() };
    let cout = w.shape()[0];
    let dym = MatRef::row_major(dy.data(), n, cout);
    let mut dx = vec![T::zero(); n * cin];
    gemm(dym, MatRef::row_major(w.data(), cout, cin), T::zero(), &mut dx);
    let mut dw = vec![T::zero(); cout * cin];
    gemm(dym.t(), MatRef::row_major(x.data(), n, cin), T::zero(), &mut dw);
    let mut db = vec![T::zero(); cout];
    for row in dy.data().chunks(cout) {
        for (a, &g) in db.iter_mut().zip(row) {
            *a += g;
        }
    }
    (
        Tensor::new(x.shape(), dx).unwrap(),
        Tensor::new(w.shape(), dw).unwrap(),
        Tensor::new(&[cout], db).unwrap(),
    )
}

/// `x[n,c,h,w] · s[n,c]` with `s` shaped `[N,C,1,1]`.
pub fn mul_channel<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if s.shape() != [n, c, 1, 1] {
        return Err(Error::shape("mul_channel", format!("scale {:?} vs input {:?}", s.shape(), x.shape())));
    }
    let plane = h * w;
    let mut out = x.data().to_vec();
    for (p, chunk) in out.chunks_mut(plane.max(1)).enumerate().take(n * c) {
        let k = s.data()[p];
        chunk.iter_mut().for_each(|v| *v *= k);
    }
    Tensor::new(x.shape(), out)
}

pub fn mul_channel_backward<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = x.shape()[..] else { unreachable!() };
    let plane = h * w;
    let mut dx = vec![T::zero(); x.len()];
    let mut ds = vec![T::zero(); n * c];
    for p in 0..n * c {
        let k = s.data()[p];
        let mut acc = T::zero();
        for i in p * plane..(p + 1) * plane {
            dx[i] = dy.data()[i] * k;
            acc += dy.data()[i] * x.data()[i];
        }
        ds[p] = acc;
    }
    (Tensor::new(x.shape(), dx).unwrap(), Tensor::new(s.shape(), ds).unwrap())
}
