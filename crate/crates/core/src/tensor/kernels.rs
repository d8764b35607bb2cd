//! Forward and backward kernels. Loops are written so every output element
//! accumulates its terms in one fixed order.

use super::layer::conv_out;
use super::{Scalar, Tensor};
use crate::error::{PackError, Result};

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> PackError {
    PackError::dim(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// Dot product over eight interleaved partial sums, combined pairwise in a
/// fixed order. Breaks the add-latency chain without giving up determinism.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            lanes[k] = lanes[k] + x[k] * y[k];
        }
    }
    for (k, (&x, &y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        lanes[k] = lanes[k] + x * y;
    }
    let q = [
        lanes[0] + lanes[4],
        lanes[1] + lanes[5],
        lanes[2] + lanes[6],
        lanes[3] + lanes[7],
    ];
    (q[0] + q[2]) + (q[1] + q[3])
}

/// `y[n,o] = sum_i x[n,i] * w[o,i] + b[o]`.
pub fn linear_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(shape_err("linear", xs, ws));
    }
    let (batch, inp, out) = (xs[0], xs[1], ws[0]);
    if let Some(b) = b {
        if b.shape() != [out] {
            return Err(shape_err("linear bias", ws, b.shape()));
        }
    }
    let (xd, wd) = (x.data(), w.data());
    let mut y = vec![T::zero(); batch * out];
    for n in 0..batch {
        let row = &xd[n * inp..(n + 1) * inp];
        for o in 0..out {
            let acc = dot(row, &wd[o * inp..(o + 1) * inp]);
            y[n * out + o] = match b {
                Some(b) => acc + b.data()[o],
                None => acc,
            };
        }
    }
    Tensor::new(vec![batch, out], y)
}

pub(crate) struct LinearGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &[T],
    need_dx: bool,
) -> LinearGrads<T> {
    let (batch, inp) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[0];
    let (xd, wd) = (x.data(), w.data());
    let mut dw = vec![T::zero(); out * inp];
    let mut db = vec![T::zero(); out];
    for n in 0..batch {
        let row = &xd[n * inp..(n + 1) * inp];
        for o in 0..out {
            let g = dy[n * out + o];
            db[o] = db[o] + g;
            let dwr = &mut dw[o * inp..(o + 1) * inp];
            for i in 0..inp {
                dwr[i] = dwr[i] + g * row[i];
            }
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); batch * inp];
        for n in 0..batch {
            let dxr = &mut dx[n * inp..(n + 1) * inp];
            for o in 0..out {
                let g = dy[n * out + o];
                let wr = &wd[o * inp..(o + 1) * inp];
                for i in 0..inp {
                    dxr[i] = dxr[i] + g * wr[i];
                }
            }
        }
        dx
    });
    LinearGrads { dx, dw, db }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    chans: usize,
    h: usize,
    w: usize,
    filters: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ks: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || ks[2] != ks[3] {
            return Err(shape_err("conv2d", xs, ks));
        }
        if ks[2] == 0 || stride == 0 {
            return Err(PackError::dim("conv2d kernel and stride must be >= 1"));
        }
        Ok(Self {
            batch: xs[0],
            chans: xs[1],
            h: xs[2],
            w: xs[3],
            filters: ks[0],
            k: ks[2],
            stride,
            pad,
            oh: conv_out(xs[2], ks[2], stride, pad)?,
            ow: conv_out(xs[3], ks[2], stride, pad)?,
        })
    }

    /// Output positions `o` along one axis for which `o*stride + kk - pad`
    /// lands inside `0..size`.
    fn valid(&self, kk: usize, size: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kk as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= size-1, exclusive bound
        let last = size as isize - 1 - off;
        let hi = if last < 0 { 0 } else { last / s + 1 };
        let lo = lo.max(0) as usize;
        let hi = (hi.max(0) as usize).min(out);
        (lo, hi.max(lo))
    }
}

/// Unfold one sample into `[C*k*k, OH*OW]` patch rows; padding reads as zero.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let plane = g.oh * g.ow;
    col.fill(T::zero());
    for c in 0..g.chans {
        let xin = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for u in 0..g.k {
            let (ilo, ihi) = g.valid(u, g.h, g.oh);
            for v in 0..g.k {
                let (jlo, jhi) = g.valid(v, g.w, g.ow);
                let r = (c * g.k + u) * g.k + v;
                let row = &mut col[r * plane..(r + 1) * plane];
                for i in ilo..ihi {
                    let xi = i * g.stride + u - g.pad;
                    let src = &xin[xi * g.w + jlo * g.stride + v - g.pad..(xi + 1) * g.w];
                    let dst = &mut row[i * g.ow + jlo..i * g.ow + jhi];
                    for (d, &sv) in dst.iter_mut().zip(src.iter().step_by(g.stride)) {
                        *d = sv;
                    }
                }
            }
        }
    }
}

/// Scatter-add patch-row gradients back onto one sample's input gradient.
fn col2im<T: Scalar>(dcol: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.oh * g.ow;
    for c in 0..g.chans {
        let dxin = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for u in 0..g.k {
            let (ilo, ihi) = g.valid(u, g.h, g.oh);
            for v in 0..g.k {
                let (jlo, jhi) = g.valid(v, g.w, g.ow);
                let r = (c * g.k + u) * g.k + v;
                let row = &dcol[r * plane..(r + 1) * plane];
                for i in ilo..ihi {
                    let xi = i * g.stride + u - g.pad;
                    let dst = &mut dxin[xi * g.w + jlo * g.stride + v - g.pad..(xi + 1) * g.w];
                    let src = &row[i * g.ow + jlo..i * g.ow + jhi];
                    for (d, &sv) in dst.iter_mut().step_by(g.stride).zip(src) {
                        *d = *d + sv;
                    }
                }
            }
        }
    }
}

fn axpy<T: Scalar>(y: &mut [T], x: &[T], a: T) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + xv * a;
    }
}

/// Cross-correlation `y[n,f,i,j] = sum_{c,u,v} x[n,c,i*s+u-p,j*s+v-p] * k[f,c,u,v] + b[f]`.
/// Each output sums its terms in `(c, u, v)` order, then adds the bias.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), kernel.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.filters] {
            return Err(shape_err("conv2d bias", kernel.shape(), b.shape()));
        }
    }
    let (xd, kd) = (x.data(), kernel.data());
    let plane = g.oh * g.ow;
    let patch = g.chans * g.k * g.k;
    let sample = g.chans * g.h * g.w;
    let mut col = vec![T::zero(); patch * plane];
    let mut y = vec![T::zero(); g.batch * g.filters * plane];
    for n in 0..g.batch {
        im2col(&xd[n * sample..(n + 1) * sample], &g, &mut col);
        for f in 0..g.filters {
            let out = &mut y[(n * g.filters + f) * plane..(n * g.filters + f + 1) * plane];
            for r in 0..patch {
                axpy(out, &col[r * plane..(r + 1) * plane], kd[f * patch + r]);
            }
            if let Some(b) = bias {
                let bv = b.data()[f];
                out.iter_mut().for_each(|o| *o = *o + bv);
            }
        }
    }
    Tensor::new(vec![g.batch, g.filters, g.oh, g.ow], y)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dk: Vec<T>,
    pub db: Vec<T>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &[T],
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), kernel.shape(), stride, pad)?;
    let (xd, kd) = (x.data(), kernel.data());
    let plane = g.oh * g.ow;
    let patch = g.chans * g.k * g.k;
    let sample = g.chans * g.h * g.w;
    let mut col = vec![T::zero(); patch * plane];
    let mut dcol = vec![T::zero(); patch * plane];
    let mut dk = vec![T::zero(); kd.len()];
    let mut db = vec![T::zero(); g.filters];
    let mut dx = need_dx.then(|| vec![T::zero(); xd.len()]);
    for n in 0..g.batch {
        im2col(&xd[n * sample..(n + 1) * sample], &g, &mut col);
        if dx.is_some() {
            dcol.fill(T::zero());
        }
        for f in 0..g.filters {
            let gout = &dy[(n * g.filters + f) * plane..(n * g.filters + f + 1) * plane];
            db[f] = gout.iter().fold(db[f], |a, &v| a + v);
            for r in 0..patch {
                let crow = &col[r * plane..(r + 1) * plane];
                dk[f * patch + r] = dk[f * patch + r] + dot(gout, crow);
                if dx.is_some() {
                    axpy(
                        &mut dcol[r * plane..(r + 1) * plane],
                        gout,
                        kd[f * patch + r],
                    );
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            col2im(&dcol, &g, &mut dx[n * sample..(n + 1) * sample]);
        }
    }
    Ok(ConvGrads { dx, dk, db })
}

/// Batch-norm mode. `Eval` normalizes with the running buffers and leaves
/// them untouched; it is also what a frozen layer runs during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T = f32> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }
}

pub(crate) struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mode: BnMode,
}

fn bn_layout(shape: &[usize]) -> (usize, usize, usize) {
    let batch = shape[0];
    let chans = shape[1];
    let spatial = shape[2..].iter().product::<usize>();
    (batch, chans, spatial)
}

/// Per-channel normalization over batch and spatial positions.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    stats: &mut BnStats<T>,
    mode: BnMode,
    momentum: T,
    eps: T,
) -> Result<Tensor<T>> {
    batchnorm_forward_cached(x, gain, bias, stats, mode, momentum, eps).map(|(y, _)| y)
}

pub(crate) fn batchnorm_forward_cached<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    stats: &mut BnStats<T>,
    mode: BnMode,
    momentum: T,
    eps: T,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let xs = x.shape();
    if xs.len() < 2 || xs[1] == 0 {
        return Err(PackError::dim(format!(
            "batchnorm needs [B, C, ...] input with C > 0, got {xs:?}"
        )));
    }
    let (batch, chans, spatial) = bn_layout(xs);
    for (name, len) in [
        ("gain", gain.len()),
        ("bias", bias.len()),
        ("running_mean", stats.running_mean.len()),
        ("running_var", stats.running_var.len()),
    ] {
        if len != chans {
            return Err(PackError::dim(format!(
                "batchnorm {name} has {len} entries for {chans} channels"
            )));
        }
    }
    let xd = x.data();
    let m = batch * spatial;
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = vec![T::zero(); chans];
    let mut y = vec![T::zero(); xd.len()];
    for c in 0..chans {
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut sum = T::zero();
                for n in 0..batch {
                    let base = (n * chans + c) * spatial;
                    for s in 0..spatial {
                        sum = sum + xd[base + s];
                    }
                }
                let mean = sum / T::from_f64(m as f64);
                let mut sq = T::zero();
                for n in 0..batch {
                    let base = (n * chans + c) * spatial;
                    for s in 0..spatial {
                        let d = xd[base + s] - mean;
                        sq = sq + d * d;
                    }
                }
                let var = sq / T::from_f64(m as f64);
                let unbiased = if m > 1 {
                    sq / T::from_f64((m - 1) as f64)
                } else {
                    var
                };
                let keep = T::one() - momentum;
                stats.running_mean[c] = keep * stats.running_mean[c] + momentum * mean;
                stats.running_var[c] = keep * stats.running_var[c] + momentum * unbiased;
                (mean, var)
            }
            BnMode::Eval => (stats.running_mean[c], stats.running_var[c]),
        };
        let is = T::one() / (var + eps).sqrt();
        inv_std[c] = is;
        let (gv, bv) = (gain.data()[c], bias.data()[c]);
        for n in 0..batch {
            let base = (n * chans + c) * spatial;
            for s in 0..spatial {
                let h = (xd[base + s] - mean) * is;
                xhat[base + s] = h;
                y[base + s] = gv * h + bv;
            }
        }
    }
    Ok((
        Tensor::new(xs.to_vec(), y)?,
        BnCache {
            xhat,
            inv_std,
            mode,
        },
    ))
}

pub(crate) struct BnGrads<T> {
    pub dx: Vec<T>,
    pub dgain: Vec<T>,
    pub dbias: Vec<T>,
}

pub(crate) fn batchnorm_backward<T: Scalar>(
    shape: &[usize],
    gain: &[T],
    cache: &BnCache<T>,
    dy: &[T],
) -> BnGrads<T> {
    let (batch, chans, spatial) = bn_layout(shape);
    let m = T::from_f64((batch * spatial) as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgain = vec![T::zero(); chans];
    let mut dbias = vec![T::zero(); chans];
    for c in 0..chans {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for n in 0..batch {
            let base = (n * chans + c) * spatial;
            for s in 0..spatial {
                sum_dy = sum_dy + dy[base + s];
                sum_dy_xhat = sum_dy_xhat + dy[base + s] * cache.xhat[base + s];
            }
        }
        dgain[c] = sum_dy_xhat;
        dbias[c] = sum_dy;
        let gi = gain[c] * cache.inv_std[c];
        for n in 0..batch {
            let base = (n * chans + c) * spatial;
            for s in 0..spatial {
                dx[base + s] = match cache.mode {
                    BnMode::Eval => gi * dy[base + s],
                    BnMode::Train => {
                        gi * (dy[base + s] - sum_dy / m - cache.xhat[base + s] * sum_dy_xhat / m)
                    }
                };
            }
        }
    }
    BnGrads { dx, dgain, dbias }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("relu preserves shape")
}

/// 2x2 max pooling with stride 2 on `[B, C, H, W]`.
pub fn maxpool2x2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    maxpool2x2_indexed(x).map(|(y, _)| y)
}

/// Pooled output plus the flat input index chosen for every output cell.
/// Ties resolve to the first position in row-major order.
pub(crate) fn maxpool2x2_indexed<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let xs = x.shape();
    if xs.len() != 4 || !xs[2].is_multiple_of(2) || !xs[3].is_multiple_of(2) {
        return Err(PackError::dim(format!(
            "maxpool2x2 needs [B, C, H, W] with even H and W, got {xs:?}"
        )));
    }
    let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut y = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                y.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![xs[0], xs[1], oh, ow], y)?, arg))
}

/// Collapse everything after the leading axis.
pub fn flatten<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let b = x.shape()[0];
    let rest = x.len() / b;
    x.clone()
        .reshape(vec![b, rest])
        .expect("flatten preserves element count")
}

/// Mean cross-entropy of softmax(logits) against integer labels.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    softmax_xent_probs(logits, labels).map(|(l, _)| l)
}

pub(crate) fn softmax_xent_probs<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Vec<T>)> {
    let ls = logits.shape();
    if ls.len() != 2 || ls[0] != labels.len() {
        return Err(PackError::dim(format!(
            "softmax_xent: logits {ls:?} against {} labels",
            labels.len()
        )));
    }
    let (batch, classes) = (ls[0], ls[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(PackError::input(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let ld = logits.data();
    let mut probs = vec![T::zero(); ld.len()];
    let mut total = T::zero();
    for n in 0..batch {
        let row = &ld[n * classes..(n + 1) * classes];
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for (c, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            probs[n * classes + c] = e;
            sum = sum + e;
        }
        for c in 0..classes {
            probs[n * classes + c] = probs[n * classes + c] / sum;
        }
        let lse = max + sum.ln();
        total = total + (lse - row[labels[n]]);
    }
    Ok((total / T::from_f64(batch as f64), probs))
}

/// `param[i] -= lr * grad[i]` wherever `mask[i]`; other entries keep their bits.
pub fn sgd_masked_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &[T],
    lr: T,
    mask: &[bool],
) -> Result<()> {
    if grad.len() != param.len() || mask.len() != param.len() {
        return Err(PackError::dim(format!(
            "sgd step: {} params, {} grads, {} mask bits",
            param.len(),
            grad.len(),
            mask.len()
        )));
    }
    for ((p, &g), &m) in param.data_mut().iter_mut().zip(grad).zip(mask) {
        if m {
            *p = *p - lr * g;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_examples() {
        let x = t(&[1, 2], &[1., 2.]);
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let zero_b = t(&[2], &[0., 0.]);
        assert_eq!(
            linear_forward(&x, &eye, Some(&zero_b)).unwrap().data(),
            &[1., 2.]
        );
        let zw = t(&[2, 2], &[0.; 4]);
        let b = t(&[2], &[3., 4.]);
        assert_eq!(linear_forward(&x, &zw, Some(&b)).unwrap().data(), &[3., 4.]);
        let x = t(&[1, 2], &[1., -1.]);
        let w = t(&[1, 2], &[2., 3.]);
        let b = t(&[1], &[0.5]);
        assert_eq!(linear_forward(&x, &w, Some(&b)).unwrap().data(), &[-0.5]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let x = t(&[1, 3], &[0.; 3]);
        let w = t(&[2, 2], &[0.; 4]);
        let err = linear_forward(&x, &w, None).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn conv_examples() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let id = t(&[1, 1, 1, 1], &[1.]);
        assert_eq!(
            conv2d_forward(&x, &id, None, 1, 0).unwrap().data(),
            x.data()
        );

        let zero = t(&[1, 1, 2, 2], &[0.; 4]);
        let b = t(&[1], &[2.5]);
        let y = conv2d_forward(&x, &zero, Some(&b), 1, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));

        let ones = t(&[1, 1, 3, 3], &[1.; 9]);
        let k = t(&[1, 1, 2, 2], &[1.; 4]);
        let y = conv2d_forward(&ones, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.; 4]);
    }

    #[test]
    fn conv_padding_and_stride() {
        // 3x3 ones, 3x3 kernel of ones, pad 1: corner sees 4, edge 6, centre 9.
        let ones = t(&[1, 1, 3, 3], &[1.; 9]);
        let k = t(&[1, 1, 3, 3], &[1.; 9]);
        let y = conv2d_forward(&ones, &k, None, 1, 1).unwrap();
        assert_eq!(y.data(), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);
        let y = conv2d_forward(&ones, &k, None, 2, 1).unwrap();
        assert_eq!(y.data(), &[4., 4., 4., 4.]);
        let x4 = t(&[1, 1, 4, 4], &[1.; 16]);
        assert!(conv2d_forward(&x4, &k, None, 2, 0).is_err());
    }

    #[test]
    fn batchnorm_examples() {
        let mut stats = BnStats::<f32>::new(1);
        let x = t(&[3, 1], &[-2., 0.5, 3.]);
        let one = t(&[1], &[1.]);
        let zero = t(&[1], &[0.]);
        let y = batchnorm_forward(&x, &one, &zero, &mut stats, BnMode::Eval, 0.1, 0.0).unwrap();
        assert_eq!(y.data(), x.data());

        let x = t(&[1, 1], &[3.]);
        let two = t(&[1], &[2.]);
        let y = batchnorm_forward(&x, &two, &one, &mut stats, BnMode::Eval, 0.1, 0.0).unwrap();
        assert_eq!(y.data(), &[7.]);

        let x = t(&[2, 1], &[-1., 1.]);
        let y = batchnorm_forward(&x, &one, &zero, &mut stats, BnMode::Train, 0.1, 0.0).unwrap();
        assert_eq!(y.data(), &[-1., 1.]);
        // running mean stays 0, running var moves toward the unbiased 2
        assert_eq!(stats.running_mean, vec![0.0]);
        assert!((stats.running_var[0] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_eval_leaves_buffers() {
        let mut stats = BnStats {
            running_mean: vec![0.3],
            running_var: vec![2.0],
        };
        let before = stats.clone();
        let x = t(&[4, 1], &[1., 2., 3., 4.]);
        let one = t(&[1], &[1.]);
        batchnorm_forward(&x, &one, &one, &mut stats, BnMode::Eval, 0.1, 1e-5).unwrap();
        assert_eq!(stats, before);
    }

    #[test]
    fn batchnorm_zero_channels_rejected() {
        let mut stats = BnStats::<f32> {
            running_mean: vec![],
            running_var: vec![],
        };
        let x = Tensor::<f32> {
            shape: vec![2, 0],
            data: vec![],
            grad: None,
        };
        let g = t(&[1], &[1.]);
        assert!(batchnorm_forward(&x, &g, &g, &mut stats, BnMode::Eval, 0.1, 1e-5).is_err());
    }

    #[test]
    fn pointwise_examples() {
        assert_eq!(relu(&t(&[3], &[-1., 0., 2.])).data(), &[0., 0., 2.]);
        let p = maxpool2x2(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        assert_eq!(p.data(), &[4.]);
        assert!(maxpool2x2(&t(&[1, 1, 3, 2], &[0.; 6])).is_err());
        let f = flatten(&Tensor::<f32>::zeros(vec![2, 3, 4]));
        assert_eq!(f.shape(), &[2, 12]);
    }

    #[test]
    fn xent_examples() {
        let l = softmax_xent(&t(&[1, 4], &[0.3; 4]), &[2]).unwrap();
        assert!((l - 4f32.ln()).abs() < 1e-6);
        let l = softmax_xent(&t(&[1, 2], &[1000., 0.]), &[0]).unwrap();
        assert!(l.abs() < 1e-6);
        let l = softmax_xent(&t(&[1, 2], &[1., 2.]), &[0]).unwrap();
        assert!((l - 1.313_262).abs() < 1e-5);
        assert!(matches!(
            softmax_xent(&t(&[1, 2], &[1., 2.]), &[2]),
            Err(PackError::Input(_))
        ));
        let l = softmax_xent(&t(&[2, 2], &[1e4, -1e4, -1e4, 1e4]), &[1, 0]).unwrap();
        assert!(l.is_finite());
    }

    #[test]
    fn sgd_examples() {
        let mut p = t(&[2], &[1., 1.]);
        sgd_masked_step(&mut p, &[0.5, 0.5], 0.1, &[true, false]).unwrap();
        assert_eq!(p.data(), &[0.95, 1.0]);

        let mut p = t(&[3], &[1., -2., 3.]);
        let before = p.clone();
        sgd_masked_step(&mut p, &[9., 9., 9.], 1.0, &[false; 3]).unwrap();
        assert!(p.bit_eq(&before));

        let g = p.data().to_vec();
        sgd_masked_step(&mut p, &g, 1.0, &[true; 3]).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));

        assert!(sgd_masked_step(&mut p, &[0.; 3], 1.0, &[true; 2]).is_err());
    }
}
