//! Numeric kernels shared by the plain forward pass and the tape.
//!
//! Both callers route through these functions, so a value computed with
//! recording on is bit-identical to one computed with recording off.

use crate::error::TensorError;
use crate::tensor::{Real, Tensor};

pub(crate) fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        _ => Err(TensorError::Rank {
            op,
            expected: "a 2-d tensor",
            found: t.shape().to_vec(),
        }),
    }
}

pub(crate) fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(TensorError::Rank {
            op,
            expected: "a [C, H, W] tensor",
            found: t.shape().to_vec(),
        }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Elementwise binary op. Shapes must match, or either side may be a
/// single-element tensor, which broadcasts.
pub(crate) fn binary(op: BinOp, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let apply = |x: Real, y: Real| match op {
        BinOp::Add => x + y,
        BinOp::Sub => x - y,
        BinOp::Mul => x * y,
        BinOp::Div => x / y,
    };
    if op == BinOp::Div && b.data().iter().any(|&v| v == 0.0) {
        return Err(TensorError::DivisionByZero);
    }
    if a.shape() == b.shape() {
        a.zip_map(b, apply)
    } else if a.is_scalar() {
        let s = a.item();
        Ok(b.map(|v| apply(s, v)))
    } else if b.is_scalar() {
        let s = b.item();
        Ok(a.map(|v| apply(v, s)))
    } else {
        Err(TensorError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

/// `[m, k] x [k, n] -> [m, n]`, or `[m, k] x [k] -> [m]`.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, k) = dims2(a, "matmul lhs")?;
    match b.shape() {
        [bk] if *bk == k => {
            let mut out = vec![0.0; m];
            for i in 0..m {
                let row = &a.data()[i * k..(i + 1) * k];
                out[i] = row.iter().zip(b.data()).map(|(&x, &y)| x * y).sum();
            }
            Ok(Tensor::raw(vec![m], out))
        }
        [bk, n] if *bk == k => {
            let n = *n;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for kk in 0..k {
                    let av = a.data()[i * k + kk];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b.data()[kk * n..(kk + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
            Ok(Tensor::raw(vec![m, n], out))
        }
        _ => Err(TensorError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        }),
    }
}

pub(crate) fn transpose(a: &Tensor) -> Result<Tensor, TensorError> {
    let (m, n) = dims2(a, "transpose")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Ok(Tensor::raw(vec![n, m], out))
}

fn check_conv_geometry(
    op: &'static str,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize), TensorError> {
    if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(TensorError::Window {
            op,
            size: kh.max(kw),
            stride,
            shape: vec![h, w],
        });
    }
    Ok((
        (h + 2 * pad - kh) / stride + 1,
        (w + 2 * pad - kw) / stride + 1,
    ))
}

/// Cross-correlation of `x: [C, H, W]` with kernels `k: [O, C, kh, kw]`.
pub(crate) fn conv2d(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor, TensorError> {
    let (c, h, w) = dims3(x, "conv2d input")?;
    let [o, kc, kh, kw] = k.shape() else {
        return Err(TensorError::Rank {
            op: "conv2d kernel",
            expected: "an [O, C, kh, kw] tensor",
            found: k.shape().to_vec(),
        });
    };
    let (o, kc, kh, kw) = (*o, *kc, *kh, *kw);
    if kc != c {
        return Err(TensorError::ShapeMismatch {
            left: x.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    let (oh, ow) = check_conv_geometry("conv2d", h, w, kh, kw, stride, pad)?;
    let mut out = vec![0.0; o * oh * ow];
    let xd = x.data();
    let kd = k.data();
    for oc in 0..o {
        for ic in 0..c {
            let kbase = (oc * c + ic) * kh * kw;
            let xbase = ic * h * w;
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ox in 0..ow {
                    let ix0 = (ox * stride) as isize - pad as isize;
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * w;
                        let krow = kbase + ky * kw;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += xd[xrow + ix as usize] * kd[krow + kx];
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] += acc;
                }
            }
        }
    }
    Ok(Tensor::raw(vec![o, oh, ow], out))
}

/// Exact adjoint of [`conv2d`] with respect to its input: scatters
/// `s: [O, OH, OW]` back through `k` onto a `[C, H, W]` grid.
pub(crate) fn conv2d_transpose(
    s: &Tensor,
    k: &Tensor,
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
) -> Result<Tensor, TensorError> {
    let (o, oh, ow) = dims3(s, "conv2d_transpose input")?;
    let [ko, c, kh, kw] = k.shape() else {
        return Err(TensorError::Rank {
            op: "conv2d_transpose kernel",
            expected: "an [O, C, kh, kw] tensor",
            found: k.shape().to_vec(),
        });
    };
    let (ko, c, kh, kw) = (*ko, *c, *kh, *kw);
    let (h, w) = out_hw;
    let (eh, ew) = check_conv_geometry("conv2d_transpose", h, w, kh, kw, stride, pad)?;
    if ko != o || (eh, ew) != (oh, ow) {
        return Err(TensorError::ShapeMismatch {
            left: s.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; c * h * w];
    let sd = s.data();
    let kd = k.data();
    for oc in 0..o {
        for ic in 0..c {
            let kbase = (oc * c + ic) * kh * kw;
            let obase = ic * h * w;
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ox in 0..ow {
                    let sv = sd[(oc * oh + oy) * ow + ox];
                    if sv == 0.0 {
                        continue;
                    }
                    let ix0 = (ox * stride) as isize - pad as isize;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let orow = obase + iy as usize * w;
                        let krow = kbase + ky * kw;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[orow + ix as usize] += sv * kd[krow + kx];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::raw(vec![c, h, w], out))
}

/// Gradient of [`conv2d`] with respect to the kernel:
/// `dk[o,c,ky,kx] = sum_{oy,ox} dout[o,oy,ox] * x[c, oy*s-p+ky, ox*s-p+kx]`.
pub(crate) fn conv2d_kernel_grad(
    x: &Tensor,
    dout: &Tensor,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Result<Tensor, TensorError> {
    let (c, h, w) = dims3(x, "conv2d_kernel_grad input")?;
    let (o, oh, ow) = dims3(dout, "conv2d_kernel_grad dout")?;
    let (eh, ew) = check_conv_geometry("conv2d_kernel_grad", h, w, kh, kw, stride, pad)?;
    if (eh, ew) != (oh, ow) {
        return Err(TensorError::ShapeMismatch {
            left: dout.shape().to_vec(),
            right: vec![o, eh, ew],
        });
    }
    let mut out = vec![0.0; o * c * kh * kw];
    let xd = x.data();
    let dd = dout.data();
    for oc in 0..o {
        for ic in 0..c {
            let kbase = (oc * c + ic) * kh * kw;
            let xbase = ic * h * w;
            for oy in 0..oh {
                let iy0 = (oy * stride) as isize - pad as isize;
                for ox in 0..ow {
                    let dv = dd[(oc * oh + oy) * ow + ox];
                    if dv == 0.0 {
                        continue;
                    }
                    let ix0 = (ox * stride) as isize - pad as isize;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * w;
                        let krow = kbase + ky * kw;
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[krow + kx] += dv * xd[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::raw(vec![o, c, kh, kw], out))
}

pub(crate) fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

fn pool_dims(
    op: &'static str,
    h: usize,
    w: usize,
    size: usize,
    stride: usize,
) -> Result<(usize, usize), TensorError> {
    if size == 0 || stride == 0 || h < size || w < size {
        return Err(TensorError::Window {
            op,
            size,
            stride,
            shape: vec![h, w],
        });
    }
    Ok(((h - size) / stride + 1, (w - size) / stride + 1))
}

/// Max pooling. Returns the pooled tensor and, per output element, the flat
/// index of its source in `x` (first occurrence on ties).
pub(crate) fn maxpool(
    x: &Tensor,
    size: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>), TensorError> {
    let (c, h, w) = dims3(x, "maxpool")?;
    let (oh, ow) = pool_dims("maxpool", h, w, size, stride)?;
    let mut out = vec![0.0; c * oh * ow];
    let mut arg = vec![0usize; c * oh * ow];
    let xd = x.data();
    for ic in 0..c {
        let xbase = ic * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = Real::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ky in 0..size {
                    let row = xbase + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..size {
                        let v = xd[row + kx];
                        if v > best {
                            best = v;
                            best_idx = row + kx;
                        }
                    }
                }
                let oidx = (ic * oh + oy) * ow + ox;
                out[oidx] = best;
                arg[oidx] = best_idx;
            }
        }
    }
    Ok((Tensor::raw(vec![c, oh, ow], out), arg))
}

/// Scatters pooled values back to their argmax positions on a grid of shape
/// `x_shape`. Overlapping windows accumulate.
pub(crate) fn max_unpool_scatter(
    r: &Tensor,
    argmax: &[usize],
    x_shape: &[usize],
) -> Result<Tensor, TensorError> {
    if r.len() != argmax.len() {
        return Err(TensorError::LengthMismatch {
            shape: r.shape().to_vec(),
            expected: argmax.len(),
            found: r.len(),
        });
    }
    let mut out = Tensor::zeros(x_shape);
    let len = out.len();
    let od = out.data_mut();
    for (&v, &idx) in r.data().iter().zip(argmax) {
        if idx >= len {
            return Err(TensorError::IndexOutOfBounds { index: idx, len });
        }
        od[idx] += v;
    }
    Ok(out)
}

pub(crate) fn avgpool(x: &Tensor, size: usize, stride: usize) -> Result<Tensor, TensorError> {
    let (c, h, w) = dims3(x, "avgpool")?;
    let (oh, ow) = pool_dims("avgpool", h, w, size, stride)?;
    let inv = 1.0 / (size * size) as Real;
    let mut out = vec![0.0; c * oh * ow];
    let xd = x.data();
    for ic in 0..c {
        let xbase = ic * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..size {
                    let row = xbase + (oy * stride + ky) * w + ox * stride;
                    acc += xd[row..row + size].iter().sum::<Real>();
                }
                out[(ic * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    Ok(Tensor::raw(vec![c, oh, ow], out))
}

/// Exact adjoint of [`avgpool`]: spreads each pooled value uniformly over its
/// source window.
pub(crate) fn avg_spread(
    r: &Tensor,
    size: usize,
    stride: usize,
    out_hw: (usize, usize),
) -> Result<Tensor, TensorError> {
    let (c, oh, ow) = dims3(r, "avg_spread")?;
    let (h, w) = out_hw;
    let (eh, ew) = pool_dims("avg_spread", h, w, size, stride)?;
    if (eh, ew) != (oh, ow) {
        return Err(TensorError::ShapeMismatch {
            left: r.shape().to_vec(),
            right: vec![c, eh, ew],
        });
    }
    let inv = 1.0 / (size * size) as Real;
    let mut out = vec![0.0; c * h * w];
    let rd = r.data();
    for ic in 0..c {
        let obase = ic * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let v = rd[(ic * oh + oy) * ow + ox] * inv;
                for ky in 0..size {
                    let row = obase + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..size {
                        out[row + kx] += v;
                    }
                }
            }
        }
    }
    Ok(Tensor::raw(vec![c, h, w], out))
}

/// Numerically stable softmax over a 1-d tensor.
pub(crate) fn softmax(x: &Tensor) -> Result<Tensor, TensorError> {
    if x.shape().len() != 1 || x.is_empty() {
        return Err(TensorError::Rank {
            op: "softmax",
            expected: "a non-empty 1-d tensor",
            found: x.shape().to_vec(),
        });
    }
    let m = x.data().iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let exps: Vec<Real> = x.data().iter().map(|&v| (v - m).exp()).collect();
    let sum: Real = exps.iter().sum();
    Ok(Tensor::raw(
        x.shape().to_vec(),
        exps.into_iter().map(|e| e / sum).collect(),
    ))
}

pub(crate) fn ln(x: &Tensor) -> Result<Tensor, TensorError> {
    if x.data().iter().any(|&v| v <= 0.0) {
        return Err(TensorError::LogDomain);
    }
    Ok(x.map(Real::ln))
}

pub(crate) fn exp(x: &Tensor) -> Result<Tensor, TensorError> {
    let out = x.map(Real::exp);
    if out.data().iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { context: "exp" });
    }
    Ok(out)
}

/// Adds a per-channel bias `b: [C]` to `x: [C, H, W]`.
pub(crate) fn chan_bias(x: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (c, h, w) = dims3(x, "chan_bias")?;
    if b.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            left: x.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = x.data().to_vec();
    for ic in 0..c {
        let bias = b.data()[ic];
        for v in &mut out[ic * h * w..(ic + 1) * h * w] {
            *v += bias;
        }
    }
    Ok(Tensor::raw(x.shape().to_vec(), out))
}

/// Per-channel affine map `y[c] = x[c] * scale[c] + shift[c]` on `[C, H, W]`.
pub(crate) fn channel_affine(
    x: &Tensor,
    scale: &[Real],
    shift: &[Real],
) -> Result<Tensor, TensorError> {
    let (c, h, w) = dims3(x, "channel_affine")?;
    if scale.len() != c || shift.len() != c {
        return Err(TensorError::ShapeMismatch {
            left: x.shape().to_vec(),
            right: vec![scale.len()],
        });
    }
    let mut out = vec![0.0; c * h * w];
    for ic in 0..c {
        let (a, b) = (scale[ic], shift[ic]);
        let base = ic * h * w;
        for i in 0..h * w {
            out[base + i] = x.data()[base + i] * a + b;
        }
    }
    Ok(Tensor::raw(x.shape().to_vec(), out))
}

/// One bilinear sampling tap: output spatial index, source spatial index, weight.
pub(crate) type ResizeTap = (usize, usize, Real);

/// Sampling plan for a bilinear resize of an `h x w` grid to `oh x ow`.
/// Recomputed on demand; it is cheap and keeps nodes free of plan storage.
pub(crate) fn bilinear_plan(h: usize, w: usize, oh: usize, ow: usize) -> Vec<ResizeTap> {
    let mut taps = Vec::with_capacity(oh * ow * 4);
    let fy_scale = h as Real / oh as Real;
    let fx_scale = w as Real / ow as Real;
    for oy in 0..oh {
        let fy = ((oy as Real + 0.5) * fy_scale - 0.5).clamp(0.0, (h - 1) as Real);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as Real;
        for ox in 0..ow {
            let fx = ((ox as Real + 0.5) * fx_scale - 0.5).clamp(0.0, (w - 1) as Real);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as Real;
            let o = oy * ow + ox;
            taps.push((o, y0 * w + x0, (1.0 - ty) * (1.0 - tx)));
            taps.push((o, y0 * w + x1, (1.0 - ty) * tx));
            taps.push((o, y1 * w + x0, ty * (1.0 - tx)));
            taps.push((o, y1 * w + x1, ty * tx));
        }
    }
    taps
}

pub(crate) fn bilinear_resize(
    x: &Tensor,
    out_hw: (usize, usize),
) -> Result<Tensor, TensorError> {
    let (c, h, w) = dims3(x, "bilinear_resize")?;
    let (oh, ow) = out_hw;
    if oh == 0 || ow == 0 {
        return Err(TensorError::Window {
            op: "bilinear_resize",
            size: 0,
            stride: 1,
            shape: vec![oh, ow],
        });
    }
    let taps = bilinear_plan(h, w, oh, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ic in 0..c {
        let xbase = ic * h * w;
        let obase = ic * oh * ow;
        for &(o, s, wt) in &taps {
            out[obase + o] += wt * x.data()[xbase + s];
        }
    }
    Ok(Tensor::raw(vec![c, oh, ow], out))
}

/// Embeds `x: [C, h, w]` into a zero `[C, H, W]` canvas at `offset`.
pub(crate) fn pad2d(
    x: &Tensor,
    out_hw: (usize, usize),
    offset: (usize, usize),
) -> Result<Tensor, TensorError> {
    let (c, h, w) = dims3(x, "pad2d")?;
    let (hh, ww) = out_hw;
    let (dy, dx) = offset;
    if dy + h > hh || dx + w > ww {
        return Err(TensorError::Window {
            op: "pad2d",
            size: h.max(w),
            stride: 1,
            shape: vec![hh, ww],
        });
    }
    let mut out = vec![0.0; c * hh * ww];
    for ic in 0..c {
        for iy in 0..h {
            let src = (ic * h + iy) * w;
            let dst = (ic * hh + dy + iy) * ww + dx;
            out[dst..dst + w].copy_from_slice(&x.data()[src..src + w]);
        }
    }
    Ok(Tensor::raw(vec![c, hh, ww], out))
}

/// Adjoint of [`pad2d`]: crops the `[C, h, w]` window at `offset`.
pub(crate) fn crop2d(
    d: &Tensor,
    inner_hw: (usize, usize),
    offset: (usize, usize),
) -> Result<Tensor, TensorError> {
    let (c, hh, ww) = dims3(d, "crop2d")?;
    let (h, w) = inner_hw;
    let (dy, dx) = offset;
    if dy + h > hh || dx + w > ww {
        return Err(TensorError::Window {
            op: "crop2d",
            size: h.max(w),
            stride: 1,
            shape: vec![hh, ww],
        });
    }
    let mut out = vec![0.0; c * h * w];
    for ic in 0..c {
        for iy in 0..h {
            let src = (ic * hh + dy + iy) * ww + dx;
            let dst = (ic * h + iy) * w;
            out[dst..dst + w].copy_from_slice(&d.data()[src..src + w]);
        }
    }
    Ok(Tensor::raw(vec![c, h, w], out))
}

pub(crate) fn sum_all(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum())
}

/// Max over all elements; ties resolve to the first index.
pub(crate) fn max_all(x: &Tensor) -> Result<(Tensor, usize), TensorError> {
    let (idx, v) = x.max_element()?;
    Ok((Tensor::scalar(v), idx))
}

/// Max over all elements except `skip`; ties resolve to the first index.
pub(crate) fn max_all_except(x: &Tensor, skip: usize) -> Result<(Tensor, usize), TensorError> {
    if skip >= x.len() {
        return Err(TensorError::IndexOutOfBounds {
            index: skip,
            len: x.len(),
        });
    }
    let mut best: Option<(usize, Real)> = None;
    for (i, &v) in x.data().iter().enumerate() {
        if i == skip {
            continue;
        }
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    let (idx, v) = best.ok_or(TensorError::Rank {
        op: "max_all_except",
        expected: "at least 2 elements",
        found: x.shape().to_vec(),
    })?;
    Ok((Tensor::scalar(v), idx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[Real]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn binary_broadcasts_scalars_both_ways() {
        let v = t(&[3], &[1.0, 2.0, 3.0]);
        let s = Tensor::scalar(2.0);
        assert_eq!(binary(BinOp::Mul, &v, &s).unwrap().data(), &[2.0, 4.0, 6.0]);
        assert_eq!(binary(BinOp::Sub, &s, &v).unwrap().data(), &[1.0, 0.0, -1.0]);
        assert!(binary(BinOp::Add, &v, &t(&[2], &[1.0, 2.0])).is_err());
        assert!(matches!(
            binary(BinOp::Div, &v, &t(&[3], &[1.0, 0.0, 2.0])),
            Err(TensorError::DivisionByZero)
        ));
    }

    #[test]
    fn matmul_matrix_and_vector() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = t(&[3], &[1.0, 0.0, -1.0]);
        assert_eq!(matmul(&a, &v).unwrap().data(), &[-2.0, -2.0]);
        let b = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let at = transpose(&a).unwrap();
        assert_eq!(at.shape(), &[3, 2]);
        assert_eq!(at.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(transpose(&at).unwrap(), a);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = t(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        // 1x1 kernel with weight 1 reproduces the image.
        let k = t(&[1, 1, 1, 1], &[1.0]);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
        // 3x3 kernel with a centered 1 and same-padding reproduces it too.
        let mut delta = vec![0.0; 9];
        delta[4] = 1.0;
        let k3 = t(&[1, 1, 3, 3], &delta);
        assert_eq!(conv2d(&x, &k3, 1, 1).unwrap(), x);
    }

    #[test]
    fn conv2d_known_values() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
        // stride 2, pad 1: four windows each catching one corner value.
        let y = conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv2d_transpose_is_adjoint_of_conv2d() {
        // <conv(x), s> == <x, conv_t(s)> for random-ish fixed tensors.
        let x = t(
            &[2, 4, 4],
            &(0..32).map(|i| ((i * 7 + 3) % 11) as Real - 5.0).collect::<Vec<_>>(),
        );
        let k = t(
            &[3, 2, 3, 3],
            &(0..54).map(|i| ((i * 5 + 1) % 13) as Real - 6.0).collect::<Vec<_>>(),
        );
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let y = conv2d(&x, &k, stride, pad).unwrap();
            let s = y.map(|v| (v * 0.37).sin());
            let xt = conv2d_transpose(&s, &k, stride, pad, (4, 4)).unwrap();
            let lhs: Real = y.data().iter().zip(s.data()).map(|(a, b)| a * b).sum();
            let rhs: Real = x.data().iter().zip(xt.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn maxpool_values_and_argmax() {
        let x = t(&[1, 2, 4], &[1.0, 3.0, 2.0, 2.0, 0.0, 3.0, 5.0, 1.0]);
        let (y, arg) = maxpool(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2]);
        assert_eq!(y.data(), &[3.0, 5.0]);
        // The tied 3.0 picks the earlier flat index (row-major scan).
        assert_eq!(arg, vec![1, 6]);
        let back = max_unpool_scatter(&y, &arg, &[1, 2, 4]).unwrap();
        assert_eq!(back.data(), &[0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 5.0, 0.0]);
    }

    #[test]
    fn avgpool_and_spread() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = avgpool(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[2.5]);
        let back = avg_spread(&y, 2, 2, (2, 2)).unwrap();
        assert_eq!(back.data(), &[0.625, 0.625, 0.625, 0.625]);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax(&t(&[3], &[1000.0, 0.0, 0.0])).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-12);
        let sum: Real = softmax(&t(&[4], &[0.3, -1.2, 2.0, 0.7]))
            .unwrap()
            .data()
            .iter()
            .sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ln_and_exp_domains() {
        assert!(matches!(ln(&t(&[2], &[1.0, 0.0])), Err(TensorError::LogDomain)));
        assert!(matches!(
            exp(&t(&[1], &[1e30])),
            Err(TensorError::NonFinite { .. })
        ));
        let y = ln(&exp(&t(&[2], &[0.5, -0.5])).unwrap()).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn channel_affine_maps_per_channel() {
        let x = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = channel_affine(&x, &[2.0, 0.5], &[0.0, 1.0]).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 2.5, 3.0]);
    }

    #[test]
    fn bilinear_resize_identity_and_mean() {
        let x = t(&[1, 2, 2], &[0.0, 2.0, 4.0, 6.0]);
        assert_eq!(bilinear_resize(&x, (2, 2)).unwrap(), x);
        let y = bilinear_resize(&x, (1, 1)).unwrap();
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn pad_and_crop_are_inverse() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let padded = pad2d(&x, (4, 4), (1, 2)).unwrap();
        assert_eq!(padded.shape(), &[1, 4, 4]);
        assert_eq!(padded.data().iter().sum::<Real>(), 10.0);
        assert_eq!(crop2d(&padded, (2, 2), (1, 2)).unwrap(), x);
    }

    #[test]
    fn reductions() {
        let x = t(&[4], &[1.0, 7.0, 7.0, 2.0]);
        assert_eq!(sum_all(&x).item(), 17.0);
        let (m, arg) = max_all(&x).unwrap();
        assert_eq!((m.item(), arg), (7.0, 1));
        let (m, arg) = max_all_except(&x, 1).unwrap();
        assert_eq!((m.item(), arg), (7.0, 2));
        let (m, arg) = max_all_except(&x, 2).unwrap();
        assert_eq!((m.item(), arg), (7.0, 1));
    }
}
