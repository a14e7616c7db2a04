//! Forward kernels (and the few backward kernels that are not one-liners).
//! Usable directly on [`Tensor`] values without a tape.

use super::Tensor;
use crate::error::{Error, Result};
use crate::Scalar;

/// `a[m×k] · b[k×n]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("{:?} · {:?}", a.shape(), b.shape()),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` for `a[m×k]`, `b[m×n]`, giving `[k×n]`.
pub fn matmul_at_b<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2("matmul_at_b")?;
    let (m2, n) = b.dims2("matmul_at_b")?;
    if m != m2 {
        return Err(Error::dim(
            "matmul_at_b",
            format!("{:?}ᵀ · {:?}", a.shape(), b.shape()),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![S::zero(); k * n];
    for i in 0..m {
        let brow = &bd[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
    Tensor::new(vec![k, n], out)
}

/// `a · bᵀ` for `a[m×n]`, `b[k×n]`, giving `[m×k]`.
pub fn matmul_a_bt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, n) = a.dims2("matmul_a_bt")?;
    let (k, n2) = b.dims2("matmul_a_bt")?;
    if n != n2 {
        return Err(Error::dim(
            "matmul_a_bt",
            format!("{:?} · {:?}ᵀ", a.shape(), b.shape()),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![S::zero(); m * k];
    for i in 0..m {
        let arow = &ad[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &bd[j * n..(j + 1) * n];
            out[i * k + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, k], out)
}

/// Row-wise log-softmax via the max-shifted log-sum-exp.
pub fn log_softmax_rows<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (_, k) = x.dims2("log_softmax")?;
    if k < 2 {
        return Err(Error::dim("log_softmax", "need at least 2 classes"));
    }
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(k) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    Ok(log_softmax_rows(x)?.map(S::exp))
}

/// `ln σ(x) = min(x, 0) − ln(1 + e^{−|x|})`, stable for all finite x.
#[inline]
pub fn log_sigmoid<S: Scalar>(x: S) -> S {
    x.min(S::zero()) - (-x.abs()).exp().ln_1p()
}

fn dims4<S: Scalar>(t: &Tensor<S>, op: &'static str) -> Result<[usize; 4]> {
    match t.shape()[..] {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::dim(op, format!("expected rank 4, got {:?}", t.shape()))),
    }
}

/// Valid (unpadded) stride-1 cross-correlation.
///
/// `x[b×c×h×w]`, `kernel[o×c×kh×kw]`, `bias[o]` → `[b×o×(h−kh+1)×(w−kw+1)]`.
pub fn conv2d<S: Scalar>(x: &Tensor<S>, kernel: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let [nb, c, h, w] = dims4(x, "conv2d")?;
    let [o, kc, kh, kw] = dims4(kernel, "conv2d")?;
    if kc != c {
        return Err(Error::dim(
            "conv2d",
            format!("input has {c} channels, kernel expects {kc}"),
        ));
    }
    if kh > h || kw > w {
        return Err(Error::dim(
            "conv2d",
            format!("kernel {kh}×{kw} larger than input {h}×{w}"),
        ));
    }
    if bias.shape() != [o] {
        return Err(Error::dim("conv2d", format!("bias shape {:?}, expected [{o}]", bias.shape())));
    }
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let (xd, kd, bd) = (x.data(), kernel.data(), bias.data());
    let mut out = vec![S::zero(); nb * o * oh * ow];
    for b in 0..nb {
        for oc in 0..o {
            let obase = (b * o + oc) * oh * ow;
            out[obase..obase + oh * ow].fill(bd[oc]);
            for ic in 0..c {
                let xbase = (b * c + ic) * h * w;
                let kbase = (oc * c + ic) * kh * kw;
                for di in 0..kh {
                    for dj in 0..kw {
                        let kv = kd[kbase + di * kw + dj];
                        for i in 0..oh {
                            let xrow = xbase + (i + di) * w + dj;
                            let orow = obase + i * ow;
                            for j in 0..ow {
                                out[orow + j] = out[orow + j] + kv * xd[xrow + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![nb, o, oh, ow], out)
}

/// Gradients of [`conv2d`] w.r.t. input, kernel and bias given the output gradient.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    kernel: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let [nb, c, h, w] = dims4(x, "conv2d_backward")?;
    let [o, _, kh, kw] = dims4(kernel, "conv2d_backward")?;
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    if grad_out.shape() != [nb, o, oh, ow] {
        return Err(Error::dim(
            "conv2d_backward",
            format!("grad shape {:?}", grad_out.shape()),
        ));
    }
    let (xd, kd, gd) = (x.data(), kernel.data(), grad_out.data());
    let mut dx = vec![S::zero(); xd.len()];
    let mut dk = vec![S::zero(); kd.len()];
    let mut db = vec![S::zero(); o];
    for b in 0..nb {
        for oc in 0..o {
            let gbase = (b * o + oc) * oh * ow;
            let g = &gd[gbase..gbase + oh * ow];
            db[oc] = db[oc] + g.iter().copied().sum::<S>();
            for ic in 0..c {
                let xbase = (b * c + ic) * h * w;
                let kbase = (oc * c + ic) * kh * kw;
                for di in 0..kh {
                    for dj in 0..kw {
                        let kv = kd[kbase + di * kw + dj];
                        let mut acc = S::zero();
                        for i in 0..oh {
                            let xrow = xbase + (i + di) * w + dj;
                            for j in 0..ow {
                                let gv = g[i * ow + j];
                                acc = acc + gv * xd[xrow + j];
                                dx[xrow + j] = dx[xrow + j] + gv * kv;
                            }
                        }
                        dk[kbase + di * kw + dj] = dk[kbase + di * kw + dj] + acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
        Tensor::new(vec![o], db)?,
    ))
}

/// Non-overlapping 2×2 max pooling. Returns the pooled tensor and, for each
/// output element, the flat index of the input element it came from (first
/// maximum in row-major window order on ties).
pub fn maxpool2d<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, Vec<usize>)> {
    let [nb, c, h, w] = dims4(x, "maxpool2d")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(
            "maxpool2d",
            format!("spatial extents {h}×{w} must be even"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(nb * c * oh * ow);
    let mut arg = Vec::with_capacity(nb * c * oh * ow);
    for plane in 0..nb * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![nb, c, oh, ow], out)?, arg))
}
