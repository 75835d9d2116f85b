//! Forward and backward kernels for the supported layer set.
//!
//! Every kernel is a pure function on flat row-major buffers. Reductions
//! accumulate in `f64` regardless of element type so that an `f32` network
//! and its `f64` lift produce gradients that agree to verification precision.

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[inline]
fn dot_f64<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| x.to_real() * y.to_real())
        .sum()
}

/// y[n,o] = b[o] + sum_i x[n,i] * w[o,i]
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, in_dim) = match x.shape() {
        [n, d] => (*n, *d),
        s => {
            return Err(Error::ShapeMismatch(format!(
                "dense expects a [batch, features] input, got {s:?}"
            )))
        }
    };
    let (out_dim, w_in) = (w.shape()[0], w.shape()[1]);
    if w_in != in_dim || b.shape() != [out_dim] {
        return Err(Error::ShapeMismatch(format!(
            "dense weight {:?} / bias {:?} do not match input width {}",
            w.shape(),
            b.shape(),
            in_dim
        )));
    }
    let mut out = vec![T::zero(); n * out_dim];
    for row in 0..n {
        let xr = &x.data()[row * in_dim..(row + 1) * in_dim];
        for o in 0..out_dim {
            let wr = &w.data()[o * in_dim..(o + 1) * in_dim];
            let acc = b.data()[o].to_real() + dot_f64(xr, wr);
            out[row * out_dim + o] = T::from_real(acc);
        }
    }
    Ok(Tensor::from_parts(vec![n, out_dim], out))
}

/// Returns (d_input, d_weight, d_bias).
pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (n, in_dim) = (x.shape()[0], x.shape()[1]);
    let out_dim = w.shape()[0];
    if d_out.shape() != [n, out_dim] {
        return Err(Error::ShapeMismatch(format!(
            "dense backward: upstream gradient {:?}, expected [{n}, {out_dim}]",
            d_out.shape()
        )));
    }
    let mut dx = vec![0.0f64; n * in_dim];
    let mut dw = vec![0.0f64; out_dim * in_dim];
    let mut db = vec![0.0f64; out_dim];
    for row in 0..n {
        let xr = &x.data()[row * in_dim..(row + 1) * in_dim];
        let dxr = &mut dx[row * in_dim..(row + 1) * in_dim];
        for o in 0..out_dim {
            let g = d_out.data()[row * out_dim + o].to_real();
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let wr = &w.data()[o * in_dim..(o + 1) * in_dim];
            let dwr = &mut dw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                dxr[i] += g * wr[i].to_real();
                dwr[i] += g * xr[i].to_real();
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::from_real).collect::<Vec<T>>();
    Ok((
        Tensor::from_parts(vec![n, in_dim], cast(dx)),
        cast(dw),
        cast(db),
    ))
}

fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::ShapeMismatch(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// 2-D convolution with implicit zero padding.
///
/// x: [N, IC, H, W], w: [OC, IC, KH, KW], b: [OC] -> [N, OC, OH, OW]
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor<T>> {
    let (n, ic, h, wd) = match x.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        s => {
            return Err(Error::ShapeMismatch(format!(
                "conv2d expects a [batch, ch, h, w] input, got {s:?}"
            )))
        }
    };
    let (oc, wic, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wic != ic || b.shape() != [oc] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d weight {:?} / bias {:?} do not match {ic} input channels",
            w.shape(),
            b.shape()
        )));
    }
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    let oh = conv_out_len(h, kh, sh, ph)?;
    let ow = conv_out_len(wd, kw, sw, pw)?;

    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![T::zero(); n * oc * oh * ow];
    for nb in 0..n {
        for o in 0..oc {
            let bias = b.data()[o].to_real();
            for oy in 0..oh {
                let iy0 = (oy * sh) as isize - ph as isize;
                let orow = ((nb * oc + o) * oh + oy) * ow;
                for ox in 0..ow {
                    let ix0 = (ox * sw) as isize - pw as isize;
                    let kx_lo = (-ix0).max(0) as usize;
                    let kx_hi = kw.min((wd as isize - ix0).max(0) as usize);
                    let mut acc = bias;
                    for c in 0..ic {
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            if kx_lo >= kx_hi {
                                continue;
                            }
                            let xrow = ((nb * ic + c) * h + iy as usize) * wd;
                            let xs = xrow + (ix0 + kx_lo as isize) as usize;
                            let ks = (o * ic + c) * kh * kw + ky * kw + kx_lo;
                            acc += dot_f64(
                                &xd[xs..xs + (kx_hi - kx_lo)],
                                &wdat[ks..ks + (kx_hi - kx_lo)],
                            );
                        }
                    }
                    out[orow + ox] = T::from_real(acc);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, oc, oh, ow], out))
}

/// Returns (d_input, d_weight, d_bias).
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: (usize, usize),
    padding: (usize, usize),
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (n, ic, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oc, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    let (oh, ow) = (d_out.shape()[2], d_out.shape()[3]);
    if d_out.shape()[0] != n || d_out.shape()[1] != oc {
        return Err(Error::ShapeMismatch(
            "conv2d backward: upstream gradient does not match output".into(),
        ));
    }

    let xd = x.data();
    let wdat = w.data();
    let mut dx = vec![0.0f64; x.len()];
    let mut dw = vec![0.0f64; w.len()];
    let mut db = vec![0.0f64; oc];
    for nb in 0..n {
        for o in 0..oc {
            for oy in 0..oh {
                let iy0 = (oy * sh) as isize - ph as isize;
                let orow = ((nb * oc + o) * oh + oy) * ow;
                for ox in 0..ow {
                    let g = d_out.data()[orow + ox].to_real();
                    if g == 0.0 {
                        continue;
                    }
                    db[o] += g;
                    let ix0 = (ox * sw) as isize - pw as isize;
                    let kx_lo = (-ix0).max(0) as usize;
                    let kx_hi = kw.min((wd as isize - ix0).max(0) as usize);
                    for c in 0..ic {
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize || kx_lo >= kx_hi {
                                continue;
                            }
                            let xrow = ((nb * ic + c) * h + iy as usize) * wd;
                            let xs = xrow + (ix0 + kx_lo as isize) as usize;
                            let ks = (o * ic + c) * kh * kw + ky * kw + kx_lo;
                            for k in 0..(kx_hi - kx_lo) {
                                dx[xs + k] += wdat[ks + k].to_real() * g;
                                dw[ks + k] += xd[xs + k].to_real() * g;
                            }
                        }
                    }
                }
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::from_real).collect::<Vec<T>>();
    Ok((
        Tensor::from_parts(x.shape().to_vec(), cast(dx)),
        cast(dw),
        cast(db),
    ))
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Subgradient at exactly 0 is 0: gradient passes only where the input was
/// strictly positive.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, d_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Max pooling over [N, C, H, W]. Ties break toward the first (lowest flat
/// index) element of the window; its index is recorded for the backward pass.
pub fn maxpool_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = match x.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        s => {
            return Err(Error::ShapeMismatch(format!(
                "maxpool expects a [batch, ch, h, w] input, got {s:?}"
            )))
        }
    };
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let oh = conv_out_len(h, kh, sh, 0)?;
    let ow = conv_out_len(w, kw, sw, 0)?;
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for nb in 0..n {
        for ch in 0..c {
            let plane = (nb * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for ky in 0..kh {
                        let row = plane + (oy * sh + ky) * w + ox * sw;
                        for kx in 0..kw {
                            let v = xd[row + kx];
                            if v > best {
                                best = v;
                                best_idx = row + kx;
                            }
                        }
                    }
                    let oi = ((nb * c + ch) * oh + oy) * ow + ox;
                    out[oi] = best;
                    argmax[oi] = best_idx;
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), argmax))
}

pub fn maxpool_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    d_out: &Tensor<T>,
) -> Tensor<T> {
    let numel: usize = input_shape.iter().product();
    let mut dx = vec![T::zero(); numel];
    for (g, &src) in d_out.data().iter().zip(argmax) {
        dx[src] = dx[src] + *g;
    }
    Tensor::from_parts(input_shape.to_vec(), dx)
}

/// Row-wise stable softmax.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = match logits.shape() {
        [n, k] => (*n, *k),
        s => {
            return Err(Error::ShapeMismatch(format!(
                "softmax expects [batch, classes], got {s:?}"
            )))
        }
    };
    let mut out = vec![T::zero(); n * k];
    for row in 0..n {
        let r = &logits.data()[row * k..(row + 1) * k];
        let m = r.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.to_real()));
        let exps: Vec<f64> = r.iter().map(|v| (v.to_real() - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (o, e) in out[row * k..(row + 1) * k].iter_mut().zip(&exps) {
            *o = T::from_real(e / sum);
        }
    }
    Ok(Tensor::from_parts(vec![n, k], out))
}

/// Mean cross-entropy of softmax(logits) against integer labels.
/// Returns the loss and the softmax probabilities.
pub fn softmax_ce_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidConfig(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let probs = softmax(logits)?;
    let mut loss = 0.0f64;
    for (row, &label) in labels.iter().enumerate() {
        let r = &logits.data()[row * k..(row + 1) * k];
        let m = r.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.to_real()));
        let log_sum: f64 = r.iter().map(|v| (v.to_real() - m).exp()).sum::<f64>().ln();
        loss -= r[label].to_real() - m - log_sum;
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, probs))
}

/// d loss / d logits for the mean cross-entropy: (p - onehot(label)) / N.
pub fn softmax_ce_grad<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Tensor<T> {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let scale = 1.0 / n as f64;
    let mut d = vec![T::zero(); n * k];
    for row in 0..n {
        for j in 0..k {
            let p = probs.data()[row * k + j].to_real();
            let y = if labels[row] == j { 1.0 } else { 0.0 };
            d[row * k + j] = T::from_real((p - y) * scale);
        }
    }
    Tensor::from_parts(vec![n, k], d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_matches_hand_product() {
        let x = Tensor::new(vec![1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        let b = Tensor::new(vec![2], vec![0.25, -0.25]).unwrap();
        let y = dense_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.0 - 3.0 + 0.25, 3.0 - 0.25]);
    }

    #[test]
    fn relu_zero_input_has_zero_subgradient() {
        let x = Tensor::new(vec![1, 3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        let g = Tensor::new(vec![1, 3], vec![5.0, 5.0, 5.0]).unwrap();
        let dx = relu_backward(&x, &g);
        assert_eq!(dx.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn maxpool_tie_routes_to_first_element() {
        // 2x2 window of all-equal values: gradient must land on index 0.
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64; 4]).unwrap();
        let (y, argmax) = maxpool_forward(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(y.data(), &[1.0]);
        assert_eq!(argmax, vec![0]);
        let d_out = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let dx = maxpool_backward(&[1, 1, 2, 2], &argmax, &d_out);
        assert_eq!(dx.data(), &[3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let l = Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        let p = softmax(&l).unwrap();
        for row in 0..2 {
            let s: f64 = p.data()[row * 3..(row + 1) * 3]
                .iter()
                .map(|v| *v as f64)
                .sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_rejects_kernel_larger_than_input() {
        let x = Tensor::new(vec![1, 1, 4, 4], vec![0.0f32; 16]).unwrap();
        let w = Tensor::new(vec![1, 1, 5, 5], vec![0.0f32; 25]).unwrap();
        let b = Tensor::new(vec![1], vec![0.0f32]).unwrap();
        assert!(conv2d_forward(&x, &w, &b, (1, 1), (0, 0)).is_err());
        // with padding 2 it fits
        assert!(conv2d_forward(&x, &w, &b, (1, 1), (2, 2)).is_ok());
    }
}
