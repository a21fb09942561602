//! Forward and backward passes for the fixed layer set.
//!
//! No autodiff graph: each layer exposes an explicit forward and an
//! explicit backward, and the two networks in this crate chain them by
//! hand. Convolutions are 3x3 with pad 1 and stride 1 or 2 (stride-2
//! convs stand in for pooling). Accumulation order is fixed (row-major,
//! left to right), which makes every op bitwise deterministic.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// c += a * b for row-major a: \[m,k\], b: \[k,n\], c: \[m,n\].
///
/// The k loop is outside the n loop, so each c entry accumulates over k in
/// ascending order regardless of how the inner loop vectorizes.
fn gemm_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

fn want_2d(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape {
            op,
            detail: format!("expected 2-d tensor, got {s:?}"),
        }),
    }
}

// ---------------------------------------------------------------------------
// Linear layer
// ---------------------------------------------------------------------------

/// out = x . w + b, with b broadcast over rows.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d_in) = want_2d(x, "linear_forward")?;
    let (wd_in, d_out) = want_2d(w, "linear_forward")?;
    if wd_in != d_in || b.shape() != [d_out] {
        return Err(Error::Shape {
            op: "linear_forward",
            detail: format!(
                "x {:?}, w {:?}, b {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            ),
        });
    }
    let mut out = Tensor::zeros(&[n, d_out]);
    gemm_acc(out.data_mut(), x.data(), w.data(), n, d_in, d_out);
    let bs = b.data();
    for row in out.data_mut().chunks_exact_mut(d_out) {
        for (o, &bv) in row.iter_mut().zip(bs) {
            *o += bv;
        }
    }
    Ok(out)
}

pub struct LinearGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<LinearGrads> {
    let (n, d_in) = want_2d(x, "linear_backward")?;
    let (_, d_out) = want_2d(w, "linear_backward")?;
    if grad_out.shape() != [n, d_out] {
        return Err(Error::Shape {
            op: "linear_backward",
            detail: format!("grad_out {:?} vs [{n}, {d_out}]", grad_out.shape()),
        });
    }
    let mut gx = Tensor::zeros(&[n, d_in]);
    let wt = transpose(w.data(), d_in, d_out);
    gemm_acc(gx.data_mut(), grad_out.data(), &wt, n, d_out, d_in);

    let mut gw = Tensor::zeros(&[d_in, d_out]);
    let xt = transpose(x.data(), n, d_in);
    gemm_acc(gw.data_mut(), &xt, grad_out.data(), d_in, n, d_out);

    let mut gb = Tensor::zeros(&[d_out]);
    for row in grad_out.data().chunks_exact(d_out) {
        for (g, &v) in gb.data_mut().iter_mut().zip(row) {
            *g += v;
        }
    }
    Ok(LinearGrads { x: gx, w: gw, b: gb })
}

// ---------------------------------------------------------------------------
// 3x3 convolution (cross-correlation), pad 1, stride 1 or 2
// ---------------------------------------------------------------------------

pub const CONV_KERNEL: usize = 3;
pub const CONV_PAD: usize = 1;

fn conv_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        s => Err(Error::Shape {
            op,
            detail: format!("expected [N,C,H,W], got {s:?}"),
        }),
    }
}

fn conv_check(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    op: &'static str,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c_in, h, w) = conv_dims(x, op)?;
    let (c_out, kc_in, kh, kw) = conv_dims(k, op)?;
    if kh != CONV_KERNEL || kw != CONV_KERNEL || kc_in != c_in {
        return Err(Error::Shape {
            op,
            detail: format!("kernel {:?} vs input channels {c_in}", k.shape()),
        });
    }
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidParam {
            op,
            detail: format!("stride must be 1 or 2, got {stride}"),
        });
    }
    if h + 2 * CONV_PAD < CONV_KERNEL || w + 2 * CONV_PAD < CONV_KERNEL {
        return Err(Error::Shape {
            op,
            detail: format!("kernel exceeds padded input {h}x{w}"),
        });
    }
    let oh = (h + 2 * CONV_PAD - CONV_KERNEL) / stride + 1;
    let ow = (w + 2 * CONV_PAD - CONV_KERNEL) / stride + 1;
    Ok((n, c_in, h, w, c_out, oh, ow))
}

/// Unfold one sample into a (c_in*9) x (oh*ow) patch matrix.
fn im2col(
    x: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    col: &mut [f32],
) {
    debug_assert_eq!(col.len(), c_in * 9 * oh * ow);
    for ci in 0..c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for kh in 0..CONV_KERNEL {
            for kw in 0..CONV_KERNEL {
                let row = &mut col[(ci * 9 + kh * 3 + kw) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + kh) as isize - CONV_PAD as isize;
                    let out_row = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kw) as isize - CONV_PAD as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch matrix back onto an input-shaped gradient plane.
fn col2im_acc(
    col: &[f32],
    c_in: usize,
    h: usize,
    w: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    gx: &mut [f32],
) {
    for ci in 0..c_in {
        let plane = &mut gx[ci * h * w..(ci + 1) * h * w];
        for kh in 0..CONV_KERNEL {
            for kw in 0..CONV_KERNEL {
                let row = &col[(ci * 9 + kh * 3 + kw) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + kh) as isize - CONV_PAD as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * stride + kw) as isize - CONV_PAD as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// x: \[N,C_in,H,W\], k: \[C_out,C_in,3,3\], b: \[C_out\] -> \[N,C_out,H',W'\].
pub fn conv2d_forward(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let (n, c_in, h, w, c_out, oh, ow) = conv_check(x, k, stride, "conv2d_forward")?;
    if b.shape() != [c_out] {
        return Err(Error::Shape {
            op: "conv2d_forward",
            detail: format!("bias {:?} vs {c_out} output channels", b.shape()),
        });
    }
    let mut out = Tensor::zeros(&[n, c_out, oh, ow]);
    let mut col = vec![0.0f32; c_in * 9 * oh * ow];
    let in_stride = c_in * h * w;
    let out_stride = c_out * oh * ow;
    for s in 0..n {
        im2col(
            &x.data()[s * in_stride..(s + 1) * in_stride],
            c_in,
            h,
            w,
            stride,
            oh,
            ow,
            &mut col,
        );
        let out_s = &mut out.data_mut()[s * out_stride..(s + 1) * out_stride];
        gemm_acc(out_s, k.data(), &col, c_out, c_in * 9, oh * ow);
        for co in 0..c_out {
            let bv = b.data()[co];
            for o in &mut out_s[co * oh * ow..(co + 1) * oh * ow] {
                *o += bv;
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads {
    pub x: Tensor,
    pub k: Tensor,
    pub b: Tensor,
}

pub fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    grad_out: &Tensor,
) -> Result<ConvGrads> {
    let (n, c_in, h, w, c_out, oh, ow) = conv_check(x, k, stride, "conv2d_backward")?;
    if grad_out.shape() != [n, c_out, oh, ow] {
        return Err(Error::Shape {
            op: "conv2d_backward",
            detail: format!("grad_out {:?} vs [{n},{c_out},{oh},{ow}]", grad_out.shape()),
        });
    }
    let mut gx = Tensor::zeros(&[n, c_in, h, w]);
    let mut gk = Tensor::zeros(&[c_out, c_in, 3, 3]);
    let mut gb = Tensor::zeros(&[c_out]);

    let kt = transpose(k.data(), c_out, c_in * 9);
    let mut col = vec![0.0f32; c_in * 9 * oh * ow];
    let mut gcol = vec![0.0f32; c_in * 9 * oh * ow];
    let in_stride = c_in * h * w;
    let out_stride = c_out * oh * ow;

    for s in 0..n {
        let go_s = &grad_out.data()[s * out_stride..(s + 1) * out_stride];
        // bias: plain sums per output channel
        for co in 0..c_out {
            let mut acc = 0.0f32;
            for &v in &go_s[co * oh * ow..(co + 1) * oh * ow] {
                acc += v;
            }
            gb.data_mut()[co] += acc;
        }
        // kernel: gk += go . col^T
        im2col(
            &x.data()[s * in_stride..(s + 1) * in_stride],
            c_in,
            h,
            w,
            stride,
            oh,
            ow,
            &mut col,
        );
        let colt = transpose(&col, c_in * 9, oh * ow);
        gemm_acc(gk.data_mut(), go_s, &colt, c_out, oh * ow, c_in * 9);
        // input: gcol = k^T . go, folded back
        gcol.fill(0.0);
        gemm_acc(&mut gcol, &kt, go_s, c_in * 9, c_out, oh * ow);
        col2im_acc(
            &gcol,
            c_in,
            h,
            w,
            stride,
            oh,
            ow,
            &mut gx.data_mut()[s * in_stride..(s + 1) * in_stride],
        );
    }
    Ok(ConvGrads { x: gx, k: gk, b: gb })
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::expf(-x))
    } else {
        let e = libm::expf(x);
        e / (1.0 + e)
    }
}

pub fn activation_forward(x: &Tensor, kind: Activation) -> Tensor {
    let mut out = x.clone();
    match kind {
        Activation::Relu => {
            for v in out.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Activation::Sigmoid => {
            for v in out.data_mut() {
                *v = sigmoid_scalar(*v);
            }
        }
    }
    out
}

/// Backward through an activation. `x` is the forward input, `y` the
/// forward output (relu uses `x`, sigmoid uses `y`).
pub fn activation_backward(
    kind: Activation,
    x: &Tensor,
    y: &Tensor,
    grad_out: &Tensor,
) -> Result<Tensor> {
    if x.shape() != grad_out.shape() || y.shape() != grad_out.shape() {
        return Err(Error::Shape {
            op: "activation_backward",
            detail: format!("{:?} / {:?} / {:?}", x.shape(), y.shape(), grad_out.shape()),
        });
    }
    let mut gx = grad_out.clone();
    match kind {
        Activation::Relu => {
            for (g, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
                if xv <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        Activation::Sigmoid => {
            for (g, &yv) in gx.data_mut().iter_mut().zip(y.data()) {
                *g *= yv * (1.0 - yv);
            }
        }
    }
    Ok(gx)
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy
// ---------------------------------------------------------------------------

pub struct SoftmaxXent {
    /// Mean negative log-likelihood of the labels.
    pub loss: f32,
    /// Row-normalized probabilities, same shape as the logits.
    pub probs: Tensor,
}

/// Row-wise softmax (max-subtracted) with mean cross-entropy loss.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<SoftmaxXent> {
    let (n, k) = want_2d(logits, "softmax_xent")?;
    if labels.len() != n {
        return Err(Error::Shape {
            op: "softmax_xent",
            detail: format!("{} labels for {n} rows", labels.len()),
        });
    }
    let mut probs = logits.clone();
    let mut loss = 0.0f32;
    for (row, &label) in probs.data_mut().chunks_exact_mut(k).zip(labels) {
        if label >= k {
            return Err(Error::Index {
                op: "softmax_xent",
                detail: format!("label {label} for {k} classes"),
            });
        }
        let mut m = row[0];
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut z = 0.0f32;
        for v in row.iter_mut() {
            *v = libm::expf(*v - m);
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
        loss += -libm::logf(row[label]);
    }
    Ok(SoftmaxXent {
        loss: loss / n as f32,
        probs,
    })
}

/// d(mean loss)/d(logits) = (probs - onehot) / N.
pub fn softmax_xent_backward(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = want_2d(probs, "softmax_xent_backward")?;
    if labels.len() != n {
        return Err(Error::Shape {
            op: "softmax_xent_backward",
            detail: format!("{} labels for {n} rows", labels.len()),
        });
    }
    let mut g = probs.clone();
    let inv_n = 1.0 / n as f32;
    for (row, &label) in g.data_mut().chunks_exact_mut(k).zip(labels) {
        row[label] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv_n;
        }
    }
    Ok(g)
}

// ---------------------------------------------------------------------------
// Spatial mean (global average pooling)
// ---------------------------------------------------------------------------

/// Per-channel mean over spatial positions: \[N,C,H,W\] -> \[N,C\].
pub fn spatial_mean(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = conv_dims(x, "spatial_mean")?;
    if h * w == 0 {
        return Err(Error::Shape {
            op: "spatial_mean",
            detail: format!("empty spatial extent {h}x{w}"),
        });
    }
    let mut out = Tensor::zeros(&[n, c]);
    let area = (h * w) as f32;
    for (o, plane) in out.data_mut().iter_mut().zip(x.data().chunks_exact(h * w)) {
        let mut acc = 0.0f32;
        for &v in plane {
            acc += v;
        }
        *o = acc / area;
    }
    Ok(out)
}

pub fn spatial_mean_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = match input_shape {
        [n, c, h, w] => (*n, *c, *h, *w),
        s => {
            return Err(Error::Shape {
                op: "spatial_mean_backward",
                detail: format!("expected [N,C,H,W], got {s:?}"),
            })
        }
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::Shape {
            op: "spatial_mean_backward",
            detail: format!("grad_out {:?} vs [{n},{c}]", grad_out.shape()),
        });
    }
    let mut gx = Tensor::zeros(input_shape);
    let inv_area = 1.0 / (h * w) as f32;
    for (plane, &g) in gx.data_mut().chunks_exact_mut(h * w).zip(grad_out.data()) {
        plane.fill(g * inv_area);
    }
    Ok(gx)
}

// ---------------------------------------------------------------------------
// Column concat / split (for conditioning vectors)
// ---------------------------------------------------------------------------

pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ca) = want_2d(a, "concat_cols")?;
    let (nb, cb) = want_2d(b, "concat_cols")?;
    if n != nb {
        return Err(Error::Shape {
            op: "concat_cols",
            detail: format!("{n} vs {nb} rows"),
        });
    }
    let mut out = Tensor::zeros(&[n, ca + cb]);
    for i in 0..n {
        let row = &mut out.data_mut()[i * (ca + cb)..(i + 1) * (ca + cb)];
        row[..ca].copy_from_slice(&a.data()[i * ca..(i + 1) * ca]);
        row[ca..].copy_from_slice(&b.data()[i * cb..(i + 1) * cb]);
    }
    Ok(out)
}

/// Inverse of [`concat_cols`]: split a gradient back into the two parts.
pub fn split_cols(g: &Tensor, ca: usize) -> Result<(Tensor, Tensor)> {
    let (n, c) = want_2d(g, "split_cols")?;
    if ca > c {
        return Err(Error::Shape {
            op: "split_cols",
            detail: format!("split at {ca} of {c}"),
        });
    }
    let cb = c - ca;
    let mut a = Tensor::zeros(&[n, ca]);
    let mut b = Tensor::zeros(&[n, cb]);
    for i in 0..n {
        let row = &g.data()[i * c..(i + 1) * c];
        a.data_mut()[i * ca..(i + 1) * ca].copy_from_slice(&row[..ca]);
        b.data_mut()[i * cb..(i + 1) * cb].copy_from_slice(&row[ca..]);
    }
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn linear_identity() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let out = linear_forward(&x, &w, &b).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_hand_example_and_backward() {
        // [1,1] . [[2],[3]] + [1] = [6]
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let w = Tensor::from_vec(&[2, 1], vec![2.0, 3.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let out = linear_forward(&x, &w, &b).unwrap();
        assert_eq!(out.data(), &[6.0]);

        let g = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let grads = linear_backward(&x, &w, &g).unwrap();
        assert_eq!(grads.w.data(), &[1.0, 1.0]);
        assert_eq!(grads.b.data(), &[1.0]);
        assert_eq!(grads.x.data(), &[2.0, 3.0]);
    }

    #[test]
    fn linear_shape_mismatch_errors() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2]);
        assert!(matches!(
            linear_forward(&x, &w, &b),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn conv_zero_kernel_propagates_bias() {
        let x = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        let b = Tensor::from_vec(&[1], vec![5.0]).unwrap();
        let out = conv2d_forward(&x, &k, &b, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn conv_delta_with_ones_kernel_counts_support() {
        // Delta at the center of a 3x3 input, all-ones kernel, pad 1:
        // every output sees the delta exactly once.
        let mut x = Tensor::zeros(&[1, 1, 3, 3]);
        x.data_mut()[4] = 1.0;
        let k = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let out = conv2d_forward(&x, &k, &b, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0), "{:?}", out.data());
    }

    #[test]
    fn conv_output_dims_follow_stride() {
        let x = Tensor::zeros(&[2, 3, 8, 8]);
        let k = Tensor::zeros(&[4, 3, 3, 3]);
        let b = Tensor::zeros(&[4]);
        assert_eq!(conv2d_forward(&x, &k, &b, 1).unwrap().shape(), &[2, 4, 8, 8]);
        assert_eq!(conv2d_forward(&x, &k, &b, 2).unwrap().shape(), &[2, 4, 4, 4]);
        assert!(conv2d_forward(&x, &k, &b, 3).is_err());
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = activation_forward(&x, Activation::Relu);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);

        let x = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let y = activation_forward(&x, Activation::Sigmoid);
        assert_eq!(y.data(), &[0.5]);

        // sigma'(0) = 0.25
        let g = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let gx = activation_backward(Activation::Sigmoid, &x, &y, &g).unwrap();
        assert!((gx.data()[0] - 0.25).abs() < 1e-7);
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let logits = Tensor::zeros(&[1, 10]);
        let out = softmax_xent(&logits, &[0]).unwrap();
        for &p in out.probs.data() {
            assert!((p - 0.1).abs() < 1e-7);
        }

        let logits = Tensor::from_vec(&[1, 2], vec![libm::logf(2.0), 0.0]).unwrap();
        let out = softmax_xent(&logits, &[0]).unwrap();
        assert!((out.probs.data()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((out.probs.data()[1] - 1.0 / 3.0).abs() < 1e-6);
        assert!((out.loss - 0.405465).abs() < 1e-5);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_labels_checked() {
        let logits = Tensor::from_vec(&[2, 3], vec![5.0, -3.0, 0.5, 100.0, 100.0, -100.0]).unwrap();
        let out = softmax_xent(&logits, &[0, 1]).unwrap();
        for row in out.probs.data().chunks_exact(3) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(matches!(
            softmax_xent(&logits, &[0, 3]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn spatial_mean_values() {
        let x = Tensor::filled(&[1, 2, 4, 4], 3.25);
        let m = spatial_mean(&x).unwrap();
        assert_eq!(m.data(), &[3.25, 3.25]);

        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(spatial_mean(&x).unwrap().data(), &[2.5]);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        let c = concat_cols(&a, &b).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let (a2, b2) = split_cols(&c, 2).unwrap();
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn ops_are_bitwise_deterministic() {
        let x = Tensor::from_vec(&[2, 1, 5, 5], (0..50).map(|i| (i as f32) * 0.3 - 7.0).collect())
            .unwrap();
        let k = Tensor::from_vec(
            &[3, 1, 3, 3],
            (0..27).map(|i| ((i * 7 % 13) as f32) * 0.1 - 0.6).collect(),
        )
        .unwrap();
        let b = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let o1 = conv2d_forward(&x, &k, &b, 2).unwrap();
        let o2 = conv2d_forward(&x, &k, &b, 2).unwrap();
        assert_eq!(o1.data(), o2.data());
        let g1 = conv2d_backward(&x, &k, 2, &o1).unwrap();
        let g2 = conv2d_backward(&x, &k, 2, &o2).unwrap();
        assert_eq!(g1.k.data(), g2.k.data());
        assert_eq!(g1.x.data(), g2.x.data());
    }
}
