//! Central-difference verification of the analytic backward passes.
//!
//! The implementation under test computes forward and backward in f32. A
//! finite-difference quotient of an f32 loss at step h = 1e-3 would drown
//! in rounding noise long before the 1e-4 tolerance, so the numeric side
//! here evaluates an independent f64 reference forward (direct-loop
//! convolution, plain formulas — no im2col, no shared code) and perturbs
//! f64 copies of the parameters. The f32 analytic gradients are then
//! compared against those quotients.
//!
//! Relative error is |a - n| / max(|a| + |n|, 0.01): relative for gradients
//! of visible magnitude, absolute (scaled by 100) near zero where relative
//! error is meaningless.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ops;
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Parameter values for the f64 reference side: name -> (shape, data).
pub type F64Params = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor in the relative-error formula.
    pub denom_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            denom_floor: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// Total number of scalar gradients compared.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Compare analytic f32 gradients against central differences of `loss`.
///
/// `params` are the f32 values the analytic gradients were taken at;
/// `analytic` must hold one gradient tensor per parameter, same shapes.
/// `loss` is evaluated on f64 copies, two calls per scalar.
pub fn gradcheck(
    params: &BTreeMap<String, Tensor>,
    analytic: &BTreeMap<String, Tensor>,
    cfg: &GradCheckConfig,
    loss: impl Fn(&F64Params) -> f64,
) -> Result<GradCheckReport> {
    let mut shadow: F64Params = BTreeMap::new();
    for (name, t) in params {
        let g = analytic.get(name).ok_or_else(|| Error::Shape {
            op: "gradcheck",
            detail: format!("missing analytic gradient for {name}"),
        })?;
        if g.shape() != t.shape() {
            return Err(Error::Shape {
                op: "gradcheck",
                detail: format!("{name}: grad {:?} vs value {:?}", g.shape(), t.shape()),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                op: "gradcheck",
                detail: format!("analytic gradient for {name}"),
            });
        }
        shadow.insert(name.clone(), (t.shape().to_vec(), t.to_f64()));
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let names: Vec<String> = params.keys().cloned().collect();
    for name in &names {
        let n = params[name].len();
        for i in 0..n {
            let orig = shadow[name].1[i];
            shadow.get_mut(name).unwrap().1[i] = orig + cfg.step;
            let up = loss(&shadow);
            shadow.get_mut(name).unwrap().1[i] = orig - cfg.step;
            let down = loss(&shadow);
            shadow.get_mut(name).unwrap().1[i] = orig;

            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[name].data()[i] as f64;
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(cfg.denom_floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// Uniform random tensor in [lo, hi), for building check instances.
pub fn rand_tensor(stream: &mut Stream, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| stream.range_f64(lo as f64, hi as f64) as f32)
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

// ---------------------------------------------------------------------------
// f64 reference forwards (the finite-difference oracle's arithmetic)
// ---------------------------------------------------------------------------

pub mod reference {
    use alloc::vec;
    use alloc::vec::Vec;

    pub fn linear(x: &[f64], w: &[f64], b: &[f64], n: usize, d_in: usize, d_out: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * d_out];
        for i in 0..n {
            for j in 0..d_out {
                let mut acc = b[j];
                for k in 0..d_in {
                    acc += x[i * d_in + k] * w[k * d_out + j];
                }
                out[i * d_out + j] = acc;
            }
        }
        out
    }

    /// Direct-loop 3x3 cross-correlation, pad 1. Deliberately naive.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        x: &[f64],
        k: &[f64],
        b: &[f64],
        n: usize,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        stride: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 - 3) / stride + 1;
        let ow = (w + 2 - 3) / stride + 1;
        let mut out = vec![0.0; n * c_out * oh * ow];
        for s in 0..n {
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..c_in {
                            for kh in 0..3 {
                                for kw in 0..3 {
                                    let iy = (oy * stride + kh) as isize - 1;
                                    let ix = (ox * stride + kw) as isize - 1;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        let xv = x[((s * c_in + ci) * h + iy as usize) * w
                                            + ix as usize];
                                        let kv = k[((co * c_in + ci) * 3 + kh) * 3 + kw];
                                        acc += xv * kv;
                                    }
                                }
                            }
                        }
                        out[((s * c_out + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    pub fn relu(x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
    }

    pub fn sigmoid(x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| sigmoid_scalar(v)).collect()
    }

    pub fn sigmoid_scalar(v: f64) -> f64 {
        if v >= 0.0 {
            1.0 / (1.0 + libm::exp(-v))
        } else {
            let e = libm::exp(v);
            e / (1.0 + e)
        }
    }

    /// Mean negative log-likelihood under a row-wise softmax.
    pub fn softmax_xent(logits: &[f64], labels: &[usize], n: usize, k: usize) -> f64 {
        let mut loss = 0.0;
        for (row, &label) in logits.chunks_exact(k).zip(labels) {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|&v| libm::exp(v - m)).sum();
            loss += -(row[label] - m - libm::log(z));
        }
        loss / n as f64
    }

    pub fn spatial_mean(x: &[f64], area: usize) -> Vec<f64> {
        x.chunks_exact(area)
            .map(|p| p.iter().sum::<f64>() / area as f64)
            .collect()
    }

    /// Sum of elementwise Bernoulli NLL given pre-sigmoid logits.
    pub fn bce_with_logits_sum(logits: &[f64], targets: &[f64]) -> f64 {
        logits
            .iter()
            .zip(targets)
            .map(|(&l, &t)| l.max(0.0) - l * t + libm::log(1.0 + libm::exp(-l.abs())))
            .sum()
    }

    /// KL(N(mu, diag(exp(logvar))) || N(0, I)).
    pub fn kl_diag_gauss(mu: &[f64], logvar: &[f64]) -> f64 {
        mu.iter()
            .zip(logvar)
            .map(|(&m, &lv)| 0.5 * (m * m + libm::exp(lv) - 1.0 - lv))
            .sum()
    }
}

// ---------------------------------------------------------------------------
// Per-layer check instances
// ---------------------------------------------------------------------------

fn map2(entries: Vec<(&str, Tensor)>) -> BTreeMap<String, Tensor> {
    entries.into_iter().map(|(n, t)| (n.into(), t)).collect()
}

/// Gradcheck a linear layer under a fixed random linear functional
/// (loss = sum of r * out, so the upstream gradient is r itself).
pub fn check_linear(seed: u64) -> Result<GradCheckReport> {
    let mut s = Stream::new(seed).split("gradcheck/linear");
    let (n, d_in, d_out) = (3, 4, 3);
    let x = rand_tensor(&mut s, &[n, d_in], -1.0, 1.0);
    let w = rand_tensor(&mut s, &[d_in, d_out], -1.0, 1.0);
    let b = rand_tensor(&mut s, &[d_out], -0.5, 0.5);
    let r = rand_tensor(&mut s, &[n, d_out], -1.0, 1.0);
    let grads = ops::linear_backward(&x, &w, &r)?;

    let params = map2(alloc::vec![("x", x), ("w", w), ("b", b)]);
    let analytic = map2(alloc::vec![("x", grads.x), ("w", grads.w), ("b", grads.b)]);
    let rf = r.to_f64();
    gradcheck(&params, &analytic, &GradCheckConfig::default(), move |p| {
        let out = reference::linear(&p["x"].1, &p["w"].1, &p["b"].1, n, d_in, d_out);
        out.iter().zip(&rf).map(|(&o, &w)| o * w).sum()
    })
}

/// Gradcheck a 3x3 convolution at the given stride.
pub fn check_conv2d(stride: usize, seed: u64) -> Result<GradCheckReport> {
    let mut s = Stream::new(seed).split("gradcheck/conv");
    let (n, c_in, h, w, c_out) = (2, 2, 5, 5, 3);
    let x = rand_tensor(&mut s, &[n, c_in, h, w], -1.0, 1.0);
    let k = rand_tensor(&mut s, &[c_out, c_in, 3, 3], -1.0, 1.0);
    let b = rand_tensor(&mut s, &[c_out], -0.5, 0.5);
    let out = ops::conv2d_forward(&x, &k, &b, stride)?;
    let r = rand_tensor(&mut s, out.shape(), -1.0, 1.0);
    let grads = ops::conv2d_backward(&x, &k, stride, &r)?;

    let params = map2(alloc::vec![("x", x), ("k", k), ("b", b)]);
    let analytic = map2(alloc::vec![("x", grads.x), ("k", grads.k), ("b", grads.b)]);
    let rf = r.to_f64();
    gradcheck(&params, &analytic, &GradCheckConfig::default(), move |p| {
        let out = reference::conv2d(&p["x"].1, &p["k"].1, &p["b"].1, n, c_in, h, w, c_out, stride);
        out.iter().zip(&rf).map(|(&o, &w)| o * w).sum()
    })
}

/// Gradcheck relu or sigmoid. Relu inputs are sampled away from the kink.
pub fn check_activation(kind: ops::Activation, seed: u64) -> Result<GradCheckReport> {
    let mut s = Stream::new(seed).split("gradcheck/activation");
    let n = 24;
    let data: Vec<f32> = match kind {
        ops::Activation::Relu => (0..n)
            .map(|_| {
                let mag = s.range_f64(0.1, 1.5) as f32;
                if s.bernoulli(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect(),
        ops::Activation::Sigmoid => (0..n).map(|_| s.range_f64(-2.5, 2.5) as f32).collect(),
    };
    let x = Tensor::from_vec(&[n], data).unwrap();
    let y = ops::activation_forward(&x, kind);
    let r = rand_tensor(&mut s, &[n], -1.0, 1.0);
    let gx = ops::activation_backward(kind, &x, &y, &r)?;

    let params = map2(alloc::vec![("x", x)]);
    let analytic = map2(alloc::vec![("x", gx)]);
    let rf = r.to_f64();
    gradcheck(&params, &analytic, &GradCheckConfig::default(), move |p| {
        let out = match kind {
            ops::Activation::Relu => reference::relu(&p["x"].1),
            ops::Activation::Sigmoid => reference::sigmoid(&p["x"].1),
        };
        out.iter().zip(&rf).map(|(&o, &w)| o * w).sum()
    })
}

/// Gradcheck the softmax cross-entropy loss w.r.t. its logits.
pub fn check_softmax_xent(seed: u64) -> Result<GradCheckReport> {
    let mut s = Stream::new(seed).split("gradcheck/softmax");
    let (n, k) = (4, 6);
    let logits = rand_tensor(&mut s, &[n, k], -2.0, 2.0);
    let labels: Vec<usize> = (0..n).map(|_| s.below(k as u64) as usize).collect();
    let fwd = ops::softmax_xent(&logits, &labels)?;
    let g = ops::softmax_xent_backward(&fwd.probs, &labels)?;

    let params = map2(alloc::vec![("logits", logits)]);
    let analytic = map2(alloc::vec![("logits", g)]);
    gradcheck(&params, &analytic, &GradCheckConfig::default(), move |p| {
        reference::softmax_xent(&p["logits"].1, &labels, n, k)
    })
}

/// Gradcheck global average pooling under a random linear functional.
pub fn check_spatial_mean(seed: u64) -> Result<GradCheckReport> {
    let mut s = Stream::new(seed).split("gradcheck/gap");
    let shape = [2usize, 3, 4, 5];
    let x = rand_tensor(&mut s, &shape, -1.0, 1.0);
    let r = rand_tensor(&mut s, &[2, 3], -1.0, 1.0);
    let gx = ops::spatial_mean_backward(&shape, &r)?;

    let params = map2(alloc::vec![("x", x)]);
    let analytic = map2(alloc::vec![("x", gx)]);
    let rf = r.to_f64();
    gradcheck(&params, &analytic, &GradCheckConfig::default(), move |p| {
        let out = reference::spatial_mean(&p["x"].1, 4 * 5);
        out.iter().zip(&rf).map(|(&o, &w)| o * w).sum()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_checks_pass_within_tolerance() {
        for seed in 0..5u64 {
            assert!(check_linear(seed).unwrap().passes(1e-4));
            assert!(check_conv2d(1, seed).unwrap().passes(1e-4));
            assert!(check_conv2d(2, seed).unwrap().passes(1e-4));
            assert!(check_activation(ops::Activation::Relu, seed).unwrap().passes(1e-4));
            assert!(check_activation(ops::Activation::Sigmoid, seed)
                .unwrap()
                .passes(1e-4));
            assert!(check_softmax_xent(seed).unwrap().passes(1e-4));
            assert!(check_spatial_mean(seed).unwrap().passes(1e-4));
        }
    }

    #[test]
    fn broken_gradient_is_flagged() {
        // Corrupt one analytic entry and expect the checker to notice.
        let mut s = Stream::new(9).split("gradcheck/broken");
        let x = rand_tensor(&mut s, &[2, 2], -1.0, 1.0);
        let w = rand_tensor(&mut s, &[2, 2], -1.0, 1.0);
        let b = rand_tensor(&mut s, &[2], -0.5, 0.5);
        let r = rand_tensor(&mut s, &[2, 2], 0.5, 1.0);
        let mut grads = ops::linear_backward(&x, &w, &r).unwrap();
        grads.w.data_mut()[0] += 0.5;

        let params = map2(alloc::vec![("x", x), ("w", w), ("b", b)]);
        let analytic = map2(alloc::vec![("x", grads.x), ("w", grads.w), ("b", grads.b)]);
        let rf = r.to_f64();
        let report = gradcheck(&params, &analytic, &GradCheckConfig::default(), move |p| {
            let out = reference::linear(&p["x"].1, &p["w"].1, &p["b"].1, 2, 2, 2);
            out.iter().zip(&rf).map(|(&o, &w)| o * w).sum()
        })
        .unwrap();
        assert!(!report.passes(1e-4));
        assert_eq!(report.worst_param, "w");
    }

    #[test]
    fn non_finite_analytic_gradient_is_an_error() {
        let x = Tensor::from_vec(&[1], alloc::vec![1.0]).unwrap();
        let mut g = Tensor::from_vec(&[1], alloc::vec![f32::NAN]).unwrap();
        g.data_mut()[0] = f32::NAN;
        let params = map2(alloc::vec![("x", x)]);
        let analytic = map2(alloc::vec![("x", g)]);
        let out = gradcheck(&params, &analytic, &GradCheckConfig::default(), |p| {
            p["x"].1[0]
        });
        assert!(matches!(out, Err(Error::NonFinite { .. })));
    }
}
