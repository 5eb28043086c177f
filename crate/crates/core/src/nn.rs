//! Standard neural primitives as pure functions.
//!
//! These are the single source of truth for forward arithmetic; the
//! autodiff graph ops in [`crate::graph`] call into them and add only the
//! backward rules.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Affine map over the last axis: `x[..,D_in] · w[D_in,D_out] (+ b)`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut y = x.matmul(w)?;
    if let Some(b) = b {
        if b.numel() != y.row_len() {
            return Err(Error::shape(
                "linear",
                format!("bias {} vs out dim {}", b.numel(), y.row_len()),
            ));
        }
        let w_out = y.row_len();
        let data = y.data_mut();
        for row in data.chunks_mut(w_out) {
            for (v, &bi) in row.iter_mut().zip(b.data()) {
                *v += bi;
            }
        }
    }
    Ok(y)
}

/// Row-wise softmax over the last axis, stabilized by max-subtraction.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let w = x.last_axis();
    if w == 0 {
        return Err(Error::invalid("softmax", "empty last axis"));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(w) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

/// Per-row layer normalization followed by the elementwise affine
/// `gain ⊙ x̂ + bias`. Variance is the population variance (divide by D).
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.row_len();
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::shape(
            "layer_norm",
            format!("gain/bias {}/{} vs D {}", gain.numel(), bias.numel(), d),
        ));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (v, (&g, &b)) in row.iter_mut().zip(gain.data().iter().zip(bias.data())) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// Depthwise causal 1-D convolution with left zero-padding.
///
/// `kernel[w, d]` looks `w` steps into the past:
/// `y[t,d] = Σ_w kernel[w,d] · x[t-w,d]` with `x[t<0] = 0`, so position `t`
/// depends only on inputs at or before `t`. Kernels longer than the
/// sequence are permitted; out-of-range taps contribute nothing.
pub fn conv1d_causal(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || kernel.shape().len() != 2 {
        return Err(Error::shape("conv1d_causal", "expected 2-D x and kernel"));
    }
    let (t_len, d) = (x.shape()[0], x.shape()[1]);
    let (width, dk) = (kernel.shape()[0], kernel.shape()[1]);
    if dk != d {
        return Err(Error::shape(
            "conv1d_causal",
            format!("channels {} vs {}", dk, d),
        ));
    }
    if width == 0 {
        return Err(Error::invalid("conv1d_causal", "zero-width kernel"));
    }
    let mut out = Tensor::zeros(&[t_len, d]);
    for t in 0..t_len {
        let orow = &mut out.data_mut()[t * d..(t + 1) * d];
        for w in 0..width.min(t + 1) {
            let xrow = x.row(t - w);
            let krow = kernel.row(w);
            for ((o, &xv), &kv) in orow.iter_mut().zip(xrow).zip(krow) {
                *o += kv * xv;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `ln(1 + e^x)`, computed without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn linear_identity_and_arithmetic() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(linear(&x, &eye, None).unwrap().data(), &[1.0, 2.0]);

        let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let w = Tensor::new(vec![2, 1], vec![2.0, 3.0]).unwrap();
        let b = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[6.0]);
    }

    #[test]
    fn linear_rejects_shape_mismatch() {
        let x = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(linear(&x, &w, None).is_err());
    }

    #[test]
    fn softmax_symmetry_closed_form_and_stability() {
        let y = softmax(&Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap()).unwrap();
        for &v in y.data() {
            assert!(close(v, 1.0 / 3.0, 1e-12));
        }

        let y = softmax(&Tensor::new(vec![2], vec![2f64.ln(), 0.0]).unwrap()).unwrap();
        assert!(close(y.data()[0], 2.0 / 3.0, 1e-12));
        assert!(close(y.data()[1], 1.0 / 3.0, 1e-12));

        let y = softmax(&Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap()).unwrap();
        assert!(y.all_finite());
        assert!(y.data()[0] > 1.0 - 1e-12 && y.data()[1] < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -2.0, 5.0, 1.0, 1.0, -40.0]).unwrap();
        let y = softmax(&x).unwrap();
        for i in 0..2 {
            let s: f64 = y.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(y.row(i).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn layer_norm_limits() {
        let gain = Tensor::full(&[3], 1.0);
        let bias = Tensor::zeros(&[3]);
        // Constant row: eps keeps the zero-variance limit finite and zero.
        let x = Tensor::new(vec![1, 3], vec![5.0, 5.0, 5.0]).unwrap();
        let y = layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        // Already-normalized row passes through as eps → 0.
        let gain = Tensor::full(&[2], 1.0);
        let bias = Tensor::zeros(&[2]);
        let x = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &gain, &bias, 1e-12).unwrap();
        assert!(close(y.data()[0], 1.0, 1e-6));
        assert!(close(y.data()[1], -1.0, 1e-6));
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let x = Tensor::new(vec![2, 4], vec![0.3, -1.7, 2.2, 0.9, -0.4, 0.0, 1.3, -2.6]).unwrap();
        let gain = Tensor::new(vec![4], vec![1.5, 0.5, -1.0, 2.0]).unwrap();
        let bias = Tensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        let eps = 1e-6;
        let y = layer_norm(&x, &gain, &bias, eps).unwrap();
        for i in 0..2 {
            // Independent two-pass statistics.
            let row = x.row(i);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            for j in 0..4 {
                let want = (row[j] - mean) / (var + eps).sqrt() * gain.data()[j] + bias.data()[j];
                assert!(close(y.at2(i, j), want, 1e-12));
            }
            // Pre-affine statistics: mean 0 / var 1 within 1e-6.
            let normed: Vec<f64> = (0..4)
                .map(|j| (y.at2(i, j) - bias.data()[j]) / gain.data()[j])
                .collect();
            let m: f64 = normed.iter().sum::<f64>() / 4.0;
            let v: f64 = normed.iter().map(|z| (z - m).powi(2)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn conv_identity_shift_and_oracle() {
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k1 = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        assert_eq!(conv1d_causal(&x, &k1).unwrap().data(), x.data());

        // kernel [0, 1]: one-step delay with a leading zero.
        let k2 = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(
            conv1d_causal(&x, &k2).unwrap().data(),
            &[0.0, 1.0, 2.0, 3.0]
        );

        // Direct O(T·W) summation oracle on a 2-channel case.
        let x = Tensor::new(vec![5, 2], vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1, 0.0, -2.0, 1.5, 0.25])
            .unwrap();
        let k = Tensor::new(vec![3, 2], vec![1.0, -0.5, 0.25, 2.0, -1.5, 0.75]).unwrap();
        let y = conv1d_causal(&x, &k).unwrap();
        for t in 0..5 {
            for d in 0..2 {
                let mut want = 0.0;
                for w in 0..3 {
                    if t >= w {
                        want += k.at2(w, d) * x.at2(t - w, d);
                    }
                }
                assert!(close(y.at2(t, d), want, 1e-12));
            }
        }
    }

    #[test]
    fn conv_kernel_longer_than_sequence() {
        let x = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let k = Tensor::new(vec![4, 1], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let y = conv1d_causal(&x, &k).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0]);
    }

    #[test]
    fn activation_sanity() {
        assert!(close(softplus(0.0), 2f64.ln(), 1e-12));
        assert!(close(softplus(100.0), 100.0, 1e-12));
        assert!(softplus(-100.0) > 0.0);
        assert!(close(silu(0.0), 0.0, 1e-12));
        assert!(close(sigmoid(0.0), 0.5, 1e-12));
        assert!(close(gelu(0.0), 0.0, 1e-12));
        // Central-difference spot check for the activation derivatives.
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
            let h = 1e-6;
            let num = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!(close(silu_grad(x), num, 1e-6));
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(close(gelu_grad(x), num, 1e-6));
        }
    }
}
