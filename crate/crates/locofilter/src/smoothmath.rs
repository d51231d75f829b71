//! Smooth replacements for `max` and `abs` with first and second derivatives.
//!
//! Two smooth-maximum operators are provided: log-sum-exp (LSE), which
//! over-approximates the true maximum by at most `ln(n)/alpha`, and the
//! Boltzmann operator, whose output stays inside `[min, max]` of its inputs
//! but whose level sets are not convexity-preserving. Two smooth absolute
//! values are provided: `x * tanh(alpha * x)`, which under-approximates `|x|`
//! by less than `1/alpha`, and `sqrt(x^2 + eps^2)`, which over-approximates.
//!
//! All functions are pure and evaluate in max-shifted form, so no
//! intermediate overflows occur for inputs up to `|x| <= 1e6` at
//! `alpha <= 1e3`.

use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Smooth-maximum operator choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaxVariant {
    Lse,
    Boltzmann,
}

/// Smooth-absolute-value choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbsVariant {
    XTanh,
    Sqrt,
}

/// Sharpness parameters shared by the smooth collision margins.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct SmoothingParams {
    /// Smooth-maximum sharpness (unitless exponent scale, 1/m at margin scale).
    pub alpha_max: f64,
    /// Smooth-absolute-value sharpness (1/m).
    pub alpha_abs: f64,
    /// Regularizer of the sqrt absolute-value variant (m).
    pub eps_sqrt: f64,
    /// Margin value above which exact non-smooth evaluation may be used (m).
    /// Must exceed the smoothing error band so switching never masks it.
    pub switch_threshold: f64,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        Self {
            alpha_max: 100.0,
            alpha_abs: 100.0,
            eps_sqrt: 0.01,
            switch_threshold: 0.5,
        }
    }
}

impl SmoothingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_max > 0.0 && self.alpha_abs > 0.0 && self.eps_sqrt > 0.0) {
            return Err(Error::InvalidParam(
                "smoothing sharpness parameters must be strictly positive".into(),
            ));
        }
        let min_threshold = (6.0 + 15.0f64.ln()) / self.alpha_max;
        if !(self.switch_threshold > min_threshold) {
            return Err(Error::InvalidParam(format!(
                "switch_threshold {} must exceed the smoothing error band {}",
                self.switch_threshold, min_threshold
            )));
        }
        Ok(())
    }

    /// Disable exact-SAT switching (used by benchmarks and band checks).
    pub fn without_switching(mut self) -> Self {
        self.switch_threshold = f64::INFINITY;
        self
    }

    /// Upper bound on `h_smooth - h_exact` for the 15-axis cuboid margin:
    /// `ln(15)/alpha_max` from the smooth maximum plus `6/alpha_abs` from the
    /// six under-approximated extent projections per axis.
    pub fn upper_band(&self) -> f64 {
        15.0f64.ln() / self.alpha_max + 6.0 / self.alpha_abs
    }

    /// Lower bound magnitude on `h_exact - h_smooth` (center-offset term).
    pub fn lower_band(&self) -> f64 {
        1.0 / self.alpha_abs
    }
}

/// exp for x in [-50, 0]: Cody-Waite reduction and a degree-11 polynomial
/// on [-ln2/2, ln2/2]. Relative error stays below 2e-14 (orders of
/// magnitude inside every tolerance downstream), the result never exceeds
/// 1 for non-positive input, and exp(0) is exactly 1, which is what the
/// max-shifted sums rely on. Unlike the libm call this inlines, and it is
/// branch-free with no table, division or 64-bit arithmetic shift, so the
/// loop vectorizer handles it; that is what makes the batched smoothing
/// kernels cheap.
#[inline]
fn exp_neg(x: f64) -> f64 {
    debug_assert!((-50.0..=0.0).contains(&x));
    const INVLN2: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // Round to nearest integer via the 2^52 shifter (cheaper than a rounding
    // instruction plus a separate convert), with the exponent bias baked in
    // so the 2^n scale is one left shift of the mantissa bits.
    const SHIFTER: f64 = 6_755_399_441_055_744.0 + 1023.0; // 1.5 * 2^52 + 1023
    let t = x * INVLN2 + SHIFTER;
    let nf = t - SHIFTER;
    let r = (x - nf * LN2_HI) - nf * LN2_LO;
    // Degree 9 leaves a truncation error of r^10/10! <= 7e-12 relative at
    // |r| <= ln2/2, orders below every smoothing tolerance downstream; the
    // structural facts the bound proofs lean on (exact 1 at 0, monotone on
    // the reduced interval) survive truncation at any degree.
    const C: [f64; 10] = [
        1.0,
        1.0,
        0.5,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362880.0,
    ];
    let r2 = r * r;
    let r4 = r2 * r2;
    let r8 = r4 * r4;
    let p = (C[0] + C[1] * r)
        + r2 * (C[2] + C[3] * r)
        + r4 * ((C[4] + C[5] * r) + r2 * (C[6] + C[7] * r))
        + r8 * (C[8] + C[9] * r);
    let scale = f64::from_bits(t.to_bits() << 52);
    p * scale
}

/// `x * tanh(alpha * x)` and its first two derivatives.
#[inline]
pub fn xtanh(x: f64, alpha: f64) -> (f64, f64, f64) {
    let ax = alpha * x;
    let m = ax.abs();
    // tanh through a single exp; libm's tanh is several times slower on
    // mixed-magnitude inputs and this identity is exact to round-off. The
    // clamp keeps the reduction in range; past it e underflows against 1 and
    // the saturated tail (|x|, sign(x), 0) falls out of the same arithmetic,
    // so there is no data-dependent branch for the predictor to miss.
    let e = exp_neg((-2.0 * m).max(-50.0));
    let inv = 1.0 / (1.0 + e);
    let t = ((1.0 - e) * inv).copysign(ax);
    let s = 4.0 * e * inv * inv; // sech^2
    let value = x * t;
    let d1 = t + ax * s;
    let d2 = 2.0 * alpha * s * (1.0 - ax * t);
    (value, d1, d2)
}

/// `sqrt(x^2 + eps^2)` and its first two derivatives.
#[inline]
pub fn sqrt_abs(x: f64, eps: f64) -> (f64, f64, f64) {
    let r = (x * x + eps * eps).sqrt();
    (r, x / r, eps * eps / (r * r * r))
}

/// Batched [`xtanh`]: one homogeneous loop over a slice, element-wise
/// identical to the scalar call. The loop body is branch-free, so this
/// vectorizes; the batched form is what the axis preselection feeds, where
/// kernel throughput dominates the smooth margin cost.
pub fn xtanh_batch(xs: &[f64], alpha: f64, v: &mut [f64], d1: &mut [f64], d2: &mut [f64]) {
    let n = xs.len();
    assert!(v.len() >= n && d1.len() >= n && d2.len() >= n);
    for i in 0..n {
        let (a, b, c) = xtanh(xs[i], alpha);
        v[i] = a;
        d1[i] = b;
        d2[i] = c;
    }
}

/// Batched [`sqrt_abs`]; see [`xtanh_batch`].
pub fn sqrt_abs_batch(xs: &[f64], eps: f64, v: &mut [f64], d1: &mut [f64], d2: &mut [f64]) {
    let n = xs.len();
    assert!(v.len() >= n && d1.len() >= n && d2.len() >= n);
    for i in 0..n {
        let (a, b, c) = sqrt_abs(xs[i], eps);
        v[i] = a;
        d1[i] = b;
        d2[i] = c;
    }
}

/// Smooth absolute value: value and first two derivatives.
///
/// `param` is `alpha` for the xtanh variant and `eps` for the sqrt variant.
pub fn smooth_abs(x: f64, variant: AbsVariant, param: f64) -> Result<(f64, f64, f64)> {
    if !x.is_finite() {
        return Err(Error::NonFinite("smooth_abs input"));
    }
    if !(param > 0.0) {
        return Err(Error::InvalidParam("smooth_abs param must be > 0".into()));
    }
    Ok(match variant {
        AbsVariant::XTanh => xtanh(x, param),
        AbsVariant::Sqrt => sqrt_abs(x, param),
    })
}

/// Exponent below which `exp` falls under f64 round-off against the leading
/// term (which is always 1 after the max shift) and is skipped.
const EXP_CUTOFF: f64 = -46.0;

/// Max-shifted log-sum-exp, value only.
#[inline]
pub fn lse(values: &[f64], alpha: f64) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &x in values {
        let e = alpha * (x - m);
        if e > EXP_CUTOFF {
            sum += exp_neg(e);
        }
    }
    m + sum.ln() / alpha
}

/// Max-shifted log-sum-exp; fills `w` with the softmax weights (the LSE
/// gradient) and returns the value. `w.len()` must equal `values.len()`.
#[inline]
pub fn lse_weights(values: &[f64], alpha: f64, w: &mut [f64]) -> f64 {
    debug_assert_eq!(values.len(), w.len());
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (wi, &x) in w.iter_mut().zip(values) {
        let a = alpha * (x - m);
        let e = if a > EXP_CUTOFF { exp_neg(a) } else { 0.0 };
        *wi = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for wi in w.iter_mut() {
        *wi *= inv;
    }
    m + sum.ln() / alpha
}

/// Boltzmann operator (exp-weighted average), value only.
#[inline]
pub fn boltzmann(values: &[f64], alpha: f64) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut num = 0.0;
    let mut den = 0.0;
    for &x in values {
        let a = alpha * (x - m);
        if a > EXP_CUTOFF {
            let e = exp_neg(a);
            num += x * e;
            den += e;
        }
    }
    num / den
}

/// Result of [`smooth_max`]: value, gradient and Hessian with respect to the
/// input vector.
#[derive(Clone, Debug)]
pub struct SmoothMax {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// Smooth maximum of `values` with full input derivatives.
///
/// LSE satisfies `0 <= value - max <= ln(n)/alpha` and its gradient is a
/// probability simplex. Boltzmann satisfies `min <= value <= max`.
pub fn smooth_max(values: &[f64], variant: MaxVariant, alpha: f64) -> Result<SmoothMax> {
    let n = values.len();
    if n == 0 {
        return Err(Error::Empty("smooth_max requires at least one value"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("smooth_max input"));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidParam("smooth_max alpha must be > 0".into()));
    }

    let mut w = vec![0.0; n];
    match variant {
        MaxVariant::Lse => {
            let value = lse_weights(values, alpha, &mut w);
            let grad = DVector::from_column_slice(&w);
            // H = alpha * (diag(w) - w w^T)
            let mut hess = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let d = if i == j { w[i] } else { 0.0 };
                    hess[(i, j)] = alpha * (d - w[i] * w[j]);
                }
            }
            Ok(SmoothMax { value, grad, hess })
        }
        MaxVariant::Boltzmann => {
            lse_weights(values, alpha, &mut w);
            let value: f64 = values.iter().zip(&w).map(|(x, wi)| x * wi).sum();
            // c_j = 1 + alpha (x_j - B); grad_j = w_j c_j
            let c: Vec<f64> = values.iter().map(|&x| 1.0 + alpha * (x - value)).collect();
            let grad = DVector::from_iterator(n, w.iter().zip(&c).map(|(wi, ci)| wi * ci));
            // H_jk = alpha w_j [delta_jk (c_j + 1) - w_k (c_j + c_k)]
            let mut hess = DMatrix::zeros(n, n);
            for j in 0..n {
                for k in 0..n {
                    let d = if j == k { c[j] + 1.0 } else { 0.0 };
                    hess[(j, k)] = alpha * w[j] * (d - w[k] * (c[j] + c[k]));
                }
            }
            Ok(SmoothMax { value, grad, hess })
        }
    }
}
