//! Row-level kernels shared by the tape and the non-differentiable paths.

use crate::error::{Error, Result};

/// Softmax over the allowed positions of `scores`; blocked positions get exactly 0.
///
/// The mask is boolean rather than an additive `-inf`, so no NaN can leak out of
/// blocked entries.
pub fn softmax_masked(scores: &[f64], allowed: &[bool]) -> Result<Vec<f64>> {
    if scores.len() != allowed.len() {
        return Err(Error::Shape(format!(
            "{} scores against a mask of {}",
            scores.len(),
            allowed.len()
        )));
    }
    let max = scores
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyAttentionRow);
    }
    let mut out: Vec<f64> = scores
        .iter()
        .zip(allowed)
        .map(|(&s, &a)| if a { (s - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out)
}

/// In-place softmax over a dense slice (every position allowed).
pub(crate) fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalized row and `1/sqrt(var + eps)`, population variance.
pub(crate) fn normalize(x: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("layer_norm of an empty vector".into()));
    }
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::Shape("layer_norm gain/bias length".into()));
    }
    if eps < 0.0 {
        return Err(Error::InvalidArgument("layer_norm eps must be non-negative".into()));
    }
    let (xhat, _) = normalize(x, eps);
    Ok(xhat
        .iter()
        .zip(gain)
        .zip(bias)
        .map(|((h, g), b)| g * h + b)
        .collect())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
