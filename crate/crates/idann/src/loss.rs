//! Softmax, cross-entropy losses, and label smoothing.

use crate::error::{Error, Result};

const PROB_FLOOR: f64 = 1e-12;

/// Numerically stabilized softmax (max-subtraction). Requires at least
/// two finite entries; the output sums to 1 within 1e-9.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.len() < 2 {
        return Err(Error::Config(format!(
            "softmax needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input contains a non-finite logit".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `-sum(target_i * ln(probs_i))` with probabilities clamped to
/// `>= 1e-12` before the log. Accepts soft targets.
pub fn cross_entropy(probs: &[f64], target: &[f64]) -> Result<f64> {
    if probs.len() != target.len() {
        return Err(Error::Config(format!(
            "cross_entropy length mismatch: {} probs vs {} targets",
            probs.len(),
            target.len()
        )));
    }
    Ok(-probs
        .iter()
        .zip(target)
        .map(|(p, t)| t * p.max(PROB_FLOOR).ln())
        .sum::<f64>())
}

/// Gradient of `cross_entropy` with respect to `probs`; pairs with the
/// softmax Jacobian backward to give the usual `p - t` at the logits.
pub fn cross_entropy_grad(probs: &[f64], target: &[f64]) -> Vec<f64> {
    probs
        .iter()
        .zip(target)
        .map(|(p, t)| -t / p.max(PROB_FLOOR))
        .collect()
}

/// Binary cross-entropy for the domain classifier. `d` is 0 for source,
/// 1 for target.
pub fn binary_cross_entropy(p: f64, d: u8) -> f64 {
    let p1 = p.max(PROB_FLOOR);
    let p0 = (1.0 - p).max(PROB_FLOOR);
    -(f64::from(d) * p1.ln() + (1.0 - f64::from(d)) * p0.ln())
}

/// d/dp of `binary_cross_entropy`.
pub fn binary_cross_entropy_grad(p: f64, d: u8) -> f64 {
    let p1 = p.max(PROB_FLOOR);
    let p0 = (1.0 - p).max(PROB_FLOOR);
    -f64::from(d) / p1 + (1.0 - f64::from(d)) / p0
}

/// Label-smoothed target: `(1 - eps) * onehot + eps / num_labels`.
pub fn smooth_labels(label: usize, num_labels: usize, eps: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Precondition(format!(
            "smoothing constant must be in [0, 1), got {eps}"
        )));
    }
    if label >= num_labels {
        return Err(Error::Precondition(format!(
            "label {label} out of range for {num_labels} classes"
        )));
    }
    let base = eps / num_labels as f64;
    let mut out = vec![base; num_labels];
    out[label] += 1.0 - eps;
    Ok(out)
}

/// One-hot target vector.
pub fn one_hot(label: usize, num_labels: usize) -> Vec<f64> {
    let mut out = vec![0.0; num_labels];
    out[label] = 1.0;
    out
}
