//! Accuracy and interval-quality metrics on noiseless test sets.
//!
//! Both scores are normalized by `s`, the population standard deviation of
//! the test truths.

use serde::{Deserialize, Serialize};

use crate::error::{contract, numerical, Result};

/// Nominal miscoverage of the 95% intervals.
pub const ALPHA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub nrmse: f64,
    pub nnois: f64,
    /// Fraction of truths inside their interval.
    pub coverage: f64,
    /// Unnormalized root mean squared error.
    pub rmse: f64,
    pub n_test: usize,
}

fn truth_scale(truth: &[f64]) -> Result<f64> {
    if truth.is_empty() {
        return Err(contract("metrics need at least one test point"));
    }
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let s = (truth.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(s > 0.0) {
        return Err(numerical("test truths have zero spread; normalization is undefined"));
    }
    Ok(s)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(contract(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

pub fn rmse(predictions: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(predictions.len(), truth.len())?;
    if truth.is_empty() {
        return Err(contract("metrics need at least one test point"));
    }
    let mse = predictions.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / truth.len() as f64;
    Ok(mse.sqrt())
}

/// `sqrt(mean((pred - truth)^2)) / s`.
pub fn nrmse(predictions: &[f64], truth: &[f64]) -> Result<f64> {
    let r = rmse(predictions, truth)?;
    Ok(r / truth_scale(truth)?)
}

/// Normalized negatively oriented interval score:
///
/// ```text
/// 1/(s N) sum_i [ (u_i - l_i) + 2/alpha (l_i - f_i) 1{f_i < l_i} + 2/alpha (f_i - u_i) 1{f_i > u_i} ]
/// ```
pub fn nnois(lower: &[f64], upper: &[f64], truth: &[f64], alpha: f64) -> Result<f64> {
    check_lengths(lower.len(), truth.len())?;
    check_lengths(upper.len(), truth.len())?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(contract(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let s = truth_scale(truth)?;
    let penalty = 2.0 / alpha;
    let mut total = 0.0;
    for (i, ((l, u), f)) in lower.iter().zip(upper).zip(truth).enumerate() {
        if l > u {
            return Err(contract(format!("interval {i} has lower {l} above upper {u}")));
        }
        total += u - l;
        if f < l {
            total += penalty * (l - f);
        } else if f > u {
            total += penalty * (f - u);
        }
    }
    Ok(total / (s * truth.len() as f64))
}

pub fn coverage(lower: &[f64], upper: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(lower.len(), truth.len())?;
    check_lengths(upper.len(), truth.len())?;
    if truth.is_empty() {
        return Err(contract("metrics need at least one test point"));
    }
    let inside = lower
        .iter()
        .zip(upper)
        .zip(truth)
        .filter(|((l, u), f)| *l <= *f && *f <= *u)
        .count();
    Ok(inside as f64 / truth.len() as f64)
}

pub fn evaluate(mean: &[f64], lower: &[f64], upper: &[f64], truth: &[f64]) -> Result<MetricsReport> {
    Ok(MetricsReport {
        nrmse: nrmse(mean, truth)?,
        nnois: nnois(lower, upper, truth, ALPHA)?,
        coverage: coverage(lower, upper, truth)?,
        rmse: rmse(mean, truth)?,
        n_test: truth.len(),
    })
}
