//! Dense vector helpers over `f64` slices.

use crate::error::{Error, Result};

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Largest absolute componentwise difference.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// `a * x + b * y`, componentwise.
pub fn lincomb(a: f64, x: &[f64], b: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(xi, yi)| a * xi + b * yi).collect()
}

/// Cosine similarity, clamped to `[-1, 1]`; 1 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        // rescale before giving up on huge inputs
        let (sa, sb) = (max_abs(a), max_abs(b));
        if sa == 0.0 || sb == 0.0 || !sa.is_finite() || !sb.is_finite() {
            return 1.0;
        }
        let a: Vec<f64> = a.iter().map(|v| v / sa).collect();
        let b: Vec<f64> = b.iter().map(|v| v / sb).collect();
        return cosine(&a, &b);
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}
