//! Sample-quality metrics.

use crate::error::{Error, Result};

/// Sets larger than this are truncated to their first `ENERGY_CAP` points.
/// Inputs are i.i.d. draws, so the prefix is an unbiased subsample.
pub const ENERGY_CAP: usize = 10_000;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Argument(format!("energy distance needs at least 2 points per set, got {} and {}", a.len(), b.len())));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|x| x.len() != d) {
        return Err(Error::Argument("energy distance sets differ in dimension".into()));
    }
    Ok(d)
}

fn cross_mean(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let s: f64 = a.iter().map(|x| b.iter().map(|y| dist(x, y)).sum::<f64>()).sum();
    s / (a.len() * b.len()) as f64
}

/// Sum over unordered pairs `i < j`.
fn within_sum(a: &[Vec<f64>]) -> f64 {
    a.iter().enumerate().map(|(i, x)| a[i + 1..].iter().map(|y| dist(x, y)).sum::<f64>()).sum()
}

/// Unbiased (U-statistic) energy distance `2E|a-b| - E|a-a'| - E|b-b'|`.
/// May be slightly negative for equal distributions.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check(a, b)?;
    let a = &a[..a.len().min(ENERGY_CAP)];
    let b = &b[..b.len().min(ENERGY_CAP)];
    let (n, m) = (a.len() as f64, b.len() as f64);
    Ok(2.0 * cross_mean(a, b) - 2.0 * within_sum(a) / (n * (n - 1.0)) - 2.0 * within_sum(b) / (m * (m - 1.0)))
}

/// V-statistic variant (diagonal pairs included); exactly zero for identical sets.
pub fn energy_distance_v(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check(a, b)?;
    let a = &a[..a.len().min(ENERGY_CAP)];
    let b = &b[..b.len().min(ENERGY_CAP)];
    // Full ordered double sums everywhere, so identical sets cancel exactly.
    Ok(2.0 * cross_mean(a, b) - cross_mean(a, a) - cross_mean(b, b))
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
