// SPDX-License-Identifier: MIT OR Apache-2.0

//! Order-independent summary statistics.
//!
//! Every aggregate that ends up in a report goes through these helpers. Means
//! sort their inputs before accumulating in `f64`, so a result never depends on
//! the order (or thread interleaving) in which the per-item values arrived.

// ---------------------------------------------------------------------------
// Means and spreads
// ---------------------------------------------------------------------------

/// Sorted copy of `values` in `f64` (total order; NaN sorts last).
fn sorted(values: &[f32]) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

/// Mean accumulated in `f64` over the sorted values; `None` when empty.
pub fn ordered_mean(values: &[f32]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let v = sorted(values);
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

/// Population standard deviation (divisor `n`); `None` when empty.
pub fn population_std(values: &[f32]) -> Option<f64> {
    let mean = ordered_mean(values)?;
    let mut sq: Vec<f64> = values.iter().map(|&x| (x as f64 - mean).powi(2)).collect();
    sq.sort_by(|a, b| a.total_cmp(b));
    Some((sq.iter().sum::<f64>() / values.len() as f64).sqrt())
}

/// Pearson correlation in `f64`; `None` when fewer than two points, lengths
/// differ, or either variable has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------
