//! Seed-level summary statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); `None` below two values.
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

/// Standard error of the mean across seeds.
pub fn standard_error(xs: &[f64]) -> Option<f64> {
    sample_std(xs).map(|s| s / (xs.len() as f64).sqrt())
}

pub fn pooled_se(a: f64, b: f64) -> f64 {
    a.hypot(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Absent with fewer than two seeds.
    pub se: Option<f64>,
    pub n: usize,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        Self {
            mean: mean(xs),
            se: standard_error(xs),
            n: xs.len(),
        }
    }
}

/// One-sided paired t-test of `mean(a - b) > 0`; returns the p-value.
///
/// Identical samples give 0.5; a constant positive difference gives 0.
pub fn paired_t_greater(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&d);
    let se = standard_error(&d)?;
    if se == 0.0 {
        return Some(if m > 0.0 {
            0.0
        } else if m < 0.0 {
            1.0
        } else {
            0.5
        });
    }
    let t = StudentsT::new(0.0, 1.0, (d.len() - 1) as f64).ok()?;
    Some(1.0 - t.cdf(m / se))
}
