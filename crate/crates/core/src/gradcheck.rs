//! Central finite-difference checks for analytic logit gradients.

use crate::policy::{GradTape, Policy};

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error <= tol
    }
}

/// Compares `analytic` against `(L(x + h) - L(x - h)) / 2h` for every logit
/// in the rows of `states`, or all logits when `states` is `None`.
pub fn check_logit_gradient(
    policy: &Policy<f64>,
    analytic: &GradTape<f64>,
    states: Option<&[usize]>,
    h: f64,
    mut loss: impl FnMut(&Policy<f64>) -> f64,
) -> GradCheck {
    let v = policy.vocab().size;
    let indices: Vec<usize> = match states {
        Some(s) => {
            let mut rows = s.to_vec();
            rows.sort_unstable();
            rows.dedup();
            rows.iter().flat_map(|&r| r * v..(r + 1) * v).collect()
        }
        None => (0..policy.params().len()).collect(),
    };
    let mut probe = policy.clone();
    let mut out = GradCheck {
        max_relative_error: 0.0,
        worst_index: 0,
        checked: indices.len(),
    };
    for i in indices {
        let x = probe.params()[i];
        probe.params_mut()[i] = x + h;
        let up = loss(&probe);
        probe.params_mut()[i] = x - h;
        let down = loss(&probe);
        probe.params_mut()[i] = x;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic.as_slice()[i], numeric);
        if err > out.max_relative_error {
            out.max_relative_error = err;
            out.worst_index = i;
        }
    }
    out
}
