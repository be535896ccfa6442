//! Prospect-theory primitives: value function, capacity function,
//! rank-dependent weights and expected subjective utility.
//!
//! The weighting and utility routines come in two flavours: the parametric
//! ones (`weights`, `utility`) use the standard inverse-S capacity over a
//! floating point [`Scalar`]; the `_with` variants accept arbitrary capacity
//! and value closures over any [`Mass`] type, including exact rationals.

use crate::error::{Error, Result};
use crate::scalar::{Mass, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProspectParams<T> {
    /// Curvature exponent of the value function.
    pub alpha: T,
    /// Loss-aversion coefficient.
    pub lambda: T,
    /// Reference point.
    pub z0: T,
    /// Capacity constant on the gain side.
    pub gamma_gain: T,
    /// Capacity constant on the loss side.
    pub gamma_loss: T,
}

impl<T: Scalar> ProspectParams<T> {
    pub fn new(alpha: T, lambda: T, z0: T, gamma_gain: T, gamma_loss: T) -> Result<Self> {
        let p = Self {
            alpha,
            lambda,
            z0,
            gamma_gain,
            gamma_loss,
        };
        p.validate()?;
        Ok(p)
    }

    /// Linear value, no loss aversion, undistorted probabilities.
    pub fn identity() -> Self {
        Self {
            alpha: T::one(),
            lambda: T::one(),
            z0: T::zero(),
            gamma_gain: T::one(),
            gamma_loss: T::one(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("lambda", self.lambda),
            ("gamma_gain", self.gamma_gain),
            ("gamma_loss", self.gamma_loss),
        ];
        for (name, v) in positive {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        if !self.z0.is_finite() {
            return Err(Error::InvalidParameter("z0 must be finite".into()));
        }
        Ok(())
    }

    /// Additionally require both capacity constants in (0, 1], the range
    /// observed for typical human subjects.
    pub fn validate_typical_human(&self) -> Result<()> {
        self.validate()?;
        if self.gamma_gain > T::one() || self.gamma_loss > T::one() {
            return Err(Error::InvalidParameter(
                "capacity constants must not exceed 1".into(),
            ));
        }
        Ok(())
    }
}

impl<T: Scalar> Default for ProspectParams<T> {
    fn default() -> Self {
        Self {
            alpha: T::one(),
            lambda: T::one(),
            z0: T::zero(),
            gamma_gain: T::lit(0.6),
            gamma_loss: T::lit(0.6),
        }
    }
}

/// Outcomes sorted from least to most positive with their objective
/// probabilities. Equal outcomes are merged.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeDistribution<T> {
    outcomes: Vec<T>,
    probs: Vec<T>,
}

impl<T: Mass> OutcomeDistribution<T> {
    /// Rejects unsorted outcomes, negative probabilities and mass != 1.
    pub fn new(outcomes: Vec<T>, probs: Vec<T>) -> Result<Self> {
        if outcomes.len() != probs.len() {
            return Err(Error::LengthMismatch {
                expected: outcomes.len(),
                got: probs.len(),
            });
        }
        if outcomes.is_empty() {
            return Err(Error::InvalidParameter("empty distribution".into()));
        }
        for (i, w) in outcomes.windows(2).enumerate() {
            if w[1] < w[0] {
                return Err(Error::Unsorted(i + 1));
            }
        }
        let mut total = T::zero();
        for &p in &probs {
            if p < T::zero() {
                return Err(Error::InvalidParameter(format!("negative probability {p:?}")));
            }
            total = total + p;
        }
        if !T::is_unit(total) {
            return Err(Error::InvalidParameter(format!(
                "probabilities sum to {total:?}, not 1"
            )));
        }
        let mut merged_z: Vec<T> = Vec::with_capacity(outcomes.len());
        let mut merged_p: Vec<T> = Vec::with_capacity(outcomes.len());
        for (z, p) in outcomes.into_iter().zip(probs) {
            match merged_z.last() {
                Some(&last) if last == z => {
                    let lp = merged_p.last_mut().expect("parallel vectors");
                    *lp = *lp + p;
                }
                _ => {
                    merged_z.push(z);
                    merged_p.push(p);
                }
            }
        }
        Ok(Self {
            outcomes: merged_z,
            probs: merged_p,
        })
    }

    /// Sorts `(outcome, probability)` pairs first, then validates.
    pub fn from_pairs(mut pairs: Vec<(T, T)>) -> Result<Self> {
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
        let (z, p) = pairs.into_iter().unzip();
        Self::new(z, p)
    }

    pub fn outcomes(&self) -> &[T] {
        &self.outcomes
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }
}

/// Subjective value of `z` relative to the reference point.
pub fn value<T: Scalar>(z: T, params: &ProspectParams<T>) -> T {
    if z >= params.z0 {
        (z - params.z0).powf(params.alpha)
    } else {
        -params.lambda * (params.z0 - z).powf(params.alpha)
    }
}

/// Inverse-S capacity `a^g / (a^g + (1-a)^g)^(1/g)`.
pub fn capacity<T: Scalar>(a: T, gamma: T) -> Result<T> {
    if !(a >= T::zero() && a <= T::one()) {
        return Err(Error::InvalidParameter(format!(
            "cumulative probability {a} outside [0, 1]"
        )));
    }
    if !(gamma > T::zero()) {
        return Err(Error::InvalidParameter(format!("gamma must be > 0, got {gamma}")));
    }
    Ok(capacity_unchecked(a, gamma))
}

fn capacity_unchecked<T: Scalar>(a: T, gamma: T) -> T {
    if gamma == T::one() || a.is_zero() || a == T::one() {
        return a;
    }
    let num = a.powf(gamma);
    num / (num + (T::one() - a).powf(gamma)).powf(gamma.recip())
}

/// Rank-dependent weights for arbitrary capacities.
///
/// Gains (`z >= z0`) are weighted by the capacity of the probability of
/// doing at least as well, minus that of doing strictly better; losses
/// mirror this with the probability of doing at least as badly.
pub fn weights_with<T, G, L>(dist: &OutcomeDistribution<T>, z0: T, gain_capacity: G, loss_capacity: L) -> Vec<T>
where
    T: Mass,
    G: Fn(T) -> T,
    L: Fn(T) -> T,
{
    let n = dist.len();
    let z = dist.outcomes();
    let p = dist.probs();
    let split = z.iter().position(|&zi| zi >= z0).unwrap_or(n);
    let mut w = vec![T::zero(); n];

    // Gains: tail sums from the most positive outcome downwards.
    let mut above = T::zero();
    for i in (split..n).rev() {
        let at_least = above + p[i];
        w[i] = gain_capacity(at_least) - gain_capacity(above);
        above = at_least;
    }
    // Losses: head sums from the most negative outcome upwards.
    let mut below = T::zero();
    for i in 0..split {
        let at_most = below + p[i];
        w[i] = loss_capacity(at_most) - loss_capacity(below);
        below = at_most;
    }
    w
}

/// Rank-dependent weights using the parametric capacity on each side.
pub fn weights<T: Scalar + Mass>(dist: &OutcomeDistribution<T>, params: &ProspectParams<T>) -> Vec<T> {
    let clamp = |a: T| a.max(T::zero()).min(T::one());
    weights_with(
        dist,
        params.z0,
        |a| capacity_unchecked(clamp(a), params.gamma_gain),
        |a| capacity_unchecked(clamp(a), params.gamma_loss),
    )
}

/// `sum_i weight_i * value(z_i)` for caller-supplied weights and values.
pub fn utility_with<T: Mass>(dist: &OutcomeDistribution<T>, weights: &[T], value: impl Fn(T) -> T) -> T {
    dist.outcomes()
        .iter()
        .zip(weights)
        .fold(T::zero(), |acc, (&z, &w)| acc + w * value(z))
}

/// Expected subjective utility.
pub fn utility<T: Scalar + Mass>(dist: &OutcomeDistribution<T>, params: &ProspectParams<T>) -> T {
    let w = weights(dist, params);
    utility_with(dist, &w, |z| value(z, params))
}

/// Both sides of the utility gap bound
/// `|u(omega) - u(Q)| <= sqrt(2 KL(omega || Q)) * max|v|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapBound<T> {
    pub lhs: T,
    pub rhs: T,
    pub kl: T,
    pub holds: bool,
}

/// KL divergence in nats over a shared finite support.
pub fn kl_divergence<T: Scalar>(omega: &[T], q: &[T]) -> Result<T> {
    if omega.len() != q.len() {
        return Err(Error::LengthMismatch {
            expected: omega.len(),
            got: q.len(),
        });
    }
    let mut kl = T::zero();
    for (i, (&w, &qi)) in omega.iter().zip(q).enumerate() {
        if w > T::zero() {
            if !(qi > T::zero()) {
                return Err(Error::SupportViolation {
                    index: i,
                    mass: w.f64(),
                });
            }
            kl += w * (w / qi).ln();
        }
    }
    Ok(kl.max(T::zero()))
}

/// Evaluates the utility gap bound for two distributions over the listed
/// outcomes. Both must be normalised; `omega` must not put mass where `q`
/// has none (otherwise the KL term is infinite).
pub fn utility_gap_bound<T: Scalar>(
    outcomes: &[T],
    omega: &[T],
    q: &[T],
    params: &ProspectParams<T>,
) -> Result<GapBound<T>> {
    if outcomes.len() != omega.len() {
        return Err(Error::LengthMismatch {
            expected: outcomes.len(),
            got: omega.len(),
        });
    }
    for (name, d) in [("omega", omega), ("Q", q)] {
        let total: T = d.iter().copied().sum();
        if d.iter().any(|&p| p < T::zero()) || (total - T::one()).abs() > T::lit(1e-9) {
            return Err(Error::InvalidParameter(format!("{name} is not a distribution")));
        }
    }
    let kl = kl_divergence(omega, q)?;
    let values: Vec<T> = outcomes.iter().map(|&z| value(z, params)).collect();
    let sup = values.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let u = |d: &[T]| d.iter().zip(&values).map(|(&p, &v)| p * v).sum::<T>();
    let lhs = (u(omega) - u(q)).abs();
    let rhs = (T::lit(2.0) * kl).sqrt() * sup;
    // Rounding slack proportional to the value scale.
    let slack = T::epsilon() * T::lit(64.0) * sup;
    Ok(GapBound {
        lhs,
        rhs,
        kl,
        holds: lhs <= rhs + slack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;
    use proptest::prelude::*;

    type R = Ratio<i64>;

    fn r(n: i64, d: i64) -> R {
        R::new(n, d)
    }

    #[test]
    fn value_examples() {
        let id = ProspectParams::<f64>::identity();
        assert_eq!(value(0.0, &id), 0.0);
        assert_eq!(value(100.0, &id), 100.0);
        assert_eq!(value(-100.0, &id), -100.0);
        let curved = ProspectParams::new(0.5, 2.0, 1.0, 0.6, 0.6).unwrap();
        assert_eq!(value(5.0, &curved), 2.0);
        assert_eq!(value(1.0, &curved), 0.0);
        assert_eq!(value(-3.0, &curved), -4.0);
    }

    #[test]
    fn capacity_examples() {
        for &a in &[0.0, 0.1, 0.37, 0.5, 0.99, 1.0] {
            assert_eq!(capacity(a, 1.0).unwrap(), a);
        }
        assert_eq!(capacity(0.0, 0.6).unwrap(), 0.0);
        assert_eq!(capacity(1.0, 0.6).unwrap(), 1.0);
        // 0.5^0.5 / (2 * 0.5^0.5)^2 = 0.70710678.../2 = 0.35355339...
        let oracle = 0.5f64.sqrt() / (0.5f64.sqrt() + 0.5f64.sqrt()).powi(2);
        assert!((capacity(0.5, 0.5).unwrap() - oracle).abs() < 1e-15);
        assert!((oracle - 0.353_553_390_593_273_8).abs() < 1e-15);
        assert!(capacity(1.2, 0.6).is_err());
        assert!(capacity(-0.1, 0.6).is_err());
    }

    #[test]
    fn injected_capacity_weights_exact() {
        // -100 @ 1/5, +50 @ 3/5, +100 @ 1/5 with perceived cumulatives
        // 0.8 (at least +50) and 0.3 (at least +100).
        let dist = OutcomeDistribution::new(
            vec![R::from_integer(-100), R::from_integer(50), R::from_integer(100)],
            vec![r(1, 5), r(3, 5), r(1, 5)],
        )
        .unwrap();
        let gain = |a: R| {
            if a == r(4, 5) {
                r(4, 5)
            } else if a == r(1, 5) {
                r(3, 10)
            } else {
                a
            }
        };
        let w = weights_with(&dist, R::from_integer(0), gain, |a| a);
        assert_eq!(w[1], r(1, 2));
        assert_eq!(w[2], r(3, 10));
        assert_eq!(w[0], r(1, 5));
    }

    #[test]
    fn gamble_utility_is_sixty() {
        let exact = OutcomeDistribution::new(
            vec![R::from_integer(-100), R::from_integer(100)],
            vec![r(1, 5), r(4, 5)],
        )
        .unwrap();
        let w = weights_with(&exact, R::from_integer(0), |a| a, |a| a);
        assert_eq!(utility_with(&exact, &w, |z| z), R::from_integer(60));

        let dist = OutcomeDistribution::new(vec![-100.0, 100.0], vec![0.2, 0.8]).unwrap();
        assert_eq!(utility(&dist, &ProspectParams::identity()), 60.0);
    }

    #[test]
    fn identity_capacity_reproduces_probabilities() {
        let dist = OutcomeDistribution::<f64>::new(vec![-2.0, -1.0, 0.5, 3.0], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let w = weights(&dist, &ProspectParams::identity());
        for (a, b) in w.iter().zip(dist.probs()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn three_gain_weights_match_telescoping_oracle() {
        let params = ProspectParams::new(1.0, 1.0, 0.0, 0.6, 0.6).unwrap();
        let dist = OutcomeDistribution::new(vec![1.0, 2.0, 3.0], vec![0.5, 0.3, 0.2]).unwrap();
        let w = weights(&dist, &params);
        let cap = |a: f64| a.powf(0.6) / (a.powf(0.6) + (1.0 - a).powf(0.6)).powf(1.0 / 0.6);
        let oracle = [cap(1.0) - cap(0.5), cap(0.5) - cap(0.2), cap(0.2)];
        for (a, b) in w.iter().zip(oracle) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn ties_are_merged_and_unsorted_rejected() {
        let d = OutcomeDistribution::new(vec![1.0, 1.0, 2.0], vec![0.25, 0.25, 0.5]).unwrap();
        assert_eq!(d.outcomes(), &[1.0, 2.0]);
        assert_eq!(d.probs(), &[0.5, 0.5]);
        assert!(matches!(
            OutcomeDistribution::new(vec![2.0, 1.0], vec![0.5, 0.5]),
            Err(Error::Unsorted(1))
        ));
        assert!(OutcomeDistribution::new(vec![1.0, 2.0], vec![0.5, 0.6]).is_err());
        let sorted = OutcomeDistribution::from_pairs(vec![(2.0, 0.4), (-1.0, 0.6)]).unwrap();
        assert_eq!(sorted.outcomes(), &[-1.0, 2.0]);
    }

    #[test]
    fn certain_outcome_utility_is_value() {
        let params = ProspectParams::new(0.7, 2.25, 0.0, 0.6, 0.7).unwrap();
        for &z in &[-3.0f64, 0.0, 4.0] {
            let d = OutcomeDistribution::new(vec![z], vec![1.0]).unwrap();
            assert!((utility(&d, &params) - value(z, &params)).abs() < 1e-12);
        }
    }

    #[test]
    fn inverted_s_crossing() {
        let g = 0.6;
        let grid: Vec<f64> = (1..1000).map(|i| i as f64 / 1000.0).collect();
        let diff: Vec<f64> = grid.iter().map(|&a| capacity(a, g).unwrap() - a).collect();
        let cross = diff.iter().position(|&d| d < 0.0).expect("crossing exists");
        assert!(cross > 0);
        assert!(diff[..cross].iter().all(|&d| d > 0.0));
        assert!(diff[cross..].iter().all(|&d| d < 0.0));
    }

    #[test]
    fn gap_bound_examples() {
        let params = ProspectParams::<f64>::identity();
        let same = utility_gap_bound(&[-1.0, 1.0], &[0.3, 0.7], &[0.3, 0.7], &params).unwrap();
        assert_eq!((same.lhs, same.rhs, same.holds), (0.0, 0.0, true));

        let b = utility_gap_bound(&[-1.0, 1.0], &[0.5, 0.5], &[0.9, 0.1], &params).unwrap();
        // u(omega) = 0, u(Q) = -0.8
        let kl = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((b.lhs - 0.8).abs() < 1e-15);
        assert!((b.rhs - (2.0 * kl).sqrt()).abs() < 1e-15);
        assert!(b.holds);

        assert!(matches!(
            utility_gap_bound(&[0.0, 1.0], &[0.5, 0.5], &[1.0, 0.0], &params),
            Err(Error::SupportViolation { index: 1, .. })
        ));
    }

    #[test]
    fn f32_utility() {
        let d = OutcomeDistribution::new(vec![-1.0f32, 2.0], vec![0.5, 0.5]).unwrap();
        let u = utility(&d, &ProspectParams::<f32>::identity());
        assert!((u - 0.5).abs() < 1e-6);
    }

    proptest! {
        // The weighting family loses monotonicity for gamma below about 0.28.
        #[test]
        fn capacity_monotone(g in 0.3f64..=1.0) {
            let mut prev = 0.0;
            for i in 0..=1000 {
                let c = capacity(i as f64 / 1000.0, g).unwrap();
                prop_assert!(c >= prev);
                prev = c;
            }
        }

        #[test]
        fn gain_weights_telescope(
            raw in proptest::collection::vec(0.01f64..1.0, 2..8),
            g in 0.2f64..=1.0,
        ) {
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
            let n = probs.len();
            let outcomes: Vec<f64> = (0..n).map(|i| i as f64 - (n / 2) as f64).collect();
            let dist = OutcomeDistribution::new(outcomes.clone(), probs.clone()).unwrap();
            let params = ProspectParams::new(1.0, 1.0, 0.0, g, g).unwrap();
            let w = weights(&dist, &params);
            let split = outcomes.iter().position(|&z| z >= 0.0).unwrap_or(n);
            let gain_mass: f64 = probs[split..].iter().sum();
            let gain_w: f64 = w[split..].iter().sum();
            prop_assert!((gain_w - capacity(gain_mass.min(1.0), g).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn identity_params_give_expected_value(
            raw in proptest::collection::vec((-50.0f64..50.0, 0.01f64..1.0), 1..8),
        ) {
            let total: f64 = raw.iter().map(|x| x.1).sum();
            let pairs: Vec<(f64, f64)> = raw.iter().map(|&(z, p)| (z, p / total)).collect();
            let ev: f64 = pairs.iter().map(|(z, p)| z * p).sum();
            let dist = OutcomeDistribution::from_pairs(pairs).unwrap();
            let u = utility(&dist, &ProspectParams::identity());
            prop_assert!((u - ev).abs() < 1e-12 * (1.0 + ev.abs()) + 1e-12);
        }
    }
}
