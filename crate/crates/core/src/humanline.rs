//! Humanline mechanisms: log-space ratio clipping, Beta-randomised token
//! rejection, the limit construction that turns rejection into clipping,
//! and the reference syncing schedule.

use std::fmt;

use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::policy::{DetachMask, Policy, Sequence};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Slack applied to enumerated ratio bounds so they are strict.
pub const RATIO_BOUND_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HumanlineMode {
    #[default]
    Clipping,
    Sampling,
    Off,
}

/// How often the reference is synced with the pre-update policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncPeriod {
    Every(u64),
    Never,
}

impl SyncPeriod {
    pub fn every(k: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("sync period k must be >= 1".into()));
        }
        Ok(Self::Every(k))
    }
}

impl fmt::Display for SyncPeriod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Every(k) => write!(f, "{k}"),
            Self::Never => write!(f, "inf"),
        }
    }
}

impl Serialize for SyncPeriod {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Every(k) => s.serialize_u64(*k),
            Self::Never => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for SyncPeriod {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(0) => Err(serde::de::Error::custom("k must be >= 1")),
            Raw::Num(k) => Ok(Self::Every(k)),
            Raw::Text(t) if matches!(t.as_str(), "inf" | "never" | "infinity") => Ok(Self::Never),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid sync period {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HumanlineConfig {
    pub mode: HumanlineMode,
    #[serde(rename = "log_eps_P")]
    pub log_eps_p: f64,
    #[serde(rename = "log_eps_R")]
    pub log_eps_r: f64,
    pub k: SyncPeriod,
    #[serde(rename = "gamma_P")]
    pub gamma_p: f64,
    #[serde(rename = "beta_P")]
    pub beta_p: f64,
    #[serde(rename = "gamma_R")]
    pub gamma_r: f64,
    #[serde(rename = "beta_R")]
    pub beta_r: f64,
}

impl Default for HumanlineConfig {
    fn default() -> Self {
        Self {
            mode: HumanlineMode::Clipping,
            log_eps_p: -1.5,
            log_eps_r: 1.5,
            k: SyncPeriod::Every(1),
            gamma_p: 1.0,
            beta_p: 1.0,
            gamma_r: 1.0,
            beta_r: 1.0,
        }
    }
}

impl HumanlineConfig {
    pub fn off() -> Self {
        Self {
            mode: HumanlineMode::Off,
            k: SyncPeriod::Never,
            ..Self::default()
        }
    }

    pub fn clipping(log_eps_p: f64, log_eps_r: f64, k: SyncPeriod) -> Self {
        Self {
            mode: HumanlineMode::Clipping,
            log_eps_p,
            log_eps_r,
            k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.log_eps_p < self.log_eps_r) {
            return Err(Error::InvalidParameter(format!(
                "log_eps_P ({}) must be below log_eps_R ({})",
                self.log_eps_p, self.log_eps_r
            )));
        }
        if let SyncPeriod::Every(0) = self.k {
            return Err(Error::InvalidParameter("k must be >= 1".into()));
        }
        for (name, v) in [
            ("gamma_P", self.gamma_p),
            ("beta_P", self.beta_p),
            ("gamma_R", self.gamma_r),
            ("beta_R", self.beta_r),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Effective syncing period: off mode never syncs.
    pub fn sync_period(&self) -> SyncPeriod {
        match self.mode {
            HumanlineMode::Off => SyncPeriod::Never,
            _ => self.k,
        }
    }

    pub fn beta_params(&self) -> BetaParams {
        BetaParams {
            gamma_p: self.gamma_p,
            beta_p: self.beta_p,
            gamma_r: self.gamma_r,
            beta_r: self.beta_r,
        }
    }
}

/// Per-context upper bounds on the token likelihood ratio in each direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioBounds<T> {
    /// Bound on `pi_theta / pi_ref`.
    pub m_p: T,
    /// Bound on `pi_ref / pi_theta`.
    pub m_r: T,
}

/// Enumerates the vocabulary at `state` to bound both ratios.
pub fn compute_ratio_bounds<T: Scalar>(policy: &Policy<T>, reference: &Policy<T>, state: usize) -> RatioBounds<T> {
    let lp = policy.log_softmax(state);
    let lr = reference.log_softmax(state);
    let (mut up, mut down) = (T::neg_infinity(), T::neg_infinity());
    for (&a, &b) in lp.iter().zip(&lr) {
        up = up.max(a - b);
        down = down.max(b - a);
    }
    let slack = T::one() + T::lit(RATIO_BOUND_SLACK);
    RatioBounds {
        m_p: up.exp() * slack,
        m_r: down.exp() * slack,
    }
}

/// Bounds for every position of a sequence.
pub fn sequence_ratio_bounds<T: Scalar>(
    policy: &Policy<T>,
    reference: &Policy<T>,
    seq: &Sequence,
) -> Vec<RatioBounds<T>> {
    policy
        .states(seq)
        .into_iter()
        .map(|s| compute_ratio_bounds(policy, reference, s))
        .collect()
}

/// Clamp with an inclusive range; the flag is the clamp's derivative
/// (1 inside the range, 0 outside).
pub fn clamp_log_ratio<T: Scalar>(x: T, lo: T, hi: T) -> (T, bool) {
    if x < lo {
        (lo, false)
    } else if x > hi {
        (hi, false)
    } else {
        (x, true)
    }
}

/// Clamps every log-ratio to `[log_eps_P, log_eps_R]`.
pub fn humanline_clip<T: Scalar>(log_ratios: &[T], config: &HumanlineConfig) -> Vec<T> {
    let (lo, hi) = (T::lit(config.log_eps_p), T::lit(config.log_eps_r));
    log_ratios.iter().map(|&x| clamp_log_ratio(x, lo, hi).0).collect()
}

/// Log-ratios as seen by a loss, with the gradient gate for each token.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedRatios<T> {
    pub values: Vec<T>,
    pub pass: Vec<bool>,
}

/// Applies the configured humanline treatment to raw token log-ratios.
///
/// Clipping clamps values and gates gradients outside the range; sampling
/// keeps values but gates detached tokens; off is the identity.
pub fn gate_log_ratios<T: Scalar>(
    raw: &[T],
    config: &HumanlineConfig,
    detached: Option<&DetachMask>,
) -> Result<GatedRatios<T>> {
    if let Some(m) = detached {
        if m.len() != raw.len() {
            return Err(Error::LengthMismatch {
                expected: raw.len(),
                got: m.len(),
            });
        }
    }
    let mut values = Vec::with_capacity(raw.len());
    let mut pass = Vec::with_capacity(raw.len());
    match config.mode {
        HumanlineMode::Clipping => {
            let (lo, hi) = (T::lit(config.log_eps_p), T::lit(config.log_eps_r));
            for &x in raw {
                let (v, p) = clamp_log_ratio(x, lo, hi);
                values.push(v);
                pass.push(p);
            }
        }
        HumanlineMode::Sampling | HumanlineMode::Off => {
            values.extend_from_slice(raw);
            pass.resize(raw.len(), true);
        }
    }
    if let Some(m) = detached {
        for (p, &d) in pass.iter_mut().zip(&m.0) {
            *p = *p && !d;
        }
    }
    Ok(GatedRatios { values, pass })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub gamma_p: f64,
    pub beta_p: f64,
    pub gamma_r: f64,
    pub beta_r: f64,
}

impl BetaParams {
    pub fn mean_p(&self) -> f64 {
        self.gamma_p / (self.gamma_p + self.beta_p)
    }

    pub fn mean_r(&self) -> f64 {
        self.gamma_r / (self.gamma_r + self.beta_r)
    }

    pub fn var_p(&self) -> f64 {
        beta_variance(self.gamma_p, self.beta_p)
    }

    pub fn var_r(&self) -> f64 {
        beta_variance(self.gamma_r, self.beta_r)
    }
}

fn beta_variance(a: f64, b: f64) -> f64 {
    a * b / ((a + b).powi(2) * (a + b + 1.0))
}

/// Draws from Beta(a, b). The `b == 1` family uses the exact inverse CDF
/// `U^(1/a)`; everything else goes through `rand_distr`.
pub fn sample_beta(a: f64, b: f64, rng: &mut Rng) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::InvalidParameter(format!("Beta({a}, {b})")));
    }
    if b == 1.0 {
        let u: f64 = rng.random();
        return Ok(u.powf(a.recip()));
    }
    let dist = Beta::new(a, b).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// Single-sided rejection test: reject when `ratio < bound * b`.
pub fn rejects(log_ratio: f64, log_bound: f64, b: f64) -> bool {
    // b == 0 gives -inf on the right, never rejecting.
    log_ratio < log_bound + b.ln()
}

/// Two-sided Beta-randomised rejection, returned as a detach mask.
///
/// A token is detached when `pi/pi_ref < M_P * B_P` or
/// `pi_ref/pi < M_R * B_R`, with fresh independent draws per token.
pub fn humanline_sample_mask<T: Scalar>(
    log_ratios: &[T],
    bounds: &[RatioBounds<T>],
    params: &BetaParams,
    rng: &mut Rng,
) -> Result<DetachMask> {
    if log_ratios.len() != bounds.len() {
        return Err(Error::LengthMismatch {
            expected: log_ratios.len(),
            got: bounds.len(),
        });
    }
    let mut mask = Vec::with_capacity(log_ratios.len());
    for (&lr, b) in log_ratios.iter().zip(bounds) {
        let b_p = sample_beta(params.gamma_p, params.beta_p, rng)?;
        let b_r = sample_beta(params.gamma_r, params.beta_r, rng)?;
        let lr = lr.f64();
        let reject_p = rejects(lr, b.m_p.f64().ln(), b_p);
        let reject_r = rejects(-lr, b.m_r.f64().ln(), b_r);
        mask.push(reject_p || reject_r);
    }
    Ok(DetachMask(mask))
}

/// Beta parameters under which the rejection thresholds concentrate on
/// `eps_P` and `eps_R` as `k` grows:
/// `gamma_P = k eps_P / M_P`, `beta_P = k (1 - eps_P / M_P)`,
/// `gamma_R = k / (eps_R M_R)`, `beta_R = k (1 - 1 / (eps_R M_R))`.
pub fn concentrating_beta_params(k: f64, eps_p: f64, eps_r: f64, bounds: &RatioBounds<f64>) -> Result<BetaParams> {
    if !(k > 0.0) || !(eps_p > 0.0) || !(eps_r > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "k, eps_P, eps_R must be positive (got {k}, {eps_p}, {eps_r})"
        )));
    }
    if !(eps_p < bounds.m_p) {
        return Err(Error::InvalidParameter(format!(
            "eps_P ({eps_p}) must be below M_P ({})",
            bounds.m_p
        )));
    }
    if !(eps_r > bounds.m_r.recip()) {
        return Err(Error::InvalidParameter(format!(
            "eps_R ({eps_r}) must exceed 1/M_R ({})",
            bounds.m_r.recip()
        )));
    }
    let mp = eps_p / bounds.m_p;
    let mr = 1.0 / (eps_r * bounds.m_r);
    Ok(BetaParams {
        gamma_p: k * mp,
        beta_p: k * (1.0 - mp),
        gamma_r: k * mr,
        beta_r: k * (1.0 - mr),
    })
}

/// True when the reference should be synced at `step` (1-based).
pub fn sync_schedule(step: u64, period: SyncPeriod) -> bool {
    match period {
        SyncPeriod::Every(k) => step >= 1 && step % k == 0,
        SyncPeriod::Never => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{PolicySpec, Vocabulary};
    use crate::rng::{Purpose, Streams};

    fn rng(i: u64) -> Rng {
        Streams::new(i).stream(Purpose::Beta, 0)
    }

    fn two_token_policies() -> (Policy<f64>, Policy<f64>) {
        // V must be >= 4, so pad with two tokens of negligible mass.
        let vocab = Vocabulary::new(4, 2, 3).unwrap();
        let spec = PolicySpec::new(vocab, 1, 0, 4).unwrap();
        let pol = Policy::from_logits(spec, vec![0.8f64.ln(), 0.2f64.ln(), -60.0, -60.0]).unwrap();
        let refp = Policy::from_logits(spec, vec![0.5f64.ln(), 0.5f64.ln(), -60.0, -60.0]).unwrap();
        (pol, refp)
    }

    #[test]
    fn identical_models_bound_is_slack() {
        let (p, _) = two_token_policies();
        let b = compute_ratio_bounds(&p, &p, 0);
        assert_eq!(b.m_p, 1.0 + RATIO_BOUND_SLACK);
        assert_eq!(b.m_r, 1.0 + RATIO_BOUND_SLACK);
    }

    #[test]
    fn enumerated_bounds() {
        let (p, r) = two_token_policies();
        let b = compute_ratio_bounds(&p, &r, 0);
        assert!((b.m_p - 1.6 * (1.0 + RATIO_BOUND_SLACK)).abs() < 1e-9);
        assert!((b.m_r - 2.5 * (1.0 + RATIO_BOUND_SLACK)).abs() < 1e-9);
    }

    #[test]
    fn clip_examples() {
        let cfg = HumanlineConfig::default();
        assert_eq!(humanline_clip(&[2.0], &cfg), vec![1.5]);
        assert_eq!(humanline_clip(&[0.0], &cfg), vec![0.0]);
        assert_eq!(
            humanline_clip(&[-3.0, -1.0, 0.0, 1.0, 3.0], &cfg),
            vec![-1.5, -1.0, 0.0, 1.0, 1.5]
        );
        let once = humanline_clip(&[-3.0, 0.4, 7.0], &cfg);
        assert_eq!(humanline_clip(&once, &cfg), once);
    }

    #[test]
    fn gate_respects_mode_and_mask() {
        let cfg = HumanlineConfig::default();
        let g = gate_log_ratios(&[-2.0, -1.5, 0.1, 1.5, 2.0], &cfg, None).unwrap();
        assert_eq!(g.pass, vec![false, true, true, true, false]);
        let off = HumanlineConfig::off();
        let mask = DetachMask(vec![false, true, false]);
        let g = gate_log_ratios(&[-9.0, 0.0, 9.0], &off, Some(&mask)).unwrap();
        assert_eq!(g.values, vec![-9.0, 0.0, 9.0]);
        assert_eq!(g.pass, vec![true, false, true]);
    }

    #[test]
    fn ratio_at_bound_is_accepted() {
        // ratio == M_P and B <= 1 can never satisfy ratio < M_P * B.
        let mut r = rng(1);
        for _ in 0..1000 {
            let b = sample_beta(1.0, 1e-3, &mut r).unwrap();
            assert!(!rejects(2f64.ln(), 2f64.ln(), b));
        }
        assert!(!rejects(0.0, 0.0, 1.0));
    }

    #[test]
    fn uniform_beta_accepts_half() {
        let mut r = rng(2);
        let n = 100_000;
        let accepted = (0..n)
            .filter(|_| !rejects(0.5f64.ln(), 0.0, sample_beta(1.0, 1.0, &mut r).unwrap()))
            .count();
        let p = accepted as f64 / n as f64;
        let sigma = (0.25 / n as f64).sqrt();
        assert!((p - 0.5).abs() < 3.0 * sigma, "{p}");
    }

    #[test]
    fn beta_half_one_accepts_root_half() {
        let mut r = rng(3);
        let n = 100_000;
        let expected = 0.5f64.powf(0.5);
        let accepted = (0..n)
            .filter(|_| !rejects(0.5f64.ln(), 0.0, sample_beta(0.5, 1.0, &mut r).unwrap()))
            .count();
        let p = accepted as f64 / n as f64;
        let sigma = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!((p - expected).abs() < 3.0 * sigma, "{p} vs {expected}");
    }

    #[test]
    fn concentrating_params_examples() {
        let b = RatioBounds { m_p: 10.0, m_r: 10.0 };
        let bp = concentrating_beta_params(1000.0, 0.22, 4.48, &b).unwrap();
        assert!((bp.mean_p() - 0.022).abs() < 1e-15);
        assert!((bp.var_p() - 0.022 * 0.978 / 1001.0).abs() < 1e-15);
        assert!((bp.mean_r() - 1.0 / 44.8).abs() < 1e-15);
        let mid = concentrating_beta_params(37.0, 5.0, 4.48, &b).unwrap();
        assert!((mid.mean_p() - 0.5).abs() < 1e-15);
        assert!(concentrating_beta_params(10.0, 10.0, 4.48, &b).is_err());
        assert!(concentrating_beta_params(10.0, 0.5, 0.05, &b).is_err());
    }

    #[test]
    fn thresholds_concentrate_at_large_k() {
        let b = RatioBounds { m_p: 10.0, m_r: 10.0 };
        let bp = concentrating_beta_params(1e5, 0.22, 4.48, &b).unwrap();
        let mut r = rng(4);
        let n = 100_000;
        let excursions = (0..n)
            .filter(|_| (sample_beta(bp.gamma_p, bp.beta_p, &mut r).unwrap() - 0.022).abs() >= 0.01)
            .count();
        assert!((excursions as f64) < 0.01 * n as f64);
    }

    #[test]
    fn sync_schedule_examples() {
        assert!((1..=10).all(|s| sync_schedule(s, SyncPeriod::Every(1))));
        let fired: Vec<u64> = (1..=8).filter(|&s| sync_schedule(s, SyncPeriod::Every(4))).collect();
        assert_eq!(fired, vec![4, 8]);
        assert!((1..=100).all(|s| !sync_schedule(s, SyncPeriod::Never)));
        assert_eq!(HumanlineConfig::off().sync_period(), SyncPeriod::Never);
    }

    #[test]
    fn sync_period_serde() {
        #[derive(Deserialize, Serialize)]
        struct W {
            k: SyncPeriod,
        }
        let w: W = serde_json::from_str(r#"{"k": 4}"#).unwrap();
        assert_eq!(w.k, SyncPeriod::Every(4));
        let w: W = serde_json::from_str(r#"{"k": "inf"}"#).unwrap();
        assert_eq!(w.k, SyncPeriod::Never);
        assert!(serde_json::from_str::<W>(r#"{"k": 0}"#).is_err());
        assert_eq!(serde_json::to_string(&W { k: SyncPeriod::Never }).unwrap(), r#"{"k":"inf"}"#);
    }

    #[test]
    fn config_validation() {
        assert!(HumanlineConfig::default().validate().is_ok());
        let bad = HumanlineConfig {
            log_eps_p: 1.0,
            log_eps_r: 0.5,
            ..HumanlineConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad_beta = HumanlineConfig {
            beta_r: 0.0,
            ..HumanlineConfig::default()
        };
        assert!(bad_beta.validate().is_err());
    }
}
