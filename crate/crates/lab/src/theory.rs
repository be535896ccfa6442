//! Numerical checks of the prospect-theory and humanline mathematics.
//!
//! Each check returns the statistic it measured so callers can apply their
//! own thresholds; [`run_suite`] applies the default ones.

use std::time::Instant;

use humanline_core::gradcheck::{check_logit_gradient, FD_STEP};
use humanline_core::humanline::{clamp_log_ratio, rejects, sample_beta, concentrating_beta_params, RatioBounds};
use humanline_core::objectives::{dpo_batch, group_advantages, grpo_batch, kto_batch_with_reference_point, BatchLoss};
use humanline_core::prospect::{utility, utility_gap_bound, utility_with, weights_with};
use humanline_core::{
    Group, HumanlineConfig, Labeled, LossConfig, Models, OutcomeDistribution, Pair, Policy64, PolicySpec, ProspectParams,
    Purpose, Rng, Sequence, Streams, SyncPeriod, TokenId, Vocabulary,
};
use num_rational::Ratio;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::config::TheoryConfig;

type Exact = Ratio<i64>;

/// Utility of {-100 @ 0.2, +100 @ 0.8} with linear value and undistorted
/// probabilities, in floating point and in exact rationals.
pub fn gamble_utility() -> (f64, Exact) {
    let dist = OutcomeDistribution::new(vec![-100.0, 100.0], vec![0.2, 0.8]).expect("valid gamble");
    let float = utility(&dist, &ProspectParams::identity());
    let exact = OutcomeDistribution::new(
        vec![Exact::from_integer(-100), Exact::from_integer(100)],
        vec![Exact::new(1, 5), Exact::new(4, 5)],
    )
    .expect("valid gamble");
    let w = weights_with(&exact, Exact::from_integer(0), |a| a, |a| a);
    (float, utility_with(&exact, &w, |z| z))
}

/// Weights of two gains whose perceived probabilities of doing at least as
/// well are 0.8 and 0.3, for the lower and the higher gain.
pub fn injected_weights() -> (Exact, Exact) {
    let dist = OutcomeDistribution::new(
        vec![Exact::from_integer(-100), Exact::from_integer(50), Exact::from_integer(100)],
        vec![Exact::new(1, 5), Exact::new(3, 5), Exact::new(1, 5)],
    )
    .expect("valid gamble");
    let perceived = |a: Exact| {
        if a == Exact::new(4, 5) {
            Exact::new(4, 5)
        } else if a == Exact::new(1, 5) {
            Exact::new(3, 10)
        } else {
            a
        }
    };
    let w = weights_with(&dist, Exact::from_integer(0), perceived, |a| a);
    (w[1], w[2])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepStats {
    pub trials: usize,
    pub violations: usize,
    /// Largest observed `lhs / rhs`.
    pub tightest: f64,
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn simplex(rng: &mut Rng, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-300).ln() + floor).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

/// Random (omega, Q, value) triples against the KL bound on the utility gap.
pub fn pinsker_sweep(trials: usize, seed: u64) -> SweepStats {
    let mut rng = Streams::new(seed).stream(Purpose::Sampling, 0);
    let mut out = SweepStats {
        trials,
        violations: 0,
        tightest: 0.0,
    };
    for _ in 0..trials {
        let n = rng.random_range(2..=8);
        let mut outcomes: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        outcomes.sort_by(f64::total_cmp);
        let q = simplex(&mut rng, n, 1e-3);
        // Some omegas drop outcomes entirely; Q always keeps full support.
        let mut omega = simplex(&mut rng, n, 0.0);
        if rng.random::<f64>() < 0.3 {
            omega[rng.random_range(0..n)] = 0.0;
            let t: f64 = omega.iter().sum();
            omega.iter_mut().for_each(|w| *w /= t);
        }
        let params = ProspectParams::new(
            rng.random_range(0.1..=1.0),
            rng.random_range(1.0..3.0),
            rng.random_range(-50.0..50.0),
            rng.random_range(0.3..=1.0),
            rng.random_range(0.3..=1.0),
        )
        .expect("valid prospect parameters");
        match utility_gap_bound(&outcomes, &omega, &q, &params) {
            Ok(b) => {
                if !b.holds {
                    out.violations += 1;
                }
                if b.rhs > 0.0 {
                    out.tightest = out.tightest.max(b.lhs / b.rhs);
                }
            }
            Err(_) => out.violations += 1,
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub gamma: f64,
    pub ratio_over_bound: f64,
    pub empirical: f64,
    pub expected: f64,
    /// Binomial standard deviation of the empirical rate.
    pub sigma: f64,
}

impl AcceptanceStats {
    pub fn z_score(&self) -> f64 {
        if self.sigma == 0.0 {
            if self.empirical == self.expected {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.empirical - self.expected).abs() / self.sigma
        }
    }
}

/// Acceptance rate of a token whose ratio sits at `ratio_over_bound` times
/// the bound, under Beta(gamma, 1) thresholds.
pub fn acceptance_rate(gamma: f64, ratio_over_bound: f64, trials: usize, rng: &mut Rng) -> AcceptanceStats {
    let log_bound = 0.7;
    let log_ratio = log_bound + ratio_over_bound.ln();
    let accepted = (0..trials)
        .filter(|_| !rejects(log_ratio, log_bound, sample_beta(gamma, 1.0, rng).expect("gamma > 0")))
        .count();
    let expected = ratio_over_bound.min(1.0).powf(gamma);
    AcceptanceStats {
        gamma,
        ratio_over_bound,
        empirical: accepted as f64 / trials as f64,
        expected,
        sigma: (expected * (1.0 - expected) / trials as f64).sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareStats {
    pub gamma: f64,
    pub accepted: usize,
    pub statistic: f64,
    pub p_value: f64,
}

/// Proposes tokens from a random reference over `vocab` tokens, keeps them
/// by Beta(gamma, 1) rejection against the policy ratio, and tests the kept
/// tokens against `pi_ref * ratio^gamma`.
pub fn accepted_distribution(gamma: f64, vocab: usize, proposals: usize, seed: u64) -> ChiSquareStats {
    let streams = Streams::new(seed);
    let mut init = streams.stream(Purpose::Init, 0);
    let logits = |rng: &mut Rng| -> Vec<f64> { (0..vocab).map(|_| 0.6 * normal(rng)).collect() };
    let softmax = |l: Vec<f64>| {
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    let policy = softmax(logits(&mut init));
    let reference = softmax(logits(&mut init));
    let log_ratio: Vec<f64> = policy.iter().zip(&reference).map(|(p, r)| (p / r).ln()).collect();
    let log_bound = log_ratio.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut rng = streams.stream(Purpose::Beta, 0);
    let mut counts = vec![0usize; vocab];
    for _ in 0..proposals {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let tok = reference
            .iter()
            .position(|&p| {
                acc += p;
                u < acc
            })
            .unwrap_or(vocab - 1);
        let b = sample_beta(gamma, 1.0, &mut rng).expect("gamma > 0");
        if !rejects(log_ratio[tok], log_bound, b) {
            counts[tok] += 1;
        }
    }
    let target: Vec<f64> = reference.iter().zip(&log_ratio).map(|(r, lr)| r * (gamma * lr).exp()).collect();
    let z: f64 = target.iter().sum();
    let accepted: usize = counts.iter().sum();
    let statistic: f64 = counts
        .iter()
        .zip(&target)
        .map(|(&c, &t)| {
            let e = accepted as f64 * t / z;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let chi = ChiSquared::new((vocab - 1) as f64).expect("vocab >= 2");
    ChiSquareStats {
        gamma,
        accepted,
        statistic,
        p_value: 1.0 - chi.cdf(statistic),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationStats {
    pub k: f64,
    pub empirical_var: f64,
    pub predicted_var: f64,
}

impl ConcentrationStats {
    pub fn relative_error(&self) -> f64 {
        (self.empirical_var / self.predicted_var - 1.0).abs()
    }
}

/// Sample variance of the policy-side threshold under the concentrating
/// Beta parameters, against `mu (1 - mu) / (k + 1)` with `mu = eps_P / M_P`.
pub fn threshold_concentration(k: f64, eps: f64, draws: usize, seed: u64) -> ConcentrationStats {
    let bounds = RatioBounds { m_p: 1.6, m_r: 2.5 };
    let params = concentrating_beta_params(k, 1.0 - eps, 1.0 + eps, &bounds).expect("valid construction");
    let mut rng = Streams::new(seed).stream(Purpose::Beta, 1);
    let xs: Vec<f64> = (0..draws)
        .map(|_| sample_beta(params.gamma_p, params.beta_p, &mut rng).expect("positive parameters"))
        .collect();
    let var = crate::stats::sample_std(&xs).map_or(0.0, |s| s * s);
    let mu = (1.0 - eps) / bounds.m_p;
    ConcentrationStats {
        k,
        empirical_var: var,
        predicted_var: mu * (1.0 - mu) / (k + 1.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub tokens: usize,
    pub agree: usize,
    pub clipped: usize,
}

impl AgreementStats {
    pub fn fraction(&self) -> f64 {
        self.agree as f64 / self.tokens as f64
    }
}

/// Compares the tokens Beta rejection detaches (at concentration `k`) with
/// the tokens a `[1 - eps, 1 + eps]` ratio clamp zeroes, over random
/// policy/reference pairs. `corrupt` widens the clamp's upper bound.
pub fn rejection_matches_clipping(k: f64, eps: f64, tokens: usize, seed: u64, corrupt: bool) -> AgreementStats {
    const VOCAB: usize = 8;
    let streams = Streams::new(seed);
    let mut rng = streams.stream(Purpose::Sampling, 1);
    let mut beta = streams.stream(Purpose::Beta, 2);
    let lo = (1.0 - eps).ln();
    let hi = (1.0 + eps).ln() + if corrupt { 0.3 } else { 0.0 };
    let mut out = AgreementStats {
        tokens,
        agree: 0,
        clipped: 0,
    };
    for _ in 0..tokens {
        let logp: Vec<f64> = (0..VOCAB).map(|_| normal(&mut rng)).collect();
        let logr: Vec<f64> = (0..VOCAB).map(|_| normal(&mut rng)).collect();
        let norm = |l: &[f64]| l.iter().map(|x| x.exp()).sum::<f64>().ln();
        let (zp, zr) = (norm(&logp), norm(&logr));
        let lr: Vec<f64> = logp.iter().zip(&logr).map(|(p, r)| (p - zp) - (r - zr)).collect();
        let bounds = RatioBounds {
            m_p: lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp(),
            m_r: lr.iter().map(|x| -x).fold(f64::NEG_INFINITY, f64::max).exp(),
        };
        let tok = rng.random_range(0..VOCAB);
        let params = concentrating_beta_params(k, 1.0 - eps, 1.0 + eps, &bounds).expect("valid construction");
        let b_p = sample_beta(params.gamma_p, params.beta_p, &mut beta).expect("positive parameters");
        let b_r = sample_beta(params.gamma_r, params.beta_r, &mut beta).expect("positive parameters");
        let detached = rejects(lr[tok], bounds.m_p.ln(), b_p) || rejects(-lr[tok], bounds.m_r.ln(), b_r);
        let clipped = !clamp_log_ratio(lr[tok], lo, hi).1;
        out.clipped += usize::from(clipped);
        out.agree += usize::from(detached == clipped);
    }
    out
}

/// Groups of two distinct rewards whose advantages are not exactly (+1, -1).
pub fn two_sample_advantage_violations(trials: usize, seed: u64) -> usize {
    let mut rng = Streams::new(seed).stream(Purpose::Sampling, 2);
    (0..trials)
        .filter(|_| {
            let (a, b): (f64, f64) = (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            if a == b {
                return false;
            }
            let adv = group_advantages(&[a, b]).expect("two rewards");
            let want = if a > b { [1.0, -1.0] } else { [-1.0, 1.0] };
            adv != want
        })
        .count()
}

// Gradient checks on small random instances.

fn grad_spec() -> PolicySpec {
    PolicySpec::new(Vocabulary::new(5, 3, 4).expect("valid vocabulary"), 2, 2, 5).expect("valid spec")
}

struct Instance {
    policy: Policy64,
    reference: Policy64,
    baseline: Policy64,
    seqs: Vec<Sequence>,
}

/// Draws an instance with no log-ratio within 1e-3 of a clamp kink, where
/// finite differences straddle the discontinuity in the derivative.
fn draw_instance(seed: u64, kinks: &[f64]) -> Instance {
    let streams = Streams::new(seed);
    let mut attempt = 0u64;
    loop {
        let mut rng = streams.keyed(Purpose::Init, &[attempt]);
        attempt += 1;
        let policy = Policy64::random(grad_spec(), 1.0, &mut rng).expect("valid spec");
        let shift = |p: &Policy64, scale: f64, rng: &mut Rng| {
            let noise = Policy64::random(grad_spec(), scale, rng).expect("valid spec");
            let mut q = p.clone();
            q.apply(|i, x| x + noise.params()[i]);
            q
        };
        let reference = shift(&policy, 0.8, &mut rng);
        let baseline = shift(&policy, 0.5, &mut rng);
        let seqs: Vec<Sequence> = (0..8)
            .map(|_| {
                let ctx = (0..2).map(|_| rng.random_range(0..3)).collect();
                let len = rng.random_range(1..=5);
                let out: Vec<TokenId> = (0..len).map(|_| [0, 1, 2, 4][rng.random_range(0..4)]).collect();
                Sequence::new(ctx, out)
            })
            .collect();
        let near_kink = seqs.iter().any(|s| {
            let (p, r) = (policy.log_prob(s).expect("valid"), reference.log_prob(s).expect("valid"));
            p.iter().zip(&r).any(|(a, b)| kinks.iter().any(|k| (a - b - k).abs() < 1e-3))
        });
        if !near_kink {
            return Instance {
                policy,
                reference,
                baseline,
                seqs,
            };
        }
    }
}

fn worst_error(inst: &Instance, seqs: &[Sequence], loss: impl Fn(&Models<'_, f64>) -> BatchLoss<f64>) -> f64 {
    let analytic = loss(&Models::new(&inst.policy, &inst.reference).with_baseline(&inst.baseline));
    let states: Vec<usize> = seqs.iter().flat_map(|s| inst.policy.states(s)).collect();
    check_logit_gradient(&inst.policy, &analytic.grad, Some(&states), FD_STEP, |p| {
        loss(&Models::new(p, &inst.reference).with_baseline(&inst.baseline)).loss
    })
    .max_relative_error
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientStats {
    pub objective: String,
    pub humanline: String,
    pub instances: u64,
    pub max_relative_error: f64,
}

/// Worst relative error of DPO, KTO and GRPO gradients against central
/// differences, with humanline clipping off and on.
pub fn gradient_checks(instances: u64, seed: u64) -> Vec<GradientStats> {
    const GRPO_EPS: f64 = 0.2;
    let variants = [
        ("off", HumanlineConfig::off()),
        ("clipping", HumanlineConfig::clipping(-0.4, 0.4, SyncPeriod::Every(1))),
    ];
    let mut out = Vec::new();
    for (hl_name, hl) in variants {
        let kinks = [hl.log_eps_p, hl.log_eps_r, (1.0 - GRPO_EPS).ln(), (1.0 + GRPO_EPS).ln()];
        let mut worst = [0.0f64; 3];
        for i in 0..instances {
            let inst = draw_instance(seed.wrapping_add(i), &kinks);
            let pairs: Vec<Pair> = inst
                .seqs
                .chunks(2)
                .map(|c| Pair {
                    context: c[0].context.clone(),
                    chosen: c[0].output.clone(),
                    rejected: c[1].output.clone(),
                })
                .collect();
            let pair_seqs: Vec<Sequence> = pairs.iter().flat_map(|p| [p.chosen_seq(), p.rejected_seq()]).collect();
            let dpo = LossConfig {
                beta: 0.7,
                ..LossConfig::dpo()
            };
            worst[0] = worst[0].max(worst_error(&inst, &pair_seqs, |m| {
                dpo_batch(m, &pairs, &dpo, &hl, None).expect("valid batch")
            }));

            let examples: Vec<Labeled> = inst
                .seqs
                .iter()
                .enumerate()
                .map(|(j, s)| Labeled {
                    seq: s.clone(),
                    desirable: j % 3 != 0,
                })
                .collect();
            let kto = LossConfig::kto();
            worst[1] = worst[1].max(worst_error(&inst, &inst.seqs, |m| {
                kto_batch_with_reference_point(m, &examples, 0.25, &kto, &hl, None).expect("valid batch")
            }));

            let grpo = LossConfig {
                beta: 0.3,
                ..LossConfig::grpo()
            };
            let mut rewards = Streams::new(seed.wrapping_add(i)).stream(Purpose::Noise, 0);
            let groups: Vec<Group<f64>> = inst
                .seqs
                .chunks(4)
                .map(|c| {
                    let r = (0..c.len()).map(|_| rewards.random::<f64>()).collect();
                    Group::new(c[0].context.clone(), c.iter().map(|s| s.output.clone()).collect(), r)
                        .and_then(Group::with_advantages)
                        .expect("valid group")
                })
                .collect();
            worst[2] = worst[2].max(worst_error(&inst, &inst.seqs, |m| {
                grpo_batch(m, &groups, &grpo, GRPO_EPS, &hl, None).expect("valid batch")
            }));
        }
        for (name, w) in ["dpo", "kto", "grpo"].into_iter().zip(worst) {
            out.push(GradientStats {
                objective: name.into(),
                humanline: hl_name.into(),
                instances,
                max_relative_error: w,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl TheoryReport {
    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }
}

pub const GRADIENT_TOLERANCE: f64 = 1e-6;
pub const LIMIT_K: f64 = 1e5;
pub const CLIP_EPS: f64 = 0.2;

fn timed(name: &str, f: impl FnOnce() -> (bool, String)) -> Check {
    let start = Instant::now();
    let (passed, detail) = f();
    let seconds = start.elapsed().as_secs_f64();
    log::info!("{} {name}: {detail}", if passed { "pass" } else { "FAIL" });
    Check {
        name: name.into(),
        passed,
        detail,
        seconds,
    }
}

pub fn run_suite(cfg: &TheoryConfig, seed: u64) -> TheoryReport {
    let trials = cfg.trials as usize;
    let mut checks = vec![
        timed("gamble-utility", || {
            let (f, e) = gamble_utility();
            (f == 60.0 && e == Exact::from_integer(60), format!("float {f}, exact {e}"))
        }),
        timed("injected-weights", || {
            let (a, b) = injected_weights();
            (a == Exact::new(1, 2) && b == Exact::new(3, 10), format!("{a}, {b}"))
        }),
        timed("utility-gap-bound", || {
            let s = pinsker_sweep(1000, seed);
            (s.violations == 0, format!("{} violations in {} trials, tightest {:.4}", s.violations, s.trials, s.tightest))
        }),
    ];
    checks.push(timed("rejection-law", || {
        let mut rng = Streams::new(seed).stream(Purpose::Beta, 3);
        let mut worst: f64 = 0.0;
        let mut chi_min = f64::INFINITY;
        for gamma in [0.3, 0.6, 1.0] {
            for ratio in [0.05, 0.3, 0.7, 1.0] {
                worst = worst.max(acceptance_rate(gamma, ratio, trials, &mut rng).z_score());
            }
            chi_min = chi_min.min(accepted_distribution(gamma, 8, trials, seed).p_value);
        }
        (worst <= 4.0 && chi_min > 0.01, format!("max |z| {worst:.2}, min chi-square p {chi_min:.4}"))
    }));
    checks.push(timed("threshold-concentration", || {
        let s = threshold_concentration(LIMIT_K, CLIP_EPS, trials, seed);
        (
            s.relative_error() <= 0.1,
            format!("var {:.4e} vs {:.4e} ({:.2}% off)", s.empirical_var, s.predicted_var, 100.0 * s.relative_error()),
        )
    }));
    checks.push(timed("rejection-limit-is-clipping", || {
        let s = rejection_matches_clipping(LIMIT_K, CLIP_EPS, trials, seed, cfg.corrupt_clamp);
        (
            s.fraction() >= 0.995,
            format!("{:.4}% agreement over {} tokens ({} clipped)", 100.0 * s.fraction(), s.tokens, s.clipped),
        )
    }));
    checks.push(timed("gradients", || {
        let stats = gradient_checks(cfg.instances, seed);
        let worst = stats.iter().map(|s| s.max_relative_error).fold(0.0, f64::max);
        let detail = stats
            .iter()
            .map(|s| format!("{}/{} {:.1e}", s.objective, s.humanline, s.max_relative_error))
            .collect::<Vec<_>>()
            .join(", ");
        (worst <= GRADIENT_TOLERANCE, detail)
    }));
    checks.push(timed("two-sample-advantages", || {
        let v = two_sample_advantage_violations(10_000, seed);
        (v == 0, format!("{v} violations"))
    }));
    TheoryReport { seed, checks }
}
