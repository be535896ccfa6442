//! DPO, KTO and GRPO losses.
//!
//! The token-level functions work on per-token log-probabilities and return
//! `dL/d log pi_theta` for every token. The batch functions evaluate a policy
//! on whole sequences and push those token gradients back onto the logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::humanline::{
    gate_log_ratios, humanline_sample_mask, sequence_ratio_bounds, HumanlineConfig, HumanlineMode,
};
use crate::policy::{DetachMask, GradTape, Policy, Sequence, TokenId};
use crate::rng::Rng;
use crate::scalar::{log_sigmoid, sigmoid, Scalar};

/// GRPO clip radius when the reference moves with the policy.
pub const GRPO_EPSILON: f64 = 0.15;
/// GRPO clip radius when the reference is frozen for the whole run.
pub const GRPO_EPSILON_FROZEN_REFERENCE: f64 = 0.5;
/// Standard deviations below this give all-zero advantages.
pub const ADVANTAGE_STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Dpo,
    Kto,
    Grpo,
}

/// Which model anchors the GRPO KL penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KlBaseline {
    #[default]
    Reference,
    Initial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub objective: Objective,
    pub beta: f64,
    pub desirable_weight: f64,
    pub undesirable_weight: f64,
    /// GRPO clip radius; unset picks a default from whether the reference moves.
    pub epsilon: Option<f64>,
    pub length_normalized: bool,
    pub kl_baseline: KlBaseline,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::dpo()
    }
}

impl LossConfig {
    pub fn dpo() -> Self {
        Self {
            objective: Objective::Dpo,
            beta: 0.1,
            desirable_weight: 1.0,
            undesirable_weight: 1.0,
            epsilon: None,
            length_normalized: false,
            kl_baseline: KlBaseline::Reference,
        }
    }

    pub fn kto() -> Self {
        Self {
            objective: Objective::Kto,
            beta: 0.25,
            desirable_weight: 1.1,
            ..Self::dpo()
        }
    }

    pub fn grpo() -> Self {
        Self {
            objective: Objective::Grpo,
            beta: 0.01,
            ..Self::dpo()
        }
    }

    pub fn for_objective(objective: Objective) -> Self {
        match objective {
            Objective::Dpo => Self::dpo(),
            Objective::Kto => Self::kto(),
            Objective::Grpo => Self::grpo(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("beta", self.beta)?;
        positive("desirable_weight", self.desirable_weight)?;
        positive("undesirable_weight", self.undesirable_weight)?;
        if let Some(eps) = self.epsilon {
            positive("epsilon", eps)?;
        }
        Ok(())
    }

    pub fn clip_epsilon(&self, reference_frozen: bool) -> f64 {
        self.epsilon.unwrap_or(if reference_frozen {
            GRPO_EPSILON_FROZEN_REFERENCE
        } else {
            GRPO_EPSILON
        })
    }
}

/// A sequence-level reward and its derivative with respect to each token's
/// policy log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceReward<T> {
    pub value: T,
    pub grad: Vec<T>,
    pub clipped: usize,
}

/// Sum of (possibly clamped) token log-ratios, optionally divided by the
/// number of tokens with a nonzero reward.
pub fn sequence_reward<T: Scalar>(
    policy_logps: &[T],
    reference_logps: &[T],
    humanline: &HumanlineConfig,
    detached: Option<&DetachMask>,
    length_normalized: bool,
) -> Result<SequenceReward<T>> {
    check_len(policy_logps.len(), reference_logps.len())?;
    let raw: Vec<T> = policy_logps.iter().zip(reference_logps).map(|(&p, &r)| p - r).collect();
    let gated = gate_log_ratios(&raw, humanline, detached)?;
    let denom = if length_normalized {
        T::lit(gated.values.iter().filter(|v| **v != T::zero()).count().max(1) as f64)
    } else {
        T::one()
    };
    let value = gated.values.iter().copied().sum::<T>() / denom;
    let grad = gated
        .pass
        .iter()
        .map(|&p| if p { denom.recip() } else { T::zero() })
        .collect();
    let clipped = match humanline.mode {
        HumanlineMode::Clipping => raw
            .iter()
            .zip(&gated.values)
            .filter(|(a, b)| a != b)
            .count(),
        _ => 0,
    };
    Ok(SequenceReward { value, grad, clipped })
}

/// `-log sigmoid(beta (r_w - r_l))` and its derivatives in `r_w` and `r_l`.
pub fn dpo_from_rewards<T: Scalar>(chosen: T, rejected: T, beta: T) -> (T, T, T) {
    let u = beta * (chosen - rejected);
    let loss = -log_sigmoid(u);
    let d = -beta * sigmoid(-u);
    (loss, d, -d)
}

/// Batch-shared KTO reference point: mean KL-pair reward, floored at zero.
pub fn kto_reference_point<T: Scalar>(kl_rewards: &[T]) -> Result<T> {
    if kl_rewards.is_empty() {
        return Err(Error::InvalidParameter("KTO needs at least one KL pair".into()));
    }
    let mean = kl_rewards.iter().copied().sum::<T>() / T::lit(kl_rewards.len() as f64);
    Ok(mean.max(T::zero()))
}

/// Per-example KTO loss and its derivative in the example's reward, with
/// the reference point held fixed.
pub fn kto_from_reward<T: Scalar>(reward: T, z0: T, desirable: bool, cfg: &LossConfig) -> (T, T) {
    let beta = T::lit(cfg.beta);
    if desirable {
        let w = T::lit(cfg.desirable_weight);
        let s = sigmoid(beta * (reward - z0));
        (w * (T::one() - s), -w * beta * s * (T::one() - s))
    } else {
        let w = T::lit(cfg.undesirable_weight);
        let s = sigmoid(beta * (z0 - reward));
        (w * (T::one() - s), w * beta * s * (T::one() - s))
    }
}

/// Standardised rewards using the population standard deviation.
///
/// Two distinct rewards always give exactly `(+1, -1)` in some order.
pub fn group_advantages<T: Scalar>(rewards: &[T]) -> Result<Vec<T>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::InvalidParameter(format!("group needs >= 2 rewards, got {g}")));
    }
    if g == 2 {
        let sign = |d: T| {
            if d > T::zero() {
                T::one()
            } else if d < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        };
        let d = rewards[0] - rewards[1];
        return Ok(vec![sign(d), sign(-d)]);
    }
    let n = T::lit(g as f64);
    let mean = rewards.iter().copied().sum::<T>() / n;
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / n;
    let std = var.sqrt();
    if std < T::lit(ADVANTAGE_STD_FLOOR) {
        return Ok(vec![T::zero(); g]);
    }
    Ok(rewards.iter().map(|&r| (r - mean) / std).collect())
}

/// Per-sequence GRPO sums; the batch loss divides by the total token count.
#[derive(Debug, Clone, PartialEq)]
pub struct GrpoTokens<T> {
    pub loss_sum: T,
    pub kl_sum: T,
    pub weighted_adv_sum: T,
    pub clipped: usize,
    pub grad: Vec<T>,
}

/// Token-level GRPO surrogate plus the `exp(d) - d - 1` KL estimate, with
/// `d = log pi_0 - log pi_theta`.
///
/// Humanline gating only touches the ratio; the KL term always sees raw
/// log-probabilities, though a detached token contributes no gradient at all.
#[allow(clippy::too_many_arguments)]
pub fn grpo_tokens<T: Scalar>(
    policy_logps: &[T],
    reference_logps: &[T],
    baseline_logps: &[T],
    advantage: T,
    epsilon: T,
    beta: T,
    humanline: &HumanlineConfig,
    detached: Option<&DetachMask>,
) -> Result<GrpoTokens<T>> {
    check_len(policy_logps.len(), reference_logps.len())?;
    check_len(policy_logps.len(), baseline_logps.len())?;
    let raw: Vec<T> = policy_logps.iter().zip(reference_logps).map(|(&p, &r)| p - r).collect();
    let gated = gate_log_ratios(&raw, humanline, detached)?;
    let (lo, hi) = (T::one() - epsilon, T::one() + epsilon);
    let mut out = GrpoTokens {
        loss_sum: T::zero(),
        kl_sum: T::zero(),
        weighted_adv_sum: T::zero(),
        clipped: 0,
        grad: Vec::with_capacity(raw.len()),
    };
    for t in 0..raw.len() {
        let r = gated.values[t].exp();
        let unclipped = advantage * r;
        let inside = r >= lo && r <= hi;
        let clipped = advantage * r.max(lo).min(hi);
        // d(-min(..))/d log pi: only the selected branch carries gradient,
        // and the clamped branch is flat outside its range.
        let surrogate_grad = if unclipped <= clipped || inside {
            -advantage * r
        } else {
            T::zero()
        };
        if !inside {
            out.clipped += 1;
        }
        let d = baseline_logps[t] - policy_logps[t];
        let kl = d.exp() - d - T::one();
        let kl_grad = beta * (T::one() - d.exp());
        let detached_token = detached.is_some_and(|m| m.is_detached(t));
        let mut g = if gated.pass[t] { surrogate_grad } else { T::zero() };
        if !detached_token {
            g += kl_grad;
        }
        out.loss_sum += -unclipped.min(clipped) + beta * kl;
        out.kl_sum += kl;
        out.weighted_adv_sum += unclipped.abs();
        out.grad.push(g);
    }
    Ok(out)
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::LengthMismatch { expected, got });
    }
    Ok(())
}

/// A preference pair sharing one context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub context: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
}

impl Pair {
    pub fn chosen_seq(&self) -> Sequence {
        Sequence::new(self.context.clone(), self.chosen.clone())
    }

    pub fn rejected_seq(&self) -> Sequence {
        Sequence::new(self.context.clone(), self.rejected.clone())
    }
}

/// An unpaired example labelled desirable or undesirable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeled {
    pub seq: Sequence,
    pub desirable: bool,
}

/// Outputs sampled for one context with their rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Group<T> {
    pub context: Vec<TokenId>,
    pub outputs: Vec<Vec<TokenId>>,
    pub rewards: Vec<T>,
    pub advantages: Option<Vec<T>>,
}

impl<T: Scalar> Group<T> {
    pub fn new(context: Vec<TokenId>, outputs: Vec<Vec<TokenId>>, rewards: Vec<T>) -> Result<Self> {
        check_len(outputs.len(), rewards.len())?;
        Ok(Self {
            context,
            outputs,
            rewards,
            advantages: None,
        })
    }

    pub fn with_advantages(mut self) -> Result<Self> {
        self.advantages = Some(group_advantages(&self.rewards)?);
        Ok(self)
    }

    pub fn sequence(&self, i: usize) -> Sequence {
        Sequence::new(self.context.clone(), self.outputs[i].clone())
    }
}

/// Models a loss is evaluated against. `baseline` anchors the GRPO KL term.
pub struct Models<'a, T> {
    pub policy: &'a Policy<T>,
    pub reference: &'a Policy<T>,
    pub baseline: &'a Policy<T>,
}

impl<T> Clone for Models<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Models<'_, T> {}

impl<'a, T: Scalar> Models<'a, T> {
    pub fn new(policy: &'a Policy<T>, reference: &'a Policy<T>) -> Self {
        Self {
            policy,
            reference,
            baseline: reference,
        }
    }

    pub fn with_baseline(mut self, baseline: &'a Policy<T>) -> Self {
        self.baseline = baseline;
        self
    }
}

/// Summary statistics of a batch loss, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossStats {
    /// Mean sequence reward margin (DPO), mean reward (KTO) or mean advantage
    /// magnitude (GRPO).
    pub mean_reward: f64,
    /// KL estimate: KTO reference point, GRPO token-mean KL, DPO mean of
    /// both sequence rewards.
    pub kl: f64,
    pub clipped_tokens: usize,
    pub detached_tokens: usize,
    pub tokens: usize,
    pub sequences: usize,
}

pub struct BatchLoss<T> {
    pub loss: T,
    pub grad: GradTape<T>,
    pub stats: LossStats,
}

/// Per-token policy and reference log-probabilities plus any humanline mask.
struct Evaluated<T> {
    seq: Sequence,
    policy: Vec<T>,
    reference: Vec<T>,
    mask: Option<DetachMask>,
}

fn evaluate<T: Scalar>(
    models: &Models<'_, T>,
    seq: Sequence,
    humanline: &HumanlineConfig,
    rng: &mut Option<&mut Rng>,
) -> Result<Evaluated<T>> {
    let policy = models.policy.log_prob(&seq)?;
    let reference = models.reference.log_prob(&seq)?;
    let mask = match humanline.mode {
        HumanlineMode::Sampling => {
            let rng = rng
                .as_deref_mut()
                .ok_or_else(|| Error::InvalidParameter("humanline sampling needs an RNG".into()))?;
            let bounds = sequence_ratio_bounds(models.policy, models.reference, &seq);
            let raw: Vec<T> = policy.iter().zip(&reference).map(|(&p, &r)| p - r).collect();
            Some(humanline_sample_mask(&raw, &bounds, &humanline.beta_params(), rng)?)
        }
        _ => None,
    };
    Ok(Evaluated {
        seq,
        policy,
        reference,
        mask,
    })
}

fn require_nonempty(n: usize, what: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidParameter(format!("empty {what} batch")));
    }
    Ok(())
}

/// Mean DPO loss over a batch of pairs.
pub fn dpo_batch<T: Scalar>(
    models: &Models<'_, T>,
    pairs: &[Pair],
    cfg: &LossConfig,
    humanline: &HumanlineConfig,
    mut rng: Option<&mut Rng>,
) -> Result<BatchLoss<T>> {
    require_nonempty(pairs.len(), "DPO")?;
    let spec = *models.policy.spec();
    let mut tape = GradTape::zeros(&spec);
    let mut stats = LossStats::default();
    let scale = T::lit(pairs.len() as f64).recip();
    let beta = T::lit(cfg.beta);
    let mut loss = T::zero();
    let mut margin = 0.0;
    let mut rewards = 0.0;
    for pair in pairs {
        let w = evaluate(models, pair.chosen_seq(), humanline, &mut rng)?;
        let l = evaluate(models, pair.rejected_seq(), humanline, &mut rng)?;
        let rw = sequence_reward(&w.policy, &w.reference, humanline, w.mask.as_ref(), cfg.length_normalized)?;
        let rl = sequence_reward(&l.policy, &l.reference, humanline, l.mask.as_ref(), cfg.length_normalized)?;
        let (value, dw, dl) = dpo_from_rewards(rw.value, rl.value, beta);
        loss += value * scale;
        margin += (rw.value - rl.value).f64();
        rewards += (rw.value + rl.value).f64();
        for (ev, sr, d) in [(&w, &rw, dw), (&l, &rl, dl)] {
            let weights: Vec<T> = sr.grad.iter().map(|&g| g * d * scale).collect();
            models.policy.accumulate_logprob_grad(&ev.seq, &weights, None, &mut tape)?;
            stats.clipped_tokens += sr.clipped;
            stats.detached_tokens += ev.mask.as_ref().map_or(0, DetachMask::count_detached);
            stats.tokens += ev.seq.len();
        }
    }
    stats.sequences = 2 * pairs.len();
    stats.mean_reward = margin / pairs.len() as f64;
    stats.kl = rewards / stats.sequences as f64;
    Ok(BatchLoss { loss, grad: tape, stats })
}

/// Detached KTO reference point from mismatched context/output sequences.
pub fn kto_batch_reference_point<T: Scalar>(
    models: &Models<'_, T>,
    kl_pairs: &[Sequence],
    cfg: &LossConfig,
    humanline: &HumanlineConfig,
    mut rng: Option<&mut Rng>,
) -> Result<T> {
    require_nonempty(kl_pairs.len(), "KTO KL")?;
    let mut kl_rewards = Vec::with_capacity(kl_pairs.len());
    for seq in kl_pairs {
        let e = evaluate(models, seq.clone(), humanline, &mut rng)?;
        let r = sequence_reward(&e.policy, &e.reference, humanline, e.mask.as_ref(), cfg.length_normalized)?;
        kl_rewards.push(r.value);
    }
    kto_reference_point(&kl_rewards)
}

/// Mean KTO loss over labelled examples. `kl_pairs` are mismatched
/// context/output sequences used only for the detached reference point.
pub fn kto_batch<T: Scalar>(
    models: &Models<'_, T>,
    examples: &[Labeled],
    kl_pairs: &[Sequence],
    cfg: &LossConfig,
    humanline: &HumanlineConfig,
    mut rng: Option<&mut Rng>,
) -> Result<BatchLoss<T>> {
    require_nonempty(examples.len(), "KTO")?;
    let z0 = kto_batch_reference_point(models, kl_pairs, cfg, humanline, rng.as_deref_mut())?;
    kto_batch_with_reference_point(models, examples, z0, cfg, humanline, rng)
}

/// KTO loss with the reference point supplied and held fixed.
pub fn kto_batch_with_reference_point<T: Scalar>(
    models: &Models<'_, T>,
    examples: &[Labeled],
    z0: T,
    cfg: &LossConfig,
    humanline: &HumanlineConfig,
    mut rng: Option<&mut Rng>,
) -> Result<BatchLoss<T>> {
    require_nonempty(examples.len(), "KTO")?;
    let spec = *models.policy.spec();
    let mut tape = GradTape::zeros(&spec);
    let mut stats = LossStats::default();
    let scale = T::lit(examples.len() as f64).recip();
    let mut loss = T::zero();
    let mut reward_sum = 0.0;
    for ex in examples {
        let e = evaluate(models, ex.seq.clone(), humanline, &mut rng)?;
        let sr = sequence_reward(&e.policy, &e.reference, humanline, e.mask.as_ref(), cfg.length_normalized)?;
        let (value, d) = kto_from_reward(sr.value, z0, ex.desirable, cfg);
        loss += value * scale;
        reward_sum += sr.value.f64();
        let weights: Vec<T> = sr.grad.iter().map(|&g| g * d * scale).collect();
        models.policy.accumulate_logprob_grad(&e.seq, &weights, None, &mut tape)?;
        stats.clipped_tokens += sr.clipped;
        stats.detached_tokens += e.mask.as_ref().map_or(0, DetachMask::count_detached);
        stats.tokens += e.seq.len();
    }
    stats.sequences = examples.len();
    stats.mean_reward = reward_sum / examples.len() as f64;
    stats.kl = z0.f64();
    Ok(BatchLoss { loss, grad: tape, stats })
}

/// GRPO loss averaged over every output token in the batch.
pub fn grpo_batch<T: Scalar>(
    models: &Models<'_, T>,
    groups: &[Group<T>],
    cfg: &LossConfig,
    epsilon: f64,
    humanline: &HumanlineConfig,
    mut rng: Option<&mut Rng>,
) -> Result<BatchLoss<T>> {
    require_nonempty(groups.len(), "GRPO")?;
    let total_tokens: usize = groups.iter().flat_map(|g| g.outputs.iter()).map(Vec::len).sum();
    if total_tokens == 0 {
        return Err(Error::InvalidParameter("GRPO batch has no tokens".into()));
    }
    let scale = T::lit(total_tokens as f64).recip();
    let (epsilon, beta) = (T::lit(epsilon), T::lit(cfg.beta));
    let spec = *models.policy.spec();
    let mut tape = GradTape::zeros(&spec);
    let mut stats = LossStats::default();
    let mut loss = T::zero();
    let mut kl = T::zero();
    let mut adv_abs = 0.0;
    for group in groups {
        let adv = group
            .advantages
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("group is missing advantages".into()))?;
        check_len(group.outputs.len(), adv.len())?;
        for (i, &a) in adv.iter().enumerate() {
            let e = evaluate(models, group.sequence(i), humanline, &mut rng)?;
            let base = models.baseline.log_prob(&e.seq)?;
            let tok = grpo_tokens(&e.policy, &e.reference, &base, a, epsilon, beta, humanline, e.mask.as_ref())?;
            loss += tok.loss_sum * scale;
            kl += tok.kl_sum * scale;
            adv_abs += a.abs().f64();
            let weights: Vec<T> = tok.grad.iter().map(|&g| g * scale).collect();
            models.policy.accumulate_logprob_grad(&e.seq, &weights, None, &mut tape)?;
            stats.clipped_tokens += tok.clipped;
            stats.detached_tokens += e.mask.as_ref().map_or(0, DetachMask::count_detached);
            stats.tokens += e.seq.len();
            stats.sequences += 1;
        }
    }
    stats.mean_reward = adv_abs / stats.sequences as f64;
    stats.kl = kl.f64();
    Ok(BatchLoss { loss, grad: tape, stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn off() -> HumanlineConfig {
        HumanlineConfig::off()
    }

    #[test]
    fn sequence_reward_examples() {
        let zero = sequence_reward(&[-1.0, -2.0], &[-1.0, -2.0], &off(), None, false).unwrap();
        assert_eq!(zero.value, 0.0);
        let hl = HumanlineConfig::default();
        let r = sequence_reward(&[2.0, -2.0, 0.5], &[0.0, 0.0, 0.0], &hl, None, false).unwrap();
        assert_eq!(r.value, 0.5);
        assert_eq!(r.grad, vec![0.0, 0.0, 1.0]);
        assert_eq!(r.clipped, 2);
        let s = sequence_reward(&[1.0, 1.0], &[0.0, 0.0], &off(), None, false).unwrap();
        assert_eq!(s.value, 2.0);
        assert!(sequence_reward(&[1.0], &[0.0, 0.0], &off(), None, false).is_err());
    }

    #[test]
    fn length_normalisation_counts_nonzero_tokens() {
        let r = sequence_reward(&[1.0, 0.0, 3.0], &[0.0, 0.0, 0.0], &off(), None, true).unwrap();
        assert_eq!(r.value, 2.0);
        assert_eq!(r.grad, vec![0.5, 0.5, 0.5]);
        let z = sequence_reward(&[0.0, 0.0], &[0.0, 0.0], &off(), None, true).unwrap();
        assert_eq!(z.value, 0.0);
    }

    #[test]
    fn detached_tokens_keep_value_lose_gradient() {
        let cfg = HumanlineConfig {
            mode: HumanlineMode::Sampling,
            ..HumanlineConfig::default()
        };
        let mask = DetachMask(vec![true, false]);
        let r = sequence_reward(&[3.0, 1.0], &[0.0, 0.0], &cfg, Some(&mask), false).unwrap();
        assert_eq!(r.value, 4.0);
        assert_eq!(r.grad, vec![0.0, 1.0]);
    }

    #[test]
    fn dpo_examples() {
        let (l, _, _) = dpo_from_rewards(0.3, 0.3, 0.1);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let (l, dw, dl) = dpo_from_rewards(3f64.ln(), 0.0, 1.0);
        assert!((l + 0.75f64.ln()).abs() < 1e-15);
        assert!((dw + 0.25).abs() < 1e-15);
        assert_eq!(dw, -dl);
    }

    #[test]
    fn dpo_swap_negates_argument() {
        for &(a, b) in &[(0.3, -1.2), (2.0, 1.0), (-0.5, 0.5)] {
            let (l, _, _) = dpo_from_rewards(a, b, 0.7f64);
            let (s, _, _) = dpo_from_rewards(b, a, 0.7f64);
            let u = 0.7 * (a - b);
            assert!((l + log_sigmoid(u)).abs() < 1e-15);
            assert!((s + log_sigmoid(-u)).abs() < 1e-15);
        }
    }

    #[test]
    fn kto_examples() {
        let cfg = LossConfig::kto();
        let (l, _) = kto_from_reward(0.4, 0.4, true, &cfg);
        assert!((l - cfg.desirable_weight / 2.0).abs() < 1e-15);
        let (l, _) = kto_from_reward(0.4, 0.4, false, &cfg);
        assert!((l - cfg.undesirable_weight / 2.0).abs() < 1e-15);
        assert_eq!(kto_reference_point(&[-0.1, -0.5]).unwrap(), 0.0);
        assert!((kto_reference_point(&[0.2, 0.4f64]).unwrap() - 0.3).abs() < 1e-15);
        assert!(kto_reference_point::<f64>(&[]).is_err());
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[1.0, 0.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(group_advantages(&[0.9, 0.7]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(group_advantages(&[0.5, 0.5]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(group_advantages(&[2.0; 5]).unwrap(), vec![0.0; 5]);
        assert_eq!(group_advantages(&[3.0, 1.0, 1.0, 3.0]).unwrap(), vec![1.0, -1.0, -1.0, 1.0]);
        assert!(group_advantages(&[1.0]).is_err());
    }

    #[test]
    fn grpo_token_examples() {
        let a = 0.7f64;
        let t = grpo_tokens(&[-1.0, -2.0], &[-1.0, -2.0], &[-1.0, -2.0], a, 0.15, 0.04, &off(), None).unwrap();
        assert!((t.loss_sum / 2.0 + a).abs() < 1e-15);
        assert_eq!(t.kl_sum, 0.0);

        let lr = 1.5f64.ln();
        let t = grpo_tokens(&[lr], &[0.0], &[lr], 1.0, 0.15, 0.0, &off(), None).unwrap();
        assert!((t.loss_sum + 1.15).abs() < 1e-12);
        assert_eq!(t.grad, vec![0.0]);
        assert_eq!(t.clipped, 1);
    }

    #[test]
    fn grpo_kl_ignores_humanline_clip() {
        let hl = HumanlineConfig::default();
        // log-ratio 3 is clamped, so the surrogate is flat; the KL term is not.
        let t = grpo_tokens(&[0.0], &[-3.0], &[-3.0], 1.0, 0.15, 0.5, &hl, None).unwrap();
        let d: f64 = -3.0;
        assert!((t.kl_sum - (d.exp() - d - 1.0)).abs() < 1e-15);
        assert!((t.grad[0] - 0.5 * (1.0 - d.exp())).abs() < 1e-15);
    }

    #[test]
    fn degenerate_group_has_no_surrogate_gradient() {
        let adv = group_advantages(&[0.3, 0.3, 0.3]).unwrap();
        for &a in &adv {
            let t = grpo_tokens(&[-0.2, -1.0], &[-0.9, -0.1], &[-0.2, -1.0], a, 0.15, 0.0, &off(), None).unwrap();
            assert_eq!(t.grad, vec![0.0, 0.0]);
        }
    }

    #[test]
    fn epsilon_default_depends_on_reference() {
        let c = LossConfig::grpo();
        assert_eq!(c.clip_epsilon(true), 0.5);
        assert_eq!(c.clip_epsilon(false), 0.15);
        let pinned = LossConfig {
            epsilon: Some(0.2),
            ..c
        };
        assert_eq!(pinned.clip_epsilon(true), 0.2);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::dpo().validate().is_ok());
        let bad = LossConfig {
            beta: 0.0,
            ..LossConfig::dpo()
        };
        assert!(bad.validate().is_err());
    }
}
