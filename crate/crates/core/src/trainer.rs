//! Optimisation loops for offline, online and humanline variants.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{expected_reward, offline_groups, online_round, unpaired_examples, PreferenceRecord, RewardSource, SamplingConfig};
use crate::error::{Error, Result};
use crate::humanline::{sync_schedule, HumanlineConfig, SyncPeriod};
use crate::objectives::{dpo_batch, grpo_batch, kto_batch, BatchLoss, Group, KlBaseline, LossConfig, Models, Objective};
use crate::policy::{GradTape, Policy, SamplingParams, TokenId};
use crate::rng::{Purpose, Streams};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub max_grad_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
            weight_decay: 1e-2,
            warmup_fraction: 0.1,
            max_grad_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be > 0 and weight_decay >= 0");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    /// Learning rate at 1-based `step`: linear warmup, then constant.
    pub fn lr_at(&self, step: u64, total_steps: u64) -> f64 {
        let warmup = (self.warmup_fraction * total_steps as f64).ceil() as u64;
        if warmup == 0 || step >= warmup {
            self.lr
        } else {
            self.lr * step as f64 / warmup as f64
        }
    }
}

/// Decoupled-weight-decay Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: OptimizerConfig,
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: OptimizerConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - b1.powi(self.t as i32);
        let bc2 = T::one() - b2.powi(self.t as i32);
        let (lr, decay, eps) = (T::lit(lr), T::one() - T::lit(lr * c.weight_decay), T::lit(c.eps));
        for i in 0..params.len() {
            let g = grad[i];
            params[i] *= decay;
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Rescales `grad` so its global norm is at most `max_norm` and returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grad: &mut GradTape<T>, max_norm: f64) -> T {
    let norm = grad.norm();
    let max = T::lit(max_norm);
    if norm > max {
        grad.scale(max / (norm + T::lit(1e-6)));
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "offline")]
    Offline,
    #[serde(rename = "online")]
    Online,
    #[serde(rename = "offline+humanline")]
    OfflineHumanline,
    #[serde(rename = "online+humanline")]
    OnlineHumanline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Offline,
        Variant::Online,
        Variant::OfflineHumanline,
        Variant::OnlineHumanline,
    ];

    pub fn is_online(self) -> bool {
        matches!(self, Self::Online | Self::OnlineHumanline)
    }

    pub fn is_humanline(self) -> bool {
        matches!(self, Self::OfflineHumanline | Self::OnlineHumanline)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Offline => "offline",
            Self::Online => "online",
            Self::OfflineHumanline => "offline+humanline",
            Self::OnlineHumanline => "online+humanline",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub humanline: HumanlineConfig,
    /// Preference records (or groups) per step.
    pub batch_size: usize,
    pub steps: u64,
    /// Post-update syncing period for the trust-region ablation.
    pub trust_region_period: SyncPeriod,
    /// Evaluation contexts scored after every step; zero means every context.
    pub eval_contexts: usize,
    /// Consecutive steps below the initial reward that count as collapse;
    /// zero disables the check.
    pub collapse_window: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            humanline: HumanlineConfig::off(),
            batch_size: 16,
            steps: 200,
            trust_region_period: SyncPeriod::Never,
            eval_contexts: 0,
            collapse_window: 50,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.humanline.validate()?;
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::InvalidParameter("batch_size and steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Online sampling schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    /// Steps served by each freshly sampled buffer.
    pub sample_period: u64,
    pub sampling: SamplingConfig,
    /// GRPO trains on whole sampled groups instead of best/worst pairs.
    pub full_groups: bool,
    /// Cap on contexts drawn per round, as a multiple of the records needed.
    pub max_context_factor: f64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            sample_period: 1,
            sampling: SamplingConfig::default(),
            full_groups: false,
            max_context_factor: 16.0,
        }
    }
}

/// One line of the metrics JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    /// True reward of the current policy on the evaluation contexts.
    pub mean_reward: f64,
    pub grad_norm: f64,
    pub kl: f64,
    pub synced: bool,
    pub trust_region_synced: bool,
    pub variant: Variant,
    pub seed: u64,
    pub round: u64,
    pub lr: f64,
    pub batch_reward: f64,
    pub clipped_tokens: usize,
    pub detached_tokens: usize,
    pub records_seen: u64,
    pub sequences_seen: u64,
}

/// Everything mutated by training.
#[derive(Clone)]
pub struct TrainState<T> {
    pub policy: Policy<T>,
    pub reference: Policy<T>,
    pub initial: Policy<T>,
    pub optimizer: AdamW<T>,
    pub step: u64,
    pub round: u64,
    pub streams: Streams,
    pub config: TrainerConfig,
    pub variant: Variant,
    pub reward: RewardSource,
    pub eval_params: SamplingParams,
    pub eval_contexts: Vec<Vec<TokenId>>,
    pub initial_reward: f64,
    pub records_seen: u64,
    pub sequences_seen: u64,
    below_initial: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(
        policy: Policy<T>,
        config: TrainerConfig,
        variant: Variant,
        reward: RewardSource,
        eval_params: SamplingParams,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        reward.validate()?;
        let streams = Streams::new(seed);
        let eval_contexts = if config.eval_contexts == 0 {
            reward.task.all_contexts()
        } else {
            let mut rng = streams.stream(Purpose::Eval, 0);
            (0..config.eval_contexts)
                .map(|_| reward.task.sample_context(&mut rng))
                .collect()
        };
        let mut state = Self {
            reference: policy.clone(),
            initial: policy.clone(),
            optimizer: AdamW::new(config.optimizer, policy.params().len()),
            policy,
            step: 0,
            round: 0,
            streams,
            config,
            variant,
            reward,
            eval_params,
            eval_contexts,
            initial_reward: 0.0,
            records_seen: 0,
            sequences_seen: 0,
            below_initial: 0,
        };
        state.initial_reward = state.evaluate()?;
        Ok(state)
    }

    /// Exact expected true reward of the policy, averaged over the
    /// evaluation contexts.
    pub fn evaluate(&self) -> Result<f64> {
        mean_expected_reward(&self.policy, &self.reward, &self.eval_contexts, &self.eval_params)
    }

    /// True when the GRPO ratio is measured against a reference that never moves.
    pub fn reference_frozen(&self) -> bool {
        !self.variant.is_online()
            && self.config.humanline.sync_period() == SyncPeriod::Never
            && self.config.trust_region_period == SyncPeriod::Never
    }

    fn baseline(&self) -> &Policy<T> {
        match self.config.loss.kl_baseline {
            KlBaseline::Reference => &self.reference,
            KlBaseline::Initial => &self.initial,
        }
    }

    fn batch_loss(&self, batch: &Batch<'_, T>) -> Result<BatchLoss<T>> {
        let cfg = &self.config;
        let models = Models::new(&self.policy, &self.reference).with_baseline(self.baseline());
        let mut rng = self.streams.keyed(Purpose::Beta, &[self.step + 1]);
        let rng = Some(&mut rng);
        match (cfg.loss.objective, batch) {
            (Objective::Dpo, Batch::Records(recs)) => {
                let pairs: Vec<_> = recs.iter().map(PreferenceRecord::pair).collect();
                dpo_batch(&models, &pairs, &cfg.loss, &cfg.humanline, rng)
            }
            (Objective::Kto, Batch::Records(recs)) => {
                let (examples, kl) = unpaired_examples(recs);
                kto_batch(&models, &examples, &kl, &cfg.loss, &cfg.humanline, rng)
            }
            (Objective::Grpo, Batch::Records(recs)) => {
                let groups = offline_groups::<T>(recs)?;
                let eps = cfg.loss.clip_epsilon(self.reference_frozen());
                grpo_batch(&models, &groups, &cfg.loss, eps, &cfg.humanline, rng)
            }
            (Objective::Grpo, Batch::Groups(groups)) => {
                let eps = cfg.loss.clip_epsilon(self.reference_frozen());
                grpo_batch(&models, groups, &cfg.loss, eps, &cfg.humanline, rng)
            }
            (obj, Batch::Groups(_)) => Err(Error::InvalidParameter(format!(
                "{obj:?} trains on preference pairs, not groups"
            ))),
        }
    }

    /// One optimisation step: loss, backward, clip, humanline sync of the
    /// pre-update policy when due, optimizer update, then the optional
    /// post-update trust-region sync.
    pub fn train_step(&mut self, batch: Batch<'_, T>) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::InvalidParameter("empty batch".into()));
        }
        let step = self.step + 1;
        let BatchLoss { loss, mut grad, stats } = self.batch_loss(&batch)?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("loss {loss}, gradient finite: {}", grad.all_finite()),
            });
        }
        let grad_norm = clip_grad_norm(&mut grad, self.config.optimizer.max_grad_norm);

        let synced = sync_schedule(step, self.config.humanline.sync_period());
        if synced {
            self.reference.load_params(&self.policy)?;
        }
        let lr = self.config.optimizer.lr_at(step, self.config.steps);
        self.optimizer.step(self.policy.params_mut(), grad.as_slice(), lr)?;
        if !self.policy.params().iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite {
                step,
                detail: "parameters became non-finite".into(),
            });
        }
        let trust_region_synced = trust_region_sync(self, step)?;
        self.step = step;

        self.records_seen += batch.len() as u64;
        self.sequences_seen += stats.sequences as u64;
        let mean_reward = self.evaluate()?;
        self.check_collapse(mean_reward)?;
        Ok(StepMetrics {
            step,
            loss: loss.f64(),
            mean_reward,
            grad_norm: grad_norm.f64(),
            kl: stats.kl,
            synced,
            trust_region_synced,
            variant: self.variant,
            seed: self.streams.master(),
            round: self.round,
            lr,
            batch_reward: batch.mean_reward(),
            clipped_tokens: stats.clipped_tokens,
            detached_tokens: stats.detached_tokens,
            records_seen: self.records_seen,
            sequences_seen: self.sequences_seen,
        })
    }

    fn check_collapse(&mut self, reward: f64) -> Result<()> {
        let window = self.config.collapse_window;
        if window == 0 {
            return Ok(());
        }
        if reward < self.initial_reward {
            self.below_initial += 1;
        } else {
            self.below_initial = 0;
        }
        if self.below_initial >= window {
            return Err(Error::Collapse {
                step: self.step,
                reward,
                initial: self.initial_reward,
                window,
            });
        }
        Ok(())
    }
}

pub fn mean_expected_reward<T: Scalar>(
    policy: &Policy<T>,
    reward: &RewardSource,
    contexts: &[Vec<TokenId>],
    params: &SamplingParams,
) -> Result<f64> {
    if contexts.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for x in contexts {
        total += expected_reward(policy, reward, x, params)?;
    }
    Ok(total / contexts.len() as f64)
}

/// Copies the post-update policy into the reference when the ablation
/// period fires. Returns whether it did.
pub fn trust_region_sync<T: Scalar>(state: &mut TrainState<T>, step: u64) -> Result<bool> {
    let due = sync_schedule(step, state.config.trust_region_period);
    if due {
        state.reference.load_params(&state.policy)?;
    }
    Ok(due)
}

/// What a single step trains on.
#[derive(Debug, Clone, Copy)]
pub enum Batch<'a, T> {
    Records(&'a [PreferenceRecord]),
    Groups(&'a [Group<T>]),
}

impl<T: Scalar> Batch<'_, T> {
    pub fn len(&self) -> usize {
        match self {
            Self::Records(r) => r.len(),
            Self::Groups(g) => g.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn mean_reward(&self) -> f64 {
        let (sum, n) = match self {
            Self::Records(r) => r
                .iter()
                .filter_map(|r| Some(r.r_w? + r.r_l?))
                .fold((0.0, 0usize), |(s, n), v| (s + v, n + 2)),
            Self::Groups(g) => g
                .iter()
                .flat_map(|g| g.rewards.iter())
                .fold((0.0, 0usize), |(s, n), v| (s + v.f64(), n + 1)),
        };
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Trains on a fixed corpus, reshuffling at every epoch boundary.
pub fn run_offline<T: Scalar>(
    state: &mut TrainState<T>,
    records: &[PreferenceRecord],
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    if records.is_empty() {
        return Err(Error::InvalidParameter("empty dataset".into()));
    }
    let batch_size = state.config.batch_size;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    let mut epoch = 0u64;
    let mut history = Vec::with_capacity(state.config.steps as usize);
    let mut batch = Vec::with_capacity(batch_size);
    while state.step < state.config.steps {
        batch.clear();
        while batch.len() < batch_size {
            if cursor == order.len() {
                order = (0..records.len()).collect();
                order.shuffle(&mut state.streams.keyed(Purpose::Shuffle, &[epoch]));
                epoch += 1;
                cursor = 0;
            }
            batch.push(records[order[cursor]].clone());
            cursor += 1;
        }
        let m = state.train_step(Batch::Records(&batch))?;
        on_step(&m);
        history.push(m);
    }
    Ok(history)
}

const MAX_TOP_UPS: usize = 2;

/// Samples a fresh buffer from the current policy every `sample_period`
/// steps. The reference is reset to the policy at each round boundary.
pub fn run_online<T: Scalar>(
    state: &mut TrainState<T>,
    online: &OnlineConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    if online.sample_period == 0 {
        return Err(Error::InvalidParameter("sample_period must be >= 1".into()));
    }
    online.sampling.validate()?;
    let batch_size = state.config.batch_size;
    let use_groups = online.full_groups && state.config.loss.objective == Objective::Grpo;
    let mut history = Vec::with_capacity(state.config.steps as usize);
    let mut records: Vec<PreferenceRecord> = Vec::new();
    let mut groups: Vec<Group<T>> = Vec::new();
    let mut cursor = 0usize;
    while state.step < state.config.steps {
        if state.step % online.sample_period == 0 {
            state.round += 1;
            state.reference.load_params(&state.policy)?;
            let need = online.sample_period as usize * batch_size;
            let max_contexts = (need as f64 * online.max_context_factor).ceil() as usize;
            let mut key = state.round;
            let mut round = online_round(&state.policy, &state.reward, &online.sampling, &state.streams, key, need, max_contexts)?;
            // Top up with fresh contexts if the filter was too strict.
            let mut attempts = 0;
            while round.records.len() < need && attempts < MAX_TOP_UPS {
                attempts += 1;
                log::debug!(
                    "round {}: only {} of {need} pairs after {} contexts; resampling",
                    state.round,
                    round.records.len(),
                    round.contexts_sampled
                );
                key += 1 << 32;
                let more = online_round(
                    &state.policy,
                    &state.reward,
                    &online.sampling,
                    &state.streams,
                    key,
                    need - round.records.len(),
                    max_contexts,
                )?;
                round.records.extend(more.records);
                round.groups.extend(more.groups);
                round.contexts_sampled += more.contexts_sampled;
                round.filtered += more.filtered;
            }
            if round.records.is_empty() {
                if records.is_empty() {
                    return Err(Error::InvalidParameter(format!(
                        "round {}: no context produced a pair above tau after {} contexts",
                        state.round, round.contexts_sampled
                    )));
                }
                // A (near-)deterministic policy yields no pairs; keep training on
                // the previous buffer rather than stalling the step count.
                log::info!("round {}: no pairs passed the filter; reusing the previous buffer", state.round);
            } else {
                // Still short: reuse what passed, in order.
                let have = round.records.len();
                for i in have..need {
                    round.records.push(round.records[i % have].clone());
                    round.groups.push(round.groups[i % have].clone());
                }
                log::debug!(
                    "round {}: {} contexts, {:.1}% filtered",
                    state.round,
                    round.contexts_sampled,
                    100.0 * round.filtered_fraction()
                );
                records = round.records;
                groups = round
                    .groups
                    .into_iter()
                    .map(|g| Group {
                        context: g.context,
                        outputs: g.outputs,
                        rewards: g.rewards.into_iter().map(T::lit).collect(),
                        advantages: g.advantages.map(|a| a.into_iter().map(T::lit).collect()),
                    })
                    .collect();
            }
            cursor = 0;
        }
        let end = cursor + batch_size;
        let m = if use_groups {
            state.train_step(Batch::Groups(&groups[cursor..end]))?
        } else {
            state.train_step(Batch::Records(&records[cursor..end]))?
        };
        cursor = end;
        on_step(&m);
        history.push(m);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_is_linear_then_constant() {
        let c = OptimizerConfig {
            lr: 1.0,
            ..OptimizerConfig::default()
        };
        assert_eq!(c.lr_at(1, 100), 0.1);
        assert_eq!(c.lr_at(5, 100), 0.5);
        assert_eq!(c.lr_at(10, 100), 1.0);
        assert_eq!(c.lr_at(80, 100), 1.0);
    }

    #[test]
    fn zero_gradient_step_only_decays() {
        let cfg = OptimizerConfig::default();
        let mut opt = AdamW::<f64>::new(cfg, 3);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &[0.0; 3], 0.1).unwrap();
        let d = 1.0 - 0.1 * cfg.weight_decay;
        assert_eq!(p, vec![d, -2.0 * d, 0.5 * d]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        // With bias correction the first step is lr * g / (|g| + eps).
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = AdamW::<f64>::new(cfg, 2);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[2.0, -0.5], 0.1).unwrap();
        assert!((p[0] + 0.1 * 2.0 / (2.0 + 1e-5)).abs() < 1e-15);
        assert!((p[1] - 0.1 * 0.5 / (0.5 + 1e-5)).abs() < 1e-15);
    }

    #[test]
    fn variant_strings_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{v}\""));
        }
        assert!("offline+online".parse::<Variant>().is_err());
    }
}
