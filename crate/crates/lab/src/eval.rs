//! Winrate and pass-rate against the true reward.
//!
//! Both policies answer the same held-out contexts with the same random
//! draws, so swapping them turns every win into a loss and the two
//! winrates sum to exactly one.

use std::fs;
use std::path::{Path, PathBuf};

use humanline_core::data::verifiable_reward;
use humanline_core::{Policy64, Purpose, RewardSource, SamplingParams, Streams};
use serde::{Deserialize, Serialize};

use crate::config::{expand, Run};
use crate::error::{LabError, Result};
use crate::runner::{checkpoint_path, init_checkpoint_path};
use crate::stats::Summary;

/// Eval substream reserved for held-out contexts and answers; index 0 is
/// the trainer's own evaluation set.
const HELD_OUT: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Ties count one half.
    pub winrate: f64,
    /// Exact-match rate of the first policy.
    pub pass_rate: f64,
    pub contexts: usize,
}

pub fn compare(
    policy: &Policy64,
    baseline: &Policy64,
    reward: &RewardSource,
    params: &SamplingParams,
    contexts: usize,
    seed: u64,
) -> Result<Comparison> {
    if contexts == 0 {
        return Err(LabError::Config("eval.contexts must be >= 1".into()));
    }
    let streams = Streams::new(seed);
    let mut ctx_rng = streams.keyed(Purpose::Eval, &[HELD_OUT]);
    let (mut wins, mut passes) = (0.0, 0usize);
    for i in 0..contexts {
        let x = reward.task.sample_context(&mut ctx_rng);
        let key = [HELD_OUT, i as u64];
        let a = policy.sample(&x, params, &mut streams.keyed(Purpose::Eval, &key))?;
        let b = baseline.sample(&x, params, &mut streams.keyed(Purpose::Eval, &key))?;
        let (ra, rb) = (reward.score(&x, &a.output), reward.score(&x, &b.output));
        wins += if ra > rb {
            1.0
        } else if ra == rb {
            0.5
        } else {
            0.0
        };
        passes += usize::from(verifiable_reward(&reward.task, &x, &a.output).accuracy);
    }
    Ok(Comparison {
        winrate: wins / contexts as f64,
        pass_rate: passes as f64 / contexts as f64,
        contexts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEval {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub baseline: PathBuf,
    #[serde(flatten)]
    pub result: Comparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub seeds: Vec<SeedEval>,
    pub winrate: Summary,
    pub pass_rate: Summary,
    /// Contexts judged across all seeds.
    pub samples: usize,
}

impl EvalReport {
    pub fn new(label: String, seeds: Vec<SeedEval>) -> Self {
        let w: Vec<f64> = seeds.iter().map(|s| s.result.winrate).collect();
        let p: Vec<f64> = seeds.iter().map(|s| s.result.pass_rate).collect();
        Self {
            label,
            winrate: Summary::of(&w),
            pass_rate: Summary::of(&p),
            samples: seeds.iter().map(|s| s.result.contexts).sum(),
            seeds,
        }
    }
}

pub fn report_path(out: &Path, label: &str) -> PathBuf {
    out.join(format!("eval-{label}.json"))
}

fn load(path: &Path) -> Result<Policy64> {
    if !path.exists() {
        return Err(LabError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Policy64::load(path)?)
}

/// Evaluates a run's checkpoints against their baselines, one entry per
/// seed. Command-line templates take precedence over the config's.
pub fn eval_run(
    run: &Run,
    only_seed: Option<u64>,
    out: &Path,
    checkpoint: Option<&str>,
    baseline: Option<&str>,
) -> Result<EvalReport> {
    let cfg = &run.config;
    let params = cfg.eval.params()?;
    let reward = cfg.reward_source();
    let checkpoint = checkpoint.or(cfg.eval.checkpoint.as_deref());
    let baseline = baseline.or(cfg.eval.baseline.as_deref());
    let seeds: Vec<u64> = cfg.seeds.iter().copied().filter(|&s| only_seed.is_none_or(|o| o == s)).collect();
    let mut per_seed = Vec::with_capacity(seeds.len());
    for seed in seeds {
        let a = checkpoint.map_or_else(|| checkpoint_path(out, &run.label, seed), |t| expand(t, seed, &run.label));
        let b = baseline.map_or_else(|| init_checkpoint_path(out, &run.label, seed), |t| expand(t, seed, &run.label));
        let result = compare(&load(&a)?, &load(&b)?, &reward, &params, cfg.eval.contexts, seed)?;
        per_seed.push(SeedEval {
            seed,
            checkpoint: a,
            baseline: b,
            result,
        });
    }
    if per_seed.len() < 2 {
        log::warn!("{}: standard error needs at least two seeds", run.label);
    }
    Ok(EvalReport::new(run.label.clone(), per_seed))
}

pub fn write_report(report: &EvalReport, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(LabError::io(out))?;
    let path = report_path(out, &report.label);
    let text = serde_json::to_string_pretty(report)? + "\n";
    fs::write(&path, text).map_err(LabError::io(&path))?;
    Ok(path)
}
