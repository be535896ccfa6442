//! Data generation and training for resolved runs, one thread per seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use humanline_core::data::{corpus_stem, make_offline_corpus, noised_sampler, read_records, Corpus};
use humanline_core::rng::mix;
use humanline_core::trainer::{run_offline, run_online};
use humanline_core::{
    LossConfig, OnlineConfig, Policy64, PreferenceRecord, Purpose, Streams, StepMetrics, TrainState, TrainerConfig, Variant,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{expand, Run, RunConfig, SamplerKind};
use crate::error::{LabError, Result};

/// Keeps the better sampler's training streams apart from the run's own.
const BETTER_SAMPLER_TAG: u64 = 0xbe77e5;

/// One line of a metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub label: String,
    #[serde(flatten)]
    pub metrics: StepMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub label: String,
    pub variant: Variant,
    pub seed: u64,
    pub initial_reward: f64,
    pub final_reward: f64,
    pub steps: u64,
}

pub fn metrics_path(out: &Path, label: &str, seed: u64) -> PathBuf {
    out.join(format!("metrics-{label}-seed{seed}.jsonl"))
}

pub fn checkpoint_path(out: &Path, label: &str, seed: u64) -> PathBuf {
    out.join(format!("policy-{label}-seed{seed}.json"))
}

pub fn init_checkpoint_path(out: &Path, label: &str, seed: u64) -> PathBuf {
    out.join(format!("policy-init-{label}-seed{seed}.json"))
}

pub fn init_policy(cfg: &RunConfig, seed: u64) -> Result<Policy64> {
    let spec = cfg.task.policy_spec(cfg.order())?;
    let mut rng = Streams::new(seed).stream(Purpose::Init, 0);
    Ok(Policy64::random(spec, cfg.policy.init_scale, &mut rng)?)
}

/// Identifies the corpus a config asks for: sampler kind plus a digest of
/// every setting that changes its contents.
pub fn sampler_id(cfg: &RunConfig) -> String {
    let mut data = cfg.data.clone();
    data.corpus = None;
    let key = serde_json::json!({
        "task": cfg.task,
        "reward": cfg.reward,
        "policy": cfg.policy,
        "order": cfg.order(),
        "data": data,
        "records": cfg.records(),
    });
    let digest = hex::encode(Sha256::digest(key.to_string().as_bytes()));
    format!("{}-{}", cfg.data.sampler.as_str(), &digest[..8])
}

/// Builds the policy the offline corpus is sampled from.
pub fn build_sampler(cfg: &RunConfig, seed: u64, init: &Policy64) -> Result<Policy64> {
    let streams = Streams::new(seed);
    match cfg.data.sampler {
        SamplerKind::Base => Ok(init.clone()),
        SamplerKind::Worse => Ok(noised_sampler(init, cfg.data.noise, &mut streams.stream(Purpose::Noise, 0))?),
        SamplerKind::Better => {
            let trainer = TrainerConfig {
                loss: LossConfig::grpo(),
                steps: cfg.data.pretrain_steps,
                collapse_window: 0,
                optimizer: humanline_core::OptimizerConfig {
                    lr: cfg.data.pretrain_lr,
                    ..Default::default()
                },
                ..TrainerConfig::default()
            };
            let online = OnlineConfig {
                full_groups: true,
                ..OnlineConfig::default()
            };
            let params = online.sampling.params()?;
            let mut state = TrainState::new(
                init.clone(),
                trainer,
                Variant::Online,
                cfg.reward_source(),
                params,
                mix(&[seed, BETTER_SAMPLER_TAG]),
            )?;
            run_online(&mut state, &online, |_| {})?;
            log::info!(
                "seed {seed}: better sampler reward {:.4} -> {:.4}",
                state.initial_reward,
                state.evaluate()?
            );
            Ok(state.policy)
        }
    }
}

/// Generates (or loads) the offline corpus for one seed, writing it under
/// `out` when it had to be generated.
pub fn corpus_for(cfg: &RunConfig, label: &str, seed: u64, out: &Path) -> Result<Vec<PreferenceRecord>> {
    if let Some(template) = &cfg.data.corpus {
        let path = expand(template, seed, label);
        return read_records(&path).map_err(|e| match e {
            humanline_core::Error::Io(source) => LabError::Io { path, source },
            other => other.into(),
        });
    }
    let id = sampler_id(cfg);
    let path = out.join(format!("{}.jsonl", corpus_stem(&id, seed)));
    if path.exists() {
        let corpus = Corpus::read(&path)?;
        if corpus.manifest.record_count == cfg.records() && corpus.manifest.seed == seed {
            log::debug!("seed {seed}: reusing {}", path.display());
            return Ok(corpus.records);
        }
    }
    Ok(generate_corpus(cfg, seed, out)?.records)
}

pub fn generate_corpus(cfg: &RunConfig, seed: u64, out: &Path) -> Result<Corpus> {
    let init = init_policy(cfg, seed)?;
    let sampler = build_sampler(cfg, seed, &init)?;
    let corpus = make_offline_corpus(
        &sampler,
        &sampler_id(cfg),
        &cfg.reward_source(),
        &cfg.data.sampling,
        seed,
        cfg.records(),
        cfg.data.oversample,
    )?;
    let path = corpus.write(out)?;
    log::info!(
        "seed {seed}: wrote {} ({} records, mean score {:.4})",
        path.display(),
        corpus.records.len(),
        corpus.manifest.mean_score
    );
    Ok(corpus)
}

/// Trains one run for one seed, streaming metrics to disk.
pub fn train_seed(run: &Run, seed: u64, out: &Path) -> Result<SeedResult> {
    let cfg = &run.config;
    let init = init_policy(cfg, seed)?;
    init.save(&init_checkpoint_path(out, &run.label, seed))?;
    let records = if cfg.variant.is_online() {
        Vec::new()
    } else {
        corpus_for(cfg, &run.label, seed, out)?
    };
    let mut state = TrainState::new(
        init,
        cfg.trainer,
        cfg.variant,
        cfg.reward_source(),
        cfg.eval.params()?,
        seed,
    )?;

    let path = metrics_path(out, &run.label, seed);
    let mut writer = BufWriter::new(File::create(&path).map_err(LabError::io(&path))?);
    let mut write_error: Option<std::io::Error> = None;
    let mut on_step = |m: &StepMetrics| {
        if write_error.is_some() {
            return;
        }
        let line = MetricsLine {
            label: run.label.clone(),
            metrics: m.clone(),
        };
        let res = serde_json::to_writer(&mut writer, &line)
            .map_err(std::io::Error::from)
            .and_then(|_| writer.write_all(b"\n"));
        if let Err(e) = res {
            write_error = Some(e);
        }
    };
    let outcome = if cfg.variant.is_online() {
        run_online(&mut state, &cfg.online, &mut on_step)
    } else {
        run_offline(&mut state, &records, &mut on_step)
    };
    drop(on_step);
    // Keep whatever was recorded before an abort.
    writer.flush().map_err(LabError::io(&path))?;
    if let Some(e) = write_error {
        return Err(LabError::Io { path, source: e });
    }
    let history = outcome.map_err(|e| {
        log::error!("{} seed {seed}: {e}", run.label);
        e
    })?;
    state.policy.save(&checkpoint_path(out, &run.label, seed))?;
    let final_reward = history.last().map_or(state.initial_reward, |m| m.mean_reward);
    log::info!(
        "{} seed {seed}: reward {:.4} -> {:.4}",
        run.label,
        state.initial_reward,
        final_reward
    );
    Ok(SeedResult {
        label: run.label.clone(),
        variant: cfg.variant,
        seed,
        initial_reward: state.initial_reward,
        final_reward,
        steps: state.step,
    })
}

/// Seeds each run covers, optionally narrowed to one seed.
fn seed_plan(runs: &[Run], only: Option<u64>) -> Result<BTreeMap<u64, Vec<&Run>>> {
    let mut plan: BTreeMap<u64, Vec<&Run>> = BTreeMap::new();
    for run in runs {
        for &s in &run.config.seeds {
            if only.is_none_or(|o| o == s) {
                plan.entry(s).or_default().push(run);
            }
        }
    }
    if plan.is_empty() {
        return Err(LabError::Config(format!("seed {} is not listed in the config", only.unwrap_or_default())));
    }
    Ok(plan)
}

/// Trains every run on every seed. Seeds run in parallel; runs sharing a
/// seed run in order on the same thread so they can share its corpus.
pub fn train_all(runs: &[Run], only_seed: Option<u64>, out: &Path) -> Result<Vec<SeedResult>> {
    fs::create_dir_all(out).map_err(LabError::io(out))?;
    let plan = seed_plan(runs, only_seed)?;
    let per_seed: Vec<Result<Vec<SeedResult>>> = plan
        .into_par_iter()
        .map(|(seed, runs)| runs.into_iter().map(|r| train_seed(r, seed, out)).collect())
        .collect();
    let mut results = Vec::new();
    for r in per_seed {
        results.extend(r?);
    }
    results.sort_by(|a, b| (&a.label, a.seed).cmp(&(&b.label, b.seed)));
    Ok(results)
}

/// Writes the offline corpus of every distinct data setting, per seed.
pub fn generate_all(runs: &[Run], only_seed: Option<u64>, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(LabError::io(out))?;
    let plan = seed_plan(runs, only_seed)?;
    let jobs: Vec<(u64, &RunConfig)> = plan
        .iter()
        .flat_map(|(&seed, runs)| {
            let mut seen = BTreeSet::new();
            runs.iter()
                .filter(|r| !r.config.variant.is_online() && r.config.data.corpus.is_none())
                .filter(move |r| seen.insert(sampler_id(&r.config)))
                .map(move |r| (seed, &r.config))
                .collect::<Vec<_>>()
        })
        .collect();
    if jobs.is_empty() {
        log::warn!("no offline run needs a generated corpus");
    }
    let paths: Vec<Result<PathBuf>> = jobs
        .into_par_iter()
        .map(|(seed, cfg)| {
            generate_corpus(cfg, seed, out)?;
            Ok(out.join(format!("{}.jsonl", corpus_stem(&sampler_id(cfg), seed))))
        })
        .collect();
    paths.into_iter().collect()
}

/// Final rewards grouped by label, in seed order.
pub fn final_rewards(results: &[SeedResult]) -> BTreeMap<String, Vec<(u64, f64)>> {
    let mut out: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
    for r in results {
        out.entry(r.label.clone()).or_default().push((r.seed, r.final_reward));
    }
    for v in out.values_mut() {
        v.sort_by_key(|&(s, _)| s);
    }
    out
}
