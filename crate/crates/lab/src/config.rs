//! Run configuration: one TOML file describes a base run, optional
//! per-variant optimizer presets and an optional sweep of overrides.
//!
//! ```toml
//! variant = "offline+humanline"
//! objective = "dpo"
//! seeds = [0, 1, 2]
//!
//! [presets."offline+humanline"]
//! lr = 0.1
//!
//! [[sweep]]
//! label = "k4"
//! trainer.humanline.k = 4
//! ```
//!
//! Layering, lowest first: objective defaults, the variant preset, the base
//! file, then the sweep entry.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use humanline_core::data::{ScoreWeights, DEFAULT_TAU};
use humanline_core::{
    HumanlineMode, LossConfig, Objective, OnlineConfig, RewardKind, RewardSource, SamplingConfig, SamplingParams,
    SortTask, TrainerConfig, Variant,
};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: String,
    pub variant: Variant,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub task: SortTask,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub online: OnlineConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub theory: TheoryConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub kind: RewardKind,
    pub weights: ScoreWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// n-gram order; defaults to the target length plus one so every
    /// output position has its own row.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    /// Standard deviation of the initial logits.
    pub init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            order: None,
            init_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// The initial policy itself.
    Base,
    /// The initial policy with Gaussian logit noise.
    #[default]
    Worse,
    /// The initial policy after online GRPO on the true reward.
    Better,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Worse => "worse",
            Self::Better => "better",
        }
    }
}

/// Offline corpus source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub sampler: SamplerKind,
    /// Logit noise of the worse sampler.
    pub noise: f64,
    /// Online GRPO steps used to build the better sampler.
    pub pretrain_steps: u64,
    pub pretrain_lr: f64,
    pub sampling: SamplingConfig,
    /// Defaults to `steps * batch_size`, matching an online run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub records: Option<usize>,
    /// Contexts budgeted per record before giving up on the filter.
    pub oversample: f64,
    /// Existing corpus; `{seed}` is substituted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Worse,
            noise: humanline_core::data::WORSE_SAMPLER_NOISE,
            pretrain_steps: 150,
            pretrain_lr: 0.05,
            sampling: SamplingConfig::default(),
            records: None,
            oversample: 1.22,
            corpus: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub temperature: f64,
    pub top_p: f64,
    /// Held-out contexts drawn for winrate and pass-rate.
    pub contexts: usize,
    /// Checkpoint to judge; `{seed}` and `{label}` are substituted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    /// Checkpoint to judge against; defaults to the initial policy.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.95,
            contexts: 256,
            checkpoint: None,
            baseline: None,
        }
    }
}

impl EvalConfig {
    pub fn params(&self) -> Result<SamplingParams> {
        Ok(SamplingParams::new(self.temperature, self.top_p)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    /// Random instances per gradient check.
    pub instances: u64,
    /// Monte Carlo trials for the rejection and limit checks.
    pub trials: u64,
    /// Deliberately widens the clip bound the limit check compares against.
    pub corrupt_clamp: bool,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            instances: 50,
            trials: 100_000,
            corrupt_clamp: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct Preset {
    lr: Option<f64>,
    max_grad_norm: Option<f64>,
}

impl RunConfig {
    pub fn reward_source(&self) -> RewardSource {
        RewardSource {
            task: self.task,
            kind: self.reward.kind,
            weights: self.reward.weights,
        }
    }

    pub fn order(&self) -> usize {
        self.policy.order.unwrap_or(self.task.length + 1)
    }

    pub fn records(&self) -> usize {
        self.data
            .records
            .unwrap_or(self.trainer.steps as usize * self.trainer.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.reward_source().validate()?;
        self.trainer.validate()?;
        self.online.sampling.validate()?;
        self.data.sampling.validate()?;
        self.eval.params()?;
        self.task.policy_spec(self.order())?;
        if self.seeds.is_empty() {
            return Err(LabError::Config("at least one seed is required".into()));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(LabError::Config("seeds must be distinct".into()));
        }
        if !(self.policy.init_scale >= 0.0) || !(self.data.noise >= 0.0) {
            return Err(LabError::Config("init_scale and noise must be >= 0".into()));
        }
        if self.online.sample_period == 0 {
            return Err(LabError::Config("online.sample_period must be >= 1".into()));
        }
        let humanline_on = self.trainer.humanline.mode != HumanlineMode::Off;
        if self.variant.is_humanline() && !humanline_on {
            return Err(LabError::Config(format!(
                "variant {} needs trainer.humanline.mode = \"clipping\" or \"sampling\"",
                self.variant
            )));
        }
        if !self.variant.is_humanline() && humanline_on {
            return Err(LabError::Config(format!(
                "variant {} must set trainer.humanline.mode = \"off\"",
                self.variant
            )));
        }
        if self.variant.is_online() && self.online.full_groups && self.trainer.loss.objective != Objective::Grpo {
            return Err(LabError::Config("online.full_groups applies to GRPO only".into()));
        }
        Ok(())
    }
}

/// A fully resolved run: one sweep entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub label: String,
    pub config: RunConfig,
}

pub fn load_runs(path: &Path) -> Result<Vec<Run>> {
    let text = fs::read_to_string(path).map_err(LabError::io(path))?;
    parse_runs(&text).map_err(|e| match e {
        LabError::Config(msg) => LabError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_runs(text: &str) -> Result<Vec<Run>> {
    let mut root: Table = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
    let sweep = match root.remove("sweep") {
        None => vec![Table::new()],
        Some(Value::Array(entries)) if entries.is_empty() => vec![Table::new()],
        Some(Value::Array(entries)) => entries
            .into_iter()
            .map(|e| match e {
                Value::Table(t) => Ok(t),
                _ => Err(LabError::Config("every [[sweep]] entry must be a table".into())),
            })
            .collect::<Result<_>>()?,
        Some(_) => return Err(LabError::Config("sweep must be an array of tables".into())),
    };
    let presets = match root.remove("presets") {
        None => BTreeMap::new(),
        Some(v) => {
            let raw: BTreeMap<String, Preset> = v.try_into().map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
            let mut out = BTreeMap::new();
            for (k, p) in raw {
                let v: Variant = k.parse().map_err(|_| LabError::Config(format!("unknown preset variant {k:?}")))?;
                out.insert(v.as_str(), p);
            }
            out
        }
    };

    let mut runs = Vec::with_capacity(sweep.len());
    let mut labels = BTreeSet::new();
    for entry in sweep {
        let mut merged = root.clone();
        merge(&mut merged, entry);
        let run = resolve(merged, &presets)?;
        if !labels.insert(run.label.clone()) {
            return Err(LabError::Config(format!("duplicate run label {:?}", run.label)));
        }
        runs.push(run);
    }
    Ok(runs)
}

fn resolve(mut merged: Table, presets: &BTreeMap<&'static str, Preset>) -> Result<Run> {
    let variant: Variant = match merged.get("variant") {
        Some(Value::String(s)) => s.parse().map_err(|_| LabError::Config(format!("unknown variant {s:?}")))?,
        Some(_) => return Err(LabError::Config("variant must be a string".into())),
        None => return Err(LabError::Config("missing variant".into())),
    };
    if !variant.is_online() && merged.contains_key("online") {
        return Err(LabError::Config(format!(
            "variant {variant} trains on a fixed corpus; remove the [online] section"
        )));
    }
    let objective = match merged.remove("objective") {
        Some(v) => Some(
            v.try_into::<Objective>()
                .map_err(|e| LabError::Config(format!("objective: {e}")))?,
        ),
        None => None,
    };

    let mut layered = Table::new();
    if let Some(obj) = objective {
        let loss = Value::try_from(LossConfig::for_objective(obj)).map_err(|e| LabError::Config(e.to_string()))?;
        merge(&mut layered, table(&[("trainer", Value::Table(table(&[("loss", loss)])))]));
    }
    if let Some(p) = presets.get(variant.as_str()) {
        let mut opt = Table::new();
        if let Some(lr) = p.lr {
            opt.insert("lr".into(), Value::Float(lr));
        }
        if let Some(n) = p.max_grad_norm {
            opt.insert("max_grad_norm".into(), Value::Float(n));
        }
        merge(&mut layered, table(&[("trainer", Value::Table(table(&[("optimizer", Value::Table(opt))])))]));
    }
    merge(&mut layered, merged);

    let label = match layered.remove("label") {
        Some(Value::String(s)) if !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "+-_.".contains(c)) => s,
        Some(_) => return Err(LabError::Config("label must be a non-empty [A-Za-z0-9+-_.] string".into())),
        None => variant.as_str().to_string(),
    };
    let config: RunConfig = Value::Table(layered)
        .try_into()
        .map_err(|e: toml::de::Error| LabError::Config(format!("run {label:?}: {e}")))?;
    if let Some(obj) = objective {
        if config.trainer.loss.objective != obj {
            return Err(LabError::Config(format!(
                "objective {obj:?} conflicts with trainer.loss.objective {:?}",
                config.trainer.loss.objective
            )));
        }
    }
    config.validate().map_err(|e| match e {
        LabError::Core(c) => LabError::Config(format!("run {label:?}: {c}")),
        LabError::Config(m) => LabError::Config(format!("run {label:?}: {m}")),
        other => other,
    })?;
    Ok(Run { label, config })
}

fn table(entries: &[(&str, Value)]) -> Table {
    entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Deep merge: tables merge key by key, anything else is replaced.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Substitutes `{seed}` and `{label}` in a path template.
pub fn expand(template: &str, seed: u64, label: &str) -> PathBuf {
    PathBuf::from(template.replace("{seed}", &seed.to_string()).replace("{label}", label))
}

/// Reward threshold used when a config leaves `tau` out.
pub const fn default_tau() -> f64 {
    DEFAULT_TAU
}
