//! Sort-the-digits task, reward sources, preference sampling and corpora.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{Group, Labeled, Pair};
use crate::policy::{Policy, PolicySpec, SamplingParams, Sequence, TokenId, Vocabulary};
use crate::rng::{Purpose, Rng, Streams};
use crate::scalar::Scalar;

/// Reward threshold below which a sampled pair is discarded.
pub const DEFAULT_TAU: f64 = 0.01;
pub const DEFAULT_GROUP_SIZE: usize = 8;
/// Standard deviation of the logit noise used to build the "worse" sampler.
pub const WORSE_SAMPLER_NOISE: f64 = 1.0;

/// Contexts are `length` digits in `0..digits`; the target is the sorted
/// context followed by end-of-sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SortTask {
    pub digits: u32,
    pub length: usize,
}

impl Default for SortTask {
    fn default() -> Self {
        Self { digits: 3, length: 3 }
    }
}

impl SortTask {
    pub fn new(digits: u32, length: usize) -> Result<Self> {
        let t = Self { digits, length };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.digits) || !(1..=6).contains(&self.length) {
            return Err(Error::InvalidParameter(format!(
                "sort task needs 2..=8 digits and length 1..=6, got {} and {}",
                self.digits, self.length
            )));
        }
        Ok(())
    }

    pub fn bos(&self) -> TokenId {
        self.digits
    }

    pub fn eos(&self) -> TokenId {
        self.digits + 1
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.digits as usize + 2, self.bos(), self.eos()).expect("validated task")
    }

    /// Policy shape for this task. Outputs may run two tokens past the
    /// target length so over-long answers are representable.
    pub fn policy_spec(&self, order: usize) -> Result<PolicySpec> {
        self.validate()?;
        PolicySpec::new(self.vocab(), order, self.length, self.length + 2)
    }

    pub fn is_digit(&self, t: TokenId) -> bool {
        t < self.digits
    }

    pub fn target(&self, x: &[TokenId]) -> Vec<TokenId> {
        let mut y = x.to_vec();
        y.sort_unstable();
        y.push(self.eos());
        y
    }

    pub fn sample_context(&self, rng: &mut Rng) -> Vec<TokenId> {
        (0..self.length).map(|_| rng.random_range(0..self.digits)).collect()
    }

    pub fn num_contexts(&self) -> usize {
        (self.digits as usize).pow(self.length as u32)
    }

    /// Every context in lexicographic order.
    pub fn all_contexts(&self) -> Vec<Vec<TokenId>> {
        (0..self.num_contexts())
            .map(|mut i| {
                let mut x = vec![0; self.length];
                for slot in x.iter_mut().rev() {
                    *slot = (i % self.digits as usize) as TokenId;
                    i /= self.digits as usize;
                }
                x
            })
            .collect()
    }

    /// Output body: tokens before the first end-of-sequence.
    pub fn body<'a>(&self, y: &'a [TokenId]) -> &'a [TokenId] {
        let end = y.iter().position(|&t| t == self.eos()).unwrap_or(y.len());
        &y[..end]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Verifiable,
    #[default]
    Scored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifiableReward {
    pub format: bool,
    pub accuracy: bool,
    pub total: f64,
}

/// Format (right length, digits then a final end-of-sequence) weighted 1 and
/// exact-match accuracy weighted 8, normalised to `[0, 1]`.
pub fn verifiable_reward(task: &SortTask, x: &[TokenId], y: &[TokenId]) -> VerifiableReward {
    let format = y.len() == task.length + 1
        && y.last() == Some(&task.eos())
        && y[..y.len() - 1].iter().all(|&t| task.is_digit(t));
    let accuracy = y == task.target(x).as_slice();
    let total = (f64::from(u8::from(format)) + 8.0 * f64::from(u8::from(accuracy))) / 9.0;
    VerifiableReward { format, accuracy, total }
}

/// Feature weights of the scored reward; they are normalised to sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreWeights {
    pub sortedness: f64,
    pub length: f64,
    pub content: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            sortedness: 0.4,
            length: 0.3,
            content: 0.3,
        }
    }
}

impl ScoreWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sortedness, self.length, self.content];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || all.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidParameter("score weights must be >= 0 with a positive sum".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreFeatures {
    /// Fraction of adjacent body pairs that are non-decreasing digits.
    pub sortedness: f64,
    /// `1 / (1 + |body length - target length|)`.
    pub length: f64,
    /// Multiset overlap between body and context over the context length.
    pub content: f64,
}

pub fn score_features(task: &SortTask, x: &[TokenId], y: &[TokenId]) -> ScoreFeatures {
    let body = task.body(y);
    let sortedness = match body.len() {
        0 => 0.0,
        1 => f64::from(u8::from(task.is_digit(body[0]))),
        n => {
            let good = body
                .windows(2)
                .filter(|w| task.is_digit(w[0]) && task.is_digit(w[1]) && w[0] <= w[1])
                .count();
            good as f64 / (n - 1) as f64
        }
    };
    let length = 1.0 / (1.0 + body.len().abs_diff(task.length) as f64);
    let mut counts = vec![0usize; task.digits as usize];
    for &t in x {
        counts[t as usize] += 1;
    }
    let mut overlap = 0usize;
    for &t in body {
        if task.is_digit(t) && counts[t as usize] > 0 {
            counts[t as usize] -= 1;
            overlap += 1;
        }
    }
    ScoreFeatures {
        sortedness,
        length,
        content: overlap as f64 / task.length as f64,
    }
}

/// Smooth score in `[0, 1]`; exactly 1 only for the sorted context.
pub fn scored_reward(task: &SortTask, x: &[TokenId], y: &[TokenId], weights: &ScoreWeights) -> f64 {
    let f = score_features(task, x, y);
    let total = weights.sortedness + weights.length + weights.content;
    (weights.sortedness * f.sortedness + weights.length * f.length + weights.content * f.content) / total
}

/// The true reward a run optimises and is judged by.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSource {
    pub task: SortTask,
    #[serde(default)]
    pub kind: RewardKind,
    #[serde(default)]
    pub weights: ScoreWeights,
}

impl RewardSource {
    pub fn new(task: SortTask, kind: RewardKind) -> Self {
        Self {
            task,
            kind,
            weights: ScoreWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.weights.validate()
    }

    pub fn score(&self, x: &[TokenId], y: &[TokenId]) -> f64 {
        match self.kind {
            RewardKind::Verifiable => verifiable_reward(&self.task, x, y).total,
            RewardKind::Scored => scored_reward(&self.task, x, y, &self.weights),
        }
    }
}

/// One `(x, y_w, y_l)` tuple with optional raw scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceRecord {
    pub x: Vec<TokenId>,
    pub y_w: Vec<TokenId>,
    pub y_l: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_l: Option<f64>,
}

impl PreferenceRecord {
    pub fn pair(&self) -> Pair {
        Pair {
            context: self.x.clone(),
            chosen: self.y_w.clone(),
            rejected: self.y_l.clone(),
        }
    }

    pub fn margin(&self) -> Option<f64> {
        Some(self.r_w? - self.r_l?)
    }
}

/// Sampling settings shared by online rounds and corpus generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub group_size: usize,
    pub tau: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.95,
            group_size: DEFAULT_GROUP_SIZE,
            tau: DEFAULT_TAU,
        }
    }
}

impl SamplingConfig {
    pub fn params(&self) -> Result<SamplingParams> {
        SamplingParams::new(self.temperature, self.top_p)
    }

    pub fn validate(&self) -> Result<()> {
        self.params()?;
        if self.group_size < 2 {
            return Err(Error::InvalidParameter("group_size must be >= 2".into()));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::InvalidParameter("tau must be >= 0".into()));
        }
        Ok(())
    }
}

/// Exact expected reward of sampling `policy` on `x`, by enumerating every
/// output the sampler can produce (same truncation rule as sampling).
pub fn expected_reward<T: Scalar>(
    policy: &Policy<T>,
    reward: &RewardSource,
    x: &[TokenId],
    params: &SamplingParams,
) -> Result<f64> {
    policy.spec().validate_context(x)?;
    params.validate()?;
    let spec = *policy.spec();
    let eos = spec.vocab.eos;
    let mut total = 0.0;
    let mut stack: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 1.0)];
    while let Some((prefix, mass)) = stack.pop() {
        if prefix.len() + 1 >= spec.max_len {
            let mut y = prefix;
            y.push(eos);
            total += mass * reward.score(x, &y);
            continue;
        }
        let probs = policy.sampling_distribution(spec.state(x, &prefix, prefix.len()), params);
        for (tok, &p) in probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let mut y = prefix.clone();
            y.push(tok as TokenId);
            if tok as TokenId == eos {
                total += mass * p * reward.score(x, &y);
            } else {
                stack.push((y, mass * p));
            }
        }
    }
    Ok(total)
}

/// Outcome of sampling one context.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSample {
    pub outputs: Vec<Vec<TokenId>>,
    pub scores: Vec<f64>,
}

impl ContextSample {
    /// `(argmax, argmin)` with ties going to the lowest index.
    pub fn extremes(&self) -> (usize, usize) {
        let mut hi = 0;
        let mut lo = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[hi] {
                hi = i;
            }
            if s < self.scores[lo] {
                lo = i;
            }
        }
        (hi, lo)
    }

    pub fn record(&self, x: &[TokenId], tau: f64) -> Option<PreferenceRecord> {
        let (hi, lo) = self.extremes();
        let gap = self.scores[hi] - self.scores[lo];
        (gap >= tau).then(|| PreferenceRecord {
            x: x.to_vec(),
            y_w: self.outputs[hi].clone(),
            y_l: self.outputs[lo].clone(),
            r_w: Some(self.scores[hi]),
            r_l: Some(self.scores[lo]),
        })
    }
}

/// Samples `group_size` outputs for one context and scores them.
pub fn sample_context<T: Scalar>(
    policy: &Policy<T>,
    reward: &RewardSource,
    x: &[TokenId],
    cfg: &SamplingConfig,
    rng: &mut Rng,
) -> Result<ContextSample> {
    let params = cfg.params()?;
    let mut outputs = Vec::with_capacity(cfg.group_size);
    let mut scores = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let seq = policy.sample(x, &params, rng)?;
        scores.push(reward.score(x, &seq.output));
        outputs.push(seq.output);
    }
    Ok(ContextSample { outputs, scores })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutput {
    pub records: Vec<PreferenceRecord>,
    pub groups: Vec<Group<f64>>,
    pub contexts_sampled: usize,
    pub filtered: usize,
    pub mean_score: f64,
}

impl RoundOutput {
    pub fn filtered_fraction(&self) -> f64 {
        if self.contexts_sampled == 0 {
            0.0
        } else {
            self.filtered as f64 / self.contexts_sampled as f64
        }
    }
}

/// Draws contexts and samples them until `target` pairs pass the filter
/// (or `max_contexts` is reached). Each context `i` uses the substream
/// keyed by `(key, i)` so results do not depend on how many were rejected
/// earlier.
#[allow(clippy::too_many_arguments)]
pub fn online_round<T: Scalar>(
    policy: &Policy<T>,
    reward: &RewardSource,
    cfg: &SamplingConfig,
    streams: &Streams,
    key: u64,
    target: usize,
    max_contexts: usize,
) -> Result<RoundOutput> {
    let mut out = RoundOutput {
        records: Vec::with_capacity(target),
        groups: Vec::with_capacity(target),
        contexts_sampled: 0,
        filtered: 0,
        mean_score: 0.0,
    };
    let mut score_sum = 0.0;
    let mut i = 0u64;
    while out.records.len() < target && out.contexts_sampled < max_contexts {
        let x = reward.task.sample_context(&mut streams.keyed(Purpose::Contexts, &[key, i]));
        let mut rng = streams.keyed(Purpose::Sampling, &[key, i]);
        let s = sample_context(policy, reward, &x, cfg, &mut rng)?;
        i += 1;
        out.contexts_sampled += 1;
        score_sum += s.scores.iter().sum::<f64>();
        match s.record(&x, cfg.tau) {
            Some(r) => {
                out.groups.push(Group::new(x, s.outputs, s.scores)?.with_advantages()?);
                out.records.push(r);
            }
            None => out.filtered += 1,
        }
    }
    out.mean_score = score_sum / (out.contexts_sampled * cfg.group_size).max(1) as f64;
    Ok(out)
}

/// Each record as a group of two with its raw scores (or `(1, 0)` without).
pub fn offline_groups<T: Scalar>(records: &[PreferenceRecord]) -> Result<Vec<Group<T>>> {
    if records.is_empty() {
        return Err(Error::InvalidParameter("no records".into()));
    }
    records
        .iter()
        .map(|r| {
            let (w, l) = match (r.r_w, r.r_l) {
                (Some(w), Some(l)) => (w, l),
                _ => (1.0, 0.0),
            };
            Group::new(r.x.clone(), vec![r.y_w.clone(), r.y_l.clone()], vec![T::lit(w), T::lit(l)])?
                .with_advantages()
        })
        .collect()
}

/// Splits pairs into desirable/undesirable examples, plus mismatched
/// context/output sequences (each context with the next record's chosen
/// output) for the KTO reference point.
pub fn unpaired_examples(records: &[PreferenceRecord]) -> (Vec<Labeled>, Vec<Sequence>) {
    let mut examples = Vec::with_capacity(2 * records.len());
    for r in records {
        examples.push(Labeled {
            seq: Sequence::new(r.x.clone(), r.y_w.clone()),
            desirable: true,
        });
        examples.push(Labeled {
            seq: Sequence::new(r.x.clone(), r.y_l.clone()),
            desirable: false,
        });
    }
    let n = records.len();
    let kl = (0..n)
        .map(|i| Sequence::new(records[i].x.clone(), records[(i + 1) % n].y_w.clone()))
        .collect();
    (examples, kl)
}

/// Copy of `base` with i.i.d. Gaussian noise added to every logit.
pub fn noised_sampler<T: Scalar>(base: &Policy<T>, sigma: f64, rng: &mut Rng) -> Result<Policy<T>> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut p = base.clone();
    for l in p.params_mut() {
        *l += T::lit(normal.sample(rng));
    }
    Ok(p)
}

/// Everything needed to regenerate a corpus bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub sampler_id: String,
    pub sampler_fingerprint: String,
    pub reward: RewardSource,
    pub sampling: SamplingConfig,
    pub seed: u64,
    pub record_count: usize,
    pub contexts_sampled: usize,
    pub mean_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub records: Vec<PreferenceRecord>,
    pub manifest: DatasetManifest,
}

/// Same pipeline as an online round, frozen to `sampler`.
pub fn make_offline_corpus<T: Scalar>(
    sampler: &Policy<T>,
    sampler_id: &str,
    reward: &RewardSource,
    cfg: &SamplingConfig,
    seed: u64,
    records: usize,
    oversample: f64,
) -> Result<Corpus> {
    let streams = Streams::new(seed);
    let max_contexts = ((records as f64) * oversample.max(1.0)).ceil() as usize + 16 * records.max(1);
    // Corpus streams are keyed apart from online rounds, which use round numbers.
    let round = online_round(sampler, reward, cfg, &streams, u64::MAX, records, max_contexts)?;
    if round.records.len() < records {
        return Err(Error::InvalidParameter(format!(
            "only {} of {records} pairs passed tau = {} after {} contexts",
            round.records.len(),
            cfg.tau,
            round.contexts_sampled
        )));
    }
    let manifest = DatasetManifest {
        sampler_id: sampler_id.to_string(),
        sampler_fingerprint: sampler.fingerprint(),
        reward: *reward,
        sampling: *cfg,
        seed,
        record_count: round.records.len(),
        contexts_sampled: round.contexts_sampled,
        mean_score: round.mean_score,
    };
    Ok(Corpus {
        records: round.records,
        manifest,
    })
}

pub fn corpus_stem(sampler_id: &str, seed: u64) -> String {
    format!("corpus-{sampler_id}-seed{seed}")
}

impl Corpus {
    /// Writes `<stem>.jsonl` and `<stem>.manifest.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let stem = corpus_stem(&self.manifest.sampler_id, self.manifest.seed);
        let path = dir.join(format!("{stem}.jsonl"));
        write_records(&path, &self.records)?;
        let manifest = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(dir.join(format!("{stem}.manifest.json")), manifest + "\n")?;
        Ok(path)
    }

    pub fn read(jsonl: &Path) -> Result<Self> {
        let records = read_records(jsonl)?;
        let manifest_path = jsonl.with_extension("manifest.json");
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        if manifest.record_count != records.len() {
            return Err(Error::Format(format!(
                "{}: manifest lists {} records, file has {}",
                jsonl.display(),
                manifest.record_count,
                records.len()
            )));
        }
        Ok(Self { records, manifest })
    }
}

pub fn write_records(path: &Path, records: &[PreferenceRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<PreferenceRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
