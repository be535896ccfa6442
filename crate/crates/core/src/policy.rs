//! Tabular autoregressive softmax policies.
//!
//! A policy is an exact table of logits indexed by a context state and the
//! next token. The state of position `t` combines the (fixed-length) prompt
//! `x` with the last `order - 1` tokens of `bos^(order-1) ++ y[..t]`, so the
//! table has `V^context_len * V^(order-1)` rows and no hashing collisions.

use std::fmt;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{log_sum_exp, Scalar};

pub type TokenId = u32;

/// Checkpoint magic string; bump on incompatible format changes.
pub const CHECKPOINT_MAGIC: &str = "HLPOL1";

const MAX_STATES: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: usize,
    pub bos: TokenId,
    pub eos: TokenId,
}

impl Vocabulary {
    pub fn new(size: usize, bos: TokenId, eos: TokenId) -> Result<Self> {
        if !(4..=64).contains(&size) {
            return Err(Error::InvalidParameter(format!(
                "vocabulary size {size} outside [4, 64]"
            )));
        }
        if bos as usize >= size || eos as usize >= size || bos == eos {
            return Err(Error::InvalidParameter(format!(
                "bos {bos} / eos {eos} must be distinct ids below {size}"
            )));
        }
        Ok(Self { size, bos, eos })
    }

    pub fn check(&self, id: TokenId) -> Result<()> {
        if (id as usize) < self.size {
            Ok(())
        } else {
            Err(Error::InvalidToken {
                id,
                vocab_size: self.size,
            })
        }
    }
}

/// A prompt `x` and an output `y`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sequence {
    pub context: Vec<TokenId>,
    pub output: Vec<TokenId>,
}

impl Sequence {
    pub fn new(context: Vec<TokenId>, output: Vec<TokenId>) -> Self {
        Self { context, output }
    }

    pub fn len(&self) -> usize {
        self.output.len()
    }

    pub fn is_empty(&self) -> bool {
        self.output.is_empty()
    }
}

/// Per-token detach flags: `true` means the token carries no gradient.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DetachMask(pub Vec<bool>);

impl DetachMask {
    pub fn none(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_detached(&self, t: usize) -> bool {
        self.0[t]
    }

    pub fn count_detached(&self) -> usize {
        self.0.iter().filter(|&&d| d).count()
    }
}

/// Shape of a policy table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub vocab: Vocabulary,
    /// n-gram order; the state sees `order - 1` previous output tokens.
    pub order: usize,
    /// Prompt length the policy conditions on (0 = unconditional).
    pub context_len: usize,
    /// Maximum output length including the terminating eos.
    pub max_len: usize,
}

impl PolicySpec {
    pub fn new(vocab: Vocabulary, order: usize, context_len: usize, max_len: usize) -> Result<Self> {
        let spec = Self {
            vocab,
            order,
            context_len,
            max_len,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::InvalidParameter("order must be >= 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidParameter("max_len must be >= 1".into()));
        }
        let exp = (self.order - 1 + self.context_len) as u32;
        match self.vocab.size.checked_pow(exp) {
            Some(n) if n <= MAX_STATES => Ok(()),
            _ => Err(Error::InvalidParameter(format!(
                "state table too large: V={} order={} context_len={}",
                self.vocab.size, self.order, self.context_len
            ))),
        }
    }

    pub fn num_states(&self) -> usize {
        self.vocab.size.pow((self.order - 1 + self.context_len) as u32)
    }

    pub fn num_params(&self) -> usize {
        self.num_states() * self.vocab.size
    }

    fn history_states(&self) -> usize {
        self.vocab.size.pow((self.order - 1) as u32)
    }

    fn context_index(&self, context: &[TokenId]) -> usize {
        context
            .iter()
            .rev()
            .fold(0usize, |acc, &tok| acc * self.vocab.size + tok as usize)
    }

    /// State for position `t` of `output` given the prompt.
    pub fn state(&self, context: &[TokenId], output: &[TokenId], t: usize) -> usize {
        let v = self.vocab.size;
        let hist = self.order - 1;
        let mut h = 0usize;
        for back in (1..=hist).rev() {
            let tok = if t >= back {
                output[t - back]
            } else {
                self.vocab.bos
            };
            h = h * v + tok as usize;
        }
        self.context_index(context) * self.history_states() + h
    }

    pub fn validate_context(&self, context: &[TokenId]) -> Result<()> {
        if context.len() != self.context_len {
            return Err(Error::InvalidSequence(format!(
                "context length {} != {}",
                context.len(),
                self.context_len
            )));
        }
        context.iter().try_for_each(|&id| self.vocab.check(id))
    }

    pub fn validate_sequence(&self, seq: &Sequence) -> Result<()> {
        self.validate_context(&seq.context)?;
        if seq.output.is_empty() {
            return Err(Error::InvalidSequence("empty output".into()));
        }
        if seq.output.len() > self.max_len {
            return Err(Error::InvalidSequence(format!(
                "output length {} exceeds max_len {}",
                seq.output.len(),
                self.max_len
            )));
        }
        seq.output.iter().try_for_each(|&id| self.vocab.check(id))
    }
}

/// Temperature / nucleus sampling controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
}

impl SamplingParams {
    pub fn new(temperature: f64, top_p: f64) -> Result<Self> {
        let p = Self { temperature, top_p };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
        }
    }
}

/// Gradient accumulator aligned with a policy's logit table.
#[derive(Clone, PartialEq)]
pub struct GradTape<T> {
    grads: Vec<T>,
    vocab_size: usize,
}

impl<T: Scalar> GradTape<T> {
    pub fn zeros(spec: &PolicySpec) -> Self {
        Self {
            grads: vec![T::zero(); spec.num_params()],
            vocab_size: spec.vocab.size,
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.grads
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.grads
    }

    pub fn row(&self, state: usize) -> &[T] {
        &self.grads[state * self.vocab_size..(state + 1) * self.vocab_size]
    }

    pub fn norm(&self) -> T {
        self.grads.iter().map(|&g| g * g).sum::<T>().sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        self.grads.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &GradTape<T>) {
        for (a, &b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.grads.iter().all(|g| g.is_zero())
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.is_finite())
    }
}

impl<T: Scalar> fmt::Debug for GradTape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GradTape")
            .field("params", &self.grads.len())
            .field("norm", &self.norm())
            .finish()
    }
}

#[derive(Clone, PartialEq)]
pub struct Policy<T> {
    spec: PolicySpec,
    logits: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Policy<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Policy")
            .field("spec", &self.spec)
            .field("fingerprint", &self.fingerprint())
            .finish()
    }
}

impl<T: Scalar> Policy<T> {
    pub fn uniform(spec: PolicySpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            logits: vec![T::zero(); spec.num_params()],
            spec,
        })
    }

    /// Logits drawn i.i.d. from N(0, scale^2).
    pub fn random(spec: PolicySpec, scale: f64, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::uniform(spec)?;
        let normal = rand_distr::Normal::new(0.0, scale)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        for l in p.logits.iter_mut() {
            *l = T::lit(rng.sample(normal));
        }
        Ok(p)
    }

    pub fn from_logits(spec: PolicySpec, logits: Vec<T>) -> Result<Self> {
        spec.validate()?;
        if logits.len() != spec.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} logits for {} parameters",
                logits.len(),
                spec.num_params()
            )));
        }
        Ok(Self { spec, logits })
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.spec.vocab
    }

    pub fn num_states(&self) -> usize {
        self.spec.num_states()
    }

    pub fn params(&self) -> &[T] {
        &self.logits
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.logits
    }

    pub fn row(&self, state: usize) -> &[T] {
        let v = self.spec.vocab.size;
        &self.logits[state * v..(state + 1) * v]
    }

    pub fn row_mut(&mut self, state: usize) -> &mut [T] {
        let v = self.spec.vocab.size;
        &mut self.logits[state * v..(state + 1) * v]
    }

    pub fn log_softmax(&self, state: usize) -> Vec<T> {
        let row = self.row(state);
        let lse = log_sum_exp(row);
        row.iter().map(|&l| l - lse).collect()
    }

    pub fn softmax(&self, state: usize) -> Vec<T> {
        self.log_softmax(state).into_iter().map(T::exp).collect()
    }

    /// Context states visited by every position of `seq.output`.
    pub fn states(&self, seq: &Sequence) -> Vec<usize> {
        (0..seq.output.len())
            .map(|t| self.spec.state(&seq.context, &seq.output, t))
            .collect()
    }

    /// Per-token log-probabilities in nats.
    pub fn log_prob(&self, seq: &Sequence) -> Result<Vec<T>> {
        self.spec.validate_sequence(seq)?;
        Ok(self
            .states(seq)
            .into_iter()
            .zip(&seq.output)
            .map(|(s, &tok)| {
                let row = self.row(s);
                row[tok as usize] - log_sum_exp(row)
            })
            .collect())
    }

    pub fn sequence_log_prob(&self, seq: &Sequence) -> Result<T> {
        Ok(self.log_prob(seq)?.into_iter().sum())
    }

    /// Autoregressive sampling with temperature and nucleus filtering.
    ///
    /// Generation stops at eos; a sequence reaching `max_len - 1` tokens
    /// without eos gets eos appended.
    pub fn sample(&self, context: &[TokenId], params: &SamplingParams, rng: &mut Rng) -> Result<Sequence> {
        self.spec.validate_context(context)?;
        params.validate()?;
        let eos = self.spec.vocab.eos;
        let mut output = Vec::with_capacity(self.spec.max_len);
        while output.len() + 1 < self.spec.max_len {
            let s = self.spec.state(context, &output, output.len());
            let tok = self.draw_token(s, params, rng);
            output.push(tok);
            if tok == eos {
                return Ok(Sequence::new(context.to_vec(), output));
            }
        }
        output.push(eos);
        Ok(Sequence::new(context.to_vec(), output))
    }

    /// Distribution actually sampled from at `state` after temperature and
    /// top-p renormalisation (as f64 probabilities).
    pub fn sampling_distribution(&self, state: usize, params: &SamplingParams) -> Vec<f64> {
        let row: Vec<f64> = self.row(state).iter().map(|l| l.f64() / params.temperature).collect();
        let lse = log_sum_exp(&row);
        let probs: Vec<f64> = row.iter().map(|l| (l - lse).exp()).collect();
        if params.top_p >= 1.0 {
            return probs;
        }
        let mut order: Vec<usize> = (0..probs.len()).collect();
        // Stable: ties keep ascending token order.
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal));
        let mut keep = vec![false; probs.len()];
        let mut cum = 0.0;
        for &i in &order {
            keep[i] = true;
            cum += probs[i];
            if cum >= params.top_p {
                break;
            }
        }
        let total: f64 = probs.iter().zip(&keep).filter(|(_, &k)| k).map(|(p, _)| p).sum();
        probs
            .iter()
            .zip(&keep)
            .map(|(&p, &k)| if k { p / total } else { 0.0 })
            .collect()
    }

    fn draw_token(&self, state: usize, params: &SamplingParams, rng: &mut Rng) -> TokenId {
        let probs = self.sampling_distribution(state, params);
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut last = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                last = i;
                cum += p;
                if u < cum {
                    return i as TokenId;
                }
            }
        }
        last as TokenId
    }

    /// Gradient of `sum_t weights[t] * log pi(y_t | state_t)` w.r.t. logits.
    pub fn logprob_grad(&self, seq: &Sequence, weights: &[T], mask: &DetachMask) -> Result<GradTape<T>> {
        let mut tape = GradTape::zeros(&self.spec);
        self.accumulate_logprob_grad(seq, weights, Some(mask), &mut tape)?;
        Ok(tape)
    }

    pub fn accumulate_logprob_grad(
        &self,
        seq: &Sequence,
        weights: &[T],
        mask: Option<&DetachMask>,
        tape: &mut GradTape<T>,
    ) -> Result<()> {
        self.spec.validate_sequence(seq)?;
        if weights.len() != seq.len() {
            return Err(Error::LengthMismatch {
                expected: seq.len(),
                got: weights.len(),
            });
        }
        if let Some(m) = mask {
            if m.len() != seq.len() {
                return Err(Error::LengthMismatch {
                    expected: seq.len(),
                    got: m.len(),
                });
            }
        }
        if tape.grads.len() != self.logits.len() {
            return Err(Error::ShapeMismatch("tape does not match policy".into()));
        }
        let v = self.spec.vocab.size;
        for (t, &tok) in seq.output.iter().enumerate() {
            if mask.is_some_and(|m| m.is_detached(t)) || weights[t].is_zero() {
                continue;
            }
            let w = weights[t];
            let s = self.spec.state(&seq.context, &seq.output, t);
            let probs = self.softmax(s);
            let row = &mut tape.grads[s * v..(s + 1) * v];
            for (j, g) in row.iter_mut().enumerate() {
                *g -= w * probs[j];
            }
            row[tok as usize] += w;
        }
        Ok(())
    }

    /// Copies parameters from `src` (load_state_dict semantics).
    pub fn load_params(&mut self, src: &Policy<T>) -> Result<()> {
        if self.spec != src.spec {
            return Err(Error::ShapeMismatch(format!(
                "cannot load {:?} into {:?}",
                src.spec, self.spec
            )));
        }
        self.logits.copy_from_slice(&src.logits);
        Ok(())
    }

    /// Plain gradient-free update hook used by the optimizer.
    pub fn apply(&mut self, f: impl Fn(usize, T) -> T) {
        for (i, l) in self.logits.iter_mut().enumerate() {
            *l = f(i, *l);
        }
    }

    /// SHA-256 over the spec and the f64 bit patterns of every logit.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.spec).as_bytes());
        for l in &self.logits {
            h.update(l.f64().to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            magic: CHECKPOINT_MAGIC.to_string(),
            vocab: self.spec.vocab,
            n: self.spec.order,
            context_len: self.spec.context_len,
            max_len: self.spec.max_len,
            shape: [self.spec.num_states(), self.spec.vocab.size],
            logits: self.logits.iter().map(|l| l.f64()).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", ckpt.magic)));
        }
        let spec = PolicySpec::new(ckpt.vocab, ckpt.n, ckpt.context_len, ckpt.max_len)?;
        if ckpt.shape != [spec.num_states(), spec.vocab.size] {
            return Err(Error::Format(format!("shape {:?} does not match spec", ckpt.shape)));
        }
        let logits = ckpt.logits.iter().map(|&l| T::lit(l)).collect();
        Self::from_logits(spec, logits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(&ckpt)
    }
}

/// Serialized policy: `{magic, vocab, n, shape, logits}` with row-major
/// logits of shape `[states, V]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: String,
    pub vocab: Vocabulary,
    pub n: usize,
    pub context_len: usize,
    pub max_len: usize,
    pub shape: [usize; 2],
    pub logits: Vec<f64>,
}
