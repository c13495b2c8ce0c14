//! Differentiable autoregressive categorical sequence policies.
//!
//! Two architectures share one flat-parameter interface: a linear-softmax
//! model over windowed token features (hand-derivable gradients, anchors the
//! exact oracles) and a small attention model with in-repo reverse-mode
//! accumulation (no external autodiff). Both expose log-probabilities,
//! sampling, score gradients and the teacher-forced correctness probability.

mod attn;
mod linear;

pub use attn::AttnMeta;
pub use linear::LinearMeta;

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::task::{segment_episodes, Task, Trajectory};
use crate::vocab::{Tok, ANSWER_MARK, EOS, VOCAB_SIZE};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    LinearSoftmax,
    SmallAttention,
}

/// Shape descriptors for either architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchMeta {
    Linear(LinearMeta),
    Attention(AttnMeta),
}

impl ArchMeta {
    pub fn arch(&self) -> Arch {
        match self {
            ArchMeta::Linear(_) => Arch::LinearSoftmax,
            ArchMeta::Attention(_) => Arch::SmallAttention,
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            ArchMeta::Linear(m) => m.vocab,
            ArchMeta::Attention(m) => m.vocab,
        }
    }

    pub fn param_dim(&self) -> usize {
        match self {
            ArchMeta::Linear(m) => m.param_dim(),
            ArchMeta::Attention(m) => m.param_dim(),
        }
    }

    pub fn context_window(&self) -> usize {
        match self {
            ArchMeta::Linear(m) => m.order,
            ArchMeta::Attention(m) => m.w_ctx,
        }
    }
}

/// Marker tokens as seen by a policy. Policies with the full task vocabulary
/// use the shared ids; smaller toy vocabularies reserve their top two ids.
#[derive(Debug, Clone, Copy)]
pub struct SpecialTokens {
    pub eos: Tok,
    pub answer: Tok,
}

impl SpecialTokens {
    pub fn for_vocab(v: usize) -> Self {
        if v >= VOCAB_SIZE {
            Self { eos: EOS, answer: ANSWER_MARK }
        } else {
            Self { eos: (v - 1) as Tok, answer: (v - 2) as Tok }
        }
    }
}

/// A parameterized policy: architecture metadata plus a flat value vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub meta: ArchMeta,
    pub values: Vec<f64>,
}

impl Policy {
    pub fn zeros(meta: ArchMeta) -> Self {
        let d = meta.param_dim();
        Self { meta, values: vec![0.0; d] }
    }

    pub fn init(meta: ArchMeta, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[domain::INIT]);
        let values = match &meta {
            ArchMeta::Linear(m) => m.init_values(&mut rng),
            ArchMeta::Attention(m) => m.init_values(&mut rng),
        };
        Self { meta, values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn vocab(&self) -> usize {
        self.meta.vocab()
    }

    pub fn special(&self) -> SpecialTokens {
        SpecialTokens::for_vocab(self.vocab())
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteParams)
        }
    }

    /// Flat index range of the output-head block (the parameter block the
    /// compression penalty is measured on).
    pub fn head_span(&self) -> std::ops::Range<usize> {
        match &self.meta {
            ArchMeta::Linear(m) => 0..m.param_dim(),
            ArchMeta::Attention(m) => m.head_span(),
        }
    }

    /// Log of the next-token distribution given a context (truncated to the
    /// architecture's window). Exponentials sum to 1.
    pub fn next_token_logprobs(&self, context: &[Tok]) -> Result<Vec<f64>> {
        self.validate()?;
        let lp = match &self.meta {
            ArchMeta::Linear(m) => m.logprobs(&self.values, context),
            ArchMeta::Attention(m) => m.logprobs(&self.values, context),
        };
        if lp.iter().all(|v| v.is_finite()) {
            Ok(lp)
        } else {
            Err(Error::NonFiniteParams)
        }
    }

    /// Gradient of `log p(token | context)` with respect to every parameter.
    pub fn grad_logprob(&self, context: &[Tok], token: Tok) -> Result<Vec<f64>> {
        self.validate()?;
        let g = match &self.meta {
            ArchMeta::Linear(m) => m.grad_logprob(&self.values, context, token),
            ArchMeta::Attention(m) => m.grad_logprob(&self.values, context, token),
        };
        if g.iter().all(|v| v.is_finite()) {
            Ok(g)
        } else {
            Err(Error::NonFinite { term: "grad_logprob".into() })
        }
    }

    /// Teacher-forced log-probabilities of `seq[start..]` given their
    /// prefixes, all in one pass.
    pub fn seq_logprobs(&self, seq: &[Tok], start: usize) -> Vec<f64> {
        match &self.meta {
            ArchMeta::Linear(m) => m.seq_logprobs(&self.values, seq, start),
            ArchMeta::Attention(m) => m.seq_logprobs(&self.values, seq, start),
        }
    }

    /// Accumulate `sum_t coeffs[t] * grad log p(seq[start + t] | prefix)` in
    /// one reverse pass. This is the only gradient primitive training needs:
    /// supervised learning and the policy-gradient surrogate differ only in
    /// the per-token coefficients.
    pub fn weighted_score_grad(&self, seq: &[Tok], start: usize, coeffs: &[f64]) -> Vec<f64> {
        debug_assert_eq!(seq.len() - start, coeffs.len());
        match &self.meta {
            ArchMeta::Linear(m) => m.weighted_score_grad(&self.values, seq, start, coeffs),
            ArchMeta::Attention(m) => m.weighted_score_grad(&self.values, seq, start, coeffs),
        }
    }

    /// Length-normalized teacher-forced probability of the oracle answer
    /// (plus end-of-sequence) decoding from the forced-answer context.
    pub fn correctness_prob(&self, context: &[Tok], task: &Task) -> Result<f64> {
        if task.oracle_answer_tokens.is_empty() {
            return Err(Error::DegenerateTask);
        }
        let sp = self.special();
        let mut seq: Vec<Tok> = context.to_vec();
        if seq.last() != Some(&sp.answer) {
            seq.push(sp.answer);
        }
        let scored_from = seq.len();
        seq.extend_from_slice(&task.oracle_answer_tokens);
        seq.push(sp.eos);
        let lps = self.seq_logprobs(&seq, scored_from);
        let m = lps.len() as f64;
        Ok((lps.iter().sum::<f64>() / m).exp())
    }

    /// Autoregressive sampling under a hard token budget.
    pub fn sample_trajectory(
        &self,
        task: &Task,
        budget: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Trajectory> {
        assert!(budget >= 1, "budget must be >= 1");
        self.validate()?;
        let sp = self.special();
        let mut eval = Sampler::new(self, &task.question_tokens);
        let mut tokens = Vec::new();
        let mut lps = Vec::new();
        let mut truncated = true;
        loop {
            let logprobs = eval.next_logprobs();
            let tok = sample_from_logprobs(&logprobs, rng);
            tokens.push(tok);
            lps.push(logprobs[tok as usize]);
            eval.push(tok);
            if tok == sp.eos {
                truncated = false;
                break;
            }
            if tokens.len() >= budget {
                break;
            }
        }
        Ok(Trajectory {
            task_id: task.id,
            episode_spans: segment_episodes(&tokens),
            token_count: tokens.len(),
            tokens,
            per_token_logprob: lps,
            truncated,
        })
    }

    /// Greedy (temperature-0) decoding.
    pub fn decode_greedy(&self, prompt: &[Tok], budget: usize) -> Vec<Tok> {
        let sp = self.special();
        let mut eval = Sampler::new(self, prompt);
        let mut tokens = Vec::new();
        while tokens.len() < budget {
            let logprobs = eval.next_logprobs();
            let tok = argmax(&logprobs);
            tokens.push(tok);
            eval.push(tok);
            if tok == sp.eos {
                break;
            }
        }
        tokens
    }
}

pub fn argmax(xs: &[f64]) -> Tok {
    let mut best = 0usize;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best as Tok
}

pub fn sample_from_logprobs(logprobs: &[f64], rng: &mut ChaCha8Rng) -> Tok {
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, &lp) in logprobs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i as Tok;
        }
    }
    (logprobs.len() - 1) as Tok
}

/// Incremental evaluator: owns the growing context, returns next-token
/// distributions, exposes cached per-position hidden features and supports
/// teacher-forced probe chains branched off any prefix without disturbing
/// the cache.
pub enum Sampler<'a> {
    Linear(linear::LinearEval<'a>),
    Attn(attn::AttnEval<'a>),
}

impl<'a> Sampler<'a> {
    pub fn new(policy: &'a Policy, prompt: &[Tok]) -> Self {
        match &policy.meta {
            ArchMeta::Linear(m) => {
                Sampler::Linear(linear::LinearEval::new(m, &policy.values, prompt))
            }
            ArchMeta::Attention(m) => {
                Sampler::Attn(attn::AttnEval::new(m, &policy.values, prompt))
            }
        }
    }

    /// Distribution over the next token given the current context.
    pub fn next_logprobs(&mut self) -> Vec<f64> {
        match self {
            Sampler::Linear(e) => e.next_logprobs(),
            Sampler::Attn(e) => e.next_logprobs(),
        }
    }

    pub fn push(&mut self, tok: Tok) {
        match self {
            Sampler::Linear(e) => e.push(tok),
            Sampler::Attn(e) => e.push(tok),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Sampler::Linear(e) => e.len(),
            Sampler::Attn(e) => e.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Hidden feature vector that fed the next-token distribution at absolute
    /// position `pos` (the features the output head saw when the token at
    /// `pos` was produced).
    pub fn feature_at(&mut self, pos: usize) -> Vec<f64> {
        match self {
            Sampler::Linear(e) => e.feature_at(pos),
            Sampler::Attn(e) => e.feature_at(pos),
        }
    }

    /// Teacher-forced log-probabilities of `chain` appended after the first
    /// `prefix_len` context tokens. The cache is left untouched.
    pub fn probe_chain(&self, prefix_len: usize, chain: &[Tok]) -> Vec<f64> {
        match self {
            Sampler::Linear(e) => e.probe_chain(prefix_len, chain),
            Sampler::Attn(e) => e.probe_chain(prefix_len, chain),
        }
    }
}

// --- checkpoint container -------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"GAINRLPK";
const CKPT_VERSION: u32 = 1;

/// Serialize header + parameters in little-endian byte order.
pub fn save_checkpoint<W: Write>(policy: &Policy, w: &mut W) -> Result<()> {
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    let meta_json = serde_json::to_vec(&policy.meta)
        .map_err(|e| Error::Checkpoint(format!("meta encode: {e}")))?;
    w.write_all(&(meta_json.len() as u32).to_le_bytes())?;
    w.write_all(&meta_json)?;
    w.write_all(&(policy.values.len() as u64).to_le_bytes())?;
    for v in &policy.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint<R: Read>(r: &mut R) -> Result<Policy> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {CKPT_VERSION})"
        )));
    }
    r.read_exact(&mut v4)?;
    let meta_len = u32::from_le_bytes(v4) as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf)?;
    let meta: ArchMeta = serde_json::from_slice(&meta_buf)
        .map_err(|e| Error::Checkpoint(format!("meta decode: {e}")))?;
    let mut v8 = [0u8; 8];
    r.read_exact(&mut v8)?;
    let d = u64::from_le_bytes(v8) as usize;
    if d != meta.param_dim() {
        return Err(Error::Checkpoint(format!(
            "parameter count {d} does not match architecture ({})",
            meta.param_dim()
        )));
    }
    let mut values = Vec::with_capacity(d);
    for _ in 0..d {
        r.read_exact(&mut v8)?;
        values.push(f64::from_le_bytes(v8));
    }
    let p = Policy { meta, values };
    p.validate()?;
    Ok(p)
}

#[cfg(test)]
pub(crate) mod tests;
