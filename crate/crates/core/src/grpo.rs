//! Group-relative policy optimization over episodic rollouts.
//!
//! One trainer step: freeze the policy, sample a group of rollouts per task,
//! score episodes with the dense process reward, spread episode rewards onto
//! tokens by log-probability surprise, reduce each rollout to a truncated
//! mean, standardize within the group, rescale back to tokens, and take one
//! clipped policy-gradient step with a KL penalty.

use crate::error::{Error, Result};
use crate::policy::{ArchMeta, AttnMeta, LinearMeta, Policy, Sampler};
use crate::proxy::{fit_basis, ProxyBasis};
use crate::reward::{
    compression_penalty, episode_reward, process_reward, virtual_update, EpisodeReward,
    RewardConfig,
};
use crate::rng::{self, domain};
use crate::task::{
    generate_task_with, outcome_reward_tokens, render_trace, segment_episodes, OpSet, Task,
    Trajectory,
};
use crate::vocab::{Tok, ANSWER_MARK, EP_CLOSE, EP_OPEN};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Surprise weights below this are clamped so that fully confident tokens
/// still receive a share of the episode reward.
const SURPRISE_FLOOR: f64 = 1e-8;
/// Truncated means below this magnitude fall back to uniform rescaling.
const MEAN_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchKind {
    LinearSoftmax,
    SmallAttention,
}

/// Policy shape as configured (resolved into an `ArchMeta`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: ArchKind,
    /// Trailing-token feature order (linear-softmax only).
    pub order: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_inner: usize,
    pub layers: usize,
    pub w_ctx: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: ArchKind::SmallAttention,
            order: 2,
            dim: 24,
            heads: 3,
            mlp_inner: 64,
            layers: 1,
            w_ctx: 128,
        }
    }
}

impl PolicyConfig {
    pub fn arch_meta(&self, vocab: usize) -> ArchMeta {
        match self.kind {
            ArchKind::LinearSoftmax => ArchMeta::Linear(LinearMeta::new(vocab, self.order)),
            ArchKind::SmallAttention => ArchMeta::Attention(AttnMeta::new(
                vocab,
                self.dim,
                self.heads,
                self.mlp_inner,
                self.layers,
                self.w_ctx,
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub damping: f64,
    pub virtual_step: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub clip_epsilon: f64,
    pub kl_coeff: f64,
    pub trunc_fraction: f64,
    pub group_size: usize,
    pub token_budget: usize,
    pub max_episodes: usize,
    pub adv_epsilon: f64,
    pub steps: u64,
    pub seed: u64,
    pub threads: usize,
    pub tiers: Vec<u8>,
    pub op_set: OpSet,
    pub policy: PolicyConfig,
    pub proxy_rank_frac: f64,
    pub proxy_window: usize,
    pub proxy_refresh: u64,
    pub warmup_steps: u64,
    pub warmup_lr: f64,
    pub warmup_batch: usize,
    /// Unnormalized weights over the number of redundant verification
    /// episodes in warmup traces (index = repeat count).
    pub warmup_repeat_weights: Vec<f64>,
    pub init_checkpoint: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            beta: 0.6,
            damping: 1e-5,
            virtual_step: 1e-6,
            learning_rate: 1e-6,
            weight_decay: 0.0,
            batch_size: 32,
            clip_epsilon: 0.2,
            kl_coeff: 0.01,
            trunc_fraction: 0.05,
            group_size: 8,
            token_budget: 512,
            max_episodes: 30,
            adv_epsilon: 1e-8,
            steps: 0,
            seed: 0,
            threads: 1,
            tiers: vec![1, 2, 3, 4],
            op_set: OpSet::AddSub,
            policy: PolicyConfig::default(),
            proxy_rank_frac: 0.05,
            proxy_window: 32,
            proxy_refresh: 10,
            warmup_steps: 0,
            warmup_lr: 3e-3,
            warmup_batch: 16,
            warmup_repeat_weights: vec![0.3, 0.3, 0.25, 0.15],
            init_checkpoint: None,
        }
    }
}

impl TrainConfig {
    /// Paper-scale reference values, kept for documentation; not runnable at
    /// desk scale.
    pub fn paper_scale() -> Self {
        Self {
            batch_size: 256,
            token_budget: 16_384,
            weight_decay: 0.01,
            ..Self::default()
        }
    }

    pub fn reward(&self) -> RewardConfig {
        RewardConfig {
            alpha: self.alpha,
            beta: self.beta,
            damping: self.damping,
            virtual_step: self.virtual_step,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.alpha <= 0.0 {
            return err("alpha must be > 0");
        }
        if self.beta <= 0.0 {
            return err("beta must be > 0");
        }
        if self.damping <= 0.0 {
            return err("damping must be > 0");
        }
        if self.clip_epsilon <= 0.0 {
            return err("clip_epsilon must be > 0");
        }
        if !(self.trunc_fraction > 0.0 && self.trunc_fraction < 0.5) {
            return err("trunc_fraction must be in (0, 0.5)");
        }
        if self.group_size < 2 {
            return err("group_size must be at least 2");
        }
        if self.batch_size < 1 {
            return err("batch_size must be at least 1");
        }
        if self.token_budget < 1 {
            return err("token_budget must be at least 1");
        }
        if self.max_episodes < 1 {
            return err("max_episodes must be at least 1");
        }
        if !(self.proxy_rank_frac >= 0.001 && self.proxy_rank_frac <= 1.0) {
            return err("proxy_rank_frac must be in [0.001, 1]");
        }
        if self.tiers.is_empty() || self.tiers.iter().any(|t| !(1..=4).contains(t)) {
            return err("tiers must be a nonempty subset of 1..=4");
        }
        if self.warmup_repeat_weights.is_empty()
            || self.warmup_repeat_weights.iter().any(|w| *w < 0.0)
            || self.warmup_repeat_weights.iter().sum::<f64>() <= 0.0
        {
            return err("warmup_repeat_weights must be nonnegative with positive sum");
        }
        Ok(())
    }

    pub fn proxy_rank(&self, dim: usize) -> usize {
        ((self.proxy_rank_frac * dim as f64).round() as usize).clamp(1, dim)
    }
}

/// Which reward signal the trainer assembles (full method or an ablation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RewardVariant {
    Full,
    OutcomeOnly,
    /// Fitting gain replaced by a fixed heuristic score (oracle-trace token
    /// overlap), decoupling the reward from parameter information.
    ExternalGainStub,
    /// Compression penalty removed.
    NoCompression,
    /// SVD proxy replaced by a random coordinate subset of the given
    /// fraction, resampled at every refresh.
    RandomSubset(f64),
}

/// Expand content spans so every generated token (delimiters included)
/// belongs to exactly one episode for credit assignment: each episode claims
/// its opening delimiter, its closing delimiter, and anything trailing it
/// until the next episode starts.
pub fn credit_spans(tokens: &[Tok], content_spans: &[(usize, usize)]) -> Vec<(usize, usize)> {
    if content_spans.is_empty() {
        return vec![];
    }
    let mut out = Vec::with_capacity(content_spans.len());
    let mut start = 0usize;
    for (k, &(_, ce)) in content_spans.iter().enumerate() {
        let mut end = ce;
        if end < tokens.len() && tokens[end] == EP_CLOSE {
            end += 1;
        }
        if k + 1 == content_spans.len() {
            end = tokens.len();
        } else {
            // Claim stray delimiters up to the next episode's open.
            let next_start = content_spans[k + 1].0;
            while end < next_start && end < tokens.len() && tokens[end] != EP_OPEN {
                end += 1;
            }
            let mut next = content_spans[k + 1].0;
            if next > 0 && tokens[next - 1] == EP_OPEN && next - 1 >= end {
                next -= 1;
            }
            end = end.max(start).min(next);
            out.push((start, end));
            start = next;
            continue;
        }
        out.push((start, end));
        start = end;
    }
    out
}

/// Per-token rewards: within each episode, weights proportional to the
/// clamped log-probability surprise, normalized to sum to one, times the
/// episode reward. The per-episode sums equal the episode rewards exactly.
pub fn assign_token_rewards(
    per_token_logprob: &[f64],
    credit_spans: &[(usize, usize)],
    episode_rewards: &[f64],
) -> Vec<f64> {
    assert_eq!(credit_spans.len(), episode_rewards.len());
    let mut out = vec![0.0; per_token_logprob.len()];
    for (&(s, e), &r) in credit_spans.iter().zip(episode_rewards) {
        debug_assert!(s < e, "episodes have at least one token");
        let weights: Vec<f64> = per_token_logprob[s..e]
            .iter()
            .map(|lp| (-lp).max(SURPRISE_FLOOR))
            .collect();
        let z: f64 = weights.iter().sum();
        for (i, w) in weights.iter().enumerate() {
            out[s + i] = w / z * r;
        }
    }
    out
}

/// Mean after removing the top `ceil(frac * n)` values; falls back to the
/// plain mean when removal would empty the sequence.
pub fn truncated_mean(values: &[f64], trunc_fraction: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptySequence);
    }
    let n = values.len();
    let drop = ((trunc_fraction * n as f64).ceil() as usize).min(n);
    let kept = n - drop;
    if kept == 0 {
        return Ok(values.iter().sum::<f64>() / n as f64);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(sorted[drop..].iter().sum::<f64>() / kept as f64)
}

/// Standardize rollout scores within a group (population standard deviation
/// plus a small epsilon; all zeros when the spread vanishes).
pub fn group_advantages(truncated_means: &[f64], adv_epsilon: f64) -> Vec<f64> {
    let n = truncated_means.len() as f64;
    assert!(n >= 2.0, "groups have at least two rollouts");
    let mean = truncated_means.iter().sum::<f64>() / n;
    let var = truncated_means.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    truncated_means
        .iter()
        .map(|x| (x - mean) / (std + adv_epsilon))
        .collect()
}

/// Rescale a rollout's group advantage to its tokens by relative reward
/// contribution; uniform fallback when the truncated mean is near zero.
pub fn token_advantages(group_adv: f64, token_rewards: &[f64], trunc_mean: f64) -> Vec<f64> {
    if trunc_mean.abs() < MEAN_FLOOR {
        return vec![group_adv; token_rewards.len()];
    }
    token_rewards.iter().map(|r| group_adv * r / trunc_mean).collect()
}

/// One sampled rollout with everything the reward and update paths need.
#[derive(Debug, Clone)]
pub struct RolloutRecord {
    pub traj: Trajectory,
    /// Question followed by the generated tokens.
    pub full_seq: Vec<Tok>,
    pub gen_start: usize,
    pub r_out: u8,
    pub episode_rewards: Vec<EpisodeReward>,
    pub credit_spans: Vec<(usize, usize)>,
    pub token_rewards: Vec<f64>,
    pub trunc_mean: f64,
}

/// All rollouts for one task under one frozen snapshot.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub task: Task,
    pub rollouts: Vec<RolloutRecord>,
}

/// Heuristic stand-in for the fitting gain: largest token-overlap fraction
/// between the episode content and any oracle sub-step.
fn overlap_gain(tokens: &[Tok], span: (usize, usize), task: &Task) -> f64 {
    let content = crate::task::episode_content(tokens, span);
    if content.is_empty() {
        return 0.0;
    }
    let oracle_spans = segment_episodes(&task.oracle_trace_tokens);
    let mut best = 0.0f64;
    for os in oracle_spans {
        let oracle = crate::task::episode_content(&task.oracle_trace_tokens, os);
        let mut hits = 0usize;
        let mut pool = oracle.clone();
        for t in &content {
            if let Some(i) = pool.iter().position(|x| x == t) {
                pool.swap_remove(i);
                hits += 1;
            }
        }
        best = best.max(hits as f64 / content.len() as f64);
    }
    best
}

/// Sample one rollout under the frozen policy and assemble its episode and
/// token rewards. The probe evaluations reuse the sampler's cache.
pub fn collect_rollout(
    policy: &Policy,
    task: &Task,
    basis: &ProxyBasis,
    cfg: &TrainConfig,
    variant: RewardVariant,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<RolloutRecord> {
    let sp = policy.special();
    let head = policy.head_span();
    let vocab = policy.vocab();
    let mut eval = Sampler::new(policy, &task.question_tokens);
    let gen_start = task.question_tokens.len();

    let mut tokens: Vec<Tok> = Vec::new();
    let mut lps: Vec<f64> = Vec::new();
    let mut head_grads: Vec<Vec<f64>> = Vec::new();
    let need_penalty = matches!(
        variant,
        RewardVariant::Full | RewardVariant::ExternalGainStub | RewardVariant::RandomSubset(_)
    );
    let mut truncated = true;
    let mut closes = 0usize;
    loop {
        let logprobs = eval.next_logprobs();
        if need_penalty {
            let feat = eval.feature_at(eval.len());
            head_grads.push(head_grad(&logprobs, &feat, vocab, head.len()));
        }
        let tok = crate::policy::sample_from_logprobs(&logprobs, rng);
        tokens.push(tok);
        lps.push(logprobs[tok as usize]);
        eval.push(tok);
        if need_penalty {
            // Turn the distribution gradient into the sampled token's score.
            let g = head_grads.last_mut().expect("just pushed");
            finalize_head_grad(g, tok, &logprobs, vocab, head.len());
        }
        if tok == sp.eos {
            truncated = false;
            break;
        }
        if tok == EP_CLOSE {
            closes += 1;
            if closes >= cfg.max_episodes {
                break;
            }
        }
        if tokens.len() >= cfg.token_budget {
            break;
        }
    }

    let content_spans = segment_episodes(&tokens);
    let spans = credit_spans(&tokens, &content_spans);
    let k_count = spans.len().max(1);
    let r_out = outcome_reward_tokens(&tokens, task);
    let rcfg = cfg.reward();

    // Correctness probability at an episode boundary, from the cache.
    let jr_at = |prefix_gen: usize, own_answer_mark: Option<usize>| -> f64 {
        let mut chain: Vec<Tok> = Vec::with_capacity(task.oracle_answer_tokens.len() + 2);
        let prefix_len;
        match own_answer_mark {
            Some(pos) => {
                prefix_len = gen_start + pos + 1;
            }
            None => {
                prefix_len = gen_start + prefix_gen;
                chain.push(sp.answer);
            }
        }
        let scored_from = chain.len();
        chain.extend_from_slice(&task.oracle_answer_tokens);
        chain.push(sp.eos);
        let lps = eval.probe_chain(prefix_len, &chain);
        let scored = &lps[scored_from..];
        (scored.iter().sum::<f64>() / scored.len() as f64).exp()
    };

    let mut episode_rewards = Vec::with_capacity(spans.len());
    let mut prev_j = match variant {
        RewardVariant::OutcomeOnly => 0.0,
        _ => jr_at(0, None),
    };
    for (k, &(s, e)) in spans.iter().enumerate() {
        let (gain, penalty) = match variant {
            RewardVariant::OutcomeOnly => (0.0, 0.0),
            _ => {
                let gain = if matches!(variant, RewardVariant::ExternalGainStub) {
                    overlap_gain(&tokens, (s, e), task)
                } else {
                    let mark = tokens[s..e]
                        .iter()
                        .rposition(|&t| t == ANSWER_MARK)
                        .map(|p| s + p);
                    let j = jr_at(e, mark);
                    let g = j - prev_j;
                    prev_j = j;
                    g
                };
                let penalty = if need_penalty && cfg.beta > 0.0 {
                    let grads = &head_grads[s..e];
                    let delta = virtual_update(grads, rcfg.virtual_step);
                    compression_penalty(basis, &delta, grads, rcfg.damping)?
                } else {
                    0.0
                };
                (gain, penalty)
            }
        };
        let r_prg = match variant {
            RewardVariant::OutcomeOnly => 0.0,
            RewardVariant::NoCompression => gain,
            _ => process_reward(gain, penalty, rcfg.beta),
        };
        let combined = match variant {
            RewardVariant::OutcomeOnly => f64::from(r_out) / k_count as f64,
            _ => episode_reward(r_out, k_count, rcfg.alpha, r_prg)?,
        };
        episode_rewards.push(EpisodeReward {
            episode_index: k + 1,
            fitting_gain: gain,
            compression_penalty: penalty,
            process_reward: r_prg,
            combined,
        });
    }

    let combined: Vec<f64> = episode_rewards.iter().map(|e| e.combined).collect();
    let token_rewards = assign_token_rewards(&lps, &spans, &combined);
    let trunc_mean = truncated_mean(&token_rewards, cfg.trunc_fraction)?;

    let traj = Trajectory {
        task_id: task.id,
        episode_spans: content_spans,
        token_count: tokens.len(),
        per_token_logprob: lps,
        truncated,
        tokens: tokens.clone(),
    };
    let mut full_seq = task.question_tokens.clone();
    full_seq.extend_from_slice(&tokens);
    Ok(RolloutRecord {
        traj,
        full_seq,
        gen_start,
        r_out,
        episode_rewards,
        credit_spans: spans,
        token_rewards,
        trunc_mean,
    })
}

fn head_grad(logprobs: &[f64], feat: &[f64], vocab: usize, head_dim: usize) -> Vec<f64> {
    // Stores -p_v * phi for all v; the sampled token's row is fixed up later.
    let f = head_dim / vocab;
    debug_assert_eq!(feat.len(), f);
    let mut g = vec![0.0; head_dim];
    for v in 0..vocab {
        let p = logprobs[v].exp();
        let row = &mut g[v * f..(v + 1) * f];
        for (r, &x) in row.iter_mut().zip(feat) {
            *r = -p * x;
        }
    }
    g
}

fn finalize_head_grad(g: &mut [f64], tok: Tok, logprobs: &[f64], vocab: usize, head_dim: usize) {
    let f = head_dim / vocab;
    let v = tok as usize;
    let p = logprobs[v].exp();
    let row = &mut g[v * f..(v + 1) * f];
    for r in row.iter_mut() {
        // row currently holds -p*phi; the sampled row needs (1-p)*phi.
        if p > 0.0 {
            *r = *r * (1.0 - p) / (-p);
        }
    }
}

/// Diagnostics of one policy-gradient step.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepDiag {
    pub loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub kl: f64,
}

/// Inputs to the update for one rollout.
#[derive(Debug, Clone)]
pub struct UpdateRollout {
    pub full_seq: Vec<Tok>,
    pub gen_start: usize,
    pub token_advantages: Vec<f64>,
}

/// Surrogate objective over cached quantities:
/// `sum_t min(rho_t A_t, clip(rho_t) A_t) - kl_coeff * mean_t(rho - ln rho - 1)`.
/// Returns the loss, per-token gradient coefficients (the weight each score
/// gradient receives), and diagnostics.
pub fn surrogate_terms(
    new_lps: &[Vec<f64>],
    old_lps: &[Vec<f64>],
    advs: &[Vec<f64>],
    clip_epsilon: f64,
    kl_coeff: f64,
) -> Result<(f64, Vec<Vec<f64>>, StepDiag)> {
    let total_tokens: usize = new_lps.iter().map(|v| v.len()).sum();
    assert!(total_tokens > 0);
    let nt = total_tokens as f64;
    let mut surr = 0.0;
    let mut kl_sum = 0.0;
    let mut ratio_sum = 0.0;
    let mut clipped = 0usize;
    let mut coeffs: Vec<Vec<f64>> = Vec::with_capacity(new_lps.len());
    for ((nl, ol), a) in new_lps.iter().zip(old_lps).zip(advs) {
        let mut c = Vec::with_capacity(nl.len());
        for ((&lpn, &lpo), &adv) in nl.iter().zip(ol).zip(a) {
            let rho = (lpn - lpo).exp();
            ratio_sum += rho;
            kl_sum += rho - (lpn - lpo) - 1.0;
            let lo = 1.0 - clip_epsilon;
            let hi = 1.0 + clip_epsilon;
            let unclipped = rho * adv;
            let clipped_val = rho.clamp(lo, hi) * adv;
            surr += unclipped.min(clipped_val);
            // Gradient of min(rho A, clip(rho) A) wrt log-prob, plus the KL
            // penalty gradient -(rho - 1)/nt.
            let surr_active = if adv > 0.0 {
                rho <= hi
            } else if adv < 0.0 {
                rho >= lo
            } else {
                false
            };
            if (adv > 0.0 && rho > hi) || (adv < 0.0 && rho < lo) {
                clipped += 1;
            }
            let mut coeff = if surr_active { adv * rho } else { 0.0 };
            coeff -= kl_coeff * (rho - 1.0) / nt;
            c.push(coeff);
        }
        coeffs.push(c);
    }
    if !surr.is_finite() {
        return Err(Error::NonFinite { term: "clipped surrogate".into() });
    }
    if !kl_sum.is_finite() {
        return Err(Error::NonFinite { term: "kl penalty".into() });
    }
    let kl = kl_sum / nt;
    let loss = surr - kl_coeff * kl;
    Ok((
        loss,
        coeffs,
        StepDiag {
            loss,
            mean_ratio: ratio_sum / nt,
            clip_fraction: clipped as f64 / nt,
            kl,
        },
    ))
}

/// One gradient-ascent step on the clipped surrogate with KL penalty.
/// Old-policy log-probabilities are recomputed from the snapshot through the
/// same code path as the new ones, so the identity case is exact.
pub fn policy_update(
    policy: &Policy,
    old_policy: &Policy,
    rollouts: &[UpdateRollout],
    cfg: &TrainConfig,
) -> Result<(Policy, StepDiag)> {
    let new_lps: Vec<Vec<f64>> = rollouts
        .iter()
        .map(|r| policy.seq_logprobs(&r.full_seq, r.gen_start))
        .collect();
    let old_lps: Vec<Vec<f64>> = rollouts
        .iter()
        .map(|r| old_policy.seq_logprobs(&r.full_seq, r.gen_start))
        .collect();
    let advs: Vec<Vec<f64>> = rollouts.iter().map(|r| r.token_advantages.clone()).collect();
    let (_, coeffs, diag) =
        surrogate_terms(&new_lps, &old_lps, &advs, cfg.clip_epsilon, cfg.kl_coeff)?;

    let mut grad = vec![0.0; policy.dim()];
    for (r, c) in rollouts.iter().zip(&coeffs) {
        let g = policy.weighted_score_grad(&r.full_seq, r.gen_start, c);
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let mut new_policy = policy.clone();
    let decay = cfg.learning_rate * cfg.weight_decay;
    for (v, g) in new_policy.values.iter_mut().zip(&grad) {
        *v += cfg.learning_rate * g - decay * *v;
    }
    new_policy.validate()?;
    Ok((new_policy, diag))
}

/// One metrics record per trainer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub mean_r_out: f64,
    pub mean_tokens: f64,
    pub mean_dI: f64,
    pub mean_C: f64,
    pub clip_frac: f64,
    pub kl: f64,
}

impl MetricsRow {
    pub fn line(&self) -> String {
        serde_json::to_string(self).expect("metrics row serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub policy: Policy,
    pub metrics: Vec<MetricsRow>,
    /// Per-step wall-clock time, reported separately from the deterministic
    /// metrics records.
    pub wall_ms: Vec<u64>,
    /// Reward-trace lines for the last completed step.
    pub last_step_traces: Vec<crate::reward::RewardTraceRecord>,
    /// Populated when a step aborted; training halted early.
    pub aborted: Option<String>,
}

/// Sample a training task for (step, slot).
pub fn sample_task(cfg: &TrainConfig, step: u64, slot: u64) -> Task {
    let mut rng = rng::stream(cfg.seed, &[domain::TASK_GEN, step, slot]);
    let tier = cfg.tiers[rng.gen_range(0..cfg.tiers.len())];
    generate_task_with(rng.gen::<u64>(), tier, cfg.op_set)
}

/// Supervised warmup on rendered traces with redundant verification
/// episodes, so the starting policy already produces well-formed but
/// over-long reasoning. Adam, teacher-forced.
pub fn behavior_cloning_warmup(policy: &mut Policy, cfg: &TrainConfig) {
    if cfg.warmup_steps == 0 {
        return;
    }
    let d = policy.dim();
    let mut m = vec![0.0; d];
    let mut v = vec![0.0; d];
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let wsum: f64 = cfg.warmup_repeat_weights.iter().sum();
    for step in 0..cfg.warmup_steps {
        let mut grad = vec![0.0; d];
        let mut total_tokens = 0usize;
        let mut batch = Vec::with_capacity(cfg.warmup_batch);
        for i in 0..cfg.warmup_batch {
            let mut rng = rng::stream(cfg.seed, &[domain::WARMUP, step, i as u64]);
            let tier = cfg.tiers[rng.gen_range(0..cfg.tiers.len())];
            let task = generate_task_with(rng.gen::<u64>(), tier, cfg.op_set);
            let mut u: f64 = rng.gen::<f64>() * wsum;
            let mut repeats = 0usize;
            for (r, w) in cfg.warmup_repeat_weights.iter().enumerate() {
                u -= w;
                if u < 0.0 {
                    repeats = r;
                    break;
                }
            }
            let mut seq = task.question_tokens.clone();
            seq.extend(render_trace(task.start, &task.steps, &task.values, repeats));
            seq.push(crate::vocab::EOS);
            total_tokens += seq.len() - task.question_tokens.len();
            batch.push((seq, task.question_tokens.len()));
        }
        for (seq, start) in &batch {
            let coeffs = vec![1.0 / total_tokens as f64; seq.len() - start];
            let g = policy.weighted_score_grad(seq, *start, &coeffs);
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let t = (step + 1) as i32;
        for i in 0..d {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            policy.values[i] += cfg.warmup_lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Run the training loop from a given starting policy.
pub fn train_from(mut policy: Policy, cfg: &TrainConfig, variant: RewardVariant) -> Result<TrainOutput> {
    cfg.validate()?;
    policy.validate()?;
    let head_dim = policy.head_span().len();
    let rank = match variant {
        RewardVariant::RandomSubset(frac) => {
            (((frac * head_dim as f64).round() as usize).max(1)).min(head_dim)
        }
        _ => cfg.proxy_rank(head_dim),
    };
    let mut basis = ProxyBasis::identity(head_dim, rank);
    let mut history: std::collections::VecDeque<Vec<f64>> =
        std::collections::VecDeque::with_capacity(cfg.proxy_window);

    let pool = (cfg.threads > 1).then(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .expect("thread pool")
    });

    let mut metrics = Vec::with_capacity(cfg.steps as usize);
    let mut wall_ms = Vec::with_capacity(cfg.steps as usize);
    let mut last_step_traces = Vec::new();
    let mut aborted = None;

    for step in 1..=cfg.steps {
        let t0 = std::time::Instant::now();
        // Refresh the proxy from recent update deltas.
        if (step - 1) % cfg.proxy_refresh == 0 {
            match variant {
                RewardVariant::RandomSubset(_) => {
                    let mut rng = rng::stream(cfg.seed, &[domain::PROXY, step]);
                    let mut coords: Vec<usize> = (0..head_dim).collect();
                    for i in (1..coords.len()).rev() {
                        let j = rng.gen_range(0..=i);
                        coords.swap(i, j);
                    }
                    coords.truncate(rank);
                    coords.sort_unstable();
                    basis = ProxyBasis::coordinate_subset(head_dim, &coords, step);
                }
                _ => {
                    if !history.is_empty() {
                        let cols: Vec<Vec<f64>> = history.iter().cloned().collect();
                        let r = rank.min(cols.len());
                        if let Ok(b) = fit_basis(&cols, r, step) {
                            basis = b;
                        }
                        // A degenerate (all-zero) history keeps the previous basis.
                    }
                }
            }
        }

        let old = policy.clone();
        let tasks: Vec<Task> = (0..cfg.batch_size)
            .map(|i| sample_task(cfg, step, i as u64))
            .collect();
        let jobs: Vec<(usize, usize)> = (0..tasks.len())
            .flat_map(|ti| (0..cfg.group_size).map(move |j| (ti, j)))
            .collect();
        let run_job = |&(ti, j): &(usize, usize)| -> Result<RolloutRecord> {
            let mut rng = rng::stream(cfg.seed, &[domain::ROLLOUT, step, ti as u64, j as u64]);
            collect_rollout(&old, &tasks[ti], &basis, cfg, variant, &mut rng)
        };
        let collected: Result<Vec<RolloutRecord>> = match &pool {
            Some(p) => p.install(|| jobs.par_iter().map(run_job).collect()),
            None => jobs.iter().map(run_job).collect(),
        };
        let collected = match collected {
            Ok(c) => c,
            Err(e) => {
                aborted = Some(format!("step {step}: {e}"));
                break;
            }
        };

        // Group advantages per task, then token advantages.
        let mut updates = Vec::with_capacity(collected.len());
        let mut r_out_sum = 0.0;
        let mut tok_sum = 0.0;
        let mut gain_sum = 0.0;
        let mut pen_sum = 0.0;
        let mut episode_count = 0usize;
        for (ti, group) in collected.chunks(cfg.group_size).enumerate() {
            debug_assert!(group.iter().all(|r| r.traj.task_id == tasks[ti].id));
            let means: Vec<f64> = group.iter().map(|r| r.trunc_mean).collect();
            let advs = group_advantages(&means, cfg.adv_epsilon);
            for (r, &a) in group.iter().zip(&advs) {
                r_out_sum += f64::from(r.r_out);
                tok_sum += r.traj.token_count as f64;
                for er in &r.episode_rewards {
                    gain_sum += er.fitting_gain;
                    pen_sum += er.compression_penalty;
                    episode_count += 1;
                }
                updates.push(UpdateRollout {
                    full_seq: r.full_seq.clone(),
                    gen_start: r.gen_start,
                    token_advantages: token_advantages(a, &r.token_rewards, r.trunc_mean),
                });
            }
        }

        let (new_policy, diag) = match policy_update(&policy, &old, &updates, cfg) {
            Ok(x) => x,
            Err(e) => {
                aborted = Some(format!("step {step}: {e}"));
                break;
            }
        };
        // Record the head-block update delta for the proxy history.
        let span = policy.head_span();
        let delta: Vec<f64> = new_policy.values[span.clone()]
            .iter()
            .zip(&policy.values[span])
            .map(|(n, o)| n - o)
            .collect();
        if history.len() == cfg.proxy_window {
            history.pop_front();
        }
        history.push_back(delta);
        policy = new_policy;

        let n_rollouts = collected.len() as f64;
        metrics.push(MetricsRow {
            step,
            mean_r_out: r_out_sum / n_rollouts,
            mean_tokens: tok_sum / n_rollouts,
            mean_dI: gain_sum / episode_count.max(1) as f64,
            mean_C: pen_sum / episode_count.max(1) as f64,
            clip_frac: diag.clip_fraction,
            kl: diag.kl,
        });
        wall_ms.push(t0.elapsed().as_millis() as u64);
        if step == cfg.steps {
            last_step_traces = collected
                .iter()
                .enumerate()
                .flat_map(|(i, r)| {
                    r.episode_rewards.iter().map(move |er| crate::reward::RewardTraceRecord {
                        task_id: r.traj.task_id,
                        rollout_id: i as u64,
                        k: er.episode_index,
                        fitting_gain: er.fitting_gain,
                        compression_penalty: er.compression_penalty,
                        process_reward: er.process_reward,
                        combined: er.combined,
                    })
                })
                .collect();
        }
    }

    Ok(TrainOutput { policy, metrics, wall_ms, last_step_traces, aborted })
}

/// Full run: initialize (checkpoint or seeded init), warm up, then train.
pub fn train(cfg: &TrainConfig, variant: RewardVariant) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut policy = match &cfg.init_checkpoint {
        Some(path) => {
            let mut f = std::fs::File::open(path).map_err(|e| {
                Error::Checkpoint(format!("cannot open init checkpoint {path}: {e}"))
            })?;
            crate::policy::load_checkpoint(&mut f)?
        }
        None => Policy::init(cfg.policy.arch_meta(crate::vocab::VOCAB_SIZE), cfg.seed),
    };
    if cfg.steps == 0 {
        return Ok(TrainOutput {
            policy,
            metrics: vec![],
            wall_ms: vec![],
            last_step_traces: vec![],
            aborted: None,
        });
    }
    if cfg.init_checkpoint.is_none() {
        behavior_cloning_warmup(&mut policy, cfg);
    }
    train_from(policy, cfg, variant)
}

#[cfg(test)]
mod tests;
