//! Linear-softmax policy: logits are a linear map of windowed token features.
//!
//! Features are position-wise one-hots of the last `order` context tokens
//! (with a dedicated "absent" slot for short contexts) plus a bias. The
//! score gradient is the classic softmax identity `phi ⊗ (onehot − p)`,
//! which is what makes this architecture the anchor for the exact oracles.

use crate::vocab::Tok;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearMeta {
    pub vocab: usize,
    /// Number of trailing context tokens used as features.
    pub order: usize,
}

impl LinearMeta {
    pub fn new(vocab: usize, order: usize) -> Self {
        Self { vocab, order }
    }

    /// One group of size `vocab + 1` per context slot, plus a bias feature.
    pub fn feature_dim(&self) -> usize {
        self.order * (self.vocab + 1) + 1
    }

    pub fn param_dim(&self) -> usize {
        self.vocab * self.feature_dim()
    }

    pub fn init_values(&self, _rng: &mut ChaCha8Rng) -> Vec<f64> {
        // Zero weights give the uniform distribution for every context.
        vec![0.0; self.param_dim()]
    }

    /// Indices of the active features for a context (all have weight 1).
    pub fn active_features(&self, context: &[Tok]) -> Vec<usize> {
        let v = self.vocab;
        let mut idx = Vec::with_capacity(self.order + 1);
        for slot in 0..self.order {
            // slot 0 is the last token, slot 1 the one before, ...
            let tok = if slot < context.len() {
                let t = context[context.len() - 1 - slot] as usize;
                debug_assert!(t < v, "token out of vocab");
                t
            } else {
                v // absent
            };
            idx.push(slot * (v + 1) + tok);
        }
        idx.push(self.feature_dim() - 1); // bias
        idx
    }

    fn logits(&self, values: &[f64], active: &[usize]) -> Vec<f64> {
        let f = self.feature_dim();
        (0..self.vocab)
            .map(|t| active.iter().map(|&j| values[t * f + j]).sum())
            .collect()
    }

    pub fn logprobs(&self, values: &[f64], context: &[Tok]) -> Vec<f64> {
        let active = self.active_features(context);
        log_softmax(&self.logits(values, &active))
    }

    pub fn grad_logprob(&self, values: &[f64], context: &[Tok], token: Tok) -> Vec<f64> {
        let active = self.active_features(context);
        let lp = log_softmax(&self.logits(values, &active));
        let f = self.feature_dim();
        let mut g = vec![0.0; self.param_dim()];
        for t in 0..self.vocab {
            let coeff = f64::from(t == token as usize) - lp[t].exp();
            for &j in &active {
                g[t * f + j] = coeff;
            }
        }
        g
    }

    pub fn seq_logprobs(&self, values: &[f64], seq: &[Tok], start: usize) -> Vec<f64> {
        (start..seq.len())
            .map(|i| self.logprobs(values, &seq[..i])[seq[i] as usize])
            .collect()
    }

    pub fn weighted_score_grad(
        &self,
        values: &[f64],
        seq: &[Tok],
        start: usize,
        coeffs: &[f64],
    ) -> Vec<f64> {
        let f = self.feature_dim();
        let mut g = vec![0.0; self.param_dim()];
        for (i, &c) in (start..seq.len()).zip(coeffs) {
            if c == 0.0 {
                continue;
            }
            let active = self.active_features(&seq[..i]);
            let lp = log_softmax(&self.logits(values, &active));
            let z = seq[i] as usize;
            for t in 0..self.vocab {
                let coeff = c * (f64::from(t == z) - lp[t].exp());
                for &j in &active {
                    g[t * f + j] += coeff;
                }
            }
        }
        g
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|x| x - lse).collect()
}

/// Stateless incremental evaluator; the "cache" is just the context itself.
pub struct LinearEval<'a> {
    meta: &'a LinearMeta,
    values: &'a [f64],
    ctx: Vec<Tok>,
}

impl<'a> LinearEval<'a> {
    pub fn new(meta: &'a LinearMeta, values: &'a [f64], prompt: &[Tok]) -> Self {
        Self { meta, values, ctx: prompt.to_vec() }
    }

    pub fn next_logprobs(&mut self) -> Vec<f64> {
        self.meta.logprobs(self.values, &self.ctx)
    }

    pub fn push(&mut self, tok: Tok) {
        self.ctx.push(tok);
    }

    pub fn len(&self) -> usize {
        self.ctx.len()
    }

    /// Feature one-hot expanded to a dense vector, matching the layout the
    /// output head sees (by convention, the head block for this architecture
    /// is the whole weight matrix, so features are the full phi vector).
    pub fn feature_at(&self, pos: usize) -> Vec<f64> {
        let active = self.meta.active_features(&self.ctx[..pos]);
        let mut phi = vec![0.0; self.meta.feature_dim()];
        for j in active {
            phi[j] = 1.0;
        }
        phi
    }

    pub fn probe_chain(&self, prefix_len: usize, chain: &[Tok]) -> Vec<f64> {
        let mut seq: Vec<Tok> = self.ctx[..prefix_len].to_vec();
        let start = seq.len();
        seq.extend_from_slice(chain);
        self.meta.seq_logprobs(self.values, &seq, start)
    }
}
