//! Small causal attention policy with in-repo reverse-mode accumulation.
//!
//! Pre-norm residual blocks (RMSNorm with learned gain), multi-head causal
//! attention with learned absolute position embeddings, a SiLU MLP and an
//! untied output head. Contexts longer than the window are truncated to the
//! last `w_ctx` tokens with positions rebased, so every conditional is a
//! function of the window content only.
//!
//! The backward pass stores forward activations per position and replays the
//! chain rule by hand; it accumulates `sum_t c_t * grad log p(z_t | prefix)`
//! for arbitrary per-token coefficients, which covers both teacher forcing
//! and the policy-gradient surrogate.

use super::linear::log_softmax;
use crate::vocab::Tok;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttnMeta {
    pub vocab: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_inner: usize,
    pub layers: usize,
    pub w_ctx: usize,
}

#[derive(Debug, Clone, Copy)]
struct LayerOff {
    ln1: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2: usize,
    w1: usize,
    w2: usize,
}

impl AttnMeta {
    pub fn new(vocab: usize, dim: usize, heads: usize, mlp_inner: usize, layers: usize, w_ctx: usize) -> Self {
        assert!(dim % heads == 0, "dim must be divisible by heads");
        assert!((1..=2).contains(&layers), "layers must be 1 or 2");
        Self { vocab, dim, heads, mlp_inner, layers, w_ctx }
    }

    fn layer_off(&self, l: usize) -> LayerOff {
        let (v, h, inner) = (self.vocab, self.dim, self.mlp_inner);
        let per_layer = h + 4 * h * h + h + inner * h + h * inner;
        let base = v * h + self.w_ctx * h + l * per_layer;
        let ln1 = base;
        let wq = ln1 + h;
        let wk = wq + h * h;
        let wv = wk + h * h;
        let wo = wv + h * h;
        let ln2 = wo + h * h;
        let w1 = ln2 + h;
        let w2 = w1 + inner * h;
        LayerOff { ln1, wq, wk, wv, wo, ln2, w1, w2 }
    }

    fn lnf_off(&self) -> usize {
        let (h, inner) = (self.dim, self.mlp_inner);
        let per_layer = h + 4 * h * h + h + inner * h + h * inner;
        self.vocab * h + self.w_ctx * h + self.layers * per_layer
    }

    fn out_off(&self) -> usize {
        self.lnf_off() + self.dim
    }

    pub fn param_dim(&self) -> usize {
        self.out_off() + self.vocab * self.dim
    }

    pub fn head_span(&self) -> std::ops::Range<usize> {
        self.out_off()..self.param_dim()
    }

    pub fn init_values(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut vals = vec![0.0; self.param_dim()];
        let h = self.dim;
        let normal = |rng: &mut ChaCha8Rng, std: f64| -> f64 {
            // Box-Muller; two uniforms per draw keeps the stream simple.
            let u1: f64 = rng.gen::<f64>().max(1e-12);
            let u2: f64 = rng.gen();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let emb_std = 0.5;
        let mat_std = 1.0 / (h as f64).sqrt();
        for i in 0..self.vocab * h + self.w_ctx * h {
            vals[i] = normal(rng, emb_std);
        }
        for l in 0..self.layers {
            let off = self.layer_off(l);
            for i in 0..h {
                vals[off.ln1 + i] = 1.0;
                vals[off.ln2 + i] = 1.0;
            }
            for i in 0..h * h {
                vals[off.wq + i] = normal(rng, mat_std);
                vals[off.wk + i] = normal(rng, mat_std);
                vals[off.wv + i] = normal(rng, mat_std);
                // wo starts at zero so each block is the identity initially.
            }
            for i in 0..self.mlp_inner * h {
                vals[off.w1 + i] = normal(rng, mat_std);
                // w2 starts at zero, same reason.
            }
        }
        for i in 0..h {
            vals[self.lnf_off() + i] = 1.0;
        }
        // w_out stays zero: the initial policy is uniform.
        vals
    }

    fn window<'s>(&self, context: &'s [Tok]) -> &'s [Tok] {
        if context.len() > self.w_ctx {
            &context[context.len() - self.w_ctx..]
        } else {
            context
        }
    }

    pub fn logprobs(&self, values: &[f64], context: &[Tok]) -> Vec<f64> {
        let win = self.window(context);
        let fwd = Forward::run(self, values, win);
        log_softmax(&fwd.logits[win.len() - 1])
    }

    pub fn seq_logprobs(&self, values: &[f64], seq: &[Tok], start: usize) -> Vec<f64> {
        assert!(start >= 1, "cannot score the first token of a sequence");
        if seq.len() <= self.w_ctx + 1 {
            let fwd = Forward::run(self, values, &seq[..seq.len() - 1]);
            (start..seq.len())
                .map(|i| log_softmax(&fwd.logits[i - 1])[seq[i] as usize])
                .collect()
        } else {
            // Windowed fallback: score each position against its own window.
            (start..seq.len())
                .map(|i| self.logprobs(values, &seq[..i])[seq[i] as usize])
                .collect()
        }
    }

    pub fn grad_logprob(&self, values: &[f64], context: &[Tok], token: Tok) -> Vec<f64> {
        let mut seq = self.window(context).to_vec();
        seq.push(token);
        self.weighted_score_grad(values, &seq, seq.len() - 1, &[1.0])
    }

    pub fn weighted_score_grad(
        &self,
        values: &[f64],
        seq: &[Tok],
        start: usize,
        coeffs: &[f64],
    ) -> Vec<f64> {
        assert!(start >= 1);
        assert_eq!(seq.len() - start, coeffs.len());
        assert!(
            seq.len() <= self.w_ctx + 1,
            "sequence of length {} exceeds context window {}",
            seq.len(),
            self.w_ctx
        );
        let t_fwd = seq.len() - 1;
        let fwd = Forward::run(self, values, &seq[..t_fwd]);
        // d(logits) at forward index i scoring target seq[i + 1].
        let mut dlogits = vec![vec![0.0; self.vocab]; t_fwd];
        for (i, &c) in (start..seq.len()).zip(coeffs) {
            if c == 0.0 {
                continue;
            }
            let lp = log_softmax(&fwd.logits[i - 1]);
            let z = seq[i] as usize;
            for t in 0..self.vocab {
                dlogits[i - 1][t] = c * (f64::from(t == z) - lp[t].exp());
            }
        }
        fwd.backward(self, values, &dlogits)
    }
}

/// Per-position, per-layer activations retained for the backward pass.
struct LayerTrace {
    ln1_xhat: Vec<Vec<f64>>,
    ln1_r: Vec<f64>,
    h1: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Attention weights per position per head, flattened `[head][j]`.
    aw: Vec<Vec<f64>>,
    ctx: Vec<Vec<f64>>,
    x_mid: Vec<Vec<f64>>,
    ln2_xhat: Vec<Vec<f64>>,
    ln2_r: Vec<f64>,
    h2: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
    x_out: Vec<Vec<f64>>,
}

struct Forward {
    tokens: Vec<Tok>,
    layers: Vec<LayerTrace>,
    lnf_xhat: Vec<Vec<f64>>,
    lnf_r: Vec<f64>,
    hf: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
}

fn rmsnorm(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let ms = x.iter().map(|v| v * v).sum::<f64>() / n;
    let r = 1.0 / (ms + NORM_EPS).sqrt();
    (x.iter().map(|v| v * r).collect(), r)
}

/// dx for y_hat = x * r given d(y_hat), the stored x_hat and r.
fn rmsnorm_bwd(dxhat: &[f64], xhat: &[f64], r: f64) -> Vec<f64> {
    let n = xhat.len() as f64;
    let dot: f64 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum();
    dxhat
        .iter()
        .zip(xhat)
        .map(|(d, xh)| r * (d - xh * dot / n))
        .collect()
}

fn matvec(w: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        y[r] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
    y
}

/// dW += dy ⊗ x and dx += W^T dy.
fn matvec_bwd(w: &[f64], x: &[f64], dy: &[f64], dw: &mut [f64], dx: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        let drow = &mut dw[r * cols..(r + 1) * cols];
        for c in 0..cols {
            drow[c] += g * x[c];
            dx[c] += g * row[c];
        }
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_deriv(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl Forward {
    fn run(meta: &AttnMeta, values: &[f64], tokens: &[Tok]) -> Forward {
        let t_len = tokens.len();
        assert!(t_len <= meta.w_ctx, "forward length exceeds window");
        let (h, nh) = (meta.dim, meta.heads);
        let dh = h / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut fwd = Forward {
            tokens: tokens.to_vec(),
            layers: (0..meta.layers)
                .map(|_| LayerTrace {
                    ln1_xhat: vec![],
                    ln1_r: vec![],
                    h1: vec![],
                    q: vec![],
                    k: vec![],
                    v: vec![],
                    aw: vec![],
                    ctx: vec![],
                    x_mid: vec![],
                    ln2_xhat: vec![],
                    ln2_r: vec![],
                    h2: vec![],
                    u: vec![],
                    act: vec![],
                    x_out: vec![],
                })
                .collect(),
            lnf_xhat: vec![],
            lnf_r: vec![],
            hf: vec![],
            logits: vec![],
        };
        for (t, &tok) in tokens.iter().enumerate() {
            let mut x: Vec<f64> = (0..h)
                .map(|i| values[tok as usize * h + i] + values[meta.vocab * h + t * h + i])
                .collect();
            for l in 0..meta.layers {
                let off = meta.layer_off(l);
                let tr = &mut fwd.layers[l];
                let (xhat, r) = rmsnorm(&x);
                let h1: Vec<f64> = (0..h).map(|i| xhat[i] * values[off.ln1 + i]).collect();
                let q = matvec(&values[off.wq..off.wq + h * h], &h1, h, h);
                let k = matvec(&values[off.wk..off.wk + h * h], &h1, h, h);
                let v = matvec(&values[off.wv..off.wv + h * h], &h1, h, h);
                tr.ln1_xhat.push(xhat);
                tr.ln1_r.push(r);
                tr.h1.push(h1);
                tr.k.push(k);
                tr.v.push(v);
                // Causal attention over cached positions 0..=t.
                let mut aw_flat = vec![0.0; nh * (t + 1)];
                let mut ctx = vec![0.0; h];
                for head in 0..nh {
                    let qs = &q[head * dh..(head + 1) * dh];
                    let mut scores = vec![0.0; t + 1];
                    for j in 0..=t {
                        let ks = &tr.k[j][head * dh..(head + 1) * dh];
                        scores[j] = qs.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - m).exp();
                        z += *s;
                    }
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s /= z;
                        aw_flat[head * (t + 1) + j] = *s;
                        let vs = &tr.v[j][head * dh..(head + 1) * dh];
                        for i in 0..dh {
                            ctx[head * dh + i] += *s * vs[i];
                        }
                    }
                }
                tr.q.push(q);
                tr.aw.push(aw_flat);
                let ao = matvec(&values[off.wo..off.wo + h * h], &ctx, h, h);
                tr.ctx.push(ctx);
                for i in 0..h {
                    x[i] += ao[i];
                }
                tr.x_mid.push(x.clone());
                let (xhat2, r2) = rmsnorm(&x);
                let h2: Vec<f64> = (0..h).map(|i| xhat2[i] * values[off.ln2 + i]).collect();
                let u = matvec(&values[off.w1..off.w1 + meta.mlp_inner * h], &h2, meta.mlp_inner, h);
                let act: Vec<f64> = u.iter().map(|&z| silu(z)).collect();
                let m = matvec(&values[off.w2..off.w2 + h * meta.mlp_inner], &act, h, meta.mlp_inner);
                tr.ln2_xhat.push(xhat2);
                tr.ln2_r.push(r2);
                tr.h2.push(h2);
                tr.u.push(u);
                tr.act.push(act);
                for i in 0..h {
                    x[i] += m[i];
                }
                tr.x_out.push(x.clone());
            }
            let (xhatf, rf) = rmsnorm(&x);
            let lnf = meta.lnf_off();
            let hf: Vec<f64> = (0..h).map(|i| xhatf[i] * values[lnf + i]).collect();
            let out = meta.out_off();
            let logits = matvec(&values[out..out + meta.vocab * h], &hf, meta.vocab, h);
            fwd.lnf_xhat.push(xhatf);
            fwd.lnf_r.push(rf);
            fwd.hf.push(hf);
            fwd.logits.push(logits);
        }
        fwd
    }

    fn backward(&self, meta: &AttnMeta, values: &[f64], dlogits: &[Vec<f64>]) -> Vec<f64> {
        let t_len = self.tokens.len();
        let (h, nh, inner) = (meta.dim, meta.heads, meta.mlp_inner);
        let dh = h / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut grad = vec![0.0; meta.param_dim()];
        // Residual-stream gradient entering each position's top.
        let mut dx: Vec<Vec<f64>> = vec![vec![0.0; h]; t_len];

        let out = meta.out_off();
        let lnf = meta.lnf_off();
        for t in 0..t_len {
            if dlogits[t].iter().all(|&d| d == 0.0) {
                continue;
            }
            let mut dhf = vec![0.0; h];
            matvec_bwd(
                &values[out..out + meta.vocab * h],
                &self.hf[t],
                &dlogits[t],
                &mut grad[out..out + meta.vocab * h],
                &mut dhf,
                meta.vocab,
                h,
            );
            // final norm: hf = xhat * g
            let mut dxhat = vec![0.0; h];
            for i in 0..h {
                grad[lnf + i] += dhf[i] * self.lnf_xhat[t][i];
                dxhat[i] = dhf[i] * values[lnf + i];
            }
            let d = rmsnorm_bwd(&dxhat, &self.lnf_xhat[t], self.lnf_r[t]);
            for i in 0..h {
                dx[t][i] += d[i];
            }
        }

        for l in (0..meta.layers).rev() {
            let off = meta.layer_off(l);
            let tr = &self.layers[l];
            // MLP backward per position.
            for t in 0..t_len {
                if dx[t].iter().all(|&d| d == 0.0) {
                    continue;
                }
                let dm = dx[t].clone(); // residual: x_out = x_mid + m
                let mut dact = vec![0.0; inner];
                matvec_bwd(
                    &values[off.w2..off.w2 + h * inner],
                    &tr.act[t],
                    &dm,
                    &mut grad[off.w2..off.w2 + h * inner],
                    &mut dact,
                    h,
                    inner,
                );
                let du: Vec<f64> = (0..inner).map(|i| dact[i] * silu_deriv(tr.u[t][i])).collect();
                let mut dh2 = vec![0.0; h];
                matvec_bwd(
                    &values[off.w1..off.w1 + inner * h],
                    &tr.h2[t],
                    &du,
                    &mut grad[off.w1..off.w1 + inner * h],
                    &mut dh2,
                    inner,
                    h,
                );
                let mut dxhat2 = vec![0.0; h];
                for i in 0..h {
                    grad[off.ln2 + i] += dh2[i] * tr.ln2_xhat[t][i];
                    dxhat2[i] = dh2[i] * values[off.ln2 + i];
                }
                let dmid = rmsnorm_bwd(&dxhat2, &tr.ln2_xhat[t], tr.ln2_r[t]);
                for i in 0..h {
                    dx[t][i] += dmid[i];
                }
            }
            // Attention backward: first accumulate dq/dk/dv across positions.
            let mut dq: Vec<Vec<f64>> = vec![vec![0.0; h]; t_len];
            let mut dk: Vec<Vec<f64>> = vec![vec![0.0; h]; t_len];
            let mut dv: Vec<Vec<f64>> = vec![vec![0.0; h]; t_len];
            for t in 0..t_len {
                if dx[t].iter().all(|&d| d == 0.0) {
                    continue;
                }
                let dao = dx[t].clone(); // residual: x_mid = x_in + ao
                let mut dctx = vec![0.0; h];
                matvec_bwd(
                    &values[off.wo..off.wo + h * h],
                    &tr.ctx[t],
                    &dao,
                    &mut grad[off.wo..off.wo + h * h],
                    &mut dctx,
                    h,
                    h,
                );
                for head in 0..nh {
                    let aw = &tr.aw[t][head * (t + 1)..(head + 1) * (t + 1)];
                    let dctx_h = &dctx[head * dh..(head + 1) * dh];
                    let mut da = vec![0.0; t + 1];
                    for j in 0..=t {
                        let vs = &tr.v[j][head * dh..(head + 1) * dh];
                        da[j] = dctx_h.iter().zip(vs).map(|(a, b)| a * b).sum();
                        for i in 0..dh {
                            dv[j][head * dh + i] += aw[j] * dctx_h[i];
                        }
                    }
                    let dot: f64 = aw.iter().zip(&da).map(|(a, b)| a * b).sum();
                    for j in 0..=t {
                        let ds = aw[j] * (da[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let ks = &tr.k[j][head * dh..(head + 1) * dh];
                        let qs = &tr.q[t][head * dh..(head + 1) * dh];
                        for i in 0..dh {
                            dq[t][head * dh + i] += ds * ks[i];
                            dk[j][head * dh + i] += ds * qs[i];
                        }
                    }
                }
            }
            // Map dq/dk/dv through the projection matrices.
            for t in 0..t_len {
                let mut dh1 = vec![0.0; h];
                let mut any = false;
                if dq[t].iter().any(|&d| d != 0.0) {
                    matvec_bwd(
                        &values[off.wq..off.wq + h * h],
                        &tr.h1[t],
                        &dq[t],
                        &mut grad[off.wq..off.wq + h * h],
                        &mut dh1,
                        h,
                        h,
                    );
                    any = true;
                }
                if dk[t].iter().any(|&d| d != 0.0) {
                    matvec_bwd(
                        &values[off.wk..off.wk + h * h],
                        &tr.h1[t],
                        &dk[t],
                        &mut grad[off.wk..off.wk + h * h],
                        &mut dh1,
                        h,
                        h,
                    );
                    any = true;
                }
                if dv[t].iter().any(|&d| d != 0.0) {
                    matvec_bwd(
                        &values[off.wv..off.wv + h * h],
                        &tr.h1[t],
                        &dv[t],
                        &mut grad[off.wv..off.wv + h * h],
                        &mut dh1,
                        h,
                        h,
                    );
                    any = true;
                }
                if !any {
                    continue;
                }
                let mut dxhat1 = vec![0.0; h];
                for i in 0..h {
                    grad[off.ln1 + i] += dh1[i] * tr.ln1_xhat[t][i];
                    dxhat1[i] = dh1[i] * values[off.ln1 + i];
                }
                let din = rmsnorm_bwd(&dxhat1, &tr.ln1_xhat[t], tr.ln1_r[t]);
                for i in 0..h {
                    dx[t][i] += din[i];
                }
            }
        }

        // Embeddings: x0 = tok_emb[tok] + pos_emb[t].
        for t in 0..t_len {
            if dx[t].iter().all(|&d| d == 0.0) {
                continue;
            }
            let tok = self.tokens[t] as usize;
            let pos_base = meta.vocab * h + t * h;
            for i in 0..h {
                grad[tok * h + i] += dx[t][i];
                grad[pos_base + i] += dx[t][i];
            }
        }
        grad
    }
}

/// Incremental evaluator with per-layer KV cache and retained final hiddens.
pub struct AttnEval<'a> {
    meta: &'a AttnMeta,
    values: &'a [f64],
    ctx: Vec<Tok>,
    /// Per layer: cached k and v vectors per position.
    kcache: Vec<Vec<Vec<f64>>>,
    vcache: Vec<Vec<Vec<f64>>>,
    /// Final hidden (head input) per consumed position.
    hf: Vec<Vec<f64>>,
    /// Set once the context exceeds the window; falls back to recompute.
    sliding: bool,
}

impl<'a> AttnEval<'a> {
    pub fn new(meta: &'a AttnMeta, values: &'a [f64], prompt: &[Tok]) -> Self {
        let mut e = AttnEval {
            meta,
            values,
            ctx: Vec::with_capacity(prompt.len() + 64),
            kcache: vec![Vec::new(); meta.layers],
            vcache: vec![Vec::new(); meta.layers],
            hf: Vec::new(),
            sliding: false,
        };
        for &t in prompt {
            e.push(t);
        }
        e
    }

    pub fn len(&self) -> usize {
        self.ctx.len()
    }

    pub fn push(&mut self, tok: Tok) {
        if self.ctx.len() >= self.meta.w_ctx {
            self.sliding = true;
        }
        self.ctx.push(tok);
        if self.sliding {
            return;
        }
        let (h, nh) = (self.meta.dim, self.meta.heads);
        let dh = h / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let t = self.ctx.len() - 1;
        let values = self.values;
        let mut x: Vec<f64> = (0..h)
            .map(|i| values[tok as usize * h + i] + values[self.meta.vocab * h + t * h + i])
            .collect();
        for l in 0..self.meta.layers {
            let off = self.meta.layer_off(l);
            let (xhat, _r) = rmsnorm(&x);
            let h1: Vec<f64> = (0..h).map(|i| xhat[i] * values[off.ln1 + i]).collect();
            let q = matvec(&values[off.wq..off.wq + h * h], &h1, h, h);
            let k = matvec(&values[off.wk..off.wk + h * h], &h1, h, h);
            let v = matvec(&values[off.wv..off.wv + h * h], &h1, h, h);
            self.kcache[l].push(k);
            self.vcache[l].push(v);
            let ctx = attend(&q, &self.kcache[l], &self.vcache[l], t + 1, nh, dh, scale);
            let ao = matvec(&values[off.wo..off.wo + h * h], &ctx, h, h);
            for i in 0..h {
                x[i] += ao[i];
            }
            let (xhat2, _r2) = rmsnorm(&x);
            let h2: Vec<f64> = (0..h).map(|i| xhat2[i] * values[off.ln2 + i]).collect();
            let u = matvec(
                &values[off.w1..off.w1 + self.meta.mlp_inner * h],
                &h2,
                self.meta.mlp_inner,
                h,
            );
            let act: Vec<f64> = u.iter().map(|&z| silu(z)).collect();
            let m = matvec(
                &values[off.w2..off.w2 + h * self.meta.mlp_inner],
                &act,
                h,
                self.meta.mlp_inner,
            );
            for i in 0..h {
                x[i] += m[i];
            }
        }
        let (xhatf, _rf) = rmsnorm(&x);
        let lnf = self.meta.lnf_off();
        let hf: Vec<f64> = (0..h).map(|i| xhatf[i] * values[lnf + i]).collect();
        self.hf.push(hf);
    }

    pub fn next_logprobs(&mut self) -> Vec<f64> {
        if self.sliding {
            return self.meta.logprobs(self.values, &self.ctx);
        }
        let out = self.meta.out_off();
        let logits = matvec(
            &self.values[out..out + self.meta.vocab * self.meta.dim],
            self.hf.last().expect("nonempty context"),
            self.meta.vocab,
            self.meta.dim,
        );
        log_softmax(&logits)
    }

    pub fn feature_at(&mut self, pos: usize) -> Vec<f64> {
        assert!(pos >= 1);
        if self.sliding || pos > self.hf.len() {
            let win = self.meta.window(&self.ctx[..pos]);
            let fwd = Forward::run(self.meta, self.values, win);
            return fwd.hf[win.len() - 1].clone();
        }
        self.hf[pos - 1].clone()
    }

    /// Teacher-forced logprobs of every token in `chain` given the first
    /// `prefix_len` cached context tokens. Scratch state only; the cache is
    /// not modified.
    pub fn probe_chain(&self, prefix_len: usize, chain: &[Tok]) -> Vec<f64> {
        assert!(prefix_len >= 1 && prefix_len <= self.ctx.len());
        if self.sliding || prefix_len + chain.len() > self.meta.w_ctx {
            let mut seq: Vec<Tok> = self.ctx[..prefix_len].to_vec();
            let start = seq.len();
            seq.extend_from_slice(chain);
            return self.meta.seq_logprobs(self.values, &seq, start);
        }
        let (h, nh) = (self.meta.dim, self.meta.heads);
        let dh = h / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let values = self.values;
        let out = self.meta.out_off();
        let mut lps = Vec::with_capacity(chain.len());
        let mut hf_prev = self.hf[prefix_len - 1].clone();
        let mut scratch_k: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.meta.layers];
        let mut scratch_v: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.meta.layers];
        for (i, &tok) in chain.iter().enumerate() {
            let logits = matvec(&values[out..out + self.meta.vocab * h], &hf_prev, self.meta.vocab, h);
            lps.push(log_softmax(&logits)[tok as usize]);
            if i + 1 == chain.len() {
                break;
            }
            let t = prefix_len + i;
            let mut x: Vec<f64> = (0..h)
                .map(|j| values[tok as usize * h + j] + values[self.meta.vocab * h + t * h + j])
                .collect();
            for l in 0..self.meta.layers {
                let off = self.meta.layer_off(l);
                let (xhat, _) = rmsnorm(&x);
                let h1: Vec<f64> = (0..h).map(|j| xhat[j] * values[off.ln1 + j]).collect();
                let q = matvec(&values[off.wq..off.wq + h * h], &h1, h, h);
                let k = matvec(&values[off.wk..off.wk + h * h], &h1, h, h);
                let v = matvec(&values[off.wv..off.wv + h * h], &h1, h, h);
                scratch_k[l].push(k);
                scratch_v[l].push(v);
                let n_ctx = prefix_len + scratch_k[l].len();
                let ctx = attend_split(
                    &q,
                    &self.kcache[l][..prefix_len],
                    &scratch_k[l],
                    &self.vcache[l][..prefix_len],
                    &scratch_v[l],
                    n_ctx,
                    nh,
                    dh,
                    scale,
                );
                let ao = matvec(&values[off.wo..off.wo + h * h], &ctx, h, h);
                for j in 0..h {
                    x[j] += ao[j];
                }
                let (xhat2, _) = rmsnorm(&x);
                let h2: Vec<f64> = (0..h).map(|j| xhat2[j] * values[off.ln2 + j]).collect();
                let u = matvec(
                    &values[off.w1..off.w1 + self.meta.mlp_inner * h],
                    &h2,
                    self.meta.mlp_inner,
                    h,
                );
                let act: Vec<f64> = u.iter().map(|&z| silu(z)).collect();
                let m = matvec(
                    &values[off.w2..off.w2 + h * self.meta.mlp_inner],
                    &act,
                    h,
                    self.meta.mlp_inner,
                );
                for j in 0..h {
                    x[j] += m[j];
                }
            }
            let (xhatf, _) = rmsnorm(&x);
            let lnf = self.meta.lnf_off();
            hf_prev = (0..h).map(|j| xhatf[j] * values[lnf + j]).collect();
        }
        lps
    }
}

fn attend(
    q: &[f64],
    kcache: &[Vec<f64>],
    vcache: &[Vec<f64>],
    n_ctx: usize,
    nh: usize,
    dh: usize,
    scale: f64,
) -> Vec<f64> {
    let mut ctx = vec![0.0; nh * dh];
    for head in 0..nh {
        let qs = &q[head * dh..(head + 1) * dh];
        let mut scores = vec![0.0; n_ctx];
        for (j, s) in scores.iter_mut().enumerate() {
            let ks = &kcache[j][head * dh..(head + 1) * dh];
            *s = qs.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        softmax_into(&mut scores);
        for (j, &a) in scores.iter().enumerate() {
            let vs = &vcache[j][head * dh..(head + 1) * dh];
            for i in 0..dh {
                ctx[head * dh + i] += a * vs[i];
            }
        }
    }
    ctx
}

#[allow(clippy::too_many_arguments)]
fn attend_split(
    q: &[f64],
    k_a: &[Vec<f64>],
    k_b: &[Vec<f64>],
    v_a: &[Vec<f64>],
    v_b: &[Vec<f64>],
    n_ctx: usize,
    nh: usize,
    dh: usize,
    scale: f64,
) -> Vec<f64> {
    let kv = |j: usize| -> (&Vec<f64>, &Vec<f64>) {
        if j < k_a.len() {
            (&k_a[j], &v_a[j])
        } else {
            (&k_b[j - k_a.len()], &v_b[j - k_a.len()])
        }
    };
    let mut ctx = vec![0.0; nh * dh];
    for head in 0..nh {
        let qs = &q[head * dh..(head + 1) * dh];
        let mut scores = vec![0.0; n_ctx];
        for (j, s) in scores.iter_mut().enumerate() {
            let (k, _) = kv(j);
            let ks = &k[head * dh..(head + 1) * dh];
            *s = qs.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        softmax_into(&mut scores);
        for (j, &a) in scores.iter().enumerate() {
            let (_, v) = kv(j);
            let vs = &v[head * dh..(head + 1) * dh];
            for i in 0..dh {
                ctx[head * dh + i] += a * vs[i];
            }
        }
    }
    ctx
}

fn softmax_into(xs: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in xs.iter_mut() {
        *x /= z;
    }
}
