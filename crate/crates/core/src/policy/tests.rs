use super::*;
use crate::numcheck::max_grad_discrepancy;
use crate::task::Task;
use crate::vocab::Tok;
use approx::assert_relative_eq;
use rand::Rng;

pub fn toy_task(question: Vec<Tok>, answer: Vec<Tok>) -> Task {
    Task {
        id: 0,
        seed: 0,
        tier: 1,
        question_tokens: question,
        oracle_trace_tokens: vec![],
        oracle_answer_tokens: answer,
        start: 0,
        steps: vec![],
        values: vec![],
    }
}

fn linear(vocab: usize, order: usize) -> Policy {
    Policy::zeros(ArchMeta::Linear(LinearMeta::new(vocab, order)))
}

fn small_attn(vocab: usize) -> Policy {
    Policy::init(
        ArchMeta::Attention(AttnMeta::new(vocab, 8, 2, 16, 2, 16)),
        42,
    )
}

fn randomize(p: &mut Policy, seed: u64, scale: f64) {
    let mut rng = crate::rng::stream(seed, &[99]);
    for v in p.values.iter_mut() {
        *v += scale * (rng.gen::<f64>() - 0.5);
    }
}

#[test]
fn zero_linear_params_give_uniform() {
    let p = linear(5, 1);
    let lp = p.next_token_logprobs(&[2]).unwrap();
    for l in lp {
        assert_relative_eq!(l, -(5f64).ln(), epsilon = 1e-12);
    }
}

#[test]
fn logprobs_normalize() {
    let mut p = linear(7, 2);
    randomize(&mut p, 1, 2.0);
    let mut a = small_attn(6);
    randomize(&mut a, 2, 0.3);
    for ctx in [vec![], vec![1], vec![3, 2, 0, 1]] {
        for pol in [&p, &a] {
            if matches!(pol.meta, ArchMeta::Attention(_)) && ctx.is_empty() {
                continue;
            }
            let lp = pol.next_token_logprobs(&ctx).unwrap();
            let total: f64 = lp.iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9, "sum = {total}");
        }
    }
}

#[test]
fn raising_a_logit_weight_raises_that_token() {
    let mut p = linear(4, 1);
    randomize(&mut p, 3, 1.0);
    let ctx = vec![2 as Tok];
    let before = p.next_token_logprobs(&ctx).unwrap()[1].exp();
    // Bias feature weight of token 1.
    let f = match &p.meta {
        ArchMeta::Linear(m) => m.feature_dim(),
        _ => unreachable!(),
    };
    let mut prev = before;
    for c in [0.5, 1.0, 2.0] {
        let mut q = p.clone();
        q.values[1 * f + (f - 1)] += c;
        let now = q.next_token_logprobs(&ctx).unwrap()[1].exp();
        assert!(now > prev);
        prev = now;
    }
}

#[test]
fn linear_gradient_softmax_identity_at_uniform() {
    // V=2, zero params: grad of log p(0) on an active feature = 1 - 0.5.
    let p = linear(2, 1);
    let g = p.grad_logprob(&[0], 0).unwrap();
    let m = LinearMeta::new(2, 1);
    let active = m.active_features(&[0]);
    for &j in &active {
        assert_relative_eq!(g[j], 0.5, epsilon = 1e-12);
        assert_relative_eq!(g[m.feature_dim() + j], -0.5, epsilon = 1e-12);
    }
}

#[test]
fn grad_logprob_matches_finite_differences_linear() {
    let mut rng = crate::rng::stream(11, &[1]);
    for trial in 0..20 {
        let mut p = linear(5, 2);
        randomize(&mut p, 100 + trial, 1.5);
        let ctx: Vec<Tok> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(0..5)).collect();
        let tok: Tok = rng.gen_range(0..5);
        let g = p.grad_logprob(&ctx, tok).unwrap();
        let meta = p.meta.clone();
        let worst = max_grad_discrepancy(&p.values, &g, |vals| match &meta {
            ArchMeta::Linear(m) => m.logprobs(vals, &ctx)[tok as usize],
            _ => unreachable!(),
        });
        assert!(worst <= 1.0, "trial {trial}: scaled discrepancy {worst}");
    }
}

#[test]
fn grad_logprob_matches_finite_differences_attention() {
    let mut rng = crate::rng::stream(12, &[1]);
    for trial in 0..5 {
        let mut p = small_attn(6);
        randomize(&mut p, 200 + trial, 0.2);
        let ctx: Vec<Tok> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..6)).collect();
        let tok: Tok = rng.gen_range(0..6);
        let g = p.grad_logprob(&ctx, tok).unwrap();
        let meta = p.meta.clone();
        let worst = max_grad_discrepancy(&p.values, &g, |vals| match &meta {
            ArchMeta::Attention(m) => m.logprobs(vals, &ctx)[tok as usize],
            _ => unreachable!(),
        });
        assert!(worst <= 1.0, "trial {trial}: scaled discrepancy {worst}");
    }
}

#[test]
fn score_identity_under_full_enumeration() {
    // sum_z pi(z|s) grad log pi(z|s) = 0 exactly at V <= 4.
    for (mut p, seed) in [(linear(4, 1), 21u64), (small_attn(4), 22u64)] {
        randomize(&mut p, seed, 0.5);
        let ctx = vec![1 as Tok, 0];
        let lp = p.next_token_logprobs(&ctx).unwrap();
        let mut acc = vec![0.0; p.dim()];
        for z in 0..4u16 {
            let g = p.grad_logprob(&ctx, z).unwrap();
            let w = lp[z as usize].exp();
            for (a, gi) in acc.iter_mut().zip(&g) {
                *a += w * gi;
            }
        }
        let worst = acc.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-10, "score identity violated: {worst}");
    }
}

#[test]
fn sampling_probabilities_enumerate_to_one() {
    // V=2 policy, budget 3: the 8 possible sequences partition probability.
    let mut p = linear(2, 1);
    randomize(&mut p, 31, 1.0);
    let task = toy_task(vec![0], vec![1]);
    let mut total = 0.0;
    for bits in 0..8u32 {
        let seq: Vec<Tok> = (0..3).map(|i| ((bits >> i) & 1) as Tok).collect();
        // Probability of this exact sequence under teacher forcing.
        let mut full = task.question_tokens.clone();
        full.extend_from_slice(&seq);
        let lp = p.seq_logprobs(&full, 1);
        total += lp.iter().sum::<f64>().exp();
    }
    assert_relative_eq!(total, 1.0, epsilon = 1e-12);
    // And a sampled trajectory's recorded logprobs match its own probability.
    let mut rng = crate::rng::stream(5, &[1]);
    let traj = p.sample_trajectory(&task, 3, &mut rng).unwrap();
    let mut full = task.question_tokens.clone();
    full.extend_from_slice(&traj.tokens);
    let lp = p.seq_logprobs(&full, 1);
    let recorded: f64 = traj.per_token_logprob.iter().sum();
    assert_relative_eq!(recorded, lp.iter().sum::<f64>(), epsilon = 1e-12);
}

#[test]
fn budget_one_gives_single_token() {
    let mut p = linear(20, 1);
    randomize(&mut p, 41, 0.5);
    let task = crate::task::generate_task(3, 1);
    let mut rng = crate::rng::stream(6, &[1]);
    let traj = p.sample_trajectory(&task, 1, &mut rng).unwrap();
    assert_eq!(traj.token_count, 1);
    assert_eq!(traj.truncated, traj.tokens[0] != crate::vocab::EOS);
}

#[test]
fn same_stream_same_trajectory() {
    let mut p = small_attn(20);
    randomize(&mut p, 51, 0.2);
    let task = crate::task::generate_task(9, 2);
    let a = p
        .sample_trajectory(&task, 40, &mut crate::rng::stream(7, &[2]))
        .unwrap();
    let b = p
        .sample_trajectory(&task, 40, &mut crate::rng::stream(7, &[2]))
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn correctness_prob_uniform_case() {
    // Uniform V=4 policy, answer length 2: (1/4 * 1/4 * 1/4)^(1/3) = 0.25.
    let p = linear(4, 1);
    let task = toy_task(vec![0], vec![1, 0]);
    let j = p.correctness_prob(&[0], &task).unwrap();
    assert_relative_eq!(j, 0.25, epsilon = 1e-12);
}

#[test]
fn correctness_prob_certain_policy_is_one() {
    // Push the linear weights so each oracle token is near-deterministic.
    let v = 4usize;
    let m = LinearMeta::new(v, 1);
    let mut p = linear(v, 1);
    let task = toy_task(vec![0], vec![1, 0]);
    let sp = p.special();
    // Feature of "last token = X" strongly predicts the next oracle token.
    let f = m.feature_dim();
    let set = |p: &mut Policy, last: usize, next: usize| {
        p.values[next * f + last] = 50.0;
    };
    set(&mut p, sp.answer as usize, 1);
    set(&mut p, 1, 0);
    set(&mut p, 0, sp.eos as usize);
    let j = p.correctness_prob(&[0], &task).unwrap();
    assert!(j > 0.999, "j = {j}");
}

#[test]
fn correctness_prob_matches_enumeration_v2() {
    // V=2 toy: answer "01"; eos = 1, answer marker = 0 by the toy convention.
    let mut p = linear(2, 2);
    randomize(&mut p, 61, 1.2);
    let task = toy_task(vec![1], vec![0, 1]);
    let sp = p.special();
    let ctx = vec![1 as Tok];
    let mut seq = ctx.clone();
    seq.push(sp.answer);
    seq.push(0);
    seq.push(1);
    seq.push(sp.eos);
    let lp = p.seq_logprobs(&seq, 2);
    let expected = (lp.iter().sum::<f64>() / 3.0).exp();
    assert_relative_eq!(
        p.correctness_prob(&ctx, &task).unwrap(),
        expected,
        epsilon = 1e-12
    );
}

#[test]
fn correctness_prob_ignores_context_beyond_window() {
    let mut p = small_attn(6);
    randomize(&mut p, 71, 0.2);
    let task = toy_task(vec![0], vec![2]);
    let w = match &p.meta {
        ArchMeta::Attention(m) => m.w_ctx,
        _ => unreachable!(),
    };
    let suffix: Vec<Tok> = (0..w).map(|i| (i % 6) as Tok).collect();
    let mut long_a: Vec<Tok> = vec![5; 4];
    long_a.extend_from_slice(&suffix);
    let mut long_b: Vec<Tok> = vec![1; 9];
    long_b.extend_from_slice(&suffix);
    let ja = p.correctness_prob(&long_a, &task).unwrap();
    let jb = p.correctness_prob(&long_b, &task).unwrap();
    assert_relative_eq!(ja, jb, epsilon = 1e-12);
}

#[test]
fn degenerate_task_rejected() {
    let p = linear(4, 1);
    let task = toy_task(vec![0], vec![]);
    assert!(matches!(
        p.correctness_prob(&[0], &task),
        Err(Error::DegenerateTask)
    ));
}

#[test]
fn nonfinite_params_rejected() {
    let mut p = linear(4, 1);
    p.values[3] = f64::NAN;
    assert!(matches!(
        p.next_token_logprobs(&[0]),
        Err(Error::NonFiniteParams)
    ));
}

#[test]
fn sampler_probe_matches_fresh_evaluation() {
    let mut p = small_attn(20);
    randomize(&mut p, 81, 0.2);
    let task = crate::task::generate_task(4, 2);
    let mut eval = Sampler::new(&p, &task.question_tokens);
    let gen: Vec<Tok> = vec![16, 3, 10, 2, 13, 5, 17];
    for &t in &gen {
        let _ = eval.next_logprobs();
        eval.push(t);
    }
    let prefix_len = task.question_tokens.len() + 4;
    let chain: Vec<Tok> = vec![18, 5, 19];
    let probed = eval.probe_chain(prefix_len, &chain);
    let mut seq: Vec<Tok> = task.question_tokens.clone();
    seq.extend_from_slice(&gen[..4]);
    let start = seq.len();
    seq.extend_from_slice(&chain);
    let fresh = p.seq_logprobs(&seq, start);
    assert_eq!(probed.len(), fresh.len());
    for (a, b) in probed.iter().zip(&fresh) {
        assert_relative_eq!(*a, *b, epsilon = 1e-12);
    }
    // chain[0] itself:
    let lp0 = {
        let mut c: Vec<Tok> = task.question_tokens.clone();
        c.extend_from_slice(&gen[..4]);
        p.next_token_logprobs(&c).unwrap()[chain[0] as usize]
    };
    assert_relative_eq!(probed[0], lp0, epsilon = 1e-12);
}

#[test]
fn incremental_and_batch_paths_agree() {
    let mut p = small_attn(20);
    randomize(&mut p, 91, 0.2);
    let task = crate::task::generate_task(13, 3);
    let mut rng = crate::rng::stream(14, &[3]);
    let traj = p.sample_trajectory(&task, 60, &mut rng).unwrap();
    let mut seq = task.question_tokens.clone();
    seq.extend_from_slice(&traj.tokens);
    let batch = p.seq_logprobs(&seq, task.question_tokens.len());
    for (a, b) in traj.per_token_logprob.iter().zip(&batch) {
        assert_relative_eq!(*a, *b, epsilon = 1e-12);
    }
}

#[test]
fn weighted_score_grad_is_sum_of_per_token_grads() {
    let mut p = small_attn(6);
    randomize(&mut p, 95, 0.2);
    let seq: Vec<Tok> = vec![0, 1, 2, 3, 4, 5, 1, 2];
    let start = 2;
    let coeffs = [0.7, -1.3, 0.0, 2.0, 0.4, -0.6];
    let combined = p.weighted_score_grad(&seq, start, &coeffs);
    let mut manual = vec![0.0; p.dim()];
    for (i, &c) in (start..seq.len()).zip(&coeffs) {
        let g = p.grad_logprob(&seq[..i], seq[i]).unwrap();
        for (m, gi) in manual.iter_mut().zip(&g) {
            *m += c * gi;
        }
    }
    for (a, b) in combined.iter().zip(&manual) {
        assert_relative_eq!(*a, *b, epsilon = 1e-9, max_relative = 1e-9);
    }
}

#[test]
fn checkpoint_roundtrip_and_rejection() {
    let mut p = small_attn(20);
    randomize(&mut p, 101, 0.2);
    let mut buf = Vec::new();
    save_checkpoint(&p, &mut buf).unwrap();
    let q = load_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(p, q);

    let mut corrupt = buf.clone();
    corrupt[8] = 9; // version field
    assert!(load_checkpoint(&mut corrupt.as_slice()).is_err());
    let mut bad_magic = buf.clone();
    bad_magic[0] = b'X';
    assert!(load_checkpoint(&mut bad_magic.as_slice()).is_err());
}
