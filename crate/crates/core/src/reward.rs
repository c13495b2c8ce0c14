//! Dense process reward: fitting information gain via two teacher-forced
//! evaluations, compression penalty as the damped Fisher quadratic form in
//! proxy space, and the per-episode combined reward.

use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::proxy::ProxyBasis;
use crate::task::Task;
use crate::vocab::Tok;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Weight of the process reward inside the combined episode reward.
    pub alpha: f64,
    /// Weight of the compression penalty inside the process reward.
    pub beta: f64,
    /// Fisher damping coefficient (added as an identity term).
    pub damping: f64,
    /// Step size of the hypothetical per-episode adaptation update.
    pub virtual_step: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { alpha: 0.8, beta: 0.6, damping: 1e-5, virtual_step: 1e-6 }
    }
}

/// Per-episode reward record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReward {
    pub episode_index: usize,
    pub fitting_gain: f64,
    pub compression_penalty: f64,
    pub process_reward: f64,
    pub combined: f64,
}

/// Machine-readable per-episode trace line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardTraceRecord {
    pub task_id: u64,
    pub rollout_id: u64,
    pub k: usize,
    pub fitting_gain: f64,
    pub compression_penalty: f64,
    pub process_reward: f64,
    pub combined: f64,
}

impl RewardTraceRecord {
    pub fn line(&self) -> String {
        serde_json::to_string(self).expect("trace record serializes")
    }
}

/// Increase in the correctness probability from appending an episode's
/// tokens to the context: two forward evaluations, no gradient work.
pub fn fitting_gain(
    policy: &Policy,
    context_before: &[Tok],
    episode_tokens: &[Tok],
    task: &Task,
) -> Result<f64> {
    if episode_tokens.is_empty() {
        return Ok(0.0);
    }
    let mut after: Vec<Tok> = Vec::with_capacity(context_before.len() + episode_tokens.len());
    after.extend_from_slice(context_before);
    after.extend_from_slice(episode_tokens);
    let j_after = policy.correctness_prob(&after, task)?;
    let j_before = policy.correctness_prob(context_before, task)?;
    Ok(j_after - j_before)
}

/// Hypothetical one-step adaptation attributable to an episode: the scaled
/// mean of its per-token score gradients.
pub fn virtual_update(episode_grads: &[Vec<f64>], virtual_step: f64) -> Vec<f64> {
    assert!(!episode_grads.is_empty(), "episode gradients must be nonempty");
    let d = episode_grads[0].len();
    let mut mean = vec![0.0; d];
    for g in episode_grads {
        for (m, gi) in mean.iter_mut().zip(g) {
            *m += gi;
        }
    }
    let scale = virtual_step / episode_grads.len() as f64;
    for m in mean.iter_mut() {
        *m *= scale;
    }
    mean
}

/// Damped Fisher quadratic form in proxy space, evaluated as dot products:
/// `mean_j (g_j^T dt)^2 + damping * |dt|^2` with everything projected.
pub fn compression_penalty(
    basis: &ProxyBasis,
    delta_theta: &[f64],
    episode_grads: &[Vec<f64>],
    damping: f64,
) -> Result<f64> {
    assert!(!episode_grads.is_empty(), "episode gradients must be nonempty");
    let dt = basis.project(delta_theta)?;
    let mut quad = 0.0;
    for g in episode_grads {
        let gp = basis.project(g)?;
        let dot: f64 = gp.iter().zip(&dt).map(|(a, b)| a * b).sum();
        quad += dot * dot;
    }
    quad /= episode_grads.len() as f64;
    let norm2: f64 = dt.iter().map(|x| x * x).sum();
    Ok(quad + damping * norm2)
}

/// Process reward of an episode: fitting gain minus weighted penalty.
pub fn process_reward(fitting_gain: f64, penalty: f64, beta: f64) -> f64 {
    debug_assert!(penalty >= 0.0 && beta > 0.0);
    fitting_gain - beta * penalty
}

/// Combined per-episode reward: outcome share plus weighted process reward.
pub fn episode_reward(r_out: u8, episode_count: usize, alpha: f64, r_prg: f64) -> Result<f64> {
    if episode_count == 0 {
        return Err(Error::Config("episode count must be at least 1".into()));
    }
    Ok(f64::from(r_out) / episode_count as f64 + alpha * r_prg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ArchMeta, LinearMeta, Policy};
    use crate::policy::tests::toy_task;
    use crate::proxy::{fit_basis, ProxyBasis};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn randomized_linear(vocab: usize, order: usize, seed: u64) -> Policy {
        let mut p = Policy::zeros(ArchMeta::Linear(LinearMeta::new(vocab, order)));
        let mut rng = crate::rng::stream(seed, &[55]);
        for v in p.values.iter_mut() {
            *v = rng.gen::<f64>() - 0.5;
        }
        p
    }

    #[test]
    fn empty_episode_gain_is_exactly_zero() {
        let p = randomized_linear(4, 1, 1);
        let task = toy_task(vec![0], vec![1]);
        assert_eq!(fitting_gain(&p, &[0, 1], &[], &task).unwrap(), 0.0);
    }

    #[test]
    fn gain_matches_enumerated_probability_difference() {
        // Independent route: build the forced sequences by hand and multiply
        // stepwise probabilities from next_token_logprobs.
        let p = randomized_linear(4, 2, 2);
        let task = toy_task(vec![0], vec![1, 2]);
        let sp = p.special();
        let ctx: Vec<Tok> = vec![0, 3];
        let episode: Vec<Tok> = vec![1, 1];
        let forced_j = |context: &[Tok]| -> f64 {
            let mut seq = context.to_vec();
            seq.push(sp.answer);
            let mut logs = Vec::new();
            for &t in task.oracle_answer_tokens.iter().chain([sp.eos].iter()) {
                let lp = p.next_token_logprobs(&seq).unwrap();
                logs.push(lp[t as usize]);
                seq.push(t);
            }
            (logs.iter().sum::<f64>() / logs.len() as f64).exp()
        };
        let mut after = ctx.clone();
        after.extend_from_slice(&episode);
        let expected = forced_j(&after) - forced_j(&ctx);
        let got = fitting_gain(&p, &ctx, &episode, &task).unwrap();
        assert_relative_eq!(got, expected, epsilon = 1e-12);
        assert!(got.abs() <= 1.0);
    }

    #[test]
    fn zero_update_penalty_is_exactly_zero() {
        let basis = ProxyBasis::identity(4, 2);
        let grads = vec![vec![1.0, 2.0, 3.0, 4.0]];
        let c = compression_penalty(&basis, &[0.0; 4], &grads, 1e-5).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn penalty_direct_substitution() {
        // r=2, dt=[0.1,-0.2], single g=[1,2], no damping: (0.1-0.4)^2.
        let basis = ProxyBasis::identity(2, 2);
        let c = compression_penalty(&basis, &[0.1, -0.2], &[vec![1.0, 2.0]], 0.0).unwrap();
        assert_relative_eq!(c, 0.09, epsilon = 1e-15);
    }

    #[test]
    fn penalty_nonnegative_property() {
        let mut rng = crate::rng::stream(3, &[56]);
        for _ in 0..200 {
            let d = rng.gen_range(2..10usize);
            let w = rng.gen_range(2..6usize);
            let hist: Vec<Vec<f64>> = (0..w)
                .map(|_| (0..d).map(|_| rng.gen::<f64>() - 0.5).collect())
                .collect();
            let r = rng.gen_range(1..=d.min(w));
            let basis = fit_basis(&hist, r, 0).unwrap();
            let delta: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
            let grads: Vec<Vec<f64>> = (0..rng.gen_range(1..5usize))
                .map(|_| (0..d).map(|_| rng.gen::<f64>() - 0.5).collect())
                .collect();
            let c = compression_penalty(&basis, &delta, &grads, 1e-5).unwrap();
            assert!(c >= 0.0);
        }
    }

    #[test]
    fn penalty_matches_exact_fisher_quadratic_form_at_full_rank() {
        // Dual route: materialize E[g g^T] + damping*I over all vocabulary
        // outcomes and evaluate the full-space quadratic form.
        use nalgebra::{DMatrix, DVector};
        let mut rng = crate::rng::stream(4, &[57]);
        for trial in 0..50 {
            let p = randomized_linear(4, 0, 100 + trial); // d = 4*1 = 4
            let d = p.dim();
            let hist: Vec<Vec<f64>> = (0..d + 2)
                .map(|_| (0..d).map(|_| rng.gen::<f64>() - 0.5).collect())
            .collect();
            let basis = fit_basis(&hist, d, 0).unwrap();
            let lp = p.next_token_logprobs(&[]).unwrap();
            let v = p.vocab();
            // Episode gradients that enumerate the vocabulary, scaled so the
            // episode mean equals the enumeration expectation.
            let grads: Vec<Vec<f64>> = (0..v)
                .map(|z| {
                    let g = p.grad_logprob(&[], z as Tok).unwrap();
                    let s = (v as f64 * lp[z].exp()).sqrt();
                    g.into_iter().map(|x| x * s).collect()
                })
                .collect();
            let delta: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
            let damping = 1e-5;
            let got = compression_penalty(&basis, &delta, &grads, damping).unwrap();

            let fisher = crate::oracle::exact_fisher(&p, &[], None).unwrap();
            let full = &fisher + DMatrix::identity(d, d) * damping;
            let dv = DVector::from_vec(delta);
            let expected = (full * &dv).dot(&dv);
            assert_relative_eq!(got, expected, max_relative = 1e-10);
        }
    }

    #[test]
    fn virtual_update_identity_and_scaling() {
        let g = vec![vec![1.0, -2.0, 0.5]];
        assert_eq!(virtual_update(&g, 1.0), vec![1.0, -2.0, 0.5]);
        assert_eq!(virtual_update(&g, 0.0), vec![0.0, 0.0, 0.0]);

        // Penalty under the virtual update scales as the square of the step.
        let basis = ProxyBasis::identity(3, 3);
        let grads = vec![vec![0.3, 0.7, -0.2], vec![-0.1, 0.4, 0.9]];
        let c1 = compression_penalty(&basis, &virtual_update(&grads, 1e-3), &grads, 0.0).unwrap();
        let c2 = compression_penalty(&basis, &virtual_update(&grads, 2e-3), &grads, 0.0).unwrap();
        assert_relative_eq!(c2 / c1, 4.0, epsilon = 1e-6);
    }

    #[test]
    fn zero_virtual_step_gives_zero_penalty() {
        let basis = ProxyBasis::identity(3, 2);
        let grads = vec![vec![0.3, 0.7, -0.2]];
        let delta = virtual_update(&grads, 0.0);
        assert_eq!(compression_penalty(&basis, &delta, &grads, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn process_reward_substitutions() {
        assert_relative_eq!(process_reward(0.23, 0.05, 0.6), 0.20, epsilon = 1e-12);
        assert_eq!(process_reward(0.0, 0.0, 0.6), 0.0);
        assert_relative_eq!(process_reward(0.1, 0.5, 0.6), -0.20, epsilon = 1e-12);
    }

    #[test]
    fn process_reward_is_affine_in_penalty() {
        let base = process_reward(0.4, 0.3, 0.6);
        let doubled = process_reward(0.4, 0.6, 0.6);
        assert_relative_eq!(base - doubled, 0.6 * 0.3, epsilon = 1e-12);
    }

    #[test]
    fn episode_reward_substitutions() {
        assert_relative_eq!(episode_reward(1, 4, 0.8, 0.2).unwrap(), 0.41, epsilon = 1e-12);
        assert_eq!(episode_reward(0, 3, 0.8, 0.0).unwrap(), 0.0);
        assert_relative_eq!(episode_reward(1, 1, 0.8, -0.1).unwrap(), 0.92, epsilon = 1e-12);
        assert!(episode_reward(1, 0, 0.8, 0.0).is_err());
    }

    #[test]
    fn dimension_mismatch_propagates() {
        let basis = ProxyBasis::identity(4, 2);
        let grads = vec![vec![1.0, 2.0]];
        assert!(compression_penalty(&basis, &[0.1, 0.2], &grads, 0.0).is_err());
    }
}
