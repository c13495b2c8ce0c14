//! Synthetic tiered reasoning tasks and the episodic generation contract.
//!
//! A task is a chained single-digit arithmetic problem. Tier `t` produces a
//! chain of `t + 1` sub-computations; every intermediate value stays in
//! `0..=9` by construction, so correctness is exactly checkable without an
//! external judge.
//!
//! Question layout (always 13 tokens, unused operator slots padded):
//!
//! ```text
//! c0 op1 a1 op2 a2 op3 a3 op4 a4 op5 a5 = ?
//! ```
//!
//! Oracle trace layout: one delimited episode per sub-computation, each a
//! fixed 7-token cell `<e> v op a = c </e>`, except the final episode which
//! omits the close delimiter and ends with the answer marker and the answer:
//!
//! ```text
//! <e> c0 op1 a1 = c1 </e> ... <e> c(n-1) opn an = cn # cn
//! ```
//!
//! Keeping the cells on a fixed grid makes every generation decision a
//! function of a bounded window plus absolute position, which is what the
//! small policies can actually learn.

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::vocab::{
    digit, is_delimiter, render, Tok, ANSWER_MARK, EOS, EP_CLOSE, EP_OPEN, EQUALS, MINUS,
    PAD, PLUS, QUERY, TIMES,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Number of operator slots in the fixed question layout (max tier + 1).
pub const MAX_OPS: usize = 5;
/// Question length in tokens: start value, five (op, operand) slots, `=?`.
pub const QUESTION_LEN: usize = 1 + 2 * MAX_OPS + 2;
/// Length of a closed episode cell `<e> v op a = c </e>`.
pub const EPISODE_CELL: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    pub fn token(self) -> Tok {
        match self {
            Op::Add => PLUS,
            Op::Sub => MINUS,
            Op::Mul => TIMES,
        }
    }

    pub fn apply(self, v: i64, a: i64) -> i64 {
        match self {
            Op::Add => v + a,
            Op::Sub => v - a,
            Op::Mul => v * a,
        }
    }
}

/// Operator sets the generator may draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OpSet {
    AddSub,
    AddSubMul,
}

impl OpSet {
    fn ops(self) -> &'static [Op] {
        match self {
            OpSet::AddSub => &[Op::Add, Op::Sub],
            OpSet::AddSubMul => &[Op::Add, Op::Sub, Op::Mul],
        }
    }
}

impl Default for OpSet {
    fn default() -> Self {
        OpSet::AddSub
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: u64,
    pub seed: u64,
    pub tier: u8,
    pub question_tokens: Vec<Tok>,
    pub oracle_trace_tokens: Vec<Tok>,
    pub oracle_answer_tokens: Vec<Tok>,
    /// The `(operator, operand)` chain, first value included as `start`.
    pub start: u8,
    pub steps: Vec<(Op, u8)>,
    /// Intermediate values `c1..=cn`.
    pub values: Vec<u8>,
}

/// Generate a task; same `(seed, tier)` always yields a bit-identical task.
pub fn generate_task(seed: u64, tier: u8) -> Task {
    generate_task_with(seed, tier, OpSet::default())
}

pub fn generate_task_with(seed: u64, tier: u8, ops: OpSet) -> Task {
    assert!((1..=4).contains(&tier), "tier must be in 1..=4");
    let mut rng = rng::stream(seed, &[domain::TASK_GEN, u64::from(tier)]);
    let n_steps = usize::from(tier) + 1;

    let start = rng.gen_range(1..=9u8);
    let mut value = i64::from(start);
    let mut steps = Vec::with_capacity(n_steps);
    let mut values = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        // All (op, operand) pairs that keep the running value in 0..=9.
        let mut feasible = Vec::new();
        for &op in ops.ops() {
            let lo = if op == Op::Mul { 2 } else { 1 };
            for a in lo..=9i64 {
                let next = op.apply(value, a);
                if (0..=9).contains(&next) {
                    feasible.push((op, a as u8));
                }
            }
        }
        debug_assert!(!feasible.is_empty());
        let (op, a) = feasible[rng.gen_range(0..feasible.len())];
        value = op.apply(value, i64::from(a));
        steps.push((op, a));
        values.push(value as u8);
    }

    let question_tokens = render_question(start, &steps);
    let oracle_trace_tokens = render_trace(start, &steps, &values, 0);
    let oracle_answer_tokens = vec![digit(*values.last().unwrap())];

    Task {
        id: rng::derive_seed(seed, &[domain::TASK_GEN, u64::from(tier)]),
        seed,
        tier,
        question_tokens,
        oracle_trace_tokens,
        oracle_answer_tokens,
        start,
        steps,
        values,
    }
}

fn render_question(start: u8, steps: &[(Op, u8)]) -> Vec<Tok> {
    let mut q = Vec::with_capacity(QUESTION_LEN);
    q.push(digit(start));
    for slot in 0..MAX_OPS {
        match steps.get(slot) {
            Some(&(op, a)) => {
                q.push(op.token());
                q.push(digit(a));
            }
            None => {
                q.push(PAD);
                q.push(PAD);
            }
        }
    }
    q.push(EQUALS);
    q.push(QUERY);
    debug_assert_eq!(q.len(), QUESTION_LEN);
    q
}

/// Render a reasoning trace with `repeats` redundant verification episodes
/// (exact copies of the last sub-computation) inserted before the final
/// answer-carrying episode. `repeats = 0` gives the minimal oracle trace.
pub fn render_trace(start: u8, steps: &[(Op, u8)], values: &[u8], repeats: usize) -> Vec<Tok> {
    let n = steps.len();
    assert!(n >= 1 && values.len() == n);
    let mut t = Vec::new();
    let cell = |t: &mut Vec<Tok>, v: u8, op: Op, a: u8, c: u8, close: bool| {
        t.push(EP_OPEN);
        t.push(digit(v));
        t.push(op.token());
        t.push(digit(a));
        t.push(EQUALS);
        t.push(digit(c));
        if close {
            t.push(EP_CLOSE);
        }
    };
    for k in 0..n - 1 {
        let v = if k == 0 { start } else { values[k - 1] };
        cell(&mut t, v, steps[k].0, steps[k].1, values[k], true);
    }
    let v_last = if n == 1 { start } else { values[n - 2] };
    let (op_last, a_last) = steps[n - 1];
    let c_last = values[n - 1];
    for _ in 0..repeats {
        cell(&mut t, v_last, op_last, a_last, c_last, true);
    }
    cell(&mut t, v_last, op_last, a_last, c_last, false);
    t.push(ANSWER_MARK);
    t.push(digit(c_last));
    t
}

/// Maximal well-formed delimiter-bounded spans, scanned left to right.
///
/// Repair rules for malformed sequences: an unmatched open is closed at the
/// end; content before the first open joins the first episode; content after
/// a close that never reaches another open forms its own final span; a stray
/// close terminates whatever content precedes it. Spans are half-open content
/// index ranges; a span produced by the pre-text rule may straddle its open
/// delimiter, so content extraction skips delimiter tokens.
pub fn segment_episodes(tokens: &[Tok]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut inside: Option<usize> = None; // start of an open episode's content
    let mut loose: Option<usize> = None; // start of content outside delimiters
    for (i, &t) in tokens.iter().enumerate() {
        match t {
            EP_OPEN => {
                if let Some(s) = inside.take() {
                    spans.push((s, i));
                }
                // Loose content attaches to the episode this open starts.
                inside = Some(loose.take().unwrap_or(i + 1));
            }
            EP_CLOSE => {
                if let Some(s) = inside.take() {
                    spans.push((s, i));
                } else if let Some(s) = loose.take() {
                    spans.push((s, i));
                }
            }
            _ => {
                if inside.is_none() && loose.is_none() {
                    loose = Some(i);
                }
            }
        }
    }
    if let Some(s) = inside {
        spans.push((s, tokens.len()));
    } else if let Some(s) = loose {
        spans.push((s, tokens.len()));
    }
    spans
}

/// Tokens of a span minus any delimiter tokens embedded by the repair rules.
pub fn episode_content(tokens: &[Tok], span: (usize, usize)) -> Vec<Tok> {
    tokens[span.0..span.1]
        .iter()
        .copied()
        .filter(|&t| !is_delimiter(t))
        .collect()
}

/// Binary outcome reward: 1 iff the tokens after the final answer marker
/// (trailing end-of-sequence stripped) equal the oracle answer exactly.
pub fn outcome_reward_tokens(generated: &[Tok], task: &Task) -> u8 {
    let Some(pos) = generated.iter().rposition(|&t| t == ANSWER_MARK) else {
        return 0;
    };
    let mut tail: &[Tok] = &generated[pos + 1..];
    if tail.last() == Some(&EOS) {
        tail = &tail[..tail.len() - 1];
    }
    u8::from(tail == task.oracle_answer_tokens.as_slice())
}

/// Append the answer-prompt marker to a prefix that ends at an episode
/// boundary (empty, or just after a close delimiter).
pub fn force_answer(traj_prefix: &[Tok], _task: &Task) -> Result<Vec<Tok>> {
    if !(traj_prefix.is_empty() || traj_prefix.last() == Some(&EP_CLOSE)) {
        return Err(Error::NotAtEpisodeBoundary);
    }
    let mut out = Vec::with_capacity(traj_prefix.len() + 1);
    out.extend_from_slice(traj_prefix);
    out.push(ANSWER_MARK);
    Ok(out)
}

/// A sampled generation for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: u64,
    pub tokens: Vec<Tok>,
    pub episode_spans: Vec<(usize, usize)>,
    pub per_token_logprob: Vec<f64>,
    pub truncated: bool,
    pub token_count: usize,
}

impl Trajectory {
    pub fn dump_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory serializes")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Config(format!("trajectory line: {e}")))
    }
}

/// One task per line: seed, tier, rendered question.
pub fn task_set_line(task: &Task) -> String {
    format!("{}\t{}\t{}", task.seed, task.tier, render(&task.question_tokens))
}
