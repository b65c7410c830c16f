//! Exact success posteriors and Bayes factors by exhaustive enumeration.
//!
//! A tabular policy's next-token distribution depends only on
//! `(query, window, accumulator, position)`, and so does the reward, so the
//! success probability of every reachable prefix is computed by backward
//! induction over that finite state space. A literal path enumerator is kept
//! as an independent oracle for tiny environments.

use serde::{Deserialize, Serialize};

use crate::error::{CreditError, Result};
use crate::synth::env::EnvSpec;
use crate::synth::policy::{Scorer, TabularPolicy};

/// Cap on the number of continuations the path enumerator will visit.
pub const MAX_ENUMERATED_PATHS: u64 = 1 << 24;

/// Success and failure probabilities of every state for one query and target.
#[derive(Debug, Clone)]
pub struct ValueTable {
    horizon: usize,
    codes: usize,
    answers: usize,
    query: usize,
    target: usize,
    success: Vec<f64>,
    failure: Vec<f64>,
}

impl ValueTable {
    /// Backward induction for `P(acc_T == target)` under `policy`.
    pub fn build(policy: &TabularPolicy, query: usize, target: usize) -> Result<Self> {
        let env = policy.env();
        env.check_exact()?;
        if query >= env.num_queries || target >= env.answer_space {
            return Err(CreditError::Domain(format!(
                "query {query} / target {target} out of range"
            )));
        }
        let layout = &policy.layout;
        let (t_max, codes, m, k) = (
            env.horizon,
            layout.window_codes(),
            env.answer_space,
            env.vocab_size,
        );
        let size = (t_max + 1) * codes * m;
        let mut success = vec![0.0; size];
        let mut failure = vec![0.0; size];
        let idx = |t: usize, c: usize, a: usize| (t * codes + c) * m + a;
        for c in 0..codes {
            for a in 0..m {
                let hit = a == target;
                success[idx(t_max, c, a)] = if hit { 1.0 } else { 0.0 };
                failure[idx(t_max, c, a)] = if hit { 0.0 } else { 1.0 };
            }
        }
        for t in (0..t_max).rev() {
            for c in 0..codes {
                for a in 0..m {
                    let probs = policy.row_probs(layout.context(query, c, a, t), None);
                    let (mut s, mut f) = (0.0, 0.0);
                    for (tok, p) in probs.iter().enumerate().take(k) {
                        let j = idx(t + 1, layout.push_window(c, tok), env.step_acc(a, t, tok));
                        s += p * success[j];
                        f += p * failure[j];
                    }
                    success[idx(t, c, a)] = s;
                    failure[idx(t, c, a)] = f;
                }
            }
        }
        Ok(Self {
            horizon: t_max,
            codes,
            answers: m,
            query,
            target,
            success,
            failure,
        })
    }

    pub fn query(&self) -> usize {
        self.query
    }

    pub fn target(&self) -> usize {
        self.target
    }

    fn index(&self, t: usize, code: usize, acc: usize) -> usize {
        (t * self.codes + code) * self.answers + acc
    }

    /// `(P(R=1), P(R=0))` at a decoded state.
    pub fn at(&self, t: usize, code: usize, acc: usize) -> (f64, f64) {
        let i = self.index(t, code, acc);
        (self.success[i], self.failure[i])
    }

    /// `(P(R=1), P(R=0))` after `prefix`.
    pub fn branch_values(&self, policy: &TabularPolicy, prefix: &[usize]) -> (f64, f64) {
        let (code, acc) = state_of(policy, prefix);
        self.at(prefix.len(), code, acc)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
}

/// Window code and accumulator reached after `prefix`.
pub fn state_of(policy: &TabularPolicy, prefix: &[usize]) -> (usize, usize) {
    let env = policy.env();
    let mut code = policy.layout.empty_window();
    let mut acc = 0;
    for (t, &tok) in prefix.iter().enumerate() {
        code = policy.layout.push_window(code, tok);
        acc = env.step_acc(acc, t, tok);
    }
    (code, acc)
}

fn check_prefix(env: &EnvSpec, query: usize, prefix: &[usize]) -> Result<()> {
    if query >= env.num_queries {
        return Err(CreditError::Domain(format!("unknown query {query}")));
    }
    if prefix.len() > env.horizon {
        return Err(CreditError::Domain(format!(
            "prefix of length {} exceeds horizon {}",
            prefix.len(),
            env.horizon
        )));
    }
    if let Some(&bad) = prefix.iter().find(|&&t| t >= env.vocab_size) {
        return Err(CreditError::Domain(format!("token {bad} outside vocabulary")));
    }
    Ok(())
}

/// `P(R = 1 | query, prefix)` under `policy`.
pub fn exact_success_prob(policy: &TabularPolicy, query: usize, prefix: &[usize]) -> Result<f64> {
    let env = policy.env();
    check_prefix(env, query, prefix)?;
    let table = ValueTable::build(policy, query, env.answer(query))?;
    Ok(table.branch_values(policy, prefix).0)
}

/// Literal enumeration of all continuations of `prefix`, scoring each path
/// with [`Scorer::log_probs`]. Independent of [`ValueTable`].
pub fn enumerate_success_prob(
    policy: &TabularPolicy,
    query: usize,
    prefix: &[usize],
) -> Result<f64> {
    let env = policy.env();
    env.check_exact()?;
    check_prefix(env, query, prefix)?;
    let remaining = (env.horizon - prefix.len()) as u32;
    let paths = (env.vocab_size as u64).checked_pow(remaining);
    if paths.is_none_or(|p| p > MAX_ENUMERATED_PATHS) {
        return Err(CreditError::TooLarge(format!(
            "{}^{remaining} continuations",
            env.vocab_size
        )));
    }
    fn go(policy: &TabularPolicy, query: usize, path: &mut Vec<usize>) -> Result<f64> {
        let env = policy.env();
        if path.len() == env.horizon {
            return Ok(f64::from(env.reward(query, path)));
        }
        let lp = policy.log_probs(query, None, path)?;
        let mut total = 0.0;
        for (tok, l) in lp.into_iter().enumerate() {
            path.push(tok);
            total += l.exp() * go(policy, query, path)?;
            path.pop();
        }
        Ok(total)
    }
    go(policy, query, &mut prefix.to_vec())
}

/// Exact next-token distributions at one prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditionals {
    /// `P(R = 1 | prefix)`.
    pub value: f64,
    pub success: Vec<f64>,
    pub failure: Vec<f64>,
    pub marginal: Vec<f64>,
    /// Extended-real `ln(success / failure)` per token.
    pub log_lambda: Vec<f64>,
    /// `max |marginal - (success V + failure (1 - V))|`.
    pub total_prob_residual: f64,
}

/// Success, failure and marginal next-token distributions plus exact Bayes
/// factors at `prefix`.
pub fn exact_conditionals(
    policy: &TabularPolicy,
    table: &ValueTable,
    prefix: &[usize],
) -> Result<Conditionals> {
    let env = policy.env();
    check_prefix(env, table.query, prefix)?;
    if prefix.len() >= env.horizon {
        return Err(CreditError::Domain("no next token after the horizon".into()));
    }
    let (v_s, v_f) = table.branch_values(policy, prefix);
    if v_s == 0.0 || v_f == 0.0 {
        return Err(CreditError::DegenerateBranch(format!(
            "V = {v_s} at prefix {prefix:?}; one outcome branch is empty"
        )));
    }
    let (code, acc) = state_of(policy, prefix);
    let t = prefix.len();
    let marginal = policy.row_probs(policy.layout.context(table.query, code, acc, t), None);
    let k = env.vocab_size;
    let mut success = Vec::with_capacity(k);
    let mut failure = Vec::with_capacity(k);
    let mut log_lambda = Vec::with_capacity(k);
    let mut residual: f64 = 0.0;
    let value = v_s / (v_s + v_f);
    for (tok, &p) in marginal.iter().enumerate() {
        let (n_s, n_f) = table.at(
            t + 1,
            policy.layout.push_window(code, tok),
            env.step_acc(acc, t, tok),
        );
        let s = p * n_s / v_s;
        let f = p * n_f / v_f;
        log_lambda.push(log_bayes_factor(v_s, v_f, n_s, n_f));
        residual = residual.max((p - (s * value + f * (1.0 - value))).abs());
        success.push(s);
        failure.push(f);
    }
    Ok(Conditionals {
        value: v_s,
        success,
        failure,
        marginal,
        log_lambda,
        total_prob_residual: residual,
    })
}

/// `ln(n_s / v_s) - ln(n_f / v_f)` over the extended reals.
///
/// At a committed state (`v_s` or `v_f` zero) the factor is defined as 0.
pub fn log_bayes_factor(v_s: f64, v_f: f64, n_s: f64, n_f: f64) -> f64 {
    if v_s == 0.0 || v_f == 0.0 {
        return 0.0;
    }
    match (n_s == 0.0, n_f == 0.0) {
        (true, true) => 0.0,
        (true, false) => f64::NEG_INFINITY,
        (false, true) => f64::INFINITY,
        (false, false) => (n_s.ln() - v_s.ln()) - (n_f.ln() - v_f.ln()),
    }
}

/// Exact log Bayes factor of every token of a complete or partial trajectory.
pub fn trajectory_log_bayes_factors(
    policy: &TabularPolicy,
    table: &ValueTable,
    tokens: &[usize],
) -> Vec<f64> {
    let env = policy.env();
    let mut code = policy.layout.empty_window();
    let mut acc = 0;
    let mut out = Vec::with_capacity(tokens.len());
    for (t, &tok) in tokens.iter().enumerate() {
        let (v_s, v_f) = table.at(t, code, acc);
        code = policy.layout.push_window(code, tok);
        acc = env.step_acc(acc, t, tok);
        let (n_s, n_f) = table.at(t + 1, code, acc);
        out.push(log_bayes_factor(v_s, v_f, n_s, n_f));
    }
    out
}

/// Exact success probability at every prefix of `tokens`, `V_0 .. V_T`.
pub fn trajectory_values(policy: &TabularPolicy, table: &ValueTable, tokens: &[usize]) -> Vec<f64> {
    let env = policy.env();
    let mut code = policy.layout.empty_window();
    let mut acc = 0;
    let mut out = Vec::with_capacity(tokens.len() + 1);
    out.push(table.at(0, code, acc).0);
    for (t, &tok) in tokens.iter().enumerate() {
        code = policy.layout.push_window(code, tok);
        acc = env.step_acc(acc, t, tok);
        out.push(table.at(t + 1, code, acc).0);
    }
    out
}

/// Success probability averaged uniformly over queries.
pub fn mean_success(policy: &TabularPolicy) -> Result<f64> {
    let env = policy.env();
    let mut total = 0.0;
    for q in 0..env.num_queries {
        total += ValueTable::build(policy, q, env.answer(q))?.at(0, policy.layout.empty_window(), 0).0;
    }
    Ok(total / env.num_queries as f64)
}

/// Success of the greedy (argmax, lowest id on ties) policy, averaged over
/// queries.
pub fn greedy_success(policy: &TabularPolicy) -> Result<f64> {
    let env = policy.env();
    let mut hits = 0usize;
    for q in 0..env.num_queries {
        let mut path = Vec::with_capacity(env.horizon);
        for _ in 0..env.horizon {
            let lp = policy.log_probs(q, None, &path)?;
            let best = lp
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
                .0;
            path.push(best);
        }
        hits += usize::from(env.reward(q, &path));
    }
    Ok(hits as f64 / env.num_queries as f64)
}
