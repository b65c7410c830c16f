//! Group-based clipped-surrogate training of tabular policies.
//!
//! One step rolls out a few query groups from the current policy, scores
//! every token with the configured oracle, turns the evidence into per-token
//! advantages with the configured variant, and takes `inner_epochs` gradient
//! ascent steps on the clipped surrogate.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{spectrum_advantage, GroupData};
use crate::batch::GroupBatch;
use crate::config::{EstimatorConfig, OracleMode};
use crate::error::{CreditError, Result};
use crate::evidence::{sign, TokenEvidence};
use crate::par::Exec;
use crate::synth::env::EnvSpec;
use crate::synth::exact::{greedy_success, mean_success, ValueTable};
use crate::synth::oracle::{IdealTeacher, Oracle};
use crate::synth::policy::{entropy, PolicySpec, Scorer, TabularPolicy};
use crate::synth::rollout::rollout_group;

/// Optimisation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub lr: f64,
    pub steps: usize,
    pub inner_epochs: usize,
    pub group_size: usize,
    /// Query groups rolled out per step.
    pub queries_per_step: usize,
    pub seeds: Vec<u64>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            steps: 300,
            inner_epochs: 1,
            group_size: 8,
            queries_per_step: 4,
            seeds: vec![0],
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(CreditError::Config(format!("lr must be finite and > 0, got {}", self.lr)));
        }
        if self.inner_epochs == 0 {
            return Err(CreditError::Config("inner_epochs must be >= 1".into()));
        }
        if self.group_size < 2 {
            return Err(CreditError::Config("group_size must be >= 2".into()));
        }
        if self.queries_per_step == 0 {
            return Err(CreditError::Config("queries_per_step must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(CreditError::Config("at least one seed is required".into()));
        }
        Ok(())
    }
}

/// Where teacher-oracle evidence comes from.
#[derive(Debug, Clone)]
pub enum TeacherSource {
    /// A frozen table, typically a longer-trained policy.
    Table(TabularPolicy),
    /// Exact success conditionals of the current student.
    Ideal,
}

/// Per-step training diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    /// Mean row entropy over the contexts visited this step.
    pub entropy: f64,
    pub surrogate_clip_frac: f64,
    pub evidence_clip_frac: f64,
    /// Mean budget residual; NaN when the variant builds no belief traces.
    pub telescoping_residual: f64,
    /// Fraction of non-zero pre-normalization advantages whose sign the
    /// normalization flipped.
    pub sign_flip_frac: f64,
}

/// Log-probabilities of the sampled tokens under one context mode.
pub fn score_tokens(
    scorer: &dyn Scorer,
    query: usize,
    answer: usize,
    tokens: &[usize],
    with_answer_feature: bool,
) -> Result<Vec<f64>> {
    let ans = with_answer_feature.then_some(answer);
    (0..tokens.len())
        .map(|t| {
            let lp = scorer.log_probs(query, ans, &tokens[..t])?;
            lp.get(tokens[t]).copied().ok_or_else(|| {
                CreditError::Domain(format!("token {} outside vocabulary", tokens[t]))
            })
        })
        .collect()
}

/// Fill `batch.evidence` with clipped per-token evidence from `oracle`.
///
/// In exact mode the stored pair is the log-probability of the token under
/// the success branch (oracle) and under the failure branch (plain), so that
/// their clipped difference is the clipped exact Bayes factor. An infinite
/// factor is stored as a pair `2C` apart, which clips to exactly `±C`.
pub fn attach_evidence(batch: &mut GroupBatch, oracle: &Oracle<'_>, clip: f64) -> Result<()> {
    let evidence = match oracle.mode {
        OracleMode::SelfOracle | OracleMode::TeacherOracle => {
            let scorer = oracle.scorer();
            batch
                .tokens
                .iter()
                .map(|traj| {
                    let plain = score_tokens(scorer, batch.query, batch.answer, traj, false)?;
                    let ans = score_tokens(scorer, batch.query, batch.answer, traj, true)?;
                    plain
                        .iter()
                        .zip(&ans)
                        .map(|(&s, &o)| TokenEvidence::new(s, o, clip))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?
        }
        OracleMode::ExactOracle => {
            let policy = oracle.student;
            let table = ValueTable::build(policy, batch.query, batch.answer)?;
            batch
                .tokens
                .iter()
                .map(|traj| exact_evidence(policy, &table, batch.query, traj, clip))
                .collect::<Result<Vec<_>>>()?
        }
    };
    batch.evidence = Some(evidence);
    Ok(())
}

fn exact_evidence(
    policy: &TabularPolicy,
    table: &ValueTable,
    query: usize,
    tokens: &[usize],
    clip: f64,
) -> Result<Vec<TokenEvidence>> {
    let env = policy.env();
    let layout = &policy.layout;
    let mut code = layout.empty_window();
    let mut acc = 0;
    let mut out = Vec::with_capacity(tokens.len());
    for (t, &tok) in tokens.iter().enumerate() {
        let ln_pi = policy.row_log_probs(layout.context(query, code, acc, t), None)[tok];
        let (v_s, v_f) = table.at(t, code, acc);
        code = layout.push_window(code, tok);
        acc = env.step_acc(acc, t, tok);
        let (n_s, n_f) = table.at(t + 1, code, acc);
        let (plain, oracle) = if v_s == 0.0 || v_f == 0.0 {
            (ln_pi, ln_pi)
        } else {
            let ln_s = (ln_pi + n_s.ln() - v_s.ln()).min(0.0);
            let ln_f = (ln_pi + n_f.ln() - v_f.ln()).min(0.0);
            match (n_s == 0.0, n_f == 0.0) {
                (false, true) | (true, false) if !clip.is_finite() => {
                    return Err(CreditError::Scoring(format!(
                        "infinite exact Bayes factor at position {t} needs a finite evidence clip"
                    )));
                }
                (false, true) => (ln_s - 2.0 * clip, ln_s),
                (true, false) => (ln_f, ln_f - 2.0 * clip),
                (true, true) => (ln_pi, ln_pi),
                (false, false) => (ln_f, ln_s),
            }
        };
        out.push(TokenEvidence::new(plain, oracle, clip)?);
    }
    Ok(out)
}

/// Populate prior, sequence advantages, traces, residuals and final
/// per-token advantages for one batch.
pub fn compute_advantages(batch: &mut GroupBatch, cfg: &EstimatorConfig) -> Result<()> {
    let log_ratios = batch.log_ratios();
    let counts = batch.token_counts();
    let out = spectrum_advantage(
        cfg.variant,
        GroupData {
            rewards: &batch.rewards,
            token_counts: &counts,
            log_ratios: log_ratios.as_deref(),
        },
        cfg,
    )?;
    batch.residuals = match &out.traces {
        Some(traces) => traces
            .iter()
            .zip(&batch.rewards)
            .map(|(tr, &r)| tr.budget_residual(f64::from(r)))
            .collect(),
        None => Vec::new(),
    };
    batch.prior = Some(out.prior);
    batch.seq_adv = out.seq_adv;
    batch.pre_norm = out.pre_norm;
    batch.advantages = out.advantages;
    batch.traces = out.traces;
    Ok(())
}

/// Value, gradient and clip statistics of the clipped surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateEval {
    pub objective: f64,
    pub grad: Vec<f64>,
    /// Tokens whose clipped branch is strictly binding.
    pub clipped: usize,
    pub tokens: usize,
}

impl SurrogateEval {
    pub fn clip_frac(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.clipped as f64 / self.tokens as f64
        }
    }
}

/// Mean over batches of `(1/G) sum_i (1/T_i) sum_t min(rho A, clip(rho) A)`
/// and its analytic gradient with respect to the plain logits.
pub fn surrogate_eval(
    policy: &TabularPolicy,
    batches: &[GroupBatch],
    surrogate_clip: f64,
) -> Result<SurrogateEval> {
    let env = policy.env();
    let layout = &policy.layout;
    let k = policy.vocab();
    let mut grad = vec![0.0; policy.num_params()];
    let mut objective = 0.0;
    let mut clipped = 0;
    let mut tokens = 0;
    if batches.is_empty() {
        return Ok(SurrogateEval {
            objective,
            grad,
            clipped,
            tokens,
        });
    }
    let (lo, hi) = (1.0 - surrogate_clip, 1.0 + surrogate_clip);
    let n_batches = batches.len() as f64;
    for b in batches {
        if b.advantages.len() != b.tokens.len() {
            return Err(CreditError::Config("batch advantages not computed".into()));
        }
        let g = b.group_size() as f64;
        for ((traj, adv), old) in b.tokens.iter().zip(&b.advantages).zip(&b.old_logp) {
            if traj.is_empty() {
                continue;
            }
            let w = 1.0 / (n_batches * g * traj.len() as f64);
            let mut code = layout.empty_window();
            let mut acc = 0;
            for (t, &tok) in traj.iter().enumerate() {
                let ctx = layout.context(b.query, code, acc, t);
                let lp = policy.row_log_probs(ctx, None);
                let rho = (lp[tok] - old[t]).exp();
                let a = adv[t];
                let unclipped = rho * a;
                let clipped_val = rho.clamp(lo, hi) * a;
                objective += w * unclipped.min(clipped_val);
                tokens += 1;
                let binding = (a > 0.0 && rho > hi) || (a < 0.0 && rho < lo);
                if binding {
                    clipped += 1;
                } else if a != 0.0 {
                    let scale = w * a * rho;
                    let row = &mut grad[ctx * k..(ctx + 1) * k];
                    for (j, g_j) in row.iter_mut().enumerate() {
                        let onehot = if j == tok { 1.0 } else { 0.0 };
                        *g_j += scale * (onehot - lp[j].exp());
                    }
                }
                code = layout.push_window(code, tok);
                acc = env.step_acc(acc, t, tok);
            }
        }
    }
    Ok(SurrogateEval {
        objective,
        grad,
        clipped,
        tokens,
    })
}

/// One gradient-ascent step on the clipped surrogate.
///
/// The parameters are left untouched if the gradient is not finite.
pub fn surrogate_update(
    policy: &mut TabularPolicy,
    batches: &[GroupBatch],
    cfg: &EstimatorConfig,
    lr: f64,
) -> Result<SurrogateEval> {
    let eval = surrogate_eval(policy, batches, cfg.surrogate_clip)?;
    if let Some((index, &value)) = eval.grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(CreditError::NonFiniteGradient { index, value });
    }
    for (theta, g) in policy.logits.iter_mut().zip(&eval.grad) {
        *theta += lr * g;
    }
    Ok(eval)
}

fn batch_metrics(policy: &TabularPolicy, batches: &[GroupBatch], clip: f64) -> (f64, f64, f64, f64, f64) {
    let env = policy.env();
    let layout = &policy.layout;
    let mut rewards = 0.0;
    let mut n_traj = 0usize;
    let mut visited = BTreeSet::new();
    let (mut ev_clipped, mut ev_total) = (0usize, 0usize);
    let (mut residual, mut n_res) = (0.0, 0usize);
    let (mut flips, mut n_flip) = (0usize, 0usize);
    for b in batches {
        rewards += b.rewards.iter().map(|&r| f64::from(r)).sum::<f64>();
        n_traj += b.group_size();
        for traj in &b.tokens {
            let mut code = layout.empty_window();
            let mut acc = 0;
            for (t, &tok) in traj.iter().enumerate() {
                visited.insert(layout.context(b.query, code, acc, t));
                code = layout.push_window(code, tok);
                acc = env.step_acc(acc, t, tok);
            }
        }
        if let Some(ev) = &b.evidence {
            for e in ev.iter().flatten() {
                ev_total += 1;
                if clip.is_finite() && e.log_ratio.abs() >= clip {
                    ev_clipped += 1;
                }
            }
        }
        residual += b.residuals.iter().sum::<f64>();
        n_res += b.residuals.len();
        for (pre, adv) in b.pre_norm.iter().flatten().zip(b.advantages.iter().flatten()) {
            if *pre != 0.0 {
                n_flip += 1;
                if sign(*adv) != sign(*pre) {
                    flips += 1;
                }
            }
        }
    }
    let ent = if visited.is_empty() {
        0.0
    } else {
        visited
            .iter()
            .map(|&c| entropy(&policy.row_probs(c, None)))
            .sum::<f64>()
            / visited.len() as f64
    };
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (
        rewards / n_traj.max(1) as f64,
        ent,
        frac(ev_clipped, ev_total),
        if n_res == 0 { f64::NAN } else { residual / n_res as f64 },
        frac(flips, n_flip),
    )
}

/// Outcome of one seeded training run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub metrics: Vec<StepMetrics>,
    /// Enumerated success of the stochastic initial policy.
    pub initial_success: f64,
    /// Enumerated success of the stochastic final policy.
    pub final_success: f64,
    pub final_greedy_success: f64,
    pub policy: TabularPolicy,
}

/// Roll out, score, compute advantages and update for `trainer.steps` steps.
pub fn train_run(
    env: &EnvSpec,
    policy_spec: &PolicySpec,
    est: &EstimatorConfig,
    trainer: &TrainerConfig,
    teacher: Option<&TeacherSource>,
    seed: u64,
) -> Result<RunResult> {
    env.validate()?;
    env.check_exact()?;
    est.validate()?;
    trainer.validate()?;
    if est.oracle_mode == OracleMode::TeacherOracle && teacher.is_none() {
        return Err(CreditError::Config("teacher_oracle needs a teacher source".into()));
    }
    let mut policy = TabularPolicy::uniform(env, policy_spec);
    if let Some(TeacherSource::Table(t)) = teacher {
        if t.env() != env {
            return Err(CreditError::Config("teacher table was built for a different environment".into()));
        }
    }
    let initial_success = mean_success(&policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clip = est.effective_clip();
    let mut metrics = Vec::with_capacity(trainer.steps);
    for step in 0..trainer.steps {
        let mut batches = Vec::with_capacity(trainer.queries_per_step);
        for _ in 0..trainer.queries_per_step {
            let q = env.sample_query(&mut rng);
            let s: u64 = rng.random();
            batches.push(rollout_group(&policy, q, trainer.group_size, s)?);
        }
        if est.variant.needs_evidence() {
            let ideal;
            let scorer: Option<&dyn Scorer> = match teacher {
                Some(TeacherSource::Table(t)) => Some(t),
                Some(TeacherSource::Ideal) => {
                    ideal = IdealTeacher::new(&policy)?;
                    Some(&ideal)
                }
                None => None,
            };
            let oracle = Oracle::new(est.oracle_mode, &policy, scorer)?;
            for b in &mut batches {
                attach_evidence(b, &oracle, clip)?;
            }
        }
        for b in &mut batches {
            compute_advantages(b, est)?;
        }
        let (mean_reward, ent, ev_clip, residual, flips) = batch_metrics(&policy, &batches, clip);
        let mut clip_frac = 0.0;
        for _ in 0..trainer.inner_epochs {
            clip_frac += surrogate_update(&mut policy, &batches, est, trainer.lr)?.clip_frac();
        }
        metrics.push(StepMetrics {
            step,
            mean_reward,
            entropy: ent,
            surrogate_clip_frac: clip_frac / trainer.inner_epochs as f64,
            evidence_clip_frac: ev_clip,
            telescoping_residual: residual,
            sign_flip_frac: flips,
        });
    }
    Ok(RunResult {
        seed,
        metrics,
        initial_success,
        final_success: mean_success(&policy)?,
        final_greedy_success: greedy_success(&policy)?,
        policy,
    })
}

/// [`train_run`] for every seed in `trainer.seeds`, in seed order.
pub fn train_seeds(
    exec: Exec,
    env: &EnvSpec,
    policy_spec: &PolicySpec,
    est: &EstimatorConfig,
    trainer: &TrainerConfig,
    teacher: Option<&TeacherSource>,
) -> Result<Vec<RunResult>> {
    exec.try_map(trainer.seeds.len(), |i| {
        train_run(env, policy_spec, est, trainer, teacher, trainer.seeds[i])
    })
}
