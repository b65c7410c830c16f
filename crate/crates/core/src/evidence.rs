//! Bayesian evidence recursion over a single trajectory.
//!
//! The running success belief is tracked in log-odds space: each token adds
//! its clipped log-ratio to the log-odds, and the per-token advantage is the
//! resulting change in success probability. Everything here is a pure
//! function of its inputs.

use serde::{Deserialize, Serialize};

use crate::error::{CreditError, Result};

/// Numerically stable logistic function, total over the extended reals.
#[inline]
pub fn sigmoid(l: f64) -> f64 {
    if l >= 0.0 {
        1.0 / (1.0 + (-l).exp())
    } else {
        let e = l.exp();
        e / (1.0 + e)
    }
}

/// Logistic function of a finite log-odds value.
pub fn sigmoid_logodds(l: f64) -> Result<f64> {
    if !l.is_finite() {
        return Err(CreditError::NonFinite {
            context: "log-odds",
            value: l,
        });
    }
    Ok(sigmoid(l))
}

/// `ln(p / (1 - p))`, infinite at the endpoints.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Per-token scoring evidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenEvidence {
    /// Log-probability of the sampled token under the plain context.
    pub plain_logp: f64,
    /// Log-probability under the answer-augmented context.
    pub oracle_logp: f64,
    /// `clamp(oracle_logp - plain_logp, -C, C)`.
    pub log_ratio: f64,
}

impl TokenEvidence {
    pub fn new(plain_logp: f64, oracle_logp: f64, clip: f64) -> Result<Self> {
        if plain_logp > 0.0 || oracle_logp > 0.0 {
            return Err(CreditError::Scoring(format!(
                "log-probabilities must be <= 0 (plain {plain_logp}, oracle {oracle_logp})"
            )));
        }
        let log_ratio = clip_log_evidence(oracle_logp, plain_logp, clip)?;
        Ok(Self {
            plain_logp,
            oracle_logp,
            log_ratio,
        })
    }
}

/// Clipped per-token log-ratio `clamp(o - s, -C, C)`.
///
/// `oracle_logp = -inf` is allowed and maps to `-C`; a sampled token with
/// zero plain probability is rejected.
pub fn clip_log_evidence(oracle_logp: f64, plain_logp: f64, clip: f64) -> Result<f64> {
    if !(clip > 0.0) {
        return Err(CreditError::Domain(format!("evidence clip must be > 0, got {clip}")));
    }
    if plain_logp.is_nan() || oracle_logp.is_nan() {
        return Err(CreditError::NonFinite {
            context: "token log-probability",
            value: f64::NAN,
        });
    }
    if plain_logp == f64::NEG_INFINITY {
        return Err(CreditError::Scoring(
            "sampled token has zero probability under the plain context".into(),
        ));
    }
    if plain_logp == f64::INFINITY {
        return Err(CreditError::NonFinite {
            context: "plain log-probability",
            value: plain_logp,
        });
    }
    Ok((oracle_logp - plain_logp).clamp(-clip, clip))
}

/// Clamp an extended-real log Bayes factor into `[-C, C]`.
pub fn clip_log_ratio(log_ratio: f64, clip: f64) -> Result<f64> {
    if log_ratio.is_nan() {
        return Err(CreditError::NonFinite {
            context: "log ratio",
            value: log_ratio,
        });
    }
    Ok(log_ratio.clamp(-clip, clip))
}

/// Beta(alpha, alpha) smoothed group prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupPrior {
    pub success_count: usize,
    pub group_size: usize,
    pub alpha: f64,
    pub v0: f64,
    pub logit0: f64,
}

/// Posterior mean of the group success rate and its log-odds.
pub fn prior_from_group(k: usize, group_size: usize, alpha: f64) -> Result<GroupPrior> {
    if group_size == 0 {
        return Err(CreditError::Config("group size must be >= 1".into()));
    }
    if k > group_size {
        return Err(CreditError::Config(format!(
            "success count {k} exceeds group size {group_size}"
        )));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(CreditError::Config(format!("alpha must be finite and > 0, got {alpha}")));
    }
    let k_f = k as f64;
    let g_f = group_size as f64;
    Ok(GroupPrior {
        success_count: k,
        group_size,
        alpha,
        v0: (k_f + alpha) / (g_f + 2.0 * alpha),
        logit0: ((k_f + alpha) / (g_f - k_f + alpha)).ln(),
    })
}

fn check_unit(v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(CreditError::Domain(format!("belief {v} outside [0, 1]")));
    }
    Ok(())
}

#[inline]
fn lipschitz_cap(a: f64, log_lambda: f64) -> f64 {
    let cap = (0.25 * log_lambda.abs()).min(1.0);
    a.clamp(-cap, cap)
}

/// Rational closed-form advantage `v(1-v)(lambda-1)/(lambda v + 1 - v)` with
/// lambda given in the log domain.
///
/// Evaluated with `expm1` on whichever side keeps the exponentials bounded,
/// so `log_lambda = +-inf` yields the limits `1 - v` and `-v`.
pub fn advantage_exact(v: f64, log_lambda: f64) -> Result<f64> {
    check_unit(v)?;
    if log_lambda.is_nan() {
        return Err(CreditError::Domain("log lambda is NaN".into()));
    }
    Ok(rational_advantage(v, 1.0 - v, log_lambda))
}

/// Same closed form, starting from a finite log-odds state.
///
/// Both `sigmoid(l)` and `sigmoid(-l)` are evaluated directly so the state
/// weight keeps full relative precision when the belief is near 0 or 1.
pub fn advantage_from_logodds(l: f64, log_lambda: f64) -> f64 {
    rational_advantage(sigmoid(l), sigmoid(-l), log_lambda)
}

#[inline]
fn rational_advantage(v: f64, one_minus_v: f64, x: f64) -> f64 {
    let weight = v * one_minus_v;
    if weight == 0.0 || x == 0.0 {
        return 0.0;
    }
    let a = if x >= 0.0 {
        weight * (-(-x).exp_m1()) / (v + one_minus_v * (-x).exp())
    } else {
        weight * x.exp_m1() / (one_minus_v + v * x.exp())
    };
    lipschitz_cap(a, x)
}

/// First-order approximation `v(1-v) log lambda`.
pub fn advantage_first_order(v: f64, log_lambda: f64) -> Result<f64> {
    check_unit(v)?;
    Ok(v * (1.0 - v) * log_lambda)
}

/// Running log-odds, beliefs and per-token advantages along one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefTrace {
    /// `l_1 .. l_{T+1}`; the first entry is the prior log-odds.
    pub logodds: Vec<f64>,
    /// `sigmoid(logodds)`.
    pub values: Vec<f64>,
    /// Per-token advantage, one per input ratio.
    pub raw_adv: Vec<f64>,
}

impl BeliefTrace {
    pub fn len(&self) -> usize {
        self.raw_adv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_adv.is_empty()
    }

    pub fn prior_value(&self) -> f64 {
        self.values[0]
    }

    pub fn terminal_value(&self) -> f64 {
        *self.values.last().expect("trace always holds the prior")
    }

    /// `|sum_t A_t - (reward - V0)|`; zero only if the belief reached the outcome.
    pub fn budget_residual(&self, reward: f64) -> f64 {
        let total: f64 = self.raw_adv.iter().sum();
        (total - (reward - self.prior_value())).abs()
    }
}

/// Accumulate clipped log-ratios from the prior log-odds.
pub fn belief_trace(logit0: f64, log_ratios: &[f64]) -> Result<BeliefTrace> {
    if !logit0.is_finite() {
        return Err(CreditError::NonFinite {
            context: "prior log-odds",
            value: logit0,
        });
    }
    let mut logodds = Vec::with_capacity(log_ratios.len() + 1);
    let mut values = Vec::with_capacity(log_ratios.len() + 1);
    let mut raw_adv = Vec::with_capacity(log_ratios.len());
    let mut l = logit0;
    logodds.push(l);
    values.push(sigmoid(l));
    for &x in log_ratios {
        if !x.is_finite() {
            return Err(CreditError::NonFinite {
                context: "log ratio in belief trace",
                value: x,
            });
        }
        raw_adv.push(advantage_from_logodds(l, x));
        l += x;
        logodds.push(l);
        values.push(sigmoid(l));
    }
    Ok(BeliefTrace {
        logodds,
        values,
        raw_adv,
    })
}

/// `+1`, `-1` or `0`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Replace each token's sign with its trajectory's sequence sign.
pub fn anchor(raw: &[Vec<f64>], seq_adv: &[f64]) -> Result<Vec<Vec<f64>>> {
    if raw.len() != seq_adv.len() {
        return Err(CreditError::Domain(format!(
            "{} trajectories but {} sequence advantages",
            raw.len(),
            seq_adv.len()
        )));
    }
    Ok(raw
        .iter()
        .zip(seq_adv)
        .map(|(traj, &s)| {
            let sg = sign(s);
            traj.iter().map(|a| sg * a.abs()).collect()
        })
        .collect())
}

/// Standardize all tokens of one group against their pooled mean and
/// population standard deviation.
pub fn normalize_group(values: &[Vec<f64>], norm_eps: f64) -> Vec<Vec<f64>> {
    let count: usize = values.iter().map(Vec::len).sum();
    if count == 0 {
        return values.to_vec();
    }
    let n = count as f64;
    let mean = values.iter().flatten().sum::<f64>() / n;
    let var = values
        .iter()
        .flatten()
        .map(|x| (x - mean) * (x - mean))
        .sum::<f64>()
        / n;
    let denom = var.sqrt() + norm_eps;
    values
        .iter()
        .map(|traj| traj.iter().map(|x| (x - mean) / denom).collect())
        .collect()
}

/// Anchored values before and after group normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchoredGroup {
    pub anchored: Vec<Vec<f64>>,
    pub normalized: Vec<Vec<f64>>,
}

/// Anchor raw advantages to the sequence signs, then normalize over the group.
///
/// A group whose sequence advantages are all zero contributes nothing.
pub fn anchor_and_normalize(
    raw: &[Vec<f64>],
    seq_adv: &[f64],
    norm_eps: f64,
) -> Result<AnchoredGroup> {
    if raw.is_empty() {
        return Err(CreditError::Empty("advantage group".into()));
    }
    let anchored = anchor(raw, seq_adv)?;
    let normalized = if seq_adv.iter().all(|&s| s == 0.0) {
        zeros_like(raw)
    } else {
        normalize_group(&anchored, norm_eps)
    };
    Ok(AnchoredGroup {
        anchored,
        normalized,
    })
}

pub(crate) fn zeros_like(v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    v.iter().map(|t| vec![0.0; t.len()]).collect()
}
