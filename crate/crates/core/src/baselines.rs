//! Reference advantage estimators and the variant dispatcher.

use serde::{Deserialize, Serialize};

use crate::config::{EstimatorConfig, Variant};
use crate::error::{CreditError, Result};
use crate::evidence::{
    anchor, belief_trace, normalize_group, prior_from_group, zeros_like, BeliefTrace, GroupPrior,
};

/// Binary rewards of one group with their population statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRewards {
    pub rewards: Vec<u8>,
    pub mean: f64,
    pub std: f64,
}

impl GroupRewards {
    pub fn new(rewards: &[u8]) -> Result<Self> {
        if rewards.is_empty() {
            return Err(CreditError::Empty("reward group".into()));
        }
        if let Some(bad) = rewards.iter().find(|&&r| r > 1) {
            return Err(CreditError::Domain(format!("reward {bad} is not binary")));
        }
        let n = rewards.len() as f64;
        let mean = rewards.iter().map(|&r| f64::from(r)).sum::<f64>() / n;
        let var = rewards
            .iter()
            .map(|&r| (f64::from(r) - mean).powi(2))
            .sum::<f64>()
            / n;
        Ok(Self {
            rewards: rewards.to_vec(),
            mean,
            std: var.sqrt(),
        })
    }

    pub fn successes(&self) -> usize {
        self.rewards.iter().filter(|&&r| r == 1).count()
    }
}

/// Standardized trajectory reward; all zeros for a zero-variance group.
pub fn grpo_group_advantage(rewards: &GroupRewards) -> Result<Vec<f64>> {
    if rewards.rewards.len() < 2 {
        return Err(CreditError::Domain(format!(
            "group advantage needs G >= 2, got {}",
            rewards.rewards.len()
        )));
    }
    if rewards.std == 0.0 {
        return Ok(vec![0.0; rewards.rewards.len()]);
    }
    Ok(rewards
        .rewards
        .iter()
        .map(|&r| (f64::from(r) - rewards.mean) / rewards.std)
        .collect())
}

/// Distillation weighting: each token's advantage is its log-ratio.
pub fn state_blind_advantage(log_ratios: &[f64]) -> Vec<f64> {
    log_ratios.to_vec()
}

/// Inputs for one group of trajectories sharing a query.
#[derive(Debug, Clone, Copy)]
pub struct GroupData<'a> {
    pub rewards: &'a [u8],
    pub token_counts: &'a [usize],
    /// Per-token log-ratios, already clipped with the variant's effective clip.
    pub log_ratios: Option<&'a [Vec<f64>]>,
}

/// Output of the variant dispatcher for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAdvantages {
    pub seq_adv: Vec<f64>,
    pub prior: GroupPrior,
    /// Belief traces, present whenever evidence was supplied.
    pub traces: Option<Vec<BeliefTrace>>,
    /// Per-token values before group normalization.
    pub pre_norm: Vec<Vec<f64>>,
    /// Final per-token advantages.
    pub advantages: Vec<Vec<f64>>,
}

/// Dispatch one group through the configured advantage variant.
pub fn spectrum_advantage(
    variant: Variant,
    group: GroupData<'_>,
    cfg: &EstimatorConfig,
) -> Result<GroupAdvantages> {
    let g = group.rewards.len();
    if group.token_counts.len() != g {
        return Err(CreditError::Domain(format!(
            "{g} rewards but {} token counts",
            group.token_counts.len()
        )));
    }
    let rewards = GroupRewards::new(group.rewards)?;
    let seq_adv = grpo_group_advantage(&rewards)?;
    let prior = prior_from_group(rewards.successes(), g, cfg.alpha)?;

    let traces = match group.log_ratios {
        Some(ratios) => {
            if ratios.len() != g {
                return Err(CreditError::Domain(format!(
                    "{g} rewards but {} evidence rows",
                    ratios.len()
                )));
            }
            for (row, &n) in ratios.iter().zip(group.token_counts) {
                if row.len() != n {
                    return Err(CreditError::Domain(format!(
                        "evidence row of length {} for {n} tokens",
                        row.len()
                    )));
                }
            }
            let logit0 = if variant == Variant::OppoNoPrior {
                0.0
            } else {
                prior.logit0
            };
            Some(
                ratios
                    .iter()
                    .map(|r| belief_trace(logit0, r))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        None => None,
    };

    let need = |what: &str| -> Result<&[Vec<f64>]> {
        group.log_ratios.ok_or_else(|| {
            CreditError::Config(format!("variant {variant} needs per-token evidence ({what})"))
        })
    };
    let raw_adv = || -> Vec<Vec<f64>> {
        traces
            .as_ref()
            .map(|ts| ts.iter().map(|t| t.raw_adv.clone()).collect())
            .unwrap_or_default()
    };

    let pre_norm: Vec<Vec<f64>> = match variant {
        Variant::GrpoUniform => seq_adv
            .iter()
            .zip(group.token_counts)
            .map(|(&a, &n)| vec![a; n])
            .collect(),
        Variant::LogratioOnly => need("log ratios")?
            .iter()
            .map(|r| state_blind_advantage(r))
            .collect(),
        Variant::AnchoredLogratio | Variant::OppoNoTracking => {
            anchor(need("log ratios")?, &seq_adv)?
        }
        Variant::OppoNoAnchor => {
            need("belief trace")?;
            raw_adv()
        }
        Variant::OppoFull | Variant::OppoNoClip | Variant::OppoNoPrior => {
            need("belief trace")?;
            anchor(&raw_adv(), &seq_adv)?
        }
    };

    let advantages = if seq_adv.iter().all(|&s| s == 0.0) {
        zeros_like(&pre_norm)
    } else if variant == Variant::GrpoUniform {
        pre_norm.clone()
    } else {
        normalize_group(&pre_norm, cfg.norm_eps)
    };

    Ok(GroupAdvantages {
        seq_adv,
        prior,
        traces,
        pre_norm,
        advantages,
    })
}
