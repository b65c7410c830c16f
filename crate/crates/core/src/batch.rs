//! One query's group of sampled trajectories and everything derived from it.

use serde::{Deserialize, Serialize};

use crate::evidence::{BeliefTrace, GroupPrior, TokenEvidence};

/// G trajectories for one query, filled in stage by stage by the trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBatch {
    pub query: usize,
    pub answer: usize,
    pub tokens: Vec<Vec<usize>>,
    pub rewards: Vec<u8>,
    /// Log-probabilities of the sampled tokens under the policy that
    /// generated them.
    pub old_logp: Vec<Vec<f64>>,
    /// Per-token evidence; `None` until scored.
    pub evidence: Option<Vec<Vec<TokenEvidence>>>,
    pub prior: Option<GroupPrior>,
    pub seq_adv: Vec<f64>,
    /// Per-token advantages before group normalization.
    pub pre_norm: Vec<Vec<f64>>,
    /// Final per-token advantages.
    pub advantages: Vec<Vec<f64>>,
    pub traces: Option<Vec<BeliefTrace>>,
    /// `|sum_t A_raw - (R - V0)|` per trajectory, when traces exist.
    pub residuals: Vec<f64>,
}

impl GroupBatch {
    pub fn new(
        query: usize,
        answer: usize,
        tokens: Vec<Vec<usize>>,
        rewards: Vec<u8>,
        old_logp: Vec<Vec<f64>>,
    ) -> Self {
        Self {
            query,
            answer,
            tokens,
            rewards,
            old_logp,
            evidence: None,
            prior: None,
            seq_adv: Vec::new(),
            pre_norm: Vec::new(),
            advantages: Vec::new(),
            traces: None,
            residuals: Vec::new(),
        }
    }

    pub fn group_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token_counts(&self) -> Vec<usize> {
        self.tokens.iter().map(Vec::len).collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.iter().map(Vec::len).sum()
    }

    /// Clipped log-ratios, one row per trajectory.
    pub fn log_ratios(&self) -> Option<Vec<Vec<f64>>> {
        self.evidence.as_ref().map(|ev| {
            ev.iter()
                .map(|row| row.iter().map(|e| e.log_ratio).collect())
                .collect()
        })
    }
}
