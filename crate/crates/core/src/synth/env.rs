//! Fixed-horizon token environments with a verifiable terminal reward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CreditError, Result};

/// Largest vocabulary accepted by exact enumeration.
pub const EXACT_MAX_VOCAB: usize = 8;
/// Longest horizon accepted by exact enumeration.
pub const EXACT_MAX_HORIZON: usize = 12;

/// How the terminal reward is computed from the emitted tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardRule {
    /// `R = 1` iff the sum of all token ids mod M equals the answer.
    ParityChain,
    /// `R = 1` iff the sum of the tokens at positions
    /// `pivot .. pivot + lock_len` mod M equals the answer; every other
    /// position is irrelevant.
    PrefixLock { pivot: usize, lock_len: usize },
}

/// An enumerable environment: queries, answers and a reward automaton.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub vocab_size: usize,
    pub horizon: usize,
    pub answer_space: usize,
    pub reward_rule: RewardRule,
    #[serde(default = "default_queries")]
    pub num_queries: usize,
    /// Explicit answer per query; defaults to `query % answer_space`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<usize>>,
}

fn default_queries() -> usize {
    4
}

impl EnvSpec {
    pub fn parity(vocab_size: usize, horizon: usize, answer_space: usize) -> Self {
        Self {
            vocab_size,
            horizon,
            answer_space,
            reward_rule: RewardRule::ParityChain,
            num_queries: answer_space.max(1),
            answers: None,
        }
    }

    pub fn prefix_lock(
        vocab_size: usize,
        horizon: usize,
        answer_space: usize,
        pivot: usize,
        lock_len: usize,
    ) -> Self {
        Self {
            reward_rule: RewardRule::PrefixLock { pivot, lock_len },
            ..Self::parity(vocab_size, horizon, answer_space)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(CreditError::Config("vocab_size must be >= 2".into()));
        }
        if self.horizon == 0 {
            return Err(CreditError::Config("horizon must be >= 1".into()));
        }
        if self.answer_space < 1 {
            return Err(CreditError::Config("answer_space must be >= 1".into()));
        }
        if self.num_queries == 0 {
            return Err(CreditError::Config("num_queries must be >= 1".into()));
        }
        if let RewardRule::PrefixLock { pivot, lock_len } = self.reward_rule {
            if lock_len == 0 || pivot + lock_len > self.horizon {
                return Err(CreditError::Config(format!(
                    "lock window {pivot}..{} does not fit horizon {}",
                    pivot + lock_len,
                    self.horizon
                )));
            }
        }
        if let Some(answers) = &self.answers {
            if answers.len() != self.num_queries {
                return Err(CreditError::Config(format!(
                    "{} answers for {} queries",
                    answers.len(),
                    self.num_queries
                )));
            }
        }
        let reachable = self.reachable_residues();
        for q in 0..self.num_queries {
            let y = self.answer(q);
            if y >= self.answer_space || !reachable[y] {
                return Err(CreditError::Config(format!(
                    "query {q}: answer {y} is unreachable"
                )));
            }
        }
        Ok(())
    }

    /// Fails unless the environment fits the exact-enumeration bounds.
    pub fn check_exact(&self) -> Result<()> {
        if self.vocab_size > EXACT_MAX_VOCAB || self.horizon > EXACT_MAX_HORIZON {
            return Err(CreditError::TooLarge(format!(
                "K = {}, T = {} (limits K <= {EXACT_MAX_VOCAB}, T <= {EXACT_MAX_HORIZON})",
                self.vocab_size, self.horizon
            )));
        }
        Ok(())
    }

    pub fn answer(&self, query: usize) -> usize {
        match &self.answers {
            Some(a) => a[query],
            None => query % self.answer_space,
        }
    }

    /// Reward accumulator after emitting `token` at position `t`.
    #[inline]
    pub fn step_acc(&self, acc: usize, t: usize, token: usize) -> usize {
        match self.reward_rule {
            RewardRule::ParityChain => (acc + token) % self.answer_space,
            RewardRule::PrefixLock { pivot, lock_len } => {
                if t >= pivot && t < pivot + lock_len {
                    (acc + token) % self.answer_space
                } else {
                    acc
                }
            }
        }
    }

    pub fn accumulate(&self, tokens: &[usize]) -> usize {
        tokens
            .iter()
            .enumerate()
            .fold(0, |acc, (t, &tok)| self.step_acc(acc, t, tok))
    }

    /// Terminal reward of a complete sequence.
    pub fn reward(&self, query: usize, tokens: &[usize]) -> u8 {
        u8::from(self.accumulate(tokens) == self.answer(query))
    }

    /// Positions at which the accumulator stops changing for good.
    pub fn commit_position(&self) -> usize {
        match self.reward_rule {
            RewardRule::ParityChain => self.horizon,
            RewardRule::PrefixLock { pivot, lock_len } => pivot + lock_len,
        }
    }

    /// Draw a query id uniformly.
    pub fn sample_query<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.num_queries)
    }

    fn reachable_residues(&self) -> Vec<bool> {
        let m = self.answer_space;
        let mut cur = vec![false; m];
        cur[0] = true;
        for t in 0..self.horizon {
            let mut next = vec![false; m];
            for acc in (0..m).filter(|&a| cur[a]) {
                for tok in 0..self.vocab_size {
                    next[self.step_acc(acc, t, tok)] = true;
                }
            }
            cur = next;
        }
        cur
    }
}
