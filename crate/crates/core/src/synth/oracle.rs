//! Oracle scorers and their quality relative to the exact success branch.

use serde::{Deserialize, Serialize};

use crate::config::OracleMode;
use crate::error::{CreditError, Result};
use crate::synth::exact::{exact_conditionals, log_bayes_factor, ValueTable};
use crate::synth::policy::{Scorer, TabularPolicy};

/// Teacher built from the exact success conditional of a student.
///
/// The plain row is the student's own next-token distribution; the
/// answer-conditioned row is the exact `P(token | prefix, R = 1)`.
#[derive(Debug, Clone)]
pub struct IdealTeacher<'a> {
    student: &'a TabularPolicy,
    /// One table per `(query, target)` pair.
    tables: Vec<ValueTable>,
}

impl<'a> IdealTeacher<'a> {
    pub fn new(student: &'a TabularPolicy) -> Result<Self> {
        let env = student.env();
        let mut tables = Vec::with_capacity(env.num_queries * env.answer_space);
        for q in 0..env.num_queries {
            for y in 0..env.answer_space {
                tables.push(ValueTable::build(student, q, y)?);
            }
        }
        Ok(Self { student, tables })
    }

    fn table(&self, query: usize, target: usize) -> &ValueTable {
        &self.tables[query * self.student.env().answer_space + target]
    }
}

impl Scorer for IdealTeacher<'_> {
    fn vocab_size(&self) -> usize {
        self.student.vocab()
    }

    fn log_probs(&self, query: usize, answer: Option<usize>, prefix: &[usize]) -> Result<Vec<f64>> {
        let plain = self.student.log_probs(query, None, prefix)?;
        let Some(y) = answer else {
            return Ok(plain);
        };
        if y >= self.student.env().answer_space {
            return Err(CreditError::Domain("answer outside answer space".into()));
        }
        match exact_conditionals(self.student, self.table(query, y), prefix) {
            Ok(c) => Ok(c.success.iter().map(|p| p.ln()).collect()),
            // A prefix that has already decided the outcome carries no
            // further evidence.
            Err(CreditError::DegenerateBranch(_)) => Ok(plain),
            Err(e) => Err(e),
        }
    }
}

/// The evidence scorer for one oracle mode.
#[derive(Clone, Copy)]
pub struct Oracle<'a> {
    pub mode: OracleMode,
    pub student: &'a TabularPolicy,
    pub teacher: Option<&'a dyn Scorer>,
}

impl<'a> Oracle<'a> {
    pub fn new(mode: OracleMode, student: &'a TabularPolicy, teacher: Option<&'a dyn Scorer>) -> Result<Self> {
        if mode == OracleMode::TeacherOracle && teacher.is_none() {
            return Err(CreditError::Config("teacher_oracle needs a teacher scorer".into()));
        }
        Ok(Self {
            mode,
            student,
            teacher,
        })
    }

    /// The table that scores both contexts in self and teacher modes.
    pub fn scorer(&self) -> &'a dyn Scorer {
        match (self.mode, self.teacher) {
            (OracleMode::TeacherOracle, Some(t)) => t,
            _ => self.student,
        }
    }

    fn true_table(&self, query: usize) -> Result<ValueTable> {
        ValueTable::build(self.student, query, self.student.env().answer(query))
    }

    /// Unclipped per-token log-ratio.
    ///
    /// Self and teacher modes return `log q(tok | answer) - log q(tok)`;
    /// exact mode returns the extended-real `log lambda*`, which is 0 once
    /// the outcome is already decided.
    pub fn log_ratio(&self, query: usize, prefix: &[usize], token: usize) -> Result<f64> {
        let env = self.student.env();
        if token >= env.vocab_size {
            return Err(CreditError::Domain(format!("token {token} outside vocabulary")));
        }
        match self.mode {
            OracleMode::ExactOracle => {
                let table = self.true_table(query)?;
                let (v_s, v_f) = table.branch_values(self.student, prefix);
                let mut next = prefix.to_vec();
                next.push(token);
                let (n_s, n_f) = table.branch_values(self.student, &next);
                Ok(log_bayes_factor(v_s, v_f, n_s, n_f))
            }
            _ => {
                let scorer = self.scorer();
                let plain = scorer.log_probs(query, None, prefix)?[token];
                let oracle = scorer.log_probs(query, Some(env.answer(query)), prefix)?[token];
                if plain == f64::NEG_INFINITY {
                    return Err(CreditError::Scoring(
                        "token has zero probability under the plain context".into(),
                    ));
                }
                Ok(oracle - plain)
            }
        }
    }

    /// `KL(true success conditional || scorer's answer-conditioned row)`.
    pub fn kl_eps(&self, query: usize, prefix: &[usize]) -> Result<f64> {
        if self.mode == OracleMode::ExactOracle {
            return Ok(0.0);
        }
        let table = self.true_table(query)?;
        let truth = exact_conditionals(self.student, &table, prefix)?;
        let approx = self
            .scorer()
            .log_probs(query, Some(self.student.env().answer(query)), prefix)?;
        Ok(kl_divergence(&truth.success, &approx))
    }

    /// Per-token log-ratios of the scorer and of the exact success branch
    /// over the same reference distribution, plus that success branch.
    pub fn shared_denominator_ratios(&self, query: usize, prefix: &[usize]) -> Result<SharedRatios> {
        let table = self.true_table(query)?;
        let truth = exact_conditionals(self.student, &table, prefix)?;
        let reference = self.scorer().log_probs(query, None, prefix)?;
        let estimate = match self.mode {
            OracleMode::ExactOracle => truth.success.iter().map(|p| p.ln()).collect(),
            _ => self
                .scorer()
                .log_probs(query, Some(self.student.env().answer(query)), prefix)?,
        };
        Ok(SharedRatios {
            log_hat: estimate.iter().zip(&reference).map(|(o, r)| o - r).collect(),
            log_star: truth
                .success
                .iter()
                .zip(&reference)
                .map(|(p, r)| p.ln() - r)
                .collect(),
            success: truth.success,
        })
    }

    /// Oracle quality along one trajectory, up to the first decided prefix.
    pub fn quality_report(&self, query: usize, tokens: &[usize]) -> Result<OracleQualityReport> {
        let table = self.true_table(query)?;
        let env = self.student.env();
        let mut report = OracleQualityReport::default();
        let mut cum = 0.0;
        for t in 0..tokens.len().min(env.horizon) {
            let prefix = &tokens[..t];
            let truth = match exact_conditionals(self.student, &table, prefix) {
                Ok(c) => c,
                Err(CreditError::DegenerateBranch(_)) => break,
                Err(e) => return Err(e),
            };
            let (eps, bias) = if self.mode == OracleMode::ExactOracle {
                (0.0, 0.0)
            } else {
                let scorer = self.scorer();
                let ans = scorer.log_probs(query, Some(env.answer(query)), prefix)?;
                let plain = scorer.log_probs(query, None, prefix)?;
                let eps = kl_divergence(&truth.success, &ans);
                let bias: f64 = truth
                    .success
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(i, p)| p * (ans[i] - plain[i] - truth.log_lambda[i]))
                    .sum();
                (eps, bias)
            };
            cum += eps;
            report.eps.push(eps);
            report.cumulative_eps.push(cum);
            report.mean_bias.push(bias);
            report.failure_branch_gap.push(bias + eps);
        }
        Ok(report)
    }
}

/// Output of [`Oracle::shared_denominator_ratios`].
#[derive(Debug, Clone, PartialEq)]
pub struct SharedRatios {
    pub log_hat: Vec<f64>,
    pub log_star: Vec<f64>,
    /// Exact success-conditional next-token distribution.
    pub success: Vec<f64>,
}

/// Per-position oracle quality along one trajectory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleQualityReport {
    /// `KL(p_success || q_answer)` per position.
    pub eps: Vec<f64>,
    pub cumulative_eps: Vec<f64>,
    /// `E_success[log lambda_hat - log lambda*]` per position.
    pub mean_bias: Vec<f64>,
    /// `mean_bias + eps`: the part of the bias owed to using the plain
    /// marginal in place of the failure branch.
    pub failure_branch_gap: Vec<f64>,
}

/// `sum p (ln p - log_q)`, `+inf` if `q` misses mass that `p` has.
pub fn kl_divergence(p: &[f64], log_q: &[f64]) -> f64 {
    p.iter()
        .zip(log_q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &lq)| {
            if lq == f64::NEG_INFINITY {
                f64::INFINITY
            } else {
                pi * (pi.ln() - lq)
            }
        })
        .sum()
}

/// Log-probabilities of a probability vector.
pub fn log_probs_of(p: &[f64]) -> Vec<f64> {
    p.iter().map(|x| x.ln()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::chunk_rng;
    use crate::synth::env::EnvSpec;
    use crate::synth::policy::{AnswerHint, PolicySpec};

    #[test]
    fn kl_example() {
        let kl = kl_divergence(&[0.9, 0.1], &log_probs_of(&[0.5, 0.5]));
        assert!((kl - 0.368_064_207_168_497).abs() < 1e-15, "{kl}");
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.0, f64::NEG_INFINITY]), f64::INFINITY);
    }

    #[test]
    fn exact_mode_first_position_is_zero() {
        let env = EnvSpec::parity(3, 3, 3);
        let p = TabularPolicy::uniform(&env, &PolicySpec::default());
        let o = Oracle::new(OracleMode::ExactOracle, &p, None).unwrap();
        for tok in 0..3 {
            assert!(o.log_ratio(0, &[], tok).unwrap().abs() < 1e-12);
        }
        assert_eq!(o.kl_eps(0, &[]).unwrap(), 0.0);
    }

    #[test]
    fn self_mode_without_bias_is_zero() {
        let env = EnvSpec::parity(3, 3, 3);
        let mut p = TabularPolicy::uniform(&env, &PolicySpec::default());
        p.randomize(&mut chunk_rng(1, 0), 1.0);
        let o = Oracle::new(OracleMode::SelfOracle, &p, None).unwrap();
        assert_eq!(o.log_ratio(1, &[2], 0).unwrap(), 0.0);
    }

    #[test]
    fn ideal_teacher_uses_marginal_denominator() {
        let env = EnvSpec::parity(3, 4, 3);
        let mut p = TabularPolicy::uniform(&env, &PolicySpec::default());
        p.randomize(&mut chunk_rng(2, 0), 1.5);
        let teacher = IdealTeacher::new(&p).unwrap();
        let t_oracle = Oracle::new(OracleMode::TeacherOracle, &p, Some(&teacher)).unwrap();
        let e_oracle = Oracle::new(OracleMode::ExactOracle, &p, None).unwrap();
        let prefix = [1, 0];
        let v = crate::synth::exact::exact_success_prob(&p, 2, &prefix).unwrap();
        for tok in 0..3 {
            let lt = t_oracle.log_ratio(2, &prefix, tok).unwrap();
            let le = e_oracle.log_ratio(2, &prefix, tok).unwrap();
            let expect = le - (le.exp() * v + 1.0 - v).ln();
            assert!((lt - expect).abs() < 1e-12, "{lt} vs {expect}");
        }
        assert!(t_oracle.kl_eps(2, &prefix).unwrap().abs() < 1e-12);
    }

    #[test]
    fn teacher_mode_requires_teacher() {
        let env = EnvSpec::parity(3, 3, 3);
        let p = TabularPolicy::uniform(&env, &PolicySpec::default());
        assert!(Oracle::new(OracleMode::TeacherOracle, &p, None).is_err());
    }

    #[test]
    fn hinted_self_oracle_has_positive_eps() {
        let env = EnvSpec::parity(3, 4, 3);
        let spec = PolicySpec {
            hint: AnswerHint {
                surface: 1.0,
                ..AnswerHint::default()
            },
            ..PolicySpec::default()
        };
        let p = TabularPolicy::uniform(&env, &spec);
        let o = Oracle::new(OracleMode::SelfOracle, &p, None).unwrap();
        let r = o.quality_report(0, &[0, 1, 2, 0]).unwrap();
        assert!(r.eps.iter().all(|&e| e > 0.0));
        for w in r.cumulative_eps.windows(2) {
            assert!(w[1] >= w[0]);
        }
        let shared = o.shared_denominator_ratios(0, &[0]).unwrap();
        let bias: f64 = shared
            .success
            .iter()
            .zip(shared.log_hat.iter().zip(&shared.log_star))
            .map(|(p, (h, s))| p * (h - s))
            .sum();
        assert!((bias + o.kl_eps(0, &[0]).unwrap()).abs() < 1e-12);
    }
}
