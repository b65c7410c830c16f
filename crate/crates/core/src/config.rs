//! Estimator knobs shared by the evidence pipeline, the trainer and the
//! offline scorer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CreditError, Result};

/// Advantage-weighting variant.
///
/// The first three rows span the distillation/GRPO spectrum; the `oppo_*`
/// rows are the Bayesian estimator and its component ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Trajectory-level standardized reward broadcast to every token.
    GrpoUniform,
    /// Clipped log-ratio as the per-token signal, sign set by the scorer.
    LogratioOnly,
    /// `sign(seq) * |log ratio|` with no evidence clip.
    AnchoredLogratio,
    /// Prior, clipped evidence, belief tracking, anchoring, normalization.
    OppoFull,
    /// Raw Bayesian advantage without the sign override.
    OppoNoAnchor,
    /// `sign(seq) * |clipped log ratio|`: anchoring without the belief state.
    OppoNoTracking,
    /// Full pipeline with the evidence clip removed.
    OppoNoClip,
    /// Full pipeline with the uninformative prior `l0 = 0`.
    OppoNoPrior,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::GrpoUniform,
        Variant::LogratioOnly,
        Variant::AnchoredLogratio,
        Variant::OppoFull,
        Variant::OppoNoAnchor,
        Variant::OppoNoTracking,
        Variant::OppoNoClip,
        Variant::OppoNoPrior,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::GrpoUniform => "grpo_uniform",
            Variant::LogratioOnly => "logratio_only",
            Variant::AnchoredLogratio => "anchored_logratio",
            Variant::OppoFull => "oppo_full",
            Variant::OppoNoAnchor => "oppo_no_anchor",
            Variant::OppoNoTracking => "oppo_no_tracking",
            Variant::OppoNoClip => "oppo_no_clip",
            Variant::OppoNoPrior => "oppo_no_prior",
        }
    }

    /// Whether the variant consumes per-token evidence.
    pub fn needs_evidence(self) -> bool {
        !matches!(self, Variant::GrpoUniform)
    }

    /// Whether the variant overrides token signs with the sequence sign.
    pub fn is_anchored(self) -> bool {
        matches!(
            self,
            Variant::AnchoredLogratio
                | Variant::OppoFull
                | Variant::OppoNoTracking
                | Variant::OppoNoClip
                | Variant::OppoNoPrior
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = CreditError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| CreditError::Config(format!("unknown variant `{s}`")))
    }
}

/// Which scorer produces the per-token evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// The live student scores both contexts.
    SelfOracle,
    /// A frozen teacher scores both contexts.
    TeacherOracle,
    /// Exact Bayes factors from enumeration (synthetic environments only).
    ExactOracle,
}

impl OracleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            OracleMode::SelfOracle => "self_oracle",
            OracleMode::TeacherOracle => "teacher_oracle",
            OracleMode::ExactOracle => "exact_oracle",
        }
    }
}

impl fmt::Display for OracleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OracleMode {
    type Err = CreditError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self_oracle" => Ok(OracleMode::SelfOracle),
            "teacher_oracle" => Ok(OracleMode::TeacherOracle),
            "exact_oracle" => Ok(OracleMode::ExactOracle),
            _ => Err(CreditError::Config(format!("unknown oracle mode `{s}`"))),
        }
    }
}

/// All estimator knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub variant: Variant,
    /// Beta(alpha, alpha) prior strength for the group success rate.
    pub alpha: f64,
    /// Evidence clip bound C on each per-token log-ratio.
    pub evidence_clip: f64,
    /// Additive epsilon in the group normalization denominator.
    pub norm_eps: f64,
    /// Importance-ratio clip of the surrogate objective.
    pub surrogate_clip: f64,
    pub oracle_mode: OracleMode,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            variant: Variant::OppoFull,
            alpha: 1.0,
            evidence_clip: 3.0,
            norm_eps: 1e-8,
            surrogate_clip: 0.2,
            oracle_mode: OracleMode::SelfOracle,
        }
    }
}

impl EstimatorConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_oracle(mut self, mode: OracleMode) -> Self {
        self.oracle_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.evidence_clip > 0.0) {
            return Err(CreditError::Config(format!(
                "evidence_clip must be > 0, got {}",
                self.evidence_clip
            )));
        }
        if !(self.norm_eps > 0.0) || !self.norm_eps.is_finite() {
            return Err(CreditError::Config(format!(
                "norm_eps must be finite and > 0, got {}",
                self.norm_eps
            )));
        }
        if !(self.surrogate_clip > 0.0 && self.surrogate_clip < 1.0) {
            return Err(CreditError::Config(format!(
                "surrogate_clip must lie in (0, 1), got {}",
                self.surrogate_clip
            )));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(CreditError::Config(format!(
                "alpha must be finite and > 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Clip bound actually applied when building evidence for this variant.
    ///
    /// `oppo_no_clip` and `anchored_logratio` run without the evidence clip.
    pub fn effective_clip(&self) -> f64 {
        match self.variant {
            Variant::OppoNoClip | Variant::AnchoredLogratio => f64::INFINITY,
            _ => self.evidence_clip,
        }
    }
}
