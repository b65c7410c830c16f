//! Diagnostics over belief traces: budget residuals, calibration, the
//! state-weight variance gap, and length/concentration tables.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CreditError, Result};
use crate::evidence::BeliefTrace;
use crate::par::Exec;
use crate::stats::{mean, quantile, Moments};

/// Mean and 95th percentile of a set of residuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub count: usize,
    pub mean: f64,
    pub p95: f64,
}

impl ResidualSummary {
    fn of(xs: &[f64]) -> Self {
        Self {
            count: xs.len(),
            mean: mean(xs),
            p95: quantile(xs, 0.95),
        }
    }
}

/// One `(length quartile, outcome)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualStratum {
    /// 1-based length quartile.
    pub quartile: usize,
    pub reward: u8,
    pub count: usize,
    pub mean: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub per_trajectory: Vec<f64>,
    pub overall: ResidualSummary,
    pub strata: Vec<ResidualStratum>,
}

fn length_quartiles(lengths: &[usize]) -> Vec<usize> {
    let xs: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
    let cuts = [quantile(&xs, 0.25), quantile(&xs, 0.5), quantile(&xs, 0.75)];
    lengths
        .iter()
        .map(|&l| 1 + cuts.iter().filter(|&&c| c < l as f64).count())
        .collect()
}

/// `|sum_t A_t - (R - V0)|` per trajectory, summarized overall and by
/// length quartile and outcome.
pub fn telescoping_residual_report(
    traces: &[BeliefTrace],
    rewards: &[u8],
    priors: &[f64],
) -> Result<ResidualReport> {
    if traces.len() != rewards.len() || traces.len() != priors.len() {
        return Err(CreditError::Domain(format!(
            "{} traces, {} rewards, {} priors",
            traces.len(),
            rewards.len(),
            priors.len()
        )));
    }
    let per: Vec<f64> = traces
        .iter()
        .zip(rewards)
        .zip(priors)
        .map(|((t, &r), &v0)| (t.raw_adv.iter().sum::<f64>() - (f64::from(r) - v0)).abs())
        .collect();
    let lengths: Vec<usize> = traces.iter().map(BeliefTrace::len).collect();
    let quart = length_quartiles(&lengths);
    let mut strata = Vec::new();
    for q in 1..=4 {
        for reward in [0u8, 1] {
            let cell: Vec<f64> = per
                .iter()
                .zip(&quart)
                .zip(rewards)
                .filter(|((_, &qq), &r)| qq == q && r == reward)
                .map(|((&x, _), _)| x)
                .collect();
            if !cell.is_empty() {
                let s = ResidualSummary::of(&cell);
                strata.push(ResidualStratum {
                    quartile: q,
                    reward,
                    count: s.count,
                    mean: s.mean,
                    p95: s.p95,
                });
            }
        }
    }
    Ok(ResidualReport {
        overall: ResidualSummary::of(&per),
        per_trajectory: per,
        strata,
    })
}

/// Mean squared error of beliefs against binary outcomes.
pub fn brier_score(values: &[f64], rewards: &[u8]) -> Result<f64> {
    if values.is_empty() {
        return Err(CreditError::Empty("Brier sample".into()));
    }
    if values.len() != rewards.len() {
        return Err(CreditError::Domain(format!(
            "{} values for {} rewards",
            values.len(),
            rewards.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(CreditError::Domain(format!("belief {v} outside [0, 1]")));
    }
    Ok(values
        .iter()
        .zip(rewards)
        .map(|(v, &r)| (v - f64::from(r)).powi(2))
        .sum::<f64>()
        / values.len() as f64)
}

/// Fractions of the horizon at which calibration is reported.
pub const BRIER_FRACTIONS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// 1-based belief index `ceil(f T)` (at least 1) for a trajectory of `len`
/// tokens; `V_t` is the belief before token `t`.
pub fn fractional_position(len: usize, fraction: f64) -> usize {
    ((fraction * len as f64).ceil() as usize).clamp(1, len.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrierPoint {
    pub fraction: f64,
    pub score: f64,
}

/// Brier score of `V_t` at each of [`BRIER_FRACTIONS`].
///
/// `values[i]` is `V_1 .. V_{T_i + 1}` of trajectory `i`.
pub fn brier_report(values: &[Vec<f64>], rewards: &[u8]) -> Result<Vec<BrierPoint>> {
    BRIER_FRACTIONS
        .iter()
        .map(|&f| {
            let at: Vec<f64> = values
                .iter()
                .map(|v| {
                    let t = fractional_position(v.len().saturating_sub(1), f);
                    v.get(t - 1).copied().unwrap_or(f64::NAN)
                })
                .collect();
            Ok(BrierPoint {
                fraction: f,
                score: brier_score(&at, rewards)?,
            })
        })
        .collect()
}

/// Names of the perturbed-belief controls, in [`belief_controls`] order.
pub const CONTROL_NAMES: [&str; 3] = ["shift_up", "shift_down", "jitter"];

/// Perturbed copies of one belief sequence: `+0.2` and `-0.2` shifts and a
/// seeded uniform `+-0.3` jitter, each clamped to `[0, 1]`.
pub fn belief_controls<R: rand::Rng + ?Sized>(values: &[f64], rng: &mut R) -> [Vec<f64>; 3] {
    let clamp = |x: f64| x.clamp(0.0, 1.0);
    [
        values.iter().map(|v| clamp(v + 0.2)).collect(),
        values.iter().map(|v| clamp(v - 0.2)).collect(),
        values
            .iter()
            .map(|v| clamp(v + rng.random_range(-0.3..=0.3)))
            .collect(),
    ]
}

/// Inputs of the state-weight variance comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceCheckInput {
    pub log_lambda: Vec<f64>,
    pub values: Vec<f64>,
    /// Per-position score variance proxies `Var[h_t]`.
    pub score_var: Vec<f64>,
    pub delta: f64,
    pub gamma: f64,
}

impl VarianceCheckInput {
    fn validate(&self) -> Result<()> {
        let n = self.log_lambda.len();
        if self.values.len() != n || self.score_var.len() != n {
            return Err(CreditError::Domain("variance-check inputs differ in length".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 0.25) {
            return Err(CreditError::Domain(format!(
                "gamma must lie in (0, 1/4], got {}",
                self.gamma
            )));
        }
        if !(self.delta > 0.0) {
            return Err(CreditError::Domain(format!("delta must be > 0, got {}", self.delta)));
        }
        if self.score_var.iter().any(|v| !(*v >= 0.0)) {
            return Err(CreditError::Domain("score variances must be >= 0".into()));
        }
        if self.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CreditError::Domain("values must lie in [0, 1]".into()));
        }
        if self.log_lambda.iter().any(|x| !x.is_finite()) {
            return Err(CreditError::Domain("log ratios must be finite".into()));
        }
        Ok(())
    }

    /// State-blind weights `log lambda_t`.
    pub fn blind_weights(&self) -> Vec<f64> {
        self.log_lambda.clone()
    }

    /// Bayesian weights `V_t (1 - V_t) log lambda_t`.
    pub fn bayes_weights(&self) -> Vec<f64> {
        self.log_lambda
            .iter()
            .zip(&self.values)
            .map(|(x, v)| v * (1.0 - v) * x)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceGap {
    pub gap: f64,
    pub bound: f64,
    /// 0-based positions with `|log lambda| >= delta` and `V(1-V) < gamma`.
    pub determined: Vec<usize>,
    pub satisfied: bool,
}

/// Analytic variance gap between state-blind and state-weighted estimators
/// and its lower bound over determined positions.
pub fn variance_gap_check(input: &VarianceCheckInput) -> Result<VarianceGap> {
    input.validate()?;
    let mut gap = 0.0;
    let mut bound = 0.0;
    let mut determined = Vec::new();
    for (t, ((&x, &v), &var)) in input
        .log_lambda
        .iter()
        .zip(&input.values)
        .zip(&input.score_var)
        .enumerate()
    {
        let w = v * (1.0 - v);
        gap += (1.0 - w * w) * x * x * var;
        if x.abs() >= input.delta && w < input.gamma {
            determined.push(t);
            bound += x * x * var;
        }
    }
    bound *= 1.0 - input.gamma * input.gamma;
    Ok(VarianceGap {
        gap,
        bound,
        determined,
        satisfied: gap >= bound && bound >= 0.0,
    })
}

/// Monte Carlo estimate of `Var[g_blind] - Var[g_bayes]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedGap {
    pub estimate: f64,
    pub std_error: f64,
    pub analytic: f64,
    pub draws: u64,
}

/// Draw independent zero-mean Gaussian scores `h_t ~ N(0, Var[h_t])` and
/// average the paired difference `g_blind^2 - g_bayes^2`.
pub fn simulate_variance_gap(
    input: &VarianceCheckInput,
    draws: usize,
    seed: u64,
    exec: Exec,
) -> Result<SimulatedGap> {
    let analytic = variance_gap_check(input)?.gap;
    let wb = input.blind_weights();
    let wy = input.bayes_weights();
    let sd: Vec<f64> = input.score_var.iter().map(|v| v.sqrt()).collect();
    let parts = exec.monte_carlo(seed, draws, 8192, |rng, n| {
        let mut m = Moments::default();
        for _ in 0..n {
            let (mut gb, mut gy) = (0.0, 0.0);
            for t in 0..sd.len() {
                let z: f64 = StandardNormal.sample(rng);
                let h = sd[t] * z;
                gb += wb[t] * h;
                gy += wy[t] * h;
            }
            m.push(gb * gb - gy * gy);
        }
        m
    });
    let mut total = Moments::default();
    for p in &parts {
        total.merge(p);
    }
    Ok(SimulatedGap {
        estimate: total.mean,
        std_error: total.std_error(),
        analytic,
        draws: total.count,
    })
}

/// Per-trajectory inputs of [`stratified_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub length: usize,
    pub reward: u8,
    pub abs_adv: Vec<f64>,
    pub abs_log_ratio: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub quartile: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub count: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationPoint {
    pub rank: usize,
    pub token_frac: f64,
    pub adv_mass: f64,
    pub ratio_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub length_table: Vec<LengthBucket>,
    pub concentration: Vec<ConcentrationPoint>,
    pub adv_gini: f64,
    pub ratio_gini: f64,
}

/// Cumulative share of total mass held by the top-k values, k = 1..n.
pub fn concentration_curve(values: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().map(|x| x.abs()).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = v.iter().sum();
    let mut acc = 0.0;
    v.iter()
        .map(|x| {
            acc += x;
            if total > 0.0 {
                acc / total
            } else {
                0.0
            }
        })
        .collect()
}

/// Gini index of non-negative values; 0 for an all-zero sample.
pub fn gini(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().map(|x| x.abs()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let total: f64 = v.iter().sum();
    if v.is_empty() || total == 0.0 {
        return 0.0;
    }
    let weighted: f64 = v.iter().enumerate().map(|(i, x)| (i + 1) as f64 * x).sum();
    2.0 * weighted / (n * total) - (n + 1.0) / n
}

/// Success by length quartile and pooled concentration curves of `|A_t|`
/// and `|log lambda_t|`.
pub fn stratified_report(records: &[TraceRecord]) -> StratifiedReport {
    let lengths: Vec<usize> = records.iter().map(|r| r.length).collect();
    let quart = length_quartiles(&lengths);
    let mut length_table = Vec::new();
    for q in 1..=4 {
        let members: Vec<&TraceRecord> = records
            .iter()
            .zip(&quart)
            .filter(|(_, &qq)| qq == q)
            .map(|(r, _)| r)
            .collect();
        if members.is_empty() {
            continue;
        }
        length_table.push(LengthBucket {
            quartile: q,
            min_len: members.iter().map(|r| r.length).min().unwrap_or(0),
            max_len: members.iter().map(|r| r.length).max().unwrap_or(0),
            count: members.len(),
            success_rate: members.iter().map(|r| f64::from(r.reward)).sum::<f64>()
                / members.len() as f64,
        });
    }
    let adv: Vec<f64> = records.iter().flat_map(|r| r.abs_adv.iter().copied()).collect();
    let ratio: Vec<f64> = records
        .iter()
        .flat_map(|r| r.abs_log_ratio.iter().copied())
        .collect();
    let ca = concentration_curve(&adv);
    let cr = concentration_curve(&ratio);
    let n = ca.len().max(cr.len());
    let concentration = (0..n)
        .map(|i| ConcentrationPoint {
            rank: i + 1,
            token_frac: (i + 1) as f64 / n as f64,
            adv_mass: ca.get(i).copied().unwrap_or(1.0),
            ratio_mass: cr.get(i).copied().unwrap_or(1.0),
        })
        .collect();
    StratifiedReport {
        length_table,
        concentration,
        adv_gini: gini(&adv),
        ratio_gini: gini(&ratio),
    }
}

/// Write a serializable table as CSV with a header row.
pub fn write_csv<T: Serialize, W: Write>(rows: &[T], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evidence::belief_trace;
    use proptest::prelude::*;

    #[test]
    fn residual_examples() {
        // Terminal belief 0.93 from V0 = 0.5, R = 1.
        let l = (0.93f64 / 0.07).ln();
        let t = belief_trace(0.0, &[l]).unwrap();
        let r = telescoping_residual_report(&[t], &[1], &[0.5]).unwrap();
        assert!((r.per_trajectory[0] - 0.07).abs() < 1e-12);
        let t = belief_trace(0.0, &[0.0, 0.0]).unwrap();
        let r = telescoping_residual_report(&[t], &[1], &[0.5]).unwrap();
        assert_eq!(r.per_trajectory[0], 0.5);
        assert_eq!(r.strata.len(), 1);
    }

    #[test]
    fn brier_examples() {
        assert_eq!(brier_score(&[1.0, 0.0], &[1, 0]).unwrap(), 0.0);
        assert_eq!(brier_score(&[0.5, 0.5], &[1, 0]).unwrap(), 0.25);
        assert!(brier_score(&[], &[]).is_err());
        assert!(brier_score(&[1.2], &[1]).is_err());
    }

    #[test]
    fn fractional_positions() {
        assert_eq!(fractional_position(6, 0.25), 2);
        assert_eq!(fractional_position(6, 0.5), 3);
        assert_eq!(fractional_position(6, 0.75), 5);
        assert_eq!(fractional_position(6, 1.0), 6);
        assert_eq!(fractional_position(1, 0.25), 1);
    }

    #[test]
    fn variance_gap_example() {
        let input = VarianceCheckInput {
            log_lambda: vec![2.0, 0.1],
            values: vec![0.5, 0.99],
            score_var: vec![1.0, 1.0],
            delta: 0.05,
            gamma: 0.1,
        };
        let g = variance_gap_check(&input).unwrap();
        assert!((g.gap - 3.759_999_019_9).abs() < 1e-12, "{}", g.gap);
        assert_eq!(g.determined, vec![1]);
        assert!((g.bound - 0.0099).abs() < 1e-15);
        assert!(g.satisfied);
    }

    #[test]
    fn variance_gap_edge_cases() {
        let empty = VarianceCheckInput {
            log_lambda: vec![0.01, 0.02],
            values: vec![0.5, 0.5],
            score_var: vec![1.0, 2.0],
            delta: 0.05,
            gamma: 0.25,
        };
        let g = variance_gap_check(&empty).unwrap();
        assert_eq!(g.bound, 0.0);
        assert!(g.satisfied);
        let committed = VarianceCheckInput {
            log_lambda: vec![1.0, -2.0],
            values: vec![0.0, 1.0],
            score_var: vec![0.5, 2.0],
            delta: 0.05,
            gamma: 0.1,
        };
        let g = variance_gap_check(&committed).unwrap();
        assert_eq!(g.gap, 0.5 + 8.0);
        assert_eq!(g.determined, vec![0, 1]);
        let mut bad = committed.clone();
        bad.gamma = 0.3;
        assert!(variance_gap_check(&bad).is_err());
    }

    #[test]
    fn simulation_tracks_analytic_gap() {
        let input = VarianceCheckInput {
            log_lambda: vec![2.0, 0.1, -1.5],
            values: vec![0.5, 0.99, 0.3],
            score_var: vec![1.0, 1.0, 0.5],
            delta: 0.05,
            gamma: 0.1,
        };
        let s = simulate_variance_gap(&input, 20_000, 3, Exec::Parallel).unwrap();
        assert!((s.estimate - s.analytic).abs() <= 4.0 * s.std_error);
        let t = simulate_variance_gap(&input, 20_000, 3, Exec::Sequential).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn stratified_examples() {
        let one = TraceRecord {
            length: 3,
            reward: 1,
            abs_adv: vec![0.1, 0.2, 0.3],
            abs_log_ratio: vec![0.1, 0.2, 0.3],
        };
        let r = stratified_report(std::slice::from_ref(&one));
        assert_eq!(r.length_table.len(), 1);
        for p in &r.concentration {
            assert_eq!(p.adv_mass, p.ratio_mass);
        }
        assert_eq!(r.adv_gini, r.ratio_gini);
        let mut buf = Vec::new();
        write_csv(&r.concentration, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("rank,token_frac,adv_mass,ratio_mass"));
    }

    #[test]
    fn gini_extremes() {
        assert_eq!(gini(&[1.0, 1.0, 1.0]), 0.0);
        assert!((gini(&[0.0, 0.0, 0.0, 1.0]) - 0.75).abs() < 1e-15);
        assert_eq!(gini(&[0.0, 0.0]), 0.0);
    }

    proptest! {
        #[test]
        fn gap_dominates_bound(
            xs in prop::collection::vec((-5.0f64..5.0, 0.0f64..=1.0, 0.0f64..3.0), 0..20),
            delta in 1e-3f64..1.0,
            gamma in 1e-3f64..=0.25,
        ) {
            let input = VarianceCheckInput {
                log_lambda: xs.iter().map(|x| x.0).collect(),
                values: xs.iter().map(|x| x.1).collect(),
                score_var: xs.iter().map(|x| x.2).collect(),
                delta,
                gamma,
            };
            let g = variance_gap_check(&input).unwrap();
            prop_assert!(g.satisfied);
        }

        #[test]
        fn brier_is_permutation_invariant(
            pairs in prop::collection::vec((0.0f64..=1.0, 0u8..=1), 1..30),
            rot in 0usize..30,
        ) {
            let (v, r): (Vec<f64>, Vec<u8>) = pairs.iter().copied().unzip();
            let k = rot % v.len();
            let mut v2 = v.clone();
            let mut r2 = r.clone();
            v2.rotate_left(k);
            r2.rotate_left(k);
            let a = brier_score(&v, &r).unwrap();
            let b = brier_score(&v2, &r2).unwrap();
            prop_assert!((a - b).abs() <= 1e-15);
        }
    }
}
