//! Property suites behind the `verify` command.
//!
//! Each suite draws randomized or enumerated cases, checks one identity per
//! [`PropertyCheck`], and reports case counts and the worst observed error.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::{simulate_variance_gap, variance_gap_check, VarianceCheckInput};
use crate::config::{EstimatorConfig, OracleMode, Variant};
use crate::error::{CreditError, Result};
use crate::evidence::{advantage_from_logodds, belief_trace, clip_log_ratio, logit, sigmoid};
use crate::interop::{batch_to_records, parse_records, score_log, write_records, RecordGroup, TrajectoryRecord};
use crate::par::{chunk_rng, Exec};
use crate::stats::Moments;
use crate::synth::exact::{enumerate_success_prob, trajectory_log_bayes_factors, trajectory_values};
use crate::synth::{rollout_group, AnswerHint, EnvSpec, Oracle, PolicySpec, TabularPolicy, ValueTable};
use crate::trainer::{attach_evidence, compute_advantages, surrogate_eval};

/// A named group of property checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Identities,
    OracleExactness,
    Bias,
    Variance,
    Gradients,
    Roundtrip,
    All,
}

impl Suite {
    /// Every concrete suite, in the order `All` runs them.
    pub const CONCRETE: [Suite; 6] = [
        Suite::Identities,
        Suite::OracleExactness,
        Suite::Bias,
        Suite::Variance,
        Suite::Gradients,
        Suite::Roundtrip,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Identities => "identities",
            Suite::OracleExactness => "oracle_exactness",
            Suite::Bias => "bias",
            Suite::Variance => "variance",
            Suite::Gradients => "gradients",
            Suite::Roundtrip => "roundtrip",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = CreditError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::CONCRETE
            .into_iter()
            .chain([Suite::All])
            .find(|x| x.as_str() == s)
            .ok_or_else(|| {
                CreditError::Config(format!(
                    "unknown suite `{s}`; expected identities, oracle_exactness, bias, variance, gradients, roundtrip or all"
                ))
            })
    }
}

/// Sample sizes and seeding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyConfig {
    /// Draws for the randomized identity, bias and simulation checks.
    pub samples: usize,
    /// Trajectories per environment in the exactness suite.
    pub trajectories: usize,
    /// Randomized inputs for the arithmetic variance check.
    pub variance_inputs: usize,
    /// Randomized records for the serialization round trip.
    pub records: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            samples: 100_000,
            trajectories: 200,
            variance_inputs: 10_000,
            records: 1_000,
            seed: 0,
            exec: Exec::Parallel,
        }
    }
}

impl VerifyConfig {
    /// Reduced sizes for smoke tests.
    pub fn quick() -> Self {
        Self {
            samples: 4_000,
            trajectories: 20,
            variance_inputs: 1_000,
            records: 100,
            ..Self::default()
        }
    }
}

/// Outcome of one property over all of its cases.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyCheck {
    pub name: String,
    pub cases: u64,
    pub violations: u64,
    /// Worst observed error in the units of `tolerance`.
    pub worst: f64,
    pub tolerance: f64,
}

impl PropertyCheck {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.cases > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<PropertyCheck>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(PropertyCheck::passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "[{}] {}/{} cases={} violations={} worst={:.3e} tol={:.1e}",
                if c.passed() { "PASS" } else { "FAIL" },
                self.suite,
                c.name,
                c.cases,
                c.violations,
                c.worst,
                c.tolerance
            )?;
        }
        Ok(())
    }
}

/// Running count of cases, violations and the worst error.
#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    cases: u64,
    violations: u64,
    worst: f64,
}

impl Tally {
    fn record(&mut self, err: f64, tol: f64) {
        self.cases += 1;
        if err.is_nan() || err > tol {
            self.violations += 1;
        }
        if err.is_nan() || err > self.worst {
            self.worst = err;
        }
    }

    fn merge(mut self, other: Tally) -> Tally {
        self.cases += other.cases;
        self.violations += other.violations;
        if other.worst.is_nan() || other.worst > self.worst {
            self.worst = other.worst;
        }
        self
    }

    fn check(self, name: &str, tolerance: f64) -> PropertyCheck {
        PropertyCheck {
            name: name.to_string(),
            cases: self.cases,
            violations: self.violations,
            worst: self.worst,
            tolerance,
        }
    }
}

fn merged(parts: Vec<Tally>) -> Tally {
    parts.into_iter().fold(Tally::default(), Tally::merge)
}

/// Run one suite, or every suite for [`Suite::All`].
pub fn run_suite(suite: Suite, cfg: &VerifyConfig) -> Result<Vec<SuiteReport>> {
    if suite == Suite::All {
        return Suite::CONCRETE
            .into_iter()
            .map(|s| run_one(s, cfg))
            .collect();
    }
    Ok(vec![run_one(suite, cfg)?])
}

fn run_one(suite: Suite, cfg: &VerifyConfig) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Identities => identities(cfg),
        Suite::OracleExactness => oracle_exactness(cfg)?,
        Suite::Bias => bias(cfg)?,
        Suite::Variance => variance(cfg)?,
        Suite::Gradients => gradients(cfg)?,
        Suite::Roundtrip => roundtrip(cfg)?,
        Suite::All => unreachable!("expanded by run_suite"),
    };
    Ok(SuiteReport { suite, checks })
}

/// `sigmoid(l + x) - sigmoid(l)` as `sinh(x/2) / (2 cosh(l/2) cosh((l+x)/2))`,
/// free of cancellation.
pub fn sigmoid_difference(l: f64, x: f64) -> f64 {
    (x / 2.0).sinh() / (2.0 * (l / 2.0).cosh() * ((l + x) / 2.0).cosh())
}

const MC_CHUNK: usize = 4096;

/// Telescoping, Lipschitz, clipped-bound and closed-form identities.
pub fn identities(cfg: &VerifyConfig) -> Vec<PropertyCheck> {
    let n = cfg.samples;
    let telescoping = merged(cfg.exec.monte_carlo(cfg.seed, n, MC_CHUNK, |rng, count| {
        let mut t = Tally::default();
        for _ in 0..count {
            let len = rng.random_range(1..=32);
            let l0 = rng.random_range(-6.0..6.0);
            let xs: Vec<f64> = (0..len).map(|_| rng.random_range(-4.0..4.0)).collect();
            let tr = belief_trace(l0, &xs).expect("finite draws");
            let total: f64 = tr.raw_adv.iter().sum();
            let end = *tr.logodds.last().expect("non-empty trace");
            t.record((total - (sigmoid(end) - sigmoid(l0))).abs(), 1e-12);
        }
        t
    }));
    let lipschitz = merged(cfg.exec.monte_carlo(cfg.seed + 1, n, MC_CHUNK, |rng, count| {
        let mut t = Tally::default();
        for _ in 0..count {
            let l = rng.random_range(-30.0..30.0);
            let x = rng.random_range(-10.0..10.0);
            let a = advantage_from_logodds(l, x);
            let excess = a.abs() - (x.abs() / 4.0).min(1.0);
            t.record(excess.max(0.0), 0.0);
        }
        t
    }));
    let clipped = merged(cfg.exec.monte_carlo(cfg.seed + 2, n, MC_CHUNK, |rng, count| {
        let mut t = Tally::default();
        for _ in 0..count {
            let l = rng.random_range(-30.0..30.0);
            let x = clip_log_ratio(rng.random_range(-10.0..10.0), 3.0).expect("finite clip");
            t.record(advantage_from_logodds(l, x).abs(), 0.75);
        }
        t
    }));
    let closed = merged(cfg.exec.monte_carlo(cfg.seed + 3, n, MC_CHUNK, |rng, count| {
        let mut t = Tally::default();
        for _ in 0..count {
            let l = rng.random_range(-30.0..=30.0);
            let x = rng.random_range(-10.0..=10.0);
            let a = advantage_from_logodds(l, x);
            let d = sigmoid_difference(l, x);
            let rel = if d == 0.0 { a.abs() } else { ((a - d) / d).abs() };
            t.record(rel, 1e-12);
        }
        t
    }));
    vec![
        telescoping.check("telescoping", 1e-12),
        lipschitz.check("lipschitz_bound", 0.0),
        clipped.check("clipped_bound_c3", 0.75),
        closed.check("closed_form_vs_sigmoid_difference", 1e-12),
    ]
}

/// Enumerable environments used by the exactness suite.
pub fn exactness_envs() -> Vec<EnvSpec> {
    vec![
        EnvSpec::parity(2, 8, 2),
        EnvSpec::parity(3, 6, 3),
        EnvSpec::parity(4, 5, 4),
        EnvSpec::parity(6, 4, 3),
        EnvSpec::prefix_lock(3, 7, 3, 2, 3),
        EnvSpec::prefix_lock(5, 5, 4, 1, 2),
        EnvSpec::prefix_lock(6, 4, 2, 0, 2),
    ]
}

/// A randomized full-support student for `env`.
pub fn random_student(env: &EnvSpec, spec: &PolicySpec, seed: u64, scale: f64) -> TabularPolicy {
    let mut p = TabularPolicy::uniform(env, spec);
    p.randomize(&mut chunk_rng(seed, 0), scale);
    p
}

/// Recursion with extended-real log-odds: `l` may reach `+-inf` and stays
/// there since committed states carry zero evidence.
pub fn extended_recursion(v0: f64, log_lambdas: &[f64]) -> Vec<f64> {
    let mut l = logit(v0);
    let mut out = Vec::with_capacity(log_lambdas.len() + 1);
    out.push(sigmoid(l));
    for &x in log_lambdas {
        if x != 0.0 {
            l += x;
        }
        out.push(sigmoid(l));
    }
    out
}

/// Exact-evidence recursion and value tables against literal enumeration.
pub fn oracle_exactness(cfg: &VerifyConfig) -> Result<Vec<PropertyCheck>> {
    let mut recursion = Tally::default();
    let mut tables = Tally::default();
    for (e, env) in exactness_envs().into_iter().enumerate() {
        env.validate()?;
        let student = random_student(&env, &PolicySpec::default(), cfg.seed + e as u64, 1.5);
        let per = cfg.exec.try_map(cfg.trajectories, |i| -> Result<(Tally, Tally)> {
            let q = i % env.num_queries;
            let b = rollout_group(&student, q, 2, cfg.seed ^ ((e as u64) << 32 | i as u64))?;
            let tokens = &b.tokens[0];
            let table = ValueTable::build(&student, q, env.answer(q))?;
            let values = trajectory_values(&student, &table, tokens);
            let lam = trajectory_log_bayes_factors(&student, &table, tokens);
            let rec = extended_recursion(values[0], &lam);
            let (mut r, mut d) = (Tally::default(), Tally::default());
            for t in 0..=tokens.len() {
                let truth = enumerate_success_prob(&student, q, &tokens[..t])?;
                r.record((rec[t] - truth).abs(), 1e-10);
                d.record((values[t] - truth).abs(), 1e-12);
            }
            Ok((r, d))
        })?;
        for (r, d) in per {
            recursion = recursion.merge(r);
            tables = tables.merge(d);
        }
    }
    Ok(vec![
        recursion.check("recursion_vs_enumeration", 1e-10),
        tables.check("value_table_vs_enumeration", 1e-12),
    ])
}

/// Environment, student and prefixes of the bias suite.
pub fn bias_setup() -> (EnvSpec, TabularPolicy, Vec<(usize, Vec<usize>)>) {
    let env = EnvSpec::parity(3, 5, 3);
    let spec = PolicySpec {
        window: Some(1),
        residue_feature: Some(true),
        position_feature: true,
        hint: AnswerHint {
            completion: 1.0,
            local: 0.75,
            surface: 1.5,
            focus: 0.0,
        },
    };
    let student = random_student(&env, &spec, 17, 1.0);
    let mut rng = chunk_rng(0xB1A5, 0);
    let prefixes = (0..20)
        .map(|_| {
            let q = rng.random_range(0..env.num_queries);
            let len = rng.random_range(0..env.horizon - 1);
            (q, (0..len).map(|_| rng.random_range(0..env.vocab_size)).collect())
        })
        .collect();
    (env, student, prefixes)
}

/// Per-prefix Monte Carlo bias check against `-eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasCase {
    pub eps: f64,
    pub mc_mean: f64,
    pub std_error: f64,
    /// Exact `E_success[log lambda_hat - log lambda*]`.
    pub analytic_mean: f64,
}

impl BiasCase {
    /// `|mean + eps|` in standard errors; the floor guards an exactly
    /// constant difference.
    pub fn z(&self) -> f64 {
        (self.mc_mean + self.eps).abs() / self.std_error.max(1e-12 / 3.0)
    }
}

/// Sample tokens from the exact success conditional at each prefix and
/// average the shared-denominator log-ratio difference.
pub fn bias_cases(cfg: &VerifyConfig) -> Result<Vec<BiasCase>> {
    let (_, student, prefixes) = bias_setup();
    let oracle = Oracle::new(OracleMode::SelfOracle, &student, None)?;
    prefixes
        .iter()
        .enumerate()
        .map(|(i, (q, prefix))| {
            let shared = oracle.shared_denominator_ratios(*q, prefix)?;
            let eps = oracle.kl_eps(*q, prefix)?;
            let diff: Vec<f64> = shared
                .log_hat
                .iter()
                .zip(&shared.log_star)
                .map(|(h, s)| h - s)
                .collect();
            let analytic_mean = shared
                .success
                .iter()
                .zip(&diff)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, d)| p * d)
                .sum();
            let dist = WeightedIndex::new(&shared.success)
                .map_err(|e| CreditError::Domain(format!("success branch: {e}")))?;
            let parts = cfg.exec.monte_carlo(
                cfg.seed.wrapping_add(1000 + i as u64),
                cfg.samples,
                MC_CHUNK,
                |rng: &mut ChaCha8Rng, count| {
                    let mut m = Moments::default();
                    for _ in 0..count {
                        m.push(diff[dist.sample(rng)]);
                    }
                    m
                },
            );
            let mut m = Moments::default();
            for p in &parts {
                m.merge(p);
            }
            Ok(BiasCase {
                eps,
                mc_mean: m.mean,
                std_error: m.std_error(),
                analytic_mean,
            })
        })
        .collect()
}

/// Shared-denominator bias equals `-eps` in expectation and by sampling.
pub fn bias(cfg: &VerifyConfig) -> Result<Vec<PropertyCheck>> {
    let cases = bias_cases(cfg)?;
    let mut mc = Tally::default();
    let mut exact = Tally::default();
    let mut miscal = Tally::default();
    for c in &cases {
        mc.record(c.z(), 3.0);
        exact.record((c.analytic_mean + c.eps).abs(), 1e-12);
        // A calibrated oracle would make the check vacuous.
        miscal.record(if c.eps > 1e-6 { 0.0 } else { 1.0 }, 0.0);
    }
    Ok(vec![
        mc.check("mc_mean_within_3se_of_minus_eps", 3.0),
        exact.check("expected_bias_equals_minus_eps", 1e-12),
        miscal.check("oracle_is_miscalibrated", 0.0),
    ])
}

fn random_variance_input(rng: &mut ChaCha8Rng) -> VarianceCheckInput {
    let n = rng.random_range(1..=16);
    let values = (0..n)
        .map(|_| match rng.random_range(0..8) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..=1.0),
        })
        .collect();
    VarianceCheckInput {
        log_lambda: (0..n).map(|_| rng.random_range(-5.0..5.0)).collect(),
        values,
        score_var: (0..n).map(|_| rng.random_range(0.0..3.0)).collect(),
        delta: rng.random_range(1e-3..1.0),
        gamma: rng.random_range(1e-3..=0.25),
    }
}

/// Arithmetic gap-versus-bound check plus Monte Carlo corroboration.
pub fn variance(cfg: &VerifyConfig) -> Result<Vec<PropertyCheck>> {
    let arith = cfg.exec.monte_carlo(cfg.seed + 7, cfg.variance_inputs, 512, |rng, count| {
        let mut t = Tally::default();
        for _ in 0..count {
            let input = random_variance_input(rng);
            let ok = variance_gap_check(&input).map(|g| g.satisfied).unwrap_or(false);
            t.record(if ok { 0.0 } else { 1.0 }, 0.0);
        }
        t
    });
    let input = random_variance_input(&mut chunk_rng(cfg.seed + 8, 0));
    let sim = simulate_variance_gap(&input, cfg.samples, cfg.seed + 9, cfg.exec)?;
    let mut mc = Tally::default();
    mc.record((sim.estimate - sim.analytic).abs() / sim.std_error.max(1e-300), 3.0);
    Ok(vec![
        merged(arith).check("gap_dominates_bound", 0.0),
        mc.check("simulated_gap_within_3se", 3.0),
    ])
}

/// Environment and student used by the gradient suite.
pub fn gradient_setup() -> (EnvSpec, TabularPolicy) {
    let env = EnvSpec::parity(3, 4, 3);
    let spec = PolicySpec {
        window: Some(1),
        residue_feature: Some(true),
        position_feature: false,
        hint: AnswerHint {
            completion: 1.0,
            local: 0.5,
            surface: 0.5,
            focus: 0.0,
        },
    };
    let student = random_student(&env, &spec, 5, 1.0);
    (env, student)
}

/// Max-norm relative error of the analytic surrogate gradient against
/// central differences with step `h`.
pub fn gradient_error(
    policy: &TabularPolicy,
    batches: &[crate::batch::GroupBatch],
    surrogate_clip: f64,
    h: f64,
) -> Result<f64> {
    let analytic = surrogate_eval(policy, batches, surrogate_clip)?.grad;
    let mut p = policy.clone();
    let mut fd = vec![0.0; analytic.len()];
    for (i, g) in fd.iter_mut().enumerate() {
        let base = p.logits[i];
        p.logits[i] = base + h;
        let up = surrogate_eval(&p, batches, surrogate_clip)?.objective;
        p.logits[i] = base - h;
        let down = surrogate_eval(&p, batches, surrogate_clip)?.objective;
        p.logits[i] = base;
        *g = (up - down) / (2.0 * h);
    }
    let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let err = analytic
        .iter()
        .zip(&fd)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(if scale == 0.0 { err } else { err / scale })
}

/// Smallest distance of any importance ratio to a clip boundary.
fn kink_margin(policy: &TabularPolicy, batches: &[crate::batch::GroupBatch], eps: f64) -> f64 {
    let env = policy.env();
    let mut margin = f64::INFINITY;
    for b in batches {
        for (traj, old) in b.tokens.iter().zip(&b.old_logp) {
            let mut code = policy.layout.empty_window();
            let mut acc = 0;
            for (t, &tok) in traj.iter().enumerate() {
                let ctx = policy.layout.context(b.query, code, acc, t);
                let rho = (policy.row_log_probs(ctx, None)[tok] - old[t]).exp();
                if rho != 1.0 {
                    margin = margin.min((rho - 1.0 - eps).abs()).min((rho - 1.0 + eps).abs());
                }
                code = policy.layout.push_window(code, tok);
                acc = env.step_acc(acc, t, tok);
            }
        }
    }
    margin
}

/// Batches with advantages for `variant`, scored by a self oracle.
pub fn gradient_batches(
    student: &TabularPolicy,
    est: &EstimatorConfig,
    seed: u64,
) -> Result<Vec<crate::batch::GroupBatch>> {
    let env = student.env();
    let oracle = Oracle::new(OracleMode::SelfOracle, student, None)?;
    let mut out = Vec::new();
    for q in 0..env.num_queries {
        let mut b = rollout_group(student, q, 6, seed.wrapping_mul(31).wrapping_add(q as u64))?;
        attach_evidence(&mut b, &oracle, est.effective_clip())?;
        compute_advantages(&mut b, est)?;
        out.push(b);
    }
    Ok(out)
}

/// Analytic surrogate gradient against finite differences for every variant,
/// on-policy and after an off-policy perturbation.
pub fn gradients(cfg: &VerifyConfig) -> Result<Vec<PropertyCheck>> {
    let (_, student) = gradient_setup();
    let mut checks = Vec::new();
    for variant in Variant::ALL {
        let est = EstimatorConfig::default().with_variant(variant);
        let batches = gradient_batches(&student, &est, cfg.seed)?;
        let mut t = Tally::default();
        t.record(gradient_error(&student, &batches, est.surrogate_clip, 1e-5)?, 1e-5);
        let mut moved = None;
        for attempt in 0..64 {
            let mut p = student.clone();
            let mut rng = chunk_rng(cfg.seed ^ 0x6AD, attempt);
            for x in &mut p.logits {
                *x += rng.random_range(-0.4..0.4);
            }
            if kink_margin(&p, &batches, est.surrogate_clip) > 1e-3 {
                moved = Some(p);
                break;
            }
        }
        let moved = moved.ok_or_else(|| {
            CreditError::Domain("no perturbation kept ratios away from the clip boundary".into())
        })?;
        t.record(gradient_error(&moved, &batches, est.surrogate_clip, 1e-5)?, 1e-5);
        checks.push(t.check(&format!("surrogate_gradient_{variant}"), 1e-5));
    }
    Ok(checks)
}

fn random_finite(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let x = f64::from_bits(rng.random());
        if x.is_finite() {
            return x;
        }
    }
}

fn random_logp(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..4) {
        0 => -random_finite(rng).abs(),
        1 => -0.0,
        _ => -rng.random_range(0.0..30.0),
    }
}

/// Randomized records with arbitrary finite bit patterns, in groups.
pub fn random_records(n: usize, seed: u64) -> Vec<RecordGroup> {
    let mut rng = chunk_rng(seed, 0);
    let mut groups: Vec<RecordGroup> = Vec::new();
    let mut made = 0;
    while made < n {
        let g = rng.random_range(1..=8).min(n - made);
        let gid = format!("g{}-\"é\"", groups.len());
        let records = (0..g)
            .map(|i| {
                let len = rng.random_range(1..=12);
                let scored = rng.random_bool(0.5);
                TrajectoryRecord {
                    query_id: format!("q{}", rng.random_range(0..50)),
                    traj_id: format!("{gid}/{i}"),
                    group_id: gid.clone(),
                    tokens: (0..len).map(|_| rng.random()).collect(),
                    logp_plain: (0..len).map(|_| random_logp(&mut rng)).collect(),
                    logp_oracle: (0..len).map(|_| random_logp(&mut rng)).collect(),
                    reward: rng.random_range(0..=1),
                    advantage: scored.then(|| (0..len).map(|_| random_finite(&mut rng)).collect()),
                    v_trace: scored.then(|| (0..=len).map(|_| rng.random_range(0.0..=1.0)).collect()),
                }
            })
            .collect();
        made += g;
        groups.push(RecordGroup { group_id: gid, records });
    }
    groups
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

/// Field-wise equality with floats compared by bit pattern.
pub fn records_bit_identical(a: &TrajectoryRecord, b: &TrajectoryRecord) -> bool {
    a.query_id == b.query_id
        && a.traj_id == b.traj_id
        && a.group_id == b.group_id
        && a.tokens == b.tokens
        && a.reward == b.reward
        && bits(&a.logp_plain) == bits(&b.logp_plain)
        && bits(&a.logp_oracle) == bits(&b.logp_oracle)
        && a.advantage.as_deref().map(bits) == b.advantage.as_deref().map(bits)
        && a.v_trace.as_deref().map(bits) == b.v_trace.as_deref().map(bits)
}

/// In-process batches and their exported, externally scored counterparts,
/// for one estimator configuration.
pub fn cross_path_mismatches(est: &EstimatorConfig, seed: u64, exec: Exec) -> Result<(u64, u64)> {
    let env = EnvSpec::parity(4, 6, 4);
    let spec = PolicySpec {
        hint: AnswerHint {
            completion: 1.5,
            local: 0.5,
            surface: 0.5,
            focus: 0.0,
        },
        ..PolicySpec::default()
    };
    let student = random_student(&env, &spec, seed, 1.0);
    let oracle = Oracle::new(est.oracle_mode, &student, None)?;
    let mut batches = Vec::new();
    for i in 0..8u64 {
        let q = (i as usize) % env.num_queries;
        let mut b = rollout_group(&student, q, 8, seed.wrapping_add(i))?;
        attach_evidence(&mut b, &oracle, est.effective_clip())?;
        compute_advantages(&mut b, est)?;
        batches.push(b);
    }
    let groups = batches
        .iter()
        .enumerate()
        .map(|(i, b)| batch_to_records(b, &format!("grp{i}")))
        .collect::<Result<Vec<_>>>()?;
    let mut buf = Vec::new();
    write_records(&groups, &mut buf)?;
    let parsed = parse_records(buf.as_slice(), false)?;
    let scored = score_log(parsed.groups, est, exec)?;
    let (mut cases, mut bad) = (0, 0);
    for (b, g) in batches.iter().zip(&scored.groups) {
        for (adv, r) in b.advantages.iter().zip(&g.records) {
            cases += 1;
            if r.advantage.as_deref().map(bits) != Some(bits(adv)) {
                bad += 1;
            }
        }
    }
    Ok((cases, bad))
}

/// Serialization round trip and offline-versus-in-process equivalence.
pub fn roundtrip(cfg: &VerifyConfig) -> Result<Vec<PropertyCheck>> {
    let groups = random_records(cfg.records, cfg.seed);
    let mut buf = Vec::new();
    write_records(&groups, &mut buf)?;
    let parsed = parse_records(buf.as_slice(), false)?;
    let mut rt = Tally::default();
    let back: Vec<&TrajectoryRecord> = parsed.groups.iter().flat_map(|g| &g.records).collect();
    let orig: Vec<&TrajectoryRecord> = groups.iter().flat_map(|g| &g.records).collect();
    if back.len() != orig.len() {
        rt.record(1.0, 0.0);
    }
    for (a, b) in orig.iter().zip(&back) {
        rt.record(if records_bit_identical(a, b) { 0.0 } else { 1.0 }, 0.0);
    }
    let mut cross = Tally::default();
    for mode in [OracleMode::SelfOracle, OracleMode::ExactOracle] {
        for variant in Variant::ALL {
            let est = EstimatorConfig::default().with_variant(variant).with_oracle(mode);
            // Exact evidence is infinite at the final token of every parity
            // trajectory, which an unclipped variant cannot carry.
            if mode == OracleMode::ExactOracle && !est.effective_clip().is_finite() {
                continue;
            }
            let (cases, bad) = cross_path_mismatches(&est, cfg.seed, cfg.exec)?;
            cross = cross.merge(Tally {
                cases,
                violations: bad,
                worst: bad as f64,
            });
        }
    }
    Ok(vec![
        rt.check("write_read_bit_identity", 0.0),
        cross.check("score_log_matches_in_process", 0.0),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::CONCRETE.into_iter().chain([Suite::All]) {
            assert_eq!(s.as_str().parse::<Suite>().unwrap(), s);
        }
        assert!("everything".parse::<Suite>().is_err());
    }

    #[test]
    fn sigmoid_difference_matches_naive_where_stable() {
        for (a, b) in [(0.0, 1.0), (-2.0, 0.5), (3.0, -1.0)] {
            let naive = sigmoid(a + b) - sigmoid(a);
            assert!((sigmoid_difference(a, b) - naive).abs() < 1e-15);
        }
    }

    #[test]
    fn extended_recursion_saturates() {
        let v = extended_recursion(0.5, &[f64::INFINITY, 0.0]);
        assert_eq!(v, vec![0.5, 1.0, 1.0]);
        let v = extended_recursion(0.25, &[f64::NEG_INFINITY]);
        assert_eq!(v, vec![0.25, 0.0]);
    }

    #[test]
    fn tally_counts_nan_as_violation() {
        let mut t = Tally::default();
        t.record(f64::NAN, 1.0);
        t.record(0.5, 1.0);
        assert_eq!(t.violations, 1);
        assert!(t.worst.is_nan());
    }

    #[test]
    fn quick_suites_pass() {
        let cfg = VerifyConfig::quick();
        for r in run_suite(Suite::All, &cfg).unwrap() {
            assert!(r.passed(), "{r}");
        }
    }

    #[test]
    fn empty_check_does_not_pass() {
        assert!(!Tally::default().check("none", 0.0).passed());
    }
}
