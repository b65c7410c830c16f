//! Config-driven experiments: seeded training runs, parameter sweeps and
//! diagnostic reports written as CSV.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    belief_controls, brier_report, stratified_report, telescoping_residual_report, write_csv,
    ResidualSummary, TraceRecord, CONTROL_NAMES,
};
use crate::batch::GroupBatch;
use crate::config::{EstimatorConfig, OracleMode, Variant};
use crate::error::{CreditError, Result};
use crate::par::{chunk_rng, Exec};
use crate::stats::Moments;
use crate::synth::exact::trajectory_values;
use crate::synth::{rollout_group, EnvSpec, IdealTeacher, Oracle, PolicySpec, Scorer, TabularPolicy, ValueTable};
use crate::trainer::{attach_evidence, compute_advantages, train_seeds, RunResult, TeacherSource, TrainerConfig};

/// Where teacher-oracle evidence comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherConfig {
    /// A policy table written by a previous run; relative paths resolve
    /// against the config file's directory.
    File { path: PathBuf },
    /// Exact success conditionals of the live student.
    Ideal,
}

/// Optional sweep axes; the grid is their Cartesian product.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub evidence_clip: Option<Vec<f64>>,
    pub alpha: Option<Vec<f64>>,
    pub group_size: Option<Vec<usize>>,
}

/// One complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<TeacherConfig>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepAxes>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// Minimal config for `env` with every other section at its default.
    pub fn new(env: EnvSpec) -> Self {
        Self {
            env,
            policy: PolicySpec::default(),
            estimator: EstimatorConfig::default(),
            trainer: TrainerConfig::default(),
            teacher: None,
            output_dir: default_output_dir(),
            sweep: None,
        }
    }

    /// Parse a JSON config and resolve a relative teacher path against
    /// `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text)?;
        if let Some(TeacherConfig::File { path }) = &mut cfg.teacher {
            if path.is_relative() {
                *path = base_dir.join(&*path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.env.check_exact()?;
        self.estimator.validate()?;
        self.trainer.validate()?;
        if let Some(TeacherConfig::File { path }) = &self.teacher {
            if !path.is_file() {
                return Err(CreditError::Config(format!(
                    "teacher table {} does not exist",
                    path.display()
                )));
            }
        }
        if self.estimator.oracle_mode == OracleMode::TeacherOracle && self.teacher.is_none() {
            return Err(CreditError::Config("teacher_oracle needs a `teacher` section".into()));
        }
        if let Some(s) = &self.sweep {
            let axes = [
                s.evidence_clip.as_ref().map(Vec::len),
                s.alpha.as_ref().map(Vec::len),
                s.group_size.as_ref().map(Vec::len),
            ];
            if axes.iter().all(Option::is_none) {
                return Err(CreditError::Config("sweep section names no axis".into()));
            }
            if axes.contains(&Some(0)) {
                return Err(CreditError::Config("sweep axes must be non-empty".into()));
            }
        }
        Ok(())
    }

    /// Load the configured teacher, checking it matches the environment.
    pub fn teacher_source(&self) -> Result<Option<TeacherSource>> {
        match &self.teacher {
            None => Ok(None),
            Some(TeacherConfig::Ideal) => Ok(Some(TeacherSource::Ideal)),
            Some(TeacherConfig::File { path }) => {
                let table = TabularPolicy::read_text(File::open(path)?)?;
                if table.env() != &self.env {
                    return Err(CreditError::Config(format!(
                        "teacher table {} was built for a different environment",
                        path.display()
                    )));
                }
                Ok(Some(TeacherSource::Table(table.frozen())))
            }
        }
    }
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub variant: String,
    pub oracle_mode: String,
    pub seed: String,
    pub initial_success: f64,
    pub final_success: f64,
    pub final_greedy_success: f64,
    pub final_mean_reward: f64,
}

impl SeedSummary {
    fn of(est: &EstimatorConfig, r: &RunResult) -> Self {
        Self {
            variant: est.variant.to_string(),
            oracle_mode: est.oracle_mode.to_string(),
            seed: r.seed.to_string(),
            initial_success: r.initial_success,
            final_success: r.final_success,
            final_greedy_success: r.final_greedy_success,
            final_mean_reward: r.metrics.last().map_or(f64::NAN, |m| m.mean_reward),
        }
    }
}

/// Outcome of [`train_experiment`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub runs: Vec<RunResult>,
    /// Per-seed rows followed by a `mean` row.
    pub summary: Vec<SeedSummary>,
}

impl TrainOutcome {
    pub fn mean_final_success(&self) -> f64 {
        self.runs.iter().map(|r| r.final_success).sum::<f64>() / self.runs.len() as f64
    }

    pub fn mean_initial_success(&self) -> f64 {
        self.runs.iter().map(|r| r.initial_success).sum::<f64>() / self.runs.len() as f64
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_csv_file<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    write_csv(rows, BufWriter::new(File::create(path)?))
}

/// Run every seed, then write `seed_<s>.csv`, `policy_seed_<s>.tsv`,
/// `summary.csv` and a resolved `config.json` into `out_dir`.
pub fn train_experiment(cfg: &ExperimentConfig, out_dir: &Path, exec: Exec) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    let teacher = cfg.teacher_source()?;
    let runs = train_seeds(
        exec,
        &cfg.env,
        &cfg.policy,
        &cfg.estimator,
        &cfg.trainer,
        teacher.as_ref(),
    )?;
    let mut snapshot = cfg.clone();
    snapshot.output_dir = out_dir.to_path_buf();
    if let Some(TeacherSource::Table(t)) = &teacher {
        t.write_text(BufWriter::new(File::create(out_dir.join("teacher.tsv"))?))?;
        snapshot.teacher = Some(TeacherConfig::File {
            path: PathBuf::from("teacher.tsv"),
        });
    }
    write_json(&snapshot, &out_dir.join("config.json"))?;
    let mut summary = Vec::with_capacity(runs.len() + 1);
    for r in &runs {
        write_csv_file(&r.metrics, &out_dir.join(format!("seed_{}.csv", r.seed)))?;
        let mut w = BufWriter::new(File::create(out_dir.join(format!("policy_seed_{}.tsv", r.seed)))?);
        r.policy.write_text(&mut w)?;
        w.flush()?;
        summary.push(SeedSummary::of(&cfg.estimator, r));
    }
    let n = runs.len() as f64;
    let avg = |f: fn(&SeedSummary) -> f64| summary.iter().map(f).sum::<f64>() / n;
    let mean_row = SeedSummary {
        variant: cfg.estimator.variant.to_string(),
        oracle_mode: cfg.estimator.oracle_mode.to_string(),
        seed: "mean".into(),
        initial_success: avg(|s| s.initial_success),
        final_success: avg(|s| s.final_success),
        final_greedy_success: avg(|s| s.final_greedy_success),
        final_mean_reward: avg(|s| s.final_mean_reward),
    };
    summary.push(mean_row);
    write_csv_file(&summary, &out_dir.join("summary.csv"))?;
    Ok(TrainOutcome { runs, summary })
}

/// One grid point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub evidence_clip: f64,
    pub alpha: f64,
    pub group_size: usize,
}

impl SweepPoint {
    fn dir_name(&self) -> String {
        format!("C{}_alpha{}_G{}", self.evidence_clip, self.alpha, self.group_size)
    }

    fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        c.sweep = None;
        c.estimator.evidence_clip = self.evidence_clip;
        c.estimator.alpha = self.alpha;
        c.trainer.group_size = self.group_size;
        c
    }
}

/// Cartesian product of the sweep axes; absent axes keep the base value.
pub fn sweep_points(cfg: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    let axes = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CreditError::Config("config has no `sweep` section".into()))?;
    let clips = axes
        .evidence_clip
        .clone()
        .unwrap_or_else(|| vec![cfg.estimator.evidence_clip]);
    let alphas = axes.alpha.clone().unwrap_or_else(|| vec![cfg.estimator.alpha]);
    let sizes = axes
        .group_size
        .clone()
        .unwrap_or_else(|| vec![cfg.trainer.group_size]);
    let mut out = Vec::with_capacity(clips.len() * alphas.len() * sizes.len());
    for &evidence_clip in &clips {
        for &alpha in &alphas {
            for &group_size in &sizes {
                out.push(SweepPoint {
                    evidence_clip,
                    alpha,
                    group_size,
                });
            }
        }
    }
    Ok(out)
}

/// One row of `aggregate.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub evidence_clip: f64,
    pub alpha: f64,
    pub group_size: usize,
    pub variant: String,
    pub runs: usize,
    pub mean_final_success: f64,
    pub std_error: f64,
    /// Mean final success of `grpo_uniform` at the same point, reported when
    /// the group-size axis is swept.
    pub baseline_mean_final_success: Option<f64>,
    pub delta_vs_baseline: Option<f64>,
}

fn success_moments(runs: &[RunResult]) -> Moments {
    runs.iter().map(|r| r.final_success).collect()
}

/// Train every grid point into its own directory and write `aggregate.csv`.
pub fn run_sweep(cfg: &ExperimentConfig, out_dir: &Path, exec: Exec) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let points = sweep_points(cfg)?;
    let with_baseline = cfg.sweep.as_ref().is_some_and(|s| s.group_size.is_some());
    fs::create_dir_all(out_dir)?;
    write_json(cfg, &out_dir.join("sweep_config.json"))?;
    let mut rows = Vec::with_capacity(points.len());
    for p in &points {
        let point_cfg = p.apply(cfg);
        let outcome = train_experiment(&point_cfg, &out_dir.join(p.dir_name()), exec)?;
        let m = success_moments(&outcome.runs);
        let baseline = if with_baseline {
            let mut base = point_cfg.clone();
            base.estimator.variant = Variant::GrpoUniform;
            let dir = out_dir.join(format!("{}_{}", p.dir_name(), Variant::GrpoUniform));
            Some(success_moments(&train_experiment(&base, &dir, exec)?.runs).mean)
        } else {
            None
        };
        rows.push(SweepRow {
            evidence_clip: p.evidence_clip,
            alpha: p.alpha,
            group_size: p.group_size,
            variant: cfg.estimator.variant.to_string(),
            runs: outcome.runs.len(),
            mean_final_success: m.mean,
            std_error: m.std_error(),
            baseline_mean_final_success: baseline,
            delta_vs_baseline: baseline.map(|b| m.mean - b),
        });
    }
    write_csv_file(&rows, &out_dir.join("aggregate.csv"))?;
    Ok(rows)
}

/// One row of `brier.csv`: the exact beliefs and each perturbed control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrierRow {
    pub fraction: f64,
    pub exact: f64,
    pub shift_up: f64,
    pub shift_down: f64,
    pub jitter: f64,
}

impl BrierRow {
    /// Whether the exact beliefs beat every control strictly.
    pub fn exact_wins(&self) -> bool {
        self.exact < self.shift_up && self.exact < self.shift_down && self.exact < self.jitter
    }
}

/// Headline numbers of [`analyze_policy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub trajectories: usize,
    pub variant: String,
    pub oracle_mode: String,
    pub residual: ResidualSummary,
    pub brier: Vec<BrierRow>,
    pub adv_gini: f64,
    pub ratio_gini: f64,
}

/// Roll out `policy`, score the samples with the configured oracle, and
/// write residual, calibration, length and concentration tables.
///
/// Variants without belief traces are analysed as `oppo_full` with the
/// same oracle.
pub fn analyze_policy(
    cfg: &ExperimentConfig,
    policy: &TabularPolicy,
    trajectories: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<AnalysisSummary> {
    cfg.validate()?;
    if policy.env() != &cfg.env {
        return Err(CreditError::Config("policy was built for a different environment".into()));
    }
    if trajectories == 0 {
        return Err(CreditError::Empty("analysis sample".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut est = cfg.estimator;
    if !est.variant.needs_evidence() {
        est.variant = Variant::OppoFull;
    }
    let teacher = cfg.teacher_source()?;
    let ideal;
    let scorer: Option<&dyn Scorer> = match &teacher {
        Some(TeacherSource::Table(t)) => Some(t),
        Some(TeacherSource::Ideal) => {
            ideal = IdealTeacher::new(policy)?;
            Some(&ideal)
        }
        None => None,
    };
    let oracle = Oracle::new(est.oracle_mode, policy, scorer)?;
    let env = &cfg.env;
    let g = cfg.trainer.group_size;
    let mut batches: Vec<GroupBatch> = Vec::new();
    let mut rng = chunk_rng(seed, 0);
    let mut drawn = 0;
    while drawn < trajectories {
        let q = env.sample_query(&mut rng);
        let mut b = rollout_group(policy, q, g, rand::Rng::random(&mut rng))?;
        attach_evidence(&mut b, &oracle, est.effective_clip())?;
        compute_advantages(&mut b, &est)?;
        drawn += g;
        batches.push(b);
    }

    let mut traces = Vec::with_capacity(drawn);
    let mut rewards = Vec::with_capacity(drawn);
    let mut exact_values = Vec::with_capacity(drawn);
    let mut records = Vec::with_capacity(drawn);
    let tables = (0..env.num_queries)
        .map(|q| ValueTable::build(policy, q, env.answer(q)))
        .collect::<Result<Vec<_>>>()?;
    for b in &batches {
        let ratios = b.log_ratios().unwrap_or_default();
        let bt = b.traces.as_ref().ok_or_else(|| CreditError::Config("no belief traces".into()))?;
        for (i, toks) in b.tokens.iter().enumerate() {
            if traces.len() == trajectories {
                break;
            }
            traces.push(bt[i].clone());
            rewards.push(b.rewards[i]);
            exact_values.push(trajectory_values(policy, &tables[b.query], toks));
            records.push(TraceRecord {
                length: toks.len(),
                reward: b.rewards[i],
                abs_adv: bt[i].raw_adv.iter().map(|a| a.abs()).collect(),
                abs_log_ratio: ratios[i].iter().map(|x| x.abs()).collect(),
            });
        }
    }
    let priors: Vec<f64> = traces.iter().map(|t| t.prior_value()).collect();
    let residual = telescoping_residual_report(&traces, &rewards, &priors)?;
    write_csv_file(&residual.strata, &out_dir.join("residual_strata.csv"))?;

    let mut ctl_rng = chunk_rng(seed, 1);
    let mut controls: [Vec<Vec<f64>>; 3] = Default::default();
    for v in &exact_values {
        for (c, perturbed) in controls.iter_mut().zip(belief_controls(v, &mut ctl_rng)) {
            c.push(perturbed);
        }
    }
    let exact = brier_report(&exact_values, &rewards)?;
    let ctl = controls
        .iter()
        .map(|c| brier_report(c, &rewards))
        .collect::<Result<Vec<_>>>()?;
    debug_assert_eq!(CONTROL_NAMES.len(), ctl.len());
    let brier: Vec<BrierRow> = exact
        .iter()
        .enumerate()
        .map(|(k, e)| BrierRow {
            fraction: e.fraction,
            exact: e.score,
            shift_up: ctl[0][k].score,
            shift_down: ctl[1][k].score,
            jitter: ctl[2][k].score,
        })
        .collect();
    write_csv_file(&brier, &out_dir.join("brier.csv"))?;

    let strat = stratified_report(&records);
    write_csv_file(&strat.length_table, &out_dir.join("length_table.csv"))?;
    write_csv_file(&strat.concentration, &out_dir.join("concentration.csv"))?;

    let summary = AnalysisSummary {
        trajectories: traces.len(),
        variant: est.variant.to_string(),
        oracle_mode: est.oracle_mode.to_string(),
        residual: residual.overall,
        brier,
        adv_gini: strat.adv_gini,
        ratio_gini: strat.ratio_gini,
    };
    write_json(&summary, &out_dir.join("analysis.json"))?;
    Ok(summary)
}

/// Read a policy table written by a training run.
pub fn load_policy(path: &Path) -> Result<TabularPolicy> {
    TabularPolicy::read_text(BufReader::new(File::open(path)?))
}
