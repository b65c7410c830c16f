//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Tolerances and sample sizes are fixed here.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use credit_core::analysis::{
    belief_controls, brier_report, simulate_variance_gap, variance_gap_check, VarianceCheckInput,
};
use credit_core::batch::GroupBatch;
use credit_core::evidence::{advantage_exact, advantage_from_logodds, belief_trace, clip_log_ratio};
use credit_core::interop::{
    batch_to_records, read_trajectory_log, score_log, write_advantage_log, RecordGroup, TrajectoryRecord,
};
use credit_core::par::{chunk_rng, Exec};
use credit_core::synth::exact::{trajectory_log_bayes_factors, trajectory_values};
use credit_core::synth::{
    rollout_group, AnswerHint, EnvSpec, Oracle, PolicySpec, Scorer, TabularPolicy, ValueTable,
};
use credit_core::trainer::{attach_evidence, compute_advantages, surrogate_eval, train_seeds, TrainerConfig};
use credit_core::{EstimatorConfig, OracleMode, Variant};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `logistic(l + x) - logistic(l)` without cancellation.
fn logistic_step(l: f64, x: f64) -> f64 {
    (x / 2.0).sinh() / (2.0 * (l / 2.0).cosh() * ((l + x) / 2.0).cosh())
}

fn random_policy(env: &EnvSpec, spec: &PolicySpec, seed: u64, scale: f64) -> TabularPolicy {
    let mut p = TabularPolicy::uniform(env, spec);
    p.randomize(&mut chunk_rng(seed, 0), scale);
    p
}

/// Probability mass and rewarded mass of every prefix, summed bottom-up over
/// all complete sequences walked through the policy's own rows.
struct Enumeration {
    k: usize,
    /// `levels[d][code] = (P(prefix), P(prefix, R = 1))` for prefixes of length `d`.
    levels: Vec<Vec<(f64, f64)>>,
}

impl Enumeration {
    fn new(policy: &TabularPolicy, query: usize) -> Self {
        let env = policy.env().clone();
        let k = env.vocab_size;
        let mut leaves = Vec::with_capacity(k.pow(env.horizon as u32));
        fn walk(
            policy: &TabularPolicy,
            env: &EnvSpec,
            query: usize,
            path: &mut Vec<usize>,
            prob: f64,
            out: &mut Vec<(f64, f64)>,
        ) {
            if path.len() == env.horizon {
                out.push((prob, prob * f64::from(env.reward(query, path))));
                return;
            }
            let lp = policy.log_probs(query, None, path).unwrap();
            for (tok, l) in lp.iter().enumerate() {
                path.push(tok);
                walk(policy, env, query, path, prob * l.exp(), out);
                path.pop();
            }
        }
        walk(policy, &env, query, &mut Vec::new(), 1.0, &mut leaves);
        let mut levels = vec![leaves];
        while levels.last().unwrap().len() > 1 {
            let parent = levels
                .last()
                .unwrap()
                .chunks(k)
                .map(|c| c.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1)))
                .collect();
            levels.push(parent);
        }
        levels.reverse();
        Self { k, levels }
    }

    /// `P(R = 1 | prefix)`.
    fn posterior(&self, prefix: &[usize]) -> f64 {
        let code = prefix.iter().fold(0usize, |c, &t| c * self.k + t);
        let (p, pr) = self.levels[prefix.len()][code];
        pr / p
    }
}

fn sample_trajectory(policy: &TabularPolicy, query: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let env = policy.env();
    let mut path = Vec::with_capacity(env.horizon);
    for _ in 0..env.horizon {
        let p: Vec<f64> = policy
            .log_probs(query, None, &path)
            .unwrap()
            .iter()
            .map(|l| l.exp())
            .collect();
        path.push(WeightedIndex::new(&p).unwrap().sample(rng));
    }
    path
}

fn criterion_1() -> Outcome {
    let envs = [
        EnvSpec::parity(6, 8, 4),
        EnvSpec::parity(4, 6, 4),
        EnvSpec::prefix_lock(6, 8, 5, 2, 3),
        EnvSpec::prefix_lock(3, 7, 3, 1, 4),
    ];
    let mut worst: f64 = 0.0;
    let mut positions = 0;
    for (e, env) in envs.iter().enumerate() {
        env.validate().map_err(|x| x.to_string())?;
        let policy = random_policy(env, &PolicySpec::default(), 40 + e as u64, 1.5);
        let enums: Vec<Enumeration> = (0..env.num_queries).map(|q| Enumeration::new(&policy, q)).collect();
        let tables: Vec<ValueTable> = (0..env.num_queries)
            .map(|q| ValueTable::build(&policy, q, env.answer(q)).unwrap())
            .collect();
        let mut rng = chunk_rng(500 + e as u64, 0);
        for i in 0..200 {
            let q = i % env.num_queries;
            let traj = sample_trajectory(&policy, q, &mut rng);
            let lam = trajectory_log_bayes_factors(&policy, &tables[q], &traj);
            let mut l = {
                let v0 = enums[q].posterior(&[]);
                (v0 / (1.0 - v0)).ln()
            };
            for t in 0..=traj.len() {
                if t > 0 && lam[t - 1] != 0.0 {
                    l += lam[t - 1];
                }
                let err = (logistic(l) - enums[q].posterior(&traj[..t])).abs();
                worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
                positions += 1;
            }
        }
    }
    if worst <= 1e-10 {
        Ok(format!("{positions} positions over 800 trajectories, max |err| = {worst:.2e} (tol 1e-10)"))
    } else {
        Err(format!("max |err| = {worst:.2e} > 1e-10"))
    }
}

fn criterion_2() -> Outcome {
    let mut rng = chunk_rng(2, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100_000 {
        let len = rng.random_range(1..=64);
        let l0: f64 = rng.random_range(-5.0..5.0);
        let xs: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tr = belief_trace(l0, &xs).map_err(|e| e.to_string())?;
        let end = l0 + xs.iter().sum::<f64>();
        let lhs: f64 = tr.raw_adv.iter().sum();
        worst = worst.max((lhs - (logistic(end) - logistic(l0))).abs());
    }
    if worst <= 1e-12 {
        Ok(format!("1e5 sequences, max residual = {worst:.2e} (tol 1e-12)"))
    } else {
        Err(format!("max residual = {worst:.2e} > 1e-12"))
    }
}

fn criterion_3() -> Outcome {
    let mut rng = chunk_rng(3, 0);
    let mut violations = 0;
    let mut max_clipped: f64 = 0.0;
    for _ in 0..100_000 {
        let l: f64 = rng.random_range(-30.0..30.0);
        let x: f64 = rng.random_range(-20.0..20.0);
        let bound = (x.abs() / 4.0).min(1.0);
        let a = advantage_from_logodds(l, x);
        let b = advantage_exact(logistic(l), x).map_err(|e| e.to_string())?;
        if a.abs() > bound || b.abs() > bound {
            violations += 1;
        }
        let xc = clip_log_ratio(x, 3.0).map_err(|e| e.to_string())?;
        max_clipped = max_clipped.max(advantage_from_logodds(l, xc).abs());
    }
    if violations == 0 && max_clipped <= 0.75 {
        Ok(format!("1e5 pairs, 0 violations; max |A| at C = 3 is {max_clipped:.4} (<= 0.75)"))
    } else {
        Err(format!("{violations} violations, max |A| at C = 3 is {max_clipped}"))
    }
}

fn criterion_4() -> Outcome {
    let mut rng = chunk_rng(4, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100_000 {
        let l: f64 = rng.random_range(-30.0..=30.0);
        let x: f64 = rng.random_range(-10.0..=10.0);
        let a = advantage_from_logodds(l, x);
        let d = logistic_step(l, x);
        worst = worst.max(((a - d) / d).abs());
    }
    if worst <= 1e-12 {
        Ok(format!("1e5 samples, max relative gap = {worst:.2e} (tol 1e-12)"))
    } else {
        Err(format!("max relative gap = {worst:.2e} > 1e-12"))
    }
}

fn criterion_5() -> Outcome {
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
    let student = random_policy(&env, &spec, 17, 1.0);
    let oracle = Oracle::new(OracleMode::SelfOracle, &student, None).map_err(|e| e.to_string())?;
    let enums: Vec<Enumeration> = (0..env.num_queries).map(|q| Enumeration::new(&student, q)).collect();
    let mut pick = chunk_rng(0xB1A5, 0);
    let mut worst_z: f64 = 0.0;
    let mut min_eps = f64::INFINITY;
    for case in 0..20u64 {
        let q = pick.random_range(0..env.num_queries);
        let len = pick.random_range(0..env.horizon - 1);
        let prefix: Vec<usize> = (0..len).map(|_| pick.random_range(0..env.vocab_size)).collect();
        let plain = student.log_probs(q, None, &prefix).unwrap();
        let ans = student.log_probs(q, Some(env.answer(q)), &prefix).unwrap();
        let v = enums[q].posterior(&prefix);
        let success: Vec<f64> = (0..env.vocab_size)
            .map(|tok| {
                let mut next = prefix.clone();
                next.push(tok);
                plain[tok].exp() * enums[q].posterior(&next) / v
            })
            .collect();
        let eps: f64 = success
            .iter()
            .zip(&ans)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, a)| p * (p.ln() - a))
            .sum();
        let lib_eps = oracle.kl_eps(q, &prefix).map_err(|e| e.to_string())?;
        if (lib_eps - eps).abs() > 1e-10 {
            return Err(format!("prefix {case}: library eps {lib_eps} vs enumerated {eps}"));
        }
        min_eps = min_eps.min(eps);
        // Shared reference: both ratios are taken over the plain row.
        let diff: Vec<f64> = (0..env.vocab_size)
            .map(|tok| (ans[tok] - plain[tok]) - (success[tok].ln() - plain[tok]))
            .collect();
        let dist = WeightedIndex::new(&success).unwrap();
        let mut rng = chunk_rng(5_000 + case, 0);
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let d = diff[dist.sample(&mut rng)];
            s += d;
            s2 += d * d;
        }
        let mean = s / n as f64;
        let var = (s2 - n as f64 * mean * mean) / (n as f64 - 1.0);
        let se = (var.max(0.0) / n as f64).sqrt();
        let z = (mean + eps).abs() / se;
        worst_z = worst_z.max(z);
        if (mean + eps).abs() > 3.0 * se {
            return Err(format!("prefix {case}: mean {mean:.5} vs -eps {:.5}, {z:.2} SE", -eps));
        }
    }
    Ok(format!(
        "20 prefixes x 1e5 draws, worst |mean + eps| = {worst_z:.2} SE (tol 3), min eps = {min_eps:.4}"
    ))
}

fn criterion_6() -> Outcome {
    let mut rng = chunk_rng(6, 0);
    let mut violations = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(1..=16);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let v: Vec<f64> = (0..n)
            .map(|_| match rng.random_range(0..6) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.random_range(0.0..=1.0),
            })
            .collect();
        let h: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let delta = rng.random_range(1e-3..1.0);
        let gamma = rng.random_range(1e-3..=0.25);
        let input = VarianceCheckInput {
            log_lambda: x.clone(),
            values: v.clone(),
            score_var: h.clone(),
            delta,
            gamma,
        };
        let g = variance_gap_check(&input).map_err(|e| e.to_string())?;
        let mut gap = 0.0;
        let mut bound = 0.0;
        for t in 0..n {
            let w = v[t] * (1.0 - v[t]);
            gap += (1.0 - w * w) * x[t] * x[t] * h[t];
            if x[t].abs() >= delta && w < gamma {
                bound += x[t] * x[t] * h[t];
            }
        }
        bound *= 1.0 - gamma * gamma;
        let agrees = (g.gap - gap).abs() <= 1e-12 * gap.max(1.0) && (g.bound - bound).abs() <= 1e-12 * bound.max(1.0);
        if !(g.satisfied && gap >= bound && bound >= 0.0 && agrees) {
            violations += 1;
        }
    }
    if violations > 0 {
        return Err(format!("(a) {violations} violations over 1e4 inputs"));
    }
    let input = VarianceCheckInput {
        log_lambda: vec![2.0, 0.1, -1.5, 0.8, -3.0],
        values: vec![0.5, 0.99, 0.3, 0.02, 0.7],
        score_var: vec![1.0, 1.0, 0.5, 2.0, 0.25],
        delta: 0.05,
        gamma: 0.1,
    };
    let sim = simulate_variance_gap(&input, 100_000, 66, Exec::Parallel).map_err(|e| e.to_string())?;
    let z = (sim.estimate - sim.analytic).abs() / sim.std_error;
    if z <= 3.0 {
        Ok(format!(
            "(a) 1e4 inputs, 0 violations; (b) simulated {:.4} vs analytic {:.4}, {z:.2} SE (tol 3)",
            sim.estimate, sim.analytic
        ))
    } else {
        Err(format!("(b) simulated {} vs analytic {}: {z:.2} SE", sim.estimate, sim.analytic))
    }
}

fn fd_relative_error(policy: &TabularPolicy, batches: &[GroupBatch], eps: f64) -> f64 {
    let h = 1e-5;
    let analytic = surrogate_eval(policy, batches, eps).unwrap().grad;
    let mut p = policy.clone();
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let base = p.logits[i];
        p.logits[i] = base + h;
        let up = surrogate_eval(&p, batches, eps).unwrap().objective;
        p.logits[i] = base - h;
        let down = surrogate_eval(&p, batches, eps).unwrap().objective;
        p.logits[i] = base;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((a - fd).abs());
        scale = scale.max(fd.abs());
    }
    if scale == 0.0 {
        worst
    } else {
        worst / scale
    }
}

fn min_kink_distance(policy: &TabularPolicy, batches: &[GroupBatch], eps: f64) -> f64 {
    let mut m = f64::INFINITY;
    for b in batches {
        for (traj, old) in b.tokens.iter().zip(&b.old_logp) {
            for t in 0..traj.len() {
                let lp = policy.log_probs(b.query, None, &traj[..t]).unwrap()[traj[t]];
                let rho = (lp - old[t]).exp();
                m = m.min((rho - 1.0 - eps).abs()).min((rho - 1.0 + eps).abs());
            }
        }
    }
    m
}

fn criterion_7() -> Outcome {
    let settings = [
        (EnvSpec::parity(2, 2, 2), PolicySpec { window: Some(0), residue_feature: Some(false), ..PolicySpec::default() }),
        (
            EnvSpec::parity(3, 4, 3),
            PolicySpec {
                window: Some(1),
                hint: AnswerHint {
                    completion: 1.0,
                    local: 0.5,
                    surface: 0.5,
                    focus: 0.0,
                },
                ..PolicySpec::default()
            },
        ),
    ];
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for (s, (env, spec)) in settings.iter().enumerate() {
        let student = random_policy(env, spec, 70 + s as u64, 1.0);
        for variant in Variant::ALL {
            let est = EstimatorConfig::default().with_variant(variant);
            let oracle = Oracle::new(OracleMode::SelfOracle, &student, None).unwrap();
            let mut batches = Vec::new();
            for q in 0..env.num_queries {
                let mut b = rollout_group(&student, q, 6, 700 + q as u64).unwrap();
                attach_evidence(&mut b, &oracle, est.effective_clip()).unwrap();
                compute_advantages(&mut b, &est).unwrap();
                batches.push(b);
            }
            let mut err = fd_relative_error(&student, &batches, est.surrogate_clip);
            let mut moved = None;
            for attempt in 0..64 {
                let mut p = student.clone();
                let mut rng = chunk_rng(7_000 + attempt, s as u64);
                for x in &mut p.logits {
                    *x += rng.random_range(-0.4..0.4);
                }
                if min_kink_distance(&p, &batches, est.surrogate_clip) > 1e-3 {
                    moved = Some(p);
                    break;
                }
            }
            let moved = moved.ok_or("no perturbation away from the clip boundary")?;
            err = err.max(fd_relative_error(&moved, &batches, est.surrogate_clip));
            cases += 2;
            if err > 1e-5 {
                return Err(format!("{variant} on policy {s}: relative error {err:.2e} > 1e-5"));
            }
            worst = worst.max(err);
        }
    }
    Ok(format!("{cases} policy/variant cases, max relative error = {worst:.2e} (tol 1e-5)"))
}

fn criterion_8() -> Outcome {
    let env = EnvSpec::parity(4, 6, 4);
    let spec = PolicySpec {
        window: Some(0),
        position_feature: true,
        hint: AnswerHint {
            completion: 2.0,
            local: 0.0,
            surface: 2.0,
            focus: 3.0,
        },
        ..PolicySpec::default()
    };
    let trainer = TrainerConfig {
        lr: 2.0,
        steps: 300,
        group_size: 8,
        queries_per_step: 4,
        seeds: (0..10).collect(),
        ..TrainerConfig::default()
    };
    let mut rows: Vec<(String, f64, f64)> = Vec::new();
    let mut runs: Vec<(String, EstimatorConfig)> = Variant::ALL
        .iter()
        .map(|&v| (v.to_string(), EstimatorConfig::default().with_variant(v)))
        .collect();
    runs.push((
        "oppo_full/exact_oracle".into(),
        EstimatorConfig::default().with_oracle(OracleMode::ExactOracle),
    ));
    for (name, est) in runs {
        let r = train_seeds(Exec::Parallel, &env, &spec, &est, &trainer, None).map_err(|e| e.to_string())?;
        let n = r.len() as f64;
        rows.push((
            name,
            r.iter().map(|x| x.initial_success).sum::<f64>() / n,
            r.iter().map(|x| x.final_success).sum::<f64>() / n,
        ));
    }
    let get = |name: &str| rows.iter().find(|r| r.0 == name).unwrap().2;
    let table = rows
        .iter()
        .map(|(n, _, f)| format!("{n}={f:.4}"))
        .collect::<Vec<_>>()
        .join(" ");
    let initial = rows[0].1;
    let a = rows.iter().all(|(_, i, f)| f > i);
    let b = get("oppo_full") >= get("grpo_uniform");
    let c = get("oppo_full/exact_oracle") >= get("oppo_full");
    let d = get("oppo_no_anchor") < get("oppo_full");
    let detail = format!("initial={initial:.4} {table}; (a) {a} (b) {b} (c) {c} (d) {d}");
    if a && b && c && d {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_9() -> Outcome {
    let env = EnvSpec::parity(4, 6, 4);
    let policy = random_policy(&env, &PolicySpec::default(), 90, 1.5);
    let tables: Vec<ValueTable> = (0..env.num_queries)
        .map(|q| ValueTable::build(&policy, q, env.answer(q)).unwrap())
        .collect();
    let mut rng = chunk_rng(9, 0);
    let mut ctl_rng = chunk_rng(9, 1);
    let mut exact = Vec::new();
    let mut controls: [Vec<Vec<f64>>; 3] = Default::default();
    let mut rewards = Vec::new();
    for i in 0..500 {
        let q = i % env.num_queries;
        let traj = sample_trajectory(&policy, q, &mut rng);
        let v = trajectory_values(&policy, &tables[q], &traj);
        for (c, p) in controls.iter_mut().zip(belief_controls(&v, &mut ctl_rng)) {
            c.push(p);
        }
        exact.push(v);
        rewards.push(env.reward(q, &traj));
    }
    let e = brier_report(&exact, &rewards).map_err(|x| x.to_string())?;
    let cs: Vec<_> = controls.iter().map(|c| brier_report(c, &rewards).unwrap()).collect();
    let mut parts = Vec::new();
    let mut ok = true;
    for (k, pt) in e.iter().enumerate() {
        let best_ctl = cs.iter().map(|c| c[k].score).fold(f64::INFINITY, f64::min);
        ok &= pt.score < best_ctl;
        parts.push(format!("f={}: {:.4} vs best control {:.4}", pt.fraction, pt.score, best_ctl));
    }
    let detail = format!("500 trajectories; {}", parts.join(", "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn finite(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let x = f64::from_bits(rng.random());
        if x.is_finite() {
            return x;
        }
    }
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = chunk_rng(10, 0);
    let mut groups: Vec<RecordGroup> = Vec::new();
    let mut n = 0;
    while n < 1_000 {
        let gid = format!("grp-{}", groups.len());
        let size = rng.random_range(1..=6).min(1_000 - n);
        let records = (0..size)
            .map(|i| {
                let len = rng.random_range(1..=10);
                let scored = rng.random_bool(0.5);
                TrajectoryRecord {
                    query_id: format!("q{}", rng.random_range(0..9)),
                    traj_id: format!("{gid}.{i}"),
                    group_id: gid.clone(),
                    tokens: (0..len).map(|_| rng.random()).collect(),
                    logp_plain: (0..len).map(|_| -finite(&mut rng).abs()).collect(),
                    logp_oracle: (0..len).map(|_| -rng.random_range(0.0..50.0)).collect(),
                    reward: rng.random_range(0..=1),
                    advantage: scored.then(|| (0..len).map(|_| finite(&mut rng)).collect()),
                    v_trace: scored.then(|| (0..=len).map(|_| rng.random::<f64>()).collect()),
                }
            })
            .collect();
        n += size;
        groups.push(RecordGroup { group_id: gid, records });
    }
    let path = dir.path().join("records.jsonl");
    write_advantage_log(&groups, &path).map_err(|e| e.to_string())?;
    let back = read_trajectory_log(&path, false).map_err(|e| e.to_string())?;
    let a: Vec<&TrajectoryRecord> = groups.iter().flat_map(|g| &g.records).collect();
    let b: Vec<&TrajectoryRecord> = back.groups.iter().flat_map(|g| &g.records).collect();
    if a.len() != b.len() {
        return Err(format!("{} records written, {} read", a.len(), b.len()));
    }
    for (x, y) in a.iter().zip(&b) {
        let ok = x.query_id == y.query_id
            && x.traj_id == y.traj_id
            && x.group_id == y.group_id
            && x.tokens == y.tokens
            && x.reward == y.reward
            && same_bits(&x.logp_plain, &y.logp_plain)
            && same_bits(&x.logp_oracle, &y.logp_oracle)
            && x.advantage.is_some() == y.advantage.is_some()
            && x.v_trace.is_some() == y.v_trace.is_some()
            && x.advantage.iter().zip(&y.advantage).all(|(p, q)| same_bits(p, q))
            && x.v_trace.iter().zip(&y.v_trace).all(|(p, q)| same_bits(p, q));
        if !ok {
            return Err(format!("record {} changed in the round trip", x.traj_id));
        }
    }

    let env = EnvSpec::parity(4, 6, 4);
    let policy = random_policy(&env, &PolicySpec::default(), 100, 1.0);
    let mut compared = 0;
    let mut configs = 0;
    for mode in [OracleMode::SelfOracle, OracleMode::ExactOracle] {
        for variant in Variant::ALL {
            let est = EstimatorConfig::default().with_variant(variant).with_oracle(mode);
            if mode == OracleMode::ExactOracle && !est.effective_clip().is_finite() {
                continue;
            }
            configs += 1;
            let oracle = Oracle::new(mode, &policy, None).unwrap();
            let mut batches = Vec::new();
            for i in 0..6u64 {
                let mut bt = rollout_group(&policy, (i % 4) as usize, 8, 1_000 + i).unwrap();
                attach_evidence(&mut bt, &oracle, est.effective_clip()).unwrap();
                compute_advantages(&mut bt, &est).unwrap();
                batches.push(bt);
            }
            let exported: Vec<RecordGroup> = batches
                .iter()
                .enumerate()
                .map(|(i, bt)| batch_to_records(bt, &format!("b{i}")).unwrap())
                .collect();
            let p = dir.path().join(format!("{mode}_{variant}.jsonl"));
            write_advantage_log(&exported, &p).unwrap();
            let parsed = read_trajectory_log(&p, false).unwrap();
            let scored = score_log(parsed.groups, &est, Exec::Parallel).map_err(|e| e.to_string())?;
            for (bt, g) in batches.iter().zip(&scored.groups) {
                for (i, r) in g.records.iter().enumerate() {
                    let adv_ok = r.advantage.as_deref().is_some_and(|x| same_bits(x, &bt.advantages[i]));
                    let trace_ok = match (&bt.traces, &r.v_trace) {
                        (Some(t), Some(v)) => same_bits(&t[i].values, v),
                        (None, None) => true,
                        _ => false,
                    };
                    if !(adv_ok && trace_ok) {
                        return Err(format!("{mode}/{variant}: group {} record {i} differs", g.group_id));
                    }
                    compared += 1;
                }
            }
        }
    }
    Ok(format!(
        "1000 records bit-identical; {compared} scored trajectories over {configs} configs match in-process advantages bit-exactly"
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("1 exact-recursion fidelity", criterion_1, Duration::from_secs(60)),
        ("2 telescoping identity", criterion_2, Duration::from_secs(10)),
        ("3 bound suite", criterion_3, Duration::MAX),
        ("4 closed-form agreement", criterion_4, Duration::MAX),
        ("5 bias identity", criterion_5, Duration::from_secs(120)),
        ("6 variance proposition", criterion_6, Duration::MAX),
        ("7 gradient correctness", criterion_7, Duration::MAX),
        ("8 desk-scale training ordering", criterion_8, Duration::from_secs(600)),
        ("9 calibration", criterion_9, Duration::MAX),
        ("10 interop round trip and cross-path equivalence", criterion_10, Duration::MAX),
    ];
    let mut failed = 0;
    for (name, f, budget) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(d) if took > budget => Err(format!("{d}; took {took:.1?}, budget {budget:.0?}")),
            o => o,
        };
        match outcome {
            Ok(d) => println!("PASS criterion {name}: {d} [{took:.2?}]"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {name}: {d} [{took:.2?}]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
