//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Run with `cargo test --test acceptance`.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use cfl_core::degeneracy::{
    collapse_run, collapse_task, partition_dmax, probe_log, probe_max_reward_collapse,
    probe_unit_probabilities, ProbeStatus, DEGENERATE_VALUE_TOLERANCE, PROBE_ASSIGNMENTS,
};
use cfl_core::estimators::{value_ips_dpm, value_reweighted};
use cfl_core::experiment::{median_improvement, run_comparison, ComparisonSpec};
use cfl_core::gradients::{GradProblem, ProblemSize, FD_TOLERANCE};
use cfl_core::reward::{control_scalar, estimate_c_hat};
use cfl_core::{
    evaluate_truth, fd_check, generate_task, log_prob_gradient, policy_probs, roll_log, train,
    EstimatorKind, Instance, Log, LogMode, Objective, PolicyParams, RewardModel, RewardPredictor,
    TaskSpec, TrainConfig,
};

const GRAD_PROBLEMS: usize = 100;
const GRAD_MAX_SIZE: ProblemSize = ProblemSize { n: 10, k: 5, d: 6 };
const GRAD_MAX_REL_ERROR: f64 = 1e-5;

const PROBE_LOGS_PER_MODE: usize = 50;
const PROBE_COUNT: usize = 200;
const DEGENERATE_TOL: f64 = 1e-12;

const UNBIASED_REPLICATES: usize = 2000;
const UNBIASED_LOG_SIZE: usize = 50;
const UNBIASED_SIGMAS: f64 = 3.0;

const COLLAPSE_SIZE: (usize, usize, usize) = (20, 5, 10);
const COLLAPSE_EPOCHS: usize = 2000;
const COLLAPSE_LEARNING_RATE: f64 = 0.1;
const COLLAPSE_MASS: f64 = 0.9;
const COLLAPSE_PATIENCE: usize = 10;
const COLLAPSE_SEED: u64 = 0;
const COLLAPSE_NOISE: f64 = 0.05;
const COLLAPSE_LOGGER_QUALITY: f64 = 0.6;

const ORDERING_TIE: f64 = 1e-3;

const SOFTMAX_SUM_TOL: f64 = 1e-12;
const SCORE_IDENTITY_TOL: f64 = 1e-9;
const C_HAT_ONE_TOL: f64 = 1e-12;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn core<T>(r: cfl_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn mode_for(i: usize) -> LogMode {
    if i.is_multiple_of(2) {
        LogMode::Stochastic
    } else {
        LogMode::Deterministic
    }
}

fn gradient_correctness() -> Outcome {
    let families: [(&str, [EstimatorKind; 2]); 3] = [
        ("ips/dpm", [EstimatorKind::Ips, EstimatorKind::Dpm]),
        ("reweighted", [EstimatorKind::IpsR, EstimatorKind::DpmR]),
        (
            "doubly-controlled",
            [EstimatorKind::CDr, EstimatorKind::CDc],
        ),
    ];
    let mut parts = Vec::new();
    for (name, kinds) in families {
        let mut worst: f64 = 0.0;
        for i in 0..GRAD_PROBLEMS {
            let mode = mode_for(i);
            let kind = kinds[i % 2];
            let p = core(GradProblem::generate_bounded(i as u64, GRAD_MAX_SIZE, mode))?;
            let objective = core(if kind.uses_reward_model() {
                Objective::controlled(kind, &p.model, p.c_hat)
            } else {
                Objective::plain(kind)
            })?;
            let err = core(fd_check(
                |w| objective.value(w, &p.log),
                |w| objective.gradient(w, &p.log),
                &p.params,
            ))?;
            worst = worst.max(err);
        }
        ensure(worst < GRAD_MAX_REL_ERROR, || {
            format!("{name}: max rel error {worst:e}")
        })?;
        parts.push(format!("{name} {worst:.1e}"));
    }
    Ok(format!(
        "{GRAD_PROBLEMS} problems per family; max rel error {}",
        parts.join(", ")
    ))
}

/// First `count` probe logs of `mode` that satisfy `keep`.
fn probe_logs(
    mode: LogMode,
    count: usize,
    keep: impl Fn(&Log) -> bool,
) -> Result<Vec<(u64, Log)>, String> {
    let mut out = Vec::new();
    let mut seed = 0u64;
    while out.len() < count {
        let log = core(probe_log(seed, mode))?;
        if keep(&log) {
            out.push((seed, log));
        }
        seed += 1;
        ensure(seed < 100 * count as u64, || {
            "too few logs satisfy the hypothesis".into()
        })?;
    }
    Ok(out)
}

fn unit_probability_probe() -> Outcome {
    let mut violations = 0;
    let mut checks = 0;
    for mode in [LogMode::Stochastic, LogMode::Deterministic] {
        let logs = probe_logs(mode, PROBE_LOGS_PER_MODE, |l| {
            l.tuples().iter().all(|t| t.reward() > 0.0)
        })?;
        for (seed, log) in logs {
            let r = probe_unit_probabilities(&log, seed);
            ensure(!matches!(r.status, ProbeStatus::Skipped(_)), || {
                format!("seed {seed} skipped")
            })?;
            ensure(r.checks == PROBE_COUNT, || {
                format!("seed {seed}: {} assignments", r.checks)
            })?;
            violations += r.violations;
            checks += r.checks;
        }
    }
    ensure(violations == 0, || format!("{violations} violations"))?;
    Ok(format!(
        "{} logs ({PROBE_LOGS_PER_MODE} stochastic, {PROBE_LOGS_PER_MODE} deterministic), {checks} assignments, 0 violations",
        2 * PROBE_LOGS_PER_MODE
    ))
}

fn max_reward_probe() -> Outcome {
    let mut violations = 0;
    let mut checks = 0;
    let mut worst_gap: f64 = 0.0;
    for mode in [LogMode::Stochastic, LogMode::Deterministic] {
        let logs = probe_logs(mode, PROBE_LOGS_PER_MODE, |l| {
            let p = partition_dmax(l);
            p.delta_max > 0.0 && !p.rest_indices.is_empty()
        })?;
        for (seed, log) in logs {
            let r = probe_max_reward_collapse(&log, seed);
            ensure(!matches!(r.status, ProbeStatus::Skipped(_)), || {
                format!("seed {seed} skipped")
            })?;
            let gap = (r.witness_value - partition_dmax(&log).delta_max).abs();
            ensure(gap <= DEGENERATE_TOL, || {
                format!("seed {seed}: degenerate value off by {gap:e}")
            })?;
            worst_gap = worst_gap.max(gap);
            violations += r.violations;
            checks += r.checks;
        }
    }
    ensure(violations == 0, || format!("{violations} violations"))?;
    Ok(format!(
        "{} logs, {checks} checks, 0 violations; max |V_degenerate - delta_max| = {worst_gap:e}",
        2 * PROBE_LOGS_PER_MODE
    ))
}

fn ips_unbiasedness() -> Outcome {
    let spec = TaskSpec {
        reward_noise: 0.05,
        logger_quality: 0.3,
        logging: LogMode::Stochastic,
        ..TaskSpec::new(UNBIASED_LOG_SIZE, 5, 4, 2024)
    };
    let task = core(generate_task(&spec))?;
    let target = core(PolicyParams::new(task.truth.hidden_weights.clone(), 1.5))?;
    let exact = core(evaluate_truth(
        &target,
        task.instances.iter().map(|i| i.as_ref()),
        &task.truth,
    ))?;
    let values = (0..UNBIASED_REPLICATES as u64)
        .map(|seed| {
            core(roll_log(&task.instances, &task.truth, &task.logger, seed))
                .and_then(|l| core(value_ips_dpm(&target, &l)))
        })
        .collect::<Result<Vec<f64>, String>>()?;
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt();
    let bound = UNBIASED_SIGMAS * sd / r.sqrt();
    let gap = (mean - exact).abs();
    ensure(gap <= bound, || {
        format!("|mean - exact| = {gap:e} > {bound:e}")
    })?;
    Ok(format!("R = {UNBIASED_REPLICATES}: mean {mean:.6}, exact {exact:.6}, |gap| {gap:.2e} <= {bound:.2e}"))
}

fn collapse_spec(seed: u64) -> TaskSpec {
    let (n, k, d) = COLLAPSE_SIZE;
    TaskSpec {
        reward_noise: COLLAPSE_NOISE,
        logger_quality: COLLAPSE_LOGGER_QUALITY,
        ..TaskSpec::new(n, k, d, seed)
    }
}

fn collapse_config(kind: EstimatorKind, patience: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: COLLAPSE_LEARNING_RATE,
        epochs: COLLAPSE_EPOCHS,
        early_stop_patience: patience,
        ..TrainConfig::new(kind)
    }
}

fn degeneracy_dynamics() -> Outcome {
    let spec = collapse_spec(COLLAPSE_SEED);
    let full = core(collapse_run(
        &spec,
        &collapse_config(EstimatorKind::DpmR, 0),
    ))?;
    let early = core(collapse_run(
        &spec,
        &collapse_config(EstimatorKind::DpmR, COLLAPSE_PATIENCE),
    ))?;
    ensure(full.trace.records.len() == COLLAPSE_EPOCHS, || {
        "unstopped run ended early".into()
    })?;
    ensure(full.final_mass_on_dmax > COLLAPSE_MASS, || {
        format!(
            "final mass_on_dmax {:.4} <= {COLLAPSE_MASS}",
            full.final_mass_on_dmax
        )
    })?;
    ensure(early.final_mass_on_dmax < full.final_mass_on_dmax, || {
        format!(
            "early-stopped mass {:.4} not below {:.4}",
            early.final_mass_on_dmax, full.final_mass_on_dmax
        )
    })?;

    let (train_log, validation, truth) = core(collapse_task(&spec))?;
    let init = core(PolicyParams::zeros(train_log.dim(), 1.0))?;
    let cdc = core(train(
        &collapse_config(EstimatorKind::CDc, 0),
        &train_log,
        Some(&validation),
        &init,
        Some(&truth),
    ))?;
    let cdc_reward = core(evaluate_truth(
        &cdc.params,
        train_log.tuples().iter().map(|t| t.instance()),
        &truth,
    ))?;
    ensure(cdc_reward >= full.final_true_reward, || {
        format!(
            "cDC true reward {cdc_reward:.4} below DPM+R {:.4}",
            full.final_true_reward
        )
    })?;

    // Seed sensitivity, reported only.
    let collapsed = (0..10)
        .map(|s| {
            core(collapse_run(
                &collapse_spec(s),
                &collapse_config(EstimatorKind::DpmR, 0),
            ))
        })
        .collect::<Result<Vec<_>, _>>()?
        .iter()
        .filter(|r| r.final_mass_on_dmax > COLLAPSE_MASS)
        .count();
    Ok(format!(
        "seed {COLLAPSE_SEED}: mass {:.4} unstopped vs {:.4} early-stopped (epoch {}); true reward DPM+R {:.4} <= cDC {cdc_reward:.4}; {collapsed}/10 task seeds exceed {COLLAPSE_MASS}",
        full.final_mass_on_dmax,
        early.final_mass_on_dmax,
        early.trace.records.len(),
        full.final_true_reward
    ))
}

fn at_least(a: f64, b: f64) -> bool {
    a >= b - ORDERING_TIE
}

fn table_ordering() -> Outcome {
    use EstimatorKind::*;
    let spec = ComparisonSpec::standard();
    let det = core(run_comparison(&spec, &[DpmR, Dc, CDc]))?;
    let sto = core(run_comparison(&spec, &[IpsR, Dr, CDr]))?;
    let m = |rows, k| median_improvement(rows, k).expect("rows present");
    let (dpmr, dc, cdc) = (m(&det, DpmR), m(&det, Dc), m(&det, CDc));
    let (ipsr, dr, cdr) = (m(&sto, IpsR), m(&sto, Dr), m(&sto, CDr));
    let detail = format!(
        "median test improvement: DPM+R {dpmr:.4}, DC {dc:.4}, cDC {cdc:.4}; IPS+R {ipsr:.4}, DR {dr:.4}, cDR {cdr:.4}"
    );
    let checks = [
        ("cDC >= DC", at_least(cdc, dc)),
        ("DC >= DPM+R", at_least(dc, dpmr)),
        ("DPM+R >= 0", at_least(dpmr, 0.0)),
        ("cDR > IPS+R", at_least(cdr, ipsr)),
        ("DR > IPS+R", at_least(dr, ipsr)),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    ensure(failed.is_empty(), || {
        format!("{detail}; failed {}", failed.join(", "))
    })?;
    Ok(detail)
}

/// Predicts the logged reward on logged pairs.
struct Echo<'a>(&'a Log);

impl RewardPredictor for Echo<'_> {
    fn predict(&self, instance: &Instance, y: usize) -> cfl_core::Result<f64> {
        let t = self
            .0
            .tuples()
            .iter()
            .find(|t| t.instance().id() == instance.id())
            .expect("instance in log");
        Ok(if y == t.chosen() { t.reward() } else { 0.5 })
    }
}

fn identity_suite() -> Outcome {
    let mut checked = 0usize;
    for i in 0..50u64 {
        let det = core(GradProblem::generate_bounded(
            i,
            GRAD_MAX_SIZE,
            LogMode::Deterministic,
        ))?;
        let log = &det.log;
        let params = &det.params;

        let unit = log.with_unit_propensities();
        let (a, b) = (
            core(value_ips_dpm(params, log))?,
            core(value_ips_dpm(params, &unit))?,
        );
        ensure(a.to_bits() == b.to_bits(), || {
            format!("seed {i}: DPM {a} != IPS at mu = 1 {b}")
        })?;
        let (ga, gb) = (
            core(core(Objective::plain(EstimatorKind::Dpm))?.gradient(params, log))?,
            core(core(Objective::plain(EstimatorKind::Ips))?.gradient(params, &unit))?,
        );
        ensure(ga == gb, || {
            format!("seed {i}: DPM and IPS gradients differ at mu = 1")
        })?;

        let zero = core(Objective::controlled(EstimatorKind::CDc, &det.model, 0.0))?;
        let (v0, vr) = (
            core(zero.value(params, log))?,
            core(value_reweighted(params, log))?,
        );
        ensure(v0.to_bits() == vr.to_bits(), || {
            format!("seed {i}: cDC(c=0) {v0} != DPM+R {vr}")
        })?;
        let (g0, gr) = (
            core(zero.gradient(params, log))?,
            core(core(Objective::plain(EstimatorKind::DpmR))?.gradient(params, log))?,
        );
        ensure(
            g0.iter().zip(&gr).all(|(x, y)| x.to_bits() == y.to_bits()),
            || format!("seed {i}: cDC(c=0) gradient differs from DPM+R"),
        )?;

        if log.len() >= 2
            && log
                .tuples()
                .iter()
                .any(|t| t.reward() != log.tuples()[0].reward())
        {
            let c = core(estimate_c_hat(params, log, &Echo(log)))?.c_hat;
            ensure((c - 1.0).abs() <= C_HAT_ONE_TOL, || {
                format!("seed {i}: c_hat {c} with exact predictions")
            })?;
            let flat = RewardModel {
                weights: vec![0.0; log.dim()],
                intercept: 0.4,
                ridge_lambda: 0.0,
            };
            let uniform = core(PolicyParams::zeros(log.dim(), 1.0))?;
            let c0 = core(estimate_c_hat(&uniform, log, &flat))?.c_hat;
            ensure(c0 == 0.0, || {
                format!("seed {i}: c_hat {c0} with constant predictions")
            })?;
        }

        for scale in [1.0, 50.0] {
            let scaled = core(PolicyParams::new(
                params.weights.iter().map(|w| w * scale).collect(),
                params.alpha,
            ))?;
            for t in log.tuples() {
                let inst = t.instance();
                let probs = core(policy_probs(&scaled, inst))?;
                let sum: f64 = probs.iter().sum();
                ensure(
                    (sum - 1.0).abs() <= SOFTMAX_SUM_TOL
                        && probs.iter().all(|p| (0.0..=1.0).contains(p)),
                    || format!("seed {i}: probabilities sum to {sum}"),
                )?;
                let mut acc = vec![0.0; inst.dim()];
                for (y, p) in probs.iter().enumerate() {
                    for (a, g) in acc
                        .iter_mut()
                        .zip(core(log_prob_gradient(&scaled, inst, y))?)
                    {
                        *a += p * g;
                    }
                }
                let worst = acc.iter().fold(0.0f64, |m, a| m.max(a.abs()));
                ensure(worst <= SCORE_IDENTITY_TOL, || {
                    format!("seed {i}: E[grad log pi] = {worst:e}")
                })?;
                checked += 1;
            }
        }
    }
    let cs = core(control_scalar(&[0.1, 0.5, 0.9], &[0.3, 0.3, 0.3]))?;
    ensure(cs.c_hat == 0.0, || "constant Y must give c_hat = 0".into())?;
    Ok(format!(
        "50 problems; softmax and score identities on {checked} instances"
    ))
}

fn cfl(args: &[&str], cwd: &Path) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cfl"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!(
            "`cfl {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )
    })?;
    Ok(out.stdout)
}

fn snapshot(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let p = e.map_err(|e| e.to_string())?.path();
        let bytes = fs::read(&p).map_err(|e| e.to_string())?;
        v.push((p.file_name().unwrap().to_string_lossy().into_owned(), bytes));
    }
    v.sort();
    Ok(v)
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let config = "splits = [0.5, 0.25, 0.25]\n\
        [task]\nnum_instances = 200\nk = 6\nd = 5\nseed = 9\nreward_noise = 0.1\nlogger_quality = 0.6\n\
        [train]\nkind = \"cdc\"\nepochs = 30\nbatch_size = 20\nearly_stop_patience = 5\ninit = \"logger\"\n";
    fs::write(root.join("c.toml"), config).map_err(|e| e.to_string())?;

    let commands: Vec<(&str, Vec<String>)> = vec![
        (
            "generate-log",
            vec!["generate-log", "--config", "c.toml", "--out", "{o}"]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "train",
            [
                "train",
                "--config",
                "c.toml",
                "--log",
                "gen-1/train.jsonl",
                "--validation",
                "gen-1/validation.jsonl",
                "--truth",
                "gen-1/truth.json",
                "--logger",
                "gen-1/logger.json",
                "--out",
                "{o}",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "evaluate",
            [
                "evaluate",
                "--params",
                "train-1/params.json",
                "--log",
                "gen-1/validation.jsonl",
                "--log",
                "gen-1/test.jsonl",
                "--truth",
                "gen-1/truth.json",
                "--logger",
                "gen-1/logger.json",
                "--out",
                "{o}",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "grad-check",
            ["grad-check", "--seed", "3", "--count", "20", "--out", "{o}"]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "degeneracy-probe",
            [
                "degeneracy-probe",
                "--seed",
                "3",
                "--count",
                "20",
                "--out",
                "{o}",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
    ];
    let short = |name: &str| match name {
        "generate-log" => "gen",
        "train" => "train",
        "evaluate" => "eval",
        "grad-check" => "grad",
        _ => "probe",
    };
    let mut files = 0;
    for (name, args) in &commands {
        let mut runs = Vec::new();
        for rep in 1..=2 {
            let o = format!("{}-{rep}", short(name));
            let args: Vec<String> = args.iter().map(|a| a.replace("{o}", &o)).collect();
            let argv: Vec<&str> = args.iter().map(String::as_str).collect();
            let stdout = cfl(&argv, root)?;
            let stdout = String::from_utf8_lossy(&stdout).replace(&o, "{o}");
            runs.push((stdout, snapshot(&root.join(&o))?));
        }
        ensure(!runs[0].1.is_empty(), || format!("{name} wrote no files"))?;
        ensure(runs[0] == runs[1], || format!("{name}: reruns differ"))?;
        files += runs[0].1.len();
    }
    Ok(format!(
        "{} commands rerun, {files} output files byte-identical",
        commands.len()
    ))
}

fn main() -> ExitCode {
    assert_eq!(FD_TOLERANCE, GRAD_MAX_REL_ERROR);
    assert_eq!(PROBE_ASSIGNMENTS, PROBE_COUNT);
    assert_eq!(DEGENERATE_VALUE_TOLERANCE, DEGENERATE_TOL);

    let criteria: [Criterion; 8] = [
        (
            "gradient correctness",
            gradient_correctness,
            Some(Duration::from_secs(10)),
        ),
        (
            "unit-probability degeneracy probe",
            unit_probability_probe,
            Some(Duration::from_secs(10)),
        ),
        (
            "max-reward collapse probe",
            max_reward_probe,
            Some(Duration::from_secs(10)),
        ),
        (
            "IPS unbiasedness",
            ips_unbiasedness,
            Some(Duration::from_secs(30)),
        ),
        (
            "degeneracy dynamics",
            degeneracy_dynamics,
            Some(Duration::from_secs(60)),
        ),
        (
            "estimator ordering vs logger",
            table_ordering,
            Some(Duration::from_secs(300)),
        ),
        (
            "identity suite",
            identity_suite,
            Some(Duration::from_secs(5)),
        ),
        ("reproducibility", reproducibility, None),
    ];
    let mut failures = 0;
    for (i, (name, run, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let result = match (result, limit) {
            (Ok(_), Some(l)) if elapsed > *l => Err(format!("took {elapsed:.1?}, limit {l:?}")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("PASS {}. {name} [{elapsed:.2?}]: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {}. {name} [{elapsed:.2?}]: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
