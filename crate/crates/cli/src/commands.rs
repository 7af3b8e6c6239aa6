//! Implementations of the subcommands. Each returns a short summary for
//! stdout; all results go to files under the output directory.

use std::fmt::Write as _;
use std::path::Path;

use cfl_core::degeneracy::{
    probe_log, probe_max_reward_collapse, probe_unit_probabilities, ProbeResult, ProbeStatus,
};
use cfl_core::estimators::check_mode;
use cfl_core::experiment::improvement_over_logger;
use cfl_core::gradients::{GradProblem, ProblemSize, FD_TOLERANCE};
use cfl_core::io::{from_json, log_from_str, to_json, write_trace};
use cfl_core::optimizer::starting_params;
use cfl_core::reward::{estimate_c_hat, DEFAULT_RIDGE_LAMBDA};
use cfl_core::simulator::split;
use cfl_core::{
    evaluate_truth, fd_check, generate_task, roll_log, EstimatorKind, GroundTruth, Log, LogMode,
    LoggingPolicy, Objective, PolicyParams, RewardModel, TrainConfig,
};
use serde::de::DeserializeOwned;

use crate::{
    create_dir, read_text, write_text, CliError, EvaluateArgs, ExperimentConfig, GenerateArgs,
    GradCheckArgs, ProbeArgs, TrainArgs,
};

pub const REPORT_HEADER: &str =
    "split,estimator,estimator_value,true_reward,logger_true_reward,improvement";
pub const GRAD_CHECK_HEADER: &str = "family,problem,seed,mode,n,k,d,status,max_rel_error";
pub const PROBE_HEADER: &str =
    "source,mode,probe,status,checks,violations,witness_value,best_competitor,detail";

/// Largest analytic gradient entry still treated as zero for a constant
/// objective.
const CONSTANT_GRADIENT_TOLERANCE: f64 = 1e-12;

fn read_log(path: &Path) -> Result<Log, CliError> {
    log_from_str(&read_text(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    from_json(&read_text(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_text(path, &to_json(value)?)
}

fn write_log(path: &Path, log: &Log) -> Result<(), CliError> {
    write_text(path, &cfl_core::io::log_to_string(log)?)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    s.replace([',', '\n'], ";")
}

pub fn generate_log(args: &GenerateArgs) -> Result<String, CliError> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.task.seed = seed;
    }
    let out = config.output_dir(args.out.as_deref())?;
    let seed = config.task.seed;
    let task = generate_task(&config.task)?;
    let log = roll_log(&task.instances, &task.truth, &task.logger, seed)?;
    let parts = split(&log, config.splits, seed)?;

    create_dir(&out)?;
    let mut summary = String::new();
    for (name, part) in [
        ("train", Some(&parts.train)),
        ("validation", parts.validation.as_ref()),
        ("test", parts.test.as_ref()),
    ] {
        if let Some(part) = part {
            write_log(&out.join(format!("{name}.jsonl")), part)?;
            writeln!(summary, "{name}: {} tuples", part.len()).unwrap();
        }
    }
    write_json(&out.join("truth.json"), &task.truth)?;
    write_json(&out.join("logger.json"), &task.logger)?;
    writeln!(
        summary,
        "{} log written to {}",
        config.task.logging,
        out.display()
    )
    .unwrap();
    Ok(summary)
}

pub fn train(args: &TrainArgs) -> Result<String, CliError> {
    let (mut config, out) = match &args.config {
        Some(path) => {
            let c = ExperimentConfig::load(path)?;
            let out = c.output_dir(args.out.as_deref())?;
            (c.train, out)
        }
        None => {
            let kind = args
                .estimator
                .ok_or_else(|| CliError::Usage("pass --config or --estimator".into()))?;
            let out = args
                .out
                .clone()
                .ok_or_else(|| CliError::Usage("no output directory: pass --out".into()))?;
            (TrainConfig::new(kind), out)
        }
    };
    if let Some(kind) = args.estimator {
        config.kind = kind;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(init) = args.init {
        config.init = init;
    }
    config.validate()?;

    let train_log = read_log(&args.log)?;
    check_mode(config.kind, &train_log)?;
    let validation = args.validation.as_deref().map(read_log).transpose()?;
    let truth: Option<GroundTruth> = args.truth.as_deref().map(read_json).transpose()?;
    let logger: Option<LoggingPolicy> = args.logger.as_deref().map(read_json).transpose()?;
    let init = starting_params(&config, train_log.dim(), logger.as_ref().map(|l| &l.params))?;

    let outcome = cfl_core::train(
        &config,
        &train_log,
        validation.as_ref(),
        &init,
        truth.as_ref(),
    )?;

    create_dir(&out)?;
    write_json(&out.join("params.json"), &outcome.params)?;
    let mut trace = Vec::new();
    write_trace(&mut trace, &outcome.trace)?;
    write_text(
        &out.join("trace.csv"),
        std::str::from_utf8(&trace).expect("trace CSV is ASCII"),
    )?;
    if let Some(model) = &outcome.reward_model {
        write_json(&out.join("reward_model.json"), model)?;
    }

    let mut summary = format!(
        "{} trained for {} epoch(s); outputs in {}\n",
        config.kind,
        outcome.trace.records.len(),
        out.display()
    );
    if let Some(reason) = &outcome.trace.stop_reason {
        writeln!(summary, "stopped: {reason}").unwrap();
    }
    Ok(summary)
}

/// Value of `kind` at `params` on `log`. Direct reward models are fitted on
/// the scored log itself.
fn estimator_value(kind: EstimatorKind, params: &PolicyParams, log: &Log) -> Result<f64, CliError> {
    check_mode(kind, log)?;
    if !kind.uses_reward_model() {
        return Ok(Objective::plain(kind)?.value(params, log)?);
    }
    let model = RewardModel::fit(log, DEFAULT_RIDGE_LAMBDA)?;
    let c_hat = if kind.estimates_c_hat() {
        estimate_c_hat(params, log, &model)?.c_hat
    } else {
        1.0
    };
    Ok(Objective::controlled(kind, &model, c_hat)?.value(params, log)?)
}

pub fn evaluate(args: &EvaluateArgs) -> Result<String, CliError> {
    let params: PolicyParams = read_json(&args.params)?;
    params.validate()?;
    let truth: Option<GroundTruth> = args.truth.as_deref().map(read_json).transpose()?;
    let logger: Option<LoggingPolicy> = args.logger.as_deref().map(read_json).transpose()?;

    let mut csv = format!("{REPORT_HEADER}\n");
    let mut rows = 0usize;
    for path in &args.logs {
        let log = read_log(path)?;
        if log.dim() != params.dim() {
            return Err(CliError::Usage(format!(
                "{}: log has dimension {}, parameters have {}",
                path.display(),
                log.dim(),
                params.dim()
            )));
        }
        let split_name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let kinds: Vec<EstimatorKind> = if args.estimators.is_empty() {
            EstimatorKind::ALL
                .into_iter()
                .filter(|k| k.required_mode() == log.mode())
                .collect()
        } else {
            args.estimators.clone()
        };
        let (true_reward, logger_true_reward, improvement) = match (&truth, &logger) {
            (Some(t), Some(l)) => {
                let imp = improvement_over_logger(&params, &l.params, &log, t)?;
                (
                    Some(imp.true_reward),
                    Some(imp.logger_true_reward),
                    Some(imp.improvement),
                )
            }
            (Some(t), None) => {
                let r = evaluate_truth(&params, log.tuples().iter().map(|x| x.instance()), t)?;
                (Some(r), None, None)
            }
            _ => (None, None, None),
        };
        for kind in kinds {
            let value = estimator_value(kind, &params, &log)?;
            writeln!(
                csv,
                "{},{},{},{},{},{}",
                csv_field(&split_name),
                kind,
                value,
                opt(true_reward),
                opt(logger_true_reward),
                opt(improvement)
            )
            .unwrap();
            rows += 1;
        }
    }
    create_dir(&args.out)?;
    let path = args.out.join("report.csv");
    write_text(&path, &csv)?;
    Ok(format!("{rows} row(s) written to {}\n", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    IpsDpm,
    Reweighted,
    DoublyControlled,
}

impl Family {
    const ALL: [Family; 3] = [Family::IpsDpm, Family::Reweighted, Family::DoublyControlled];

    fn name(self) -> &'static str {
        match self {
            Family::IpsDpm => "ips_dpm",
            Family::Reweighted => "reweighted",
            Family::DoublyControlled => "doubly_controlled",
        }
    }

    fn kind(self, mode: LogMode) -> EstimatorKind {
        use EstimatorKind::*;
        match (self, mode) {
            (Family::IpsDpm, LogMode::Stochastic) => Ips,
            (Family::IpsDpm, LogMode::Deterministic) => Dpm,
            (Family::Reweighted, LogMode::Stochastic) => IpsR,
            (Family::Reweighted, LogMode::Deterministic) => DpmR,
            (Family::DoublyControlled, LogMode::Stochastic) => CDr,
            (Family::DoublyControlled, LogMode::Deterministic) => CDc,
        }
    }
}

/// Largest random problem used by `grad-check`.
pub const GRAD_CHECK_MAX_SIZE: ProblemSize = ProblemSize { n: 10, k: 5, d: 6 };

pub fn grad_check(args: &GradCheckArgs) -> Result<String, CliError> {
    if args.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let sign = if args.inject_wrong_sign { -1.0 } else { 1.0 };
    let mut csv = format!("{GRAD_CHECK_HEADER}\n");
    let mut summary = String::new();
    let mut failures = 0usize;
    for family in Family::ALL {
        let (mut passed, mut failed, mut constant, mut excluded) = (0usize, 0usize, 0usize, 0usize);
        let mut worst: f64 = 0.0;
        for i in 0..args.count {
            let seed = args.seed.wrapping_add(i as u64);
            let mode = if i % 2 == 0 {
                LogMode::Stochastic
            } else {
                LogMode::Deterministic
            };
            let problem = GradProblem::generate_bounded(seed, GRAD_CHECK_MAX_SIZE, mode)?;
            let log = &problem.log;
            let kind = family.kind(mode);
            let objective = if kind.uses_reward_model() {
                Objective::controlled(kind, &problem.model, problem.c_hat)?
            } else {
                Objective::plain(kind)?
            };
            let grad = |p: &PolicyParams| -> cfl_core::Result<Vec<f64>> {
                Ok(objective
                    .gradient(p, log)?
                    .into_iter()
                    .map(|g| sign * g)
                    .collect())
            };
            let k = log.tuples()[0].instance().num_candidates();
            let (status, err) = if family == Family::Reweighted && log.len() == 1 {
                // A single self-normalized weight is 1: the objective is constant.
                let g = grad(&problem.params)?;
                if g.iter().all(|x| x.abs() <= CONSTANT_GRADIENT_TOLERANCE) {
                    constant += 1;
                    ("constant", None)
                } else {
                    failed += 1;
                    ("fail", None)
                }
            } else {
                match fd_check(|p| objective.value(p, log), grad, &problem.params) {
                    Ok(e) if e < FD_TOLERANCE => {
                        passed += 1;
                        worst = worst.max(e);
                        ("pass", Some(e))
                    }
                    Ok(e) => {
                        failed += 1;
                        worst = worst.max(e);
                        ("fail", Some(e))
                    }
                    Err(cfl_core::Error::DegenerateSupport) => {
                        excluded += 1;
                        ("excluded", None)
                    }
                    Err(e) => return Err(e.into()),
                }
            };
            writeln!(
                csv,
                "{},{i},{seed},{mode},{},{k},{},{status},{}",
                family.name(),
                log.len(),
                log.dim(),
                opt(err)
            )
            .unwrap();
        }
        failures += failed;
        writeln!(
            summary,
            "{}: {passed} passed, {failed} failed, {constant} constant-objective, {excluded} excluded (singular); max rel error {worst:e}",
            family.name()
        )
        .unwrap();
    }
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_text(&out.join("grad_check.csv"), &csv)?;
    }
    if failures > 0 {
        return Err(CliError::CheckFailed(format!(
            "{summary}{failures} gradient check(s) at or above {FD_TOLERANCE:e}"
        )));
    }
    Ok(summary)
}

fn probe_row(csv: &mut String, source: &str, mode: LogMode, r: &ProbeResult) {
    let (status, detail) = match &r.status {
        ProbeStatus::Passed => ("passed", r.witness.clone()),
        ProbeStatus::Violated => ("violated", r.witness.clone()),
        ProbeStatus::Skipped(reason) => ("skipped", reason.clone()),
    };
    let num = |v: f64| {
        if v.is_finite() {
            v.to_string()
        } else {
            String::new()
        }
    };
    writeln!(
        csv,
        "{},{mode},{},{status},{},{},{},{},{}",
        csv_field(source),
        r.probe.label(),
        r.checks,
        r.violations,
        num(r.witness_value),
        num(r.best_competitor),
        csv_field(&detail)
    )
    .unwrap();
}

pub fn degeneracy_probe(args: &ProbeArgs) -> Result<String, CliError> {
    let mut logs: Vec<(String, Log)> = Vec::new();
    match &args.log {
        Some(path) => logs.push((path.display().to_string(), read_log(path)?)),
        None => {
            if args.count == 0 {
                return Err(CliError::Usage("--count must be at least 1".into()));
            }
            for mode in [LogMode::Stochastic, LogMode::Deterministic] {
                for i in 0..args.count as u64 {
                    let seed = args.seed.wrapping_add(i);
                    logs.push((format!("sim-{seed}"), probe_log(seed, mode)?));
                }
            }
        }
    }

    let mut csv = format!("{PROBE_HEADER}\n");
    let (mut passed, mut violated) = (0usize, 0usize);
    let mut skipped = Vec::new();
    for (i, (source, log)) in logs.iter().enumerate() {
        let seed = args.seed.wrapping_add(i as u64);
        for r in [
            probe_unit_probabilities(log, seed),
            probe_max_reward_collapse(log, seed),
        ] {
            probe_row(&mut csv, source, log.mode(), &r);
            match &r.status {
                ProbeStatus::Passed => passed += 1,
                ProbeStatus::Violated => violated += 1,
                ProbeStatus::Skipped(reason) => skipped.push(format!(
                    "{source} ({}) {}: {reason}",
                    log.mode(),
                    r.probe.label()
                )),
            }
        }
    }

    let mut summary = format!(
        "{} log(s) probed: {passed} passed, {violated} violated, {} skipped\n",
        logs.len(),
        skipped.len()
    );
    for s in &skipped {
        writeln!(summary, "  skipped {s}").unwrap();
    }
    match &args.out {
        Some(out) => {
            create_dir(out)?;
            write_text(&out.join("probes.csv"), &csv)?;
        }
        None => summary = format!("{csv}{summary}"),
    }
    if violated > 0 {
        return Err(CliError::CheckFailed(format!(
            "{summary}{violated} probe(s) violated"
        )));
    }
    Ok(summary)
}
