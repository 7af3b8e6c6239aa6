//! Executable probes of the degenerate optima of IPS/DPM and their
//! self-normalized variants.
//!
//! The probes evaluate the estimators on raw per-tuple probability
//! assignments `pi_t`, not on a parametric policy, because the degeneracy
//! statements quantify over arbitrary assignments. [`collapse_run`] then
//! shows the Gibbs-parametrized training dynamics drifting to the same
//! degenerate point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Log, LogMode, PolicyParams};
use crate::error::{Error, Result};
use crate::estimators::{diagnostics, ips_value, reweighted_value, EstimatorKind};
use crate::optimizer::{evaluate_truth, train, TrainConfig, TrainTrace};
use crate::simulator::{generate_task, roll_log, split, GroundTruth, TaskSpec};

/// Random assignments drawn per probe.
pub const PROBE_ASSIGNMENTS: usize = 200;

/// Tolerance on the identity "degenerate value equals delta_max".
pub const DEGENERATE_VALUE_TOLERANCE: f64 = 1e-12;

/// Split of the log indices into the tuples attaining the maximal logged
/// reward and the rest. Membership uses exact float equality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmaxPartition {
    pub dmax_indices: Vec<usize>,
    pub rest_indices: Vec<usize>,
    pub delta_max: f64,
}

pub fn partition_rewards(rewards: &[f64]) -> DmaxPartition {
    let delta_max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (dmax_indices, rest_indices) = (0..rewards.len()).partition(|&i| rewards[i] == delta_max);
    DmaxPartition {
        dmax_indices,
        rest_indices,
        delta_max,
    }
}

pub fn partition_dmax(log: &Log) -> DmaxPartition {
    let rewards: Vec<f64> = log.tuples().iter().map(|t| t.reward()).collect();
    partition_rewards(&rewards)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeKind {
    /// Unnormalized estimators are maximized by `pi_t = 1` on every logged
    /// output.
    UnitProbabilities,
    /// Self-normalized estimators are maximized by putting mass only on the
    /// maximal-reward tuples.
    MaxRewardCollapse,
}

impl ProbeKind {
    pub fn label(self) -> &'static str {
        match self {
            ProbeKind::UnitProbabilities => "unit_probabilities",
            ProbeKind::MaxRewardCollapse => "max_reward_collapse",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "lowercase")]
pub enum ProbeStatus {
    Passed,
    Violated,
    /// The log does not satisfy the statement's hypothesis.
    Skipped(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub probe: ProbeKind,
    pub status: ProbeStatus,
    /// Value at the degenerate witness assignment.
    pub witness_value: f64,
    /// Largest value over the competing assignments.
    pub best_competitor: f64,
    pub checks: usize,
    pub violations: usize,
    pub witness: String,
}

impl ProbeResult {
    pub fn holds(&self) -> bool {
        !matches!(self.status, ProbeStatus::Violated)
    }

    fn skipped(probe: ProbeKind, reason: impl Into<String>) -> Self {
        Self {
            probe,
            status: ProbeStatus::Skipped(reason.into()),
            witness_value: f64::NAN,
            best_competitor: f64::NAN,
            checks: 0,
            violations: 0,
            witness: String::new(),
        }
    }
}

fn rewards_and_propensities(log: &Log) -> (Vec<f64>, Vec<f64>) {
    log.tuples()
        .iter()
        .map(|t| {
            let mu = match log.mode() {
                LogMode::Stochastic => t.propensity().unwrap_or(1.0),
                LogMode::Deterministic => 1.0,
            };
            (t.reward(), mu)
        })
        .unzip()
}

fn weights(pis: &[f64], mus: &[f64]) -> Vec<f64> {
    pis.iter().zip(mus).map(|(p, m)| p / m).collect()
}

/// Uniform on `(0, 1]`.
fn positive_unit(rng: &mut ChaCha8Rng) -> f64 {
    1.0 - rng.random::<f64>()
}

/// IPS (stochastic) or DPM (deterministic) at `pi = 1` versus
/// [`PROBE_ASSIGNMENTS`] assignments that lower at least one `pi_t` below 1.
pub fn probe_unit_probabilities(log: &Log, seed: u64) -> ProbeResult {
    let probe = ProbeKind::UnitProbabilities;
    let (rewards, mus) = rewards_and_propensities(log);
    if rewards.iter().any(|&r| r <= 0.0) {
        return ProbeResult::skipped(probe, "hypothesis needs every logged reward > 0");
    }
    let n = rewards.len();
    let value = |pis: &[f64]| ips_value(&rewards, &weights(pis, &mus)).expect("non-empty log");
    let witness_value = value(&vec![1.0; n]);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best_competitor = f64::NEG_INFINITY;
    let mut violations = 0;
    for _ in 0..PROBE_ASSIGNMENTS {
        // perturb a random non-empty subset below 1, keep the rest at 1
        let mut pis = vec![1.0; n];
        let forced = rng.random_range(0..n);
        for (t, p) in pis.iter_mut().enumerate() {
            if t == forced || rng.random_bool(0.5) {
                *p = rng.random::<f64>();
            }
        }
        let v = value(&pis);
        best_competitor = best_competitor.max(v);
        if v >= witness_value {
            violations += 1;
        }
    }
    ProbeResult {
        probe,
        status: if violations == 0 {
            ProbeStatus::Passed
        } else {
            ProbeStatus::Violated
        },
        witness_value,
        best_competitor,
        checks: PROBE_ASSIGNMENTS,
        violations,
        witness: "pi_t = 1 for every logged tuple".into(),
    }
}

/// IPS+R / DPM+R: every assignment supported only on `D^max` scores exactly
/// `delta_max`; assignments with mass outside `D^max` score strictly less;
/// assignments with no mass on `D^max` score strictly below the degenerate
/// value.
pub fn probe_max_reward_collapse(log: &Log, seed: u64) -> ProbeResult {
    let probe = ProbeKind::MaxRewardCollapse;
    let (rewards, mus) = rewards_and_propensities(log);
    let part = partition_rewards(&rewards);
    if part.delta_max <= 0.0 {
        return ProbeResult::skipped(probe, "hypothesis needs delta_max > 0");
    }
    if part.rest_indices.is_empty() {
        return ProbeResult::skipped(probe, "every tuple attains delta_max, D \\ D^max is empty");
    }
    let n = rewards.len();
    let value = |pis: &[f64]| reweighted_value(&rewards, &weights(pis, &mus));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut checks = 0;
    let mut best_competitor = f64::NEG_INFINITY;
    let mut witness_value = f64::NAN;

    // (a) degenerate assignments: some positive mass on D^max, none elsewhere
    for _ in 0..PROBE_ASSIGNMENTS {
        let mut pis = vec![0.0; n];
        let forced = part.dmax_indices[rng.random_range(0..part.dmax_indices.len())];
        for &t in &part.dmax_indices {
            if t == forced {
                pis[t] = positive_unit(&mut rng);
            } else if rng.random_bool(0.5) {
                pis[t] = rng.random::<f64>();
            }
        }
        checks += 1;
        match value(&pis) {
            Ok(v) => {
                if witness_value.is_nan() {
                    witness_value = v;
                }
                if (v - part.delta_max).abs() > DEGENERATE_VALUE_TOLERANCE {
                    violations += 1;
                }
            }
            Err(_) => violations += 1,
        }
    }

    // (b) positive mass on at least one tuple outside D^max
    // (c) the same with D^max switched off entirely
    for zero_dmax in [false, true] {
        for _ in 0..PROBE_ASSIGNMENTS {
            let mut pis = vec![0.0; n];
            if !zero_dmax {
                for &t in &part.dmax_indices {
                    pis[t] = rng.random::<f64>();
                }
            }
            let forced = part.rest_indices[rng.random_range(0..part.rest_indices.len())];
            for &t in &part.rest_indices {
                if t == forced || rng.random_bool(0.5) {
                    pis[t] = positive_unit(&mut rng);
                }
            }
            checks += 1;
            match value(&pis) {
                Ok(v) => {
                    best_competitor = best_competitor.max(v);
                    if v >= part.delta_max {
                        violations += 1;
                    }
                }
                Err(_) => violations += 1,
            }
        }
    }

    ProbeResult {
        probe,
        status: if violations == 0 {
            ProbeStatus::Passed
        } else {
            ProbeStatus::Violated
        },
        witness_value,
        best_competitor,
        checks,
        violations,
        witness: format!(
            "mass only on the {} tuple(s) with delta_max = {}",
            part.dmax_indices.len(),
            part.delta_max
        ),
    }
}

/// A small simulated log for the probes: 2 to 20 tuples, 2 to 5 candidates,
/// 1 to 6 features, drawn from `seed`.
pub fn probe_log(seed: u64, mode: LogMode) -> Result<Log> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = TaskSpec {
        reward_noise: 0.05,
        logging: mode,
        ..TaskSpec::new(
            rng.random_range(2..=20),
            rng.random_range(2..=5),
            rng.random_range(1..=6),
            seed,
        )
    };
    let task = generate_task(&spec)?;
    roll_log(&task.instances, &task.truth, &task.logger, seed)
}

/// Training and validation logs for a collapse experiment: a deterministic
/// log over `2 * spec.num_instances` instances, split evenly.
pub fn collapse_task(spec: &TaskSpec) -> Result<(Log, Log, GroundTruth)> {
    let doubled = TaskSpec {
        num_instances: 2 * spec.num_instances,
        ..spec.clone()
    };
    let task = generate_task(&doubled)?;
    let log = roll_log(&task.instances, &task.truth, &task.logger, spec.seed)?;
    let parts = split(&log, [0.5, 0.5, 0.0], spec.seed)?;
    let validation = parts.validation.expect("validation share is positive");
    Ok((parts.train, validation, task.truth))
}

#[derive(Debug, Clone)]
pub struct CollapseReport {
    pub trace: TrainTrace,
    pub params: PolicyParams,
    /// Mass on `D^max` of the training log under the returned parameters.
    pub final_mass_on_dmax: f64,
    /// Expected true reward of the returned parameters on the training
    /// instances.
    pub final_true_reward: f64,
}

/// Trains a self-normalized estimator on a small deterministic (or
/// stochastic, for IPS+R) log and records how mass concentrates on `D^max`.
/// Early stopping, when enabled in `config`, uses the companion validation
/// log from [`collapse_task`].
pub fn collapse_run(spec: &TaskSpec, config: &TrainConfig) -> Result<CollapseReport> {
    if !matches!(config.kind, EstimatorKind::DpmR | EstimatorKind::IpsR) {
        return Err(Error::Config(format!(
            "collapse runs use DPM+R or IPS+R, got {}",
            config.kind
        )));
    }
    let spec = TaskSpec {
        logging: config.kind.required_mode(),
        ..spec.clone()
    };
    let (train_log, validation, truth) = collapse_task(&spec)?;
    let init = PolicyParams::zeros(train_log.dim(), config.alpha)?;
    let out = train(config, &train_log, Some(&validation), &init, Some(&truth))?;
    let final_mass_on_dmax = diagnostics(&out.params, &train_log)?.mass_on_dmax;
    let final_true_reward = evaluate_truth(
        &out.params,
        train_log.tuples().iter().map(|t| t.instance()),
        &truth,
    )?;
    Ok(CollapseReport {
        trace: out.trace,
        params: out.params,
        final_mass_on_dmax,
        final_true_reward,
    })
}
