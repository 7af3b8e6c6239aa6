//! Off-policy learning experiments against a logging baseline.
//!
//! Each task is generated, logged once, split into train / validation /
//! test, and every estimator is trained from the logger's weights with early
//! stopping on its own validation objective. Policies are compared by exact
//! expected true reward under their Gibbs distributions on the test
//! instances.

use serde::{Deserialize, Serialize};

use crate::domain::{Log, PolicyParams};
use crate::error::{Error, Result};
use crate::estimators::{check_mode, EstimatorKind};
use crate::optimizer::{evaluate_truth, starting_params, train, BatchSize, Init, TrainConfig};
use crate::simulator::{generate_task, roll_log, split, GroundTruth, TaskSpec};

/// True-reward gap between `params` and the logger on the instances of `log`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub true_reward: f64,
    pub logger_true_reward: f64,
    pub improvement: f64,
}

pub fn improvement_over_logger(
    params: &PolicyParams,
    logger: &PolicyParams,
    log: &Log,
    truth: &GroundTruth,
) -> Result<Improvement> {
    let instances = || log.tuples().iter().map(|t| t.instance());
    let true_reward = evaluate_truth(params, instances(), truth)?;
    let logger_true_reward = evaluate_truth(logger, instances(), truth)?;
    Ok(Improvement {
        true_reward,
        logger_true_reward,
        improvement: true_reward - logger_true_reward,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSpec {
    /// Template for every task; `seed` and `logging` are overridden.
    pub task: TaskSpec,
    /// Template for every run; `kind`, `seed` and `init` are overridden.
    pub train: TrainConfig,
    pub splits: [f64; 3],
    pub num_tasks: usize,
    pub first_seed: u64,
}

impl ComparisonSpec {
    /// 10 tasks with 2000 instances, 20 candidates and 50 features.
    pub fn standard() -> Self {
        Self {
            task: TaskSpec {
                reward_noise: 0.1,
                logger_quality: 0.6,
                ..TaskSpec::new(2000, 20, 50, 0)
            },
            train: TrainConfig {
                learning_rate: 0.1,
                epochs: 50,
                batch_size: BatchSize::Size(100),
                early_stop_patience: 5,
                ..TrainConfig::new(EstimatorKind::CDc)
            },
            splits: [0.5, 0.25, 0.25],
            num_tasks: 10,
            first_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub task_seed: u64,
    pub kind: EstimatorKind,
    pub test: Improvement,
    pub epochs_run: usize,
}

/// Trains every kind in `kinds` on each task. All kinds must need the same
/// log mode.
pub fn run_comparison(
    spec: &ComparisonSpec,
    kinds: &[EstimatorKind],
) -> Result<Vec<ComparisonRow>> {
    let mode = match kinds.first() {
        Some(k) => k.required_mode(),
        None => return Err(Error::Config("no estimators to compare".into())),
    };
    if kinds.iter().any(|k| k.required_mode() != mode) {
        return Err(Error::Config(
            "compared estimators must share one log mode".into(),
        ));
    }
    let mut rows = Vec::with_capacity(spec.num_tasks * kinds.len());
    for t in 0..spec.num_tasks as u64 {
        let seed = spec.first_seed + t;
        let task_spec = TaskSpec {
            seed,
            logging: mode,
            ..spec.task.clone()
        };
        let task = generate_task(&task_spec)?;
        let log = roll_log(&task.instances, &task.truth, &task.logger, seed)?;
        let parts = split(&log, spec.splits, seed)?;
        let test = parts
            .test
            .as_ref()
            .ok_or_else(|| Error::Config("comparison needs a test split".into()))?;
        for &kind in kinds {
            check_mode(kind, &parts.train)?;
            let config = TrainConfig {
                kind,
                seed,
                init: Init::Logger,
                ..spec.train.clone()
            };
            let init = starting_params(&config, parts.train.dim(), Some(&task.logger.params))?;
            let out = train(
                &config,
                &parts.train,
                parts.validation.as_ref(),
                &init,
                None,
            )?;
            rows.push(ComparisonRow {
                task_seed: seed,
                kind,
                test: improvement_over_logger(&out.params, &task.logger.params, test, &task.truth)?,
                epochs_run: out.trace.records.len(),
            });
        }
    }
    Ok(rows)
}

/// Median test improvement of `kind` across the rows.
pub fn median_improvement(rows: &[ComparisonRow], kind: EstimatorKind) -> Option<f64> {
    let mut v: Vec<f64> = rows
        .iter()
        .filter(|r| r.kind == kind)
        .map(|r| r.test.improvement)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len().is_multiple_of(2) {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    })
}
