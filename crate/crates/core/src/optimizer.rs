//! Stochastic gradient ascent `w <- w + eta * grad V(pi_w)` over any of the
//! objectives, with seeded minibatching and early stopping on held-out
//! logged data.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::domain::{policy_probs, Instance, Log, PolicyParams};
use crate::error::{Error, Result};
use crate::estimators::{check_mode, diagnostics, EstimatorKind, Objective};
use crate::gradients::Normalize;
use crate::reward::{estimate_c_hat, RewardModel, DEFAULT_RIDGE_LAMBDA};
use crate::simulator::GroundTruth;

/// Number of tuples per gradient step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BatchSize {
    #[default]
    Full,
    Size(usize),
}

impl Serialize for BatchSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BatchSize::Full => s.serialize_str("full"),
            BatchSize::Size(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(BatchSize::Size(n as usize)),
            Raw::Text(t) if t == "full" => Ok(BatchSize::Full),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "batch_size must be a positive integer or \"full\", got \"{t}\""
            ))),
        }
    }
}

/// When the control scalar is re-estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CRefresh {
    /// At the start of every epoch, under the current parameters.
    #[default]
    Epoch,
    /// Once, under the initial parameters.
    Once,
}

/// Starting point of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// `w = 0`, the uniform policy.
    #[default]
    Zero,
    /// Seeded `N(0, 0.01^2)` weights.
    Gaussian,
    /// The logging policy's weights (supplied by the caller).
    Logger,
}

fn default_lr() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    100
}
fn default_alpha() -> f64 {
    1.0
}
fn default_ridge() -> f64 {
    DEFAULT_RIDGE_LAMBDA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: EstimatorKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub batch_size: BatchSize,
    #[serde(default)]
    pub seed: u64,
    /// 0 disables early stopping.
    #[serde(default)]
    pub early_stop_patience: usize,
    #[serde(default)]
    pub c_refresh: CRefresh,
    #[serde(default = "default_ridge")]
    pub ridge_lambda: f64,
    #[serde(default)]
    pub normalize: Normalize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub init: Init,
}

impl TrainConfig {
    pub fn new(kind: EstimatorKind) -> Self {
        Self {
            kind,
            learning_rate: default_lr(),
            epochs: default_epochs(),
            batch_size: BatchSize::Full,
            seed: 0,
            early_stop_patience: 0,
            c_refresh: CRefresh::Epoch,
            ridge_lambda: default_ridge(),
            normalize: Normalize::Batch,
            alpha: default_alpha(),
            init: Init::Zero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == BatchSize::Size(0) {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return Err(Error::Config("ridge_lambda must be non-negative".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Initial parameters for [`Init::Zero`] and [`Init::Gaussian`].
pub fn initial_params(init: Init, dim: usize, alpha: f64, seed: u64) -> Result<PolicyParams> {
    match init {
        Init::Zero => PolicyParams::zeros(dim, alpha),
        Init::Gaussian => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = (0..dim)
                .map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            PolicyParams::new(w, alpha)
        }
        Init::Logger => Err(Error::Config(
            "logger initialization needs the logging policy's parameters".into(),
        )),
    }
}

/// Starting parameters for `config`: the logger's weights (at the
/// configured `alpha`) for [`Init::Logger`], otherwise [`initial_params`].
pub fn starting_params(
    config: &TrainConfig,
    dim: usize,
    logger: Option<&PolicyParams>,
) -> Result<PolicyParams> {
    match (config.init, logger) {
        (Init::Logger, Some(l)) if l.dim() != dim => Err(Error::Config(format!(
            "logger parameters have dimension {}, log has {dim}",
            l.dim()
        ))),
        (Init::Logger, Some(l)) => PolicyParams::new(l.weights.clone(), config.alpha),
        (init, _) => initial_params(init, dim, config.alpha, config.seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_objective: f64,
    pub validation_objective: Option<f64>,
    pub true_reward: Option<f64>,
    pub mass_on_dmax: f64,
    /// L2 norm of the last gradient step of the epoch.
    pub grad_norm: f64,
    pub c_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
    /// Why training ended before `epochs`, if it did.
    pub stop_reason: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub trace: TrainTrace,
    /// Fitted direct reward model, for the doubly-controlled family.
    pub reward_model: Option<RewardModel>,
}

/// Exact `E_x E_{pi_w}[delta]` over `instances` by enumeration.
pub fn evaluate_truth<'a>(
    params: &PolicyParams,
    instances: impl IntoIterator<Item = &'a Instance>,
    truth: &GroundTruth,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for inst in instances {
        let probs = policy_probs(params, inst)?;
        let rewards = truth.rewards_for(inst)?;
        total += probs.iter().zip(rewards).map(|(p, r)| p * r).sum::<f64>();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Input("no instances to evaluate".into()));
    }
    Ok(total / count as f64)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs gradient ascent on `config.kind`.
///
/// With `early_stop_patience = p > 0` the validation objective is tracked
/// from the initial parameters on; training stops after `p` consecutive
/// epochs without strict improvement and returns the best parameters seen.
/// A degenerate self-normalizer ends training early, keeping the best (or,
/// without early stopping, the last valid) parameters; the reason is kept in
/// the trace.
pub fn train(
    config: &TrainConfig,
    train_log: &Log,
    validation_log: Option<&Log>,
    initial_params: &PolicyParams,
    truth: Option<&GroundTruth>,
) -> Result<TrainOutcome> {
    config.validate()?;
    initial_params.validate()?;
    check_mode(config.kind, train_log)?;
    if initial_params.dim() != train_log.dim() {
        return Err(Error::Config(format!(
            "initial parameters have dimension {}, log has {}",
            initial_params.dim(),
            train_log.dim()
        )));
    }
    if let Some(v) = validation_log {
        check_mode(config.kind, v)?;
        if v.dim() != train_log.dim() {
            return Err(Error::Config(
                "validation log dimension differs from training log".into(),
            ));
        }
    }
    if config.early_stop_patience > 0 && validation_log.is_none() {
        return Err(Error::Config(
            "early stopping needs a validation log".into(),
        ));
    }
    let n = train_log.len();
    let batch = match config.batch_size {
        BatchSize::Full => n,
        BatchSize::Size(b) if b > n => {
            return Err(Error::Config(format!(
                "batch_size {b} exceeds log size {n}"
            )))
        }
        BatchSize::Size(b) => b,
    };

    let reward_model = if config.kind.uses_reward_model() {
        Some(RewardModel::fit(train_log, config.ridge_lambda)?)
    } else {
        None
    };
    let objective_at = |c_hat: f64| -> Result<Objective<'_>> {
        match &reward_model {
            Some(m) => Objective::controlled(config.kind, m, c_hat),
            None => Objective::plain(config.kind),
        }
    };
    let estimate_c = |params: &PolicyParams| -> Result<f64> {
        match &reward_model {
            Some(m) if config.kind.estimates_c_hat() => {
                Ok(estimate_c_hat(params, train_log, m)?.c_hat)
            }
            _ => Ok(1.0),
        }
    };

    let mut params = initial_params.clone();
    let mut trace = TrainTrace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();

    let early = config.early_stop_patience > 0;
    let mut c_hat = match estimate_c(&params) {
        Ok(c) => c,
        Err(Error::DegenerateSupport) => {
            trace.stop_reason = Some("degenerate support at initialization".into());
            return Ok(TrainOutcome {
                params,
                trace,
                reward_model,
            });
        }
        Err(e) => return Err(e),
    };
    let mut best = if early {
        let v = objective_at(c_hat)?.value(&params, validation_log.expect("checked"))?;
        Some((v, params.clone()))
    } else {
        None
    };
    let mut stale = 0usize;

    for epoch in 1..=config.epochs {
        let before = params.clone();
        let step = (|| -> Result<EpochRecord> {
            if epoch > 1 && config.c_refresh == CRefresh::Epoch {
                c_hat = estimate_c(&params)?;
            }
            let objective = objective_at(c_hat)?;
            if batch < n {
                order.shuffle(&mut rng);
            }
            let mut grad_norm = 0.0;
            for chunk in order.chunks(batch) {
                let mut idx = chunk.to_vec();
                idx.sort_unstable();
                let g = objective.batch_gradient(&params, train_log, &idx, config.normalize)?;
                for (w, gj) in params.weights.iter_mut().zip(&g) {
                    let delta = config.learning_rate * gj;
                    if delta != 0.0 {
                        *w += delta;
                    }
                }
                if params.weights.iter().any(|w| !w.is_finite()) {
                    return Err(Error::Config(
                        "parameters diverged to non-finite values".into(),
                    ));
                }
                grad_norm = norm(&g);
            }
            let validation_objective = validation_log
                .map(|v| objective.value(&params, v))
                .transpose()?;
            Ok(EpochRecord {
                epoch,
                train_objective: objective.value(&params, train_log)?,
                validation_objective,
                true_reward: truth
                    .map(|t| {
                        evaluate_truth(&params, train_log.tuples().iter().map(|x| x.instance()), t)
                    })
                    .transpose()?,
                mass_on_dmax: diagnostics(&params, train_log)?.mass_on_dmax,
                grad_norm,
                c_hat: objective.c_hat(),
            })
        })();

        let record = match step {
            Ok(r) => r,
            Err(Error::DegenerateSupport) => {
                params = before;
                trace.stop_reason = Some(format!("degenerate support in epoch {epoch}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let val = record.validation_objective;
        trace.records.push(record);

        if let (Some((best_val, best_params)), Some(v)) = (best.as_mut(), val) {
            if v > *best_val {
                *best_val = v;
                *best_params = params.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.early_stop_patience {
                    trace.stop_reason = Some(format!(
                        "early stop after epoch {epoch}: {stale} epochs without validation improvement"
                    ));
                    break;
                }
            }
        }
    }

    let params = match best {
        Some((_, p)) => p,
        None => params,
    };
    Ok(TrainOutcome {
        params,
        trace,
        reward_model,
    })
}
