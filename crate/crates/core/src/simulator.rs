//! Synthetic bandit structured-prediction tasks with known ground truth.
//!
//! A hidden weight vector `w*` defines the true reward of every candidate as
//! `clip(sigmoid(w* . phi) + noise, 0, 1)`. The logging policy is a Gibbs
//! policy whose weights interpolate between `w*` and an unrelated direction,
//! mimicking a system trained out of domain and deployed in domain.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{
    argmax_candidate, policy_probs, FeatureVector, Instance, Log, LogMode, LoggedTuple,
    PolicyParams,
};
use crate::error::{Error, Result};

// Independent random streams derived from one task seed.
const STREAM_TRUTH: u64 = 1;
const STREAM_LOGGER: u64 = 2;
const STREAM_FEATURES: u64 = 3;
const STREAM_NOISE: u64 = 4;
const STREAM_ROLL: u64 = 5;

/// Reward noise is rounded to this grid.
const NOISE_QUANTUM: f64 = 1e-6;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn default_alpha() -> f64 {
    1.0
}

fn default_logging() -> LogMode {
    LogMode::Deterministic
}

fn default_signal() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub num_instances: usize,
    /// Candidates per instance.
    pub k: usize,
    /// Feature dimension.
    pub d: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian reward noise.
    pub reward_noise: f64,
    /// 1 gives an oracle logger, 0 an unrelated one.
    pub logger_quality: f64,
    #[serde(default = "default_alpha")]
    pub logger_alpha: f64,
    #[serde(default = "default_logging")]
    pub logging: LogMode,
    /// Expected norm of the hidden weights, i.e. the standard deviation of
    /// the true score `w* . phi`.
    #[serde(default = "default_signal")]
    pub signal: f64,
}

impl TaskSpec {
    pub fn new(num_instances: usize, k: usize, d: usize, seed: u64) -> Self {
        Self {
            num_instances,
            k,
            d,
            seed,
            reward_noise: 0.0,
            logger_quality: 0.5,
            logger_alpha: default_alpha(),
            logging: default_logging(),
            signal: default_signal(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_instances == 0 || self.d == 0 {
            return Err(Error::Config("num_instances and d must be positive".into()));
        }
        if self.k < 2 {
            return Err(Error::Config(format!(
                "k must be at least 2, got {}",
                self.k
            )));
        }
        if !(0.0..=1.0).contains(&self.reward_noise) {
            return Err(Error::Config(format!(
                "reward_noise must lie in [0, 1], got {}",
                self.reward_noise
            )));
        }
        if !(0.0..=1.0).contains(&self.logger_quality) {
            return Err(Error::Config(format!(
                "logger_quality must lie in [0, 1], got {}",
                self.logger_quality
            )));
        }
        if !(self.logger_alpha > 0.0 && self.logger_alpha.is_finite()) {
            return Err(Error::Config("logger_alpha must be positive".into()));
        }
        if !(self.signal >= 0.0 && self.signal.is_finite()) {
            return Err(Error::Config("signal must be non-negative".into()));
        }
        Ok(())
    }
}

/// Hidden reward weights and the true reward of every candidate, indexed by
/// instance id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub hidden_weights: Vec<f64>,
    pub rewards: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn rewards_for(&self, instance: &Instance) -> Result<&[f64]> {
        let rewards = self.rewards.get(instance.id() as usize).ok_or_else(|| {
            Error::Input(format!("no ground truth for instance {}", instance.id()))
        })?;
        if rewards.len() != instance.num_candidates() {
            return Err(Error::Input(format!(
                "ground truth for instance {} has {} rewards for {} candidates",
                instance.id(),
                rewards.len(),
                instance.num_candidates()
            )));
        }
        Ok(rewards)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggingPolicy {
    pub params: PolicyParams,
    pub mode: LogMode,
}

#[derive(Debug, Clone)]
pub struct Task {
    pub instances: Vec<Arc<Instance>>,
    pub truth: GroundTruth,
    pub logger: LoggingPolicy,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn generate_task(spec: &TaskSpec) -> Result<Task> {
    spec.validate()?;
    let scale = spec.signal / (spec.d as f64).sqrt();
    let hidden = gaussian_vec(&mut rng_for(spec.seed, STREAM_TRUTH), spec.d, scale);
    let perturbation = gaussian_vec(&mut rng_for(spec.seed, STREAM_LOGGER), spec.d, scale);
    let q = spec.logger_quality;
    let logger_weights = hidden
        .iter()
        .zip(&perturbation)
        .map(|(h, e)| q * h + (1.0 - q) * e)
        .collect();
    let logger = LoggingPolicy {
        params: PolicyParams::new(logger_weights, spec.logger_alpha)?,
        mode: spec.logging,
    };

    let mut feature_rng = rng_for(spec.seed, STREAM_FEATURES);
    let mut noise_rng = rng_for(spec.seed, STREAM_NOISE);
    let mut instances = Vec::with_capacity(spec.num_instances);
    let mut rewards = Vec::with_capacity(spec.num_instances);
    for id in 0..spec.num_instances {
        let candidates = (0..spec.k)
            .map(|_| FeatureVector::new(gaussian_vec(&mut feature_rng, spec.d, 1.0)))
            .collect::<Result<Vec<_>>>()?;
        let inst = Instance::new(id as u64, candidates)?;
        let row = inst
            .candidates()
            .iter()
            .map(|c| {
                let noise = if spec.reward_noise > 0.0 {
                    let raw = spec.reward_noise * noise_rng.sample::<f64, _>(StandardNormal);
                    (raw / NOISE_QUANTUM).round() * NOISE_QUANTUM
                } else {
                    0.0
                };
                (sigmoid(c.dot(&hidden)) + noise).clamp(0.0, 1.0)
            })
            .collect();
        instances.push(Arc::new(inst));
        rewards.push(row);
    }
    Ok(Task {
        instances,
        truth: GroundTruth {
            hidden_weights: hidden,
            rewards,
        },
        logger,
    })
}

/// Draws one index from `probs` by inversion, never returning a
/// zero-probability entry.
fn sample_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            cum += p;
            if u < cum {
                return i;
            }
        }
    }
    last_positive
}

/// One logged tuple per instance. Deterministic loggers pick the argmax
/// (lowest index on ties) and record no propensity; stochastic loggers
/// sample from `pi_mu` and record `mu(y_t | x_t)`.
pub fn roll_log(
    instances: &[Arc<Instance>],
    truth: &GroundTruth,
    logger: &LoggingPolicy,
    seed: u64,
) -> Result<Log> {
    let mut rng = rng_for(seed, STREAM_ROLL);
    let mut tuples = Vec::with_capacity(instances.len());
    for inst in instances {
        let rewards = truth.rewards_for(inst)?;
        let (chosen, propensity) = match logger.mode {
            LogMode::Deterministic => (argmax_candidate(&logger.params, inst)?, None),
            LogMode::Stochastic => {
                let probs = policy_probs(&logger.params, inst)?;
                let y = sample_index(&mut rng, &probs);
                (y, Some(probs[y]))
            }
        };
        tuples.push(LoggedTuple::new(
            inst.clone(),
            chosen,
            rewards[chosen],
            propensity,
        )?);
    }
    Log::new(tuples, logger.mode)
}

/// Train / validation / test partition. A zero fraction yields `None`.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Log,
    pub validation: Option<Log>,
    pub test: Option<Log>,
}

/// Seeded disjoint partition. Validation and test sizes are
/// `round(n * fraction)`, train takes the remainder; each part keeps log
/// order.
pub fn split(log: &Log, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(*f >= 0.0 && f.is_finite())) || fractions[0] <= 0.0 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative with a positive train share, got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {total}"
        )));
    }
    let n = log.len();
    let n_val = (n as f64 * fractions[1]).round() as usize;
    let n_test = (n as f64 * fractions[2]).round() as usize;
    if n_val + n_test >= n {
        return Err(Error::Input(format!(
            "split of {n} tuples leaves no training data"
        )));
    }
    for (name, f, size) in [
        ("validation", fractions[1], n_val),
        ("test", fractions[2], n_test),
    ] {
        if f > 0.0 && size == 0 {
            return Err(Error::Input(format!("{name} split of {n} tuples is empty")));
        }
    }
    let n_train = n - n_val - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let part = |range: std::ops::Range<usize>| -> Result<Option<Log>> {
        if range.is_empty() {
            return Ok(None);
        }
        let mut idx = order[range].to_vec();
        idx.sort_unstable();
        log.subset(&idx).map(Some)
    };
    Ok(Split {
        train: part(0..n_train)?.expect("non-empty train split"),
        validation: part(n_train..n_train + n_val)?,
        test: part(n_train + n_val..n)?,
    })
}
