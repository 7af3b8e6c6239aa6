//! Structured-prediction data model and the Gibbs (softmax log-linear) policy.
//!
//! An [`Instance`] is an input together with its explicit, finite candidate
//! list. Each candidate is described by a dense [`FeatureVector`]; the policy
//! scores candidate `y` as `alpha * w . phi(x, y)` and normalizes over the
//! whole list, so every expectation over the output space is exact.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense feature activations `phi(x, y)` for one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config(
                "feature vector must have dimension >= 1".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(
                "feature vector has a non-finite entry".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, weights: &[f64]) -> f64 {
        dot(&self.0, weights)
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(v: FeatureVector) -> Self {
        v.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// An input `x` with its ordered candidate set `Y(x)`.
///
/// Candidate order is stable: index `i` always names the same output.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    id: u64,
    candidates: Vec<FeatureVector>,
}

impl Instance {
    pub fn new(id: u64, candidates: Vec<FeatureVector>) -> Result<Self> {
        if candidates.len() < 2 {
            return Err(Error::Config(format!(
                "instance {id} needs at least 2 candidates, got {}",
                candidates.len()
            )));
        }
        let d = candidates[0].dim();
        if candidates.iter().any(|c| c.dim() != d) {
            return Err(Error::Config(format!(
                "instance {id} mixes candidate feature dimensions"
            )));
        }
        Ok(Self { id, candidates })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn candidates(&self) -> &[FeatureVector] {
        &self.candidates
    }

    pub fn candidate(&self, y: usize) -> &FeatureVector {
        &self.candidates[y]
    }

    pub fn num_candidates(&self) -> usize {
        self.candidates.len()
    }

    pub fn dim(&self) -> usize {
        self.candidates[0].dim()
    }
}

/// Whether a log was produced by a stochastic logger (with propensities) or
/// a deterministic one (without).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogMode {
    Stochastic,
    Deterministic,
}

impl std::fmt::Display for LogMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LogMode::Stochastic => write!(f, "stochastic"),
            LogMode::Deterministic => write!(f, "deterministic"),
        }
    }
}

impl std::str::FromStr for LogMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(LogMode::Stochastic),
            "deterministic" => Ok(LogMode::Deterministic),
            other => Err(Error::Config(format!("unknown log mode `{other}`"))),
        }
    }
}

/// One logged interaction `(x_t, y_t, delta_t)` plus the optional propensity
/// `mu(y_t | x_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedTuple {
    instance: Arc<Instance>,
    chosen: usize,
    reward: f64,
    propensity: Option<f64>,
}

impl LoggedTuple {
    pub fn new(
        instance: Arc<Instance>,
        chosen: usize,
        reward: f64,
        propensity: Option<f64>,
    ) -> Result<Self> {
        if chosen >= instance.num_candidates() {
            return Err(Error::Input(format!(
                "chosen index {chosen} out of range for instance {} with {} candidates",
                instance.id(),
                instance.num_candidates()
            )));
        }
        if !(0.0..=1.0).contains(&reward) {
            return Err(Error::Input(format!("reward {reward} outside [0, 1]")));
        }
        if let Some(p) = propensity {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Input(format!("propensity {p} outside (0, 1]")));
            }
        }
        Ok(Self {
            instance,
            chosen,
            reward,
            propensity,
        })
    }

    pub fn instance(&self) -> &Instance {
        &self.instance
    }

    pub fn shared_instance(&self) -> &Arc<Instance> {
        &self.instance
    }

    pub fn chosen(&self) -> usize {
        self.chosen
    }

    pub fn reward(&self) -> f64 {
        self.reward
    }

    pub fn propensity(&self) -> Option<f64> {
        self.propensity
    }
}

/// A data log `D = {(x_t, y_t, delta_t)}`, non-empty, with an authoritative
/// mode flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Log {
    tuples: Vec<LoggedTuple>,
    mode: LogMode,
}

impl Log {
    pub fn new(tuples: Vec<LoggedTuple>, mode: LogMode) -> Result<Self> {
        if tuples.is_empty() {
            return Err(Error::Input("log must contain at least one tuple".into()));
        }
        let d = tuples[0].instance.dim();
        if tuples.iter().any(|t| t.instance.dim() != d) {
            return Err(Error::Config("log mixes feature dimensions".into()));
        }
        for (i, t) in tuples.iter().enumerate() {
            match (mode, t.propensity) {
                (LogMode::Stochastic, None) => {
                    return Err(Error::LogConsistency(format!(
                        "tuple {i} of a stochastic log has no propensity"
                    )))
                }
                (LogMode::Deterministic, Some(_)) => {
                    return Err(Error::LogConsistency(format!(
                        "tuple {i} of a deterministic log carries a propensity"
                    )))
                }
                _ => {}
            }
        }
        Ok(Self { tuples, mode })
    }

    pub fn tuples(&self) -> &[LoggedTuple] {
        &self.tuples
    }

    pub fn mode(&self) -> LogMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tuples[0].instance.dim()
    }

    /// Sub-log with the tuples at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let tuples = indices.iter().map(|&i| self.tuples[i].clone()).collect();
        Self::new(tuples, self.mode)
    }

    /// The same tuples re-labelled as a stochastic log with every
    /// propensity set to 1.
    pub fn with_unit_propensities(&self) -> Self {
        let tuples = self
            .tuples
            .iter()
            .map(|t| LoggedTuple {
                propensity: Some(1.0),
                ..t.clone()
            })
            .collect();
        Self {
            tuples,
            mode: LogMode::Stochastic,
        }
    }
}

/// Parameters of the Gibbs policy: weights `w` and smoothing scalar `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub weights: Vec<f64>,
    pub alpha: f64,
}

impl PolicyParams {
    pub fn new(weights: Vec<f64>, alpha: f64) -> Result<Self> {
        let params = Self { weights, alpha };
        params.validate()?;
        Ok(params)
    }

    /// Uniform policy: `w = 0`.
    pub fn zeros(dim: usize, alpha: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], alpha)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("policy weights must be finite".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    fn check_dim(&self, instance: &Instance) -> Result<()> {
        if self.weights.len() != instance.dim() {
            return Err(Error::Config(format!(
                "policy dimension {} does not match feature dimension {}",
                self.weights.len(),
                instance.dim()
            )));
        }
        Ok(())
    }

    fn scores(&self, instance: &Instance) -> Vec<f64> {
        instance
            .candidates()
            .iter()
            .map(|c| self.alpha * c.dot(&self.weights))
            .collect()
    }
}

/// Softmax over raw scores with max-subtraction.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `pi_w(y | x)` for every candidate of `instance`.
pub fn policy_probs(params: &PolicyParams, instance: &Instance) -> Result<Vec<f64>> {
    params.check_dim(instance)?;
    Ok(softmax(&params.scores(instance)))
}

/// Policy expectation of the feature vector, `sum_y phi(x, y) pi_w(y | x)`.
fn expected_features(instance: &Instance, probs: &[f64]) -> Vec<f64> {
    let mut mean = vec![0.0; instance.dim()];
    for (c, &p) in instance.candidates().iter().zip(probs) {
        for (m, v) in mean.iter_mut().zip(c.values()) {
            *m += p * v;
        }
    }
    mean
}

/// `grad_w log pi_w(y | x) = alpha * (phi(x, y) - E_pi[phi])`.
pub fn log_prob_gradient(params: &PolicyParams, instance: &Instance, y: usize) -> Result<Vec<f64>> {
    let probs = policy_probs(params, instance)?;
    if y >= instance.num_candidates() {
        return Err(Error::Input(format!("candidate index {y} out of range")));
    }
    let mean = expected_features(instance, &probs);
    Ok(centered(
        params.alpha,
        instance.candidate(y).values(),
        &mean,
    ))
}

fn centered(alpha: f64, phi: &[f64], mean: &[f64]) -> Vec<f64> {
    phi.iter().zip(mean).map(|(p, m)| alpha * (p - m)).collect()
}

/// Probabilities and log-gradients of the whole candidate set of one
/// instance, sharing a single normalization.
#[derive(Debug, Clone)]
pub struct PolicyEval {
    pub probs: Vec<f64>,
    pub log_grads: Vec<Vec<f64>>,
}

pub fn policy_eval(params: &PolicyParams, instance: &Instance) -> Result<PolicyEval> {
    let probs = policy_probs(params, instance)?;
    let mean = expected_features(instance, &probs);
    let log_grads = instance
        .candidates()
        .iter()
        .map(|c| centered(params.alpha, c.values(), &mean))
        .collect();
    Ok(PolicyEval { probs, log_grads })
}

/// Highest-scoring candidate, lowest index on ties.
pub fn argmax_candidate(params: &PolicyParams, instance: &Instance) -> Result<usize> {
    params.check_dim(instance)?;
    Ok(argmax_lowest(&params.scores(instance)))
}

pub(crate) fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
