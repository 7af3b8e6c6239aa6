//! Counterfactual objectives over a logged dataset.
//!
//! Every estimator is built from the per-tuple importance weight `rho`:
//! `pi_w(y_t | x_t)` on deterministic logs and `pi_w(y_t | x_t) / mu_t` on
//! stochastic logs. The reweighted variants self-normalize `rho` over the
//! log, and the doubly-controlled family adds a direct reward model summed
//! over the full candidate set.
//!
//! Sums run sequentially in log order so results are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::degeneracy::partition_rewards;
use crate::domain::{policy_probs, Log, LogMode, LoggedTuple, PolicyParams};
use crate::error::{Error, Result};
use crate::reward::RewardPredictor;

/// The eight objectives. The first of each pair of names is the stochastic
/// (propensity-corrected) variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "ips")]
    Ips,
    #[serde(rename = "dpm")]
    Dpm,
    #[serde(rename = "ips+r")]
    IpsR,
    #[serde(rename = "dpm+r")]
    DpmR,
    #[serde(rename = "dr")]
    Dr,
    #[serde(rename = "dc")]
    Dc,
    #[serde(rename = "cdr")]
    CDr,
    #[serde(rename = "cdc")]
    CDc,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 8] = [
        EstimatorKind::Ips,
        EstimatorKind::Dpm,
        EstimatorKind::IpsR,
        EstimatorKind::DpmR,
        EstimatorKind::Dr,
        EstimatorKind::Dc,
        EstimatorKind::CDr,
        EstimatorKind::CDc,
    ];

    pub fn required_mode(self) -> LogMode {
        match self {
            EstimatorKind::Ips | EstimatorKind::IpsR | EstimatorKind::Dr | EstimatorKind::CDr => {
                LogMode::Stochastic
            }
            _ => LogMode::Deterministic,
        }
    }

    /// Self-normalized (`+R`) or doubly-controlled; both use `rho_bar`.
    pub fn is_reweighted(self) -> bool {
        !matches!(self, EstimatorKind::Ips | EstimatorKind::Dpm)
    }

    pub fn uses_reward_model(self) -> bool {
        matches!(
            self,
            EstimatorKind::Dr | EstimatorKind::Dc | EstimatorKind::CDr | EstimatorKind::CDc
        )
    }

    /// Whether the control scalar is estimated rather than fixed at 1.
    pub fn estimates_c_hat(self) -> bool {
        matches!(self, EstimatorKind::CDr | EstimatorKind::CDc)
    }

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Ips => "ips",
            EstimatorKind::Dpm => "dpm",
            EstimatorKind::IpsR => "ips+r",
            EstimatorKind::DpmR => "dpm+r",
            EstimatorKind::Dr => "dr",
            EstimatorKind::Dc => "dc",
            EstimatorKind::CDr => "cdr",
            EstimatorKind::CDc => "cdc",
        }
    }

    fn display_name(self) -> &'static str {
        match self {
            EstimatorKind::Ips => "IPS",
            EstimatorKind::Dpm => "DPM",
            EstimatorKind::IpsR => "IPS+R",
            EstimatorKind::DpmR => "DPM+R",
            EstimatorKind::Dr => "DR",
            EstimatorKind::Dc => "DC",
            EstimatorKind::CDr => "cDR",
            EstimatorKind::CDc => "cDC",
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.display_name())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['_', '-'], "+");
        let kind = match norm.as_str() {
            "ips" => EstimatorKind::Ips,
            "dpm" => EstimatorKind::Dpm,
            "ips+r" | "ipsr" => EstimatorKind::IpsR,
            "dpm+r" | "dpmr" => EstimatorKind::DpmR,
            "dr" => EstimatorKind::Dr,
            "dc" => EstimatorKind::Dc,
            "cdr" | "c+dr" => EstimatorKind::CDr,
            "cdc" | "c+dc" => EstimatorKind::CDc,
            _ => return Err(Error::Config(format!("unknown estimator `{s}`"))),
        };
        Ok(kind)
    }
}

/// Rejects running an estimator on a log of the other mode.
pub fn check_mode(kind: EstimatorKind, log: &Log) -> Result<()> {
    match (kind.required_mode(), log.mode()) {
        (LogMode::Stochastic, LogMode::Deterministic) => Err(Error::LogConsistency(format!(
            "estimator {kind} requires logged propensities, but the log is deterministic"
        ))),
        (LogMode::Deterministic, LogMode::Stochastic) => Err(Error::LogConsistency(format!(
            "estimator {kind} is for deterministic logs; use its propensity-corrected variant on a stochastic log"
        ))),
        _ => Ok(()),
    }
}

/// Importance weight of one tuple under `mode`.
pub fn rho(params: &PolicyParams, tuple: &LoggedTuple, mode: LogMode) -> Result<f64> {
    let pi = policy_probs(params, tuple.instance())?[tuple.chosen()];
    rho_from(pi, tuple, mode)
}

pub(crate) fn rho_from(pi: f64, tuple: &LoggedTuple, mode: LogMode) -> Result<f64> {
    match mode {
        LogMode::Deterministic => Ok(pi),
        LogMode::Stochastic => match tuple.propensity() {
            Some(mu) => Ok(pi / mu),
            None => Err(Error::LogConsistency(
                "stochastic weighting needs a logged propensity".into(),
            )),
        },
    }
}

/// `rho_t` for every tuple of the log, in log order.
pub fn importance_weights(params: &PolicyParams, log: &Log) -> Result<Vec<f64>> {
    log.tuples()
        .iter()
        .map(|t| rho(params, t, log.mode()))
        .collect()
}

fn rewards(log: &Log) -> Vec<f64> {
    log.tuples().iter().map(|t| t.reward()).collect()
}

pub(crate) fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

/// `rho_bar_t = n rho_t / sum_u rho_u`, so that `(1/n) sum rho_bar = 1`.
pub fn self_normalize(rhos: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = rhos.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateSupport);
    }
    let n = rhos.len() as f64;
    Ok(rhos.iter().map(|r| n * r / total).collect())
}

/// `(1/n) sum delta_t rho_t` on raw rewards and weights.
pub fn ips_value(rewards: &[f64], rhos: &[f64]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::Input("empty log".into()));
    }
    Ok(mean(
        rewards.iter().zip(rhos).map(|(d, r)| d * r),
        rewards.len(),
    ))
}

/// `(1/n) sum delta_t rho_bar_t` on raw rewards and weights.
pub fn reweighted_value(rewards: &[f64], rhos: &[f64]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::Input("empty log".into()));
    }
    let bar = self_normalize(rhos)?;
    Ok(mean(
        rewards.iter().zip(&bar).map(|(d, r)| d * r),
        rewards.len(),
    ))
}

/// IPS on stochastic logs, DPM on deterministic ones.
pub fn value_ips_dpm(params: &PolicyParams, log: &Log) -> Result<f64> {
    ips_value(&rewards(log), &importance_weights(params, log)?)
}

/// IPS+R on stochastic logs, DPM+R on deterministic ones.
pub fn value_reweighted(params: &PolicyParams, log: &Log) -> Result<f64> {
    reweighted_value(&rewards(log), &importance_weights(params, log)?)
}

/// Doubly-controlled objective with control scalar `c_hat`. The inner sum
/// over the candidate set always weights by `pi_w(y | x_t)`; the propensity
/// correction only enters through `rho_bar` of the logged output.
pub fn value_doubly_controlled(
    params: &PolicyParams,
    log: &Log,
    model: &dyn RewardPredictor,
    c_hat: f64,
) -> Result<f64> {
    let n = log.len();
    let mut rhos = Vec::with_capacity(n);
    let mut direct = Vec::with_capacity(n);
    for t in log.tuples() {
        let probs = policy_probs(params, t.instance())?;
        rhos.push(rho_from(probs[t.chosen()], t, log.mode())?);
        let mut expected = 0.0;
        for (y, p) in probs.iter().enumerate() {
            expected += model.predict(t.instance(), y)? * p;
        }
        direct.push((model.predict(t.instance(), t.chosen())?, expected));
    }
    let bar = self_normalize(&rhos)?;
    let terms =
        log.tuples()
            .iter()
            .zip(&bar)
            .zip(&direct)
            .map(|((t, rb), (logged_hat, expected))| {
                (t.reward() - c_hat * logged_hat) * rb + c_hat * expected
            });
    Ok(mean(terms, n))
}

/// A fully specified objective: an estimator kind plus, for the
/// doubly-controlled family, the reward model and control scalar.
#[derive(Clone, Copy)]
pub struct Objective<'a> {
    pub kind: EstimatorKind,
    pub control: Option<(&'a dyn RewardPredictor, f64)>,
}

impl std::fmt::Debug for Objective<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Objective")
            .field("kind", &self.kind)
            .field("c_hat", &self.control.map(|(_, c)| c))
            .finish()
    }
}

impl<'a> Objective<'a> {
    /// Objective without a reward model (IPS, DPM and their `+R` variants).
    pub fn plain(kind: EstimatorKind) -> Result<Self> {
        if kind.uses_reward_model() {
            return Err(Error::Config(format!(
                "estimator {kind} needs a reward model"
            )));
        }
        Ok(Self {
            kind,
            control: None,
        })
    }

    /// Doubly-controlled objective. DR and DC fix the control scalar at 1;
    /// `c_hat` is used only by the estimated-control variants.
    pub fn controlled(
        kind: EstimatorKind,
        model: &'a dyn RewardPredictor,
        c_hat: f64,
    ) -> Result<Self> {
        if !kind.uses_reward_model() {
            return Err(Error::Config(format!(
                "estimator {kind} takes no reward model"
            )));
        }
        if !c_hat.is_finite() {
            return Err(Error::Config(format!(
                "control scalar must be finite, got {c_hat}"
            )));
        }
        let c = if kind.estimates_c_hat() { c_hat } else { 1.0 };
        Ok(Self {
            kind,
            control: Some((model, c)),
        })
    }

    pub fn c_hat(&self) -> Option<f64> {
        self.control.map(|(_, c)| c)
    }

    pub fn value(&self, params: &PolicyParams, log: &Log) -> Result<f64> {
        check_mode(self.kind, log)?;
        match (self.kind.is_reweighted(), self.control) {
            (false, _) => value_ips_dpm(params, log),
            (true, None) => value_reweighted(params, log),
            (true, Some((model, c))) => value_doubly_controlled(params, log, model, c),
        }
    }
}

/// Diagnostics of the importance weights under `params`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDiagnostics {
    pub normalized_weights: Vec<f64>,
    /// `sum_{t in D^max} rho_bar_t / n`.
    pub mass_on_dmax: f64,
    /// `(sum rho)^2 / sum rho^2`.
    pub effective_sample_size: f64,
}

pub fn diagnostics(params: &PolicyParams, log: &Log) -> Result<WeightDiagnostics> {
    let rhos = importance_weights(params, log)?;
    weight_diagnostics(&rewards(log), &rhos)
}

pub fn weight_diagnostics(rewards: &[f64], rhos: &[f64]) -> Result<WeightDiagnostics> {
    if rewards.is_empty() {
        return Err(Error::Input("empty log".into()));
    }
    let bar = self_normalize(rhos)?;
    let n = rhos.len();
    let partition = partition_rewards(rewards);
    let mass_on_dmax = mean(partition.dmax_indices.iter().map(|&i| bar[i]), n);
    let total: f64 = rhos.iter().sum();
    let sq: f64 = rhos.iter().map(|r| r * r).sum();
    Ok(WeightDiagnostics {
        normalized_weights: bar,
        mass_on_dmax,
        effective_sample_size: total * total / sq,
    })
}

/// Objective value together with its weight diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub kind: EstimatorKind,
    pub value: f64,
    /// `rho_bar` for reweighted kinds, raw `rho` otherwise.
    pub weights_used: Vec<f64>,
    pub mass_on_dmax: f64,
    pub effective_sample_size: f64,
}

pub fn report(
    objective: &Objective<'_>,
    params: &PolicyParams,
    log: &Log,
) -> Result<EstimatorReport> {
    let value = objective.value(params, log)?;
    let rhos = importance_weights(params, log)?;
    let diag = weight_diagnostics(&rewards(log), &rhos)?;
    let weights_used = if objective.kind.is_reweighted() {
        diag.normalized_weights
    } else {
        rhos
    };
    Ok(EstimatorReport {
        kind: objective.kind,
        value,
        weights_used,
        mass_on_dmax: diag.mass_on_dmax,
        effective_sample_size: diag.effective_sample_size,
    })
}
