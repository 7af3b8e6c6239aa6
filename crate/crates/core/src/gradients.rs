//! Analytic gradients of the counterfactual objectives, and a central
//! finite-difference harness to check them.
//!
//! For the self-normalized family the subtracted mean is the
//! `rho_bar`-weighted mean score, `(1/n) sum_u rho_bar_u grad log pi_u`.
//! With `rho_bar` normalized to `(1/n) sum rho_bar = 1` this is exactly the
//! derivative of the ratio form `sum delta rho / sum rho`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use std::sync::Arc;

use crate::domain::{
    policy_eval, FeatureVector, Instance, Log, LogMode, LoggedTuple, PolicyEval, PolicyParams,
};
use crate::error::{Error, Result};
use crate::estimators::{check_mode, rho_from, EstimatorKind, Objective};
use crate::reward::{estimate_c_hat, RewardModel, RewardPredictor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Acceptance threshold on [`fd_check`]'s error.
pub const FD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub kind: EstimatorKind,
    pub gradient: Vec<f64>,
    pub fd_max_rel_error: Option<f64>,
}

/// How the self-normalizer is formed when the gradient is taken over a
/// subset (minibatch) of the log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalize {
    /// `rho_bar` and the mean score are computed within the batch.
    #[default]
    Batch,
    /// `rho_bar` and the mean score are computed over the whole log.
    Full,
}

struct TupleEval {
    eval: PolicyEval,
    rho: f64,
}

fn evaluate(params: &PolicyParams, log: &Log) -> Result<Vec<TupleEval>> {
    log.tuples()
        .iter()
        .map(|t| {
            let eval = policy_eval(params, t.instance())?;
            let rho = rho_from(eval.probs[t.chosen()], t, log.mode())?;
            Ok(TupleEval { eval, rho })
        })
        .collect()
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (s, v) in acc.iter_mut().zip(x) {
        *s += a * v;
    }
}

/// `(1/n) sum_t delta_t rho_t grad log pi_t`.
pub fn grad_ips_dpm(params: &PolicyParams, log: &Log) -> Result<Vec<f64>> {
    let evals = evaluate(params, log)?;
    let mut acc = vec![0.0; params.dim()];
    for (t, e) in log.tuples().iter().zip(&evals) {
        axpy(&mut acc, t.reward() * e.rho, &e.eval.log_grads[t.chosen()]);
    }
    let n = log.len() as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// Gradient of the reweighted objective.
pub fn grad_reweighted(params: &PolicyParams, log: &Log) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..log.len()).collect();
    controlled_gradient(params, log, &all, &all, None)
}

/// Gradient of the doubly-controlled objective with `c_hat` held fixed.
pub fn grad_doubly_controlled(
    params: &PolicyParams,
    log: &Log,
    model: &dyn RewardPredictor,
    c_hat: f64,
) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..log.len()).collect();
    controlled_gradient(params, log, &all, &all, Some((model, c_hat)))
}

/// Shared routine for the self-normalized and doubly-controlled gradients.
///
/// `rho_bar` and the mean score are formed over `norm_idx`; the returned
/// gradient averages the per-tuple terms over `term_idx`. When both are the
/// whole log this is the exact gradient of the objective.
fn controlled_gradient(
    params: &PolicyParams,
    log: &Log,
    norm_idx: &[usize],
    term_idx: &[usize],
    control: Option<(&dyn RewardPredictor, f64)>,
) -> Result<Vec<f64>> {
    let d = params.dim();
    let tuples = log.tuples();
    let evals: Vec<Option<TupleEval>> = {
        let mut v: Vec<Option<TupleEval>> = (0..log.len()).map(|_| None).collect();
        for &i in norm_idx.iter().chain(term_idx) {
            if v[i].is_none() {
                let t = &tuples[i];
                let eval = policy_eval(params, t.instance())?;
                let rho = rho_from(eval.probs[t.chosen()], t, log.mode())?;
                v[i] = Some(TupleEval { eval, rho });
            }
        }
        v
    };
    let get = |i: usize| evals[i].as_ref().expect("evaluated");

    let total: f64 = norm_idx.iter().map(|&i| get(i).rho).sum();
    if total <= 0.0 {
        return Err(Error::DegenerateSupport);
    }
    let n_norm = norm_idx.len() as f64;
    let rho_bar = |i: usize| n_norm * get(i).rho / total;

    let mut mean_score = vec![0.0; d];
    for &u in norm_idx {
        let e = get(u);
        axpy(
            &mut mean_score,
            rho_bar(u),
            &e.eval.log_grads[tuples[u].chosen()],
        );
    }
    for m in mean_score.iter_mut() {
        *m /= n_norm;
    }

    let c_hat = control.map_or(0.0, |(_, c)| c);
    let mut acc = vec![0.0; d];
    for &i in term_idx {
        let t = &tuples[i];
        let e = get(i);
        let logged_hat = match control {
            Some((model, _)) => model.predict(t.instance(), t.chosen())?,
            None => 0.0,
        };
        let a = (t.reward() - c_hat * logged_hat) * rho_bar(i);
        let g = &e.eval.log_grads[t.chosen()];
        for j in 0..d {
            acc[j] += a * (g[j] - mean_score[j]);
        }
        // the direct-model term is exactly zero when c_hat is
        if let Some((model, c)) = control.filter(|(_, c)| *c != 0.0) {
            for (y, (p, gy)) in e.eval.probs.iter().zip(&e.eval.log_grads).enumerate() {
                axpy(&mut acc, c * model.predict(t.instance(), y)? * p, gy);
            }
        }
    }
    let n = term_idx.len() as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

impl Objective<'_> {
    pub fn gradient(&self, params: &PolicyParams, log: &Log) -> Result<Vec<f64>> {
        check_mode(self.kind, log)?;
        if self.kind.is_reweighted() {
            let all: Vec<usize> = (0..log.len()).collect();
            controlled_gradient(params, log, &all, &all, self.control)
        } else {
            grad_ips_dpm(params, log)
        }
    }

    /// Gradient estimate from the tuples at `batch` (in the given order).
    pub fn batch_gradient(
        &self,
        params: &PolicyParams,
        log: &Log,
        batch: &[usize],
        normalize: Normalize,
    ) -> Result<Vec<f64>> {
        check_mode(self.kind, log)?;
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        if !self.kind.is_reweighted() {
            return grad_ips_dpm(params, &log.subset(batch)?);
        }
        match normalize {
            Normalize::Batch => controlled_gradient(params, log, batch, batch, self.control),
            Normalize::Full => {
                let all: Vec<usize> = (0..log.len()).collect();
                controlled_gradient(params, log, &all, batch, self.control)
            }
        }
    }

    pub fn gradient_report(
        &self,
        params: &PolicyParams,
        log: &Log,
        check: bool,
    ) -> Result<GradientReport> {
        let gradient = self.gradient(params, log)?;
        let fd_max_rel_error = if check {
            Some(fd_check(
                |p| self.value(p, log),
                |p| self.gradient(p, log),
                params,
            )?)
        } else {
            None
        };
        Ok(GradientReport {
            kind: self.kind,
            gradient,
            fd_max_rel_error,
        })
    }
}

/// Central finite differences per coordinate with step [`FD_STEP`]; returns
/// `max_j |analytic_j - numeric_j| / max(1, |analytic_j|)`.
///
/// Errors from `value_fn` (e.g. a vanishing self-normalizer) are returned,
/// not masked.
pub fn fd_check<V, G>(value_fn: V, grad_fn: G, params: &PolicyParams) -> Result<f64>
where
    V: Fn(&PolicyParams) -> Result<f64>,
    G: Fn(&PolicyParams) -> Result<Vec<f64>>,
{
    let analytic = grad_fn(params)?;
    if analytic.len() != params.dim() {
        return Err(Error::Config(
            "gradient dimension does not match parameters".into(),
        ));
    }
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (j, a) in analytic.iter().enumerate() {
        let w = params.weights[j];
        probe.weights[j] = w + FD_STEP;
        let plus = value_fn(&probe)?;
        probe.weights[j] = w - FD_STEP;
        let minus = value_fn(&probe)?;
        probe.weights[j] = w;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if !err.is_finite() {
            return Err(Error::Input(format!(
                "non-finite gradient check at coordinate {j}"
            )));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Sizes of a random gradient-check problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemSize {
    pub n: usize,
    pub k: usize,
    pub d: usize,
}

/// A small random log with policy parameters and a reward model, used to
/// check gradients.
#[derive(Debug, Clone)]
pub struct GradProblem {
    pub log: Log,
    pub params: PolicyParams,
    pub model: RewardModel,
    pub c_hat: f64,
}

impl GradProblem {
    /// Draws a problem of exactly `size`. Features, weights and the reward
    /// model are standard-normal-ish, alpha in `[0.5, 2)`, rewards and
    /// propensities uniform.
    pub fn generate(seed: u64, size: ProblemSize, mode: LogMode) -> Result<Self> {
        if size.n == 0 || size.k < 2 || size.d == 0 {
            return Err(Error::Config(format!("invalid problem size {size:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
        let mut tuples = Vec::with_capacity(size.n);
        for i in 0..size.n {
            let candidates = (0..size.k)
                .map(|_| FeatureVector::new((0..size.d).map(|_| normal(&mut rng)).collect()))
                .collect::<Result<Vec<_>>>()?;
            let inst = Arc::new(Instance::new(i as u64, candidates)?);
            let chosen = rng.random_range(0..size.k);
            let reward = rng.random_range(0.0..=1.0);
            let propensity = match mode {
                LogMode::Stochastic => Some(rng.random_range(0.05..=1.0)),
                LogMode::Deterministic => None,
            };
            tuples.push(LoggedTuple::new(inst, chosen, reward, propensity)?);
        }
        let log = Log::new(tuples, mode)?;
        let weights = (0..size.d).map(|_| 0.5 * normal(&mut rng)).collect();
        let alpha = rng.random_range(0.5..2.0);
        let params = PolicyParams::new(weights, alpha)?;
        let model = RewardModel {
            weights: (0..size.d).map(|_| 0.3 * normal(&mut rng)).collect(),
            intercept: rng.random_range(0.2..0.8),
            ridge_lambda: 0.0,
        };
        let c_hat = if size.n >= 2 {
            estimate_c_hat(&params, &log, &model)?.c_hat
        } else {
            1.0
        };
        Ok(Self {
            log,
            params,
            model,
            c_hat,
        })
    }

    /// Draws sizes uniformly from `1..=max.n`, `2..=max.k`, `1..=max.d`.
    pub fn generate_bounded(seed: u64, max: ProblemSize, mode: LogMode) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let size = ProblemSize {
            n: rng.random_range(1..=max.n),
            k: rng.random_range(2..=max.k.max(2)),
            d: rng.random_range(1..=max.d),
        };
        Self::generate(seed, size, mode)
    }
}
