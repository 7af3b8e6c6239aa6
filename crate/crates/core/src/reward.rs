//! Direct reward model `delta_hat(x, y)` and the variance-optimal control
//! scalar `c_hat`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{Instance, Log, PolicyParams};
use crate::error::{Error, Result};
use crate::estimators::{importance_weights, self_normalize};

/// Default L2 penalty for [`RewardModel::fit`].
pub const DEFAULT_RIDGE_LAMBDA: f64 = 1e-3;

/// Below this `Var(Y)` the control variate is treated as constant.
const MIN_CONTROL_VARIANCE: f64 = 1e-12;

/// Anything that can score every candidate of an instance with an
/// estimated reward in `[0, 1]`.
pub trait RewardPredictor {
    fn predict(&self, instance: &Instance, y: usize) -> Result<f64>;
}

/// Linear ridge regression of the logged reward on `phi(x_t, y_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub ridge_lambda: f64,
}

impl RewardModel {
    /// Least squares with an L2 penalty on the weights only. The intercept is
    /// handled by centering, so the penalized system is
    /// `(Xc' Xc + lambda I) w = Xc' yc`.
    pub fn fit(log: &Log, ridge_lambda: f64) -> Result<Self> {
        if !(ridge_lambda >= 0.0 && ridge_lambda.is_finite()) {
            return Err(Error::Config(format!(
                "ridge_lambda must be a non-negative finite number, got {ridge_lambda}"
            )));
        }
        let n = log.len();
        let d = log.dim();
        let x = DMatrix::from_fn(n, d, |i, j| {
            let t = &log.tuples()[i];
            t.instance().candidate(t.chosen()).values()[j]
        });
        let y = DVector::from_iterator(n, log.tuples().iter().map(|t| t.reward()));

        let x_mean = x.row_mean();
        let y_mean = y.mean();
        let mut xc = x;
        for mut row in xc.row_iter_mut() {
            row -= &x_mean;
        }
        let yc = y.add_scalar(-y_mean);

        let mut gram = xc.transpose() * &xc;
        for j in 0..d {
            gram[(j, j)] += ridge_lambda;
        }
        let rhs = xc.transpose() * yc;

        let scale = (0..d).map(|j| gram[(j, j)]).fold(0.0, f64::max).max(1.0);
        let chol = gram
            .clone()
            .cholesky()
            .filter(|c| {
                let l = c.l_dirty();
                (0..d).all(|j| l[(j, j)] * l[(j, j)] > 1e-12 * scale)
            })
            .ok_or_else(|| {
                Error::Fitting(format!(
                    "normal equations are singular (n = {n}, d = {d}, ridge_lambda = {ridge_lambda})"
                ))
            })?;
        let w = chol.solve(&rhs);
        let intercept = y_mean - x_mean.transpose().dot(&w);
        Ok(Self {
            weights: w.iter().copied().collect(),
            intercept,
            ridge_lambda,
        })
    }

    /// Unclipped linear prediction.
    pub fn raw_prediction(&self, instance: &Instance, y: usize) -> Result<f64> {
        if self.weights.len() != instance.dim() {
            return Err(Error::Config(format!(
                "reward model dimension {} does not match feature dimension {}",
                self.weights.len(),
                instance.dim()
            )));
        }
        Ok(self.intercept + instance.candidate(y).dot(&self.weights))
    }

    /// Mean squared error of the raw predictions on the logged pairs.
    pub fn training_loss(&self, log: &Log) -> Result<f64> {
        let mut acc = 0.0;
        for t in log.tuples() {
            let r = self.raw_prediction(t.instance(), t.chosen())? - t.reward();
            acc += r * r;
        }
        Ok(acc / log.len() as f64)
    }
}

impl RewardPredictor for RewardModel {
    fn predict(&self, instance: &Instance, y: usize) -> Result<f64> {
        Ok(self.raw_prediction(instance, y)?.clamp(0.0, 1.0))
    }
}

/// Convenience wrapper over [`RewardPredictor::predict`].
pub fn predict(model: &dyn RewardPredictor, instance: &Instance, y: usize) -> Result<f64> {
    model.predict(instance, y)
}

/// `c_hat = Cov(X, Y) / Var(Y)` with its ingredients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlScalar {
    pub c_hat: f64,
    pub cov_xy: f64,
    pub var_y: f64,
}

/// Sample covariance/variance ratio of paired observations. Falls back to
/// `c_hat = 0` when `Y` is (numerically) constant.
pub fn control_scalar(x: &[f64], y: &[f64]) -> Result<ControlScalar> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(Error::Input(format!(
            "control scalar needs at least 2 paired observations, got {n}"
        )));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        var += (b - my) * (b - my);
    }
    let cov_xy = cov / (n - 1) as f64;
    let var_y = var / (n - 1) as f64;
    let c_hat = if var_y < MIN_CONTROL_VARIANCE {
        0.0
    } else {
        cov_xy / var_y
    };
    Ok(ControlScalar {
        c_hat,
        cov_xy,
        var_y,
    })
}

/// Control scalar for the doubly-controlled objective under `params`, with
/// `X_t = delta_t rho_bar_t` and `Y_t = delta_hat_t rho_bar_t`.
pub fn estimate_c_hat(
    params: &PolicyParams,
    log: &Log,
    model: &dyn RewardPredictor,
) -> Result<ControlScalar> {
    if log.len() < 2 {
        return Err(Error::Input(
            "estimating c_hat needs at least 2 tuples".into(),
        ));
    }
    let bar = self_normalize(&importance_weights(params, log)?)?;
    let mut xs = Vec::with_capacity(log.len());
    let mut ys = Vec::with_capacity(log.len());
    for (t, rb) in log.tuples().iter().zip(&bar) {
        xs.push(t.reward() * rb);
        ys.push(model.predict(t.instance(), t.chosen())? * rb);
    }
    control_scalar(&xs, &ys)
}
