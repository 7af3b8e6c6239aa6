//! Values and gradients on a fixed hand-built log, frozen from an
//! independent float64 autodiff implementation.

use std::sync::Arc;

use cfl_core::estimators::{ips_value, reweighted_value, value_ips_dpm};
use cfl_core::reward::estimate_c_hat;
use cfl_core::{
    policy_probs, EstimatorKind, FeatureVector, Instance, Log, LogMode, LoggedTuple, Objective,
    PolicyParams, RewardModel,
};

const TOL: f64 = 1e-12;

const FEATURES: [[[f64; 2]; 3]; 3] = [
    [[1.0, 0.5], [-0.3, 1.2], [0.8, -1.0]],
    [[0.2, 0.2], [1.5, -0.4], [-1.1, 0.7]],
    [[0.0, 1.0], [0.6, 0.6], [-0.5, -0.2]],
];
const CHOSEN: [usize; 3] = [0, 1, 2];
const REWARDS: [f64; 3] = [0.9, 0.35, 0.6];
const PROPENSITIES: [f64; 3] = [0.5, 0.2, 0.4];

fn log(mode: LogMode) -> Log {
    let tuples = (0..3)
        .map(|i| {
            let candidates = FEATURES[i]
                .iter()
                .map(|row| FeatureVector::new(row.to_vec()).unwrap())
                .collect();
            let inst = Arc::new(Instance::new(i as u64, candidates).unwrap());
            let mu = (mode == LogMode::Stochastic).then_some(PROPENSITIES[i]);
            LoggedTuple::new(inst, CHOSEN[i], REWARDS[i], mu).unwrap()
        })
        .collect();
    Log::new(tuples, mode).unwrap()
}

fn params() -> PolicyParams {
    PolicyParams::new(vec![0.4, -0.7], 1.3).unwrap()
}

fn model() -> RewardModel {
    RewardModel {
        weights: vec![0.2, 0.1],
        intercept: 0.5,
        ridge_lambda: 0.0,
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL
}

fn check(objective: &Objective<'_>, log: &Log, value: f64, grad: [f64; 2]) {
    let p = params();
    let v = objective.value(&p, log).unwrap();
    assert!(close(v, value), "{}: value {v} vs {value}", objective.kind);
    let g = objective.gradient(&p, log).unwrap();
    assert!(
        close(g[0], grad[0]) && close(g[1], grad[1]),
        "{}: gradient {g:?} vs {grad:?}",
        objective.kind
    );
}

#[test]
fn policy_probabilities() {
    let l = log(LogMode::Deterministic);
    let p = policy_probs(&params(), l.tuples()[0].instance()).unwrap();
    let expected = [0.20842189173678652, 0.05606795017143765, 0.7355101580917758];
    assert!(p.iter().zip(expected).all(|(a, b)| close(*a, b)), "{p:?}");
}

#[test]
fn plain_estimators() {
    let (s, d) = (log(LogMode::Stochastic), log(LogMode::Deterministic));
    check(
        &Objective::plain(EstimatorKind::Ips).unwrap(),
        &s,
        0.7630711563384187,
        [0.13970210868751096, -0.08697325443507059],
    );
    check(
        &Objective::plain(EstimatorKind::Dpm).unwrap(),
        &d,
        0.23378423992619593,
        [0.009963995122179926, 0.004604669396194357],
    );
    check(
        &Objective::plain(EstimatorKind::IpsR).unwrap(),
        &s,
        0.4483350541393496,
        [-0.05162104939503273, 0.04704262664289846],
    );
    check(
        &Objective::plain(EstimatorKind::DpmR).unwrap(),
        &d,
        0.5139884844030519,
        [-0.05221567490427747, 0.08547397518784265],
    );
}

#[test]
fn controlled_estimators() {
    let m = model();
    let s = log(LogMode::Stochastic);
    let d = log(LogMode::Deterministic);
    check(
        &Objective::controlled(EstimatorKind::CDr, &m, 0.7).unwrap(),
        &s,
        0.39912405791963274,
        [-0.05405296739035692, 0.03932368418674706],
    );
    check(
        &Objective::controlled(EstimatorKind::Dc, &m, 0.3).unwrap(),
        &d,
        0.4847474514232429,
        [-0.07530587755356666, 0.04788756594932199],
    );
}

#[test]
fn control_scalars() {
    let m = model();
    let c = estimate_c_hat(&params(), &log(LogMode::Stochastic), &m)
        .unwrap()
        .c_hat;
    assert!(close(c, 0.3173106703177542), "{c}");
    let c = estimate_c_hat(&params(), &log(LogMode::Deterministic), &m)
        .unwrap()
        .c_hat;
    assert!(close(c, 0.07379133596085853), "{c}");
}

#[test]
fn hand_evaluated_examples() {
    let scores = [3f64.ln(), 0.0];
    let p = cfl_core::domain::softmax(&scores);
    assert!(close(p[0], 0.75) && close(p[1], 0.25));

    // IPS at pi = 1 and a lowered assignment; DPM mean.
    assert!(close(ips_value(&[0.3, 0.6], &[2.0, 2.0]).unwrap(), 0.9));
    assert!(close(ips_value(&[0.3, 0.6], &[2.0, 1.0]).unwrap(), 0.6));
    assert!(close(ips_value(&[0.3, 0.6], &[1.0, 1.0]).unwrap(), 0.45));

    // Self-normalized values.
    assert!(close(
        reweighted_value(&[1.0, 0.4], &[0.2, 0.8]).unwrap(),
        0.52
    ));
    assert!(close(
        reweighted_value(&[1.0, 0.4], &[0.5, 0.5]).unwrap(),
        0.7
    ));
    assert!(close(
        reweighted_value(&[1.0, 0.4], &[0.7, 0.0]).unwrap(),
        1.0
    ));
    assert!(close(
        reweighted_value(&[1.0, 0.4, 0.4], &[0.0, 1.0, 1.0]).unwrap(),
        0.4
    ));

    // A deterministic log is its own unit-propensity stochastic log.
    let d = log(LogMode::Deterministic);
    let a = value_ips_dpm(&params(), &d).unwrap();
    let b = value_ips_dpm(&params(), &d.with_unit_propensities()).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}
