//! The mirror pair against its second-order expansion
//! `p - (a1 - a2) eta g - a1 a2 eta^2 H g`.

mod common;

use mgrad::models::BprObjective;
use mgrad::optim::{mirror_step, oracle_step, FnObjective, MgConfig, Objective, OptState, OptimizerKind};
use mgrad::params::{ParamSet, Tensor};

fn vector(v: &[f64]) -> ParamSet {
    ParamSet::new().with("x", Tensor::from_vec(v.to_vec())).unwrap()
}

fn x(p: &ParamSet) -> Vec<f64> {
    p.get("x").unwrap().data().to_vec()
}

/// `sum a_i x_i^2 / 2 + b_i x_i^4 / 4 + c x_0 x_1`
fn quartic(a: [f64; 3], b: [f64; 3], c: f64) -> impl Objective {
    FnObjective::new(
        move |p: &ParamSet| {
            let v = x(p);
            Ok((0..3).map(|i| a[i] * v[i].powi(2) / 2.0 + b[i] * v[i].powi(4) / 4.0).sum::<f64>() + c * v[0] * v[1])
        },
        move |p: &ParamSet| {
            let v = x(p);
            let mut g: Vec<f64> = (0..3).map(|i| a[i] * v[i] + b[i] * v[i].powi(3)).collect();
            g[0] += c * v[1];
            g[1] += c * v[0];
            Ok(vector(&g))
        },
    )
}

fn residual<O: Objective>(p: &ParamSet, obj: &O, eta: f64) -> f64 {
    let cfg = MgConfig::new(2.0, 1.0, 1, eta, OptimizerKind::Sgd, 1).unwrap();
    let (mirror, _, _) = mirror_step(p, &OptState::new(OptimizerKind::Sgd), obj, &cfg, 1).unwrap();
    let oracle = oracle_step(p, obj, &cfg).unwrap();
    mirror.add_scaled(-1.0, &oracle).unwrap().norm()
}

fn assert_cubic<O: Objective>(p: &ParamSet, obj: &O, what: &str) {
    let r: Vec<f64> = [1e-2, 5e-3, 2.5e-3].iter().map(|&eta| residual(p, obj, eta)).collect();
    for w in r.windows(2) {
        let ratio = w[0] / w[1];
        assert!((6.0..=10.0).contains(&ratio), "{what}: residuals {r:?}, ratio {ratio}");
    }
}

#[test]
fn quartic_residual_is_third_order() {
    let obj = quartic([1.0, 3.0, 0.5], [2.0, 1.0, 4.0], 0.3);
    assert_cubic(&vector(&[0.7, -1.2, 0.4]), &obj, "quartic");
}

#[test]
fn tiny_mf_residual_is_third_order() {
    for seed in 0..5 {
        let mut inst = common::random_instance(seed, false);
        inst.spec = mgrad::models::ModelSpec::mf(2).with_l2(0.01);
        inst.params = mgrad::models::init_params(&inst.spec, 5, 5, seed, 0.8).unwrap();
        let batch: Vec<_> = (0..10)
            .map(|k| mgrad::models::Triplet::new(k % 5, k % 5, (k + 1 + k / 5) % 5))
            .collect();
        let obj = BprObjective {
            spec: &inst.spec,
            features: &inst.features,
            batch: &batch,
        };
        assert_cubic(&inst.params, &obj, &format!("mf seed {seed}"));
    }
}

#[test]
fn quadratic_steps_agree() {
    let obj = quartic([1.0, 3.0, 0.5], [0.0; 3], 0.3);
    let p = vector(&[0.7, -1.2, 0.4]);
    for eta in [1e-2, 5e-3, 2.5e-3, 0.1] {
        let cfg = MgConfig::new(2.0, 1.0, 1, eta, OptimizerKind::Sgd, 1).unwrap();
        let (mirror, _, _) = mirror_step(&p, &OptState::new(OptimizerKind::Sgd), &obj, &cfg, 1).unwrap();
        let oracle = oracle_step(&p, &obj, &cfg).unwrap();
        let diff = mirror.add_scaled(-1.0, &oracle).unwrap().norm();
        assert!(diff <= 1e-12 * mirror.norm(), "eta {eta}: diff {diff:e}");
    }
}
