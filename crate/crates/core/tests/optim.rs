use std::collections::BTreeMap;

use gaborspoof_core::optim::*;
use gaborspoof_core::{Error, ParamStore, Tensor};
use proptest::prelude::*;

fn scalar_store(x: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("x", Tensor::new(vec![1], vec![x]).unwrap(), true);
    s
}

fn grad(name: &str, g: Vec<f64>) -> BTreeMap<String, Tensor> {
    BTreeMap::from([(name.to_string(), Tensor::new(vec![g.len()], g).unwrap())])
}

#[test]
fn zero_gradient_leaves_parameters() {
    let mut store = ParamStore::new();
    store.insert(
        "w",
        Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap(),
        true,
    );
    let before = store.clone();
    let mut adam = Adam::new(OptimConfig::default());
    for _ in 0..5 {
        adam.step(&mut store, &grad("w", vec![0.0; 3]), 0.1)
            .unwrap();
    }
    assert_eq!(store, before);
}

#[test]
fn first_step_moves_by_lr_against_sign() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(vec![3], vec![0.0; 3]).unwrap(), true);
    let cfg = OptimConfig {
        eps: 1e-300,
        ..OptimConfig::default()
    };
    Adam::new(cfg)
        .step(&mut store, &grad("w", vec![3.0, -0.02, 1e-5]), 0.01)
        .unwrap();
    for (v, expect) in store
        .value("w")
        .unwrap()
        .data()
        .iter()
        .zip([-0.01, 0.01, -0.01])
    {
        assert!((v - expect).abs() < 1e-15, "{v}");
    }
}

#[test]
fn quadratic_matches_scalar_recursion() {
    let cfg = OptimConfig::default();
    let mut store = scalar_store(1.0);
    let mut adam = Adam::new(cfg.clone());
    let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=100 {
        let x_now = store.value("x").unwrap().data()[0];
        adam.step(&mut store, &grad("x", vec![2.0 * x_now]), 0.1)
            .unwrap();
        let g = 2.0 * x;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let mh = m / (1.0 - cfg.beta1.powi(t));
        let vh = v / (1.0 - cfg.beta2.powi(t));
        x -= 0.1 * mh / (vh.sqrt() + cfg.eps);
    }
    let got = store.value("x").unwrap().data()[0];
    assert!((got - x).abs() < 1e-12);
    assert!(got.abs() < 0.1, "{got}");
    assert_eq!(adam.steps_taken(), 100);
}

#[test]
fn mismatched_gradients_are_contract_errors() {
    let mut store = scalar_store(1.0);
    let mut adam = Adam::new(OptimConfig::default());
    assert!(matches!(
        adam.step(&mut store, &grad("x", vec![1.0, 2.0]), 0.1),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        adam.step(&mut store, &grad("y", vec![1.0]), 0.1),
        Err(Error::Contract(_))
    ));
    store.insert(
        "bn.running_mean",
        Tensor::new(vec![1], vec![0.0]).unwrap(),
        false,
    );
    assert!(matches!(
        adam.step(&mut store, &grad("bn.running_mean", vec![1.0]), 0.1),
        Err(Error::Contract(_))
    ));
    assert_eq!(adam.steps_taken(), 0);
}

#[test]
fn cosine_examples() {
    assert_eq!(cosine_lr(0, 10, 1e-4).unwrap(), 1e-4);
    assert!(cosine_lr(10, 10, 1e-4).unwrap().abs() < 1e-20);
    assert!((cosine_lr(5, 10, 1e-4).unwrap() - 5e-5).abs() < 1e-20);
    assert!(matches!(cosine_lr(0, 0, 1e-4), Err(Error::Argument(_))));
    assert!(cosine_lr(11, 10, 1e-4).is_err());
    let constant = OptimConfig {
        schedule: Schedule::Constant,
        ..OptimConfig::default()
    };
    assert_eq!(constant.lr_at(7, 10).unwrap(), 1e-4);
}

#[test]
fn defaults() {
    let cfg = OptimConfig::default();
    assert_eq!((cfg.lr, cfg.schedule), (1e-4, Schedule::Cosine));
    assert!(OptimConfig { lr: 0.0, ..cfg }.validate().is_err());
}

proptest! {
    #[test]
    fn cosine_is_nonincreasing(total in 1usize..5000, base in 1e-6f64..1.0) {
        let mut prev = f64::INFINITY;
        for step in 0..=total.min(400) {
            let s = step * total / total.min(400);
            let lr = cosine_lr(s, total, base).unwrap();
            prop_assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
    }
}
