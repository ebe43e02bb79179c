mod common;

use std::f64::consts::PI;

use common::{frontend_gradcheck, small_frontend as small_config};
use gaborspoof_core::filterbank::{gabor_kernels_on, GaborParams};
use gaborspoof_core::frontend::{self, *};
use gaborspoof_core::nn::{Ctx, ParamStore};
use gaborspoof_core::{Error, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tone(eta: f64, len: usize, shift: usize) -> Vec<f64> {
    (0..len)
        .map(|t| (2.0 * PI * eta * (t + shift) as f64).cos())
        .collect()
}

/// Squared-modulus envelope `(N, T)` of a single waveform through a rotated
/// Gabor bank.
fn envelope(params: &GaborParams, wave: &[f64], theta: f64) -> Tensor {
    let mut tape = Tape::new();
    let eta = tape.constant(params.eta.clone());
    let sigma = tape.constant(params.sigma.clone());
    let (re, im) = gabor_kernels_on(&mut tape, eta, sigma, params.width).unwrap();
    let (c, s) = (theta.cos(), theta.sin());
    let rc = tape.scale(re, c).unwrap();
    let is = tape.scale(im, s).unwrap();
    let rs = tape.scale(re, s).unwrap();
    let ic = tape.scale(im, c).unwrap();
    let re = tape.sub(rc, is).unwrap();
    let im = tape.add(rs, ic).unwrap();
    let n = params.len();
    let k = tape.shape(re)[1];
    let re = tape.reshape(re, &[n, 1, k]).unwrap();
    let im = tape.reshape(im, &[n, 1, k]).unwrap();
    let x = tape.constant(Tensor::new(vec![1, 1, wave.len()], wave.to_vec()).unwrap());
    let yr = tape.conv1d(x, re, None, 1, (0, 0), 1).unwrap();
    let yi = tape.conv1d(x, im, None, 1, (0, 0), 1).unwrap();
    let yr = tape.value(yr).clone();
    let yi = tape.value(yi).clone();
    let t = yr.shape()[2];
    let z = gaborspoof_core::ComplexTensor::new(
        yr.reshaped(&[n, t]).unwrap(),
        yi.reshaped(&[n, t]).unwrap(),
    )
    .unwrap();
    squared_modulus(&z)
}

#[test]
fn tone_envelope_is_flat() {
    for eta in [0.03, 0.1, 0.27] {
        let p = GaborParams::new(vec![eta], vec![20.0], 129).unwrap();
        let env = envelope(&p, &tone(eta, 2000, 0), 0.0);
        let d = env.data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        assert!(sd / mean < 0.05, "eta {eta}: {}", sd / mean);
    }
}

#[test]
fn envelope_ignores_kernel_phase() {
    let p = GaborParams::mel(6, 64, 16000.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let wave: Vec<f64> = (0..500).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let base = envelope(&p, &wave, 0.0);
    for theta in [0.3, 1.7, -2.9] {
        assert!(envelope(&p, &wave, theta).max_abs_diff(&base) < 1e-10);
    }
}

#[test]
fn one_sample_shift_is_small() {
    let p = GaborParams::mel(10, 128, 16000.0).unwrap();
    let sigma = vec![0.4 * 64.0; 10];
    let burst = |shift: usize| -> Vec<f64> {
        (0..3000)
            .map(|t| {
                let u = (t + shift) as f64;
                let env = (PI * u / 3001.0).sin().powi(2);
                env * ((2.0 * PI * 0.05 * u).cos() + 0.5 * (2.0 * PI * 0.18 * u).cos())
            })
            .collect()
    };
    let a = gaussian_lowpass_pool(&envelope(&p, &burst(0), 0.0), &sigma, 129, 3).unwrap();
    let b = gaussian_lowpass_pool(&envelope(&p, &burst(1), 0.0), &sigma, 129, 3).unwrap();
    let num: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let den: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(num / den < 0.01, "{}", num / den);
}

#[test]
fn squared_modulus_examples() {
    let z = gaborspoof_core::ComplexTensor::new(
        Tensor::from_vec(vec![3.0, 0.0]),
        Tensor::from_vec(vec![4.0, 0.0]),
    )
    .unwrap();
    assert_eq!(squared_modulus(&z).data(), &[25.0, 0.0]);
}

#[test]
fn gaussian_pool_preserves_constants_inside() {
    let p = 129;
    let map = Tensor::full(&[2, 900], 2.5);
    let out = gaussian_lowpass_pool(&map, &[10.0, 25.0], p, 3).unwrap();
    assert_eq!(out.shape(), &[2, 300]);
    let half = p / 2;
    for c in 0..2 {
        for j in 0..300 {
            let center = 3 * j + 1;
            if center >= half && center + half < 900 {
                assert!((out.at(&[c, j]) - 2.5).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gaussian_pool_wide_sigma_is_moving_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..1.0)).collect();
    let map = Tensor::new(vec![1, 200], x.clone()).unwrap();
    let p = 9;
    let out = gaussian_lowpass_pool(&map, &[1e6], p, 1).unwrap();
    for j in 4..196 {
        let avg: f64 = x[j - 4..=j + 4].iter().sum::<f64>() / 9.0;
        assert!((out.at(&[0, j]) - avg).abs() < 1e-9);
    }
}

#[test]
fn valid_frame_count_matches_table() {
    let map = Tensor::zeros(&[1, 63576]);
    let out = gaussian_lowpass_pool(&map, &[200.0], 1025, 3).unwrap();
    assert_eq!(out.shape(), &[1, 21192]);
}

fn pcen_oracle(x: &Tensor, p: &PcenParams) -> Vec<f64> {
    let (n, t) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; n * t];
    for c in 0..n {
        let mut m = x.at(&[c, 0]);
        for i in 0..t {
            let v = x.at(&[c, i]);
            if i > 0 {
                m = (1.0 - p.s) * m + p.s * v;
            }
            out[c * t + i] = (v / (p.eps + m).powf(p.alpha[c]) + p.delta[c]).powf(p.r[c])
                - p.delta[c].powf(p.r[c]);
        }
    }
    out
}

fn random_map(rng: &mut ChaCha8Rng, n: usize, t: usize) -> Tensor {
    Tensor::new(
        vec![n, t],
        (0..n * t).map(|_| rng.gen_range(0.0..3.0)).collect(),
    )
    .unwrap()
}

#[test]
fn pcen_matches_scalar_recursion() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_map(&mut rng, 4, 8);
    let p = PcenParams {
        alpha: vec![0.96; 4],
        delta: vec![2.0; 4],
        r: vec![0.5; 4],
        s: 0.04,
        eps: 1e-6,
    };
    let y = pcen(&x, &p).unwrap();
    for (a, b) in y.data().iter().zip(pcen_oracle(&x, &p)) {
        assert!((a - b).abs() < 1e-12);
    }
    for _ in 0..100 {
        let (n, t) = (rng.gen_range(1..6), rng.gen_range(1..40));
        let x = random_map(&mut rng, n, t);
        let p = PcenParams {
            alpha: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
            delta: (0..n).map(|_| rng.gen_range(0.0..3.0)).collect(),
            r: (0..n).map(|_| rng.gen_range(0.05..1.0)).collect(),
            s: rng.gen_range(0.01..1.0),
            eps: 1e-6,
        };
        let y = pcen(&x, &p).unwrap();
        for (a, b) in y.data().iter().zip(pcen_oracle(&x, &p)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn pcen_identity_and_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_map(&mut rng, 3, 50);
    let id = PcenParams {
        alpha: vec![0.0; 3],
        delta: vec![0.0, 1.5, 7.0],
        r: vec![1.0; 3],
        s: 0.3,
        eps: 1e-6,
    };
    assert!(pcen(&x, &id).unwrap().max_abs_diff(&x) < 1e-12);

    let c = 0.8;
    let fixed = PcenParams {
        alpha: vec![1.0],
        delta: vec![0.0],
        r: vec![1.0],
        s: 0.04,
        eps: 1e-6,
    };
    let y = pcen(&Tensor::full(&[1, 30], c), &fixed).unwrap();
    assert!(y.data().iter().all(|&v| (v - c / (1e-6 + c)).abs() < 1e-12));
}

#[test]
fn pcen_rejects_negative_input() {
    let p = PcenParams {
        alpha: vec![1.0],
        delta: vec![0.0],
        r: vec![1.0],
        s: 0.04,
        eps: 1e-6,
    };
    assert!(matches!(
        pcen(&Tensor::full(&[1, 3], -1.0), &p),
        Err(Error::Argument(_))
    ));
}

proptest! {
    #[test]
    fn ema_stays_within_input_range(x in proptest::collection::vec(0.0f64..10.0, 1..60), s in 0.001f64..=1.0) {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![1, 1, x.len()], x.clone()).unwrap());
        let m = tape.ema(v, s).unwrap();
        let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for &v in tape.value(m).data() {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }
}

#[test]
fn zero_waveform_gives_zero_features() {
    for kind in [
        FrontendKind::Gabor,
        FrontendKind::GaborPcen,
        FrontendKind::Sinc,
    ] {
        let cfg = small_config(kind, MaxPoolAxis::Time);
        let mut store = ParamStore::new();
        frontend::init(&mut store, &cfg).unwrap();
        let mut ctx = Ctx::new(&store, false, false);
        let x = ctx.constant(Tensor::zeros(&[1, 500]));
        let st = frontend::forward(&mut ctx, &cfg, x).unwrap();
        assert!(ctx.value(st.envelope).data().iter().all(|&v| v == 0.0));
        assert!(ctx.value(st.features).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn forward_shapes() {
    for (axis, channels) in [(MaxPoolAxis::Time, 6), (MaxPoolAxis::Filters, 2)] {
        let cfg = small_config(FrontendKind::GaborPcen, axis);
        let mut store = ParamStore::new();
        frontend::init(&mut store, &cfg).unwrap();
        let mut ctx = Ctx::new(&store, false, false);
        let x = ctx.constant(Tensor::zeros(&[2, 500]));
        let st = frontend::forward(&mut ctx, &cfg, x).unwrap();
        assert_eq!(ctx.shape(st.output), &[2, channels, (500 - 65 + 1) / 3]);
        assert_eq!(cfg.output_shape(500).unwrap(), (channels, 145));
    }
    let cfg = small_config(FrontendKind::Gabor, MaxPoolAxis::Time);
    let mut store = ParamStore::new();
    frontend::init(&mut store, &cfg).unwrap();
    let mut ctx = Ctx::new(&store, false, false);
    let x = ctx.constant(Tensor::zeros(&[1, 60]));
    assert!(matches!(
        frontend::forward(&mut ctx, &cfg, x),
        Err(Error::Argument(_))
    ));
}

#[test]
fn frontend_gradients_match_finite_differences() {
    for (kind, axis) in [
        (FrontendKind::GaborPcen, MaxPoolAxis::Time),
        (FrontendKind::GaborPcen, MaxPoolAxis::Filters),
        (FrontendKind::Sinc, MaxPoolAxis::Time),
    ] {
        let cfg = small_config(kind, axis);
        for (name, err) in frontend_gradcheck(&cfg, 8) {
            assert!(err < 1e-4, "{kind:?}/{axis:?} {name}: {err:e}");
        }
    }
}

#[test]
fn clamp_restores_ranges() {
    let cfg = small_config(FrontendKind::GaborPcen, MaxPoolAxis::Time);
    let mut store = ParamStore::new();
    frontend::init(&mut store, &cfg).unwrap();
    for (name, v) in [
        ("eta", 0.9),
        ("sigma", -3.0),
        ("pool_sigma", -1.0),
        ("pcen_alpha", -0.5),
        ("pcen_delta", -2.0),
        ("pcen_r", 1.7),
    ] {
        store.get_mut(&format!("frontend.{name}")).unwrap().value = Tensor::full(&[6], v);
    }
    frontend::clamp(&mut store, &cfg);
    let get = |n: &str| store.value(&format!("frontend.{n}")).unwrap().data()[0];
    assert!(get("eta") < 0.5);
    assert!(get("sigma") >= 4.0 / 64.0);
    assert!(get("pool_sigma") > 0.0);
    assert_eq!(get("pcen_alpha"), 0.0);
    assert_eq!(get("pcen_delta"), 0.0);
    assert_eq!(get("pcen_r"), 1.0);
}
