#![allow(dead_code)]

use gaborspoof_core::autodiff::finite_difference_at;
use gaborspoof_core::frontend;
use gaborspoof_core::frontend::{FrontendConfig, FrontendKind, MaxPoolAxis, PcenInit};
use gaborspoof_core::nn::{self, Ctx, ParamStore};
use gaborspoof_core::rawgat::RawGatConfig;
use gaborspoof_core::rawnet2::RawNet2Config;
use gaborspoof_core::{ModelConfig, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rawnet2_truncated() -> RawNet2Config {
    RawNet2Config {
        frontend: FrontendConfig {
            kind: FrontendKind::GaborPcen,
            filters: 4,
            kernel_len: 64,
            sample_rate: 16000.0,
            stride: 3,
            gaussian_pool: true,
            max_pool: MaxPoolAxis::Time,
            pcen: PcenInit::default(),
        },
        input_len: 6000,
        block_widths: vec![4, 4, 4, 8, 8, 8],
        gru_hidden: 16,
        fc_hidden: 16,
    }
}

/// Five spectral and five temporal nodes.
pub fn rawgat_truncated() -> RawGatConfig {
    RawGatConfig {
        frontend: FrontendConfig {
            kind: FrontendKind::GaborPcen,
            filters: 15,
            kernel_len: 64,
            sample_rate: 16000.0,
            stride: 3,
            gaussian_pool: true,
            max_pool: MaxPoolAxis::Filters,
            pcen: PcenInit::default(),
        },
        input_len: 11000,
        block_widths: vec![4, 4, 4, 8, 8, 8],
        gat_dim: 8,
        head_dim: 4,
        proj_nodes: 4,
        spectral_ratio: 0.64,
        temporal_ratio: 0.81,
        head_ratio: 0.75,
        dropout: 0.3,
        ablation: Default::default(),
    }
}

pub fn random_wave(rng: &mut ChaCha8Rng, batch: usize, len: usize) -> Tensor {
    let data = (0..batch * len).map(|_| rng.gen_range(-0.5..0.5)).collect();
    Tensor::new(vec![batch, len], data).unwrap()
}

/// Mean NLL of a training-mode pass with a fixed dropout stream.
pub fn train_loss(
    cfg: &ModelConfig,
    store: &ParamStore,
    wave: &Tensor,
    labels: &[usize],
    with_grad: bool,
) -> Result<(f64, Option<std::collections::BTreeMap<String, Tensor>>)> {
    let mut ctx = Ctx::new(store, true, with_grad).with_rng(ChaCha8Rng::seed_from_u64(99));
    let x = ctx.constant(wave.clone());
    let out = cfg.forward(&mut ctx, x)?;
    let loss = nn::nll_loss(&mut ctx, out, labels)?;
    let value = ctx.value(loss).item();
    if with_grad {
        let (grads, _) = ctx.backward(loss)?;
        Ok((value, Some(grads)))
    } else {
        Ok((value, None))
    }
}

/// Step sizes tried in turn. Max pooling makes the loss piecewise smooth
/// with closely spaced kinks, so a coarse step can straddle several of them.
pub const EPS_LADDER: [f64; 4] = [1e-6, 1e-7, 1e-8, 1e-9];

/// Max deviation over the largest magnitude, floored at 1e-6 so exactly-zero
/// gradients compare against finite-difference roundoff.
pub fn scaled_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-6, f64::max);
    diff / scale
}

/// Error between analytic and central-difference gradients for a sample of
/// coordinates of every trainable tensor, using the first step size on
/// [`EPS_LADDER`] that agrees within `tol`.
pub fn model_gradcheck(
    cfg: &ModelConfig,
    seed: u64,
    coords: usize,
    only: Option<&str>,
    tol: f64,
) -> Vec<(String, f64)> {
    let store = cfg.init(seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let wave = random_wave(&mut rng, 2, cfg.input_len());
    let labels = [0, 1];
    let (_, grads) = train_loss(cfg, &store, &wave, &labels, true).unwrap();
    let grads = grads.unwrap();
    let mut report = Vec::new();
    for name in store.trainable_names() {
        if only.is_some_and(|p| !name.starts_with(p)) {
            continue;
        }
        let value = store.value(&name).unwrap().clone();
        let n = value.numel();
        let idx: Vec<usize> = if n <= coords {
            (0..n).collect()
        } else {
            (0..coords).map(|_| rng.gen_range(0..n)).collect()
        };
        let f = |t: &Tensor| {
            let mut s = store.clone();
            s.get_mut(&name).unwrap().value = t.clone();
            train_loss(cfg, &s, &wave, &labels, false).map(|r| r.0)
        };
        let analytic: Vec<f64> = idx.iter().map(|&i| grads[&name].data()[i]).collect();
        let mut best = f64::INFINITY;
        for eps in EPS_LADDER {
            let numeric = finite_difference_at(&f, &value, &idx, eps).unwrap();
            best = best.min(scaled_error(&analytic, &numeric));
            if best < tol {
                break;
            }
        }
        report.push((name, best));
    }
    report
}

pub fn small_frontend(kind: FrontendKind, axis: MaxPoolAxis) -> FrontendConfig {
    FrontendConfig {
        kind,
        filters: 6,
        kernel_len: 64,
        sample_rate: 16000.0,
        stride: 3,
        gaussian_pool: true,
        max_pool: axis,
        pcen: PcenInit::default(),
    }
}

fn weighted_output<'a>(
    cfg: &FrontendConfig,
    s: &'a ParamStore,
    wave: &Tensor,
    weights: &Tensor,
    grad: bool,
) -> (Ctx<'a>, Var) {
    let mut ctx = Ctx::new(s, true, grad);
    let x = ctx.constant(wave.clone());
    let st = frontend::forward(&mut ctx, cfg, x).unwrap();
    let w = ctx.constant(weights.clone());
    let y = ctx.tape.mul(st.output, w).unwrap();
    let l = ctx.tape.sum(y).unwrap();
    (ctx, l)
}

/// Frontend-only gradient check of a random weighting of the output.
pub fn frontend_gradcheck(cfg: &FrontendConfig, seed: u64) -> Vec<(String, f64)> {
    let mut store = ParamStore::new();
    frontend::init(&mut store, cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wave = Tensor::new(
        vec![2, 2000],
        (0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let (c, t) = cfg.output_shape(2000).unwrap();
    let weights = Tensor::new(
        vec![2, c, t],
        (0..2 * c * t).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let (ctx, l) = weighted_output(cfg, &store, &wave, &weights, true);
    let (grads, _) = ctx.backward(l).unwrap();
    let mut report = Vec::new();
    for name in store.trainable_names() {
        let value = store.value(&name).unwrap().clone();
        let idx: Vec<usize> = (0..value.numel()).collect();
        let f = |v: &Tensor| {
            let mut s = store.clone();
            s.get_mut(&name).unwrap().value = v.clone();
            let (ctx, l) = weighted_output(cfg, &s, &wave, &weights, false);
            Ok(ctx.value(l).item())
        };
        let mut best = f64::INFINITY;
        for eps in EPS_LADDER {
            let numeric = finite_difference_at(&f, &value, &idx, eps).unwrap();
            best = best.min(scaled_error(grads[&name].data(), &numeric));
            if best < 1e-4 {
                break;
            }
        }
        report.push((name, best));
    }
    report
}
