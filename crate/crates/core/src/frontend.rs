//! Waveform ingestion: filterbank convolution, envelope extraction, temporal
//! decimation, optional PCEN, max pooling, then BN + SELU.

use serde::{Deserialize, Serialize};

use crate::autodiff::{PoolPad, Tape, Var};
use crate::error::{Error, Result};
use crate::filterbank::{self, GaborParams, SincParams, Window};
use crate::nn::{self, Ctx, ParamStore};
use crate::tensor::{ComplexTensor, Tensor};

pub const PREFIX: &str = "frontend";
pub const MIN_POOL_SIGMA: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrontendKind {
    #[serde(rename = "gabor")]
    Gabor,
    #[serde(rename = "gabor+pcen", alias = "leaf")]
    GaborPcen,
    #[serde(rename = "sinc")]
    Sinc,
}

impl FrontendKind {
    pub fn is_gabor(self) -> bool {
        matches!(self, FrontendKind::Gabor | FrontendKind::GaborPcen)
    }
}

/// Axis pooled by the max-pooling stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxPoolAxis {
    /// Kernel 3, stride 1, length-preserving, along time.
    Time,
    /// Kernel 3, stride 3, across the filter axis.
    Filters,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PcenInit {
    pub alpha: f64,
    pub delta: f64,
    pub r: f64,
    pub s: f64,
    pub eps: f64,
}

impl Default for PcenInit {
    fn default() -> Self {
        Self {
            alpha: 0.96,
            delta: 2.0,
            r: 0.5,
            s: 0.04,
            eps: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendConfig {
    pub kind: FrontendKind,
    pub filters: usize,
    /// Nominal kernel width `W`; the kernel has `2 * (W / 2) + 1` taps.
    pub kernel_len: usize,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: f64,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Gaussian lowpass pooling for the decimation; max pooling otherwise.
    #[serde(default = "default_true")]
    pub gaussian_pool: bool,
    pub max_pool: MaxPoolAxis,
    #[serde(default)]
    pub pcen: PcenInit,
}

fn default_sample_rate() -> f64 {
    16000.0
}

fn default_stride() -> usize {
    3
}

fn default_true() -> bool {
    true
}

impl FrontendConfig {
    pub fn taps(&self) -> usize {
        filterbank::taps(self.kernel_len)
    }

    pub fn uses_gaussian_pool(&self) -> bool {
        self.gaussian_pool && self.kind.is_gabor()
    }

    pub fn out_channels(&self) -> usize {
        match self.max_pool {
            MaxPoolAxis::Time => self.filters,
            MaxPoolAxis::Filters => self.filters / 3,
        }
    }

    /// Output `(channels, frames)` for an input of `len` samples.
    pub fn output_shape(&self, len: usize) -> Result<(usize, usize)> {
        let taps = self.taps();
        if len < taps {
            return Err(Error::arg(format!(
                "waveform of {len} samples is shorter than the {taps}-tap filters"
            )));
        }
        let frames = (len - taps + 1) / self.stride;
        if frames == 0 || self.out_channels() == 0 {
            return Err(Error::arg(format!(
                "waveform of {len} samples leaves no frames"
            )));
        }
        Ok((self.out_channels(), frames))
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters == 0 || self.kernel_len == 0 || self.stride == 0 {
            return Err(Error::Config(
                "frontend filters, kernel_len and stride must be positive".into(),
            ));
        }
        if self.max_pool == MaxPoolAxis::Filters && self.filters < 3 {
            return Err(Error::Config(
                "filter-axis max pooling needs at least 3 filters".into(),
            ));
        }
        if self.uses_gaussian_pool() && self.taps() / 2 < self.stride / 2 {
            return Err(Error::Config(
                "pooling kernel shorter than its stride".into(),
            ));
        }
        let p = &self.pcen;
        if !(p.s > 0.0
            && p.s <= 1.0
            && p.eps > 0.0
            && p.alpha >= 0.0
            && p.delta >= 0.0
            && (0.0..=1.0).contains(&p.r))
        {
            return Err(Error::Config("PCEN initial values out of range".into()));
        }
        Ok(())
    }
}

fn pname(name: &str) -> String {
    format!("{PREFIX}.{name}")
}

/// Adds the frontend parameters to `store`.
pub fn init(store: &mut ParamStore, cfg: &FrontendConfig) -> Result<()> {
    cfg.validate()?;
    let n = cfg.filters;
    if cfg.kind.is_gabor() {
        let g = GaborParams::mel(n, cfg.kernel_len, cfg.sample_rate)?;
        store.insert(pname("eta"), g.eta, true);
        store.insert(pname("sigma"), g.sigma, true);
    } else {
        let s = SincParams::mel(n, cfg.kernel_len, cfg.sample_rate, Window::Hamming)?;
        store.insert(pname("f1"), s.f1, true);
        store.insert(pname("f2"), s.f2, true);
    }
    if cfg.uses_gaussian_pool() {
        let sigma_p = 0.4 * (cfg.taps() - 1) as f64 / 2.0;
        store.insert(
            pname("pool_sigma"),
            Tensor::full(&[n], sigma_p.max(MIN_POOL_SIGMA)),
            true,
        );
    }
    if cfg.kind == FrontendKind::GaborPcen {
        store.insert(
            pname("pcen_alpha"),
            Tensor::full(&[n], cfg.pcen.alpha),
            true,
        );
        store.insert(
            pname("pcen_delta"),
            Tensor::full(&[n], cfg.pcen.delta),
            true,
        );
        store.insert(pname("pcen_r"), Tensor::full(&[n], cfg.pcen.r), true);
    }
    nn::init_batch_norm(store, &pname("bn"), cfg.out_channels());
    Ok(())
}

/// Post-step parameter constraints.
pub fn clamp(store: &mut ParamStore, cfg: &FrontendConfig) {
    let take =
        |store: &ParamStore, name: &str| store.get(&pname(name)).map(|p| p.value.data().to_vec());
    if cfg.kind.is_gabor() {
        if let (Some(mut eta), Some(mut sigma)) = (take(store, "eta"), take(store, "sigma")) {
            filterbank::clamp_gabor(&mut eta, &mut sigma, cfg.kernel_len);
            put(store, "eta", eta);
            put(store, "sigma", sigma);
        }
    } else if let (Some(mut f1), Some(mut f2)) = (take(store, "f1"), take(store, "f2")) {
        filterbank::clamp_sinc(&mut f1, &mut f2, cfg.sample_rate);
        put(store, "f1", f1);
        put(store, "f2", f2);
    }
    map_param(store, "pool_sigma", |v| v.max(MIN_POOL_SIGMA));
    map_param(store, "pcen_alpha", |v| v.max(0.0));
    map_param(store, "pcen_delta", |v| v.max(0.0));
    map_param(store, "pcen_r", |v| v.clamp(0.0, 1.0));
}

fn put(store: &mut ParamStore, name: &str, data: Vec<f64>) {
    if let Some(p) = store.get_mut(&pname(name)) {
        p.value.data_mut().copy_from_slice(&data);
    }
}

fn map_param(store: &mut ParamStore, name: &str, f: impl Fn(f64) -> f64) {
    if let Some(p) = store.get_mut(&pname(name)) {
        p.value.data_mut().iter_mut().for_each(|v| *v = f(*v));
    }
}

/// `re^2 + im^2`.
pub fn squared_modulus(z: &ComplexTensor) -> Tensor {
    let data = z
        .real
        .data()
        .iter()
        .zip(z.imag.data())
        .map(|(r, i)| r * r + i * i)
        .collect();
    Tensor::new(z.shape().to_vec(), data).expect("shape of a valid complex tensor")
}

/// Unit-sum Gaussian kernels `(N, P)` on the centered grid.
pub fn gaussian_kernels_on(tape: &mut Tape, sigma_p: Var, p: usize) -> Result<Var> {
    let n = tape.shape(sigma_p)[0];
    let grid = filterbank::tap_grid(p);
    let k = grid.len();
    let shape = [n, k];
    let t2 = tape.constant(Tensor::new(
        vec![1, k],
        grid.iter().map(|t| t * t).collect(),
    )?);
    let t2 = tape.broadcast_to(t2, &shape)?;
    let s = tape.reshape(sigma_p, &[n, 1])?;
    let s = tape.broadcast_to(s, &shape)?;
    let s2 = tape.mul(s, s)?;
    let q = tape.div(t2, s2)?;
    let q = tape.scale(q, -0.5)?;
    let g = tape.exp(q)?;
    let total = tape.sum_axis(g, 1)?;
    let total = tape.reshape(total, &[n, 1])?;
    let total = tape.broadcast_to(total, &shape)?;
    tape.div(g, total)
}

/// Per-channel Gaussian lowpass filter and decimation of `x: (B, N, T)`.
///
/// Output frame `j` is centered on input sample `j * stride + stride / 2`,
/// giving `T / stride` frames (zero padding at the edges).
pub fn gaussian_pool_on(
    tape: &mut Tape,
    x: Var,
    sigma_p: Var,
    p: usize,
    stride: usize,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let [_, n, t] = shape[..] else {
        return Err(Error::arg(format!(
            "gaussian pooling expects (B, N, T), got {shape:?}"
        )));
    };
    let kern = gaussian_kernels_on(tape, sigma_p, p)?;
    let k = tape.shape(kern)[1];
    let frames = t / stride;
    if frames == 0 || k / 2 < stride / 2 {
        return Err(Error::arg(format!(
            "gaussian pooling: {t} frames too short for stride {stride}"
        )));
    }
    let pad_left = k / 2 - stride / 2;
    let pad_right = ((frames - 1) * stride + k).saturating_sub(t + pad_left);
    let w = tape.reshape(kern, &[n, 1, k])?;
    let y = tape.conv1d(x, w, None, stride, (pad_left, pad_right), n)?;
    tape.narrow(y, 2, 0, frames)
}

/// Standalone Gaussian pooling of a `(N, T)` map.
pub fn gaussian_lowpass_pool(
    map: &Tensor,
    sigma_p: &[f64],
    p: usize,
    stride: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(map.clone());
    let x = tape.reshape(x, &[1, map.shape()[0], map.shape()[1]])?;
    let s = tape.constant(Tensor::from_vec(sigma_p.to_vec()));
    let y = gaussian_pool_on(&mut tape, x, s, p, stride)?;
    let shape = tape.shape(y)[1..].to_vec();
    tape.value(y).reshaped(&shape)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcenParams {
    pub alpha: Vec<f64>,
    pub delta: Vec<f64>,
    pub r: Vec<f64>,
    pub s: f64,
    pub eps: f64,
}

/// `(x / (eps + m)^alpha + delta)^r - delta^r` on `x: (B, N, T)` with the
/// per-channel vectors `alpha`, `delta`, `r` of shape `(N)`.
pub fn pcen_on(
    tape: &mut Tape,
    x: Var,
    alpha: Var,
    delta: Var,
    r: Var,
    s: f64,
    eps: f64,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let n = shape[1];
    let per_channel = |tape: &mut Tape, v: Var| -> Result<Var> {
        let v = tape.reshape(v, &[1, n, 1])?;
        tape.broadcast_to(v, &shape)
    };
    let m = tape.ema(x, s)?;
    let base = tape.add_scalar(m, eps)?;
    let a = per_channel(tape, alpha)?;
    let den = tape.pow(base, a)?;
    let ratio = tape.div(x, den)?;
    let d = per_channel(tape, delta)?;
    let shifted = tape.add(ratio, d)?;
    let rb = per_channel(tape, r)?;
    let compressed = tape.pow(shifted, rb)?;
    let offset = tape.pow(delta, r)?;
    let offset = per_channel(tape, offset)?;
    tape.sub(compressed, offset)
}

/// Standalone PCEN of a non-negative `(N, T)` map.
pub fn pcen(map: &Tensor, params: &PcenParams) -> Result<Tensor> {
    let [n, t] = map.shape()[..] else {
        return Err(Error::arg(format!(
            "pcen expects (N, T), got {:?}",
            map.shape()
        )));
    };
    if map.data().iter().any(|&v| v < 0.0) {
        return Err(Error::arg("pcen input must be non-negative"));
    }
    for v in [&params.alpha, &params.delta, &params.r] {
        if v.len() != n {
            return Err(Error::shape("pcen", &[n], &[v.len()]));
        }
    }
    let mut tape = Tape::new();
    let x = tape.constant(map.reshaped(&[1, n, t])?);
    let a = tape.constant(Tensor::from_vec(params.alpha.clone()));
    let d = tape.constant(Tensor::from_vec(params.delta.clone()));
    let r = tape.constant(Tensor::from_vec(params.r.clone()));
    let y = pcen_on(&mut tape, x, a, d, r, params.s, params.eps)?;
    tape.value(y).reshaped(&[n, t])
}

/// Intermediate frontend outputs, each `(B, C, T)`.
#[derive(Clone, Copy, Debug)]
pub struct Stages {
    /// Filterbank envelope (squared modulus or rectified sinc output).
    pub envelope: Var,
    /// After decimation and, when enabled, PCEN.
    pub features: Var,
    /// After max pooling and BN + SELU.
    pub output: Var,
}

/// Runs the frontend on `wave: (B, L)`.
pub fn forward(ctx: &mut Ctx, cfg: &FrontendConfig, wave: Var) -> Result<Stages> {
    let shape = ctx.shape(wave).to_vec();
    let [b, len] = shape[..] else {
        return Err(Error::arg(format!(
            "frontend expects (B, L) waveforms, got {shape:?}"
        )));
    };
    cfg.output_shape(len)?;
    let x = ctx.tape.reshape(wave, &[b, 1, len])?;
    let n = cfg.filters;
    let k = cfg.taps();

    let envelope = if cfg.kind.is_gabor() {
        let eta = ctx.param(&pname("eta"))?;
        let sigma = ctx.param(&pname("sigma"))?;
        let (re, im) = filterbank::gabor_kernels_on(&mut ctx.tape, eta, sigma, cfg.kernel_len)?;
        let re = ctx.tape.reshape(re, &[n, 1, k])?;
        let im = ctx.tape.reshape(im, &[n, 1, k])?;
        let yr = ctx.tape.conv1d(x, re, None, 1, (0, 0), 1)?;
        let yi = ctx.tape.conv1d(x, im, None, 1, (0, 0), 1)?;
        let yr2 = ctx.tape.mul(yr, yr)?;
        let yi2 = ctx.tape.mul(yi, yi)?;
        ctx.tape.add(yr2, yi2)?
    } else {
        let f1 = ctx.param(&pname("f1"))?;
        let f2 = ctx.param(&pname("f2"))?;
        let kern = filterbank::sinc_kernels_on(
            &mut ctx.tape,
            f1,
            f2,
            cfg.kernel_len,
            cfg.sample_rate,
            Window::Hamming,
        )?;
        let kern = ctx.tape.reshape(kern, &[n, 1, k])?;
        let y = ctx.tape.conv1d(x, kern, None, 1, (0, 0), 1)?;
        ctx.tape.abs(y)?
    };
    ctx.trace("filterbank", envelope);

    let mut features = if cfg.uses_gaussian_pool() {
        let sp = ctx.param(&pname("pool_sigma"))?;
        gaussian_pool_on(&mut ctx.tape, envelope, sp, k, cfg.stride)?
    } else {
        ctx.tape
            .max_pool(envelope, 2, cfg.stride, cfg.stride, PoolPad::NONE)?
    };
    if cfg.kind == FrontendKind::GaborPcen {
        let a = ctx.param(&pname("pcen_alpha"))?;
        let d = ctx.param(&pname("pcen_delta"))?;
        let r = ctx.param(&pname("pcen_r"))?;
        features = pcen_on(&mut ctx.tape, features, a, d, r, cfg.pcen.s, cfg.pcen.eps)?;
    }
    ctx.trace("pooled", features);

    let pooled = match cfg.max_pool {
        MaxPoolAxis::Time => ctx.tape.max_pool(features, 2, 3, 1, PoolPad::same(3))?,
        MaxPoolAxis::Filters => ctx.tape.max_pool(features, 1, 3, 3, PoolPad::NONE)?,
    };
    let normed = nn::batch_norm(ctx, &pname("bn"), pooled)?;
    let output = ctx.tape.selu(normed)?;
    ctx.trace("frontend", output);
    Ok(Stages {
        envelope,
        features,
        output,
    })
}
