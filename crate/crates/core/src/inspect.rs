//! Filterbank and feature dumps as CSV.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::Result;
use crate::filterbank::{self, GaborParams, SincParams, Window};
use crate::frontend::{self, FrontendConfig};
use crate::model::ModelConfig;
use crate::nn::{Ctx, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FilterSummary {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    /// Frequency of the largest response bin.
    pub peak_hz: f64,
}

/// Time-domain kernels of a frontend, `(real, imag)` per filter.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernels {
    pub real: Vec<Vec<f64>>,
    pub imag: Option<Vec<Vec<f64>>>,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let n = t.shape()[1];
    t.data().chunks(n).map(<[f64]>::to_vec).collect()
}

fn values(store: &ParamStore, name: &str) -> Result<Vec<f64>> {
    Ok(store
        .value(&format!("{}.{name}", frontend::PREFIX))?
        .data()
        .to_vec())
}

pub fn kernels(cfg: &FrontendConfig, store: &ParamStore) -> Result<Kernels> {
    if cfg.kind.is_gabor() {
        let p = GaborParams::new(
            values(store, "eta")?,
            values(store, "sigma")?,
            cfg.kernel_len,
        )?;
        let k = filterbank::gabor_kernels(&p)?;
        Ok(Kernels {
            real: rows(&k.real),
            imag: Some(rows(&k.imag)),
        })
    } else {
        let p = SincParams::new(
            values(store, "f1")?,
            values(store, "f2")?,
            cfg.kernel_len,
            cfg.sample_rate,
            Window::Hamming,
        )?;
        Ok(Kernels {
            real: rows(&filterbank::sinc_kernels(&p)?),
            imag: None,
        })
    }
}

pub fn response_fft_len(cfg: &FrontendConfig) -> usize {
    cfg.taps().next_power_of_two().max(1024)
}

/// Magnitude responses in dB relative to each filter's peak, with the bin
/// spacing in Hz.
pub fn responses(cfg: &FrontendConfig, k: &Kernels) -> Result<(Vec<Vec<f64>>, f64)> {
    let n_fft = response_fft_len(cfg);
    let mut out = Vec::with_capacity(k.real.len());
    let mut bin_hz = 0.0;
    for (i, re) in k.real.iter().enumerate() {
        let im = k.imag.as_ref().map(|m| m[i].as_slice());
        let r = filterbank::frequency_response(re, im, n_fft, cfg.sample_rate)?;
        bin_hz = r.bin_hz;
        let peak = r
            .magnitudes
            .iter()
            .fold(0.0f64, |a, &b| a.max(b))
            .max(f64::MIN_POSITIVE);
        out.push(
            r.magnitudes
                .iter()
                .map(|m| (20.0 * (m / peak).log10()).max(filterbank::SIDELOBE_FLOOR_DB))
                .collect(),
        );
    }
    Ok((out, bin_hz))
}

pub fn summaries(cfg: &FrontendConfig, store: &ParamStore) -> Result<Vec<FilterSummary>> {
    let k = kernels(cfg, store)?;
    let (resp, bin_hz) = responses(cfg, &k)?;
    let sr = cfg.sample_rate;
    let bands: Vec<(f64, f64)> = if cfg.kind.is_gabor() {
        values(store, "eta")?
            .iter()
            .zip(values(store, "sigma")?)
            .map(|(e, s)| (e * sr, sr / (2.0 * PI * s)))
            .collect()
    } else {
        values(store, "f1")?
            .iter()
            .zip(values(store, "f2")?)
            .map(|(a, b)| ((a + b) / 2.0, b - a))
            .collect()
    };
    Ok(bands
        .into_iter()
        .zip(&resp)
        .map(|((center_hz, bandwidth_hz), r)| {
            let peak = r
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > r[best] { i } else { best });
            FilterSummary {
                center_hz,
                bandwidth_hz,
                peak_hz: peak as f64 * bin_hz,
            }
        })
        .collect())
}

pub fn filters_csv(s: &[FilterSummary]) -> String {
    let mut out = String::from("filter,center_hz,bandwidth_hz,peak_hz\n");
    for (i, f) in s.iter().enumerate() {
        let _ = writeln!(out, "{i},{},{},{}", f.center_hz, f.bandwidth_hz, f.peak_hz);
    }
    out
}

pub fn kernels_csv(k: &Kernels) -> String {
    let mut out = String::from("filter,tap,real,imag\n");
    for (i, re) in k.real.iter().enumerate() {
        let half = (re.len() / 2) as i64;
        for (t, &r) in re.iter().enumerate() {
            let im = k.imag.as_ref().map_or(0.0, |m| m[i][t]);
            let _ = writeln!(out, "{i},{},{r},{im}", t as i64 - half);
        }
    }
    out
}

pub fn responses_csv(resp: &[Vec<f64>], bin_hz: f64) -> String {
    let mut out = String::from("filter,freq_hz,magnitude_db\n");
    for (i, r) in resp.iter().enumerate() {
        for (b, &db) in r.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{db}", b as f64 * bin_hz);
        }
    }
    out
}

/// Frontend features `(C, T)` for one waveform in inference mode.
pub fn frontend_features(model: &ModelConfig, store: &ParamStore, wave: &[f64]) -> Result<Tensor> {
    let mut ctx = Ctx::new(store, false, false);
    let x = ctx.constant(Tensor::new(vec![1, wave.len()], wave.to_vec())?);
    let stages = frontend::forward(&mut ctx, model.frontend(), x)?;
    let f = ctx.value(stages.features);
    Tensor::new(f.shape()[1..].to_vec(), f.data().to_vec())
}

/// One row per channel.
pub fn matrix_csv(t: &Tensor) -> String {
    let cols = t.shape().last().copied().unwrap_or(0).max(1);
    let mut out = String::new();
    for row in t.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
