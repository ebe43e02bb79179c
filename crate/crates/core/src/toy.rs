//! Synthetic two-class corpus for exercising the training pipeline.
//!
//! Bonafide clips are pitch-jittered harmonic complexes with a syllabic
//! envelope and pink background noise. Three spoofing attacks derive from
//! the same generator:
//!
//! * `T01` randomizes every Fourier phase,
//! * `T02` smooths the magnitude spectrum,
//! * `T03` quantizes the waveform to eight amplitude levels.
//!
//! Every clip is scaled to a random loudness so energy alone does not
//! separate the classes.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::augment::utterance_rng;
use crate::data::{self, Key, Trial, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const ATTACKS: [&str; 3] = ["T01", "T02", "T03"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub seed: u64,
    pub train_per_class: usize,
    pub dev_per_class: usize,
    pub eval_per_class: usize,
    /// Samples per clip.
    pub clip_len: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train_per_class: 300,
            dev_per_class: 100,
            eval_per_class: 100,
            clip_len: 16000,
        }
    }
}

/// Protocol files and the shared audio directory of a generated corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub audio_dir: PathBuf,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub eval: PathBuf,
}

impl ToyCorpus {
    pub fn at(root: &Path) -> Self {
        Self {
            audio_dir: root.join("audio"),
            train: root.join("train.txt"),
            dev: root.join("dev.txt"),
            eval: root.join("eval.txt"),
        }
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn spectrum(x: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new()
        .plan_fft_forward(buf.len())
        .process(&mut buf);
    buf
}

fn inverse(mut buf: Vec<Complex<f64>>) -> Vec<f64> {
    let n = buf.len();
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

/// Rebuilds a real signal from the non-negative half of a spectrum.
fn from_half(half: &[Complex<f64>], n: usize) -> Vec<f64> {
    let mut full = vec![Complex::new(0.0, 0.0); n];
    for k in 0..=n / 2 {
        full[k] = half[k];
        if k > 0 && k < n - k {
            full[n - k] = half[k].conj();
        }
    }
    full[0].im = 0.0;
    if n % 2 == 0 {
        full[n / 2].im = 0.0;
    }
    inverse(full)
}

fn pink_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let white: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let spec = spectrum(&white);
    let half: Vec<Complex<f64>> = (0..=n / 2)
        .map(|k| {
            if k == 0 {
                Complex::new(0.0, 0.0)
            } else {
                spec[k] / (k as f64).sqrt()
            }
        })
        .collect();
    let y = from_half(&half, n);
    let r = rms(&y).max(1e-12);
    y.into_iter().map(|v| v / r).collect()
}

fn bonafide(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let f0 = rng.gen_range(90.0..240.0);
    let vib: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.5..6.0),
                rng.gen_range(0.005..0.02),
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let f1 = rng.gen_range(300.0..900.0);
    let f2 = rng.gen_range(1000.0..2500.0);
    let bw = rng.gen_range(120.0..250.0);
    let rate = rng.gen_range(2.0..5.0);
    let env_phase = rng.gen_range(0.0..2.0 * PI);
    let harmonics = (4000.0 / f0) as usize;
    let amps: Vec<f64> = (1..=harmonics)
        .map(|k| {
            let f = k as f64 * f0;
            let formant = (-((f - f1) / bw).powi(2) / 2.0).exp()
                + 0.6 * (-((f - f2) / bw).powi(2) / 2.0).exp();
            (0.15 + formant) / k as f64
        })
        .collect();

    let mut theta = 0.0;
    let mut x = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let jitter: f64 = vib
            .iter()
            .map(|&(r, a, p)| a * (2.0 * PI * r * t + p).sin())
            .sum();
        theta += 2.0 * PI * f0 * (1.0 + jitter) / sr;
        let s: f64 = amps
            .iter()
            .enumerate()
            .map(|(k, a)| a * ((k + 1) as f64 * theta).sin())
            .sum();
        let env = 0.25 + 0.75 * (0.5 - 0.5 * (2.0 * PI * rate * t + env_phase).cos());
        x.push(s * env);
    }
    let snr_db = rng.gen_range(15.0..30.0);
    let g = rms(&x) / 10f64.powf(snr_db / 20.0);
    let noise = pink_noise(rng, n);
    x.iter().zip(&noise).map(|(s, w)| s + g * w).collect()
}

fn phase_randomized(rng: &mut ChaCha8Rng, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let spec = spectrum(x);
    let half: Vec<Complex<f64>> = (0..=n / 2)
        .map(|k| Complex::from_polar(spec[k].norm(), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    from_half(&half, n)
}

fn envelope_smoothed(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let spec = spectrum(x);
    let mags: Vec<f64> = (0..=n / 2).map(|k| spec[k].norm()).collect();
    let width = ((300.0 * n as f64 / SAMPLE_RATE as f64) as usize).max(1);
    let half: Vec<Complex<f64>> = (0..=n / 2)
        .map(|k| {
            let lo = k.saturating_sub(width / 2);
            let hi = (k + width / 2).min(n / 2);
            let avg = mags[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
            Complex::from_polar(avg, spec[k].arg())
        })
        .collect();
    from_half(&half, n)
}

fn quantized(x: &[f64]) -> Vec<f64> {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    x.iter()
        .map(|v| ((v / peak * 4.0).floor().clamp(-4.0, 3.0) + 0.5) / 4.0 * peak)
        .collect()
}

/// One clip of the given class. `attack` is ignored for bonafide clips.
pub fn synthesize(rng: &mut ChaCha8Rng, key: Key, attack: &str, n: usize) -> Result<Vec<f64>> {
    let base = bonafide(rng, n);
    let x = match (key, attack) {
        (Key::Bonafide, _) => base,
        (Key::Spoof, "T01") => phase_randomized(rng, &base),
        (Key::Spoof, "T02") => envelope_smoothed(&base),
        (Key::Spoof, "T03") => quantized(&base),
        (Key::Spoof, other) => return Err(Error::arg(format!("unknown toy attack {other:?}"))),
    };
    let target = rng.gen_range(0.03..0.15);
    let r = rms(&x).max(1e-12);
    Ok(x.into_iter()
        .map(|v| (v * target / r).clamp(-1.0, 1.0))
        .collect())
}

fn write_split(
    cfg: &ToyConfig,
    corpus: &ToyCorpus,
    split: usize,
    tag: &str,
    per_class: usize,
    protocol: &Path,
) -> Result<()> {
    let mut lines = String::new();
    for i in 0..2 * per_class {
        let (key, attack) = if i < per_class {
            (Key::Bonafide, "-".to_string())
        } else {
            (
                Key::Spoof,
                ATTACKS[(i - per_class) % ATTACKS.len()].to_string(),
            )
        };
        let mut rng = utterance_rng(cfg.seed, split as u64, i as u64);
        let speaker = format!("SPK_{:03}", rng.gen_range(0..20));
        let utt_id = format!("TOY_{tag}_{i:05}");
        let x = synthesize(&mut rng, key, &attack, cfg.clip_len)?;
        let audio = corpus.audio_dir.join(format!("{utt_id}.wav"));
        data::write_wav(&audio, &x)?;
        let trial = Trial {
            speaker,
            utt_id,
            attack,
            key,
            audio,
        };
        lines.push_str(&data::format_protocol_line(&trial));
        lines.push('\n');
    }
    fs::write(protocol, lines)?;
    Ok(())
}

/// Writes audio and train/dev/eval protocols under `root`.
pub fn make_toy_corpus(root: &Path, cfg: &ToyConfig) -> Result<ToyCorpus> {
    if cfg.clip_len == 0 || cfg.train_per_class == 0 {
        return Err(Error::Config(
            "toy corpus needs a positive clip length and training size".into(),
        ));
    }
    let corpus = ToyCorpus::at(root);
    fs::create_dir_all(&corpus.audio_dir)?;
    write_split(cfg, &corpus, 0, "T", cfg.train_per_class, &corpus.train)?;
    write_split(cfg, &corpus, 1, "D", cfg.dev_per_class, &corpus.dev)?;
    write_split(cfg, &corpus, 2, "E", cfg.eval_per_class, &corpus.eval)?;
    Ok(corpus)
}
