//! Training-time waveform augmentation: room responses, additive noise and
//! codec distortions under a seeded six-way policy.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::{self, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Products of lengths above this use FFT convolution.
const DIRECT_CONV_LIMIT: usize = 1 << 16;

/// Programs the external codec may launch.
pub const CODEC_ALLOWLIST: &[&str] = &[
    "ffmpeg", "sox", "lame", "oggenc", "oggdec", "opusenc", "opusdec",
];

fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = (a.len() + b.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|i| {
            Complex::new(
                a.get(i).copied().unwrap_or(0.0),
                b.get(i).copied().unwrap_or(0.0),
            )
        })
        .collect();
    fwd.process(&mut buf);
    // Two real spectra share one transform: A = (Z_k + conj Z_-k)/2, B = (Z_k - conj Z_-k)/2i.
    let mut prod = vec![Complex::new(0.0, 0.0); n];
    for k in 0..n {
        let z = buf[k];
        let zc = buf[(n - k) % n].conj();
        let fa = (z + zc) * 0.5;
        let fb = (z - zc) * Complex::new(0.0, -0.5);
        prod[k] = fa * fb;
    }
    inv.process(&mut prod);
    prod[..a.len() + b.len() - 1]
        .iter()
        .map(|z| z.re / n as f64)
        .collect()
}

/// Full linear convolution.
pub fn convolve_full(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    if a.len() * b.len() <= DIRECT_CONV_LIMIT {
        let mut out = vec![0.0; a.len() + b.len() - 1];
        for (i, &x) in a.iter().enumerate() {
            for (j, &h) in b.iter().enumerate() {
                out[i + j] += x * h;
            }
        }
        out
    } else {
        fft_convolve(a, b)
    }
}

fn peak(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m: f64, v| m.max(v.abs()))
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Reverberates `signal` with `rir`, keeping the input length and peak level.
pub fn convolve_rir(signal: &[f64], rir: &[f64]) -> Result<Vec<f64>> {
    if signal.is_empty() || rir.is_empty() {
        return Err(Error::arg(
            "convolve_rir needs a non-empty signal and impulse response",
        ));
    }
    if rir.iter().all(|&v| v == 0.0) {
        return Err(Error::arg("impulse response is silent"));
    }
    let mut y = convolve_full(signal, rir);
    y.truncate(signal.len());
    let (p_in, p_out) = (peak(signal), peak(&y));
    if p_out > 0.0 && p_in != p_out {
        let g = p_in / p_out;
        y.iter_mut().for_each(|v| *v *= g);
    }
    Ok(y)
}

/// Gain that brings `noise` to `snr_db` below `signal` (0 for +inf).
pub fn noise_gain(signal: &[f64], noise: &[f64], snr_db: f64) -> Result<f64> {
    if snr_db == f64::INFINITY {
        return Ok(0.0);
    }
    if !snr_db.is_finite() {
        return Err(Error::arg(format!(
            "SNR must be finite or +inf, got {snr_db}"
        )));
    }
    let ps = power(signal);
    let pn = power(noise);
    if ps == 0.0 {
        return Err(Error::arg("cannot set an SNR against a silent signal"));
    }
    if pn == 0.0 {
        return Err(Error::arg("noise clip is silent"));
    }
    Ok((ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Adds `noise` (tiled or cropped to length) at the requested SNR.
pub fn add_noise(signal: &[f64], noise: &[f64], snr_db: f64) -> Result<Vec<f64>> {
    if signal.is_empty() {
        return Err(Error::arg("add_noise needs a non-empty signal"));
    }
    let n = data::fit_length(noise, signal.len()).map_err(|_| Error::arg("noise clip is empty"))?;
    let g = noise_gain(signal, &n, snr_db)?;
    Ok(signal.iter().zip(&n).map(|(s, v)| s + g * v).collect())
}

const SEG_AEND: [i32; 8] = [0x1F, 0x3F, 0x7F, 0xFF, 0x1FF, 0x3FF, 0x7FF, 0xFFF];
const SEG_UEND: [i32; 8] = [0x3F, 0x7F, 0xFF, 0x1FF, 0x3FF, 0x7FF, 0xFFF, 0x1FFF];
const ULAW_BIAS: i32 = 0x84;
const ULAW_CLIP: i32 = 8159;

fn segment(v: i32, table: &[i32; 8]) -> usize {
    table.iter().position(|&e| v <= e).unwrap_or(8)
}

/// G.711 A-law encoding of a 16-bit sample.
pub fn linear_to_alaw(pcm: i16) -> u8 {
    let mut v = (pcm as i32) >> 3;
    let mask = if v >= 0 {
        0xD5
    } else {
        v = -v - 1;
        0x55
    };
    let seg = segment(v, &SEG_AEND);
    if seg >= 8 {
        return (0x7F ^ mask) as u8;
    }
    let mut a = (seg as i32) << 4;
    a |= if seg < 2 {
        (v >> 1) & 0xF
    } else {
        (v >> seg) & 0xF
    };
    (a ^ mask) as u8
}

pub fn alaw_to_linear(code: u8) -> i16 {
    let a = (code ^ 0x55) as i32;
    let mut t = (a & 0xF) << 4;
    let seg = (a & 0x70) >> 4;
    match seg {
        0 => t += 8,
        1 => t += 0x108,
        _ => {
            t += 0x108;
            t <<= seg - 1;
        }
    }
    (if a & 0x80 != 0 { t } else { -t }) as i16
}

/// G.711 µ-law encoding of a 16-bit sample.
pub fn linear_to_ulaw(pcm: i16) -> u8 {
    let mut v = (pcm as i32) >> 2;
    let mask = if v < 0 {
        v = -v;
        0x7F
    } else {
        0xFF
    };
    v = v.min(ULAW_CLIP) + (ULAW_BIAS >> 2);
    let seg = segment(v, &SEG_UEND);
    if seg >= 8 {
        return (0x7F ^ mask) as u8;
    }
    let u = ((seg as i32) << 4) | ((v >> (seg + 1)) & 0xF);
    (u ^ mask) as u8
}

pub fn ulaw_to_linear(code: u8) -> i16 {
    let u = !code as i32;
    let mut t = ((u & 0xF) << 3) + ULAW_BIAS;
    t <<= (u & 0x70) >> 4;
    (if u & 0x80 != 0 {
        ULAW_BIAS - t
    } else {
        t - ULAW_BIAS
    }) as i16
}

/// Sorted distinct reconstruction levels of a decoder, in full-scale units.
pub fn companding_levels(decode: fn(u8) -> i16) -> Vec<f64> {
    let mut levels: Vec<i16> = (0..=255u8).map(decode).collect();
    levels.sort_unstable();
    levels.dedup();
    levels.into_iter().map(|v| v as f64 / 32768.0).collect()
}

fn quantize_nearest(levels: &[f64], x: f64) -> f64 {
    let i = levels.partition_point(|&l| l < x);
    match (i.checked_sub(1).map(|j| levels[j]), levels.get(i)) {
        (Some(lo), Some(&hi)) => {
            if x - lo <= hi - x {
                lo
            } else {
                hi
            }
        }
        (Some(lo), None) => lo,
        (None, Some(&hi)) => hi,
        (None, None) => x,
    }
}

fn alaw_levels() -> &'static [f64] {
    static LEVELS: OnceLock<Vec<f64>> = OnceLock::new();
    LEVELS.get_or_init(|| companding_levels(alaw_to_linear))
}

fn ulaw_levels() -> &'static [f64] {
    static LEVELS: OnceLock<Vec<f64>> = OnceLock::new();
    LEVELS.get_or_init(|| companding_levels(ulaw_to_linear))
}

/// A-law encode/decode. Each sample maps to the nearest reconstruction level.
pub fn alaw_round_trip(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| quantize_nearest(alaw_levels(), v))
        .collect()
}

/// µ-law encode/decode. Each sample maps to the nearest reconstruction level.
pub fn ulaw_round_trip(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| quantize_nearest(ulaw_levels(), v))
        .collect()
}

/// Windowed-sinc lowpass (101 Hamming taps, same length as the input) followed
/// by uniform quantization to `bits` bits.
pub fn sim_lossy(x: &[f64], cutoff_hz: f64, bits: u32) -> Result<Vec<f64>> {
    let nyq = SAMPLE_RATE as f64 / 2.0;
    if !(cutoff_hz > 0.0 && cutoff_hz <= nyq) || !(2..=16).contains(&bits) {
        return Err(Error::arg(format!(
            "sim_lossy: cutoff {cutoff_hz} Hz, {bits} bits out of range"
        )));
    }
    const TAPS: usize = 101;
    let fc = cutoff_hz / SAMPLE_RATE as f64;
    let h: Vec<f64> = (0..TAPS)
        .map(|i| {
            let t = i as f64 - (TAPS / 2) as f64;
            let s = if t == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * t).sin() / (PI * t)
            };
            s * (0.54 - 0.46 * (2.0 * PI * i as f64 / (TAPS - 1) as f64).cos())
        })
        .collect();
    let full = convolve_full(x, &h);
    let levels = (1u32 << (bits - 1)) as f64;
    Ok(full[TAPS / 2..TAPS / 2 + x.len()]
        .iter()
        .map(|v| (v * levels).round().clamp(-levels, levels - 1.0) / levels)
        .collect())
}

/// One step of an external encode/decode chain. `{input}` and `{output}` in
/// `argv` are replaced by the previous and current file paths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalStep {
    pub argv: Vec<String>,
    pub output_ext: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case", deny_unknown_fields)]
pub enum CodecSpec {
    Alaw,
    Ulaw,
    SimLossy { cutoff_hz: f64, bits: u32 },
    External { steps: Vec<ExternalStep> },
}

impl CodecSpec {
    pub fn name(&self) -> &'static str {
        match self {
            CodecSpec::Alaw => "alaw",
            CodecSpec::Ulaw => "ulaw",
            CodecSpec::SimLossy { .. } => "sim_lossy",
            CodecSpec::External { .. } => "external",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CodecSpec::External { steps } => {
                if steps.is_empty() {
                    return Err(Error::Config(
                        "external codec needs at least one step".into(),
                    ));
                }
                for s in steps {
                    let program = s.argv.first().map(String::as_str).unwrap_or("");
                    let base = Path::new(program)
                        .file_name()
                        .and_then(|n| n.to_str())
                        .unwrap_or("");
                    if !CODEC_ALLOWLIST.contains(&base) {
                        return Err(Error::Config(format!(
                            "external codec program {program:?} is not allowlisted"
                        )));
                    }
                }
                Ok(())
            }
            CodecSpec::SimLossy { cutoff_hz, bits } => sim_lossy(&[0.0], *cutoff_hz, *bits)
                .map(|_| ())
                .map_err(|e| Error::Config(e.to_string())),
            _ => Ok(()),
        }
    }
}

/// Linear-interpolation resampling.
pub fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let ratio = from as f64 / to as f64;
    let n = ((x.len() as f64) / ratio).round().max(1.0) as usize;
    (0..n)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            let a = x[j.min(x.len() - 1)];
            let b = x[(j + 1).min(x.len() - 1)];
            a + (b - a) * frac
        })
        .collect()
}

fn run_external(x: &[f64], steps: &[ExternalStep]) -> Result<Vec<f64>> {
    CodecSpec::External {
        steps: steps.to_vec(),
    }
    .validate()?;
    let dir = tempfile::tempdir()?;
    let mut input: PathBuf = dir.path().join("step0.wav");
    data::write_wav(&input, x)?;
    for (i, step) in steps.iter().enumerate() {
        let output = dir
            .path()
            .join(format!("step{}.{}", i + 1, step.output_ext));
        let args: Vec<String> = step.argv[1..]
            .iter()
            .map(|a| {
                a.replace("{input}", &input.to_string_lossy())
                    .replace("{output}", &output.to_string_lossy())
            })
            .collect();
        let out = Command::new(&step.argv[0])
            .args(&args)
            .output()
            .map_err(|e| Error::Augmentation(format!("cannot run {}: {e}", step.argv[0])))?;
        if !out.status.success() {
            return Err(Error::Augmentation(format!(
                "{} exited with {}: {}",
                step.argv[0],
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        input = output;
    }
    let (y, sr) = data::read_wav_any(&input).map_err(|e| Error::Augmentation(e.to_string()))?;
    let y = resample(&y, sr, SAMPLE_RATE);
    data::fit_length(&y, x.len()).map_err(|_| Error::Augmentation("codec produced no audio".into()))
}

/// Applies one codec; output keeps the input length.
pub fn codec_chain(x: &[f64], spec: &CodecSpec) -> Result<Vec<f64>> {
    match spec {
        CodecSpec::Alaw => Ok(alaw_round_trip(x)),
        CodecSpec::Ulaw => Ok(ulaw_round_trip(x)),
        CodecSpec::SimLossy { cutoff_hz, bits } => sim_lossy(x, *cutoff_hz, *bits),
        CodecSpec::External { steps } => run_external(x, steps),
    }
}

/// The six equiprobable branches of the training policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Identity = 0,
    Rir = 1,
    Speech = 2,
    Music = 3,
    Noise = 4,
    SpeechMusic = 5,
}

impl Branch {
    pub const ALL: [Branch; 6] = [
        Branch::Identity,
        Branch::Rir,
        Branch::Speech,
        Branch::Music,
        Branch::Noise,
        Branch::SpeechMusic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Identity => "identity",
            Branch::Rir => "rir",
            Branch::Speech => "speech",
            Branch::Music => "music",
            Branch::Noise => "noise",
            Branch::SpeechMusic => "speech+music",
        }
    }
}

pub fn draw_branch(rng: &mut ChaCha8Rng) -> Branch {
    Branch::ALL[rng.gen_range(0..6)]
}

/// Which augmentations are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyMode {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "codec")]
    Codec,
    #[serde(rename = "rir")]
    Rir,
    #[serde(rename = "rir+codec")]
    RirCodec,
}

impl PolicyMode {
    pub fn uses_branches(self) -> bool {
        matches!(self, PolicyMode::Rir | PolicyMode::RirCodec)
    }

    pub fn uses_codec(self) -> bool {
        matches!(self, PolicyMode::Codec | PolicyMode::RirCodec)
    }
}

/// Uniform SNR ranges in dB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnrRanges {
    pub noise: (f64, f64),
    pub music: (f64, f64),
    pub speech: (f64, f64),
    pub speech_music: (f64, f64),
}

impl Default for SnrRanges {
    fn default() -> Self {
        Self {
            noise: (0.0, 15.0),
            music: (5.0, 15.0),
            speech: (13.0, 20.0),
            speech_music: (13.0, 20.0),
        }
    }
}

fn default_codec_prob() -> f64 {
    0.5
}

fn default_codecs() -> Vec<CodecSpec> {
    vec![
        CodecSpec::Alaw,
        CodecSpec::Ulaw,
        CodecSpec::SimLossy {
            cutoff_hz: 3400.0,
            bits: 8,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default)]
    pub policy: PolicyMode,
    /// Probability of the codec coin.
    #[serde(default = "default_codec_prob")]
    pub codec_prob: f64,
    #[serde(default = "default_codecs")]
    pub codecs: Vec<CodecSpec>,
    #[serde(default)]
    pub snr: SnrRanges,
    /// Newline-delimited WAV lists.
    #[serde(default)]
    pub rir_list: Option<PathBuf>,
    #[serde(default)]
    pub speech_list: Option<PathBuf>,
    #[serde(default)]
    pub music_list: Option<PathBuf>,
    #[serde(default)]
    pub noise_list: Option<PathBuf>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            policy: PolicyMode::None,
            codec_prob: default_codec_prob(),
            codecs: default_codecs(),
            snr: SnrRanges::default(),
            rir_list: None,
            speech_list: None,
            music_list: None,
            noise_list: None,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.codec_prob) {
            return Err(Error::Config(format!(
                "codec_prob {} outside [0, 1]",
                self.codec_prob
            )));
        }
        if self.policy.uses_codec() && self.codecs.is_empty() {
            return Err(Error::Config(
                "codec augmentation enabled without codecs".into(),
            ));
        }
        for c in &self.codecs {
            c.validate()?;
        }
        let s = &self.snr;
        for (lo, hi) in [s.noise, s.music, s.speech, s.speech_music] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("bad SNR range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Loaded augmentation clips.
#[derive(Clone, Debug, Default)]
pub struct AugmentSources {
    pub rir: Vec<Vec<f64>>,
    pub speech: Vec<Vec<f64>>,
    pub music: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
}

impl AugmentSources {
    /// Reads every clip named by the configured lists.
    pub fn load(cfg: &AugmentConfig) -> Result<Self> {
        let load = |list: &Option<PathBuf>| -> Result<Vec<Vec<f64>>> {
            let Some(list) = list else {
                return Ok(Vec::new());
            };
            data::read_path_list(list)?
                .iter()
                .map(|p| data::read_wav(p))
                .collect()
        };
        Ok(Self {
            rir: load(&cfg.rir_list)?,
            speech: load(&cfg.speech_list)?,
            music: load(&cfg.music_list)?,
            noise: load(&cfg.noise_list)?,
        })
    }

    fn pick<'a>(
        &'a self,
        list: &'a [Vec<f64>],
        name: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<&'a [f64]> {
        if list.is_empty() {
            return Err(Error::Config(format!(
                "policy drew the {name} branch but no {name} clips are configured"
            )));
        }
        Ok(&list[rng.gen_range(0..list.len())])
    }

    /// Fails unless every branch the policy can draw has clips.
    pub fn check(&self, mode: PolicyMode) -> Result<()> {
        if !mode.uses_branches() {
            return Ok(());
        }
        for (list, name) in [
            (&self.rir, "rir"),
            (&self.speech, "speech"),
            (&self.music, "music"),
            (&self.noise, "noise"),
        ] {
            if list.is_empty() {
                return Err(Error::Config(format!(
                    "{name} clips are required by the augmentation policy"
                )));
            }
        }
        Ok(())
    }
}

/// Generator for one utterance in one epoch.
pub fn utterance_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Noise crop of `len` samples from a random offset (tiled when shorter).
fn crop(clip: &[f64], len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let start = if clip.len() > len {
        rng.gen_range(0..=clip.len() - len)
    } else {
        0
    };
    (0..len).map(|i| clip[(start + i) % clip.len()]).collect()
}

fn draw_snr(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

pub fn apply_branch(
    signal: &[f64],
    branch: Branch,
    rng: &mut ChaCha8Rng,
    sources: &AugmentSources,
    snr: &SnrRanges,
) -> Result<Vec<f64>> {
    let len = signal.len();
    match branch {
        Branch::Identity => Ok(signal.to_vec()),
        Branch::Rir => {
            let rir = sources.pick(&sources.rir, "rir", rng)?;
            convolve_rir(signal, rir)
        }
        Branch::Speech | Branch::Music | Branch::Noise => {
            let (list, name, range) = match branch {
                Branch::Speech => (&sources.speech, "speech", snr.speech),
                Branch::Music => (&sources.music, "music", snr.music),
                _ => (&sources.noise, "noise", snr.noise),
            };
            let clip = sources.pick(list, name, rng)?;
            let n = crop(clip, len, rng);
            add_noise(signal, &n, draw_snr(rng, range))
        }
        Branch::SpeechMusic => {
            let s = crop(sources.pick(&sources.speech, "speech", rng)?, len, rng);
            let m = crop(sources.pick(&sources.music, "music", rng)?, len, rng);
            let mix: Vec<f64> = s.iter().zip(&m).map(|(a, b)| a + b).collect();
            add_noise(signal, &mix, draw_snr(rng, snr.speech_music))
        }
    }
}

/// What the policy did to one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Applied {
    pub branch: Option<Branch>,
    pub codec: Option<&'static str>,
}

/// Draws and applies the configured augmentation.
pub fn augment_policy(
    signal: &[f64],
    rng: &mut ChaCha8Rng,
    sources: &AugmentSources,
    cfg: &AugmentConfig,
) -> Result<(Vec<f64>, Applied)> {
    let mut applied = Applied {
        branch: None,
        codec: None,
    };
    let mut y = signal.to_vec();
    if cfg.policy.uses_branches() {
        let b = draw_branch(rng);
        y = apply_branch(&y, b, rng, sources, &cfg.snr)?;
        applied.branch = Some(b);
    }
    if cfg.policy.uses_codec() && rng.gen_bool(cfg.codec_prob) {
        let spec = &cfg.codecs[rng.gen_range(0..cfg.codecs.len())];
        y = codec_chain(
            &y.iter().map(|v| v.clamp(-1.0, 1.0)).collect::<Vec<_>>(),
            spec,
        )?;
        applied.codec = Some(spec.name());
    }
    Ok((y, applied))
}
