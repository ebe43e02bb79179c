//! Protocol files and WAV ingestion.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16000;
/// Fixed network input: four seconds at 16 kHz plus a 600-sample margin.
pub const INPUT_LEN: usize = 64600;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Key {
    Bonafide,
    Spoof,
}

impl Key {
    pub fn as_str(self) -> &'static str {
        match self {
            Key::Bonafide => "bonafide",
            Key::Spoof => "spoof",
        }
    }

    /// Class index in the model output.
    pub fn label(self) -> usize {
        match self {
            Key::Bonafide => crate::model::BONAFIDE,
            Key::Spoof => crate::model::SPOOF,
        }
    }
}

/// One protocol line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub speaker: String,
    pub utt_id: String,
    /// `-` for bonafide trials.
    pub attack: String,
    pub key: Key,
    pub audio: PathBuf,
}

/// Parses `speaker utt_id - attack key` lines. Audio files resolve to
/// `<audio_dir>/<utt_id>.wav`.
pub fn parse_protocol(path: &Path, audio_dir: &Path) -> Result<Vec<Trial>> {
    let text = fs::read_to_string(path)?;
    let mut seen = HashSet::new();
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [speaker, utt_id, _, attack, key] = fields[..] else {
            return Err(bad(format!("expected 5 fields, found {}", fields.len())));
        };
        let key = match key {
            "bonafide" => Key::Bonafide,
            "spoof" => Key::Spoof,
            other => return Err(bad(format!("unknown key {other:?}"))),
        };
        if key == Key::Bonafide && attack != "-" {
            return Err(bad(format!("bonafide trial carries attack {attack:?}")));
        }
        if key == Key::Spoof && attack == "-" {
            return Err(bad("spoof trial without attack label".into()));
        }
        if !seen.insert(utt_id.to_string()) {
            return Err(bad(format!("duplicate utterance {utt_id}")));
        }
        trials.push(Trial {
            speaker: speaker.to_string(),
            utt_id: utt_id.to_string(),
            attack: attack.to_string(),
            key,
            audio: audio_dir.join(format!("{utt_id}.wav")),
        });
    }
    Ok(trials)
}

pub fn format_protocol_line(t: &Trial) -> String {
    format!(
        "{} {} - {} {}",
        t.speaker,
        t.utt_id,
        t.attack,
        t.key.as_str()
    )
}

/// Samples of a 16 kHz mono PCM16 file scaled by 1/32768.
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let fail = |msg: String| Error::Ingestion {
        path: path.display().to_string(),
        msg,
    };
    let reader = hound::WavReader::open(path).map_err(|e| fail(e.to_string()))?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(fail(format!(
            "sample rate {} Hz, expected {SAMPLE_RATE}",
            spec.sample_rate
        )));
    }
    if spec.channels != 1 {
        return Err(fail(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(fail(format!(
            "{}-bit {:?} samples, expected PCM16",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    reader
        .into_samples::<i16>()
        .map(|s| {
            s.map(|v| v as f64 / 32768.0)
                .map_err(|e| fail(e.to_string()))
        })
        .collect()
}

/// Any PCM or float WAV, downmixed to mono, with its sample rate.
pub fn read_wav_any(path: &Path) -> Result<(Vec<f64>, u32)> {
    let fail = |msg: String| Error::Ingestion {
        path: path.display().to_string(),
        msg,
    };
    let reader = hound::WavReader::open(path).map_err(|e| fail(e.to_string()))?;
    let spec = reader.spec();
    let raw: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>(),
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
        }
    }
    .map_err(|e| fail(e.to_string()))?;
    let ch = spec.channels.max(1) as usize;
    let mono = raw
        .chunks(ch)
        .map(|c| c.iter().sum::<f64>() / ch as f64)
        .collect();
    Ok((mono, spec.sample_rate))
}

/// Writes 16 kHz mono PCM16, clipping to the representable range.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io = |e: hound::Error| Error::Ingestion {
        path: path.display().to_string(),
        msg: e.to_string(),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(io)?;
    for &s in samples {
        w.write_sample(to_pcm16(s)).map_err(io)?;
    }
    w.finalize().map_err(io)
}

pub fn to_pcm16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Repeats a short clip or truncates a long one to exactly `len` samples.
pub fn fit_length(x: &[f64], len: usize) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::arg("cannot tile an empty clip"));
    }
    Ok((0..len).map(|i| x[i % x.len()]).collect())
}

/// Reads a clip and fits it to `len` samples.
pub fn load_waveform(path: &Path, len: usize) -> Result<Vec<f64>> {
    let x = read_wav(path)?;
    fit_length(&x, len).map_err(|_| Error::Ingestion {
        path: path.display().to_string(),
        msg: "file has no samples".into(),
    })
}

/// Newline-delimited list of paths; relative entries resolve against the
/// list's directory.
pub fn read_path_list(path: &Path) -> Result<Vec<PathBuf>> {
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect())
}
