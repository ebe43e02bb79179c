//! Fixtures shared by the benchmarks.

use gaborspoof_core::data::Key;
use gaborspoof_core::eval::TrialScore;
use gaborspoof_core::frontend::{FrontendConfig, FrontendKind, MaxPoolAxis, PcenInit};
use gaborspoof_core::rawnet2::RawNet2Config;
use gaborspoof_core::ModelConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn noise(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

/// Overlapping bonafide and spoof score clouds.
pub fn scores(seed: u64, n: usize) -> Vec<TrialScore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let key = if i % 2 == 0 {
                Key::Bonafide
            } else {
                Key::Spoof
            };
            let shift = if key == Key::Bonafide { 1.0 } else { 0.0 };
            TrialScore {
                utt_id: format!("u{i}"),
                attack: if key == Key::Bonafide {
                    "-".into()
                } else {
                    format!("A{:02}", 7 + i % 13)
                },
                key,
                score: rng.gen_range(-2.0..2.0) + shift,
            }
        })
        .collect()
}

pub fn small_rawnet2(kind: FrontendKind, input_len: usize) -> ModelConfig {
    ModelConfig::RawNet2(RawNet2Config {
        frontend: FrontendConfig {
            kind,
            filters: 8,
            kernel_len: 256,
            sample_rate: 16000.0,
            stride: 3,
            gaussian_pool: true,
            max_pool: MaxPoolAxis::Time,
            pcen: PcenInit::default(),
        },
        input_len,
        block_widths: vec![8, 8, 16, 16, 16, 16],
        gru_hidden: 64,
        fc_hidden: 64,
    })
}
