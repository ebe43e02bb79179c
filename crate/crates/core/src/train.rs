//! Training and evaluation runners.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{self, AugmentSources, PolicyMode};
use crate::checkpoint;
use crate::config::{RunConfig, Split};
use crate::data::{self, Trial};
use crate::error::{Error, Result};
use crate::eval::{self, TrialScore};
use crate::model::{ModelConfig, BONAFIDE};
use crate::nn::{self, Ctx, ParamStore};
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,train_loss,val_eer,lr";
pub const BEST_CKPT: &str = "model.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const METRICS_CSV: &str = "metrics.csv";

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

fn stream_rng(seed: u64, stream: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(&stream.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_eer: Option<f64>,
    pub lr: f64,
}

impl EpochMetrics {
    pub fn csv_line(&self) -> String {
        let eer = self.val_eer.map(|e| e.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.epoch, self.train_loss, eer, self.lr)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs: Vec<EpochMetrics>,
    /// Epoch whose parameters are in the best checkpoint; `None` means the
    /// initial parameters.
    pub best_epoch: Option<usize>,
    pub out_dir: PathBuf,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Protocol entries and their fixed-length waveforms.
pub fn load_split(split: &Split, len: usize) -> Result<(Vec<Trial>, Vec<Vec<f64>>)> {
    let trials = data::parse_protocol(&split.protocol, &split.audio_dir)?;
    let waves = trials
        .par_iter()
        .map(|t| data::load_waveform(&t.audio, len))
        .collect::<Result<Vec<_>>>()?;
    Ok((trials, waves))
}

fn batch_tensor(waves: &[&[f64]]) -> Result<Tensor> {
    let len = waves.first().map_or(0, |w| w.len());
    Tensor::new(
        vec![waves.len(), len],
        waves.iter().flat_map(|w| w.iter().copied()).collect(),
    )
}

/// Bonafide log-probabilities in inference mode.
pub fn score_waves(
    model: &ModelConfig,
    store: &ParamStore,
    waves: &[Vec<f64>],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(waves.len());
    for chunk in waves.chunks(batch_size.max(1)) {
        let refs: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
        let mut ctx = Ctx::new(store, false, false);
        let x = ctx.constant(batch_tensor(&refs)?);
        let out = model.forward(&mut ctx, x)?;
        let logp = ctx.value(out);
        for b in 0..chunk.len() {
            let s = logp.data()[b * 2 + BONAFIDE];
            if !s.is_finite() {
                return Err(Error::NumericFault { op: "score" });
            }
            scores.push(s);
        }
    }
    Ok(scores)
}

pub fn trial_scores(trials: &[Trial], scores: &[f64]) -> Vec<TrialScore> {
    trials
        .iter()
        .zip(scores)
        .map(|(t, &score)| TrialScore {
            utt_id: t.utt_id.clone(),
            attack: t.attack.clone(),
            key: t.key,
            score,
        })
        .collect()
}

fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn all_finite(t: &Tensor) -> bool {
    t.data().iter().all(|v| v.is_finite())
}

/// Trains `cfg.model` on `cfg.data.train`, selecting the checkpoint with the
/// lowest EER on `cfg.data.dev`. Writes `config.json`, `metrics.csv`,
/// `model.ckpt` and `last.ckpt` under `out`.
pub fn run_training(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let train_split = cfg
        .data
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("data.train is required for training".into()))?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    let workers = pool(cfg.workers)?;
    let len = cfg.model.input_len();

    let (trials, waves) = workers.install(|| load_split(train_split, len))?;
    if trials.len() < 2 {
        return Err(Error::Config(
            "training split needs at least two trials".into(),
        ));
    }
    let dev = match &cfg.data.dev {
        Some(split) => Some(workers.install(|| load_split(split, len))?),
        None => None,
    };
    let sources = if cfg.augment.policy.uses_branches() {
        let s = AugmentSources::load(&cfg.augment)?;
        s.check(cfg.augment.policy)?;
        s
    } else {
        AugmentSources::default()
    };

    let mut store = cfg.model.init(cfg.seed)?;
    checkpoint::save(&out.join(BEST_CKPT), &store)?;
    let metrics_path = out.join(METRICS_CSV);
    let mut rows = Vec::new();
    write_metrics(&metrics_path, &rows)?;

    let bs = cfg.batch_size.min(trials.len());
    let batches_per_epoch = trials.len() / bs;
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut adam = Adam::new(cfg.optim.clone());
    let mut best: Option<(f64, usize)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..trials.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, SHUFFLE_STREAM, epoch as u64, 0));
        let epoch_lr = cfg
            .optim
            .lr_at((epoch - 1) * batches_per_epoch, total_steps)?;
        let mut loss_sum = 0.0;
        for (bi, idx) in order.chunks_exact(bs).enumerate() {
            let batch: Vec<Vec<f64>> = if cfg.augment.policy == PolicyMode::None {
                idx.iter().map(|&i| waves[i].clone()).collect()
            } else {
                workers.install(|| {
                    idx.par_iter()
                        .map(|&i| {
                            let mut rng = augment::utterance_rng(cfg.seed, epoch as u64, i as u64);
                            augment::augment_policy(&waves[i], &mut rng, &sources, &cfg.augment)
                                .map(|(y, _)| y)
                        })
                        .collect::<Result<Vec<_>>>()
                })?
            };
            let labels: Vec<usize> = idx.iter().map(|&i| trials[i].key.label()).collect();
            let refs: Vec<&[f64]> = batch.iter().map(Vec::as_slice).collect();
            let step = (epoch - 1) * batches_per_epoch + bi;

            let mut ctx = Ctx::new(&store, true, true).with_rng(stream_rng(
                cfg.seed,
                DROPOUT_STREAM,
                epoch as u64,
                bi as u64,
            ));
            let x = ctx.constant(batch_tensor(&refs)?);
            let logp = cfg.model.forward(&mut ctx, x)?;
            let loss = nn::nll_loss(&mut ctx, logp, &labels)?;
            let loss_value = ctx.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::NumericFault {
                    op: "training loss",
                });
            }
            let (grads, bn) = ctx.backward(loss)?;
            if !grads.values().all(all_finite) {
                return Err(Error::NumericFault { op: "gradient" });
            }
            adam.step(&mut store, &grads, cfg.optim.lr_at(step, total_steps)?)?;
            nn::apply_bn_updates(&mut store, &bn)?;
            cfg.model.clamp(&mut store);
            if !store.iter().all(|(_, p)| all_finite(&p.value)) {
                return Err(Error::NumericFault {
                    op: "parameter update",
                });
            }
            loss_sum += loss_value;
        }

        let val_eer = match &dev {
            Some((dev_trials, dev_waves)) if !dev_trials.is_empty() => {
                let scores = score_waves(&cfg.model, &store, dev_waves, cfg.batch_size)?;
                Some(eval::compute_eer(&trial_scores(dev_trials, &scores))?.eer)
            }
            _ => None,
        };
        checkpoint::save(&out.join(LAST_CKPT), &store)?;
        // Without a dev split the latest epoch counts as best.
        let improved = match (val_eer, best) {
            (Some(e), Some((b, _))) => e < b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best = Some((val_eer.unwrap_or(f64::INFINITY), epoch));
            checkpoint::save(&out.join(BEST_CKPT), &store)?;
        }
        rows.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / batches_per_epoch as f64,
            val_eer,
            lr: epoch_lr,
        });
        write_metrics(&metrics_path, &rows)?;
    }
    Ok(TrainSummary {
        epochs: rows,
        best_epoch: best.map(|(_, e)| e),
        out_dir: out.to_path_buf(),
    })
}

/// Loads a checkpoint into freshly shaped parameters for `model`.
pub fn load_model(model: &ModelConfig, path: &Path) -> Result<ParamStore> {
    let mut store = model.init(0)?;
    let saved = checkpoint::load(path)?;
    store.load_from(&saved)?;
    Ok(store)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scores: Vec<TrialScore>,
    /// Per-attack EER followed by the pooled entry.
    pub table: Vec<(String, f64)>,
}

pub const SCORES_FILE: &str = "scores.txt";
pub const EER_CSV: &str = "eer.csv";

/// Scores `split` with the parameters in `ckpt` and writes `scores.txt` and
/// `eer.csv` under `out`.
pub fn run_eval(cfg: &RunConfig, ckpt: &Path, split: &Split, out: &Path) -> Result<EvalReport> {
    cfg.model.validate()?;
    let store = load_model(&cfg.model, ckpt)?;
    let workers = pool(cfg.workers)?;
    let (trials, waves) = workers.install(|| load_split(split, cfg.model.input_len()))?;
    let scores = trial_scores(
        &trials,
        &score_waves(&cfg.model, &store, &waves, cfg.batch_size)?,
    );
    let table = eval::per_attack_eer(&scores)?;
    fs::create_dir_all(out)?;
    eval::write_scores(&out.join(SCORES_FILE), &scores)?;
    fs::write(out.join(EER_CSV), eval::eer_table_csv(&table))?;
    Ok(EvalReport { scores, table })
}
