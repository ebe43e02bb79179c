//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{
    frontend_gradcheck, model_gradcheck, rawgat_truncated, rawnet2_truncated, small_frontend,
};
use gaborspoof_core::augment::{
    add_noise, companding_levels, draw_branch, ulaw_round_trip, ulaw_to_linear, utterance_rng,
};
use gaborspoof_core::config::{RunConfig, Split};
use gaborspoof_core::data::Key;
use gaborspoof_core::eval::{compute_eer, TrialScore, POOLED};
use gaborspoof_core::filterbank::{
    frequency_response, gabor_kernels, leakage_metrics, sinc_kernels, taps, GaborParams,
    SincParams, Window,
};
use gaborspoof_core::frontend::{pcen, FrontendKind, MaxPoolAxis, PcenParams};
use gaborspoof_core::rawgat::{self, top_k_indices, RawGatConfig};
use gaborspoof_core::rawnet2::{self, RawNet2Config};
use gaborspoof_core::toy::{make_toy_corpus, ToyConfig, ToyCorpus};
use gaborspoof_core::train::{self, BEST_CKPT, LAST_CKPT, METRICS_CSV, METRICS_HEADER};
use gaborspoof_core::{ModelConfig, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SR: f64 = 16000.0;
const SHAPE_BUDGET: Duration = Duration::from_secs(1);
const GRAD_BUDGET: Duration = Duration::from_secs(300);
const ORACLE_BUDGET: Duration = Duration::from_secs(120);
const MINUTE: Duration = Duration::from_secs(60);
const MODEL_GRAD_TOL: f64 = 1e-3;
const FRONTEND_GRAD_TOL: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-12;
const ORACLE_TRIALS: usize = 100;
const TOY_EER_MAX: f64 = 0.10;
const TOY_LOSS_RATIO: f64 = 0.5;
const BRANCH_DRAWS: u64 = 60_000;
const BRANCH_TOL: f64 = 0.02;
const ULAW_TOL: f64 = 1.0 / 64.0;
const SNR_TOL_DB: f64 = 0.01;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Outcome {
    let msg = msg.into();
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn config_path(name: &str) -> String {
    format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn shapes() -> Outcome {
    let start = Instant::now();
    let r: HashMap<_, _> = rawnet2::shape_plan(&RawNet2Config::default())
        .map_err(|e| e.to_string())?
        .into_iter()
        .collect();
    let g: HashMap<_, _> = rawgat::shape_plan(&RawGatConfig::default())
        .map_err(|e| e.to_string())?
        .into_iter()
        .collect();
    let expected: [(&HashMap<String, Vec<usize>>, &str, &[usize]); 7] = [
        (&r, "frontend", &[20, 21192]),
        (&r, "stack1", &[128, 784]),
        (&r, "stack2", &[128, 29]),
        (&g, "frontend", &[23, 21490]),
        (&g, "stack1", &[32, 23, 795]),
        (&g, "stack2", &[64, 23, 29]),
        (&g, "fusion", &[32, 12]),
    ];
    for (plan, key, want) in expected {
        let got = plan.get(key).ok_or(format!("missing stage {key}"))?;
        if got.as_slice() != want {
            return Err(format!("{key}: {got:?} != {want:?}"));
        }
    }
    let fe = RawNet2Config::default().frontend;
    if fe.output_shape(64600).map_err(|e| e.to_string())? != (20, 21192) {
        return Err("rawnet2 frontend output_shape".into());
    }
    let elapsed = start.elapsed();
    check(
        elapsed < SHAPE_BUDGET,
        format!("7 stage shapes match in {elapsed:?}"),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (label, cfg, seed) in [
        ("rawnet2", ModelConfig::RawNet2(rawnet2_truncated()), 11),
        ("rawgat", ModelConfig::RawGat(rawgat_truncated()), 12),
    ] {
        for (name, err) in model_gradcheck(&cfg, seed, 6, None, MODEL_GRAD_TOL) {
            if err >= MODEL_GRAD_TOL {
                return Err(format!("{label} {name}: {err:e}"));
            }
            worst = worst.max(err);
        }
    }
    let mut worst_fe = 0.0f64;
    for (kind, axis) in [
        (FrontendKind::GaborPcen, MaxPoolAxis::Time),
        (FrontendKind::GaborPcen, MaxPoolAxis::Filters),
        (FrontendKind::Sinc, MaxPoolAxis::Time),
    ] {
        for (name, err) in frontend_gradcheck(&small_frontend(kind, axis), 8) {
            if err >= FRONTEND_GRAD_TOL {
                return Err(format!("{kind:?}/{axis:?} {name}: {err:e}"));
            }
            worst_fe = worst_fe.max(err);
        }
    }
    let elapsed = start.elapsed();
    check(
        elapsed < GRAD_BUDGET,
        format!("model max {worst:.2e} < {MODEL_GRAD_TOL:e}, frontend max {worst_fe:.2e} < {FRONTEND_GRAD_TOL:e}, {elapsed:.0?}"),
    )
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn conv1d_naive(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    (pl, pr): (usize, usize),
    groups: usize,
) -> Vec<f64> {
    let (bs, l) = (x.shape()[0], x.shape()[2]);
    let (co, cig, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let lout = (l + pl + pr - k) / stride + 1;
    let cog = co / groups;
    let mut out = Vec::with_capacity(bs * co * lout);
    for n in 0..bs {
        for o in 0..co {
            for t in 0..lout {
                let mut s = b.data()[o];
                for c in 0..cig {
                    let cin = (o / cog) * cig + c;
                    for kk in 0..k {
                        let pos = (t * stride + kk) as isize - pl as isize;
                        if pos >= 0 && (pos as usize) < l {
                            s += w.at(&[o, c, kk]) * x.at(&[n, cin, pos as usize]);
                        }
                    }
                }
                out.push(s);
            }
        }
    }
    out
}

fn conv_oracle(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for trial in 0..ORACLE_TRIALS {
        let groups = rng.gen_range(1..3);
        let (cig, cog) = (rng.gen_range(1..3), rng.gen_range(1..3));
        // Every other trial uses a kernel long enough for the FFT path.
        let k = if trial % 2 == 0 {
            rng.gen_range(1..12)
        } else {
            rng.gen_range(48..90)
        };
        let stride = rng.gen_range(1..4);
        let pad = (rng.gen_range(0..k), rng.gen_range(0..k));
        let l = k + rng.gen_range(0..150);
        let batch = rng.gen_range(1..3);
        let x = random_tensor(rng, &[batch, groups * cig, l]);
        let w = random_tensor(rng, &[groups * cog, cig, k]);
        let b = random_tensor(rng, &[groups * cog]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            tape.constant(b.clone()),
        );
        let y = tape
            .conv1d(xv, wv, Some(bv), stride, pad, groups)
            .map_err(|e| e.to_string())?;
        let want = conv1d_naive(&x, &w, &b, stride, pad, groups);
        let got = tape.value(y).data();
        if got.len() != want.len() {
            return Err(format!(
                "conv trial {trial}: {} outputs, expected {}",
                got.len(),
                want.len()
            ));
        }
        worst = got
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(worst, f64::max);
    }
    Ok(worst)
}

fn pcen_recursion(x: &Tensor, p: &PcenParams) -> Vec<f64> {
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

fn pcen_oracle(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_TRIALS {
        let (n, t) = (rng.gen_range(1..8), rng.gen_range(1..60));
        let x = random_map(rng, n, t);
        let p = PcenParams {
            alpha: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
            delta: (0..n).map(|_| rng.gen_range(0.0..3.0)).collect(),
            r: (0..n).map(|_| rng.gen_range(0.05..1.0)).collect(),
            s: rng.gen_range(0.01..0.5),
            eps: 1e-6,
        };
        let y = pcen(&x, &p).map_err(|e| e.to_string())?;
        worst = y
            .data()
            .iter()
            .zip(pcen_recursion(&x, &p))
            .map(|(a, b)| (a - b).abs())
            .fold(worst, f64::max);
    }
    Ok(worst)
}

fn top_k_by_sort(scores: &[f64], k: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
    for i in 0..pairs.len() {
        for j in 0..pairs.len() - 1 - i {
            let (a, b) = (pairs[j], pairs[j + 1]);
            if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                pairs.swap(j, j + 1);
            }
        }
    }
    let mut idx: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
    idx.sort();
    idx
}

fn top_k_oracle(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for trial in 0..ORACLE_TRIALS {
        let n = rng.gen_range(1..40);
        let scores: Vec<f64> = if trial % 2 == 0 {
            (0..n).map(|_| rng.gen_range(0..4) as f64 / 4.0).collect()
        } else {
            (0..n).map(|_| rng.gen::<f64>()).collect()
        };
        let k = rng.gen_range(1..=n);
        if top_k_indices(&scores, k) != top_k_by_sort(&scores, k) {
            return Err(format!("top-k trial {trial}: {scores:?}, k={k}"));
        }
    }
    Ok(())
}

fn trial_set(rng: &mut ChaCha8Rng, grid: bool) -> Vec<TrialScore> {
    let (nb, ns) = (rng.gen_range(1..40), rng.gen_range(1..40));
    (0..nb + ns)
        .map(|i| {
            let key = if i < nb { Key::Bonafide } else { Key::Spoof };
            let shift = if key == Key::Bonafide { 1.0 } else { 0.0 };
            TrialScore {
                utt_id: format!("u{i}"),
                attack: if key == Key::Bonafide {
                    "-".into()
                } else {
                    "A01".into()
                },
                key,
                score: if grid {
                    rng.gen_range(0..12) as f64
                } else {
                    rng.gen_range(-3.0..3.0) + shift
                },
            }
        })
        .collect()
}

fn eer_brute_force(scores: &[TrialScore]) -> f64 {
    let nb = scores.iter().filter(|s| s.key == Key::Bonafide).count() as f64;
    let ns = scores.len() as f64 - nb;
    let mut best = (f64::INFINITY, f64::INFINITY);
    for cand in scores {
        let far = scores
            .iter()
            .filter(|s| s.key == Key::Spoof && s.score >= cand.score)
            .count() as f64
            / ns;
        let frr = scores
            .iter()
            .filter(|s| s.key == Key::Bonafide && s.score < cand.score)
            .count() as f64
            / nb;
        let key = ((far - frr).abs(), (far + frr) / 2.0);
        if key < best {
            best = key;
        }
    }
    best.1
}

fn eer_oracle(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for trial in 0..ORACLE_TRIALS {
        let set = trial_set(rng, trial % 2 == 0);
        let got = compute_eer(&set).map_err(|e| e.to_string())?.eer;
        let want = eer_brute_force(&set);
        if got != want {
            return Err(format!("eer trial {trial}: {got} != {want}"));
        }
    }
    Ok(())
}

fn oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let conv = conv_oracle(&mut rng)?;
    let pc = pcen_oracle(&mut rng)?;
    top_k_oracle(&mut rng)?;
    eer_oracle(&mut rng)?;
    let elapsed = start.elapsed();
    check(
        conv < ORACLE_TOL && pc < ORACLE_TOL && elapsed < ORACLE_BUDGET,
        format!("{ORACLE_TRIALS} instances each: conv {conv:.1e}, pcen {pc:.1e}, top-k exact, eer exact; {elapsed:.1?}"),
    )
}

fn mel_bank() -> Outcome {
    let start = Instant::now();
    let mut worst_sep = 0.0f64;
    for (n, w) in [(20, 1024), (40, 400), (70, 128)] {
        let g = GaborParams::mel(n, w, SR).map_err(|e| e.to_string())?;
        let s = SincParams::mel(n, w, SR, Window::Rectangular).map_err(|e| e.to_string())?;
        let gk = gabor_kernels(&g).map_err(|e| e.to_string())?;
        let sk = sinc_kernels(&s).map_err(|e| e.to_string())?;
        let k = taps(w);
        let n_fft = k.next_power_of_two() * 2;
        let mut last = 0;
        for i in 0..n {
            let span = i * k..(i + 1) * k;
            let gr = frequency_response(
                &gk.real.data()[span.clone()],
                Some(&gk.imag.data()[span.clone()]),
                n_fft,
                SR,
            )
            .map_err(|e| e.to_string())?;
            let target = gr.bin_of(g.eta.data()[i] * SR);
            if gr.argmax().abs_diff(target) > 1 {
                return Err(format!(
                    "{n} filters, filter {i}: peak bin {} vs {target}",
                    gr.argmax()
                ));
            }
            if gr.argmax() < last {
                return Err(format!("{n} filters, filter {i}: peaks not monotone"));
            }
            last = gr.argmax();

            let wide = n_fft * 2;
            let gr = frequency_response(
                &gk.real.data()[span.clone()],
                Some(&gk.imag.data()[span.clone()]),
                wide,
                SR,
            )
            .map_err(|e| e.to_string())?;
            let sr =
                frequency_response(&sk.data()[span], None, wide, SR).map_err(|e| e.to_string())?;
            let (lo, hi) = (s.f1.data()[i], s.f2.data()[i]);
            let gl = leakage_metrics(&gr, lo, hi)
                .map_err(|e| e.to_string())?
                .sidelobe_db;
            let sl = leakage_metrics(&sr, lo, hi)
                .map_err(|e| e.to_string())?
                .sidelobe_db;
            if gl >= sl {
                return Err(format!(
                    "{n} filters, filter {i}: gabor sidelobe {gl:.1} dB >= sinc {sl:.1} dB"
                ));
            }
            worst_sep = if worst_sep == 0.0 {
                sl - gl
            } else {
                worst_sep.min(sl - gl)
            };
        }
    }
    let elapsed = start.elapsed();
    check(
        elapsed < MINUTE,
        format!("peaks within 1 bin and ordered; gabor sidelobes below rectangular sinc by >= {worst_sep:.1} dB; {elapsed:.1?}"),
    )
}

fn pcen_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_TRIALS {
        let (n, t) = (rng.gen_range(1..8), rng.gen_range(1..60));
        let x = random_map(&mut rng, n, t);
        let p = PcenParams {
            alpha: vec![0.0; n],
            delta: (0..n).map(|_| rng.gen_range(0.0..3.0)).collect(),
            r: vec![1.0; n],
            s: rng.gen_range(0.01..0.5),
            eps: 1e-6,
        };
        let y = pcen(&x, &p).map_err(|e| e.to_string())?;
        worst = y
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b).abs())
            .fold(worst, f64::max);
    }
    check(
        worst < ORACLE_TOL,
        format!("max deviation {worst:.1e} < {ORACLE_TOL:e}"),
    )
}

fn toy_config(name: &str, root: &Path) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::load(Path::new(&config_path(name))).map_err(|e| e.to_string())?;
    let c = ToyCorpus::at(root);
    let split = |protocol| {
        Some(Split {
            protocol,
            audio_dir: c.audio_dir.clone(),
        })
    };
    cfg.data.train = split(c.train.clone());
    cfg.data.dev = split(c.dev.clone());
    cfg.data.eval = split(c.eval.clone());
    Ok(cfg)
}

/// Trains, then scores the eval split with the selected checkpoint.
fn toy_run(cfg: &RunConfig, out: &Path) -> Result<(f64, f64, f64), String> {
    let summary = train::run_training(cfg, out).map_err(|e| e.to_string())?;
    let first = summary.epochs.first().ok_or("no epochs")?.train_loss;
    let last = summary.epochs.last().ok_or("no epochs")?.train_loss;
    let split = cfg.data.eval.as_ref().ok_or("no eval split")?;
    let report = train::run_eval(cfg, &out.join(BEST_CKPT), split, &out.join("eval"))
        .map_err(|e| e.to_string())?;
    let eer = report
        .table
        .iter()
        .find(|(a, _)| a == POOLED)
        .ok_or("no pooled EER")?
        .1;
    let metrics = fs::read_to_string(out.join(METRICS_CSV)).map_err(|e| e.to_string())?;
    let mut lines = metrics.lines();
    if lines.next() != Some(METRICS_HEADER) || lines.count() != cfg.epochs {
        return Err(format!("{}: malformed metrics", out.display()));
    }
    Ok((first, last, eer))
}

fn toy_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().join("corpus");
    make_toy_corpus(&root, &ToyConfig::default()).map_err(|e| e.to_string())?;

    let start = Instant::now();
    let cfg = toy_config("rawnet2-small.json", &root)?;
    let (first, last, eer) = toy_run(&cfg, &dir.path().join("gabor"))?;
    let sinc = toy_config("rawnet2-small-sinc.json", &root)?;
    let (_, sinc_last, sinc_eer) = toy_run(&sinc, &dir.path().join("sinc"))?;
    check(
        eer < TOY_EER_MAX && last < TOY_LOSS_RATIO * first,
        format!(
            "gabor+pcen eval EER {eer:.4} < {TOY_EER_MAX}, loss {first:.4} -> {last:.4}; sinc EER {sinc_eer:.4}, loss {sinc_last:.4}; {:.0?}",
            start.elapsed()
        ),
    )
}

fn augmentation() -> Outcome {
    let start = Instant::now();
    let mut counts = [0usize; 6];
    for i in 0..BRANCH_DRAWS {
        counts[draw_branch(&mut utterance_rng(7, 0, i)) as usize] += 1;
    }
    let hist = counts
        .iter()
        .map(|&c| (c as f64 / BRANCH_DRAWS as f64 - 1.0 / 6.0).abs())
        .fold(0.0, f64::max);
    if hist >= BRANCH_TOL {
        return Err(format!("branch histogram {counts:?}"));
    }

    let top = *companding_levels(ulaw_to_linear).last().unwrap();
    let n = 200_000;
    let ramp: Vec<f64> = (0..=n)
        .map(|i| -top + 2.0 * top * i as f64 / n as f64)
        .collect();
    let ulaw = ramp
        .iter()
        .zip(ulaw_round_trip(&ramp))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if ulaw >= ULAW_TOL {
        return Err(format!("mu-law error {ulaw}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut snr_err = 0.0f64;
    for _ in 0..200 {
        let (lx, ln) = (rng.gen_range(100..3000), rng.gen_range(50..5000));
        let x: Vec<f64> = (0..lx).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let nz: Vec<f64> = (0..ln).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let snr = rng.gen_range(-10.0..30.0);
        let y = add_noise(&x, &nz, snr).map_err(|e| e.to_string())?;
        let ps: f64 = x.iter().map(|v| v * v).sum();
        let pn: f64 = y.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
        snr_err = snr_err.max((10.0 * (ps / pn).log10() - snr).abs());
    }
    let elapsed = start.elapsed();
    check(
        snr_err < SNR_TOL_DB && elapsed < MINUTE,
        format!("branch deviation {hist:.4} < {BRANCH_TOL}, mu-law {ulaw:.7} < 1/64, snr {snr_err:.1e} dB < {SNR_TOL_DB}; {elapsed:.1?}"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().join("corpus");
    let toy = ToyConfig {
        train_per_class: 24,
        dev_per_class: 8,
        eval_per_class: 8,
        clip_len: 8000,
        ..ToyConfig::default()
    };
    make_toy_corpus(&root, &toy).map_err(|e| e.to_string())?;
    let mut cfg = toy_config("rawnet2-small.json", &root)?;
    cfg.epochs = 2;
    let runs = ["a", "b"].map(|r| dir.path().join(r));
    for out in &runs {
        train::run_training(&cfg, out).map_err(|e| e.to_string())?;
    }
    for file in [METRICS_CSV, BEST_CKPT, LAST_CKPT] {
        let a = fs::read(runs[0].join(file)).map_err(|e| e.to_string())?;
        let b = fs::read(runs[1].join(file)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{file} differs between runs"));
        }
    }
    Ok(format!(
        "{METRICS_CSV}, {BEST_CKPT} and {LAST_CKPT} byte-identical across two runs"
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("shapes", shapes),
        ("gradients", gradients),
        ("oracles", oracles),
        ("mel gabor bank", mel_bank),
        ("pcen identity", pcen_identity),
        ("toy end-to-end", toy_end_to_end),
        ("augmentation", augmentation),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {} ({name}): PASS  {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL  {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria pass",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
