use std::fs;
use std::path::Path;

use gaborspoof_core::augment::PolicyMode;
use gaborspoof_core::checkpoint;
use gaborspoof_core::config::{RunConfig, Split};
use gaborspoof_core::frontend::{FrontendConfig, FrontendKind, MaxPoolAxis, PcenInit};
use gaborspoof_core::model::ModelConfig;
use gaborspoof_core::optim::Schedule;
use gaborspoof_core::rawnet2::RawNet2Config;
use gaborspoof_core::toy::{make_toy_corpus, ToyConfig, ToyCorpus};
use gaborspoof_core::train::*;
use gaborspoof_core::Error;

const LEN: usize = 3000;

fn tiny_model(kind: FrontendKind) -> ModelConfig {
    ModelConfig::RawNet2(RawNet2Config {
        frontend: FrontendConfig {
            kind,
            filters: 4,
            kernel_len: 64,
            sample_rate: 16000.0,
            stride: 3,
            gaussian_pool: true,
            max_pool: MaxPoolAxis::Time,
            pcen: PcenInit::default(),
        },
        input_len: LEN,
        block_widths: vec![4, 4, 4, 8, 8, 8],
        gru_hidden: 8,
        fc_hidden: 8,
    })
}

fn corpus(root: &Path) -> ToyCorpus {
    let cfg = ToyConfig {
        seed: 3,
        train_per_class: 6,
        dev_per_class: 3,
        eval_per_class: 3,
        clip_len: LEN,
    };
    make_toy_corpus(root, &cfg).unwrap()
}

fn split(protocol: &Path, corpus: &ToyCorpus) -> Option<Split> {
    Some(Split {
        protocol: protocol.to_path_buf(),
        audio_dir: corpus.audio_dir.clone(),
    })
}

fn run_config(c: &ToyCorpus, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig {
        model: tiny_model(FrontendKind::GaborPcen),
        epochs,
        batch_size: 4,
        seed: 11,
        ..RunConfig::default()
    };
    cfg.optim.lr = 1e-3;
    cfg.data.train = split(&c.train, c);
    cfg.data.dev = split(&c.dev, c);
    cfg.data.eval = split(&c.eval, c);
    cfg
}

#[test]
fn defaults_follow_the_reference_setup() {
    let cfg = RunConfig::default();
    assert_eq!(cfg.optim.lr, 1e-4);
    assert_eq!(cfg.optim.schedule, Schedule::Cosine);
    assert_eq!(cfg.batch_size, 16);
    assert_eq!(cfg.model.frontend().filters, 20);
    assert_eq!(RunConfig::rawgat().model.frontend().filters, 70);
    let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
    let minimal: RunConfig = serde_json::from_str("{}").unwrap();
    assert_eq!(minimal, cfg);
    assert!(serde_json::from_str::<RunConfig>(r#"{"epochz": 3}"#).is_err());
}

#[test]
fn zero_epochs_writes_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(&dir.path().join("data"));
    let out = dir.path().join("run");
    let summary = run_training(&run_config(&c, 0), &out).unwrap();
    assert!(summary.epochs.is_empty());
    assert_eq!(summary.best_epoch, None);
    assert_eq!(
        fs::read_to_string(out.join(METRICS_CSV)).unwrap(),
        format!("{METRICS_HEADER}\n")
    );
    assert!(out.join(BEST_CKPT).exists());
    assert!(!out.join(LAST_CKPT).exists());
    let init = run_config(&c, 0).model.init(11).unwrap();
    assert_eq!(checkpoint::load(&out.join(BEST_CKPT)).unwrap(), init);
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(&dir.path().join("data"));
    let cfg = run_config(&c, 2);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let sa = run_training(&cfg, &a).unwrap();
    run_training(&cfg, &b).unwrap();
    assert_eq!(sa.epochs.len(), 2);
    assert!(sa
        .epochs
        .iter()
        .all(|e| e.train_loss.is_finite() && e.val_eer.is_some()));
    assert!(sa.epochs[1].lr < sa.epochs[0].lr);
    for f in [METRICS_CSV, BEST_CKPT, LAST_CKPT] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let csv = fs::read_to_string(a.join(METRICS_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let mut threaded = cfg.clone();
    threaded.workers = 2;
    let t = dir.path().join("t");
    run_training(&threaded, &t).unwrap();
    assert_eq!(
        fs::read(a.join(LAST_CKPT)).unwrap(),
        fs::read(t.join(LAST_CKPT)).unwrap()
    );
}

#[test]
fn eval_writes_scores_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(&dir.path().join("data"));
    let cfg = run_config(&c, 1);
    let out = dir.path().join("run");
    run_training(&cfg, &out).unwrap();
    let eval_split = cfg.data.eval.clone().unwrap();
    let r1 = run_eval(&cfg, &out.join(BEST_CKPT), &eval_split, &out.join("e1")).unwrap();
    let r2 = run_eval(&cfg, &out.join(BEST_CKPT), &eval_split, &out.join("e2")).unwrap();
    assert_eq!(r1, r2);
    let lines = fs::read_to_string(out.join("e1").join(SCORES_FILE)).unwrap();
    assert_eq!(lines.lines().count(), 6);
    let csv = fs::read_to_string(out.join("e1").join(EER_CSV)).unwrap();
    assert_eq!(csv.lines().next(), Some("T01,T02,T03,all"));
}

#[test]
fn checkpoint_round_trip_scores_identically() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(&dir.path().join("data"));
    let cfg = run_config(&c, 0);
    let store = cfg.model.init(5).unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &store).unwrap();
    let loaded = load_model(&cfg.model, &path).unwrap();
    let (_, waves) = load_split(cfg.data.eval.as_ref().unwrap(), LEN).unwrap();
    let a = score_waves(&cfg.model, &store, &waves, 4).unwrap();
    let b = score_waves(&cfg.model, &loaded, &waves, 4).unwrap();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn incompatible_checkpoint_names_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(&dir.path().join("data"));
    let cfg = run_config(&c, 0);
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &cfg.model.init(1).unwrap()).unwrap();
    let mut other = cfg.clone();
    if let ModelConfig::RawNet2(m) = &mut other.model {
        m.gru_hidden = 6;
    }
    match run_eval(&other, &path, cfg.data.eval.as_ref().unwrap(), dir.path()) {
        Err(Error::Contract(msg)) => {
            assert!(msg.contains("rawnet2.") && msg.contains("shape"), "{msg}")
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn numeric_fault_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(&dir.path().join("data"));
    let mut cfg = run_config(&c, 3);
    cfg.optim.lr = 1e300;
    cfg.optim.schedule = Schedule::Constant;
    let out = dir.path().join("run");
    assert!(matches!(
        run_training(&cfg, &out),
        Err(Error::NumericFault { .. })
    ));
    let kept = checkpoint::load(&out.join(BEST_CKPT)).unwrap();
    assert!(kept
        .iter()
        .all(|(_, p)| p.value.data().iter().all(|v| v.is_finite())));
}

#[test]
fn sinc_frontend_and_codec_augmentation_train() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(&dir.path().join("data"));
    let mut cfg = run_config(&c, 1);
    cfg.model = tiny_model(FrontendKind::Sinc);
    cfg.augment.policy = PolicyMode::Codec;
    let s = run_training(&cfg, &dir.path().join("run")).unwrap();
    assert!(s.epochs[0].train_loss.is_finite());

    cfg.augment.policy = PolicyMode::Rir;
    assert!(matches!(
        run_training(&cfg, &dir.path().join("rir")),
        Err(Error::Config(_))
    ));
    cfg.data.train = None;
    assert!(matches!(
        run_training(&cfg, &dir.path().join("none")),
        Err(Error::Config(_))
    ));
}
