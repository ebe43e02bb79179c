use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gaborspoof_core::augment::{self, AugmentSources};
use gaborspoof_core::config::{RunConfig, Split};
use gaborspoof_core::toy::{self, ToyConfig, ToyCorpus};
use gaborspoof_core::{data, inspect, train, Error};

#[derive(Parser)]
#[command(
    name = "gaborspoof",
    version,
    about = "Learnable-frontend spoofing countermeasures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Defaults to the RawNet2 reference setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured worker count.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus per-epoch metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Toy-corpus root; fills the train, dev and eval splits.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a split and write the per-attack EER table.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "protocol")]
        corpus: Option<PathBuf>,
        /// Split of the toy corpus to score.
        #[arg(long, default_value = "eval", value_parser = ["train", "dev", "eval"])]
        split: String,
        #[arg(long, requires = "audio_dir")]
        protocol: Option<PathBuf>,
        #[arg(long)]
        audio_dir: Option<PathBuf>,
        /// Also write frontend features of every trial to `features/`.
        #[arg(long)]
        dump_features: bool,
    },
    /// Write filter parameters, kernels and frequency responses.
    InspectFilters {
        #[command(flatten)]
        common: Common,
        /// Trained parameters; freshly initialized ones otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate the synthetic bonafide/spoof corpus.
    MakeToyCorpus {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        n_per_class: usize,
        #[arg(long, default_value_t = 100)]
        dev_per_class: usize,
        #[arg(long, default_value_t = 100)]
        eval_per_class: usize,
        #[arg(long, default_value_t = 16000)]
        clip_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the configured augmentation policy to one file several times.
    AugmentPreview {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 6)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Contract(_) | Error::Shape { .. } => 2,
        Error::Parse { .. }
        | Error::Ingestion { .. }
        | Error::Io(_)
        | Error::Checkpoint { .. }
        | Error::Augmentation(_) => 3,
        Error::NumericFault { .. } => 4,
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn corpus_split(root: &Path, protocol: PathBuf) -> Option<Split> {
    Some(Split {
        protocol,
        audio_dir: ToyCorpus::at(root).audio_dir,
    })
}

fn cmd_train(common: Common, corpus: Option<PathBuf>, epochs: Option<usize>) -> Result<(), Error> {
    let mut cfg = load_config(&common)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(root) = corpus {
        let c = ToyCorpus::at(&root);
        cfg.data.train = corpus_split(&root, c.train);
        cfg.data.dev = corpus_split(&root, c.dev);
        cfg.data.eval = corpus_split(&root, c.eval);
    }
    let summary = train::run_training(&cfg, &common.out)?;
    for e in &summary.epochs {
        println!("{}", e.csv_line());
    }
    match summary.best_epoch {
        Some(b) => println!("best epoch {b}"),
        None => println!("no epochs run; initial parameters saved"),
    }
    if let Some(split) = &cfg.data.eval {
        let report = train::run_eval(
            &cfg,
            &common.out.join(train::BEST_CKPT),
            split,
            &common.out.join("eval"),
        )?;
        print!("{}", gaborspoof_core::eval::eer_table_csv(&report.table));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    common: Common,
    ckpt: PathBuf,
    corpus: Option<PathBuf>,
    split: String,
    protocol: Option<PathBuf>,
    audio_dir: Option<PathBuf>,
    dump_features: bool,
) -> Result<(), Error> {
    let cfg = load_config(&common)?;
    let target = match (corpus, protocol, audio_dir) {
        (Some(root), _, _) => {
            let c = ToyCorpus::at(&root);
            let p = match split.as_str() {
                "train" => c.train,
                "dev" => c.dev,
                _ => c.eval,
            };
            corpus_split(&root, p).expect("split is always set")
        }
        (None, Some(protocol), Some(audio_dir)) => Split {
            protocol,
            audio_dir,
        },
        _ => cfg.data.eval.clone().ok_or_else(|| {
            Error::Config("no evaluation split: pass --corpus, --protocol or set data.eval".into())
        })?,
    };
    let report = train::run_eval(&cfg, &ckpt, &target, &common.out)?;
    print!("{}", gaborspoof_core::eval::eer_table_csv(&report.table));
    if dump_features {
        let store = train::load_model(&cfg.model, &ckpt)?;
        let dir = common.out.join("features");
        fs::create_dir_all(&dir)?;
        for t in data::parse_protocol(&target.protocol, &target.audio_dir)? {
            let wave = data::load_waveform(&t.audio, cfg.model.input_len())?;
            let f = inspect::frontend_features(&cfg.model, &store, &wave)?;
            fs::write(
                dir.join(format!("{}.csv", t.utt_id)),
                inspect::matrix_csv(&f),
            )?;
        }
    }
    Ok(())
}

fn cmd_inspect(common: Common, ckpt: Option<PathBuf>) -> Result<(), Error> {
    let cfg = load_config(&common)?;
    let store = match ckpt {
        Some(p) => train::load_model(&cfg.model, &p)?,
        None => cfg.model.init(cfg.seed)?,
    };
    let fe = cfg.model.frontend();
    let k = inspect::kernels(fe, &store)?;
    let (resp, bin_hz) = inspect::responses(fe, &k)?;
    fs::create_dir_all(&common.out)?;
    fs::write(
        common.out.join("filters.csv"),
        inspect::filters_csv(&inspect::summaries(fe, &store)?),
    )?;
    fs::write(common.out.join("kernels.csv"), inspect::kernels_csv(&k))?;
    fs::write(
        common.out.join("responses.csv"),
        inspect::responses_csv(&resp, bin_hz),
    )?;
    println!(
        "{} filters written to {}",
        k.real.len(),
        common.out.display()
    );
    Ok(())
}

fn cmd_preview(common: Common, input: PathBuf, count: usize, epoch: u64) -> Result<(), Error> {
    let cfg = load_config(&common)?;
    let x = data::read_wav(&input)?;
    let sources = AugmentSources::load(&cfg.augment)?;
    sources.check(cfg.augment.policy)?;
    fs::create_dir_all(&common.out)?;
    let mut log = String::from("index,branch,codec\n");
    for i in 0..count {
        let mut rng = augment::utterance_rng(cfg.seed, epoch, i as u64);
        let (y, applied) = augment::augment_policy(&x, &mut rng, &sources, &cfg.augment)?;
        data::write_wav(&common.out.join(format!("preview_{i}.wav")), &y)?;
        log.push_str(&format!(
            "{i},{},{}\n",
            applied.branch.map_or("-", |b| b.name()),
            applied.codec.unwrap_or("-")
        ));
    }
    fs::write(common.out.join("applied.csv"), log)?;
    println!("{count} previews written to {}", common.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train {
            common,
            corpus,
            epochs,
        } => cmd_train(common, corpus, epochs),
        Command::Eval {
            common,
            checkpoint,
            corpus,
            split,
            protocol,
            audio_dir,
            dump_features,
        } => cmd_eval(
            common,
            checkpoint,
            corpus,
            split,
            protocol,
            audio_dir,
            dump_features,
        ),
        Command::InspectFilters { common, checkpoint } => cmd_inspect(common, checkpoint),
        Command::MakeToyCorpus {
            seed,
            n_per_class,
            dev_per_class,
            eval_per_class,
            clip_len,
            out,
        } => {
            let cfg = ToyConfig {
                seed,
                train_per_class: n_per_class,
                dev_per_class,
                eval_per_class,
                clip_len,
            };
            let c = toy::make_toy_corpus(&out, &cfg)?;
            println!(
                "train {}\ndev {}\neval {}",
                c.train.display(),
                c.dev.display(),
                c.eval.display()
            );
            Ok(())
        }
        Command::AugmentPreview {
            common,
            input,
            count,
            epoch,
        } => cmd_preview(common, input, count, epoch),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
