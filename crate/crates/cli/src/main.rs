//! `rfadvsim`: dataset synthesis, training, attack sweeps and certification.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rfadvsim::classifier::{train, Classifier, ClassifierModel};
use rfadvsim::defense::augment_training;
use rfadvsim::harness::{self, AttackKind, CertSummary, ExperimentConfig};
use rfadvsim::iqcore::write_dataset;
use rfadvsim::rng::substream;
use rfadvsim::Error;

#[derive(Parser)]
#[command(name = "rfadvsim", version, about = "Channel-aware adversarial attacks on RF modulation classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset file.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train a classifier and write its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Accuracy versus PNR for every configured attack.
    AttackSweep {
        #[command(flatten)]
        common: Common,
        /// CSV destination; falls back to `output`, then standard output.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Joint and per-receiver accuracy of broadcast attacks.
    BroadcastSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Train on the noise-augmented training split.
    DefendTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Certified predictions with abstention, one CSV row per frame.
    Certify {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Merge curve CSVs into a per-attack summary table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Also write the merged rows as CSV.
        #[arg(long)]
        merged: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> rfadvsim::Result<ExperimentConfig> {
    match &common.config {
        Some(p) => {
            if !p.exists() {
                return Err(Error::Config {
                    key: "--config".into(),
                    message: format!("{} does not exist", p.display()),
                });
            }
            ExperimentConfig::load(p)
        }
        None => {
            let mut cfg = ExperimentConfig::default();
            if let Ok(s) = std::env::var(harness::SEED_ENV) {
                cfg.seed = s.trim().parse().map_err(|_| Error::Config {
                    key: harness::SEED_ENV.into(),
                    message: format!("not an unsigned integer: `{s}`"),
                })?;
            }
            Ok(cfg)
        }
    }
}

fn sink(out: Option<&Path>) -> rfadvsim::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn train_model(cfg: &ExperimentConfig, augment: bool, out: &Path) -> rfadvsim::Result<()> {
    let ds = harness::load_dataset(cfg)?;
    let mut records = ds.train_records();
    if let Some([i, n]) = cfg.train.shard {
        records = harness::shard(&records, i, n);
    }
    if augment {
        let params = cfg.smoothing()?;
        let mut rng = substream(cfg.seed, 0x71, 0);
        records = augment_training(&records, params.k, params.sigma, &mut rng)?;
    }
    let mut model = ClassifierModel::new(cfg.architecture(), ds.num_classes(), rfadvsim::FRAME_LEN, cfg.seed)?;
    let history = train(&mut model, &records, &cfg.train_config())?;
    for e in &history.epochs {
        eprintln!("epoch {:>3}  loss {:.4}  train-acc {:.4}  steps {}", e.epoch, e.loss, e.accuracy, e.steps);
    }
    let test = ds.test_records();
    if !test.is_empty() {
        eprintln!("test accuracy {:.4}", rfadvsim::classifier::accuracy(&model, &test)?);
    }
    model.save(out)
}

fn run(cli: Cli) -> rfadvsim::Result<()> {
    match cli.command {
        Command::Synth { common, out } => {
            let cfg = load_config(&common)?;
            let ds = harness::load_dataset(&cfg)?;
            write_dataset(&ds, &out)?;
            eprintln!("wrote {} records to {}", ds.len(), out.display());
        }
        Command::Train { common, out } => train_model(&load_config(&common)?, false, &out)?,
        Command::DefendTrain { common, out } => train_model(&load_config(&common)?, true, &out)?,
        Command::AttackSweep { common, out } => {
            let cfg = load_config(&common)?;
            let model = harness::load_classifier(cfg.model.checkpoint.as_deref(), "model.checkpoint")?;
            let surrogate = match &cfg.model.surrogate {
                Some(p) => Some(harness::load_classifier(Some(p), "model.surrogate")?),
                None => None,
            };
            let ds = harness::load_dataset(&cfg)?;
            let frames = harness::eval_records(&ds, &cfg)?;
            let attacker = harness::attacker_records(&ds, &cfg);
            let ctx = harness::eval_context(
                &cfg,
                &model,
                surrogate.as_ref().map(|s| s as &dyn Classifier),
                &frames,
                &attacker,
            )?;
            let points = harness::run_attack_sweep(&cfg, &ctx)?;
            harness::write_curve_csv(sink(out.as_deref().or(cfg.output.as_deref()))?, &points)?;
        }
        Command::BroadcastSweep { common, out } => {
            let cfg = load_config(&common)?;
            if cfg.broadcast.checkpoints.is_empty() {
                return Err(Error::Config {
                    key: "broadcast.checkpoints".into(),
                    message: "one checkpoint per receiver is required".into(),
                });
            }
            let models = cfg
                .broadcast
                .checkpoints
                .iter()
                .enumerate()
                .map(|(i, p)| harness::load_classifier(Some(p), &format!("broadcast.checkpoints[{i}]")))
                .collect::<rfadvsim::Result<Vec<_>>>()?;
            let refs: Vec<&dyn Classifier> = models.iter().map(|m| m as &dyn Classifier).collect();
            let points = harness::run_broadcast_sweep(&cfg, &refs)?;
            harness::write_curve_csv(sink(out.as_deref().or(cfg.output.as_deref()))?, &points)?;
        }
        Command::Certify { common, out } => {
            let cfg = load_config(&common)?;
            let model = harness::load_classifier(cfg.model.checkpoint.as_deref(), "model.checkpoint")?;
            let ds = harness::load_dataset(&cfg)?;
            let frames: Vec<_> = ds
                .test_records()
                .into_iter()
                .filter(|r| r.snr_db == cfg.eval.snr_db)
                .take(cfg.defense.frames)
                .collect();
            let rows = if frames.is_empty() {
                Vec::new()
            } else {
                let ctx = harness::eval_context(&cfg, &model, None, &frames, &[])?;
                let attack = AttackKind::parse(&cfg.defense.attack)?;
                harness::certify_frames(&ctx, attack, cfg.defense.pnr_db, &cfg.smoothing()?)?
            };
            harness::write_cert_csv(sink(out.as_deref().or(cfg.output.as_deref()))?, &rows)?;
            let s = CertSummary::from_rows(&rows);
            eprintln!(
                "{} frames: {} certified correct, {} certified wrong, {} abstained",
                s.n_frames, s.correct, s.wrong, s.abstain
            );
        }
        Command::Report { inputs, merged } => {
            let mut points = Vec::new();
            for p in &inputs {
                points.extend(harness::read_curve_csv(File::open(p)?)?);
            }
            print!("{}", harness::report(&points));
            if let Some(m) = merged {
                harness::write_curve_csv(BufWriter::new(File::create(m)?), &points)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("rfadvsim: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("rfadvsim: {e}");
            ExitCode::from(2)
        }
    }
}
