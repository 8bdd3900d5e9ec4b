//! Command-line surface for the multimodal depression screening pipeline.
//!
//! Stages chain through the filesystem: `synth` writes JSONL datasets,
//! `prep` normalizes and augments them, `pretrain`/`train` produce
//! checkpoints, `eval` scores the test split per modality configuration, and
//! `report` renders the combined tables.

use clap::{Parser, Subcommand};
use mmdr_core::config::Config;
use mmdr_core::data::GenSpec;
use mmdr_core::error::Error;
use mmdr_core::eval::{ModalityConfig, ReportFormat};
use mmdr_core::pipeline;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "mmdr", version, about = "Multimodal depression screening pipeline")]
struct Cli {
    /// JSON configuration file; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed driving generation, training, and decoding.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic multi-source datasets.
    Synth {
        /// Generator spec (JSON); a three-scenario default is built in.
        #[arg(long)]
        gen_spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unify parameters, window long samples, expand QA pairs, rebalance.
    Prep {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the audio/video encoders and fusion on paired samples.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the language model with low-rank adapters.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Encoder checkpoint from `pretrain`; optional with joint training.
        #[arg(long)]
        encoders: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-segment generation dump for a dataset file.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test split; dropped modalities exercise the bypass routes.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        drop_audio: bool,
        #[arg(long)]
        drop_video: bool,
    },
    /// Combine eval outputs into report.json / report.csv / report.md.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// json, csv, md, or all.
        #[arg(long, default_value = "all")]
        format: String,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<Config, Error> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli.config)?;
    match cli.command {
        Command::Synth { gen_spec, out } => {
            let mut spec = match gen_spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                    serde_json::from_str::<GenSpec>(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                }
                None => GenSpec::default(),
            };
            spec.seed = cli.seed;
            let paths = pipeline::run_synth(&spec, &out)?;
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
        Command::Prep { input, out } => {
            let summary = pipeline::run_prep(&input, &out, &cfg, cli.seed)?;
            for (name, n_in, n_out) in summary.datasets {
                println!("{name}: {n_in} -> {n_out} samples");
            }
            for w in summary.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Pretrain { data, out } => {
            let summary = pipeline::run_pretrain(&data, &cfg, cli.seed, &out)?;
            println!(
                "pretrain: {} steps, train accuracy {:.3}, checkpoint {}",
                summary.trace.steps_run,
                summary.trace.final_train_acc,
                summary.checkpoint.display()
            );
        }
        Command::Train { data, encoders, out } => {
            let summary = pipeline::run_train(&data, &cfg, cli.seed, encoders.as_deref(), &out)?;
            println!(
                "train: {} steps, train accuracy {:.3}, checkpoint {}",
                summary.trace.steps_run,
                summary.trace.final_train_acc,
                summary.checkpoint.display()
            );
        }
        Command::Infer { ckpt, input, out } => {
            let n = pipeline::run_infer(&ckpt, &input, &out, cli.seed)?;
            println!("wrote {n} predictions to {}", out.display());
        }
        Command::Eval {
            ckpt,
            data,
            out,
            drop_audio,
            drop_video,
        } => {
            let mc = ModalityConfig::from_drops(drop_audio, drop_video);
            let expect = cli.config.as_ref().map(|_| &cfg);
            let reports = pipeline::run_eval(&ckpt, &data, mc, expect, &out, cli.seed)?;
            for r in reports {
                println!(
                    "{} [{}]: acc {:.4} f1 {:.4} ({} participants, {} errors)",
                    r.dataset,
                    r.modality_config,
                    r.metrics.accuracy,
                    r.metrics.f1,
                    r.confusion.total(),
                    r.confusion.error_count
                );
            }
        }
        Command::Report { input, out, format } => {
            let formats: Vec<ReportFormat> = match format.as_str() {
                "json" => vec![ReportFormat::Json],
                "csv" => vec![ReportFormat::Csv],
                "md" => vec![ReportFormat::Markdown],
                "all" => vec![
                    ReportFormat::Json,
                    ReportFormat::Csv,
                    ReportFormat::Markdown,
                ],
                other => {
                    return Err(Error::Config(format!(
                        "unknown report format {other}; use json, csv, md, or all"
                    )))
                }
            };
            let paths = pipeline::run_report(&input, &out, &formats)?;
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
