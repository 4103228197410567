use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedfr_core::config::{Baseline, RunConfig};
use fedfr_core::evaluation::metrics_csv;
use fedfr_core::pipeline;

#[derive(Parser)]
#[command(
    name = "fedfr",
    version,
    about = "Federated face-recognition simulator on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `section.key = value` lines; built-in defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding `run.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: supervised training on the source domain.
    Pretrain(Common),
    /// Stage 2: pseudo labels for every target client.
    Cluster(Common),
    /// Stage 3: federated training from the stage 1 and 2 artifacts.
    Federate(Common),
    /// Run one of the reference models.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// source_only, target_only, merge or fine_tune; overrides `baseline.kind`.
        #[arg(long)]
        kind: Option<String>,
    },
    /// All three stages in order.
    Pipeline(Common),
    /// Evaluate a checkpoint on both domains.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to the federated checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<fedfr_core::Error> for Failure {
    fn from(e: fedfr_core::Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<String, Failure> {
    Ok(match cli.command {
        Command::Pretrain(c) => {
            let cfg = load_config(&c)?;
            pipeline::cmd_pretrain(&cfg)?;
            format!("wrote {}", cfg.output_dir.join(pipeline::PRETRAIN_CKPT).display())
        }
        Command::Cluster(c) => {
            let cfg = load_config(&c)?;
            let r = pipeline::cmd_cluster(&cfg)?;
            pipeline::fscores_csv(&cfg, &r.scores)
        }
        Command::Federate(c) => {
            let cfg = load_config(&c)?;
            let r = pipeline::cmd_federate(&cfg)?;
            metrics_csv(&r.final_metrics)
        }
        Command::Baseline { common, kind } => {
            let mut cfg = load_config(&common)?;
            if let Some(k) = kind {
                cfg.baseline =
                    Baseline::parse(&k).ok_or_else(|| Failure::Config(format!("unknown baseline kind {k:?}")))?;
            }
            metrics_csv(&pipeline::cmd_baseline(&cfg)?.metrics)
        }
        Command::Pipeline(c) => {
            let cfg = load_config(&c)?;
            let r = pipeline::cmd_pipeline(&cfg)?;
            metrics_csv(&r.federated.final_metrics)
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let path = checkpoint.unwrap_or_else(|| cfg.output_dir.join(pipeline::FEDERATED_CKPT));
            metrics_csv(&pipeline::cmd_eval(&cfg, &path)?)
        }
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(report) => {
            print!("{report}");
            if !report.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
