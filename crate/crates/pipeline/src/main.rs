use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use modfuse::evaluate::cmd_evaluate;
use modfuse::generate::cmd_generate_data;
use modfuse::predict::cmd_predict;
use modfuse::pretrain::cmd_pretrain;
use modfuse::train::cmd_train;
use modfuse::{Config, PipelineError};
use modfuse_core::par;

/// Multi-encoder U-Net segmentation workflows.
#[derive(Parser, Debug)]
#[command(name = "modfuse", version)]
struct Cli {
    /// Config file (`section.key = value` lines); defaults apply without it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `run.output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic phantom dataset and its manifest.
    GenerateData {
        #[arg(long)]
        num_cases: Option<usize>,
        #[arg(long)]
        base_seed: Option<u64>,
    },
    /// Self-supervised pretraining on `data.pretrain_manifest`.
    Pretrain {
        /// Continue from `pretrain.ckpt` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Supervised training on `data.train_manifest`.
    Train {
        /// Encoder checkpoint to initialise from (overrides `train.init`).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue from `last.ckpt` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Sliding-window prediction for every case of a manifest.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Evaluate {
        #[arg(long)]
        pred_dir: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn threads() -> Result<Option<usize>, String> {
    match std::env::var("MODFUSE_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(format!("MODFUSE_THREADS must be a positive integer, got `{v}`")),
        },
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.output_dir = o;
    }
    match cli.command {
        Command::GenerateData { num_cases, base_seed } => {
            if let Some(n) = num_cases {
                cfg.synth.num_cases = n;
            }
            if let Some(s) = base_seed {
                cfg.synth.base_seed = s;
            }
            cfg.validate()?;
            let (_, path) = cmd_generate_data(&cfg)?;
            println!("{}", path.display());
        }
        Command::Pretrain { resume } => {
            let out = cmd_pretrain(&cfg, resume)?;
            println!("{}", out.checkpoint.display());
        }
        Command::Train { init, resume } => {
            if init.is_some() {
                cfg.train.init = init;
            }
            let out = cmd_train(&cfg, resume)?;
            if let Some((epoch, dsc)) = out.state.best {
                println!("best validation DSC {dsc:.4} at epoch {}", epoch + 1);
            }
            println!("{}", out.best.display());
        }
        Command::Predict { checkpoint, manifest } => {
            if let Some(c) = checkpoint {
                cfg.predict.checkpoint = c;
            }
            if let Some(m) = manifest {
                cfg.predict.manifest = m;
            }
            println!("{}", cmd_predict(&cfg)?.display());
        }
        Command::Evaluate { pred_dir, manifest } => {
            if let Some(p) = pred_dir {
                cfg.eval.pred_dir = p;
            }
            if let Some(m) = manifest {
                cfg.eval.gt_manifest = m;
            }
            print!("{}", cmd_evaluate(&cfg)?.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = match threads() {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let result = match threads {
        Some(n) => par::with_threads(n, || run(cli)),
        None => run(cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
