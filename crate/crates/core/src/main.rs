use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chroma::commands::{self, exit_code, Options};
use chroma::train::Ablation;

/// Weakly supervised color naming with a learned attention map.
#[derive(Parser)]
#[command(name = "chroma", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Checkpoint to resume from, evaluate or run.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Dataset root, overriding the `dataset` config key.
    #[arg(long, value_name = "DIR")]
    dataset: Option<PathBuf>,
    /// Seed for data synthesis, initialization and batch order.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// none, no-attention, no-prior or no-alternation.
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(Common),
    /// Pretrain and alternately train both branches.
    Train(Common),
    /// Report image-wise, pixel-wise and localization metrics.
    Eval(Common),
    /// Write the attention heatmap, color name map and prediction for one image.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Input PPM image.
        image: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        corrupt_modulate: bool,
    },
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::parse(s).ok_or_else(|| format!("unknown ablation {s:?}"))
}

impl From<Common> for Options {
    fn from(c: Common) -> Self {
        Options {
            config: c.config,
            checkpoint: c.checkpoint,
            out: c.out,
            dataset: c.dataset,
            seed: c.seed,
            ablation: c.ablation,
        }
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("CHROMA_THREADS") else { return Ok(()) };
    let n: usize = v.parse().map_err(|_| format!("CHROMA_THREADS must be a positive integer, got {v:?}"))?;
    if n == 0 {
        return Err("CHROMA_THREADS must be at least 1".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn run(cli: Cli) -> chroma::Result<i32> {
    match cli.command {
        Command::Synth(c) => commands::cmd_synth(&c.into()).map(|_| 0),
        Command::Train(c) => {
            let t = commands::cmd_train(&c.into())?;
            println!("{}", t.log.to_table());
            Ok(0)
        }
        Command::Eval(c) => {
            print!("{}", commands::cmd_eval(&c.into())?);
            Ok(0)
        }
        Command::Infer { common, image } => {
            print!("{}", commands::cmd_infer(&common.into(), &image)?);
            Ok(0)
        }
        Command::Gradcheck { common, corrupt_modulate } => {
            chroma::graph::set_corrupt_modulate_backward(corrupt_modulate);
            let (text, ok) = commands::cmd_gradcheck(&common.into())?;
            print!("{text}");
            Ok(if ok { commands::EXIT_OK } else { commands::EXIT_CHECK })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(commands::EXIT_CONFIG as u8);
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
