use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gcnlab::cli::{self, CurvesArgs};

#[derive(Parser)]
#[command(name = "gcnlab", version, about = "Cooperative generator/discriminator training on enumerable sequence spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sampled training loop.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides trainer.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Iterate the exact cooperative update and check its invariants.
    Exact {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quality/diversity temperature sweep of a trained generator.
    Curves {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated ascending temperatures.
        #[arg(long, value_delimiter = ',')]
        temps: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        context: u32,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 200)]
        references: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dump one tree-search decode as JSON.
    DumpMcts {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        context: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("GCNLAB_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow::anyhow!("GCNLAB_THREADS must be a positive integer, got '{v}'"))?;
        if n == 0 {
            anyhow::bail!("GCNLAB_THREADS must be a positive integer, got 0");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    init_threads()?;
    match cli.command {
        Command::Train { config, out, seed } => cli::cmd_train(&config, &out, seed),
        Command::Exact { config, out } => cli::cmd_exact(&config, &out),
        Command::Curves { checkpoint, out, temps, context, samples, references, seed } => {
            let args = CurvesArgs {
                temps: temps.unwrap_or_else(|| cli::DEFAULT_TEMPS.to_vec()),
                context,
                samples,
                references,
                seed,
            };
            cli::cmd_curves(&checkpoint, &out, &args)
        }
        Command::DumpMcts { checkpoint, context, out, seed } => cli::cmd_dump_mcts(&checkpoint, context, &out, seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(cli::EXIT_ERROR as u8)
        }
    }
}
