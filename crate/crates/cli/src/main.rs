use std::ops::ControlFlow;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lctt_cli::{eval_checkpoint, parse_config, rdd_from_trace, run_experiment};
use lctt_core::Error;

#[derive(Parser)]
#[command(name = "lctt", version = lctt_cli::experiment::version(), about = "Leader-coordinated team training on level-based foraging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics, checkpoints and a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run greedy test episodes from a checkpoint and print a JSON summary.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 32)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Write every step trace as JSON lines.
        #[arg(long)]
        dump_trace: Option<PathBuf>,
    },
    /// Recompute the mean redundant observation ratio from a trace file.
    Rdd {
        #[arg(long)]
        trace: PathBuf,
    },
}

fn run(cli: Cli) -> lctt_core::Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = parse_config(&config)?;
            let outcome = run_experiment(&cfg, seed, &out, |row| {
                eprintln!(
                    "{} steps={} episodes={} eps={:.3} reward={:.3} rdd={:.3}",
                    row.run_id, row.env_steps, row.episodes, row.epsilon, row.mean_test_reward, row.mean_test_rdd
                );
                ControlFlow::Continue(())
            })?;
            eprintln!("finished: {} env steps, {} episodes", outcome.env_steps, outcome.episodes);
        }
        Command::Eval { ckpt, config, episodes, seed, dump_trace } => {
            let spec = parse_config(&config)?.to_spec(seed)?;
            let report = eval_checkpoint(&ckpt, &spec, episodes, dump_trace.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Rdd { trace } => {
            println!("{}", serde_json::to_string_pretty(&rdd_from_trace(&trace)?)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match &e {
                Error::Config { .. } => 2,
                e if e.is_numeric() => 3,
                _ => 1,
            })
        }
    }
}
