use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use erlkit::cli::config::Config;
use erlkit::cli::{exit_code, run, RunArgs};

#[derive(Parser)]
#[command(name = "erlkit", version, about = "Evolutionary reinforcement learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a workflow to budget and write metrics.jsonl, timing.jsonl and checkpoint.bin.
    Run {
        /// TOML config; omitted keys keep their defaults.
        config: Option<PathBuf>,
        /// Override a key, e.g. --set es.algo=ars (repeatable, applied in order).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Worker threads (0 = all cores).
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory; beats ERL_OUT_DIR and output.dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Print every config key with its default.
    Keys,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Keys => {
            print!("{}", Config::describe());
            ExitCode::SUCCESS
        }
        Command::Run {
            config,
            overrides,
            workers,
            out,
            resume,
        } => {
            let args = RunArgs {
                config,
                overrides,
                workers,
                out,
                resume,
            };
            match run(&args) {
                Ok(s) => {
                    let c = s.counters;
                    eprintln!(
                        "done: {} iterations, {} env steps, {} episodes, {} RL updates -> {}",
                        c.iteration,
                        c.env_steps,
                        c.episodes,
                        c.rl_updates,
                        s.out_dir.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(exit_code(&e) as u8)
                }
            }
        }
    }
}
