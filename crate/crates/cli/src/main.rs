//! `cae-cluster run <config>`, `cae-cluster compare <a> <b>`,
//! `cae-cluster metrics <labels.csv>`.
//!
//! Exit codes: 0 success, 1 config or input error, 2 when some seeds of a
//! run failed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cae_cluster::experiment::{self, ExperimentConfig, RunResult};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cae-cluster", version, about = "Deep clustering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment config.
    Run {
        config: PathBuf,
        /// Run directory; overrides `run.output` and the output root variable.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Run seeds in parallel.
        #[arg(long)]
        parallel_seeds: bool,
    },
    /// Report `b − a` for ACC and NMI. Accepts results.json files or run
    /// directories.
    Compare {
        baseline: PathBuf,
        candidate: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Score a CSV with `label` and `cluster` columns.
    Metrics {
        labels: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn load_result(path: &Path) -> cae_cluster::Result<RunResult> {
    if path.is_dir() {
        RunResult::load(&path.join("results.json"))
    } else {
        RunResult::load(path)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            output,
            parallel_seeds,
        } => {
            let mut cfg = match ExperimentConfig::from_path(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            if let Some(o) = output {
                cfg.output = o;
            }
            cfg.parallel_seeds |= parallel_seeds;
            match experiment::run(&cfg) {
                Ok(result) => {
                    print!("{}", result.table());
                    println!("results: {}", result.output.join("results.json").display());
                    if result.failures() > 0 {
                        eprintln!("{} of {} seeds failed", result.failures(), result.seeds.len());
                        ExitCode::from(2)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Compare {
            baseline,
            candidate,
            json,
        } => {
            let report = load_result(&baseline)
                .and_then(|a| load_result(&candidate).map(|b| (a, b)))
                .and_then(|(a, b)| experiment::compare(&a, &b));
            match report {
                Ok(r) if json => {
                    println!("{}", serde_json::to_string_pretty(&r).expect("plain data"));
                    ExitCode::SUCCESS
                }
                Ok(r) => {
                    print!("{}", r.render());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Metrics { labels, json } => match experiment::metrics_from_csv(&labels) {
            Ok(r) if json => {
                println!("{}", serde_json::to_string_pretty(&r).expect("plain data"));
                ExitCode::SUCCESS
            }
            Ok(r) => {
                println!("instances {}  ACC {:.4}  NMI {:.4}", r.instances, r.acc, r.nmi);
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
    }
}
