// Copyright 2026 The qmarkov Authors
// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qmarkov::experiment::{run_experiment, RunOptions};

#[derive(Parser)]
#[command(name = "qmarkov", version, about = "Markov-property diagnostics for thermal spin chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Multiplies every tolerance in the config.
    #[arg(long, global = true, default_value_t = 1.0)]
    tolerance_scale: f64,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Assemble the recovery Lindbladian and check CPTP on the t-grid.
    Build,
    /// Approximate detailed balance per single-site jump.
    Adb,
    /// Clustering lower bound between A and C.
    Cluster,
    /// Markov error under complete depolarization of A.
    Markov,
    /// Strong Markov errors, sup estimate and clustering implication.
    StrongMarkov,
    /// Repeated measure-and-recover tomography.
    Tomography,
    /// Two-state distinguisher.
    Distinguish,
    /// Local extremality of sector mixtures.
    Extremality,
    /// Every stage plus a consolidated diagnostics report.
    All,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Build => "build",
            Command::Adb => "adb",
            Command::Cluster => "cluster",
            Command::Markov => "markov",
            Command::StrongMarkov => "strong-markov",
            Command::Tomography => "tomography",
            Command::Distinguish => "distinguish",
            Command::Extremality => "extremality",
            Command::All => "all",
        }
    }
}

fn fail(code: u8, kind: &str, message: &str) -> ExitCode {
    let payload = serde_json::json!({"error": {"kind": kind, "message": message}});
    eprintln!("{payload}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let Some(config) = cli.config.as_deref() else {
        return fail(2, "validation", "--config is required");
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return fail(2, "validation", "--threads must be positive");
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(3, "numerical", &format!("thread pool: {e}"));
        }
    }
    let opts = RunOptions {
        seed: cli.seed,
        tolerance_scale: cli.tolerance_scale,
        ..RunOptions::default()
    };
    match run_experiment(config, cli.command.name(), cli.out.as_deref(), &opts) {
        Ok(dir) => {
            println!("{}", dir.join("report.json").display());
            ExitCode::SUCCESS
        }
        Err(e) if e.is_validation() => fail(2, "validation", &e.to_string()),
        Err(e) => fail(3, "numerical", &e.to_string()),
    }
}
