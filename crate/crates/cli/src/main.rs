//! `gbp`: batch runs of Gaussian belief propagation and the session server.
//!
//! Exit status: 0 when the run converged (delta < tol), 2 when it stopped at
//! `--iters`, 1 on any error.

mod run;
mod serve;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gbp_core::ScheduleKind;

#[derive(Parser, Debug)]
#[command(name = "gbp", version, about = "Gaussian belief propagation on factor graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve a graph given as Graph JSON or a named preset.
    Solve {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        graph: Option<PathBuf>,
        /// chain, loop, grid, linefit_outlier, linefit_step or pose_sim.
        #[arg(long)]
        preset: Option<String>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Robust 1D surface fit on a built-in preset.
    Linefit {
        #[arg(long, value_enum, default_value_t = LinefitPreset::Outlier)]
        preset: LinefitPreset,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Denoise a PGM image on a pixel grid.
    Denoise {
        #[arg(long = "in")]
        input: PathBuf,
        /// Denoised image (P2).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        data_sigma: f64,
        #[arg(long, default_value_t = 0.1)]
        smooth_sigma: f64,
        #[command(flatten)]
        run: RunArgs,
    },
    /// 2D pose graph with range-bearing landmarks: from a file, or simulated from `--seed`.
    Posegraph {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Session server speaking newline-delimited JSON frames.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        /// Serve a single stream on stdin/stdout instead of TCP.
        #[arg(long)]
        stdio: bool,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum LinefitPreset {
    Outlier,
    Step,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Loss {
    Squared,
    Huber,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Schedule {
    Synchronous,
    Random,
    Sweep,
    RoundRobin,
    Residual,
    Attention,
}

impl From<Schedule> for ScheduleKind {
    fn from(s: Schedule) -> Self {
        match s {
            Schedule::Synchronous => ScheduleKind::Synchronous,
            Schedule::Random => ScheduleKind::Random,
            Schedule::Sweep => ScheduleKind::Sweep,
            Schedule::RoundRobin => ScheduleKind::RoundRobin,
            Schedule::Residual => ScheduleKind::Residual,
            Schedule::Attention => ScheduleKind::Attention,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    #[arg(long, value_enum, default_value_t = Schedule::Synchronous)]
    schedule: Schedule,
    /// Message damping β in (0, 1]; defaults to 1 on trees and 0.7 otherwise.
    #[arg(long)]
    damping: Option<f64>,
    /// Maximum number of rounds.
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Loss applied to every factor type that supports it; unset keeps the input's.
    #[arg(long, value_enum)]
    loss: Option<Loss>,
    #[arg(long, default_value_t = 1.0)]
    huber_t: f64,
    /// Also solve densely and write oracle.json and comparison.json.
    #[arg(long)]
    oracle: bool,
    /// Focus variable for the attention schedule.
    #[arg(long)]
    focus: Option<String>,
    #[arg(long, default_value_t = 2)]
    radius: usize,
    /// Multiscale levels (grids only); 1 solves flat.
    #[arg(long, default_value_t = 1)]
    levels: usize,
    /// Directory for trace.csv, result.json and oracle artifacts.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Returns whether the run converged.
fn dispatch(command: Command) -> anyhow::Result<bool> {
    let parallel = run::configure_threads()?;
    match command {
        Command::Solve { graph, preset, run } => run::solve(graph, preset, &run, parallel),
        Command::Linefit { preset, run } => run::linefit(preset, &run, parallel),
        Command::Denoise {
            input,
            out,
            data_sigma,
            smooth_sigma,
            run,
        } => run::denoise(&input, out.as_deref(), data_sigma, smooth_sigma, &run, parallel),
        Command::Posegraph { graph, run } => run::posegraph(graph, &run, parallel),
        Command::Serve { addr, stdio } => {
            if stdio {
                serve::stdio()?;
            } else {
                serve::tcp(&addr)?;
            }
            Ok(true)
        }
    }
}
