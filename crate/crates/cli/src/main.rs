//! `vsdm` command-line front end.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "vsdm", version, about = "Variational Schrödinger diffusion models on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration (see `vsdm preset --list`).
    #[arg(long)]
    pub preset: Option<String>,
    /// Override every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the score model and, for adaptive runs, the drift.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop (and checkpoint) after this many training rounds.
        #[arg(long, hide = true)]
        stop_after_rounds: Option<u64>,
        /// Run sequentially instead of on the thread pool.
        #[arg(long)]
        sequential: bool,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// sde, ode-euler or ode-heun (default: the config's sampler mode).
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        /// Grid steps for sampling (default: the config's value).
        #[arg(long)]
        nfe: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Also write every chain's full trajectory.
        #[arg(long)]
        trajectories: bool,
        #[arg(long)]
        sequential: bool,
    },
    /// Compute metrics for samples or trajectories and append them to results.csv.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Samples (or trajectories) CSV; the lowest node is used as samples.
        #[arg(long)]
        samples: PathBuf,
        /// Trajectories CSV for straightness.
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        run_id: Option<String>,
        #[arg(long, default_value_t = 199)]
        permutations: usize,
        /// Fresh data draws compared against (capped at the sample count).
        #[arg(long, default_value_t = 1000)]
        data_count: usize,
    },
    /// Cross-check kernels against the independent oracles.
    KernelCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, hide = true)]
        corrupt_symmetrization: bool,
    },
    /// Render samples and trajectories to SVG.
    Plot {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        trajectories: Option<PathBuf>,
        /// Trajectories drawn at most.
        #[arg(long, default_value_t = 50)]
        max_paths: usize,
        #[arg(long, default_value = "plot.svg")]
        out: PathBuf,
    },
    /// Print a built-in configuration as TOML.
    Preset {
        name: Option<String>,
        #[arg(long)]
        list: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            cfg,
            out,
            resume,
            stop_after_rounds,
            sequential,
        } => commands::train(&cfg, &out, resume.as_deref(), stop_after_rounds, sequential),
        Command::Sample {
            checkpoint,
            mode,
            count,
            nfe,
            seed,
            out,
            trajectories,
            sequential,
        } => commands::sample(&checkpoint, mode.as_deref(), count, nfe, seed, &out, trajectories, sequential),
        Command::Eval {
            cfg,
            samples,
            trajectories,
            out,
            run_id,
            permutations,
            data_count,
        } => commands::eval(&cfg, &samples, trajectories.as_deref(), &out, run_id, permutations, data_count),
        Command::KernelCheck {
            cfg,
            instances,
            corrupt_symmetrization,
        } => commands::kernel_check(&cfg, instances, corrupt_symmetrization),
        Command::Plot {
            samples,
            trajectories,
            max_paths,
            out,
        } => plot::plot(&samples, trajectories.as_deref(), max_paths, &out),
        Command::Preset { name, list } => commands::preset(name.as_deref(), list),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
