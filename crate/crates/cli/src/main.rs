//! `aquasplat` command-line front end.
//!
//! Exit codes: 0 on success, 1 when the pipeline fails, 2 for usage and
//! configuration errors (including unreadable inputs).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{BranchChoice, ViewChoice};

#[derive(Debug, Parser)]
#[command(name = "aquasplat", version, about = "Gaussian splatting with per-primitive underwater media")]
struct Cli {
    /// Worker threads for rendering and loss evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene directory with planted medium parameters.
    Synth(SynthArgs),
    /// Optimize a scene and write checkpoints plus a loss log.
    Train(TrainArgs),
    /// Render a checkpoint through the water branch, the clear branch or both.
    Render(RenderArgs),
    /// Render the clear branch only; same as `render --branch clear`.
    Restore(RestoreArgs),
    /// Compare renders against references (PSNR, SSIM and chart color metrics).
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output scene directory.
    out: PathBuf,
    /// Synthetic-scene description (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene directory (overrides `scene`).
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Output directory (overrides `output`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    downscale: Option<usize>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint PLY (overrides `checkpoint`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Scene directory providing the cameras (overrides `scene`).
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// water, clear or both.
    #[arg(long)]
    branch: Option<BranchChoice>,
    /// Also write 16-bit depth PNGs.
    #[arg(long)]
    depth: bool,
    #[arg(long)]
    downscale: Option<usize>,
    /// all, train or test.
    #[arg(long)]
    views: Option<ViewChoice>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct RestoreArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    depth: bool,
    #[arg(long)]
    downscale: Option<usize>,
    #[arg(long)]
    views: Option<ViewChoice>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of rendered PNGs (overrides `renders`).
    #[arg(long)]
    renders: Option<PathBuf>,
    /// Directory of reference PNGs with matching file names (overrides `references`).
    #[arg(long)]
    references: Option<PathBuf>,
    /// Directory of `<stem>.chart` sidecars (overrides `charts`; defaults to the references directory).
    #[arg(long)]
    charts: Option<PathBuf>,
    /// Metrics table path (default: `<renders>/metrics.tsv`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Render(a) => commands::render(&a),
        Command::Restore(a) => commands::restore(&a),
        Command::Eval(a) => commands::eval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
