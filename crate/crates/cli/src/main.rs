//! `oiparts`: batch front end for one-shot part segmentation.
//!
//! Exit codes: 0 on success, 2 on invalid or unreadable input, 3 when the
//! refinement solver fails to converge under `--strict`.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use oiparts_core::refine::SolverConfig;
use oiparts_core::synth::Layout;
use oiparts_core::{Error, Metric};

#[derive(Parser, Debug)]
#[command(
    name = "oiparts",
    version,
    about = "Training-free one-shot part segmentation"
)]
struct Cli {
    /// Worker threads; 0 uses every core. Outputs do not depend on this.
    #[arg(long, global = true, env = "OIPARTS_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Select per-part channel subsets on the annotated example.
    Select(SelectArgs),
    /// Segment a query image from the annotated example.
    Segment(SegmentArgs),
    /// Refine one score plane with the edge-aware solver.
    Refine(RefineArgs),
    /// Score predicted label maps against ground truth.
    Eval(EvalArgs),
    /// Write a seeded synthetic fixture.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ReferenceArgs {
    /// Reference SD features, (H', W', D) float32 NPY.
    #[arg(long)]
    pub ref_sd: PathBuf,
    /// Reference DINO features, (H', W', D) float32 NPY.
    #[arg(long)]
    pub ref_dino: PathBuf,
    /// Reference label map, (H, W) uint8 NPY.
    #[arg(long)]
    pub ref_mask: PathBuf,
    /// JSON array of part names indexed by label.
    #[arg(long)]
    pub names: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct SelectionArgs {
    #[arg(long, default_value_t = Metric::Variance)]
    pub metric: Metric,
    /// Comma-separated candidate subset sizes; defaults to powers of two plus D.
    #[arg(long, value_delimiter = ',')]
    pub k_grid: Option<Vec<usize>>,
}

#[derive(Args, Debug, Clone)]
pub struct SolverArgs {
    #[arg(long, default_value_t = SolverConfig::default().sigma_spatial)]
    pub sigma_spatial: f64,
    #[arg(long, default_value_t = SolverConfig::default().sigma_luma)]
    pub sigma_luma: f64,
    #[arg(long, default_value_t = SolverConfig::default().sigma_chroma)]
    pub sigma_chroma: f64,
    #[arg(long, default_value_t = SolverConfig::default().lambda)]
    pub lambda: f64,
    #[arg(long, default_value_t = SolverConfig::default().cg_max_iters)]
    pub cg_iters: usize,
    #[arg(long, default_value_t = SolverConfig::default().cg_tol)]
    pub cg_tol: f64,
    #[arg(long, default_value_t = SolverConfig::default().bistoch_iters)]
    pub bistoch_iters: usize,
    /// Fail with exit code 3 when any solve misses the tolerance.
    #[arg(long)]
    pub strict: bool,
}

impl SolverArgs {
    pub fn config(&self) -> SolverConfig {
        SolverConfig {
            sigma_spatial: self.sigma_spatial,
            sigma_luma: self.sigma_luma,
            sigma_chroma: self.sigma_chroma,
            lambda: self.lambda,
            cg_max_iters: self.cg_iters,
            cg_tol: self.cg_tol,
            bistoch_iters: self.bistoch_iters,
        }
    }
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[command(flatten)]
    pub reference: ReferenceArgs,
    #[command(flatten)]
    pub selection: SelectionArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub reference: ReferenceArgs,
    #[arg(long)]
    pub query_sd: PathBuf,
    #[arg(long)]
    pub query_dino: PathBuf,
    /// Query image (PPM or PGM); sets the output resolution and guides refinement.
    #[arg(long)]
    pub query_image: PathBuf,
    #[command(flatten)]
    pub selection: SelectionArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    /// Use every channel for every part.
    #[arg(long)]
    pub no_selection: bool,
    /// Skip edge-aware refinement.
    #[arg(long)]
    pub no_fbs: bool,
    /// Load a selection record instead of computing one.
    #[arg(long, conflicts_with = "no_selection")]
    pub selection_in: Option<PathBuf>,
    /// Also write the selection record here.
    #[arg(long)]
    pub selection_out: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    /// Target plane, (H, W) float32 NPY.
    #[arg(long)]
    pub target: PathBuf,
    /// Confidence plane, (H, W) float32 NPY; defaults to all ones.
    #[arg(long)]
    pub confidence: Option<PathBuf>,
    #[arg(long)]
    pub guide: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of predicted (H, W) uint8 label NPYs.
    #[arg(long)]
    pub pred_dir: PathBuf,
    /// Directory of ground-truth label NPYs with matching file stems.
    #[arg(long)]
    pub gt_dir: PathBuf,
    #[arg(long)]
    pub names: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 60)]
    pub height: usize,
    #[arg(long, default_value_t = 60)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub dims_sd: usize,
    #[arg(long, default_value_t = 64)]
    pub dims_dino: usize,
    #[arg(long, default_value_t = 4)]
    pub num_parts: usize,
    #[arg(long, default_value_t = Layout::Rectangles)]
    pub layout: Layout,
    #[arg(long, default_value_t = 90.0)]
    pub prototype_separation: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub distractor_channels: usize,
    #[arg(long, default_value_t = 1.0)]
    pub distractor_sigma: f64,
    #[arg(long, default_value_t = 1)]
    pub image_scale: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonConvergence { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();

    let result = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .context("building the worker pool")
        .and_then(|pool| {
            pool.install(|| match &cli.command {
                Command::Select(a) => commands::select(a),
                Command::Segment(a) => commands::segment(a),
                Command::Refine(a) => commands::refine(a),
                Command::Eval(a) => commands::eval(a),
                Command::Synth(a) => commands::synth(a),
            })
        });

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
