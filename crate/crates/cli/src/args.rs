use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gsfm_core::lm::LinearSolverKind;
use gsfm_core::synth_metrics::Rig;

#[derive(Debug, Parser)]
#[command(
    name = "gsfm",
    version,
    about = "Global positioning and bundle adjustment on sparse scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene (truth.tracks and observed.tracks).
    Synth(SynthArgs),
    /// Estimate camera centers and points with rotations held fixed.
    Gp(GpArgs),
    /// Bundle-adjust poses, focals and points.
    Ba(BaArgs),
    /// Global positioning followed by bundle adjustment.
    Pipeline(PipelineArgs),
    /// Time both stages over a ladder of synthetic sizes.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossKind {
    Trivial,
    Huber,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Gp,
    Ba,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Gp => "gp",
            Stage::Ba => "ba",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    Bal,
    Tracks,
}

#[derive(Debug, Clone, Args)]
pub struct SolveArgs {
    /// Scene file: .tracks, or BAL (.txt / .bal, optionally .bz2).
    pub input: PathBuf,
    /// Overrides format detection by extension.
    #[arg(long, value_enum)]
    pub format: Option<InputFormat>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "trivial")]
    pub loss: LossKind,
    #[arg(long, default_value = "schur_pcg", value_parser = parse_solver)]
    pub solver: LinearSolverKind,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long)]
    pub rel_cost_tol: Option<f64>,
    #[arg(long)]
    pub cg_tol: Option<f64>,
    /// Largest dense normal matrix, in bytes, the dense solver may allocate.
    #[arg(long)]
    pub dense_memory_limit: Option<usize>,
    /// Ground-truth tracks file; adds aligned accuracy metrics to the outputs.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FocalArgs {
    /// Keep focal lengths fixed.
    #[arg(long)]
    pub fix_focal: bool,
    /// Optimize one focal length shared by all cameras.
    #[arg(long, conflicts_with = "fix_focal")]
    pub shared_focal: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GpArgs {
    #[command(flatten)]
    pub solve: SolveArgs,
    #[arg(long, default_value_t = 0.1)]
    pub huber_delta: f64,
    /// Use per-observation depths to fix the metric scale.
    #[arg(long)]
    pub depth_mode: bool,
    /// Seed of the random initialization.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct BaArgs {
    #[command(flatten)]
    pub solve: SolveArgs,
    #[arg(long, default_value_t = 1.0)]
    pub huber_delta: f64,
    #[command(flatten)]
    pub focal: FocalArgs,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub solve: SolveArgs,
    /// Huber threshold of the adjustment stage, in pixels.
    #[arg(long, default_value_t = 1.0)]
    pub huber_delta: f64,
    /// Huber threshold of the positioning stage.
    #[arg(long, default_value_t = 0.1)]
    pub gp_huber_delta: f64,
    #[arg(long)]
    pub depth_mode: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub focal: FocalArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SceneArgs {
    #[arg(long, default_value_t = 10)]
    pub cameras: usize,
    #[arg(long, default_value_t = 200)]
    pub points: usize,
    #[arg(long, default_value = "ring", value_parser = parse_rig)]
    pub rig: Rig,
    #[arg(long, default_value_t = 10.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 500.0)]
    pub focal: f64,
    /// Per-axis pixel noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Fraction of cameras observing each point.
    #[arg(long, default_value_t = 1.0)]
    pub visibility: f64,
    /// Fixed number of views per point (overrides --visibility).
    #[arg(long)]
    pub views_per_point: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub outliers: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Rotation perturbation of the observed poses, degrees.
    #[arg(long, default_value_t = 0.0)]
    pub perturb_rot_deg: f64,
    /// Center jitter as a fraction of the scene diameter.
    #[arg(long, default_value_t = 0.0)]
    pub perturb_center: f64,
    /// Relative focal perturbation.
    #[arg(long, default_value_t = 0.0)]
    pub perturb_focal: f64,
    /// Point jitter as a fraction of the scene diameter.
    #[arg(long, default_value_t = 0.0)]
    pub perturb_points: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Camera counts of the ladder.
    #[arg(long, value_delimiter = ',', default_value = "25,50,100,200")]
    pub cameras: Vec<usize>,
    /// Fixed point count; defaults to --points-per-camera times the camera count.
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub points_per_camera: usize,
    /// Views per point; defaults to 6 unless --visibility is given.
    #[arg(long, conflicts_with = "visibility")]
    pub views_per_point: Option<usize>,
    /// Fraction of cameras observing each point (1.0 = full visibility).
    #[arg(long)]
    pub visibility: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "schur_pcg,dense", value_parser = parse_solver)]
    pub solvers: Vec<LinearSolverKind>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "gp,ba")]
    pub stages: Vec<Stage>,
    #[arg(long, default_value_t = 10)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub dense_memory_limit: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn parse_solver(s: &str) -> Result<LinearSolverKind, String> {
    s.parse()
}

fn parse_rig(s: &str) -> Result<Rig, String> {
    s.parse()
}
