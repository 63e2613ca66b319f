//! Run artifacts: manifest, per-iteration report, stage timings and metrics.

use std::path::Path;

use anyhow::{Context, Result};
use gsfm_core::lm::{LmConfig, SolveReport};
use gsfm_core::scene::{RobustLoss, Scene};
use gsfm_core::synth_metrics::{
    align, center_rmse, rotation_auc, rotation_errors_deg, AlignmentKind,
};
use serde::Serialize;

/// One finished optimization stage.
#[derive(Debug, Clone)]
pub struct StageRun {
    pub name: &'static str,
    pub report: SolveReport,
    /// End-to-end stage time including problem setup.
    pub wall_time_ns: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LmSnapshot {
    pub solver: String,
    pub max_iterations: usize,
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub rel_cost_tol: f64,
    pub grad_tol: f64,
    pub param_tol: f64,
    pub cg_max_iters: usize,
    pub cg_tol: f64,
    pub dense_memory_limit: u64,
}

impl From<&LmConfig> for LmSnapshot {
    fn from(c: &LmConfig) -> Self {
        Self {
            solver: c.solver.name().to_string(),
            max_iterations: c.max_iterations,
            lambda0: c.lambda0,
            lambda_up: c.lambda_up,
            lambda_down: c.lambda_down,
            lambda_min: c.lambda_min,
            lambda_max: c.lambda_max,
            rel_cost_tol: c.rel_cost_tol,
            grad_tol: c.grad_tol,
            param_tol: c.param_tol,
            cg_max_iters: c.cg_max_iters,
            cg_tol: c.cg_tol,
            dense_memory_limit: c.dense_memory_limit as u64,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageSummary {
    pub name: String,
    pub loss: String,
    pub termination: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub wall_time_ns: u64,
    pub lm: LmSnapshot,
}

impl StageSummary {
    pub fn new(run: &StageRun, loss: RobustLoss, config: &LmConfig) -> Self {
        Self {
            name: run.name.to_string(),
            loss: loss_name(loss),
            termination: run.report.termination.name().to_string(),
            failure: run.report.failure.clone(),
            iterations: run.report.iterations.len(),
            accepted_steps: run.report.num_accepted(),
            initial_cost: run.report.initial_cost,
            final_cost: run.report.final_cost,
            wall_time_ns: run.wall_time_ns,
            lm: config.into(),
        }
    }
}

pub fn loss_name(loss: RobustLoss) -> String {
    match loss {
        RobustLoss::Trivial => "trivial".to_string(),
        RobustLoss::Huber { delta } => format!("huber({delta})"),
    }
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub argv: Vec<String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub workers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth_mode: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimize_focal: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shared_focal: Option<bool>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<toml::Table>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub stages: Vec<StageSummary>,
}

impl RunManifest {
    pub fn new(command: &str, inputs: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            argv: std::env::args().collect(),
            inputs,
            outputs: Vec::new(),
            workers: rayon::current_num_threads(),
            seed: None,
            depth_mode: None,
            optimize_focal: None,
            shared_focal: None,
            notes: Vec::new(),
            synth: None,
            stages: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).context("serializing manifest")?;
        let path = dir.join("manifest.toml");
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

#[derive(Serialize)]
struct IterationRow<'a> {
    stage: &'a str,
    iteration: usize,
    cost_before: f64,
    cost_after: f64,
    lambda: f64,
    step_accepted: bool,
    cg_iterations: usize,
    linear_residual: f64,
}

pub const REPORT_HEADER: [&str; 8] = [
    "stage",
    "iteration",
    "cost_before",
    "cost_after",
    "lambda",
    "step_accepted",
    "cg_iterations",
    "linear_residual",
];

/// Per-iteration solver trace without timings, so it is reproducible.
pub fn write_report(stages: &[StageRun], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .with_context(|| format!("creating {}", path.display()))?;
    w.write_record(REPORT_HEADER)?;
    for run in stages {
        for it in &run.report.iterations {
            w.serialize(IterationRow {
                stage: run.name,
                iteration: it.iteration,
                cost_before: it.cost_before,
                cost_after: it.cost_after,
                lambda: it.lambda,
                step_accepted: it.step_accepted,
                cg_iterations: it.cg_iterations,
                linear_residual: it.linear_residual,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TimingRow<'a> {
    stage: &'a str,
    iterations: usize,
    wall_time_ns: u64,
    solve_time_ns: u64,
    per_iteration_ns: u64,
}

pub fn per_iteration_ns(report: &SolveReport) -> u64 {
    match report.iterations.len() {
        0 => 0,
        n => report.total_wall_time_ns() / n as u64,
    }
}

pub fn write_timing(stages: &[StageRun], path: &Path) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for run in stages {
        w.serialize(TimingRow {
            stage: run.name,
            iterations: run.report.iterations.len(),
            wall_time_ns: run.wall_time_ns,
            solve_time_ns: run.report.total_wall_time_ns(),
            per_iteration_ns: per_iteration_ns(&run.report),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Accuracy against ground truth after alignment.
#[derive(Debug, Clone, Serialize)]
pub struct Accuracy {
    pub sim3_center_rmse: f64,
    pub se3_center_rmse: f64,
    pub diameter: f64,
    /// Scale of the estimate relative to the truth.
    pub scale_ratio: f64,
    pub mean_rotation_error_deg: f64,
    pub auc_at_1: f64,
    pub auc_at_3: f64,
    pub auc_at_5: f64,
}

pub fn accuracy(estimate: &Scene, truth: &Scene) -> Result<Accuracy> {
    let (sim, sim_aligned) = align(estimate, truth, AlignmentKind::Sim3)?;
    let (_, se_aligned) = align(estimate, truth, AlignmentKind::Se3)?;
    let rot = rotation_errors_deg(&sim_aligned, truth);
    let auc = rotation_auc(estimate, truth, &[1.0, 3.0, 5.0]);
    Ok(Accuracy {
        sim3_center_rmse: center_rmse(&sim_aligned, truth),
        se3_center_rmse: center_rmse(&se_aligned, truth),
        diameter: truth.diameter(),
        scale_ratio: 1.0 / sim.scale,
        mean_rotation_error_deg: rot.iter().sum::<f64>() / rot.len().max(1) as f64,
        auc_at_1: auc[0],
        auc_at_3: auc[1],
        auc_at_5: auc[2],
    })
}

pub fn write_accuracy(acc: &Accuracy, path: &Path) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.serialize(acc)?;
    w.flush()?;
    Ok(())
}
