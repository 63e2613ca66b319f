//! Size ladder timing of both stages under each linear solver.

use std::time::Instant;

use anyhow::{bail, Context, Result};
use gsfm_core::ba::{prune, run_ba_with, BaOptions};
use gsfm_core::gp::{run_gp_with, GpOptions};
use gsfm_core::lm::{LmConfig, LmSolver, SolveReport};
use gsfm_core::scene::Scene;
use gsfm_core::synth_metrics::{generate, perturb, Perturbation, SynthConfig};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::args::{BenchArgs, Stage};
use crate::output::{per_iteration_ns, RunManifest};

pub const DEFAULT_VIEWS_PER_POINT: usize = 6;

/// Starting point of the adjustment stage, relative to the true scene.
pub const BA_PERTURBATION: Perturbation = Perturbation {
    rot_deg: 2.0,
    center_frac: 0.02,
    focal_frac: 0.05,
    point_frac: 0.01,
};

/// One row of `bench.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub cameras: usize,
    pub points: usize,
    pub observations: usize,
    pub solver: String,
    pub stage: String,
    pub iterations: usize,
    pub wall_time_ns: u64,
    pub per_iteration_ns: u64,
    pub final_cost: f64,
    pub termination: String,
}

fn cell_config(args: &BenchArgs, cameras: usize) -> SynthConfig {
    let (visibility_fraction, views_per_point) = match (args.visibility, args.views_per_point) {
        (Some(v), _) => (v, None),
        (None, Some(k)) => (1.0, Some(k)),
        (None, None) => (1.0, Some(DEFAULT_VIEWS_PER_POINT.min(cameras))),
    };
    SynthConfig {
        num_cameras: cameras,
        num_points: args.points.unwrap_or(args.points_per_camera * cameras),
        pixel_noise_sigma: args.sigma,
        visibility_fraction,
        views_per_point,
        seed: args.seed,
        ..SynthConfig::default()
    }
}

fn run_stage(
    stage: Stage,
    observed: &Scene,
    ba_start: &Scene,
    seed: u64,
    config: &LmConfig,
) -> Result<SolveReport> {
    let mut solver = LmSolver::new();
    Ok(match stage {
        Stage::Gp => {
            let options = GpOptions {
                seed,
                ..GpOptions::default()
            };
            run_gp_with(&mut solver, observed, &options, config)?.1
        }
        Stage::Ba => run_ba_with(&mut solver, ba_start, BaOptions::default(), config)?.1,
    })
}

pub fn cmd_bench(args: &BenchArgs) -> Result<i32> {
    if args.cameras.is_empty() || args.solvers.is_empty() || args.stages.is_empty() {
        bail!("bench needs at least one camera count, solver and stage");
    }
    let dir = &args.out_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv_path = dir.join("bench.csv");
    let mut writer = csv::Writer::from_path(&csv_path)
        .with_context(|| format!("creating {}", csv_path.display()))?;

    let mut manifest = RunManifest::new("bench", Vec::new());
    manifest.seed = Some(args.seed);
    let mut failures = 0usize;
    for &cameras in &args.cameras {
        let synth = cell_config(args, cameras);
        let generated = generate(&synth)?;
        let observed = generated.observed;
        let (ba_start, _) = prune(&perturb(
            &observed,
            &BA_PERTURBATION,
            args.seed.wrapping_add(1),
        ))?;
        for &solver in &args.solvers {
            let config = LmConfig {
                max_iterations: args.max_iters,
                solver,
                dense_memory_limit: args
                    .dense_memory_limit
                    .unwrap_or(LmConfig::default().dense_memory_limit),
                ..LmConfig::default()
            };
            for &stage in &args.stages {
                let start = Instant::now();
                let outcome = run_stage(stage, &observed, &ba_start, args.seed, &config);
                let wall = start.elapsed().as_nanos() as u64;
                let row = match outcome {
                    Ok(report) => BenchRow {
                        cameras,
                        points: observed.points.len(),
                        observations: observed.observations.len(),
                        solver: solver.name().into(),
                        stage: stage.name().into(),
                        iterations: report.iterations.len(),
                        wall_time_ns: wall,
                        per_iteration_ns: per_iteration_ns(&report),
                        final_cost: report.final_cost,
                        termination: report.termination.name().into(),
                    },
                    Err(e) => {
                        warn!("C={cameras} {} {}: {e:#}", solver.name(), stage.name());
                        BenchRow {
                            cameras,
                            points: observed.points.len(),
                            observations: observed.observations.len(),
                            solver: solver.name().into(),
                            stage: stage.name().into(),
                            iterations: 0,
                            wall_time_ns: wall,
                            per_iteration_ns: 0,
                            final_cost: f64::NAN,
                            termination: "error".into(),
                        }
                    }
                };
                if !matches!(
                    row.termination.as_str(),
                    "converged_cost" | "converged_grad" | "max_iter"
                ) {
                    failures += 1;
                }
                info!(
                    "C={} P={} obs={} {} {}: {} iterations, {} ns/iteration, {}",
                    row.cameras,
                    row.points,
                    row.observations,
                    row.solver,
                    row.stage,
                    row.iterations,
                    row.per_iteration_ns,
                    row.termination
                );
                writer.serialize(&row)?;
                writer.flush()?;
            }
        }
    }
    if failures > 0 {
        manifest.notes.push(format!(
            "{failures} cells did not finish; see the termination column"
        ));
    }
    let mut table = toml::Table::new();
    table.insert(
        "cameras".into(),
        args.cameras
            .iter()
            .map(|c| *c as i64)
            .collect::<Vec<_>>()
            .into(),
    );
    table.insert("points".into(), args.points.map_or(-1, |p| p as i64).into());
    table.insert(
        "points_per_camera".into(),
        (args.points_per_camera as i64).into(),
    );
    table.insert(
        "solvers".into(),
        args.solvers
            .iter()
            .map(|s| s.name())
            .collect::<Vec<_>>()
            .into(),
    );
    table.insert("max_iters".into(), (args.max_iters as i64).into());
    table.insert("sigma".into(), args.sigma.into());
    manifest.synth = Some(table);
    manifest.outputs = vec!["bench.csv".into(), "manifest.toml".into()];
    manifest.write(dir)?;
    Ok(0)
}

/// Reads a `bench.csv` back, e.g. for plotting or checks.
pub fn read_bench(path: &std::path::Path) -> Result<Vec<BenchRow>> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(reader.deserialize().collect::<Result<_, _>>()?)
}
