use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use gsfm_core::ba::{prune, run_ba_with, BaOptions};
use gsfm_core::gp::{run_gp_with, GpOptions};
use gsfm_core::io::{
    read_bal, read_tracks, scene_points, write_colmap_text, write_ply, write_tracks,
};
use gsfm_core::lm::{LmConfig, LmSolver, Termination};
use gsfm_core::scene::{CameraModel, RobustLoss, Scene};
use gsfm_core::synth_metrics::{generate, perturb, Perturbation, SynthConfig};
use log::{info, warn};

use crate::args::{
    BaArgs, FocalArgs, GpArgs, InputFormat, LossKind, PipelineArgs, SceneArgs, SolveArgs, SynthArgs,
};
use crate::output::{
    accuracy, write_accuracy, write_report, write_timing, RunManifest, StageRun, StageSummary,
};

/// Exit status of a finished run.
pub fn exit_code(stages: &[StageRun]) -> i32 {
    let terms: Vec<Termination> = stages.iter().map(|s| s.report.termination).collect();
    if terms.contains(&Termination::SolverFailure) {
        3
    } else if terms.contains(&Termination::MaxIter) {
        2
    } else {
        0
    }
}

fn detect_format(path: &Path) -> InputFormat {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_lowercase())
        .unwrap_or_default();
    let name = name.strip_suffix(".bz2").unwrap_or(&name);
    if name.ends_with(".tracks") {
        InputFormat::Tracks
    } else {
        InputFormat::Bal
    }
}

pub fn load_scene(path: &Path, format: Option<InputFormat>) -> Result<Scene> {
    if !path.is_file() {
        bail!("input file {} does not exist", path.display());
    }
    let scene = match format.unwrap_or_else(|| detect_format(path)) {
        InputFormat::Bal => read_bal(path)?,
        InputFormat::Tracks => read_tracks(path)?,
    };
    Ok(scene)
}

fn lm_config(args: &SolveArgs) -> Result<LmConfig> {
    let mut config = LmConfig {
        max_iterations: args.max_iters,
        solver: args.solver,
        ..LmConfig::default()
    };
    if let Some(tol) = args.rel_cost_tol {
        config.rel_cost_tol = tol;
    }
    if let Some(tol) = args.cg_tol {
        config.cg_tol = tol;
    }
    if let Some(limit) = args.dense_memory_limit {
        config.dense_memory_limit = limit;
    }
    config.validate()?;
    Ok(config)
}

fn loss(kind: LossKind, delta: f64) -> Result<RobustLoss> {
    Ok(match kind {
        LossKind::Trivial => RobustLoss::Trivial,
        LossKind::Huber => RobustLoss::huber(delta)?,
    })
}

fn ba_options(loss: RobustLoss, focal: &FocalArgs) -> BaOptions {
    BaOptions {
        loss,
        optimize_focal: !focal.fix_focal,
        shared_focal: focal.shared_focal,
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, u64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_nanos() as u64))
}

fn stage_line(run: &StageRun) {
    let r = &run.report;
    info!(
        "{}: {} after {} iterations, cost {:.6e} -> {:.6e}",
        run.name,
        r.termination.name(),
        r.iterations.len(),
        r.initial_cost,
        r.final_cost
    );
    if let Some(msg) = &r.failure {
        warn!("{}: linear solver failed: {msg}", run.name);
    }
}

fn run_ba_stage(
    solver: &mut LmSolver,
    scene: &Scene,
    options: BaOptions,
    config: &LmConfig,
    manifest: &mut RunManifest,
) -> Result<(Scene, StageRun)> {
    let ((out, report), ns) = timed(|| {
        let (pruned, remap) = prune(scene)?;
        if !remap.is_identity() {
            let note = format!(
                "pruned to {} cameras, {} points, {} observations",
                pruned.cameras.len(),
                pruned.points.len(),
                pruned.observations.len()
            );
            warn!("{note}");
            manifest.notes.push(note);
        }
        Ok(run_ba_with(solver, &pruned, options, config)?)
    })?;
    let run = StageRun {
        name: "ba",
        report,
        wall_time_ns: ns,
    };
    stage_line(&run);
    Ok((out, run))
}

fn run_gp_stage(
    solver: &mut LmSolver,
    scene: &Scene,
    options: &GpOptions,
    config: &LmConfig,
) -> Result<(Scene, StageRun)> {
    let ((out, report), ns) = timed(|| Ok(run_gp_with(solver, scene, options, config)?))?;
    let run = StageRun {
        name: "gp",
        report,
        wall_time_ns: ns,
    };
    stage_line(&run);
    Ok((out, run))
}

/// Writes the scene artifacts and run reports into `dir`.
fn write_outputs(
    dir: &Path,
    scene: &Scene,
    stages: &[StageRun],
    truth: Option<&Scene>,
    manifest: &mut RunManifest,
) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_tracks(scene, &dir.join("result.tracks"))?;
    manifest.outputs.push("result.tracks".into());
    if scene
        .cameras
        .iter()
        .all(|c| c.model == CameraModel::Pinhole)
    {
        write_colmap_text(scene, &dir.join("colmap"))?;
        manifest.outputs.push("colmap/".into());
    } else {
        manifest
            .notes
            .push("COLMAP export skipped: scene has non-pinhole cameras".into());
    }
    write_ply(&scene_points(scene), None, &dir.join("points.ply"))?;
    write_report(stages, &dir.join("report.csv"))?;
    write_timing(stages, &dir.join("timing.csv"))?;
    manifest.outputs.extend([
        "points.ply".into(),
        "report.csv".into(),
        "timing.csv".into(),
    ]);
    if let Some(truth) = truth {
        if truth.cameras.len() == scene.cameras.len() {
            write_accuracy(&accuracy(scene, truth)?, &dir.join("metrics.csv"))?;
            manifest.outputs.push("metrics.csv".into());
        } else {
            manifest
                .notes
                .push("metrics skipped: camera count differs from the truth".into());
        }
    }
    manifest.outputs.push("manifest.toml".into());
    manifest.write(dir)
}

fn inputs(args: &SolveArgs) -> Vec<String> {
    std::iter::once(&args.input)
        .chain(args.truth.as_ref())
        .map(|p: &PathBuf| p.display().to_string())
        .collect()
}

fn load_truth(args: &SolveArgs) -> Result<Option<Scene>> {
    args.truth
        .as_deref()
        .map(|p| load_scene(p, None))
        .transpose()
}

pub fn cmd_gp(args: &GpArgs) -> Result<i32> {
    let scene = load_scene(&args.solve.input, args.solve.format)?;
    let truth = load_truth(&args.solve)?;
    let config = lm_config(&args.solve)?;
    let options = GpOptions {
        depth_mode: args.depth_mode,
        loss: loss(args.solve.loss, args.huber_delta)?,
        seed: args.seed,
        init_from_scene: false,
    };
    let mut manifest = RunManifest::new("gp", inputs(&args.solve));
    manifest.seed = Some(args.seed);
    manifest.depth_mode = Some(args.depth_mode);
    let (out, run) = run_gp_stage(&mut LmSolver::new(), &scene, &options, &config)?;
    manifest
        .stages
        .push(StageSummary::new(&run, options.loss, &config));
    let stages = [run];
    write_outputs(
        &args.solve.out_dir,
        &out,
        &stages,
        truth.as_ref(),
        &mut manifest,
    )?;
    Ok(exit_code(&stages))
}

pub fn cmd_ba(args: &BaArgs) -> Result<i32> {
    let scene = load_scene(&args.solve.input, args.solve.format)?;
    let truth = load_truth(&args.solve)?;
    let config = lm_config(&args.solve)?;
    let options = ba_options(loss(args.solve.loss, args.huber_delta)?, &args.focal);
    let mut manifest = RunManifest::new("ba", inputs(&args.solve));
    manifest.optimize_focal = Some(options.optimize_focal);
    manifest.shared_focal = Some(options.shared_focal);
    let (out, run) = run_ba_stage(
        &mut LmSolver::new(),
        &scene,
        options,
        &config,
        &mut manifest,
    )?;
    manifest
        .stages
        .push(StageSummary::new(&run, options.loss, &config));
    let stages = [run];
    write_outputs(
        &args.solve.out_dir,
        &out,
        &stages,
        truth.as_ref(),
        &mut manifest,
    )?;
    Ok(exit_code(&stages))
}

/// Positioning then adjustment, sharing one solver workspace.
pub fn cmd_pipeline(args: &PipelineArgs) -> Result<i32> {
    let scene = load_scene(&args.solve.input, args.solve.format)?;
    let truth = load_truth(&args.solve)?;
    let config = lm_config(&args.solve)?;
    let gp_options = GpOptions {
        depth_mode: args.depth_mode,
        loss: loss(args.solve.loss, args.gp_huber_delta)?,
        seed: args.seed,
        init_from_scene: false,
    };
    let options = ba_options(loss(args.solve.loss, args.huber_delta)?, &args.focal);
    let mut manifest = RunManifest::new("pipeline", inputs(&args.solve));
    manifest.seed = Some(args.seed);
    manifest.depth_mode = Some(args.depth_mode);
    manifest.optimize_focal = Some(options.optimize_focal);
    manifest.shared_focal = Some(options.shared_focal);

    let mut solver = LmSolver::new();
    let (positioned, gp) = run_gp_stage(&mut solver, &scene, &gp_options, &config)?;
    manifest
        .stages
        .push(StageSummary::new(&gp, gp_options.loss, &config));
    let mut stages = vec![gp];
    let out = if stages[0].report.termination == Termination::SolverFailure {
        positioned
    } else {
        let (adjusted, ba) =
            run_ba_stage(&mut solver, &positioned, options, &config, &mut manifest)?;
        manifest
            .stages
            .push(StageSummary::new(&ba, options.loss, &config));
        stages.push(ba);
        adjusted
    };
    write_outputs(
        &args.solve.out_dir,
        &out,
        &stages,
        truth.as_ref(),
        &mut manifest,
    )?;
    Ok(exit_code(&stages))
}

pub fn synth_config(args: &SceneArgs) -> SynthConfig {
    SynthConfig {
        num_cameras: args.cameras,
        num_points: args.points,
        rig: args.rig,
        radius: args.radius,
        focal: args.focal,
        pixel_noise_sigma: args.sigma,
        visibility_fraction: args.visibility,
        views_per_point: args.views_per_point,
        outlier_fraction: args.outliers,
        seed: args.seed,
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<i32> {
    let config = synth_config(&args.scene);
    let generated = generate(&config)?;
    let p = Perturbation {
        rot_deg: args.perturb_rot_deg,
        center_frac: args.perturb_center,
        focal_frac: args.perturb_focal,
        point_frac: args.perturb_points,
    };
    if [p.rot_deg, p.center_frac, p.focal_frac, p.point_frac]
        .iter()
        .any(|v| !(*v >= 0.0 && v.is_finite()))
    {
        bail!("perturbation magnitudes must be non-negative");
    }
    let observed = if p == Perturbation::default() {
        generated.observed
    } else {
        // separate stream from the scene seed
        perturb(&generated.observed, &p, config.seed.wrapping_add(1))
    };
    let dir = &args.out_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_tracks(&generated.truth, &dir.join("truth.tracks"))?;
    write_tracks(&observed, &dir.join("observed.tracks"))?;
    info!(
        "{} cameras, {} points, {} observations ({} outliers)",
        observed.cameras.len(),
        observed.points.len(),
        observed.observations.len(),
        generated.outliers.iter().filter(|o| **o).count()
    );

    let mut manifest = RunManifest::new("synth", Vec::new());
    manifest.seed = Some(config.seed);
    let mut table = toml::Table::new();
    table.insert("cameras".into(), (config.num_cameras as i64).into());
    table.insert("points".into(), (config.num_points as i64).into());
    table.insert(
        "rig".into(),
        format!("{:?}", config.rig).to_lowercase().into(),
    );
    table.insert("radius".into(), config.radius.into());
    table.insert("focal".into(), config.focal.into());
    table.insert("sigma".into(), config.pixel_noise_sigma.into());
    table.insert("visibility".into(), config.visibility_fraction.into());
    table.insert(
        "views_per_point".into(),
        (config.views_per_point() as i64).into(),
    );
    table.insert("outliers".into(), config.outlier_fraction.into());
    table.insert("perturb_rot_deg".into(), p.rot_deg.into());
    table.insert("perturb_center".into(), p.center_frac.into());
    table.insert("perturb_focal".into(), p.focal_frac.into());
    table.insert("perturb_points".into(), p.point_frac.into());
    manifest.synth = Some(table);
    manifest.outputs = vec![
        "truth.tracks".into(),
        "observed.tracks".into(),
        "manifest.toml".into(),
    ];
    manifest.write(dir)?;
    Ok(0)
}
