//! Levenberg-Marquardt driver over block-sparse least-squares problems.

mod linear;

use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::sparse_block::{
    BlockLayout, BlockNormalSystem, BlockSparseJacobian, NormalAssembler, ParamKind, SparseError,
};

use linear::{norm, SchurWorkspace};
pub use linear::{solve_normal, LinearSolution, LinearSolveError};

/// Quaternions shorter than this cannot be renormalized.
pub const MIN_QUATERNION_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LinearSolverKind {
    #[default]
    SchurPcg,
    Dense,
}

impl LinearSolverKind {
    pub fn name(self) -> &'static str {
        match self {
            LinearSolverKind::SchurPcg => "schur_pcg",
            LinearSolverKind::Dense => "dense",
        }
    }
}

impl std::str::FromStr for LinearSolverKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "schur_pcg" => Ok(LinearSolverKind::SchurPcg),
            "dense" => Ok(LinearSolverKind::Dense),
            other => Err(format!(
                "unknown solver '{other}' (expected schur_pcg or dense)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub rel_cost_tol: f64,
    pub grad_tol: f64,
    /// Steps with `||Δθ|| <= param_tol (||θ|| + param_tol)` count as converged.
    pub param_tol: f64,
    pub cg_max_iters: usize,
    pub cg_tol: f64,
    pub solver: LinearSolverKind,
    /// Upper bound on the dense matrix size in bytes.
    pub dense_memory_limit: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            lambda0: 1e-4,
            lambda_up: 10.0,
            lambda_down: 2.0,
            lambda_min: 1e-10,
            lambda_max: 1e10,
            rel_cost_tol: 1e-6,
            grad_tol: 1e-10,
            param_tol: 1e-12,
            cg_max_iters: 500,
            cg_tol: 1e-8,
            solver: LinearSolverKind::SchurPcg,
            dense_memory_limit: 2 << 30,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        let positive = [
            self.lambda0,
            self.lambda_up,
            self.lambda_down,
            self.lambda_min,
            self.lambda_max,
            self.rel_cost_tol,
            self.grad_tol,
            self.param_tol,
            self.cg_tol,
        ];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(LmError::InvalidConfig(
                "tolerances and factors must be positive".into(),
            ));
        }
        if !(self.lambda_min < self.lambda0 && self.lambda0 < self.lambda_max) {
            return Err(LmError::InvalidConfig(
                "lambda_min < lambda0 < lambda_max is required".into(),
            ));
        }
        if self.lambda_up <= 1.0 || self.lambda_down <= 1.0 {
            return Err(LmError::InvalidConfig(
                "lambda factors must exceed 1".into(),
            ));
        }
        if self.max_iterations == 0 || self.cg_max_iters == 0 {
            return Err(LmError::InvalidConfig(
                "iteration limits must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parameter vector has {got} entries, layout expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("initial parameters are not finite")]
    NonFiniteParameters,
    #[error("initial cost is not finite")]
    NonFiniteCost,
    #[error("quaternion of block {block} has near-zero norm")]
    ZeroQuaternion { block: usize },
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    ConvergedCost,
    ConvergedGrad,
    MaxIter,
    SolverFailure,
}

impl Termination {
    pub fn name(self) -> &'static str {
        match self {
            Termination::ConvergedCost => "converged_cost",
            Termination::ConvergedGrad => "converged_grad",
            Termination::MaxIter => "max_iter",
            Termination::SolverFailure => "solver_failure",
        }
    }

    pub fn is_converged(self) -> bool {
        matches!(
            self,
            Termination::ConvergedCost | Termination::ConvergedGrad
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost_before: f64,
    /// Cost of the candidate; NaN when the linear solve failed.
    pub cost_after: f64,
    pub lambda: f64,
    pub step_accepted: bool,
    pub cg_iterations: usize,
    /// `||A Δθ + Jᵀr|| / ||Jᵀr||` of the damped system; NaN when no step was produced.
    pub linear_residual: f64,
    pub wall_time_ns: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Linear solver message for `SolverFailure`.
    pub failure: Option<String>,
    pub solver: LinearSolverKind,
}

impl SolveReport {
    pub fn accepted_costs(&self) -> Vec<f64> {
        std::iter::once(self.initial_cost)
            .chain(
                self.iterations
                    .iter()
                    .filter(|it| it.step_accepted)
                    .map(|it| it.cost_after),
            )
            .collect()
    }

    pub fn num_accepted(&self) -> usize {
        self.iterations.iter().filter(|it| it.step_accepted).count()
    }

    /// Accepted costs strictly decrease.
    pub fn is_monotone(&self) -> bool {
        self.accepted_costs().windows(2).all(|w| w[1] < w[0])
    }

    pub fn total_wall_time_ns(&self) -> u64 {
        self.iterations.iter().map(|it| it.wall_time_ns).sum()
    }
}

/// A nonlinear least-squares objective `½ Σ ρ(‖r_i‖²)` whose residuals and
/// Jacobian rows are already scaled by the robust weights.
pub trait LeastSquaresProblem: Sync {
    fn layout(&self) -> &Arc<BlockLayout>;

    /// Writes the (weighted) residual vector and returns the cost. When a
    /// Jacobian is given it is rebuilt for the same `theta`.
    fn evaluate(
        &self,
        theta: &[f64],
        residuals: &mut [f64],
        jacobian: Option<&mut BlockSparseJacobian>,
    ) -> f64;

    /// Projects a parameter vector back onto the feasible set after an update.
    fn retract(&self, theta: &mut [f64]) -> Result<(), LmError> {
        renormalize(theta, self.layout())
    }
}

/// Rescales every pose quaternion to unit norm, leaving other entries untouched.
pub fn renormalize(theta: &mut [f64], layout: &BlockLayout) -> Result<(), LmError> {
    for (block, p) in layout.params().iter().enumerate() {
        if p.kind != ParamKind::CameraPose {
            continue;
        }
        let q = &mut theta[p.offset..p.offset + 4];
        let n = norm(q);
        if !(n >= MIN_QUATERNION_NORM) {
            return Err(LmError::ZeroQuaternion { block });
        }
        if n != 1.0 {
            q.iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok(())
}

/// Reusable solver: the Jacobian, normal system, Schur workspace and
/// residual buffers persist across calls and problems.
#[derive(Debug, Default)]
pub struct LmSolver {
    assembler: NormalAssembler,
    system: BlockNormalSystem,
    schur: SchurWorkspace,
    jacobian: Option<BlockSparseJacobian>,
    residuals: Vec<f64>,
    candidate_residuals: Vec<f64>,
    candidate: Vec<f64>,
    step: Vec<f64>,
    product: Vec<f64>,
    solves: usize,
}

impl LmSolver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Total capacity (in scalars) of the reusable numeric buffers.
    pub fn workspace_capacity(&self) -> usize {
        self.schur.capacity()
            + self.jacobian.as_ref().map_or(0, |j| j.values().len())
            + self.residuals.capacity()
            + self.candidate_residuals.capacity()
            + self.candidate.capacity()
            + self.step.capacity()
            + self.product.capacity()
    }

    pub fn solves(&self) -> usize {
        self.solves
    }

    pub fn solve<P: LeastSquaresProblem + ?Sized>(
        &mut self,
        problem: &P,
        theta0: &[f64],
        config: &LmConfig,
    ) -> Result<(Vec<f64>, SolveReport), LmError> {
        config.validate()?;
        self.solves += 1;
        let layout = problem.layout().clone();
        let n = layout.total_params();
        if theta0.len() != n {
            return Err(LmError::DimensionMismatch {
                expected: n,
                got: theta0.len(),
            });
        }
        if theta0.iter().any(|v| !v.is_finite()) {
            return Err(LmError::NonFiniteParameters);
        }
        let m = layout.total_residuals();
        let mut theta = theta0.to_vec();
        let mut jac = match self.jacobian.take() {
            Some(mut j) => {
                j.reset(layout.clone());
                j
            }
            None => BlockSparseJacobian::new(layout.clone()),
        };
        resize(&mut self.residuals, m);
        resize(&mut self.candidate_residuals, m);
        resize(&mut self.product, n);

        let mut cost = problem.evaluate(&theta, &mut self.residuals, Some(&mut jac));
        if !cost.is_finite() {
            self.jacobian = Some(jac);
            return Err(LmError::NonFiniteCost);
        }
        if let Err(e) = self
            .assembler
            .assemble(&jac, Some(&self.residuals), &mut self.system)
        {
            self.jacobian = Some(jac);
            return Err(e.into());
        }

        let mut report = SolveReport {
            iterations: Vec::new(),
            termination: Termination::MaxIter,
            initial_cost: cost,
            final_cost: cost,
            failure: None,
            solver: config.solver,
        };
        let mut lambda = config.lambda0;

        for iteration in 1..=config.max_iterations {
            let grad_inf = self
                .system
                .gradient()
                .iter()
                .fold(0.0f64, |a, g| a.max(g.abs()));
            if grad_inf < config.grad_tol {
                report.termination = Termination::ConvergedGrad;
                break;
            }
            let start = Instant::now();
            self.system.damp_in_place(lambda);
            let mut record = IterationRecord {
                iteration,
                cost_before: cost,
                cost_after: f64::NAN,
                lambda,
                step_accepted: false,
                cg_iterations: 0,
                linear_residual: f64::NAN,
                wall_time_ns: 0,
            };

            match linear::solve_into(&self.system, config, &mut self.schur, &mut self.step) {
                Err(err) => {
                    record.wall_time_ns = elapsed_ns(start);
                    report.iterations.push(record);
                    if !err.is_recoverable() || lambda >= config.lambda_max {
                        report.termination = Termination::SolverFailure;
                        report.failure = Some(err.to_string());
                        break;
                    }
                    lambda = (lambda * config.lambda_up).min(config.lambda_max);
                    continue;
                }
                Ok(cg) => record.cg_iterations = cg,
            }
            record.linear_residual = self.linear_residual();

            let step_norm = norm(&self.step);
            if step_norm <= config.param_tol * (norm(&theta) + config.param_tol) {
                record.wall_time_ns = elapsed_ns(start);
                record.cost_after = cost;
                report.iterations.push(record);
                report.termination = Termination::ConvergedCost;
                break;
            }

            self.candidate.clear();
            self.candidate
                .extend(theta.iter().zip(&self.step).map(|(t, d)| t + d));
            let new_cost = match problem.retract(&mut self.candidate) {
                Ok(()) => problem.evaluate(&self.candidate, &mut self.candidate_residuals, None),
                Err(_) => f64::INFINITY,
            };
            record.cost_after = new_cost;

            if new_cost < cost {
                std::mem::swap(&mut theta, &mut self.candidate);
                let rel = (cost - new_cost) / cost;
                cost = problem.evaluate(&theta, &mut self.residuals, Some(&mut jac));
                self.assembler
                    .assemble(&jac, Some(&self.residuals), &mut self.system)?;
                lambda = (lambda / config.lambda_down).max(config.lambda_min);
                record.step_accepted = true;
                record.wall_time_ns = elapsed_ns(start);
                report.iterations.push(record);
                if rel < config.rel_cost_tol {
                    report.termination = Termination::ConvergedCost;
                    break;
                }
            } else {
                record.wall_time_ns = elapsed_ns(start);
                report.iterations.push(record);
                if lambda >= config.lambda_max {
                    // No descent even with maximal damping: stationary to working precision.
                    report.termination = Termination::ConvergedCost;
                    break;
                }
                lambda = (lambda * config.lambda_up).min(config.lambda_max);
            }
        }

        report.final_cost = cost;
        self.jacobian = Some(jac);
        log::debug!(
            "lm finished: {} iterations, cost {:.6e} -> {:.6e}, {}",
            report.iterations.len(),
            report.initial_cost,
            report.final_cost,
            report.termination.name()
        );
        Ok((theta, report))
    }

    fn linear_residual(&mut self) -> f64 {
        self.system.multiply(&self.step, &mut self.product);
        let g = self.system.gradient();
        let g_norm = norm(g);
        if g_norm == 0.0 {
            return 0.0;
        }
        let r: f64 = self
            .product
            .iter()
            .zip(g)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        r.sqrt() / g_norm
    }
}

/// One-shot convenience wrapper around [`LmSolver::solve`].
pub fn lm_solve<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    theta0: &[f64],
    config: &LmConfig,
) -> Result<(Vec<f64>, SolveReport), LmError> {
    LmSolver::new().solve(problem, theta0, config)
}

fn resize(v: &mut Vec<f64>, n: usize) {
    v.clear();
    v.resize(n, 0.0);
}

fn elapsed_ns(start: Instant) -> u64 {
    start.elapsed().as_nanos().min(u64::MAX as u128) as u64
}
