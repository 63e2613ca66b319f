//! Linear solvers for the damped normal equations `A Δθ = -Jᵀr`.
//!
//! `schur_pcg` eliminates point-like blocks (and per-observation scales,
//! which are eliminated first) block by block, solves the reduced system
//! over camera-like blocks with block-Jacobi preconditioned conjugate
//! gradients, then back-substitutes. `dense` materializes `A` and factors it.
//!
//! Parameters whose diagonal is exactly zero carry no information (their
//! whole row of `A` is zero); both paths pin their update to zero.

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::sparse_block::BlockNormalSystem;

use super::{LinearSolverKind, LmConfig};

/// Largest block width handled by the stack-allocated kernels below.
const MAX_WIDTH: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearSolveError {
    #[error("eliminated block {block} is singular after damping")]
    SingularBlock { block: usize },
    #[error("conjugate gradients did not converge in {iterations} iterations")]
    CgStall { iterations: usize },
    #[error("damped normal matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("dense solve needs {bytes} bytes for {params} parameters (limit {limit})")]
    DenseTooLarge {
        params: usize,
        bytes: usize,
        limit: usize,
    },
    #[error("unsupported block structure: {0}")]
    UnsupportedStructure(String),
}

impl LinearSolveError {
    /// Whether raising the damping can plausibly cure the failure.
    pub fn is_recoverable(&self) -> bool {
        matches!(
            self,
            LinearSolveError::SingularBlock { .. }
                | LinearSolveError::CgStall { .. }
                | LinearSolveError::NotPositiveDefinite
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSolution {
    pub step: Vec<f64>,
    pub cg_iterations: usize,
}

/// Solves the (already damped) system with the configured solver.
pub fn solve_normal(
    sys: &BlockNormalSystem,
    config: &LmConfig,
) -> Result<LinearSolution, LinearSolveError> {
    let mut ws = SchurWorkspace::default();
    let mut step = Vec::new();
    let cg_iterations = solve_into(sys, config, &mut ws, &mut step)?;
    Ok(LinearSolution {
        step,
        cg_iterations,
    })
}

pub(crate) fn solve_into(
    sys: &BlockNormalSystem,
    config: &LmConfig,
    ws: &mut SchurWorkspace,
    step: &mut Vec<f64>,
) -> Result<usize, LinearSolveError> {
    match config.solver {
        LinearSolverKind::SchurPcg => ws.solve(sys, config, step),
        LinearSolverKind::Dense => {
            solve_dense(sys, config.dense_memory_limit, step)?;
            Ok(0)
        }
    }
}

fn solve_dense(
    sys: &BlockNormalSystem,
    memory_limit: usize,
    step: &mut Vec<f64>,
) -> Result<(), LinearSolveError> {
    let n = sys.layout().total_params();
    let bytes = n
        .saturating_mul(n)
        .saturating_mul(std::mem::size_of::<f64>());
    if bytes > memory_limit {
        return Err(LinearSolveError::DenseTooLarge {
            params: n,
            bytes,
            limit: memory_limit,
        });
    }
    step.clear();
    step.resize(n, 0.0);
    let a = sys.to_dense();
    let active: Vec<usize> = (0..n).filter(|&k| a[(k, k)] != 0.0).collect();
    if active.is_empty() {
        return Ok(());
    }
    let m = active.len();
    let sub = DMatrix::from_fn(m, m, |r, c| a[(active[r], active[c])]);
    let rhs = DVector::from_fn(m, |r, _| sys.gradient()[active[r]]);
    let chol = Cholesky::new(sub).ok_or(LinearSolveError::NotPositiveDefinite)?;
    let x = chol.solve(&rhs);
    for (r, &k) in active.iter().enumerate() {
        step[k] = x[r];
    }
    Ok(())
}

/// Inverts the SPD sub-block on indices with non-zero diagonal; masked rows
/// and columns of the inverse are zero. Returns false if the active part is
/// not positive definite.
pub(crate) fn masked_spd_inverse(m: &[f64], w: usize, out: &mut [f64]) -> bool {
    debug_assert!(w <= MAX_WIDTH);
    out[..w * w].iter_mut().for_each(|v| *v = 0.0);
    if w == 1 {
        let d = m[0];
        if d == 0.0 {
            return true;
        }
        if !(d > 0.0) {
            return false;
        }
        out[0] = 1.0 / d;
        return true;
    }
    let mut idx = [0usize; MAX_WIDTH];
    let mut k = 0;
    for i in 0..w {
        if m[i * w + i] != 0.0 {
            idx[k] = i;
            k += 1;
        }
    }
    if k == 0 {
        return true;
    }
    // Cholesky L Lᵀ of the active sub-block.
    let mut l = [0.0f64; MAX_WIDTH * MAX_WIDTH];
    for i in 0..k {
        for j in 0..=i {
            let mut s = m[idx[i] * w + idx[j]];
            for p in 0..j {
                s -= l[i * MAX_WIDTH + p] * l[j * MAX_WIDTH + p];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return false;
                }
                l[i * MAX_WIDTH + i] = s.sqrt();
            } else {
                l[i * MAX_WIDTH + j] = s / l[j * MAX_WIDTH + j];
            }
        }
    }
    // inv(L) by forward substitution, then inv(A) = inv(L)ᵀ inv(L).
    let mut li = [0.0f64; MAX_WIDTH * MAX_WIDTH];
    for c in 0..k {
        for i in c..k {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for p in c..i {
                s -= l[i * MAX_WIDTH + p] * li[p * MAX_WIDTH + c];
            }
            li[i * MAX_WIDTH + c] = s / l[i * MAX_WIDTH + i];
        }
    }
    for i in 0..k {
        for j in 0..=i {
            let mut s = 0.0;
            for p in i..k {
                s += li[p * MAX_WIDTH + i] * li[p * MAX_WIDTH + j];
            }
            out[idx[i] * w + idx[j]] = s;
            out[idx[j] * w + idx[i]] = s;
        }
    }
    true
}

/// Coupling of an eliminated block to a block eliminated later (or retained).
#[derive(Debug, Clone, Copy)]
struct Coupling {
    node: usize,
    /// Offset of the `w_node x w_elim` block in `coup_vals`.
    offset: usize,
    /// Source slot in the normal system and whether it is stored transposed.
    src_slot: usize,
    src_transposed: bool,
}

const NOT_RETAINED: usize = usize::MAX;

/// Reusable symbolic structure and numeric buffers for the Schur solver.
#[derive(Debug, Default)]
pub(crate) struct SchurWorkspace {
    pattern_id: u64,
    retained_index: Vec<usize>,
    retained_blocks: Vec<usize>,
    r_offsets: Vec<usize>,
    r_dim: usize,
    elim_order: Vec<usize>,
    elim_pos: Vec<usize>,
    coup_ptr: Vec<usize>,
    couplings: Vec<Coupling>,
    coup_vals: Vec<f64>,
    elim_diag_off: Vec<usize>,
    elim_diag: Vec<f64>,
    elim_inv: Vec<f64>,
    s_diag_off: Vec<usize>,
    s_diag: Vec<f64>,
    s_row_ptr: Vec<usize>,
    s_cols: Vec<usize>,
    s_off: Vec<usize>,
    s_vals: Vec<f64>,
    /// (A slot, S slot) for retained-retained blocks copied from `A`.
    s_src: Vec<(usize, usize)>,
    precond: Vec<f64>,
    g: Vec<f64>,
    scratch_y: Vec<f64>,
    scratch_yoff: Vec<usize>,
    cg_b: Vec<f64>,
    cg_x: Vec<f64>,
    cg_r: Vec<f64>,
    cg_z: Vec<f64>,
    cg_p: Vec<f64>,
    cg_q: Vec<f64>,
    symbolic_builds: usize,
}

impl SchurWorkspace {
    #[cfg(test)]
    pub(crate) fn symbolic_builds(&self) -> usize {
        self.symbolic_builds
    }

    pub(crate) fn capacity(&self) -> usize {
        self.coup_vals.capacity()
            + self.elim_diag.capacity()
            + self.elim_inv.capacity()
            + self.s_diag.capacity()
            + self.s_vals.capacity()
            + self.g.capacity()
            + self.cg_x.capacity()
    }

    fn build_symbolic(&mut self, sys: &BlockNormalSystem) -> Result<(), LinearSolveError> {
        self.symbolic_builds += 1;
        let layout = sys.layout();
        let nb = layout.num_param_blocks();

        self.retained_index.clear();
        self.retained_blocks.clear();
        self.r_offsets.clear();
        let mut r_dim = 0;
        for (b, p) in layout.params().iter().enumerate() {
            if p.kind.is_eliminable() {
                self.retained_index.push(NOT_RETAINED);
            } else {
                self.retained_index.push(self.retained_blocks.len());
                self.retained_blocks.push(b);
                self.r_offsets.push(r_dim);
                r_dim += p.width();
            }
        }
        self.r_dim = r_dim;

        self.elim_order.clear();
        for stage in 0..2 {
            self.elim_order.extend(
                (0..nb).filter(|&b| layout.param(b).kind.elimination_stage() == Some(stage)),
            );
        }
        self.elim_pos.clear();
        self.elim_pos.resize(nb, NOT_RETAINED);
        for (pos, &b) in self.elim_order.iter().enumerate() {
            self.elim_pos[b] = pos;
        }

        // Couplings of each eliminated block to later blocks.
        let stage_of = |b: usize| layout.param(b).kind.elimination_stage();
        let mut lists: Vec<Vec<Coupling>> = vec![Vec::new(); self.elim_order.len()];
        for a in 0..nb {
            for slot in sys.row_range(a) {
                let b = sys.slot_col(slot);
                for (e, n, transposed) in [(a, b, true), (b, a, false)] {
                    let Some(se) = stage_of(e) else { continue };
                    match stage_of(n) {
                        Some(sn) if sn == se => {
                            return Err(LinearSolveError::UnsupportedStructure(format!(
                                "eliminated blocks {a} and {b} are coupled"
                            )))
                        }
                        Some(sn) if sn < se => continue,
                        _ => {}
                    }
                    lists[self.elim_pos[e]].push(Coupling {
                        node: n,
                        offset: 0,
                        src_slot: slot,
                        src_transposed: transposed,
                    });
                }
            }
        }
        self.coup_ptr.clear();
        self.coup_ptr.push(0);
        self.couplings.clear();
        let mut off = 0;
        for (pos, list) in lists.iter_mut().enumerate() {
            list.sort_by_key(|c| c.node);
            let we = layout.param(self.elim_order[pos]).width();
            for c in list.iter_mut() {
                c.offset = off;
                off += layout.param(c.node).width() * we;
            }
            self.couplings.extend_from_slice(list);
            self.coup_ptr.push(self.couplings.len());
        }
        self.coup_vals.clear();
        self.coup_vals.resize(off, 0.0);

        self.elim_diag_off.clear();
        let mut doff = 0;
        for &b in &self.elim_order {
            self.elim_diag_off.push(doff);
            doff += layout.param(b).width().pow(2);
        }
        self.elim_diag.clear();
        self.elim_diag.resize(doff, 0.0);
        self.elim_inv.clear();
        self.elim_inv.resize(doff, 0.0);

        // Reduced-system pattern: retained pairs of A plus fill from elimination.
        let nr = self.retained_blocks.len();
        let mut bits = vec![0u64; (nr * nr).div_ceil(64)];
        let mut set = |i: usize, j: usize| bits[(i * nr + j) / 64] |= 1 << ((i * nr + j) % 64);
        for a in 0..nb {
            for slot in sys.row_range(a) {
                let b = sys.slot_col(slot);
                let (ra, rb) = (self.retained_index[a], self.retained_index[b]);
                if ra != NOT_RETAINED && rb != NOT_RETAINED {
                    set(ra.min(rb), ra.max(rb));
                }
            }
        }
        for pos in 0..self.elim_order.len() {
            let list = &self.couplings[self.coup_ptr[pos]..self.coup_ptr[pos + 1]];
            for (i, ci) in list.iter().enumerate() {
                for cj in &list[i + 1..] {
                    let (ri, rj) = (self.retained_index[ci.node], self.retained_index[cj.node]);
                    match (ri != NOT_RETAINED, rj != NOT_RETAINED) {
                        (true, true) => set(ri, rj),
                        (true, false) | (false, true) => {
                            let (x, r) = if ri == NOT_RETAINED {
                                (ci.node, cj.node)
                            } else {
                                (cj.node, ci.node)
                            };
                            let xp = self.elim_pos[x];
                            let xl = &self.couplings[self.coup_ptr[xp]..self.coup_ptr[xp + 1]];
                            if xl.binary_search_by_key(&r, |c| c.node).is_err() {
                                return Err(LinearSolveError::UnsupportedStructure(format!(
                                    "elimination fills ({r}, {x}) outside the pattern"
                                )));
                            }
                        }
                        (false, false) => {
                            return Err(LinearSolveError::UnsupportedStructure(format!(
                                "elimination couples blocks {} and {}",
                                ci.node, cj.node
                            )))
                        }
                    }
                }
            }
        }
        self.s_row_ptr.clear();
        self.s_cols.clear();
        self.s_row_ptr.push(0);
        for i in 0..nr {
            for j in i + 1..nr {
                if bits[(i * nr + j) / 64] >> ((i * nr + j) % 64) & 1 == 1 {
                    self.s_cols.push(j);
                }
            }
            self.s_row_ptr.push(self.s_cols.len());
        }
        self.s_off.clear();
        let mut soff = 0;
        for i in 0..nr {
            let wi = layout.param(self.retained_blocks[i]).width();
            for k in self.s_row_ptr[i]..self.s_row_ptr[i + 1] {
                self.s_off.push(soff);
                soff += wi * layout.param(self.retained_blocks[self.s_cols[k]]).width();
            }
        }
        self.s_vals.clear();
        self.s_vals.resize(soff, 0.0);
        self.s_diag_off.clear();
        let mut sd = 0;
        for &b in &self.retained_blocks {
            self.s_diag_off.push(sd);
            sd += layout.param(b).width().pow(2);
        }
        self.s_diag.clear();
        self.s_diag.resize(sd, 0.0);
        self.precond.clear();
        self.precond.resize(sd, 0.0);

        self.s_src.clear();
        for a in 0..nb {
            for slot in sys.row_range(a) {
                let b = sys.slot_col(slot);
                let (ra, rb) = (self.retained_index[a], self.retained_index[b]);
                if ra != NOT_RETAINED && rb != NOT_RETAINED {
                    // Retained indices preserve block order, so ra < rb.
                    let s = self.s_slot(ra, rb).expect("pattern contains A's pairs");
                    self.s_src.push((slot, s));
                }
            }
        }
        self.pattern_id = sys.pattern_id();
        Ok(())
    }

    fn s_slot(&self, i: usize, j: usize) -> Option<usize> {
        let row = &self.s_cols[self.s_row_ptr[i]..self.s_row_ptr[i + 1]];
        row.binary_search(&j).ok().map(|p| self.s_row_ptr[i] + p)
    }

    pub(crate) fn solve(
        &mut self,
        sys: &BlockNormalSystem,
        config: &LmConfig,
        step: &mut Vec<f64>,
    ) -> Result<usize, LinearSolveError> {
        if self.pattern_id != sys.pattern_id() || self.pattern_id == 0 {
            self.build_symbolic(sys)?;
        }
        let layout = sys.layout();
        let n = layout.total_params();
        step.clear();
        step.resize(n, 0.0);
        self.g.clear();
        self.g.extend_from_slice(sys.gradient());
        let g_norm = norm(sys.gradient());
        if g_norm == 0.0 {
            return Ok(0);
        }

        // Numeric copy of A into the working structures.
        for (ri, &b) in self.retained_blocks.iter().enumerate() {
            let w = layout.param(b).width();
            let off = self.s_diag_off[ri];
            self.s_diag[off..off + w * w].copy_from_slice(sys.diag_block(b));
        }
        self.s_vals.iter_mut().for_each(|v| *v = 0.0);
        for &(a_slot, s_slot) in &self.s_src {
            let len = self.s_block_len(s_slot, layout);
            let off = self.s_off[s_slot];
            self.s_vals[off..off + len].copy_from_slice(sys.slot_values(a_slot, len));
        }
        for (pos, &e) in self.elim_order.iter().enumerate() {
            let we = layout.param(e).width();
            let off = self.elim_diag_off[pos];
            self.elim_diag[off..off + we * we].copy_from_slice(sys.diag_block(e));
            for c in &self.couplings[self.coup_ptr[pos]..self.coup_ptr[pos + 1]] {
                let wn = layout.param(c.node).width();
                let src = sys.slot_values(c.src_slot, wn * we);
                let dst = &mut self.coup_vals[c.offset..c.offset + wn * we];
                if c.src_transposed {
                    // stored as (e, n): we x wn
                    for r in 0..wn {
                        for k in 0..we {
                            dst[r * we + k] = src[k * wn + r];
                        }
                    }
                } else {
                    dst.copy_from_slice(src);
                }
            }
        }

        self.eliminate(sys)?;

        // Reduced right-hand side.
        self.cg_b.clear();
        self.cg_b.resize(self.r_dim, 0.0);
        for (ri, &b) in self.retained_blocks.iter().enumerate() {
            let p = layout.param(b);
            let ro = self.r_offsets[ri];
            self.cg_b[ro..ro + p.width()].copy_from_slice(&self.g[p.offset..p.offset + p.width()]);
        }
        let iterations = self.pcg(sys, config, g_norm)?;

        for (ri, &b) in self.retained_blocks.iter().enumerate() {
            let p = layout.param(b);
            let ro = self.r_offsets[ri];
            step[p.offset..p.offset + p.width()].copy_from_slice(&self.cg_x[ro..ro + p.width()]);
        }
        self.back_substitute(sys, step);
        Ok(iterations)
    }

    fn s_block_len(&self, s_slot: usize, layout: &crate::sparse_block::BlockLayout) -> usize {
        let row = self.s_row_ptr.partition_point(|&p| p <= s_slot) - 1;
        layout.param(self.retained_blocks[row]).width()
            * layout
                .param(self.retained_blocks[self.s_cols[s_slot]])
                .width()
    }

    fn eliminate(&mut self, sys: &BlockNormalSystem) -> Result<(), LinearSolveError> {
        let layout = sys.layout();
        for pos in 0..self.elim_order.len() {
            let e = self.elim_order[pos];
            let we = layout.param(e).width();
            let doff = self.elim_diag_off[pos];
            let mut inv = [0.0; MAX_WIDTH * MAX_WIDTH];
            if !masked_spd_inverse(&self.elim_diag[doff..doff + we * we], we, &mut inv) {
                return Err(LinearSolveError::SingularBlock { block: e });
            }
            self.elim_inv[doff..doff + we * we].copy_from_slice(&inv[..we * we]);

            let (c0, c1) = (self.coup_ptr[pos], self.coup_ptr[pos + 1]);
            if c0 == c1 {
                continue;
            }
            // Y_n = B_n C⁻¹ for every coupling n (B_n is w_n x we).
            self.scratch_y.clear();
            self.scratch_yoff.clear();
            for c in &self.couplings[c0..c1] {
                let wn = layout.param(c.node).width();
                self.scratch_yoff.push(self.scratch_y.len());
                let b = &self.coup_vals[c.offset..c.offset + wn * we];
                for r in 0..wn {
                    for k in 0..we {
                        let mut s = 0.0;
                        for m in 0..we {
                            s += b[r * we + m] * inv[m * we + k];
                        }
                        self.scratch_y.push(s);
                    }
                }
            }
            // Gradient update g_n -= Y_n g_e.
            let ge_off = layout.param(e).offset;
            let mut ge = [0.0; MAX_WIDTH];
            ge[..we].copy_from_slice(&self.g[ge_off..ge_off + we]);
            for (ci, c) in self.couplings[c0..c1].iter().enumerate() {
                let p = layout.param(c.node);
                let y = &self.scratch_y[self.scratch_yoff[ci]..];
                for r in 0..p.width() {
                    let mut s = 0.0;
                    for k in 0..we {
                        s += y[r * we + k] * ge[k];
                    }
                    self.g[p.offset + r] -= s;
                }
            }
            // Pairwise updates target(n_i, n_j) -= Y_i B_jᵀ.
            let ncoup = c1 - c0;
            for i in 0..ncoup {
                let ci = self.couplings[c0 + i];
                let wi = layout.param(ci.node).width();
                let ri = self.retained_index[ci.node];
                let mut cursor = if ri != NOT_RETAINED {
                    self.s_row_ptr[ri]
                } else {
                    0
                };
                for j in i..ncoup {
                    let cj = self.couplings[c0 + j];
                    let wj = layout.param(cj.node).width();
                    let mut prod = [0.0; MAX_WIDTH * MAX_WIDTH];
                    {
                        let y =
                            &self.scratch_y[self.scratch_yoff[i]..self.scratch_yoff[i] + wi * we];
                        let bj = &self.coup_vals[cj.offset..cj.offset + wj * we];
                        for r in 0..wi {
                            for c in 0..wj {
                                let mut s = 0.0;
                                for k in 0..we {
                                    s += y[r * we + k] * bj[c * we + k];
                                }
                                prod[r * wj + c] = s;
                            }
                        }
                    }
                    let rj = self.retained_index[cj.node];
                    if i == j {
                        let dst = if ri != NOT_RETAINED {
                            let off = self.s_diag_off[ri];
                            &mut self.s_diag[off..off + wi * wi]
                        } else {
                            let off = self.elim_diag_off[self.elim_pos[ci.node]];
                            &mut self.elim_diag[off..off + wi * wi]
                        };
                        sub_assign(dst, &prod[..wi * wi], false, wi, wi);
                    } else if ri != NOT_RETAINED && rj != NOT_RETAINED {
                        let row_end = self.s_row_ptr[ri + 1];
                        let k =
                            cursor + self.s_cols[cursor..row_end].partition_point(|&col| col < rj);
                        debug_assert_eq!(self.s_cols[k], rj);
                        cursor = k;
                        let off = self.s_off[k];
                        sub_assign(
                            &mut self.s_vals[off..off + wi * wj],
                            &prod[..wi * wj],
                            false,
                            wi,
                            wj,
                        );
                    } else {
                        // One side is a later-eliminated block x coupled to retained r;
                        // its stored block is (r rows) x (x cols).
                        let (x, r, transposed) = if ri == NOT_RETAINED {
                            (ci.node, cj.node, true)
                        } else {
                            (cj.node, ci.node, false)
                        };
                        let xp = self.elim_pos[x];
                        let xl = &self.couplings[self.coup_ptr[xp]..self.coup_ptr[xp + 1]];
                        let idx = xl
                            .binary_search_by_key(&r, |c| c.node)
                            .expect("validated during symbolic build");
                        let target = xl[idx];
                        let wr = layout.param(r).width();
                        let wx = layout.param(x).width();
                        sub_assign(
                            &mut self.coup_vals[target.offset..target.offset + wr * wx],
                            &prod[..wi * wj],
                            transposed,
                            wr,
                            wx,
                        );
                    }
                }
            }
        }
        Ok(())
    }

    fn back_substitute(&mut self, sys: &BlockNormalSystem, step: &mut [f64]) {
        let layout = sys.layout();
        for pos in (0..self.elim_order.len()).rev() {
            let e = self.elim_order[pos];
            let pe = layout.param(e);
            let we = pe.width();
            let mut rhs = [0.0; MAX_WIDTH];
            rhs[..we].copy_from_slice(&self.g[pe.offset..pe.offset + we]);
            for c in &self.couplings[self.coup_ptr[pos]..self.coup_ptr[pos + 1]] {
                let pn = layout.param(c.node);
                let wn = pn.width();
                let b = &self.coup_vals[c.offset..c.offset + wn * we];
                for r in 0..wn {
                    let xv = step[pn.offset + r];
                    for k in 0..we {
                        rhs[k] -= b[r * we + k] * xv;
                    }
                }
            }
            let doff = self.elim_diag_off[pos];
            let inv = &self.elim_inv[doff..doff + we * we];
            for r in 0..we {
                let mut s = 0.0;
                for k in 0..we {
                    s += inv[r * we + k] * rhs[k];
                }
                step[pe.offset + r] = s;
            }
        }
    }

    /// `out = S x` over the reduced system.
    fn s_apply(&self, sys: &BlockNormalSystem, x: &[f64], out: &mut [f64]) {
        let layout = sys.layout();
        out.iter_mut().for_each(|v| *v = 0.0);
        for (ri, &b) in self.retained_blocks.iter().enumerate() {
            let wi = layout.param(b).width();
            let oi = self.r_offsets[ri];
            let d = &self.s_diag[self.s_diag_off[ri]..];
            for r in 0..wi {
                let mut s = 0.0;
                for c in 0..wi {
                    s += d[r * wi + c] * x[oi + c];
                }
                out[oi + r] += s;
            }
            for k in self.s_row_ptr[ri]..self.s_row_ptr[ri + 1] {
                let rj = self.s_cols[k];
                let wj = layout.param(self.retained_blocks[rj]).width();
                let oj = self.r_offsets[rj];
                let blk = &self.s_vals[self.s_off[k]..self.s_off[k] + wi * wj];
                for r in 0..wi {
                    let mut s = 0.0;
                    let xr = x[oi + r];
                    for c in 0..wj {
                        let v = blk[r * wj + c];
                        s += v * x[oj + c];
                        out[oj + c] += v * xr;
                    }
                    out[oi + r] += s;
                }
            }
        }
    }

    fn build_preconditioner(&mut self, sys: &BlockNormalSystem) {
        let layout = sys.layout();
        for (ri, &b) in self.retained_blocks.iter().enumerate() {
            let w = layout.param(b).width();
            let off = self.s_diag_off[ri];
            let (d, p) = (
                &self.s_diag[off..off + w * w],
                &mut self.precond[off..off + w * w],
            );
            if !masked_spd_inverse(d, w, p) {
                // Fall back to scalar Jacobi on the block.
                p.iter_mut().for_each(|v| *v = 0.0);
                for k in 0..w {
                    let dk = d[k * w + k];
                    if dk > 0.0 {
                        p[k * w + k] = 1.0 / dk;
                    }
                }
            }
        }
    }

    fn precondition(&self, sys: &BlockNormalSystem, r: &[f64], z: &mut [f64]) {
        let layout = sys.layout();
        for (ri, &b) in self.retained_blocks.iter().enumerate() {
            let w = layout.param(b).width();
            let o = self.r_offsets[ri];
            let p = &self.precond[self.s_diag_off[ri]..];
            for i in 0..w {
                let mut s = 0.0;
                for k in 0..w {
                    s += p[i * w + k] * r[o + k];
                }
                z[o + i] = s;
            }
        }
    }

    /// Block-Jacobi PCG on the reduced system; stops once the residual
    /// norm is at most `cg_tol * ||gradient||`, checked on the true residual.
    fn pcg(
        &mut self,
        sys: &BlockNormalSystem,
        config: &LmConfig,
        g_norm: f64,
    ) -> Result<usize, LinearSolveError> {
        let n = self.r_dim;
        let target = config.cg_tol * g_norm;
        for v in [
            &mut self.cg_x,
            &mut self.cg_r,
            &mut self.cg_z,
            &mut self.cg_p,
            &mut self.cg_q,
        ] {
            v.clear();
            v.resize(n, 0.0);
        }
        if n == 0 {
            return Ok(0);
        }
        self.build_preconditioner(sys);
        let mut r = std::mem::take(&mut self.cg_r);
        let mut z = std::mem::take(&mut self.cg_z);
        let mut p = std::mem::take(&mut self.cg_p);
        let mut q = std::mem::take(&mut self.cg_q);
        let mut x = std::mem::take(&mut self.cg_x);
        r.copy_from_slice(&self.cg_b);
        let result = (|| {
            if norm(&r) <= target {
                return Ok(0);
            }
            self.precondition(sys, &r, &mut z);
            p.copy_from_slice(&z);
            let mut rz = dot(&r, &z);
            for it in 1..=config.cg_max_iters {
                self.s_apply(sys, &p, &mut q);
                let pq = dot(&p, &q);
                if !(pq > 0.0) || !pq.is_finite() {
                    return Err(LinearSolveError::NotPositiveDefinite);
                }
                let alpha = rz / pq;
                for k in 0..n {
                    x[k] += alpha * p[k];
                    r[k] -= alpha * q[k];
                }
                let mut restart = false;
                if norm(&r) <= target {
                    // confirm on the true residual
                    self.s_apply(sys, &x, &mut q);
                    for k in 0..n {
                        r[k] = self.cg_b[k] - q[k];
                    }
                    if norm(&r) <= target {
                        return Ok(it);
                    }
                    restart = true;
                }
                self.precondition(sys, &r, &mut z);
                let rz_new = dot(&r, &z);
                if restart {
                    p.copy_from_slice(&z);
                } else {
                    let beta = rz_new / rz;
                    for k in 0..n {
                        p[k] = z[k] + beta * p[k];
                    }
                }
                rz = rz_new;
            }
            Err(LinearSolveError::CgStall {
                iterations: config.cg_max_iters,
            })
        })();
        self.cg_r = r;
        self.cg_z = z;
        self.cg_p = p;
        self.cg_q = q;
        self.cg_x = x;
        result
    }
}

fn sub_assign(dst: &mut [f64], prod: &[f64], transposed: bool, rows: usize, cols: usize) {
    if transposed {
        // prod is cols x rows
        for r in 0..rows {
            for c in 0..cols {
                dst[r * cols + c] -= prod[c * rows + r];
            }
        }
    } else {
        for (d, p) in dst.iter_mut().zip(prod) {
            *d -= p;
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
