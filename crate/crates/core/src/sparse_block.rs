//! Block-sparse Jacobian storage and the normal-equation kernels built on it.
//!
//! The Jacobian is kept as a sorted coordinate list of small dense blocks,
//! one per (residual block, parameter block) pair that is structurally
//! non-zero. `JᵀJ` is accumulated block-wise into an upper-triangular block
//! CSR plus dense diagonal blocks, so storage stays proportional to the number
//! of Jacobian blocks rather than to `params x residuals`.
//!
//! All kernels accumulate in a fixed order (residual-block order), so their
//! output is bit-identical across runs regardless of the worker count used to
//! evaluate the blocks.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Role of a parameter block. Fixes its width and whether the Schur solver
/// eliminates it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Quaternion (w, x, y, z) followed by the camera center.
    CameraPose,
    Point,
    Focal,
    GpCenter,
    GpPoint,
    GpScale,
}

impl ParamKind {
    pub const fn width(self) -> usize {
        match self {
            ParamKind::CameraPose => 7,
            ParamKind::Point | ParamKind::GpCenter | ParamKind::GpPoint => 3,
            ParamKind::Focal | ParamKind::GpScale => 1,
        }
    }

    /// Elimination stage for the Schur solver; `None` for retained blocks.
    /// Lower stages are eliminated first.
    pub const fn elimination_stage(self) -> Option<usize> {
        match self {
            ParamKind::GpScale => Some(0),
            ParamKind::Point | ParamKind::GpPoint => Some(1),
            ParamKind::CameraPose | ParamKind::Focal | ParamKind::GpCenter => None,
        }
    }

    pub const fn is_eliminable(self) -> bool {
        self.elimination_stage().is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBlock {
    pub kind: ParamKind,
    pub offset: usize,
}

impl ParamBlock {
    pub const fn width(&self) -> usize {
        self.kind.width()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualBlock {
    pub height: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BlockLayout {
    params: Vec<ParamBlock>,
    residuals: Vec<ResidualBlock>,
    total_params: usize,
    total_residuals: usize,
}

impl BlockLayout {
    pub fn new(
        param_kinds: impl IntoIterator<Item = ParamKind>,
        residual_heights: impl IntoIterator<Item = usize>,
    ) -> Self {
        let mut total_params = 0;
        let params = param_kinds
            .into_iter()
            .map(|kind| {
                let block = ParamBlock {
                    kind,
                    offset: total_params,
                };
                total_params += kind.width();
                block
            })
            .collect();
        let mut total_residuals = 0;
        let residuals = residual_heights
            .into_iter()
            .map(|height| {
                let block = ResidualBlock {
                    height,
                    offset: total_residuals,
                };
                total_residuals += height;
                block
            })
            .collect();
        Self {
            params,
            residuals,
            total_params,
            total_residuals,
        }
    }

    pub fn params(&self) -> &[ParamBlock] {
        &self.params
    }

    pub fn residuals(&self) -> &[ResidualBlock] {
        &self.residuals
    }

    pub fn param(&self, block: usize) -> ParamBlock {
        self.params[block]
    }

    pub fn residual(&self, block: usize) -> ResidualBlock {
        self.residuals[block]
    }

    pub fn num_param_blocks(&self) -> usize {
        self.params.len()
    }

    pub fn num_residual_blocks(&self) -> usize {
        self.residuals.len()
    }

    pub fn total_params(&self) -> usize {
        self.total_params
    }

    pub fn total_residuals(&self) -> usize {
        self.total_residuals
    }
}

/// Location of one dense block inside [`BlockSparseJacobian::values`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JacobianEntry {
    pub residual_block: usize,
    pub param_block: usize,
    pub offset: usize,
}

/// Sorted coordinate list of dense row-major `height x width` blocks.
#[derive(Debug, Clone, Default)]
pub struct BlockSparseJacobian {
    layout: Arc<BlockLayout>,
    entries: Vec<JacobianEntry>,
    values: Vec<f64>,
}

impl BlockSparseJacobian {
    pub fn new(layout: Arc<BlockLayout>) -> Self {
        Self {
            layout,
            entries: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Drops all entries but keeps allocations for reuse.
    pub fn reset(&mut self, layout: Arc<BlockLayout>) {
        self.layout = layout;
        self.entries.clear();
        self.values.clear();
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn layout_arc(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    pub fn entries(&self) -> &[JacobianEntry] {
        &self.entries
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn block(&self, entry: usize) -> &[f64] {
        let e = self.entries[entry];
        let len = self.layout.residual(e.residual_block).height
            * self.layout.param(e.param_block).width();
        &self.values[e.offset..e.offset + len]
    }

    /// Appends a zero block and returns its value offset. Entries must arrive
    /// in strictly increasing `(residual_block, param_block)` order.
    pub fn reserve_block(
        &mut self,
        residual_block: usize,
        param_block: usize,
    ) -> Result<usize, SparseError> {
        if residual_block >= self.layout.num_residual_blocks()
            || param_block >= self.layout.num_param_blocks()
        {
            return Err(SparseError::LayoutMismatch(format!(
                "block ({residual_block}, {param_block}) outside layout"
            )));
        }
        if let Some(last) = self.entries.last() {
            if (last.residual_block, last.param_block) >= (residual_block, param_block) {
                return Err(SparseError::LayoutMismatch(format!(
                    "entry ({residual_block}, {param_block}) out of order after ({}, {})",
                    last.residual_block, last.param_block
                )));
            }
        }
        let offset = self.values.len();
        let len =
            self.layout.residual(residual_block).height * self.layout.param(param_block).width();
        self.values.resize(offset + len, 0.0);
        self.entries.push(JacobianEntry {
            residual_block,
            param_block,
            offset,
        });
        Ok(offset)
    }

    pub fn push_block(
        &mut self,
        residual_block: usize,
        param_block: usize,
        block: &[f64],
    ) -> Result<(), SparseError> {
        let offset = self.reserve_block(residual_block, param_block)?;
        let expected = self.values.len() - offset;
        if block.len() != expected {
            self.entries.pop();
            self.values.truncate(offset);
            return Err(SparseError::LayoutMismatch(format!(
                "block ({residual_block}, {param_block}) has {} values, expected {expected}",
                block.len()
            )));
        }
        self.values[offset..].copy_from_slice(block);
        Ok(())
    }

    fn check_shapes(&self) -> Result<(), SparseError> {
        let mut expected = 0;
        for e in &self.entries {
            if e.offset != expected {
                return Err(SparseError::LayoutMismatch(format!(
                    "entry ({}, {}) at offset {} expected {expected}",
                    e.residual_block, e.param_block, e.offset
                )));
            }
            expected += self.layout.residual(e.residual_block).height
                * self.layout.param(e.param_block).width();
        }
        if expected != self.values.len() {
            return Err(SparseError::LayoutMismatch(format!(
                "{} values stored, blocks need {expected}",
                self.values.len()
            )));
        }
        Ok(())
    }
}

/// Block-structured `JᵀJ` with gradient and damping.
///
/// Diagonal blocks are dense `w x w`; off-diagonal blocks are stored once for
/// `a < b` in an upper-triangular block CSR. `gradient` holds `-Jᵀr`.
#[derive(Debug, Clone, Default)]
pub struct BlockNormalSystem {
    layout: Arc<BlockLayout>,
    diag_offsets: Vec<usize>,
    diag: Vec<f64>,
    undamped_diag: Vec<f64>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    block_offsets: Vec<usize>,
    values: Vec<f64>,
    gradient: Vec<f64>,
    lambda: f64,
    pattern_id: u64,
}

static NEXT_PATTERN_ID: AtomicU64 = AtomicU64::new(1);

impl BlockNormalSystem {
    /// Identifier of the sparsity pattern; changes whenever the pattern is rebuilt.
    pub fn pattern_id(&self) -> u64 {
        self.pattern_id
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn layout_arc(&self) -> &Arc<BlockLayout> {
        &self.layout
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn gradient(&self) -> &[f64] {
        &self.gradient
    }

    pub fn gradient_mut(&mut self) -> &mut [f64] {
        &mut self.gradient
    }

    pub fn diag_block(&self, block: usize) -> &[f64] {
        let w = self.layout.param(block).width();
        let off = self.diag_offsets[block];
        &self.diag[off..off + w * w]
    }

    /// Off-diagonal block `(a, b)` with `a < b`, row-major `w_a x w_b`.
    pub fn off_diag_block(&self, a: usize, b: usize) -> Option<&[f64]> {
        debug_assert!(a < b);
        let row = &self.cols[self.row_ptr[a]..self.row_ptr[a + 1]];
        let pos = row.binary_search(&b).ok()?;
        let slot = self.row_ptr[a] + pos;
        let len = self.layout.param(a).width() * self.layout.param(b).width();
        let off = self.block_offsets[slot];
        Some(&self.values[off..off + len])
    }

    /// Iterates over stored `(a, b, block)` with `a < b`.
    pub fn off_diag_blocks(&self) -> impl Iterator<Item = (usize, usize, &[f64])> + '_ {
        (0..self.layout.num_param_blocks()).flat_map(move |a| {
            (self.row_ptr[a]..self.row_ptr[a + 1]).map(move |slot| {
                let b = self.cols[slot];
                let len = self.layout.param(a).width() * self.layout.param(b).width();
                let off = self.block_offsets[slot];
                (a, b, &self.values[off..off + len])
            })
        })
    }

    pub fn num_off_diag_blocks(&self) -> usize {
        self.cols.len()
    }

    /// Undamped diagonal scalars `a_kk`.
    pub fn undamped_diagonal(&self) -> &[f64] {
        &self.undamped_diag
    }

    /// Sets every diagonal scalar to `a_kk (1 + lambda)` using the undamped
    /// values, so repeated calls with different `lambda` do not compound.
    pub fn damp_in_place(&mut self, lambda: f64) {
        for (block, p) in self.layout.params().iter().enumerate() {
            let w = p.width();
            let off = self.diag_offsets[block];
            for k in 0..w {
                self.diag[off + k * w + k] = self.undamped_diag[p.offset + k] * (1.0 + lambda);
            }
        }
        self.lambda = lambda;
    }

    /// `out = A x` using the current (possibly damped) blocks.
    pub fn multiply(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (block, p) in self.layout.params().iter().enumerate() {
            let w = p.width();
            let d = self.diag_block(block);
            for r in 0..w {
                let mut s = 0.0;
                for c in 0..w {
                    s += d[r * w + c] * x[p.offset + c];
                }
                out[p.offset + r] += s;
            }
        }
        for (ba, bb, blk) in self.off_diag_blocks() {
            let (pa, pb) = (self.layout.param(ba), self.layout.param(bb));
            let wb = pb.width();
            for r in 0..pa.width() {
                let xr = x[pa.offset + r];
                let mut s = 0.0;
                for c in 0..wb {
                    let v = blk[r * wb + c];
                    s += v * x[pb.offset + c];
                    out[pb.offset + c] += v * xr;
                }
                out[pa.offset + r] += s;
            }
        }
    }

    /// Full symmetric matrix. Only sensible for small systems.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.layout.total_params();
        let mut a = DMatrix::zeros(n, n);
        for (block, p) in self.layout.params().iter().enumerate() {
            let w = p.width();
            let d = self.diag_block(block);
            for r in 0..w {
                for c in 0..w {
                    a[(p.offset + r, p.offset + c)] = d[r * w + c];
                }
            }
        }
        for (ba, bb, blk) in self.off_diag_blocks() {
            let (pa, pb) = (self.layout.param(ba), self.layout.param(bb));
            let wb = pb.width();
            for r in 0..pa.width() {
                for c in 0..wb {
                    let v = blk[r * wb + c];
                    a[(pa.offset + r, pb.offset + c)] = v;
                    a[(pb.offset + c, pa.offset + r)] = v;
                }
            }
        }
        a
    }

    pub(crate) fn row_range(&self, a: usize) -> std::ops::Range<usize> {
        self.row_ptr[a]..self.row_ptr[a + 1]
    }

    pub(crate) fn slot_col(&self, slot: usize) -> usize {
        self.cols[slot]
    }

    pub(crate) fn slot_values(&self, slot: usize, len: usize) -> &[f64] {
        let off = self.block_offsets[slot];
        &self.values[off..off + len]
    }
}

/// Reusable `JᵀJ` / `Jᵀr` assembler. The symbolic pattern and per-row scatter
/// slots are computed once per Jacobian structure and reused while the
/// structure stays the same.
#[derive(Debug, Default)]
pub struct NormalAssembler {
    keys: Vec<(usize, usize)>,
    layout: Option<Arc<BlockLayout>>,
    pair_slots: Vec<usize>,
    num_slots: usize,
    rebuilds: usize,
}

impl NormalAssembler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of times the symbolic pattern has been (re)built.
    pub fn rebuilds(&self) -> usize {
        self.rebuilds
    }

    fn structure_matches(&self, j: &BlockSparseJacobian) -> bool {
        match &self.layout {
            Some(l) if **l == *j.layout => {}
            _ => return false,
        }
        self.keys.len() == j.entries.len()
            && self
                .keys
                .iter()
                .zip(&j.entries)
                .all(|(k, e)| *k == (e.residual_block, e.param_block))
    }

    fn rebuild(&mut self, j: &BlockSparseJacobian, out: &mut BlockNormalSystem) {
        self.rebuilds += 1;
        let layout = j.layout_arc().clone();
        self.keys.clear();
        self.keys
            .extend(j.entries.iter().map(|e| (e.residual_block, e.param_block)));

        // Diagonal storage.
        out.diag_offsets.clear();
        let mut off = 0;
        for p in layout.params() {
            out.diag_offsets.push(off);
            off += p.width() * p.width();
        }
        out.diag.clear();
        out.diag.resize(off, 0.0);
        out.undamped_diag.clear();
        out.undamped_diag.resize(layout.total_params(), 0.0);
        out.gradient.clear();
        out.gradient.resize(layout.total_params(), 0.0);

        // Upper pattern from co-occurring blocks within each residual row.
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(j.entries.len() * 2);
        for row in row_groups(&j.entries) {
            for (i, ea) in row.iter().enumerate() {
                for eb in &row[i + 1..] {
                    pairs.push((ea.param_block, eb.param_block));
                }
            }
        }
        let mut unique = pairs.clone();
        unique.sort_unstable();
        unique.dedup();

        let nblocks = layout.num_param_blocks();
        out.row_ptr.clear();
        out.row_ptr.resize(nblocks + 1, 0);
        for &(a, _) in &unique {
            out.row_ptr[a + 1] += 1;
        }
        for a in 0..nblocks {
            out.row_ptr[a + 1] += out.row_ptr[a];
        }
        out.cols.clear();
        out.cols.extend(unique.iter().map(|&(_, b)| b));
        out.block_offsets.clear();
        let mut voff = 0;
        for &(a, b) in &unique {
            out.block_offsets.push(voff);
            voff += layout.param(a).width() * layout.param(b).width();
        }
        out.values.clear();
        out.values.resize(voff, 0.0);
        self.num_slots = unique.len();

        self.pair_slots.clear();
        self.pair_slots.extend(pairs.iter().map(|pair| {
            unique
                .binary_search(pair)
                .expect("pair collected from the same rows")
        }));
        out.layout = layout.clone();
        out.pattern_id = NEXT_PATTERN_ID.fetch_add(1, Ordering::Relaxed);
        self.layout = Some(layout);
    }

    /// Accumulates `JᵀJ` into `out` and, when residuals are given, sets the
    /// gradient to `-Jᵀr`. Damping is reset to zero.
    pub fn assemble(
        &mut self,
        j: &BlockSparseJacobian,
        residuals: Option<&[f64]>,
        out: &mut BlockNormalSystem,
    ) -> Result<(), SparseError> {
        j.check_shapes()?;
        if let Some(r) = residuals {
            if r.len() != j.layout.total_residuals() {
                return Err(SparseError::DimensionMismatch {
                    expected: j.layout.total_residuals(),
                    got: r.len(),
                });
            }
        }
        if !self.structure_matches(j)
            || *out.layout != *j.layout
            || out.cols.len() != self.num_slots
            || out.row_ptr.len() != j.layout.num_param_blocks() + 1
        {
            self.rebuild(j, out);
        }
        let layout = j.layout_arc().clone();
        out.diag.iter_mut().for_each(|v| *v = 0.0);
        out.values.iter_mut().for_each(|v| *v = 0.0);
        out.gradient.iter_mut().for_each(|v| *v = 0.0);
        out.lambda = 0.0;

        let mut pair_cursor = 0;
        for row in row_groups(&j.entries) {
            let h = layout.residual(row[0].residual_block).height;
            for ea in row {
                let wa = layout.param(ea.param_block).width();
                let ba = &j.values[ea.offset..ea.offset + h * wa];
                let doff = out.diag_offsets[ea.param_block];
                add_at_b(&mut out.diag[doff..doff + wa * wa], ba, ba, h, wa, wa);
            }
            for (i, ea) in row.iter().enumerate() {
                let wa = layout.param(ea.param_block).width();
                let ba = &j.values[ea.offset..ea.offset + h * wa];
                for eb in &row[i + 1..] {
                    let wb = layout.param(eb.param_block).width();
                    let bb = &j.values[eb.offset..eb.offset + h * wb];
                    let slot = self.pair_slots[pair_cursor];
                    pair_cursor += 1;
                    let off = out.block_offsets[slot];
                    add_at_b(&mut out.values[off..off + wa * wb], ba, bb, h, wa, wb);
                }
            }
        }

        for (block, p) in layout.params().iter().enumerate() {
            let w = p.width();
            let off = out.diag_offsets[block];
            for k in 0..w {
                out.undamped_diag[p.offset + k] = out.diag[off + k * w + k];
            }
        }

        if let Some(r) = residuals {
            accumulate_jtr(j, r, &mut out.gradient);
            out.gradient.iter_mut().for_each(|g| *g = -*g);
        }
        Ok(())
    }
}

/// Consecutive runs of entries sharing a residual block.
fn row_groups(entries: &[JacobianEntry]) -> impl Iterator<Item = &[JacobianEntry]> {
    entries.chunk_by(|a, b| a.residual_block == b.residual_block)
}

/// `dst (wa x wb) += aᵀ b` for row-major `a (h x wa)`, `b (h x wb)`.
#[inline]
pub(crate) fn add_at_b(dst: &mut [f64], a: &[f64], b: &[f64], h: usize, wa: usize, wb: usize) {
    for k in 0..h {
        let ar = &a[k * wa..(k + 1) * wa];
        let br = &b[k * wb..(k + 1) * wb];
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let d = &mut dst[i * wb..(i + 1) * wb];
            for (dv, &bv) in d.iter_mut().zip(br) {
                *dv += av * bv;
            }
        }
    }
}

fn accumulate_jtr(j: &BlockSparseJacobian, r: &[f64], out: &mut [f64]) {
    let layout = j.layout();
    for e in &j.entries {
        let rb = layout.residual(e.residual_block);
        let p = layout.param(e.param_block);
        let w = p.width();
        let block = &j.values[e.offset..e.offset + rb.height * w];
        let seg = &mut out[p.offset..p.offset + w];
        for k in 0..rb.height {
            let rv = r[rb.offset + k];
            for (c, g) in seg.iter_mut().enumerate() {
                *g += block[k * w + c] * rv;
            }
        }
    }
}

/// `JᵀJ` with zero gradient and zero damping.
pub fn jtj(j: &BlockSparseJacobian) -> Result<BlockNormalSystem, SparseError> {
    let mut out = BlockNormalSystem::default();
    NormalAssembler::new().assemble(j, None, &mut out)?;
    Ok(out)
}

/// `Jᵀr`.
pub fn jtr(j: &BlockSparseJacobian, residuals: &[f64]) -> Result<Vec<f64>, SparseError> {
    j.check_shapes()?;
    if residuals.len() != j.layout.total_residuals() {
        return Err(SparseError::DimensionMismatch {
            expected: j.layout.total_residuals(),
            got: residuals.len(),
        });
    }
    let mut out = vec![0.0; j.layout.total_params()];
    accumulate_jtr(j, residuals, &mut out);
    Ok(out)
}

/// Returns a copy of `sys` whose diagonal scalars are `a_kk (1 + lambda)`.
pub fn apply_damping(sys: &BlockNormalSystem, lambda: f64) -> BlockNormalSystem {
    let mut out = sys.clone();
    out.damp_in_place(lambda);
    out
}
