// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ba;
pub mod gp;
pub mod io;
pub mod lm;
pub mod scene;
pub mod sparse_block;
pub mod synth_metrics;
