#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gsfm_core::sparse_block::BlockSparseJacobian;
use nalgebra::DMatrix;

pub fn gsfm() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_gsfm"))
}

/// Runs the binary with `args` and an optional worker count.
pub fn run(args: &[&str], workers: Option<usize>) -> Output {
    let mut cmd = Command::new(gsfm());
    cmd.args(args).env("RUST_LOG", "warn");
    match workers {
        Some(n) => cmd.env("GSFM_WORKERS", n.to_string()),
        None => cmd.env_remove("GSFM_WORKERS"),
    };
    cmd.output().expect("gsfm runs")
}

pub fn path_arg(p: &Path) -> String {
    p.display().to_string()
}

/// Materializes a block Jacobian entry by entry.
pub fn dense_jacobian(j: &BlockSparseJacobian) -> DMatrix<f64> {
    let layout = j.layout();
    let mut out = DMatrix::zeros(layout.total_residuals(), layout.total_params());
    for (k, e) in j.entries().iter().enumerate() {
        let r = layout.residual(e.residual_block);
        let p = layout.param(e.param_block);
        let b = j.block(k);
        for row in 0..r.height {
            for col in 0..p.width() {
                out[(r.offset + row, p.offset + col)] = b[row * p.width() + col];
            }
        }
    }
    out
}

/// Central differences with a relative step.
pub fn numeric_jacobian(theta: &[f64], m: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m, theta.len());
    let mut t = theta.to_vec();
    for k in 0..theta.len() {
        let h = 1e-6 * theta[k].abs().max(1.0);
        t[k] = theta[k] + h;
        let plus = f(&t);
        t[k] = theta[k] - h;
        let minus = f(&t);
        t[k] = theta[k];
        for r in 0..m {
            out[(r, k)] = (plus[r] - minus[r]) / (2.0 * h);
        }
    }
    out
}

/// Parses a CSV file into a header and rows of raw fields.
pub fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut lines = text.lines();
    let header = lines
        .next()
        .unwrap_or("")
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    (header, rows)
}

pub fn column(header: &[String], name: &str) -> usize {
    header
        .iter()
        .position(|h| h == name)
        .unwrap_or_else(|| panic!("no column {name}"))
}

pub fn manifest(dir: &Path) -> toml::Table {
    std::fs::read_to_string(dir.join("manifest.toml"))
        .unwrap()
        .parse()
        .unwrap()
}

/// `[[stages]]` entry named `name`.
pub fn stage<'a>(manifest: &'a toml::Table, name: &str) -> &'a toml::Table {
    manifest["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s.as_table().unwrap())
        .find(|s| s["name"].as_str() == Some(name))
        .unwrap_or_else(|| panic!("no stage {name}"))
}
