//! Files written by the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sfw_core::SfwTrace;

/// 17 significant digits; enough to round-trip any f64.
pub fn float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

fn opt_float(x: Option<f64>) -> String {
    x.map(float).unwrap_or_default()
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

pub fn write_trace(path: &Path, trace: &SfwTrace, congestion: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    w.write_record(["outer_iter", "t", "V_solver", "V_physical", "F", "gap", "sym_entropy", "step_tv", "inner_iters"])?;
    for (row, f) in trace.rows.iter().zip(congestion) {
        w.write_record([
            row.outer_iter.to_string(),
            float(row.t),
            float(row.v_solver),
            opt_float(row.v_physical),
            float(*f),
            opt_float(row.gap),
            opt_float(row.sym_entropy),
            opt_float(row.step_tv),
            row.inner_iters.map(|n| n.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Serialize)]
pub struct Manifest<S: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_path: PathBuf,
    pub overrides: Vec<String>,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<PathBuf>,
    pub config_echo: String,
    pub summary: S,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}
