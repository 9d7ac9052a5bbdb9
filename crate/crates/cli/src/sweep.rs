//! Step-size sweeps: one run per alpha against a shared reference energy.

use std::path::{Path, PathBuf};
use std::thread;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sfw_core::flow::{collapse_deviation, normalized_log_gap};

use crate::experiment::{execute, prepare, reference, Finished, RunSummary};
use crate::output::{ensure_dir, float, now, write_json, write_text, write_trace, Manifest};
use crate::{load_config, stop_code, EXIT_CAP};

/// Outer steps skipped before curves are compared.
pub const WARMUP: usize = 5;

pub fn parse_alphas(list: &str) -> Result<Vec<f64>> {
    let alphas: Vec<f64> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().with_context(|| format!("alphas: `{s}` is not a number")))
        .collect::<Result<_>>()?;
    if alphas.is_empty() {
        bail!("alphas: the list of step sizes is empty");
    }
    Ok(alphas)
}

#[derive(Debug, Serialize)]
struct PairDeviation {
    alpha_a: f64,
    alpha_b: f64,
    max_relative_deviation: Option<f64>,
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    alphas: &'a [f64],
    warmup_steps: usize,
    v_star: f64,
    max_collapse_deviation: Option<f64>,
    pairs: &'a [PairDeviation],
    runs: Vec<&'a RunSummary>,
}

fn run_dir(out: &Path, alpha: f64) -> PathBuf {
    out.join(format!("alpha_{alpha}"))
}

pub fn cmd_sweep(config_path: &Path, alphas: &str, out: &Path, overrides: &[String]) -> Result<u8> {
    let started = now();
    let alphas = parse_alphas(alphas)?;
    let config = load_config(config_path, overrides)?;
    if !config.reference.enabled {
        bail!("reference.enabled: a sweep compares gap curves and needs the reference run");
    }
    let mut configs = Vec::with_capacity(alphas.len());
    for &a in &alphas {
        let mut c = config.clone();
        c.solver.alpha = a;
        c.validate().with_context(|| format!("alphas: step size {a}"))?;
        configs.push(c.sfw_config());
    }
    ensure_dir(out)?;
    let prep = prepare(config)?;
    let v_star = reference(&prep)?.expect("reference enabled").v_star;
    eprintln!("reference: V* = {v_star:.12}");

    let results: Vec<Finished> = thread::scope(|scope| {
        let handles: Vec<_> =
            configs.iter().map(|sfw| scope.spawn(|| execute(&prep, sfw, Some(v_star)))).collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect::<Result<_>>()
    })?;

    let mut outputs = Vec::new();
    for (alpha, fin) in alphas.iter().zip(&results) {
        let dir = run_dir(out, *alpha);
        ensure_dir(&dir)?;
        let (trace, summary) = (dir.join("trace.csv"), dir.join("summary.json"));
        write_trace(&trace, &fin.output.trace, &fin.congestion)?;
        write_json(&summary, &fin.summary)?;
        outputs.extend([trace, summary]);
    }

    let curves: Vec<Option<Vec<(f64, f64)>>> = results.iter().map(|f| normalized_log_gap(&f.output.trace)).collect();
    let gaps_path = out.join("gaps.csv");
    let mut w = csv::Writer::from_path(&gaps_path)?;
    w.write_record(["alpha", "outer_iter", "t", "gap", "log_gap_ratio"])?;
    for (alpha, fin) in alphas.iter().zip(&results) {
        let g0 = fin.output.trace.rows[0].gap.unwrap_or(f64::NAN);
        for row in &fin.output.trace.rows {
            let gap = row.gap.unwrap_or(f64::NAN);
            let ratio = if gap > 0.0 && g0 > 0.0 { float((gap / g0).ln()) } else { String::new() };
            w.write_record([alpha.to_string(), row.outer_iter.to_string(), float(row.t), float(gap), ratio])?;
        }
    }
    w.flush()?;

    let mut pairs = Vec::new();
    for a in 0..alphas.len() {
        for b in a + 1..alphas.len() {
            // Compare at the recorded times of the coarser run.
            let (coarse, fine) = if alphas[a] >= alphas[b] { (a, b) } else { (b, a) };
            let dev = match (&curves[coarse], &curves[fine]) {
                (Some(c), Some(f)) => collapse_deviation(c, f, WARMUP),
                _ => None,
            };
            pairs.push(PairDeviation { alpha_a: alphas[a], alpha_b: alphas[b], max_relative_deviation: dev });
        }
    }
    let max_dev = if alphas.len() == 1 {
        Some(0.0)
    } else {
        pairs.iter().filter_map(|p| p.max_relative_deviation).reduce(f64::max)
    };
    let collapse_path = out.join("collapse.csv");
    let mut w = csv::Writer::from_path(&collapse_path)?;
    w.write_record(["alpha_a", "alpha_b", "max_relative_deviation"])?;
    for p in &pairs {
        w.write_record([
            p.alpha_a.to_string(),
            p.alpha_b.to_string(),
            p.max_relative_deviation.map(float).unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let summary = SweepSummary {
        alphas: &alphas,
        warmup_steps: WARMUP,
        v_star,
        max_collapse_deviation: max_dev,
        pairs: &pairs,
        runs: results.iter().map(|f| &f.summary).collect(),
    };
    let echo_path = out.join("config.toml");
    let echo = prep.config.to_toml_string();
    write_text(&echo_path, &echo)?;
    let manifest_path = out.join("manifest.json");
    outputs.extend([gaps_path, collapse_path, echo_path, manifest_path.clone()]);
    let manifest = Manifest {
        tool: "sfw",
        version: env!("CARGO_PKG_VERSION"),
        command: "sweep".into(),
        config_path: config_path.to_path_buf(),
        overrides: overrides.to_vec(),
        started,
        finished: now(),
        outputs,
        config_echo: echo,
        summary: &summary,
    };
    write_json(&manifest_path, &manifest)?;

    match max_dev {
        Some(d) => println!("collapse: max pairwise relative deviation after {WARMUP} steps = {:.2}%", 100.0 * d),
        None => println!("collapse: no overlapping gap curves to compare"),
    }
    let capped = results.iter().any(|f| stop_code(f.summary.stop) == EXIT_CAP);
    Ok(if capped { EXIT_CAP } else { 0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_lists() {
        assert_eq!(parse_alphas("0.01,0.02, 0.04").unwrap(), vec![0.01, 0.02, 0.04]);
        assert!(parse_alphas("").is_err());
        assert!(parse_alphas(" , ").is_err());
        assert!(parse_alphas("0.1,x").is_err());
    }
}
