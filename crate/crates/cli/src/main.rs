//! `sfw`: run, sweep and verify the Sinkhorn-Frank-Wolfe solver.
//!
//! Exit codes: 0 success, 1 error, 2 iteration cap reached, 3 verification failure.

mod experiment;
mod output;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use sfw_core::verify::{run_suite, VerifyOptions};
use sfw_core::{ExperimentConfig, StopReason};

use experiment::{execute, prepare, reference, ReferenceSummary, RunSummary};
use output::{ensure_dir, now, write_json, write_text, write_trace, Manifest};

pub const EXIT_ERROR: u8 = 1;
pub const EXIT_CAP: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "sfw", version, about = "Sinkhorn-Frank-Wolfe solver for congested entropic transport")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write trace.csv, summary.json and manifest.json.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override a config value, e.g. `--set congestion.gamma=0` or `--set gamma=0`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run the same experiment for several step sizes and compare the rescaled gap curves.
    Sweep {
        config: PathBuf,
        /// Comma-separated step sizes.
        #[arg(long, allow_hyphen_values = true)]
        alphas: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run the property suite and write verify.json.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Breaks the tilting identity on purpose (tests the suite itself).
        #[arg(long, hide = true)]
        corrupt_tilting_sign: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run { config, out, set } => cmd_run(&config, &out, &set),
        Command::Sweep { config, alphas, out, set } => sweep::cmd_sweep(&config, &alphas, &out, &set),
        Command::Verify { seed, out, corrupt_tilting_sign } => cmd_verify(seed, &out, corrupt_tilting_sign),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    ExperimentConfig::from_toml_str_with_overrides(&text, overrides).map_err(|e| anyhow!("{}: {e}", path.display()))
}

pub fn stop_code(stop: StopReason) -> u8 {
    match stop {
        StopReason::Converged => 0,
        StopReason::IterationCap => EXIT_CAP,
    }
}

#[derive(Serialize)]
struct RunReport<'a> {
    run: &'a RunSummary,
    reference: Option<&'a ReferenceSummary>,
    config: &'a ExperimentConfig,
}

fn cmd_run(config_path: &Path, out: &Path, overrides: &[String]) -> Result<u8> {
    let started = now();
    let config = load_config(config_path, overrides)?;
    ensure_dir(out)?;
    let prep = prepare(config)?;
    let (n, m) = prep.scenario.kernel.dim();
    eprintln!("scenario: {n}x{m} coupling, gamma = {}", prep.scenario.config.gamma);

    let reference = reference(&prep)?;
    if let Some(r) = &reference {
        eprintln!("reference: V* = {:.12} after {} steps ({:.1}s)", r.v_star, r.outer_steps, r.seconds);
    }
    let sfw = prep.config.sfw_config();
    let fin = execute(&prep, &sfw, reference.as_ref().map(|r| r.v_star))?;

    let trace_path = out.join("trace.csv");
    let summary_path = out.join("summary.json");
    let echo_path = out.join("config.toml");
    let manifest_path = out.join("manifest.json");
    let echo = prep.config.to_toml_string();
    write_trace(&trace_path, &fin.output.trace, &fin.congestion)?;
    write_json(&summary_path, &RunReport { run: &fin.summary, reference: reference.as_ref(), config: &prep.config })?;
    write_text(&echo_path, &echo)?;
    let manifest = Manifest {
        tool: "sfw",
        version: env!("CARGO_PKG_VERSION"),
        command: "run".into(),
        config_path: config_path.to_path_buf(),
        overrides: overrides.to_vec(),
        started,
        finished: now(),
        outputs: vec![trace_path, summary_path, echo_path, manifest_path.clone()],
        config_echo: echo,
        summary: &fin.summary,
    };
    write_json(&manifest_path, &manifest)?;

    let s = &fin.summary;
    println!(
        "{:?} after {} steps: V = {:.10}, V_physical = {:.10}, F = {:.6}, step-to-fixed-point TV = {:.3e}, marginal error = {:.3e}",
        s.stop, s.outer_steps, s.v_solver, s.v_physical, s.congestion, s.fixed_point_residual, s.marginal_residual
    );
    Ok(stop_code(s.stop))
}

fn cmd_verify(seed: u64, out: &Path, corrupt_tilting_sign: bool) -> Result<u8> {
    ensure_dir(out)?;
    let report = run_suite(VerifyOptions { seed, corrupt_tilting_sign });
    #[derive(Serialize)]
    struct VerifyFile<'a> {
        version: &'static str,
        finished: String,
        #[serde(flatten)]
        report: &'a sfw_core::verify::VerifyReport,
    }
    let path = out.join("verify.json");
    write_json(&path, &VerifyFile { version: env!("CARGO_PKG_VERSION"), finished: now(), report: &report })?;
    for c in &report.checks {
        println!(
            "{:<4} {:<28} {:>11.3e} (limit {:.1e}, {:.2}s)  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold,
            c.seconds,
            c.detail
        );
    }
    if report.passed {
        println!("all {} checks passed (seed {seed}); report in {}", report.checks.len(), path.display());
        Ok(0)
    } else {
        let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
        eprintln!("verification failed: {}", names.join(", "));
        Ok(EXIT_VERIFY)
    }
}
