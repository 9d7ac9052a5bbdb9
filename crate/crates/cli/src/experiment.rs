//! Builds and runs one configured experiment, without touching the filesystem.

use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sfw_core::flow::{log_gap_slope, run_observed};
use sfw_core::oracles::fixed_point_residual;
use sfw_core::{
    build_scenario, default_initial, reference_energy, Coupling, ExperimentConfig,
    RunOutput, Scenario, SfwConfig, StopReason,
};

pub struct Prepared {
    pub config: ExperimentConfig,
    pub scenario: Scenario,
    pub p0: Coupling,
}

pub fn prepare(config: ExperimentConfig) -> Result<Prepared> {
    let scenario = build_scenario(&config.scenario_config()).context("building the scenario")?;
    let p0 = default_initial(&scenario.kernel, &scenario.mu, &scenario.nu).context("building the initial plan")?;
    Ok(Prepared { config, scenario, p0 })
}

#[derive(Debug, Clone, Serialize)]
pub struct ReferenceSummary {
    pub v_star: f64,
    pub v_min: f64,
    pub tail: f64,
    pub outer_steps: usize,
    pub seconds: f64,
}

/// The long reference run, if the config asks for one.
pub fn reference(prep: &Prepared) -> Result<Option<ReferenceSummary>> {
    if !prep.config.reference.enabled {
        return Ok(None);
    }
    let clock = Instant::now();
    let model = prep.scenario.solver_model();
    let est = reference_energy(&prep.p0, &prep.scenario.kernel, &model, &prep.config.reference_config())
        .context("reference run")?;
    Ok(Some(ReferenceSummary {
        v_star: est.v_star,
        v_min: est.v_min,
        tail: est.tail,
        outer_steps: est.output.trace.rows.len() - 1,
        seconds: clock.elapsed().as_secs_f64(),
    }))
}

pub struct Finished {
    pub output: RunOutput,
    /// Congestion cost in physical units, one entry per trace row.
    pub congestion: Vec<f64>,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub stop: StopReason,
    pub outer_steps: usize,
    pub alpha: f64,
    pub final_alpha: f64,
    pub t_final: f64,
    pub v_solver: f64,
    pub v_physical: f64,
    pub congestion: f64,
    pub max_load: f64,
    pub v_star: Option<f64>,
    pub gap: Option<f64>,
    pub log_gap_slope: Option<f64>,
    pub max_energy_increase: f64,
    pub fixed_point_residual: f64,
    pub marginal_residual: f64,
    pub seconds: f64,
}

pub fn execute(prep: &Prepared, sfw: &SfwConfig, v_star: Option<f64>) -> Result<Finished> {
    let clock = Instant::now();
    let sc = &prep.scenario;
    let model = sc.solver_model();
    let physical = sc.physical_model();
    let mut congestion = Vec::new();
    let mut output = run_observed(&prep.p0, &sc.kernel, &model, sfw, &mut |view| {
        congestion.push(physical.value(view.plan));
    })
    .context("outer flow")?;
    congestion.push(physical.value(&output.plan));

    let trace = &mut output.trace;
    if let Some(v) = v_star {
        trace.set_reference(v);
    }
    trace.attach_physical(sc.config.epsilon, sc.kernel.log_partition());
    let last = trace.rows.last().expect("trace has a final row");
    let fixed_point = fixed_point_residual(&output.plan, &sc.kernel, &model, &sfw.inner).context("fixed-point residual")?;
    let loads = sc.congestion.loads(&output.plan);

    let summary = RunSummary {
        stop: output.stop,
        outer_steps: trace.rows.len() - 1,
        alpha: sfw.alpha,
        final_alpha: output.final_alpha,
        t_final: last.t,
        v_solver: last.v_solver,
        v_physical: last.v_physical.unwrap_or(f64::NAN),
        congestion: *congestion.last().unwrap_or(&0.0),
        max_load: loads.iter().copied().fold(0.0, f64::max),
        v_star,
        gap: last.gap,
        log_gap_slope: log_gap_slope(trace),
        max_energy_increase: trace.max_energy_increase(),
        fixed_point_residual: fixed_point,
        marginal_residual: output.plan.marginal_residual(),
        seconds: clock.elapsed().as_secs_f64(),
    };
    Ok(Finished { output, congestion, summary })
}
