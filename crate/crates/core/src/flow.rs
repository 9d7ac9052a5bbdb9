//! The outer Frank-Wolfe flow `P ← (1−α) P + α T(P)`, where `T` is the
//! entropic best response computed by [`crate::inner`], together with the
//! energies and diagnostics recorded along it.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functional::FunctionalModel;
use crate::inner::{solve_inner_from, InnerSettings, Potentials, WarmStart};
use crate::kernel::ReferenceKernel;
use crate::measures::{convex_combine, entropy_term, relative_entropy, total_variation, Coupling, DiscreteMeasure};
use crate::par::sum_rows;

/// An energy rise larger than this on one step triggers the step-size guard.
pub const DIVERGENCE_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SfwConfig {
    pub alpha: f64,
    pub max_outer: usize,
    /// Stop once an outer step moves the plan by at most this much in total variation.
    pub outer_tol: f64,
    pub inner: InnerSettings,
    /// Record `H(P̂‖P) + H(P‖P̂)` each step (two extra passes over the plan).
    pub record_entropies: bool,
}

impl Default for SfwConfig {
    fn default() -> Self {
        Self { alpha: 0.02, max_outer: 40, outer_tol: 1e-4, inner: InnerSettings::default(), record_entropies: true }
    }
}

impl SfwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if self.max_outer == 0 {
            return Err(Error::Config("max_outer must be positive".into()));
        }
        if !(self.outer_tol.is_finite() && self.outer_tol > 0.0) {
            return Err(Error::Config(format!("outer_tol must be positive, got {}", self.outer_tol)));
        }
        self.inner.validate()
    }

    /// Settings for the high-accuracy run that estimates the minimal energy.
    pub fn reference() -> Self {
        Self {
            alpha: 0.04,
            max_outer: 400,
            outer_tol: 1e-14,
            inner: InnerSettings { tol: 1e-8, max_iters: 1000, ..InnerSettings::default() },
            record_entropies: false,
        }
    }
}

/// One outer iterate `P_s` and the step taken from it. The last row of a
/// trace describes the final plan and has no step data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub outer_iter: usize,
    pub t: f64,
    pub v_solver: f64,
    pub v_physical: Option<f64>,
    pub gap: Option<f64>,
    pub sym_entropy: Option<f64>,
    pub step_tv: Option<f64>,
    pub inner_iters: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SfwTrace {
    pub rows: Vec<TraceRow>,
    pub v_ref: Option<f64>,
}

impl SfwTrace {
    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t).collect()
    }

    pub fn energies(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.v_solver).collect()
    }

    /// Fills the gap column against a reference energy.
    pub fn set_reference(&mut self, v_ref: f64) {
        self.v_ref = Some(v_ref);
        for r in &mut self.rows {
            r.gap = Some(r.v_solver - v_ref);
        }
    }

    pub fn gaps(&self) -> Option<Vec<f64>> {
        self.rows.iter().map(|r| r.gap).collect()
    }

    /// Fills the physical-energy column from `V_phys = ε (V − log Z_c)`.
    pub fn attach_physical(&mut self, epsilon: f64, log_partition: f64) {
        for r in &mut self.rows {
            r.v_physical = Some(epsilon * (r.v_solver - log_partition));
        }
    }

    /// Largest single-step increase of the energy (negative if strictly decreasing).
    pub fn max_energy_increase(&self) -> f64 {
        self.rows.windows(2).map(|w| w[1].v_solver - w[0].v_solver).fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    IterationCap,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub plan: Coupling,
    pub trace: SfwTrace,
    pub stop: StopReason,
    /// Step size in force at the end (smaller than configured if the guard fired).
    pub final_alpha: f64,
    pub potentials: Option<Potentials>,
}

/// `V(π) = H(π‖R) + F̃(π)` with `F̃` already in solver units.
pub fn energy(pi: &Coupling, kernel: &ReferenceKernel, model: &dyn FunctionalModel) -> Result<f64> {
    let h = kernel.relative_entropy(pi)?;
    if !h.is_finite() {
        return Ok(f64::INFINITY);
    }
    Ok(h + model.value(pi))
}

/// `Σ c π + F(π) + ε H(π‖μ⊗ν)` with `F` in physical units.
pub fn physical_energy(
    pi: &Coupling,
    cost: &Array2<f64>,
    epsilon: f64,
    model: &dyn FunctionalModel,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
) -> Result<f64> {
    if cost.dim() != pi.dim() || mu.len() != pi.dim().0 || nu.len() != pi.dim().1 {
        return Err(Error::Dimension(format!("coupling {:?} vs cost {:?}", pi.dim(), cost.dim())));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    let p = pi.probs();
    let (a, b) = (mu.weights(), nu.weights());
    let transport = sum_rows(p.nrows(), |i| {
        p.row(i).iter().zip(cost.row(i)).map(|(&pij, &c)| if pij > 0.0 { pij * c } else { 0.0 }).sum()
    });
    let entropy = sum_rows(p.nrows(), |i| {
        let row = p.row(i);
        (0..row.len()).map(|j| entropy_term(row[j], a[i] * b[j])).sum()
    });
    Ok(transport + model.value(pi) + epsilon * entropy)
}

/// `μ⊗ν` restricted to the kernel support, projected back onto `Π(μ, ν)` if
/// the restriction removed mass.
pub fn default_initial(kernel: &ReferenceKernel, mu: &Arc<DiscreteMeasure>, nu: &Arc<DiscreteMeasure>) -> Result<Coupling> {
    if !mu.same_support(kernel.source()) || !nu.same_support(kernel.target()) {
        return Err(Error::Dimension("marginals and kernel live on different supports".into()));
    }
    let lw = kernel.log_weights();
    let (a, b) = (mu.weights(), nu.weights());
    let mut log_prod = Array2::from_elem(kernel.dim(), f64::NEG_INFINITY);
    let mut missing = false;
    for ((i, j), v) in log_prod.indexed_iter_mut() {
        if a[i] > 0.0 && b[j] > 0.0 {
            if lw[[i, j]] > f64::NEG_INFINITY {
                *v = a[i].ln() + b[j].ln();
            } else {
                missing = true;
            }
        }
    }
    if !missing {
        return Ok(Coupling::product(mu.clone(), nu.clone()));
    }
    let restricted = ReferenceKernel::from_log_weights(mu.clone(), nu.clone(), log_prod)?;
    let exact = InnerSettings { tol: 1e-15, max_iters: 100_000, ..InnerSettings::default() };
    let res = solve_inner_from(&restricted, &Array2::zeros(kernel.dim()), mu, nu, &exact, WarmStart::default())?;
    if res.plan.marginal_residual() > 1e-10 {
        return Err(Error::Infeasible(format!(
            "kernel support too sparse for a feasible start (marginal error {:.3e})",
            res.plan.marginal_residual()
        )));
    }
    Ok(res.plan)
}

fn symmetric_entropy(p_hat: &Coupling, p: &Coupling) -> Result<f64> {
    Ok(relative_entropy(p_hat, p)? + relative_entropy(p, p_hat)?)
}

/// What an observer sees after each accepted outer step.
#[derive(Debug, Clone, Copy)]
pub struct StepView<'a> {
    pub step: usize,
    pub alpha: f64,
    pub plan: &'a Coupling,
    pub best_response: &'a Coupling,
    pub next: &'a Coupling,
}

/// Runs the flow from `p0`. `model` must already be in solver units.
pub fn run(p0: &Coupling, kernel: &ReferenceKernel, model: &dyn FunctionalModel, config: &SfwConfig) -> Result<RunOutput> {
    run_observed(p0, kernel, model, config, &mut |_| {})
}

/// [`run`], calling `observer` with the states of every accepted step.
pub fn run_observed(
    p0: &Coupling,
    kernel: &ReferenceKernel,
    model: &dyn FunctionalModel,
    config: &SfwConfig,
    observer: &mut dyn FnMut(StepView<'_>),
) -> Result<RunOutput> {
    config.validate()?;
    let (mu, nu) = (kernel.source().clone(), kernel.target().clone());
    if p0.dim() != kernel.dim() {
        return Err(Error::Dimension(format!("initial plan {:?} vs kernel {:?}", p0.dim(), kernel.dim())));
    }
    let mut p = Coupling::from_parts(mu.clone(), nu.clone(), p0.probs().clone());
    let mut v = energy(&p, kernel, model)?;
    if !v.is_finite() {
        return Err(Error::Diverged { step: 0, detail: "initial plan is not absolutely continuous w.r.t. the kernel".into() });
    }
    let mut alpha = config.alpha;
    let mut halved = false;
    let mut potentials: Option<Potentials> = None;
    let mut rows = Vec::with_capacity(config.max_outer + 1);
    let mut t = 0.0;
    let mut stop = StopReason::IterationCap;
    for s in 0..config.max_outer {
        let phi = model.linear_derivative(&p);
        if phi.iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite { step: s, detail: format!("derivative has NaN entries (V = {v})") });
        }
        let start = WarmStart { potentials: potentials.as_ref(), previous: Some(&p) };
        let best = solve_inner_from(kernel, &phi, &mu, &nu, &config.inner, start)?;
        let sym = if config.record_entropies { Some(symmetric_entropy(&best.plan, &p)?) } else { None };
        let (next, v_next) = loop {
            let next = convex_combine(&p, &best.plan, alpha)?;
            let v_next = energy(&next, kernel, model)?;
            if v_next.is_nan() || v_next == f64::NEG_INFINITY {
                return Err(Error::NonFinite {
                    step: s,
                    detail: format!("energy {v_next} after step with alpha {alpha}; previous V = {v}, inner iterations {}", best.iterations),
                });
            }
            if v_next <= v + DIVERGENCE_SLACK {
                break (next, v_next);
            }
            if halved {
                return Err(Error::Diverged {
                    step: s,
                    detail: format!("energy rose from {v} to {v_next} with alpha already halved to {alpha}"),
                });
            }
            halved = true;
            alpha *= 0.5;
        };
        let step_tv = total_variation(&next, &p)?;
        observer(StepView { step: s, alpha, plan: &p, best_response: &best.plan, next: &next });
        rows.push(TraceRow {
            outer_iter: s,
            t,
            v_solver: v,
            v_physical: None,
            gap: None,
            sym_entropy: sym,
            step_tv: Some(step_tv),
            inner_iters: Some(best.iterations),
        });
        t += alpha;
        p = next;
        v = v_next;
        potentials = Some(best.potentials);
        if step_tv <= config.outer_tol {
            stop = StopReason::Converged;
            break;
        }
    }
    rows.push(TraceRow {
        outer_iter: rows.len(),
        t,
        v_solver: v,
        v_physical: None,
        gap: None,
        sym_entropy: None,
        step_tv: None,
        inner_iters: None,
    });
    Ok(RunOutput { plan: p, trace: SfwTrace { rows, v_ref: None }, stop, final_alpha: alpha, potentials })
}

/// `|(V_{s+1} − V_s)/α + H(P̂_s‖P_s) + H(P_s‖P̂_s)|` for each recorded step.
/// Steps without a recorded entropy are skipped.
pub fn dissipation_residual(trace: &SfwTrace) -> Vec<(f64, f64)> {
    trace
        .rows
        .windows(2)
        .filter_map(|w| {
            let sym = w[0].sym_entropy?;
            let dt = w[1].t - w[0].t;
            (dt > 0.0).then(|| (w[0].t, ((w[1].v_solver - w[0].v_solver) / dt + sym).abs()))
        })
        .collect()
}

/// The same residual computed from stored `(P_s, P̂_s)` pairs.
pub fn dissipation_residual_from_states(
    states: &[(Coupling, Coupling)],
    kernel: &ReferenceKernel,
    model: &dyn FunctionalModel,
    alpha: f64,
) -> Result<Vec<f64>> {
    states
        .iter()
        .map(|(p, p_hat)| {
            let next = convex_combine(p, p_hat, alpha)?;
            let dv = energy(&next, kernel, model)? - energy(p, kernel, model)?;
            Ok((dv / alpha + symmetric_entropy(p_hat, p)?).abs())
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ReferenceEstimate {
    pub v_star: f64,
    /// Smallest energy actually reached.
    pub v_min: f64,
    /// Geometric extrapolation of the remaining decrease.
    pub tail: f64,
    pub output: RunOutput,
}

/// Estimates `min V` by a long, tightly solved run followed by a geometric
/// extrapolation of the last decrements.
pub fn reference_energy(
    p0: &Coupling,
    kernel: &ReferenceKernel,
    model: &dyn FunctionalModel,
    config: &SfwConfig,
) -> Result<ReferenceEstimate> {
    let output = run(p0, kernel, model, config)?;
    let v = output.trace.energies();
    let v_min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let tail = match v.len() {
        n if n >= 3 => {
            let d_last = v[n - 2] - v[n - 1];
            let d_prev = v[n - 3] - v[n - 2];
            let rho = if d_prev > 0.0 { d_last / d_prev } else { 0.0 };
            if d_last > 0.0 && rho > 0.0 && rho < 1.0 {
                d_last * rho / (1.0 - rho)
            } else {
                0.0
            }
        }
        _ => 0.0,
    };
    Ok(ReferenceEstimate { v_star: v_min - tail, v_min, tail, output })
}

/// Least-squares slope of `log gap` against `t` over rows with a positive gap.
pub fn log_gap_slope(trace: &SfwTrace) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        trace.rows.iter().filter_map(|r| r.gap.filter(|g| *g > 0.0).map(|g| (r.t, g.ln()))).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// `ℓ(t) = log(gap(t)/gap(0))` sampled at the recorded times.
pub fn normalized_log_gap(trace: &SfwTrace) -> Option<Vec<(f64, f64)>> {
    let gaps = trace.gaps()?;
    let g0 = *gaps.first()?;
    if !(g0 > 0.0) {
        return None;
    }
    Some(trace.rows.iter().zip(&gaps).filter(|(_, g)| **g > 0.0).map(|(r, g)| (r.t, (g / g0).ln())).collect())
}

fn interpolate(curve: &[(f64, f64)], t: f64) -> Option<f64> {
    let k = curve.partition_point(|p| p.0 < t);
    if k < curve.len() && curve[k].0 == t {
        return Some(curve[k].1);
    }
    if k == 0 || k == curve.len() {
        return None;
    }
    let (a, b) = (curve[k - 1], curve[k]);
    Some(a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0))
}

/// Largest relative deviation `|ℓ_a − ℓ_b| / max(|ℓ_a|, |ℓ_b|)` between two
/// normalized log-gap curves, taken at the recorded times of `coarse` from its
/// `warmup`-th step on. Times outside `fine`'s range are skipped.
pub fn collapse_deviation(coarse: &[(f64, f64)], fine: &[(f64, f64)], warmup: usize) -> Option<f64> {
    let mut worst: Option<f64> = None;
    for &(t, la) in coarse.iter().skip(warmup) {
        let Some(lb) = interpolate(fine, t) else { continue };
        let scale = la.abs().max(lb.abs());
        let dev = if scale > 0.0 { (la - lb).abs() / scale } else { 0.0 };
        worst = Some(worst.map_or(dev, |w: f64| w.max(dev)));
    }
    worst
}
