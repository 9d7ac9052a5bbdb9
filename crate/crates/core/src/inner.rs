//! Entropic best response: `argmin_π ⟨φ, π⟩ + H(π‖R)` over `Π(μ, ν)`, solved by
//! log-domain Sinkhorn scaling on the tilted kernel `e^{-φ} R`.
//!
//! Iterates have the Gibbs form `P ∝ exp(log R − φ − f ⊕ g)`. A row update
//! sets `f ← f + log(rowsum / μ)`, which rescales every row onto `μ` exactly;
//! the column update is symmetric. The global `∝` normalization is absorbed
//! into the potentials and split off as the constant `c_P` at the end.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayViewMut1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::ReferenceKernel;
use crate::measures::{outer, Coupling, DiscreteMeasure};
use crate::par::logsumexp;

/// Rows per work unit in reductions; fixed so results do not depend on the thread count.
const ROW_CHUNK: usize = 32;

/// Update order for the two potentials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Re-form the plan between the `f` and `g` updates (standard Sinkhorn).
    #[default]
    GaussSeidel,
    /// Update `f` and `g` from the same plan.
    Jacobi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerSettings {
    /// Stop once consecutive iterates are this close in total variation and
    /// the marginals of the current one are matched to the same accuracy.
    pub tol: f64,
    pub max_iters: usize,
    pub schedule: Schedule,
}

impl Default for InnerSettings {
    fn default() -> Self {
        Self { tol: 1e-4, max_iters: 30, schedule: Schedule::GaussSeidel }
    }
}

impl InnerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::Config(format!("inner tolerance must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("inner iteration cap must be positive".into()));
        }
        Ok(())
    }
}

/// Dual potentials, gauge-fixed so that `Σ μ_i f_i = 0` and `Σ ν_j g_j = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Potentials {
    pub f: Array1<f64>,
    pub g: Array1<f64>,
}

impl Potentials {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { f: Array1::zeros(rows), g: Array1::zeros(cols) }
    }
}

#[derive(Debug, Clone)]
pub struct InnerResult {
    pub plan: Coupling,
    pub potentials: Potentials,
    pub iterations: usize,
    /// Total variation between the last two iterates.
    pub final_step_tv: f64,
    /// Half-L1 marginal error of the returned plan.
    pub marginal_error: f64,
    /// The constant `c_P` in `φ + f ⊕ g + log(P/R) = c_P`.
    pub log_constant: f64,
    pub converged: bool,
}

/// Where an inner solve starts from.
#[derive(Debug, Clone, Copy, Default)]
pub struct WarmStart<'a> {
    pub potentials: Option<&'a Potentials>,
    /// The iterate the first step is compared against (defaults to `μ ⊗ ν`).
    pub previous: Option<&'a Coupling>,
}

/// Cold-start solve.
pub fn solve_inner(
    kernel: &ReferenceKernel,
    phi: &Array2<f64>,
    mu: &Arc<DiscreteMeasure>,
    nu: &Arc<DiscreteMeasure>,
    settings: &InnerSettings,
) -> Result<InnerResult> {
    solve_inner_from(kernel, phi, mu, nu, settings, WarmStart::default())
}

pub fn solve_inner_from(
    kernel: &ReferenceKernel,
    phi: &Array2<f64>,
    mu: &Arc<DiscreteMeasure>,
    nu: &Arc<DiscreteMeasure>,
    settings: &InnerSettings,
    start: WarmStart<'_>,
) -> Result<InnerResult> {
    settings.validate()?;
    let mut solver = Sinkhorn::new(kernel, phi, mu, nu)?;
    if let Some(p) = start.potentials {
        if p.f.len() != mu.len() || p.g.len() != nu.len() {
            return Err(Error::Dimension("warm-start potentials do not match the supports".into()));
        }
        solver.f.assign(&p.f);
        solver.g.assign(&p.g);
    }
    let mut prev = match start.previous {
        Some(p) if p.dim() == kernel.dim() => p.probs().clone(),
        Some(p) => return Err(Error::Dimension(format!("previous iterate {:?} vs kernel {:?}", p.dim(), kernel.dim()))),
        None => outer(mu.weights(), nu.weights()),
    };
    let mut next = Array2::zeros(kernel.dim());
    let mut iterations = 0;
    let mut step_tv = f64::INFINITY;
    let mut marginal_error = f64::INFINITY;
    let mut converged = false;
    while iterations < settings.max_iters {
        let step = match settings.schedule {
            Schedule::GaussSeidel => solver.gauss_seidel_step(&mut next, &prev)?,
            Schedule::Jacobi => solver.jacobi_step(&mut next, &prev)?,
        };
        (step_tv, marginal_error) = (step.tv, step.marginal_error);
        if iterations == 0 {
            // `next` now takes over `prev`'s storage, which may carry mass off the active block.
            std::mem::swap(&mut prev, &mut next);
            next.fill(0.0);
        } else {
            std::mem::swap(&mut prev, &mut next);
        }
        iterations += 1;
        if step_tv <= settings.tol && marginal_error <= settings.tol {
            converged = true;
            break;
        }
    }
    let plan = Coupling::from_parts(mu.clone(), nu.clone(), prev);
    let (potentials, shift) = solver.gauge_fixed();
    let log_constant = weighted_median_constant(&plan, kernel, phi, &potentials).unwrap_or(-shift);
    Ok(InnerResult { plan, potentials, iterations, final_step_tv: step_tv, marginal_error, log_constant, converged })
}

struct Step {
    tv: f64,
    marginal_error: f64,
}

struct Sinkhorn<'a> {
    /// `log R − φ` on the active block, `-inf` elsewhere.
    log_base: Array2<f64>,
    mu: &'a Array1<f64>,
    nu: &'a Array1<f64>,
    active_rows: Vec<usize>,
    active_cols: Vec<usize>,
    f: Array1<f64>,
    g: Array1<f64>,
}

impl<'a> Sinkhorn<'a> {
    fn new(
        kernel: &ReferenceKernel,
        phi: &Array2<f64>,
        mu: &'a Arc<DiscreteMeasure>,
        nu: &'a Arc<DiscreteMeasure>,
    ) -> Result<Self> {
        if phi.dim() != kernel.dim() {
            return Err(Error::Dimension(format!("potential {:?} vs kernel {:?}", phi.dim(), kernel.dim())));
        }
        if !mu.same_support(kernel.source()) || !nu.same_support(kernel.target()) {
            return Err(Error::Dimension("marginals and kernel live on different supports".into()));
        }
        let (mu, nu) = (mu.weights(), nu.weights());
        let active_rows: Vec<usize> = (0..mu.len()).filter(|&i| mu[i] > 0.0).collect();
        let active_cols: Vec<usize> = (0..nu.len()).filter(|&j| nu[j] > 0.0).collect();
        let mut log_base = Array2::from_elem(kernel.dim(), f64::NEG_INFINITY);
        let lw = kernel.log_weights();
        let bad = log_base
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .filter(|(i, _)| mu[*i] > 0.0)
            .map(|(i, mut row)| {
                let mut bad = false;
                for &j in &active_cols {
                    let l = lw[[i, j]];
                    if l > f64::NEG_INFINITY {
                        let p = phi[[i, j]];
                        bad |= !p.is_finite();
                        row[j] = l - p;
                    }
                }
                bad
            })
            .reduce(|| false, |a, b| a || b);
        if bad {
            return Err(Error::Domain("tilting potential must be finite on the kernel support".into()));
        }
        Ok(Self {
            log_base,
            mu,
            nu,
            active_rows,
            active_cols,
            f: Array1::zeros(kernel.dim().0),
            g: Array1::zeros(kernel.dim().1),
        })
    }

    /// `LSE_j(log_base_ij − g_j)` for every active row.
    fn row_log_sums(&self) -> Vec<f64> {
        let cols = &self.active_cols;
        self.active_rows
            .par_iter()
            .map(|&i| {
                let row = self.log_base.row(i);
                let mut m = f64::NEG_INFINITY;
                for &j in cols {
                    let l = row[j];
                    if l > f64::NEG_INFINITY {
                        m = m.max(l - self.g[j]);
                    }
                }
                if m == f64::NEG_INFINITY {
                    return m;
                }
                let mut s = 0.0;
                for &j in cols {
                    let l = row[j];
                    if l > f64::NEG_INFINITY {
                        s += (l - self.g[j] - m).exp();
                    }
                }
                m + s.ln()
            })
            .collect()
    }

    /// `LSE_i(log_base_ij − f_i)` for one column, used when linear sums underflow.
    fn column_log_sum(&self, j: usize) -> f64 {
        let vals: Vec<f64> = self.active_rows.iter().map(|&i| self.log_base[[i, j]] - self.f[i]).collect();
        logsumexp(&vals)
    }

    /// Writes `exp(log_base − f ⊕ g − shift)` into `out` on the active block.
    /// Returns the column sums (over active columns) and `Σ |out − prev|`.
    fn materialize(&self, out: &mut Array2<f64>, prev: &Array2<f64>, shift: f64) -> (Vec<f64>, f64) {
        let cols = &self.active_cols;
        let ncols = cols.len();
        let partials: Vec<(Vec<f64>, f64, f64)> = {
            let rows = &self.active_rows;
            let out_ptr = SyncPtr(out.as_mut_ptr());
            let stride = out.strides()[0] as usize;
            debug_assert_eq!(out.strides()[1], 1);
            rows.par_chunks(ROW_CHUNK)
                .map(|chunk| {
                    let mut colsum = vec![0.0; ncols];
                    let mut diff = 0.0;
                    let mut prev_mass = 0.0;
                    for &i in chunk {
                        // SAFETY: active rows are distinct, so each row slice is written by one task only.
                        let mut row = unsafe { row_view(out_ptr, i, stride, out.ncols()) };
                        let base = self.log_base.row(i);
                        let fi = self.f[i];
                        let prow = prev.row(i);
                        for (k, &j) in cols.iter().enumerate() {
                            let l = base[j];
                            let v = if l > f64::NEG_INFINITY { (l - fi - self.g[j] - shift).exp() } else { 0.0 };
                            row[j] = v;
                            colsum[k] += v;
                            diff += (v - prow[j]).abs();
                            prev_mass += prow[j];
                        }
                    }
                    (colsum, diff, prev_mass)
                })
                .collect()
        };
        let mut colsum = vec![0.0; ncols];
        let mut diff = 0.0;
        let mut prev_active = 0.0;
        for (c, d, p) in partials {
            for (a, b) in colsum.iter_mut().zip(c) {
                *a += b;
            }
            diff += d;
            prev_active += p;
        }
        let prev_total: f64 = prev.sum();
        // Mass of `prev` off the active block counts fully towards the distance.
        let off_block = (prev_total - prev_active).max(0.0);
        (colsum, diff + off_block)
    }

    fn update_f(&mut self) -> Result<()> {
        let sums = self.row_log_sums();
        for (&i, &s) in self.active_rows.iter().zip(&sums) {
            if s == f64::NEG_INFINITY {
                return Err(Error::Infeasible(format!("source point {i} has positive mass but no reachable target")));
            }
            self.f[i] = s - self.mu[i].ln();
        }
        Ok(())
    }

    fn update_g_from_sums(&mut self, colsum: &[f64], shift: f64) -> Result<()> {
        for (k, &j) in self.active_cols.clone().iter().enumerate() {
            let log_c = if colsum[k] > 1e-280 { colsum[k].ln() + shift } else { self.column_log_sum(j) - self.g[j] };
            if log_c == f64::NEG_INFINITY {
                return Err(Error::Infeasible(format!("target point {j} has positive mass but no reachable source")));
            }
            self.g[j] += log_c - self.nu[j].ln();
        }
        Ok(())
    }

    /// Row update, re-form, column update. The returned iterate is the matrix
    /// formed between the two updates, so its rows match `μ` exactly.
    fn gauss_seidel_step(&mut self, out: &mut Array2<f64>, prev: &Array2<f64>) -> Result<Step> {
        self.update_f()?;
        let (colsum, diff) = self.materialize(out, prev, 0.0);
        let marginal_error = self.column_error(&colsum);
        self.update_g_from_sums(&colsum, 0.0)?;
        Ok(Step { tv: 0.5 * diff, marginal_error })
    }

    /// Half-L1 distance between the active column sums and `ν`.
    fn column_error(&self, colsum: &[f64]) -> f64 {
        0.5 * self.active_cols.iter().zip(colsum).map(|(&j, c)| (c - self.nu[j]).abs()).sum::<f64>()
    }

    /// Both updates from the same normalized matrix.
    fn jacobi_step(&mut self, out: &mut Array2<f64>, prev: &Array2<f64>) -> Result<Step> {
        let row_lse: Vec<f64> =
            self.row_log_sums().iter().zip(&self.active_rows).map(|(s, &i)| s - self.f[i]).collect();
        let lse = logsumexp(&row_lse);
        if lse == f64::NEG_INFINITY {
            return Err(Error::Infeasible("tilted kernel has no mass on the marginal supports".into()));
        }
        let (colsum, diff) = self.materialize(out, prev, lse);
        let row_error: f64 =
            0.5 * self.active_rows.iter().zip(&row_lse).map(|(&i, s)| ((s - lse).exp() - self.mu[i]).abs()).sum::<f64>();
        let marginal_error = row_error.max(self.column_error(&colsum));
        for (&i, &s) in self.active_rows.iter().zip(&row_lse) {
            if s == f64::NEG_INFINITY {
                return Err(Error::Infeasible(format!("source point {i} has positive mass but no reachable target")));
            }
            self.f[i] += s - lse - self.mu[i].ln();
        }
        self.update_g_from_sums(&colsum, lse)?;
        Ok(Step { tv: 0.5 * diff, marginal_error })
    }

    /// Potentials with `Σμf = Σνg = 0`, and the total constant removed.
    fn gauge_fixed(&self) -> (Potentials, f64) {
        let a: f64 = self.active_rows.iter().map(|&i| self.mu[i] * self.f[i]).sum();
        let b: f64 = self.active_cols.iter().map(|&j| self.nu[j] * self.g[j]).sum();
        let mut f = self.f.clone();
        let mut g = self.g.clone();
        for &i in &self.active_rows {
            f[i] -= a;
        }
        for &j in &self.active_cols {
            g[j] -= b;
        }
        (Potentials { f, g }, a + b)
    }
}

#[derive(Clone, Copy)]
struct SyncPtr(*mut f64);
unsafe impl Send for SyncPtr {}
unsafe impl Sync for SyncPtr {}

unsafe fn row_view<'b>(ptr: SyncPtr, i: usize, stride: usize, len: usize) -> ArrayViewMut1<'b, f64> {
    let slice = std::slice::from_raw_parts_mut(ptr.0.add(i * stride), len);
    ArrayViewMut1::from(slice)
}

/// `h_ij = φ_ij + log P_ij − log R_ij + f_i + g_j` on the support of the plan.
fn optimality_terms(plan: &Coupling, kernel: &ReferenceKernel, phi: &Array2<f64>, pot: &Potentials) -> Vec<(f64, f64)> {
    let p = plan.probs();
    let lw = kernel.log_weights();
    (0..p.nrows())
        .into_par_iter()
        .flat_map_iter(|i| {
            (0..p.ncols()).filter_map(move |j| {
                let pij = p[[i, j]];
                let l = lw[[i, j]];
                (pij > 0.0 && l > f64::NEG_INFINITY).then(|| (phi[[i, j]] + pij.ln() - l + pot.f[i] + pot.g[j], pij))
            })
        })
        .collect()
}

fn weighted_median_constant(plan: &Coupling, kernel: &ReferenceKernel, phi: &Array2<f64>, pot: &Potentials) -> Option<f64> {
    let mut terms = optimality_terms(plan, kernel, phi, pot);
    if terms.is_empty() {
        return None;
    }
    terms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = terms.iter().map(|t| t.1).sum();
    let mut acc = 0.0;
    for (h, w) in &terms {
        acc += w;
        if acc >= 0.5 * total {
            return Some(*h);
        }
    }
    terms.last().map(|t| t.0)
}

/// `max |h_ij − median(h)|` over the support of the plan, where
/// `h = φ + log(P/R) + f ⊕ g`. Zero exactly at a solution of the optimality system.
pub fn first_order_residual(result: &InnerResult, kernel: &ReferenceKernel, phi: &Array2<f64>) -> f64 {
    let mut h: Vec<f64> = optimality_terms(&result.plan, kernel, phi, &result.potentials)
        .into_iter()
        .map(|t| t.0)
        .collect();
    if h.is_empty() {
        return 0.0;
    }
    let mid = h.len() / 2;
    let (_, median, _) = h.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let median = *median;
    h.iter().map(|v| (v - median).abs()).fold(0.0, f64::max)
}
