//! Reference kernels `R` on the product grid, exponential tilting, and
//! entropies taken against a kernel.
//!
//! All arithmetic stays in the log domain. Pairs outside the support of `R`
//! (infinite cost, or zero marginal weight) carry log-weight `-inf`.

use std::sync::Arc;

use ndarray::{Array2, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measures::{Coupling, DiscreteMeasure};
use crate::par::{logsumexp, sum_rows};

/// A probability measure on `source × target`, stored as log-masses.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceKernel {
    source: Arc<DiscreteMeasure>,
    target: Arc<DiscreteMeasure>,
    log_weights: Array2<f64>,
    log_partition: f64,
}

/// An exponentially tilted kernel `R_φ ∝ e^{-φ} R` and its log-normalizer `log Z_φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltResult {
    pub kernel: ReferenceKernel,
    pub log_partition: f64,
}

impl ReferenceKernel {
    /// Normalizes unnormalized log-masses into a kernel. `-inf` marks pairs
    /// outside the support.
    pub fn from_log_weights(
        source: Arc<DiscreteMeasure>,
        target: Arc<DiscreteMeasure>,
        mut log_weights: Array2<f64>,
    ) -> Result<Self> {
        if log_weights.dim() != (source.len(), target.len()) {
            return Err(Error::Dimension(format!(
                "kernel matrix is {:?}, supports are {}x{}",
                log_weights.dim(),
                source.len(),
                target.len()
            )));
        }
        if log_weights.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::InvalidMeasure("kernel log-weights must be finite or -inf".into()));
        }
        let log_partition = matrix_logsumexp(&log_weights);
        if log_partition == f64::NEG_INFINITY {
            return Err(Error::Infeasible("kernel has empty support".into()));
        }
        log_weights.par_mapv_inplace(|v| v - log_partition);
        let kernel = Self { source, target, log_weights, log_partition };
        kernel.check_marginal_support()?;
        Ok(kernel)
    }

    /// Every source (target) point with positive weight must reach some pair in the support.
    fn check_marginal_support(&self) -> Result<()> {
        let lw = &self.log_weights;
        for (i, &w) in self.source.weights().iter().enumerate() {
            if w > 0.0 && lw.row(i).iter().all(|v| *v == f64::NEG_INFINITY) {
                return Err(Error::Infeasible(format!("source point {i} has no reachable target")));
            }
        }
        for (j, &w) in self.target.weights().iter().enumerate() {
            if w > 0.0 && lw.column(j).iter().all(|v| *v == f64::NEG_INFINITY) {
                return Err(Error::Infeasible(format!("target point {j} is unreachable from every source")));
            }
        }
        Ok(())
    }

    pub fn source(&self) -> &Arc<DiscreteMeasure> {
        &self.source
    }

    pub fn target(&self) -> &Arc<DiscreteMeasure> {
        &self.target
    }

    pub fn log_weights(&self) -> &Array2<f64> {
        &self.log_weights
    }

    /// Log of the normalizer applied to the unnormalized weights this kernel
    /// was built from (`log Z_c` for a Gibbs kernel).
    pub fn log_partition(&self) -> f64 {
        self.log_partition
    }

    pub fn dim(&self) -> (usize, usize) {
        self.log_weights.dim()
    }

    /// The kernel viewed as a coupling (its own marginals need not match `mu`, `nu`).
    pub fn to_coupling(&self) -> Coupling {
        Coupling::from_parts(self.source.clone(), self.target.clone(), self.log_weights.mapv(f64::exp))
    }

    /// `H(π‖R)`; `+inf` if `π` charges a pair outside the support.
    pub fn relative_entropy(&self, pi: &Coupling) -> Result<f64> {
        if pi.dim() != self.dim() {
            return Err(Error::Dimension(format!("coupling {:?} vs kernel {:?}", pi.dim(), self.dim())));
        }
        let (p, lw) = (pi.probs(), &self.log_weights);
        Ok(sum_rows(p.nrows(), |i| {
            p.row(i)
                .iter()
                .zip(lw.row(i))
                .map(|(&pij, &l)| if pij <= 0.0 { 0.0 } else { pij * (pij.ln() - l) })
                .sum()
        }))
    }
}

pub(crate) fn matrix_logsumexp(m: &Array2<f64>) -> f64 {
    let rows: Vec<f64> = (0..m.nrows())
        .into_par_iter()
        .map(|i| {
            let row = m.row(i);
            match row.as_slice() {
                Some(s) => logsumexp(s),
                None => logsumexp(&row.to_vec()),
            }
        })
        .collect();
    logsumexp(&rows)
}

/// Gibbs kernel `dR ∝ e^{-c/ε} d(μ⊗ν)`. Infinite costs become pairs outside the support.
pub fn gibbs_reference(
    cost: &Array2<f64>,
    epsilon: f64,
    mu: Arc<DiscreteMeasure>,
    nu: Arc<DiscreteMeasure>,
) -> Result<ReferenceKernel> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::Domain(format!("entropic parameter must be positive, got {epsilon}")));
    }
    if cost.dim() != (mu.len(), nu.len()) {
        return Err(Error::Dimension(format!(
            "cost matrix is {:?}, supports are {}x{}",
            cost.dim(),
            mu.len(),
            nu.len()
        )));
    }
    if let Some(c) = cost.iter().find(|c| c.is_nan() || **c < 0.0) {
        return Err(Error::Domain(format!("costs must lie in [0, +inf], found {c}")));
    }
    for (i, row) in cost.rows().into_iter().enumerate() {
        if row.iter().all(|c| c.is_infinite()) {
            return Err(Error::Infeasible(format!("every cost from source point {i} is infinite")));
        }
    }
    for (j, col) in cost.columns().into_iter().enumerate() {
        if col.iter().all(|c| c.is_infinite()) {
            return Err(Error::Infeasible(format!("every cost into target point {j} is infinite")));
        }
    }
    let log_mu = mu.weights().mapv(f64::ln);
    let log_nu = nu.weights().mapv(f64::ln);
    let mut log_w = Array2::zeros(cost.dim());
    Zip::from(log_w.rows_mut())
        .and(cost.rows())
        .and(&log_mu)
        .par_for_each(|mut out, c_row, &lm| {
            for ((o, &c), &ln) in out.iter_mut().zip(c_row).zip(&log_nu) {
                *o = if c.is_infinite() || lm == f64::NEG_INFINITY || ln == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    -c / epsilon + lm + ln
                };
            }
        });
    ReferenceKernel::from_log_weights(mu, nu, log_w)
}

/// Exponential tilt `R_φ = Z_φ^{-1} e^{-φ} R`, computed in the log domain.
pub fn tilt(kernel: &ReferenceKernel, phi: &Array2<f64>) -> Result<TiltResult> {
    if phi.dim() != kernel.dim() {
        return Err(Error::Dimension(format!("potential {:?} vs kernel {:?}", phi.dim(), kernel.dim())));
    }
    let mut log_w = kernel.log_weights.clone();
    let mut bad = None;
    Zip::from(&mut log_w).and(phi).for_each(|l, &p| {
        if *l > f64::NEG_INFINITY {
            if !p.is_finite() {
                bad = Some(p);
            }
            *l -= p;
        }
    });
    if let Some(p) = bad {
        return Err(Error::Domain(format!("tilting potential must be finite on the kernel support, found {p}")));
    }
    let log_z = matrix_logsumexp(&log_w);
    log_w.par_mapv_inplace(|v| v - log_z);
    let tilted = ReferenceKernel {
        source: kernel.source.clone(),
        target: kernel.target.clone(),
        log_weights: log_w,
        log_partition: kernel.log_partition + log_z,
    };
    Ok(TiltResult { kernel: tilted, log_partition: log_z })
}

/// `|⟨φ,π⟩ + H(π‖R) − H(π‖R_φ) + log Z_φ|`, i.e. the defect in
/// `⟨φ,π⟩ + H(π‖R) = H(π‖R_φ) − log Z_φ`. Returns `+inf` when `π` is not
/// absolutely continuous with respect to `R`.
pub fn tilting_identity_residual(pi: &Coupling, kernel: &ReferenceKernel, phi: &Array2<f64>) -> Result<f64> {
    tilting_residual_signed(pi, kernel, phi, 1.0)
}

/// `log_z_sign = -1.0` evaluates the identity with the opposite sign on
/// `log Z_φ`; the verification suite uses it as a negative control.
pub(crate) fn tilting_residual_signed(
    pi: &Coupling,
    kernel: &ReferenceKernel,
    phi: &Array2<f64>,
    log_z_sign: f64,
) -> Result<f64> {
    let TiltResult { kernel: tilted, log_partition } = tilt(kernel, phi)?;
    let h_ref = kernel.relative_entropy(pi)?;
    if h_ref.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let h_tilted = tilted.relative_entropy(pi)?;
    let p = pi.probs();
    let linear = sum_rows(p.nrows(), |i| {
        p.row(i)
            .iter()
            .zip(phi.row(i))
            .map(|(&pij, &f)| if pij > 0.0 { pij * f } else { 0.0 })
            .sum()
    });
    Ok((linear + h_ref - h_tilted + log_z_sign * log_partition).abs())
}
