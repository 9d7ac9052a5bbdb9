//! Independent reference computations for tiny instances: an exact 2×2 inner
//! solve, exact W₁ by min-cost flow, and the transport-entropy comparison.

use std::sync::Arc;

use ndarray::{array, Array2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::functional::FunctionalModel;
use crate::inner::{solve_inner_from, InnerSettings, WarmStart};
use crate::kernel::{matrix_logsumexp, ReferenceKernel};
use crate::measures::{relative_entropy, total_variation, Coupling, DiscreteMeasure};

/// Default cap on the combined support size for the exact W₁ solver.
pub const W1_MAX_SIZE: usize = 8;

/// A 2×2 inner problem. Couplings are parameterized by `θ = π₁₁`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoByTwoInstance {
    pub mu1: f64,
    pub nu1: f64,
    /// Unnormalized log-weights of the reference kernel.
    pub log_kernel: Array2<f64>,
    pub phi: Array2<f64>,
}

impl TwoByTwoInstance {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mu1", self.mu1), ("nu1", self.nu1)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Domain(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.log_kernel.dim() != (2, 2) || self.phi.dim() != (2, 2) {
            return Err(Error::Dimension("2x2 instance needs 2x2 matrices".into()));
        }
        if self.log_kernel.iter().chain(&self.phi).any(|v| !v.is_finite()) {
            return Err(Error::Domain("2x2 instance entries must be finite".into()));
        }
        Ok(())
    }

    pub fn theta_range(&self) -> (f64, f64) {
        ((self.mu1 + self.nu1 - 1.0).max(0.0), self.mu1.min(self.nu1))
    }

    pub fn mu(&self) -> Arc<DiscreteMeasure> {
        Arc::new(DiscreteMeasure::on_unit_segment(&[self.mu1, 1.0 - self.mu1]).expect("weights in (0,1)"))
    }

    pub fn nu(&self) -> Arc<DiscreteMeasure> {
        Arc::new(DiscreteMeasure::on_unit_segment(&[self.nu1, 1.0 - self.nu1]).expect("weights in (0,1)"))
    }

    pub fn kernel(&self) -> Result<ReferenceKernel> {
        ReferenceKernel::from_log_weights(self.mu(), self.nu(), self.log_kernel.clone())
    }

    fn plan(&self, theta: f64) -> Array2<f64> {
        let (m, n) = (self.mu1, self.nu1);
        array![[theta, m - theta], [n - theta, 1.0 - m - n + theta]]
    }
}

/// Minimizes `θ ↦ ⟨φ, π(θ)⟩ + H(π(θ)‖R)` on the feasible segment by bisection
/// on the (increasing) derivative.
pub fn inner_oracle_2x2(inst: &TwoByTwoInstance) -> Result<Coupling> {
    inst.validate()?;
    let (mut lo, mut hi) = inst.theta_range();
    let lw = inst.log_kernel.mapv(|v| v - matrix_logsumexp(&inst.log_kernel));
    let phi = &inst.phi;
    let slope = phi[[0, 0]] - phi[[0, 1]] - phi[[1, 0]] + phi[[1, 1]] - (lw[[0, 0]] - lw[[0, 1]] - lw[[1, 0]] + lw[[1, 1]]);
    let derivative = |theta: f64| {
        let p = inst.plan(theta);
        slope + p[[0, 0]].ln() - p[[0, 1]].ln() - p[[1, 0]].ln() + p[[1, 1]].ln()
    };
    while hi - lo > 1e-14 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if derivative(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let plan = inst.plan(0.5 * (lo + hi)).mapv(|v| v.max(0.0));
    Coupling::new(inst.mu(), inst.nu(), plan)
}

/// Exact `min Σ c_ij x_ij` over transport plans between `a` and `b`
/// (successive shortest paths on the residual network).
pub fn transport_lp(a: &[f64], b: &[f64], cost: &Array2<f64>) -> Result<f64> {
    let (n, m) = (a.len(), b.len());
    if cost.dim() != (n, m) {
        return Err(Error::Dimension(format!("cost {:?} for {n}x{m} problem", cost.dim())));
    }
    const EPS: f64 = 1e-15;
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut flow = Array2::<f64>::zeros((n, m));
    let total = supply.iter().sum::<f64>().min(demand.iter().sum());
    let mut shipped = 0.0;
    // Nodes: rows 0..n, columns n..n+m. Forward arcs i→j always open; back arcs j→i need flow.
    for _ in 0..10_000 {
        if total - shipped <= EPS {
            break;
        }
        let mut dist = vec![f64::INFINITY; n + m];
        let mut pred = vec![usize::MAX; n + m];
        for i in 0..n {
            if supply[i] > EPS {
                dist[i] = 0.0;
            }
        }
        for _ in 0..n + m {
            let mut changed = false;
            for i in 0..n {
                if dist[i] == f64::INFINITY {
                    continue;
                }
                for j in 0..m {
                    let d = dist[i] + cost[[i, j]];
                    if d < dist[n + j] - 1e-15 {
                        dist[n + j] = d;
                        pred[n + j] = i;
                        changed = true;
                    }
                }
            }
            for j in 0..m {
                if dist[n + j] == f64::INFINITY {
                    continue;
                }
                for i in 0..n {
                    if flow[[i, j]] > EPS {
                        let d = dist[n + j] - cost[[i, j]];
                        if d < dist[i] - 1e-15 {
                            dist[i] = d;
                            pred[i] = n + j;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let Some(end) = (0..m).filter(|&j| demand[j] > EPS && dist[n + j] < f64::INFINITY).min_by(|&x, &y| dist[n + x].total_cmp(&dist[n + y]))
        else {
            break;
        };
        // Walk back to the path's source row, collecting the bottleneck.
        let mut path = vec![n + end];
        let mut node = n + end;
        let mut amount = demand[end];
        while pred[node] != usize::MAX {
            let prev = pred[node];
            if node < n {
                amount = amount.min(flow[[node, prev - n]]);
            }
            path.push(prev);
            node = prev;
            if path.len() > 2 * (n + m) {
                return Err(Error::Domain("negative cycle in transport residual network".into()));
            }
        }
        amount = amount.min(supply[node]);
        if amount <= EPS {
            break;
        }
        supply[node] -= amount;
        demand[end] -= amount;
        for w in path.windows(2) {
            let (to, from) = (w[0], w[1]);
            if from < n {
                flow[[from, to - n]] += amount;
            } else {
                flow[[to, from - n]] -= amount;
            }
        }
        shipped += amount;
    }
    Ok((&flow * cost).sum())
}

/// Exact W₁ between two small measures under the sup-norm metric on `(time, x, y)`.
pub fn wasserstein1_exact_small(p: &DiscreteMeasure, q: &DiscreteMeasure, max_size: usize) -> Result<f64> {
    let size = p.len() + q.len();
    if size > max_size {
        return Err(Error::OracleRefused { size, limit: max_size });
    }
    let cost = Array2::from_shape_fn((p.len(), q.len()), |(i, j)| p.points()[i].sup_distance(&q.points()[j]));
    transport_lp(p.weights().as_slice().expect("contiguous"), q.weights().as_slice().expect("contiguous"), &cost)
}

/// Exact W₁ between two couplings on the same product grid, with
/// `d((x,y),(x',y')) = max(d(x,x'), d(y,y'))`.
pub fn coupling_wasserstein1(p: &Coupling, q: &Coupling, max_size: usize) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::Dimension(format!("couplings {:?} and {:?}", p.dim(), q.dim())));
    }
    let (n, m) = p.dim();
    let size = 2 * n * m;
    if size > max_size {
        return Err(Error::OracleRefused { size, limit: max_size });
    }
    let (xs, ys) = (p.source().points(), p.target().points());
    let cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
    let cost = Array2::from_shape_fn((cells.len(), cells.len()), |(a, b)| {
        let ((i, j), (k, l)) = (cells[a], cells[b]);
        xs[i].sup_distance(&xs[k]).max(ys[j].sup_distance(&ys[l]))
    });
    let wa: Vec<f64> = cells.iter().map(|&(i, j)| p.probs()[[i, j]]).collect();
    let wb: Vec<f64> = cells.iter().map(|&(i, j)| q.probs()[[i, j]]).collect();
    transport_lp(&wa, &wb, &cost)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransportEntropy {
    /// `W₁(p, q)`.
    pub lhs: f64,
    /// `sqrt(H(p‖q) / 2)`.
    pub rhs: f64,
    pub ok: bool,
}

/// Compares `W₁(p, q)` with `sqrt(H(p‖q)/2)`; valid when the ground metric has diameter at most 1.
pub fn transport_entropy_check(p: &Coupling, q: &Coupling) -> Result<TransportEntropy> {
    let lhs = coupling_wasserstein1(p, q, W1_MAX_SIZE)?;
    let h = relative_entropy(p, q)?;
    let rhs = (0.5 * h).sqrt();
    // The absolute floor only absorbs roundoff when both sides vanish.
    let ok = lhs <= rhs * (1.0 + 1e-9) + 1e-15;
    Ok(TransportEntropy { lhs, rhs, ok })
}

/// `TV(T(P), P)`: how far one full best response moves the plan.
pub fn fixed_point_residual(
    plan: &Coupling,
    kernel: &ReferenceKernel,
    model: &dyn FunctionalModel,
    settings: &InnerSettings,
) -> Result<f64> {
    let phi = model.linear_derivative(plan);
    let start = WarmStart { potentials: None, previous: Some(plan) };
    let best = solve_inner_from(kernel, &phi, kernel.source(), kernel.target(), settings, start)?;
    total_variation(&best.plan, plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional::zero_functional;
    use crate::inner::{solve_inner, Schedule};
    use crate::measures::GridPoint;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_instance(phi: Array2<f64>) -> TwoByTwoInstance {
        TwoByTwoInstance { mu1: 0.5, nu1: 0.5, log_kernel: Array2::zeros((2, 2)), phi }
    }

    fn point_measure(points: &[(f64, f64)], weights: &[f64]) -> DiscreteMeasure {
        let pts = points.iter().map(|&(x, y)| GridPoint::new(0.0, [x, y]).unwrap()).collect();
        DiscreteMeasure::new(pts, ndarray::Array1::from(weights.to_vec())).unwrap()
    }

    #[test]
    fn oracle_trivial_and_symmetric_cases() {
        let flat = inner_oracle_2x2(&uniform_instance(Array2::zeros((2, 2)))).unwrap();
        assert_abs_diff_eq!(flat.probs()[[0, 0]], 0.25, epsilon = 1e-14);
        let sym = inner_oracle_2x2(&uniform_instance(array![[0.0, 1.0], [1.0, 0.0]])).unwrap();
        assert_abs_diff_eq!(sym.probs()[[0, 0]], 0.365_529_289_315_002_45, epsilon = 1e-13);
        let pushed = inner_oracle_2x2(&uniform_instance(array![[10.0, 0.0], [0.0, 10.0]])).unwrap();
        assert!(pushed.probs()[[0, 0]] < 0.05);
    }

    #[test]
    fn oracle_agrees_with_sinkhorn() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for k in 0..100 {
            let inst = TwoByTwoInstance {
                mu1: rng.random_range(0.2..0.8),
                nu1: rng.random_range(0.2..0.8),
                log_kernel: Array2::from_shape_fn((2, 2), |_| rng.random_range(-2.0..2.0)),
                phi: Array2::from_shape_fn((2, 2), |_| rng.random_range(-2.0..2.0)),
            };
            let exact = inner_oracle_2x2(&inst).unwrap();
            let schedule = if k % 2 == 0 { Schedule::GaussSeidel } else { Schedule::Jacobi };
            let s = InnerSettings { tol: 1e-13, max_iters: 100_000, schedule };
            let got = solve_inner(&inst.kernel().unwrap(), &inst.phi, &inst.mu(), &inst.nu(), &s).unwrap();
            assert!(total_variation(&exact, &got.plan).unwrap() < 1e-8);
        }
    }

    #[test]
    fn w1_small_cases() {
        let a = point_measure(&[(0.0, 0.0), (1.0, 0.0)], &[0.5, 0.5]);
        let b = point_measure(&[(0.5, 0.0)], &[1.0]);
        assert_abs_diff_eq!(wasserstein1_exact_small(&a, &b, 8).unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(wasserstein1_exact_small(&a, &a, 8).unwrap(), 0.0, epsilon = 1e-15);
        let c = point_measure(&[(0.3, 0.1)], &[1.0]);
        let d = point_measure(&[(0.3, 0.8)], &[1.0]);
        assert_abs_diff_eq!(wasserstein1_exact_small(&c, &d, 8).unwrap(), 0.7, epsilon = 1e-15);
        let big = point_measure(&[(0.0, 0.0), (0.1, 0.0), (0.2, 0.0), (0.3, 0.0), (0.4, 0.0)], &[0.2; 5]);
        assert!(matches!(wasserstein1_exact_small(&big, &big, 8), Err(Error::OracleRefused { size: 10, limit: 8 })));
    }

    #[test]
    fn transport_lp_needs_rerouting() {
        // Greedy assignment is suboptimal here; the exact answer uses a back arc.
        let cost = array![[1.0, 2.0], [1.0, 10.0]];
        let v = transport_lp(&[0.5, 0.5], &[0.5, 0.5], &cost).unwrap();
        assert_abs_diff_eq!(v, 0.5 * 2.0 + 0.5 * 1.0, epsilon = 1e-15);
    }

    fn arb_measure(len: usize) -> impl Strategy<Value = DiscreteMeasure> {
        (proptest::collection::vec((0.0..1.0f64, 0.0..1.0f64), len), proptest::collection::vec(0.05..1.0f64, len))
            .prop_map(|(pts, w)| {
                let s: f64 = w.iter().sum();
                point_measure(&pts, &w.iter().map(|v| v / s).collect::<Vec<_>>())
            })
    }

    proptest! {
        #[test]
        fn w1_is_a_metric(a in arb_measure(2), b in arb_measure(3), c in arb_measure(3)) {
            let ab = wasserstein1_exact_small(&a, &b, 8).unwrap();
            let ba = wasserstein1_exact_small(&b, &a, 8).unwrap();
            let bc = wasserstein1_exact_small(&b, &c, 8).unwrap();
            let ac = wasserstein1_exact_small(&a, &c, 8).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert!(ab >= 0.0);
        }

        #[test]
        fn transport_entropy_never_violated(
            p in proptest::collection::vec(0.01..1.0f64, 4),
            q in proptest::collection::vec(0.01..1.0f64, 4),
        ) {
            let mk = |v: &[f64]| {
                let s: f64 = v.iter().sum();
                Coupling::from_matrix(Array2::from_shape_vec((2, 2), v.iter().map(|x| x / s).collect()).unwrap()).unwrap()
            };
            let (a, b) = (mk(&p), mk(&q));
            let b = Coupling::from_parts(a.source().clone(), a.target().clone(), b.into_probs());
            let r = transport_entropy_check(&a, &b).unwrap();
            prop_assert!(r.ok, "{:?}", r);
        }
    }

    #[test]
    fn transport_entropy_edge_cases() {
        let p = Coupling::from_matrix(array![[0.25, 0.25], [0.25, 0.25]]).unwrap();
        let r = transport_entropy_check(&p, &p).unwrap();
        assert_eq!((r.lhs, r.rhs, r.ok), (0.0, 0.0, true));
        let q = Coupling::from_parts(p.source().clone(), p.target().clone(), array![[0.5, 0.0], [0.0, 0.5]]);
        let singular = transport_entropy_check(&p, &q).unwrap();
        assert!(singular.rhs.is_infinite() && singular.ok);
    }

    #[test]
    fn fixed_point_residual_of_entropic_plan() {
        let inst = uniform_instance(Array2::zeros((2, 2)));
        let kernel = ReferenceKernel::from_log_weights(inst.mu(), inst.nu(), array![[0.0, -1.0], [-0.5, 0.2]]).unwrap();
        let s = InnerSettings { tol: 1e-12, max_iters: 10_000, ..InnerSettings::default() };
        let plan = solve_inner(&kernel, &Array2::zeros((2, 2)), &inst.mu(), &inst.nu(), &s).unwrap().plan;
        assert!(fixed_point_residual(&plan, &kernel, &zero_functional(), &s).unwrap() <= s.tol);
        let prod = Coupling::product(inst.mu(), inst.nu());
        let mixed = crate::measures::convex_combine(&plan, &prod, 0.1).unwrap();
        assert!(fixed_point_residual(&mixed, &kernel, &zero_functional(), &s).unwrap() > s.tol);
    }
}
