//! Discrete measures, couplings, and the information-theoretic primitives
//! (relative entropy, total variation, marginals) shared by every solver stage.

use std::collections::HashSet;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::par::sum_rows;

/// Tolerance on total mass after construction.
pub const MASS_TOLERANCE: f64 = 1e-12;
/// Inputs whose total mass is off by at most this much are renormalized; worse is rejected.
pub const RENORMALIZE_LIMIT: f64 = 1e-9;

/// A tempo-spatial point `(time, x)` with `x` in the unit square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub time: f64,
    pub coords: [f64; 2],
}

impl GridPoint {
    pub fn new(time: f64, coords: [f64; 2]) -> Result<Self> {
        if !(time.is_finite() && time >= 0.0) {
            return Err(Error::Domain(format!("grid point time must be finite and >= 0, got {time}")));
        }
        if coords.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Domain(format!("grid point coordinates must lie in [0,1], got {coords:?}")));
        }
        Ok(Self { time, coords })
    }

    /// Euclidean distance between the spatial coordinates (time ignored).
    pub fn spatial_distance(&self, other: &GridPoint) -> f64 {
        let dx = self.coords[0] - other.coords[0];
        let dy = self.coords[1] - other.coords[1];
        dx.hypot(dy)
    }

    /// Sup-norm distance over `(time, x, y)`.
    pub fn sup_distance(&self, other: &GridPoint) -> f64 {
        (self.time - other.time)
            .abs()
            .max((self.coords[0] - other.coords[0]).abs())
            .max((self.coords[1] - other.coords[1]).abs())
    }

    fn key(&self) -> (u64, u64, u64) {
        (self.time.to_bits(), self.coords[0].to_bits(), self.coords[1].to_bits())
    }
}

/// Probability weights on a finite set of distinct grid points.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    points: Vec<GridPoint>,
    weights: Array1<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<GridPoint>, weights: Array1<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if points.is_empty() {
            return Err(Error::InvalidMeasure("measure has no support points".into()));
        }
        let weights = normalize_weights(weights)?;
        let mut seen = HashSet::with_capacity(points.len());
        for p in &points {
            if !seen.insert(p.key()) {
                return Err(Error::InvalidMeasure(format!("duplicate support point {p:?}")));
            }
        }
        Ok(Self { points, weights })
    }

    /// Places `weights` on evenly spaced points `(0, (k/n, 0))`. Handy when only
    /// the weights matter.
    pub fn on_unit_segment(weights: &[f64]) -> Result<Self> {
        let n = weights.len();
        let points = (0..n)
            .map(|k| GridPoint { time: 0.0, coords: [k as f64 / n.max(1) as f64, 0.0] })
            .collect();
        Self::new(points, Array1::from(weights.to_vec()))
    }

    pub fn uniform(points: Vec<GridPoint>) -> Result<Self> {
        let n = points.len();
        Self::new(points, Array1::from_elem(n, 1.0 / n as f64))
    }

    pub fn points(&self) -> &[GridPoint] {
        &self.points
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Whether both measures live on the same ordered support.
    pub fn same_support(&self, other: &DiscreteMeasure) -> bool {
        self.points == other.points
    }
}

fn normalize_weights(mut weights: Array1<f64>) -> Result<Array1<f64>> {
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::InvalidMeasure(format!("weights must be finite and nonnegative, found {w}")));
    }
    let total = weights.sum();
    if (total - 1.0).abs() > RENORMALIZE_LIMIT {
        return Err(Error::InvalidMeasure(format!("weights sum to {total}, expected 1")));
    }
    if (total - 1.0).abs() > 0.0 {
        weights /= total;
    }
    Ok(weights)
}

/// A joint probability matrix over `source × target`.
///
/// Only nonnegativity and unit mass are enforced at construction. Marginal
/// feasibility is measured with [`Coupling::marginal_residual`], since
/// iterative solvers produce plans that are feasible only up to a tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    source: Arc<DiscreteMeasure>,
    target: Arc<DiscreteMeasure>,
    probs: Array2<f64>,
}

impl Coupling {
    pub fn new(source: Arc<DiscreteMeasure>, target: Arc<DiscreteMeasure>, mut probs: Array2<f64>) -> Result<Self> {
        if probs.dim() != (source.len(), target.len()) {
            return Err(Error::Dimension(format!(
                "coupling matrix is {:?}, supports are {}x{}",
                probs.dim(),
                source.len(),
                target.len()
            )));
        }
        if let Some(v) = probs.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidMeasure(format!("coupling entries must be finite and nonnegative, found {v}")));
        }
        let total = sum_rows(probs.nrows(), |i| probs.row(i).sum());
        if (total - 1.0).abs() > RENORMALIZE_LIMIT {
            return Err(Error::InvalidMeasure(format!("coupling mass is {total}, expected 1")));
        }
        if total != 1.0 {
            probs.par_mapv_inplace(|v| v / total);
        }
        Ok(Self { source, target, probs })
    }

    /// The product coupling `mu ⊗ nu`.
    pub fn product(source: Arc<DiscreteMeasure>, target: Arc<DiscreteMeasure>) -> Self {
        let probs = outer(source.weights(), target.weights());
        Self { source, target, probs }
    }

    /// Builds a coupling on anonymous supports whose weights are its own marginals.
    pub fn from_matrix(probs: Array2<f64>) -> Result<Self> {
        let rows = probs.sum_axis(Axis(1));
        let cols = probs.sum_axis(Axis(0));
        let total = rows.sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::InvalidMeasure(format!("coupling mass is {total}")));
        }
        let source = DiscreteMeasure::on_unit_segment(&(rows / total).to_vec())?;
        let target = DiscreteMeasure::on_unit_segment(&(cols / total).to_vec())?;
        Self::new(Arc::new(source), Arc::new(target), probs)
    }

    /// Wraps an already validated matrix. Callers guarantee the invariants.
    pub(crate) fn from_parts(source: Arc<DiscreteMeasure>, target: Arc<DiscreteMeasure>, probs: Array2<f64>) -> Self {
        debug_assert_eq!(probs.dim(), (source.len(), target.len()));
        Self { source, target, probs }
    }

    pub fn source(&self) -> &Arc<DiscreteMeasure> {
        &self.source
    }

    pub fn target(&self) -> &Arc<DiscreteMeasure> {
        &self.target
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn into_probs(self) -> Array2<f64> {
        self.probs
    }

    pub fn dim(&self) -> (usize, usize) {
        self.probs.dim()
    }

    /// Worst total-variation distance between the plan's marginals and the
    /// source/target weights.
    pub fn marginal_residual(&self) -> f64 {
        let (rows, cols) = marginals(self);
        let row_err = 0.5 * (&rows - self.source.weights()).mapv(f64::abs).sum();
        let col_err = 0.5 * (&cols - self.target.weights()).mapv(f64::abs).sum();
        row_err.max(col_err)
    }

    fn check_compatible(&self, other: &Coupling) -> Result<()> {
        let same = |a: &Arc<DiscreteMeasure>, b: &Arc<DiscreteMeasure>| Arc::ptr_eq(a, b) || a.same_support(b);
        if self.dim() != other.dim() || !same(&self.source, &other.source) || !same(&self.target, &other.target) {
            return Err(Error::Dimension(format!(
                "couplings live on different supports ({:?} vs {:?})",
                self.dim(),
                other.dim()
            )));
        }
        Ok(())
    }
}

pub(crate) fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut m = Array2::zeros((a.len(), b.len()));
    Zip::from(m.rows_mut()).and(a).par_for_each(|mut row, &ai| {
        row.assign(&(b * ai));
    });
    m
}

/// `H(p‖q) = Σ p log(p/q)` with `0 log 0 = 0`; `+inf` when `p` is not absolutely
/// continuous with respect to `q`.
pub fn relative_entropy(p: &Coupling, q: &Coupling) -> Result<f64> {
    p.check_compatible(q)?;
    let (pp, qq) = (&p.probs, &q.probs);
    Ok(sum_rows(pp.nrows(), |i| {
        pp.row(i)
            .iter()
            .zip(qq.row(i))
            .map(|(&a, &b)| entropy_term(a, b))
            .sum()
    })
    .max(0.0))
}

#[inline]
pub(crate) fn entropy_term(p: f64, q: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else if q <= 0.0 {
        f64::INFINITY
    } else {
        p * (p.ln() - q.ln())
    }
}

/// Half the entrywise L1 distance; lies in `[0, 1]`.
pub fn total_variation(p: &Coupling, q: &Coupling) -> Result<f64> {
    p.check_compatible(q)?;
    Ok(tv_matrices(&p.probs, &q.probs))
}

pub(crate) fn tv_matrices(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    0.5 * sum_rows(a.nrows(), |i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y).abs()).sum())
}

/// Row sums and column sums of the plan.
pub fn marginals(p: &Coupling) -> (Array1<f64>, Array1<f64>) {
    let probs = &p.probs;
    let rows: Vec<f64> = (0..probs.nrows()).into_par_iter().map(|i| probs.row(i).sum()).collect();
    (Array1::from(rows), probs.sum_axis(Axis(0)))
}

/// Entrywise `(1 - alpha) p + alpha q`.
pub fn convex_combine(p: &Coupling, q: &Coupling, alpha: f64) -> Result<Coupling> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("mixing weight must lie in [0,1], got {alpha}")));
    }
    p.check_compatible(q)?;
    let mut probs = p.probs.clone();
    Zip::from(&mut probs).and(&q.probs).par_for_each(|a, &b| {
        *a = (1.0 - alpha) * *a + alpha * b;
    });
    Ok(Coupling::from_parts(p.source.clone(), p.target.clone(), probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn coupling(m: Array2<f64>) -> Coupling {
        let mu = Arc::new(DiscreteMeasure::on_unit_segment(&vec![1.0 / m.nrows() as f64; m.nrows()]).unwrap());
        let nu = Arc::new(DiscreteMeasure::on_unit_segment(&vec![1.0 / m.ncols() as f64; m.ncols()]).unwrap());
        Coupling::new(mu, nu, m).unwrap()
    }

    fn uniform2() -> Coupling {
        coupling(Array2::from_elem((2, 2), 0.25))
    }

    #[test]
    fn grid_point_domain_is_checked() {
        assert!(GridPoint::new(-0.1, [0.5, 0.5]).is_err());
        assert!(GridPoint::new(0.0, [1.2, 0.5]).is_err());
        assert!(GridPoint::new(0.3, [0.0, 1.0]).is_ok());
    }

    #[test]
    fn measure_renormalizes_small_drift_and_rejects_large() {
        let m = DiscreteMeasure::on_unit_segment(&[0.5 + 5e-10, 0.5]).unwrap();
        assert_abs_diff_eq!(m.weights().sum(), 1.0, epsilon = 1e-15);
        assert!(DiscreteMeasure::on_unit_segment(&[0.5, 0.6]).is_err());
        assert!(DiscreteMeasure::on_unit_segment(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn measure_rejects_duplicate_points() {
        let p = GridPoint::new(0.0, [0.1, 0.1]).unwrap();
        assert!(DiscreteMeasure::uniform(vec![p, p]).is_err());
    }

    #[test]
    fn relative_entropy_examples() {
        let p = uniform2();
        assert_eq!(relative_entropy(&p, &p).unwrap(), 0.0);
        let q = coupling(array![[0.4, 0.1], [0.1, 0.4]]);
        // 0.5 ln(0.25/0.4) + 0.5 ln(0.25/0.1) = 0.5 ln(1.5625)
        let expected = 0.5 * (0.25f64 / 0.4).ln() + 0.5 * (0.25f64 / 0.1).ln();
        assert_abs_diff_eq!(expected, 0.223_143_551_314_209_7, epsilon = 1e-15);
        assert_abs_diff_eq!(relative_entropy(&p, &q).unwrap(), expected, epsilon = 1e-15);
        let singular = coupling(array![[0.5, 0.0], [0.0, 0.5]]);
        assert_eq!(relative_entropy(&p, &singular).unwrap(), f64::INFINITY);
        assert!(relative_entropy(&singular, &p).unwrap().is_finite());
    }

    #[test]
    fn total_variation_examples() {
        let p = uniform2();
        assert_eq!(total_variation(&p, &p).unwrap(), 0.0);
        let a = Coupling::from_matrix(array![[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let b = Coupling::from_matrix(array![[0.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(tv_matrices(a.probs(), b.probs()), 1.0);
        let q = coupling(array![[0.4, 0.1], [0.1, 0.4]]);
        assert_abs_diff_eq!(total_variation(&p, &q).unwrap(), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn mismatched_supports_are_dimension_errors() {
        let p = uniform2();
        let q = coupling(Array2::from_elem((3, 2), 1.0 / 6.0));
        assert!(matches!(relative_entropy(&p, &q), Err(Error::Dimension(_))));
        assert!(matches!(total_variation(&p, &q), Err(Error::Dimension(_))));
        assert!(matches!(convex_combine(&p, &q, 0.5), Err(Error::Dimension(_))));
    }

    #[test]
    fn marginal_examples() {
        let mu = Arc::new(DiscreteMeasure::on_unit_segment(&[0.3, 0.7]).unwrap());
        let nu = Arc::new(DiscreteMeasure::on_unit_segment(&[0.2, 0.5, 0.3]).unwrap());
        let prod = Coupling::product(mu.clone(), nu.clone());
        let (r, c) = marginals(&prod);
        assert_abs_diff_eq!(r, *mu.weights(), epsilon = 1e-15);
        assert_abs_diff_eq!(c, *nu.weights(), epsilon = 1e-15);

        let (r, c) = marginals(&coupling(array![[0.5, 0.0], [0.0, 0.5]]));
        assert_eq!((r, c), (array![0.5, 0.5], array![0.5, 0.5]));
        let (r, c) = marginals(&Coupling::from_matrix(array![[0.3, 0.2], [0.1, 0.4]]).unwrap());
        assert_abs_diff_eq!(r, array![0.5, 0.5], epsilon = 1e-15);
        assert_abs_diff_eq!(c, array![0.4, 0.6], epsilon = 1e-15);
    }

    #[test]
    fn convex_combine_examples() {
        let p = coupling(array![[0.5, 0.0], [0.0, 0.5]]);
        let q = uniform2();
        assert_eq!(convex_combine(&p, &q, 0.0).unwrap(), p);
        assert_eq!(convex_combine(&p, &q, 1.0).unwrap(), q);
        let mid = convex_combine(&p, &q, 0.5).unwrap();
        assert_abs_diff_eq!(*mid.probs(), array![[0.375, 0.125], [0.125, 0.375]], epsilon = 1e-15);
        assert!(matches!(convex_combine(&p, &q, 1.5), Err(Error::Domain(_))));
        assert!(matches!(convex_combine(&p, &q, -0.1), Err(Error::Domain(_))));
    }

    fn random_matrix(n: usize, m: usize) -> impl Strategy<Value = Array2<f64>> {
        prop::collection::vec(0.01f64..1.0, n * m).prop_map(move |v| {
            let total: f64 = v.iter().sum();
            Array2::from_shape_vec((n, m), v.into_iter().map(|x| x / total).collect()).unwrap()
        })
    }

    /// Random member of Π(μ,ν) with uniform marginals: a mixture of permutation matrices.
    fn random_feasible(n: usize) -> impl Strategy<Value = Array2<f64>> {
        prop::collection::vec((0.0f64..1.0, Just((0..n).collect::<Vec<usize>>()).prop_shuffle()), 1..5)
        .prop_map(move |parts| {
            let total: f64 = parts.iter().map(|(w, _)| w + 0.01).sum();
            let mut m = Array2::zeros((n, n));
            for (w, perm) in parts {
                for (i, &j) in perm.iter().enumerate() {
                    m[[i, j]] += (w + 0.01) / total / n as f64;
                }
            }
            m
        })
    }

    proptest! {
        #[test]
        fn entropy_is_nonnegative_and_pinsker_holds(a in random_matrix(3, 4), b in random_matrix(3, 4)) {
            let p = Coupling::from_matrix(a).unwrap();
            let q = Coupling::from_parts(p.source().clone(), p.target().clone(), b);
            let h = relative_entropy(&p, &q).unwrap();
            let tv = total_variation(&p, &q).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!((0.0..=1.0).contains(&tv));
            prop_assert!(tv <= (h / 2.0).sqrt() + 1e-12);
            prop_assert_eq!(h == 0.0, tv == 0.0);
        }

        #[test]
        fn combination_of_feasible_plans_stays_feasible(a in random_feasible(4), b in random_feasible(4), alpha in 0.0f64..=1.0) {
            let p = coupling(a);
            let q = coupling(b);
            let mix = convex_combine(&p, &q, alpha).unwrap();
            prop_assert!(mix.marginal_residual() <= 1e-12);

            let (rp, cp) = marginals(&p);
            let (rq, cq) = marginals(&q);
            let (rm, cm) = marginals(&mix);
            let r_expected = &rp * (1.0 - alpha) + &rq * alpha;
            let c_expected = &cp * (1.0 - alpha) + &cq * alpha;
            for (x, y) in rm.iter().zip(&r_expected).chain(cm.iter().zip(&c_expected)) {
                prop_assert!((x - y).abs() <= 1e-15);
            }
        }
    }
}
