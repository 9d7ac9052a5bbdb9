//! Convex functional costs `F(π)` and their linear derivatives `δF/δπ(π,·)`.
//!
//! Two models ship: the zero functional (classical entropic transport) and a
//! quadratic congestion penalty on the loads that trajectories induce in a
//! partition of the tempo-spatial zone.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measures::{convex_combine, Coupling, DiscreteMeasure, GridPoint};
use crate::par::{sum_rows, CompensatedSum};
use crate::scenario::travel_time;

/// A convex, nonnegative functional on couplings together with its linear derivative.
pub trait FunctionalModel: Send + Sync + fmt::Debug {
    fn value(&self, pi: &Coupling) -> f64;

    /// The matrix `δF/δπ(π, i, j)`.
    fn linear_derivative(&self, pi: &Coupling) -> Array2<f64>;

    /// `F(to) − F(from)`. Override when the plain difference cancels badly.
    fn increment(&self, from: &Coupling, to: &Coupling) -> f64 {
        self.value(to) - self.value(from)
    }
}

/// `F ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroFunctional;

impl FunctionalModel for ZeroFunctional {
    fn value(&self, _pi: &Coupling) -> f64 {
        0.0
    }

    fn linear_derivative(&self, pi: &Coupling) -> Array2<f64> {
        Array2::zeros(pi.dim())
    }
}

pub fn zero_functional() -> ZeroFunctional {
    ZeroFunctional
}

/// `factor · F`. Converts a model given in physical units into solver units.
#[derive(Debug, Clone)]
pub struct ScaledFunctional {
    inner: Arc<dyn FunctionalModel>,
    factor: f64,
}

impl ScaledFunctional {
    pub fn new(inner: Arc<dyn FunctionalModel>, factor: f64) -> Self {
        Self { inner, factor }
    }
}

impl FunctionalModel for ScaledFunctional {
    fn value(&self, pi: &Coupling) -> f64 {
        self.factor * self.inner.value(pi)
    }

    fn linear_derivative(&self, pi: &Coupling) -> Array2<f64> {
        let mut d = self.inner.linear_derivative(pi);
        d.par_mapv_inplace(|v| v * self.factor);
        d
    }

    fn increment(&self, from: &Coupling, to: &Coupling) -> f64 {
        self.factor * self.inner.increment(from, to)
    }
}

/// An axis-aligned box in `(time, x, y)`. Intervals are half-open unless the
/// matching `closed_upper` flag is set, which is how the outermost cells of a
/// partition include the zone boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellBox {
    pub lower: [f64; 3],
    pub upper: [f64; 3],
    pub closed_upper: [bool; 3],
}

impl CellBox {
    pub fn new(lower: [f64; 3], upper: [f64; 3]) -> Self {
        Self { lower, upper, closed_upper: [false; 3] }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| {
            p[k] >= self.lower[k] && (p[k] < self.upper[k] || (self.closed_upper[k] && p[k] == self.upper[k]))
        })
    }

    fn overlaps(&self, other: &CellBox) -> bool {
        (0..3).all(|k| self.lower[k] < other.upper[k] && other.lower[k] < self.upper[k])
    }
}

/// Cells `A_n` partitioning a zone.
#[derive(Debug, Clone, PartialEq)]
pub enum CellPartition {
    /// A regular `shape = [ct, cx, cy]` grid over `[lower, upper]`, cells
    /// ordered time-major then x then y. Lookup is O(1).
    Uniform { lower: [f64; 3], upper: [f64; 3], shape: [usize; 3] },
    /// Arbitrary pairwise disjoint boxes; lookup scans.
    Boxes(Vec<CellBox>),
}

impl CellPartition {
    pub fn uniform(lower: [f64; 3], upper: [f64; 3], shape: [usize; 3]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Config(format!("cell grid shape must be positive, got {shape:?}")));
        }
        if (0..3).any(|k| !(upper[k] > lower[k])) {
            return Err(Error::Config(format!("degenerate congestion zone {lower:?}..{upper:?}")));
        }
        Ok(Self::Uniform { lower, upper, shape })
    }

    pub fn boxes(cells: Vec<CellBox>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::Config("at least one congestion cell is required".into()));
        }
        for (a, ca) in cells.iter().enumerate() {
            for cb in &cells[a + 1..] {
                if ca.overlaps(cb) {
                    return Err(Error::Config(format!("congestion cells overlap: {ca:?} and {cb:?}")));
                }
            }
        }
        Ok(Self::Boxes(cells))
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Uniform { shape, .. } => shape.iter().product(),
            Self::Boxes(cells) => cells.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of the cell containing `p = (time, x, y)`, if any.
    pub fn locate(&self, p: [f64; 3]) -> Option<usize> {
        match self {
            Self::Uniform { lower, upper, shape } => {
                let mut idx = [0usize; 3];
                for k in 0..3 {
                    if p[k] < lower[k] || p[k] > upper[k] {
                        return None;
                    }
                    let width = (upper[k] - lower[k]) / shape[k] as f64;
                    idx[k] = (((p[k] - lower[k]) / width).floor() as usize).min(shape[k] - 1);
                }
                Some((idx[0] * shape[1] + idx[1]) * shape[2] + idx[2])
            }
            Self::Boxes(cells) => cells.iter().position(|c| c.contains(p)),
        }
    }

    /// The cells as explicit boxes, in index order.
    pub fn cells(&self) -> Vec<CellBox> {
        match self {
            Self::Boxes(cells) => cells.clone(),
            Self::Uniform { lower, upper, shape } => {
                let width: Vec<f64> = (0..3).map(|k| (upper[k] - lower[k]) / shape[k] as f64).collect();
                let mut out = Vec::with_capacity(self.len());
                for it in 0..shape[0] {
                    for ix in 0..shape[1] {
                        for iy in 0..shape[2] {
                            let idx = [it, ix, iy];
                            let mut b = CellBox::new([0.0; 3], [0.0; 3]);
                            for k in 0..3 {
                                b.lower[k] = lower[k] + width[k] * idx[k] as f64;
                                b.upper[k] = if idx[k] + 1 == shape[k] {
                                    upper[k]
                                } else {
                                    lower[k] + width[k] * (idx[k] + 1) as f64
                                };
                                b.closed_upper[k] = idx[k] + 1 == shape[k];
                            }
                            out.push(b);
                        }
                    }
                }
                out
            }
        }
    }
}

/// Trajectory occupancy of the congestion cells plus the penalty strength.
///
/// `occupancy(n, i, j)` is 1 iff the sampled straight-line trajectory from
/// source point `i` to target point `j` visits cell `n`. Stored sparsely as
/// the sorted list of visited cells per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CongestionSpec {
    partition: CellPartition,
    gamma: f64,
    sample_count: usize,
    dims: (usize, usize),
    offsets: Vec<u32>,
    cells: Vec<u16>,
}

/// Trajectory-model parameters for [`congestion_occupancy`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryModel {
    pub lambda: f64,
    pub beta: f64,
    pub sample_count: usize,
}

/// Precomputes which cells each source→target trajectory visits.
///
/// The trajectory `x + (y − x)(s' − t)/r_min` is sampled at `sample_count`
/// evenly spaced times `s' ∈ [t, t + min(r_min, s − t)]`. A stationary pair
/// (`x = y`) is sampled over `[t, s]`. Pairs with `s < t` have infinite cost
/// and visit nothing.
pub fn congestion_occupancy(
    partition: CellPartition,
    gamma: f64,
    sources: &DiscreteMeasure,
    targets: &DiscreteMeasure,
    model: TrajectoryModel,
) -> Result<CongestionSpec> {
    if model.sample_count < 2 {
        return Err(Error::Config(format!("sample_count must be at least 2, got {}", model.sample_count)));
    }
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::Config(format!("congestion strength must be finite and >= 0, got {gamma}")));
    }
    if !(model.lambda > 0.0 && model.beta > 0.0) {
        return Err(Error::Config("lambda and beta must be positive".into()));
    }
    if partition.len() > u16::MAX as usize {
        return Err(Error::Config(format!("at most {} congestion cells are supported", u16::MAX)));
    }
    let (ni, nj) = (sources.len(), targets.len());
    let tpoints = targets.points();
    let per_row: Vec<(Vec<u32>, Vec<u16>)> = sources
        .points()
        .par_iter()
        .map(|src| {
            let mut counts = Vec::with_capacity(nj);
            let mut cells = Vec::new();
            let mut scratch = Vec::with_capacity(model.sample_count);
            for tgt in tpoints {
                scratch.clear();
                visited_cells(&partition, src, tgt, model, &mut scratch);
                counts.push(scratch.len() as u32);
                cells.extend_from_slice(&scratch);
            }
            (counts, cells)
        })
        .collect();

    let total: usize = per_row.iter().map(|(_, c)| c.len()).sum();
    if total > u32::MAX as usize {
        return Err(Error::Config("occupancy table too large".into()));
    }
    let mut offsets = Vec::with_capacity(ni * nj + 1);
    let mut cells = Vec::with_capacity(total);
    offsets.push(0u32);
    for (counts, row_cells) in per_row {
        for c in counts {
            offsets.push(offsets.last().unwrap() + c);
        }
        cells.extend(row_cells);
    }
    Ok(CongestionSpec { partition, gamma, sample_count: model.sample_count, dims: (ni, nj), offsets, cells })
}

fn visited_cells(partition: &CellPartition, src: &GridPoint, tgt: &GridPoint, model: TrajectoryModel, out: &mut Vec<u16>) {
    let (t, s) = (src.time, tgt.time);
    if s < t {
        return;
    }
    let x = src.coords;
    let y = tgt.coords;
    let r_min = travel_time(x, y, model.lambda, model.beta);
    let stationary = r_min == 0.0;
    let window = if stationary { s - t } else { r_min.min(s - t) };
    let last = (model.sample_count - 1) as f64;
    for k in 0..model.sample_count {
        let elapsed = window * k as f64 / last;
        let pos = if stationary {
            x
        } else {
            let frac = elapsed / r_min;
            [x[0] + (y[0] - x[0]) * frac, x[1] + (y[1] - x[1]) * frac]
        };
        if let Some(n) = partition.locate([t + elapsed, pos[0], pos[1]]) {
            out.push(n as u16);
        }
    }
    out.sort_unstable();
    out.dedup();
}

impl CongestionSpec {
    pub fn partition(&self) -> &CellPartition {
        &self.partition
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn num_cells(&self) -> usize {
        self.partition.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    /// Same occupancy with a different penalty strength.
    pub fn with_gamma(&self, gamma: f64) -> Self {
        Self { gamma, ..self.clone() }
    }

    /// Sorted indices of the cells visited by the `i → j` trajectory.
    pub fn cells_of(&self, i: usize, j: usize) -> &[u16] {
        let k = i * self.dims.1 + j;
        &self.cells[self.offsets[k] as usize..self.offsets[k + 1] as usize]
    }

    pub fn occupancy(&self, n: usize, i: usize, j: usize) -> bool {
        self.cells_of(i, j).binary_search(&(n as u16)).is_ok()
    }

    /// `load_n = Σ_ij O_n(i,j) π_ij`.
    pub fn loads(&self, pi: &Coupling) -> Array1<f64> {
        self.loads_of(pi.probs())
    }

    /// Loads of an arbitrary (possibly signed) weight matrix.
    fn loads_of(&self, p: &Array2<f64>) -> Array1<f64> {
        let n = self.num_cells();
        let rows: Vec<Vec<CompensatedSum>> = (0..p.nrows())
            .into_par_iter()
            .map(|i| {
                let mut acc = vec![CompensatedSum::default(); n];
                for (j, &pij) in p.row(i).iter().enumerate() {
                    if pij != 0.0 {
                        for &c in self.cells_of(i, j) {
                            acc[c as usize].add(pij);
                        }
                    }
                }
                acc
            })
            .collect();
        let mut total = vec![CompensatedSum::default(); n];
        for row in rows {
            for (t, r) in total.iter_mut().zip(row) {
                t.add(r.value());
            }
        }
        total.iter().map(CompensatedSum::value).collect()
    }
}

/// `F(π) = Σ_n γ load_n²`.
#[derive(Debug, Clone)]
pub struct QuadraticCongestion {
    spec: Arc<CongestionSpec>,
}

impl QuadraticCongestion {
    pub fn spec(&self) -> &CongestionSpec {
        &self.spec
    }
}

pub fn quadratic_congestion(spec: Arc<CongestionSpec>) -> QuadraticCongestion {
    QuadraticCongestion { spec }
}

impl FunctionalModel for QuadraticCongestion {
    fn value(&self, pi: &Coupling) -> f64 {
        self.spec.gamma * self.spec.loads(pi).iter().map(|l| l * l).sum::<f64>()
    }

    fn linear_derivative(&self, pi: &Coupling) -> Array2<f64> {
        let slope = self.spec.loads(pi).mapv(|l| 2.0 * self.spec.gamma * l);
        let mut d = Array2::zeros(pi.dim());
        Zip::indexed(d.rows_mut()).par_for_each(|i, mut row| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.spec.cells_of(i, j).iter().map(|&c| slope[c as usize]).sum();
            }
        });
        d
    }

    fn increment(&self, from: &Coupling, to: &Coupling) -> f64 {
        let base = self.spec.loads(from);
        let delta = self.spec.loads_of(&(to.probs() - from.probs()));
        self.spec.gamma * base.iter().zip(&delta).map(|(l, d)| d * (2.0 * l + d)).sum::<f64>()
    }
}

/// `⟨a, b⟩` skipping entries where `b` vanishes.
pub(crate) fn pairing(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    sum_rows(a.nrows(), |i| {
        a.row(i).iter().zip(b.row(i)).map(|(&x, &y)| if y != 0.0 { x * y } else { 0.0 }).sum()
    })
}

/// First-order Taylor residuals `|F(p_η) − F(p) − ⟨δF/δπ(p), p_η − p⟩|` with
/// `p_η = (1−η)p + ηq` as stored, so rounding in the mixture does not leak in.
pub fn derivative_check(model: &dyn FunctionalModel, p: &Coupling, q: &Coupling, etas: &[f64]) -> Result<Vec<f64>> {
    let grad = model.linear_derivative(p);
    etas.iter()
        .map(|&eta| {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(Error::Domain(format!("eta must lie in (0,1], got {eta}")));
            }
            let mixed = convex_combine(p, q, eta)?;
            let step = mixed.probs() - p.probs();
            Ok((model.increment(p, &mixed) - pairing(&grad, &step)).abs())
        })
        .collect()
}
