//! UAV relocation instances: tempo-spatial grids, the energy cost, the Gibbs
//! reference kernel, congestion cells, and the source/target marginals.

use std::sync::Arc;

use ndarray::{Array1, Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functional::{
    congestion_occupancy, quadratic_congestion, CellPartition, CongestionSpec, FunctionalModel, QuadraticCongestion,
    ScaledFunctional, TrajectoryModel,
};
use crate::kernel::{gibbs_reference, ReferenceKernel};
use crate::measures::{DiscreteMeasure, GridPoint};

/// Energy-optimal travel time `r_min = sqrt(λ d² / β)`.
pub fn travel_time(x: [f64; 2], y: [f64; 2], lambda: f64, beta: f64) -> f64 {
    let d = (x[0] - y[0]).hypot(x[1] - y[1]);
    (lambda / beta).sqrt() * d
}

/// Energy to fly from `(t, x)` to `(s, y)`.
///
/// `+inf` when `s < t` (arrival before departure). Otherwise the minimum over
/// travel times `r ≤ s − t` of `(λ d²/r² + β) r`, which is `2β r_min` when the
/// optimum fits in the window and `(λ d²/(s−t)² + β)(s−t)` when it does not.
pub fn transport_cost(t: f64, s: f64, x: [f64; 2], y: [f64; 2], lambda: f64, beta: f64) -> f64 {
    if s < t {
        return f64::INFINITY;
    }
    let d2 = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
    if d2 == 0.0 {
        return 0.0;
    }
    let window = s - t;
    if window == 0.0 {
        // Moving a positive distance in zero time.
        return f64::INFINITY;
    }
    let r_min = travel_time(x, y, lambda, beta);
    if r_min <= window {
        2.0 * beta * r_min
    } else {
        (lambda * d2 / (window * window) + beta) * window
    }
}

/// Congestion cell grid shape over `(time, x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellShape {
    pub t: usize,
    pub x: usize,
    pub y: usize,
}

impl Default for CellShape {
    fn default() -> Self {
        Self { t: 1, x: 4, y: 4 }
    }
}

/// How a marginal distributes mass over the spatial grid. Mass is split evenly
/// across time slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarginalSpec {
    /// Gaussian bumps, each cut to the half-plane `(x − c)·n ≥ 0`. A zero
    /// direction (or a missing entry) disables the cut for that bump.
    HalfGaussianMixture {
        centers: Vec<[f64; 2]>,
        scales: Vec<f64>,
        weights: Vec<f64>,
        #[serde(default)]
        directions: Vec<[f64; 2]>,
    },
    /// Point masses snapped to the nearest grid node.
    PointMasses { points: Vec<[f64; 2]>, weights: Vec<f64> },
    Uniform,
}

impl MarginalSpec {
    pub fn default_source() -> Self {
        Self::HalfGaussianMixture {
            centers: vec![[0.25, 0.5], [0.5, 0.25]],
            scales: vec![0.1, 0.1],
            weights: vec![0.5, 0.5],
            directions: vec![[1.0, 0.0], [0.0, 1.0]],
        }
    }

    pub fn default_target() -> Self {
        Self::PointMasses { points: vec![[0.9, 0.2], [0.2, 0.9]], weights: vec![0.5, 0.5] }
    }

    /// Unnormalized spatial weights on `grid`.
    fn spatial_weights(&self, grid: &[[f64; 2]]) -> Result<Vec<f64>> {
        match self {
            Self::Uniform => Ok(vec![1.0; grid.len()]),
            Self::HalfGaussianMixture { centers, scales, weights, directions } => {
                half_gaussian_density(grid, centers, scales, weights, directions)
            }
            Self::PointMasses { points, weights } => {
                if points.len() != weights.len() || points.is_empty() {
                    return Err(Error::Config("point_masses needs one weight per point".into()));
                }
                check_weights(weights)?;
                let mut w = vec![0.0; grid.len()];
                for (p, &pw) in points.iter().zip(weights) {
                    let nearest = grid
                        .iter()
                        .enumerate()
                        .min_by(|(_, a), (_, b)| dist2(a, p).total_cmp(&dist2(b, p)))
                        .map(|(k, _)| k)
                        .ok_or_else(|| Error::Config("empty grid".into()))?;
                    w[nearest] += pw;
                }
                Ok(w)
            }
        }
    }
}

fn dist2(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Config(format!("marginal weights must be nonnegative, got {weights:?}")));
    }
    if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("marginal weights must sum to 1, got {weights:?}")));
    }
    Ok(())
}

fn half_gaussian_density(
    grid: &[[f64; 2]],
    centers: &[[f64; 2]],
    scales: &[f64],
    weights: &[f64],
    directions: &[[f64; 2]],
) -> Result<Vec<f64>> {
    if centers.len() != scales.len() || centers.len() != weights.len() || centers.is_empty() {
        return Err(Error::Config("half_gaussian_mixture needs matching centers, scales and weights".into()));
    }
    if directions.len() > centers.len() {
        return Err(Error::Config("more half-plane directions than centers".into()));
    }
    if scales.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Config(format!("scales must be positive, got {scales:?}")));
    }
    check_weights(weights)?;
    Ok(grid
        .iter()
        .map(|x| {
            centers
                .iter()
                .zip(scales)
                .zip(weights)
                .enumerate()
                .map(|(k, ((c, &sigma), &w))| {
                    let inside = directions
                        .get(k)
                        .is_none_or(|n| (x[0] - c[0]) * n[0] + (x[1] - c[1]) * n[1] >= 0.0);
                    if inside {
                        w * (-dist2(x, c) / (2.0 * sigma * sigma)).exp()
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect())
}

/// Mixture of half-plane-truncated Gaussians on the spatial coordinates of
/// `points`, normalized over the grid.
pub fn half_gaussian_mixture(
    points: Vec<GridPoint>,
    centers: &[[f64; 2]],
    scales: &[f64],
    weights: &[f64],
    directions: &[[f64; 2]],
) -> Result<DiscreteMeasure> {
    let grid: Vec<[f64; 2]> = points.iter().map(|p| p.coords).collect();
    let density = half_gaussian_density(&grid, centers, scales, weights, directions)?;
    normalized_measure(points, density)
}

fn normalized_measure(points: Vec<GridPoint>, density: Vec<f64>) -> Result<DiscreteMeasure> {
    let total: f64 = density.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::InvalidMeasure("marginal density vanishes on the grid".into()));
    }
    DiscreteMeasure::new(points, Array1::from(density) / total)
}

/// Everything that defines one relocation instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub horizon: f64,
    pub nx: usize,
    pub ny: usize,
    pub departure_times: Vec<f64>,
    pub arrival_times: Vec<f64>,
    pub lambda: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub cells: CellShape,
    pub sample_count: usize,
    pub source: MarginalSpec,
    pub target: MarginalSpec,
}

impl Default for ScenarioConfig {
    /// The published experiment: `T = 0.5`, a 60×41 grid, `K = L = 1`,
    /// `ε = 0.1`, `γ = 20`, `λ = 1`, `β = 0.001`.
    fn default() -> Self {
        Self {
            horizon: 0.5,
            nx: 60,
            ny: 41,
            departure_times: vec![0.0],
            arrival_times: vec![0.5],
            lambda: 1.0,
            beta: 0.001,
            epsilon: 0.1,
            gamma: 20.0,
            cells: CellShape::default(),
            sample_count: 32,
            source: MarginalSpec::default_source(),
            target: MarginalSpec::default_target(),
        }
    }
}

impl ScenarioConfig {
    /// A 20×15 grid, otherwise the published parameters.
    pub fn desk() -> Self {
        Self { nx: 20, ny: 15, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("scenario.horizon", self.horizon),
            ("scenario.lambda", self.lambda),
            ("scenario.beta", self.beta),
            ("scenario.epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::Config(format!("congestion.gamma must be >= 0, got {}", self.gamma)));
        }
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::Config("scenario.nx and scenario.ny must be positive".into()));
        }
        if self.cells.t == 0 || self.cells.x == 0 || self.cells.y == 0 {
            return Err(Error::Config(format!("congestion.cells must be positive, got {:?}", self.cells)));
        }
        for (name, times) in [("departure_times", &self.departure_times), ("arrival_times", &self.arrival_times)] {
            if times.is_empty() {
                return Err(Error::Config(format!("scenario.{name} must not be empty")));
            }
            if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t >= 0.0 && **t <= self.horizon)) {
                return Err(Error::Config(format!("scenario.{name} entry {t} lies outside [0, horizon]")));
            }
        }
        Ok(())
    }

    /// Spatial nodes `(i/nx, j/ny)`, x-major.
    pub fn spatial_grid(&self) -> Vec<[f64; 2]> {
        (0..self.nx)
            .flat_map(|i| (0..self.ny).map(move |j| [i as f64 / self.nx as f64, j as f64 / self.ny as f64]))
            .collect()
    }
}

/// A built relocation instance.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub mu: Arc<DiscreteMeasure>,
    pub nu: Arc<DiscreteMeasure>,
    pub cost: Array2<f64>,
    pub kernel: ReferenceKernel,
    pub congestion: Arc<CongestionSpec>,
    /// The congestion functional in physical units.
    pub model: QuadraticCongestion,
}

impl Scenario {
    /// The congestion functional divided by `ε`, i.e. in the units of
    /// `V = H(π‖R) + F/ε` that the solver minimizes.
    pub fn solver_model(&self) -> ScaledFunctional {
        ScaledFunctional::new(Arc::new(self.model.clone()), 1.0 / self.config.epsilon)
    }

    pub fn physical_model(&self) -> &dyn FunctionalModel {
        &self.model
    }

    /// The same instance with a different congestion strength.
    pub fn with_gamma(&self, gamma: f64) -> Scenario {
        let congestion = Arc::new(self.congestion.with_gamma(gamma));
        Scenario {
            config: ScenarioConfig { gamma, ..self.config.clone() },
            model: quadratic_congestion(congestion.clone()),
            congestion,
            ..self.clone()
        }
    }
}

fn time_sliced_measure(times: &[f64], grid: &[[f64; 2]], spec: &MarginalSpec) -> Result<DiscreteMeasure> {
    let spatial = spec.spatial_weights(grid)?;
    let mut points = Vec::with_capacity(times.len() * grid.len());
    let mut density = Vec::with_capacity(points.capacity());
    for &t in times {
        for (c, &w) in grid.iter().zip(&spatial) {
            points.push(GridPoint::new(t, *c)?);
            density.push(w);
        }
    }
    normalized_measure(points, density)
}

pub fn build_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let grid = config.spatial_grid();
    let mu = Arc::new(time_sliced_measure(&config.departure_times, &grid, &config.source)?);
    let nu = Arc::new(time_sliced_measure(&config.arrival_times, &grid, &config.target)?);

    let mut cost = Array2::zeros((mu.len(), nu.len()));
    let tpoints = nu.points();
    Zip::from(cost.rows_mut()).and(mu.points()).par_for_each(|mut row, src| {
        for (c, tgt) in row.iter_mut().zip(tpoints) {
            *c = transport_cost(src.time, tgt.time, src.coords, tgt.coords, config.lambda, config.beta);
        }
    });
    let kernel = gibbs_reference(&cost, config.epsilon, mu.clone(), nu.clone())?;

    let latest = config.arrival_times.iter().copied().fold(config.horizon, f64::max);
    let partition = CellPartition::uniform(
        [0.0, 0.0, 0.0],
        [latest, 1.0, 1.0],
        [config.cells.t, config.cells.x, config.cells.y],
    )?;
    let trajectories = TrajectoryModel { lambda: config.lambda, beta: config.beta, sample_count: config.sample_count };
    let congestion = Arc::new(congestion_occupancy(partition, config.gamma, &mu, &nu, trajectories)?);
    let model = quadratic_congestion(congestion.clone());
    Ok(Scenario { config: config.clone(), mu, nu, cost, kernel, congestion, model })
}
