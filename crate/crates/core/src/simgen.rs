//! Synthetic trial data: quadratic and non-quadratic mean trajectories with
//! quadratic random effects and iid Gaussian noise on the grid 0..7.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basisfn::TimeGrid;
use crate::data::{LongitudinalDataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::seed::{self, stream};

pub const BETA_GROUP1: [f64; 3] = [20.0, -2.0, 0.2];
pub const BETA_GROUP2: [f64; 3] = [20.0, 1.2, -0.3];
pub const BETA_GROUP3: [f64; 3] = [20.0, -4.8, 0.6];

/// Random-effect covariance shared by every simulated group.
pub fn random_effect_cov() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[8.0, 3.0, -0.4, 3.0, 1.5, -0.16, -0.4, -0.16, 0.03])
}

pub const SIGMA_GRID: [f64; 6] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MeanCurve {
    Quadratic([f64; 3]),
    /// 15 − 2 sin(t − 1) ln(t + 0.5)
    NonQuad1,
    /// 15 + 2 cos(t) ln(t + 0.5)
    NonQuad2,
    /// 15.22 − 0.3 t + 2 cos(t) ln(t + 0.5)
    NonQuad3,
}

impl MeanCurve {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            MeanCurve::Quadratic([a, b, c]) => a + b * t + c * t * t,
            MeanCurve::NonQuad1 => 15.0 - 2.0 * (t - 1.0).sin() * (t + 0.5).ln(),
            MeanCurve::NonQuad2 => 15.0 + 2.0 * t.cos() * (t + 0.5).ln(),
            MeanCurve::NonQuad3 => 15.22 - 0.3 * t + 2.0 * t.cos() * (t + 0.5).ln(),
        }
    }

    /// (μ(hi) − μ(lo)) / (hi − lo)
    pub fn ats(&self, lo: f64, hi: f64) -> f64 {
        (self.value(hi) - self.value(lo)) / (hi - lo)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioId {
    Q1vQ2,
    Q1vQ3,
    Q1vQ1,
    NQ1vNQ2,
    NQ1vNQ3,
    NQ1vNQ1,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 6] = [
        ScenarioId::Q1vQ2,
        ScenarioId::Q1vQ3,
        ScenarioId::Q1vQ1,
        ScenarioId::NQ1vNQ2,
        ScenarioId::NQ1vNQ3,
        ScenarioId::NQ1vNQ1,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ScenarioId::Q1vQ2 => "Q1vQ2",
            ScenarioId::Q1vQ3 => "Q1vQ3",
            ScenarioId::Q1vQ1 => "Q1vQ1",
            ScenarioId::NQ1vNQ2 => "NQ1vNQ2",
            ScenarioId::NQ1vNQ3 => "NQ1vNQ3",
            ScenarioId::NQ1vNQ1 => "NQ1vNQ1",
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self, ScenarioId::Q1vQ2 | ScenarioId::Q1vQ3 | ScenarioId::Q1vQ1)
    }

    pub fn curves(&self) -> [MeanCurve; 2] {
        use MeanCurve::*;
        let q1 = Quadratic(BETA_GROUP1);
        match self {
            ScenarioId::Q1vQ2 => [q1, Quadratic(BETA_GROUP2)],
            ScenarioId::Q1vQ3 => [q1, Quadratic(BETA_GROUP3)],
            ScenarioId::Q1vQ1 => [q1, q1],
            ScenarioId::NQ1vNQ2 => [NonQuad1, NonQuad2],
            ScenarioId::NQ1vNQ3 => [NonQuad1, NonQuad3],
            ScenarioId::NQ1vNQ1 => [NonQuad1, NonQuad1],
        }
    }
}

impl std::fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioId::ALL
            .into_iter()
            .find(|id| id.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario id {s:?}")))
    }
}

/// Mean curves, random-effect covariance and design grid of one scenario.
#[derive(Debug, Clone)]
pub struct TrajectoryScenario {
    pub id: Option<ScenarioId>,
    pub means: [MeanCurve; 2],
    pub d: DMatrix<f64>,
    pub grid: TimeGrid,
    factor: DMatrix<f64>,
}

impl TrajectoryScenario {
    pub fn new(means: [MeanCurve; 2], d: DMatrix<f64>, grid: TimeGrid) -> Result<Self> {
        if d.shape() != (3, 3) {
            return Err(Error::InvalidSpec("random effects enter through the quadratic basis; D must be 3x3".into()));
        }
        let eig = SymmetricEigen::new((&d + d.transpose()) * 0.5);
        let min = eig.eigenvalues.min();
        if min < -1e-10 {
            return Err(Error::InvalidSpec(format!(
                "random-effect covariance is not PSD (smallest eigenvalue {min:.3e})"
            )));
        }
        let factor = match Cholesky::new(d.clone()) {
            Some(c) => c.unpack(),
            None => &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt())),
        };
        Ok(Self { id: None, means, d, grid, factor })
    }

    pub fn from_id(id: ScenarioId) -> Self {
        let mut s = Self::new(id.curves(), random_effect_cov(), TimeGrid::integer(7))
            .expect("built-in scenario is valid");
        s.id = Some(id);
        s
    }

    pub fn mean(&self, group: usize, t: f64) -> f64 {
        self.means[group].value(t)
    }
}

/// μ_k(t) for group 0 or 1 of a built-in scenario.
pub fn scenario_mean(id: ScenarioId, group: usize, t: f64) -> f64 {
    id.curves()[group].value(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
}

impl NoiseSpec {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidSpec(format!("noise sd must be positive, got {sigma}")));
        }
        Ok(Self { sigma })
    }
}

pub fn generate(id: ScenarioId, noise: NoiseSpec, n_per_group: usize, seed: u64) -> Result<LongitudinalDataset> {
    generate_from(&TrajectoryScenario::from_id(id), noise.sigma, n_per_group, seed)
}

/// y(t) = μ(t) + (1, t, t²)·b + ε with b ~ N(0, D), ε ~ N(0, σ²).
///
/// For quadratic means this is g(t)ᵀ(β + b) + ε. Each subject draws from its
/// own stream keyed by (group, index).
pub fn generate_from(scenario: &TrajectoryScenario, sigma: f64, n_per_group: usize, seed: u64) -> Result<LongitudinalDataset> {
    if n_per_group == 0 {
        return Err(Error::InvalidSpec("need at least one subject per group".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidSpec(format!("noise sd must be nonnegative, got {sigma}")));
    }
    let times = scenario.grid.points().to_vec();
    let mut subjects = Vec::with_capacity(2 * n_per_group);
    for group in 0..2 {
        let mu: Vec<f64> = times.iter().map(|&t| scenario.mean(group, t)).collect();
        for i in 0..n_per_group {
            let mut rng = seed::rng_for(seed, &[stream::GENERATE, group as u64, i as u64]);
            let z = DVector::from_iterator(3, (0..3).map(|_| StandardNormal.sample(&mut rng)));
            let b = &scenario.factor * z;
            let values = times
                .iter()
                .zip(&mu)
                .map(|(&t, &m)| {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    m + b[0] + b[1] * t + b[2] * t * t + sigma * eps
                })
                .collect();
            subjects.push(SubjectRecord {
                id: format!("{}-{}", group + 1, i + 1),
                group,
                times: times.clone(),
                values,
            });
        }
    }
    LongitudinalDataset::new(scenario.grid.clone(), subjects, vec!["group1".into(), "group2".into()])
}
