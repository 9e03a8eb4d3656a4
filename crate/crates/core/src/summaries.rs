//! Scalar summaries of a group's trajectory: change score, mean change,
//! straight-line slope and ANCOVA, plus their closed-form variances.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basisfn::{endpoint_slope_vector, Basis, TimeGrid};
use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::lmm::{fit_group, FitOptions, LmmFit, LmmSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SummaryKind {
    Cs,
    Mc,
    Slope,
    #[serde(rename = "ANCOVA_EFFECT")]
    AncovaEffect,
    /// Mean change under an estimated WATS weight.
    Wmc,
}

impl SummaryKind {
    pub fn label(&self) -> &'static str {
        match self {
            SummaryKind::Cs => "CS",
            SummaryKind::Mc => "MC",
            SummaryKind::Slope => "SLOPE",
            SummaryKind::AncovaEffect => "ANCOVA_EFFECT",
            SummaryKind::Wmc => "WMC",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryEstimate {
    pub kind: SummaryKind,
    pub value: f64,
    /// Estimated sampling variance of `value`.
    pub variance: f64,
    /// Subjects contributing.
    pub n: usize,
    /// Subjects dropped because they had a single observation.
    pub excluded: usize,
}

/// Mean over subjects of (last − first)/(t_last − t_first), using each
/// subject's own last available observation.
pub fn change_score(data: &LongitudinalDataset, group: usize) -> Result<SummaryEstimate> {
    let mut slopes = Vec::new();
    let mut excluded = 0;
    for s in data.group_subjects(group) {
        match (s.first(), s.last()) {
            (Some((t0, y0)), Some((t1, y1))) if s.len() >= 2 => slopes.push((y1 - y0) / (t1 - t0)),
            _ => excluded += 1,
        }
    }
    if slopes.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "change score needs 2 subjects with at least two observations, group {} has {}",
            group,
            slopes.len()
        )));
    }
    let (mean, var) = mean_var(&slopes);
    Ok(SummaryEstimate {
        kind: SummaryKind::Cs,
        value: mean,
        variance: var / slopes.len() as f64,
        n: slopes.len(),
        excluded,
    })
}

/// Sample mean and unbiased sample variance.
pub(crate) fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, if xs.len() > 1 { ss / (n - 1.0) } else { 0.0 })
}

/// Gᵀβ̂ with variance GᵀCov(β̂)G.
pub fn mean_change(fit: &LmmFit, g: &DVector<f64>) -> Result<SummaryEstimate> {
    if g.len() != fit.beta.len() {
        return Err(Error::Contract(format!(
            "contrast has length {} but the fit has {} coefficients",
            g.len(),
            fit.beta.len()
        )));
    }
    Ok(SummaryEstimate {
        kind: SummaryKind::Mc,
        value: g.dot(&fit.beta),
        variance: (g.transpose() * &fit.cov_beta * g)[(0, 0)].max(0.0),
        n: fit.n_subjects,
        excluded: 0,
    })
}

/// Mean change with the endpoint contrast of the fit's own basis.
pub fn mean_change_ats(fit: &LmmFit, grid: &TimeGrid) -> Result<SummaryEstimate> {
    mean_change(fit, &endpoint_slope_vector(fit.spec.basis(), grid)?)
}

/// Fixed slope of a random-intercept, random-slope linear mixed model.
pub fn straight_line_slope(data: &LongitudinalDataset, group: usize) -> Result<SummaryEstimate> {
    let basis = Basis::polynomial(1, data.grid.baseline(), data.grid.last())?;
    let spec = LmmSpec::new(basis, 2)?;
    let fit = fit_group(data, group, &spec, &FitOptions::default())?;
    Ok(SummaryEstimate {
        kind: SummaryKind::Slope,
        value: fit.beta[1],
        variance: fit.cov_beta[(1, 1)].max(0.0),
        n: fit.n_subjects,
        excluded: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AncovaFit {
    pub alpha0: f64,
    /// `None` when the baseline is constant and its column was dropped.
    pub alpha1: Option<f64>,
    /// Adjusted effect of the second group relative to the first.
    pub alpha2: f64,
    /// Squared standard error of `alpha2`.
    pub se2: f64,
    pub df: usize,
    pub n: usize,
}

/// OLS of the final design-time outcome on baseline and group indicator,
/// over subjects observed at both ends of the grid.
pub fn ancova(data: &LongitudinalDataset) -> Result<AncovaFit> {
    data.require_two_groups()?;
    let (t0, t1) = (data.grid.baseline(), data.grid.last());
    let rows: Vec<(f64, f64, f64)> = data
        .subjects
        .iter()
        .filter_map(|s| {
            let base = s.value_at(&data.grid, t0)?;
            let last = s.value_at(&data.grid, t1)?;
            Some((base, if s.group == 1 { 1.0 } else { 0.0 }, last))
        })
        .collect();
    let n = rows.len();
    if n < 4 {
        return Err(Error::InsufficientData(format!("ANCOVA needs at least 4 complete subjects, got {n}")));
    }
    let n_treated = rows.iter().filter(|r| r.1 == 1.0).count();
    if n_treated == 0 || n_treated == n {
        return Err(Error::InsufficientData("ANCOVA needs complete subjects in both groups".into()));
    }
    let base_mean = rows.iter().map(|r| r.0).sum::<f64>() / n as f64;
    let base_spread = rows.iter().map(|r| (r.0 - base_mean).abs()).fold(0.0, f64::max);
    let keep_baseline = base_spread > 1e-12 * (1.0 + base_mean.abs());

    let cols = if keep_baseline { 3 } else { 2 };
    let x = DMatrix::from_fn(n, cols, |i, j| match (j, keep_baseline) {
        (0, _) => 1.0,
        (1, true) => rows[i].0,
        _ => rows[i].1,
    });
    let y = DVector::from_iterator(n, rows.iter().map(|r| r.2));
    let xtx = x.transpose() * &x;
    let chol = Cholesky::new(xtx).ok_or_else(|| Error::Rank("ANCOVA design is rank deficient".into()))?;
    let coef = chol.solve(&(x.transpose() * &y));
    let resid = &y - &x * &coef;
    let df = n - cols;
    let s2 = resid.norm_squared() / df as f64;
    let cov = chol.inverse() * s2;
    let last = cols - 1;
    Ok(AncovaFit {
        alpha0: coef[0],
        alpha1: keep_baseline.then(|| coef[1]),
        alpha2: coef[last],
        se2: cov[(last, last)].max(0.0),
        df,
        n,
    })
}

/// Contrast h with hᵀy = (y_m − y_1)/(t_m − t_1) on a complete grid vector.
pub fn cs_contrast(grid: &TimeGrid) -> DVector<f64> {
    let m = grid.len();
    let mut h = DVector::zeros(m);
    let span = grid.span();
    h[0] = -1.0 / span;
    h[m - 1] += 1.0 / span;
    h
}

/// (1/n) hᵀVh for a complete balanced design with per-subject covariance V.
pub fn var_cs_theoretical(v: &DMatrix<f64>, grid: &TimeGrid, n: usize) -> Result<f64> {
    if v.nrows() != grid.len() || v.ncols() != grid.len() {
        return Err(Error::Contract(format!("covariance is {}x{}, grid has {} points", v.nrows(), v.ncols(), grid.len())));
    }
    let h = cs_contrast(grid);
    Ok((h.transpose() * v * &h)[(0, 0)] / n as f64)
}

/// (1/n) Gᵀ(σ²(X*ᵀX*)⁻¹ + D)G with D padded by zeros up to the width of X*.
pub fn var_mc_theoretical(d: &DMatrix<f64>, sigma2: f64, x_star: &DMatrix<f64>, g: &DVector<f64>, n: usize) -> Result<f64> {
    let p = x_star.ncols();
    if g.len() != p || d.nrows() > p || d.nrows() != d.ncols() {
        return Err(Error::Contract("dimension mismatch between D, X* and G".into()));
    }
    let xtx_inv = Cholesky::new(x_star.transpose() * x_star)
        .ok_or_else(|| Error::Rank("X*ᵀX* is singular".into()))?
        .inverse();
    let mut total = xtx_inv * sigma2;
    let q = d.nrows();
    let mut block = total.view_mut((0, 0), (q, q));
    block += d;
    Ok((g.transpose() * total * g)[(0, 0)] / n as f64)
}

/// Per-subject marginal covariance Z D Zᵀ + σ² I on the complete grid.
pub fn marginal_cov(z: &DMatrix<f64>, d: &DMatrix<f64>, sigma2: f64) -> DMatrix<f64> {
    let m = z.nrows();
    z * d * z.transpose() + DMatrix::identity(m, m) * sigma2
}

/// hᵀPh / hᵀh for the hat projection P = X(XᵀX)⁻¹Xᵀ; lies in [0, 1].
pub fn hat_rayleigh(x_star: &DMatrix<f64>, h: &DVector<f64>) -> Result<f64> {
    let chol = Cholesky::new(x_star.transpose() * x_star).ok_or_else(|| Error::Rank("X*ᵀX* is singular".into()))?;
    let xth = x_star.transpose() * h;
    Ok(xth.dot(&chol.solve(&xth)) / h.norm_squared())
}

/// (σ²/n)(hᵀh)(1 − hᵀPh/hᵀh): the part of Var(CS) that the mixed model removes.
pub fn cs_mc_variance_gap(sigma2: f64, x_star: &DMatrix<f64>, grid: &TimeGrid, n: usize) -> Result<f64> {
    let h = cs_contrast(grid);
    let r = hat_rayleigh(x_star, &h)?;
    Ok(sigma2 / n as f64 * h.norm_squared() * (1.0 - r))
}

/// Distribution of the last observed time over grid points 2..m.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DropoutLaw {
    probs: Vec<f64>,
}

impl DropoutLaw {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidSpec("dropout probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!("dropout probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Half the subjects complete; the rest leave at times 3–6 of a 0..7 grid
    /// with probabilities .05, .05, .1, .3.
    pub fn trial_default() -> Self {
        Self { probs: vec![0.0, 0.0, 0.05, 0.05, 0.1, 0.3, 0.5] }
    }

    /// Point mass on the final grid time.
    pub fn no_dropout(m: usize) -> Self {
        let mut probs = vec![0.0; m.saturating_sub(1).max(1)];
        *probs.last_mut().unwrap() = 1.0;
        Self { probs }
    }

    /// P(last time = t*_j) for j = 2..m.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if self.probs.len() + 1 != grid.len() {
            return Err(Error::InvalidSpec(format!(
                "dropout law has {} probabilities, grid needs {}",
                self.probs.len(),
                grid.len() - 1
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for DropoutLaw {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<DropoutLaw> for Vec<f64> {
    fn from(law: DropoutLaw) -> Self {
        law.probs
    }
}

/// Σ_j p_j (μ(t*_j) − μ(t*_1))/(t*_j − t*_1).
pub fn expected_cs_under_dropout(mu: impl Fn(f64) -> f64, grid: &TimeGrid, law: &DropoutLaw) -> Result<f64> {
    law.check_grid(grid)?;
    let t = grid.points();
    let base = mu(t[0]);
    Ok(law
        .probs()
        .iter()
        .zip(&t[1..])
        .map(|(p, &tj)| p * (mu(tj) - base) / (tj - t[0]))
        .sum())
}
