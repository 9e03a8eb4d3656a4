//! Missing-data mechanisms and multivariate-normal multiple imputation.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basisfn::TimeGrid;
use crate::data::{LongitudinalDataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::lmm::clip_psd;
use crate::seed::{self, stream, SimRng};
use crate::summaries::DropoutLaw;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mechanism", rename_all = "lowercase")]
pub enum MissingnessSpec {
    None,
    /// Each non-baseline cell deleted independently.
    Mcar { rate: f64 },
    /// Last observed time drawn per subject; everything later is deleted.
    Dropout { law: DropoutLaw },
    /// Non-baseline cells deleted where a latent z ~ N(0, latent_sd²) falls below `cutoff`.
    Mnar {
        latent_sd: f64,
        cutoff: f64,
        /// Add z to the values that remain observed.
        #[serde(default)]
        include_latent: bool,
    },
}

impl MissingnessSpec {
    pub fn mcar_default() -> Self {
        MissingnessSpec::Mcar { rate: 0.15 }
    }

    pub fn dropout_default() -> Self {
        MissingnessSpec::Dropout { law: DropoutLaw::trial_default() }
    }

    /// Latent sd 3 and cutoff −1.15, about 35% of non-baseline cells missing.
    pub fn mnar_default() -> Self {
        MissingnessSpec::Mnar { latent_sd: 3.0, cutoff: -1.15, include_latent: false }
    }

    /// Latent sd 3 with the cutoff moved so that 15% of non-baseline cells go missing.
    pub fn mnar_fifteen_percent() -> Self {
        let z = Normal::standard().inverse_cdf(0.15);
        MissingnessSpec::Mnar { latent_sd: 3.0, cutoff: 3.0 * z, include_latent: false }
    }

    pub fn label(&self) -> &'static str {
        match self {
            MissingnessSpec::None => "none",
            MissingnessSpec::Mcar { .. } => "mcar",
            MissingnessSpec::Dropout { .. } => "dropout",
            MissingnessSpec::Mnar { .. } => "mnar",
        }
    }

    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        match self {
            MissingnessSpec::None => Ok(()),
            MissingnessSpec::Mcar { rate } if !(0.0..=1.0).contains(rate) => {
                Err(Error::InvalidSpec(format!("MCAR rate {rate} outside [0, 1]")))
            }
            MissingnessSpec::Mcar { .. } => Ok(()),
            MissingnessSpec::Dropout { law } => law.check_grid(grid),
            MissingnessSpec::Mnar { latent_sd, cutoff, .. } => {
                if !(*latent_sd > 0.0 && latent_sd.is_finite()) || !cutoff.is_finite() {
                    return Err(Error::InvalidSpec("MNAR needs a positive latent sd and a finite cutoff".into()));
                }
                Ok(())
            }
        }
    }
}

/// Deletes cells according to `spec`. Baseline is never deleted. Each subject
/// draws from its own stream keyed by its position in the dataset.
pub fn apply_missingness(data: &LongitudinalDataset, spec: &MissingnessSpec, seed: u64) -> Result<LongitudinalDataset> {
    spec.validate(&data.grid)?;
    if *spec == MissingnessSpec::None {
        return Ok(data.clone());
    }
    let baseline = data.grid.baseline();
    let is_base = |t: f64| data.grid.index_of(t) == data.grid.index_of(baseline);
    let subjects = data
        .subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = seed::rng_for(seed, &[stream::MISSINGNESS, i as u64]);
            let mut out = SubjectRecord { times: Vec::new(), values: Vec::new(), ..s.clone() };
            let last_time = match spec {
                MissingnessSpec::Dropout { law } => Some(draw_last_time(law, &data.grid, &mut rng)),
                _ => None,
            };
            for (&t, &y) in s.times.iter().zip(&s.values) {
                let (keep, value) = match spec {
                    MissingnessSpec::None => (true, y),
                    MissingnessSpec::Mcar { rate } => {
                        let u: f64 = rng.random();
                        (is_base(t) || u >= *rate, y)
                    }
                    MissingnessSpec::Dropout { .. } => (t <= last_time.unwrap() + 1e-9, y),
                    MissingnessSpec::Mnar { latent_sd, cutoff, include_latent } => {
                        if is_base(t) {
                            (true, y)
                        } else {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            let z = latent_sd * e;
                            (z >= *cutoff, if *include_latent { y + z } else { y })
                        }
                    }
                };
                if keep {
                    out.times.push(t);
                    out.values.push(value);
                }
            }
            out
        })
        .collect();
    LongitudinalDataset::new(data.grid.clone(), subjects, data.groups.clone())
}

fn draw_last_time(law: &DropoutLaw, grid: &TimeGrid, rng: &mut SimRng) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (p, &t) in law.probs().iter().zip(&grid.points()[1..]) {
        acc += p;
        if u < acc {
            return t;
        }
    }
    grid.last()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImputationConfig {
    pub m: usize,
    pub max_em_iters: usize,
    /// Largest absolute parameter change, relative to the covariance scale, that counts as converged.
    pub em_tol: f64,
    /// Ridge prior weight: off-diagonal covariances are divided by 1 + ridge
    /// in every M-step, which keeps the estimate away from singular matrices.
    pub ridge: f64,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        Self { m: 20, max_em_iters: 1000, em_tol: 1e-7, ridge: 0.01 }
    }
}

/// Mean and covariance of the grid-outcome vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MvnParams {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

const EIGEN_FLOOR: f64 = 1e-8;

/// Rows are subjects, columns grid times; `None` marks a missing cell.
type Table = Vec<Vec<Option<f64>>>;

fn to_table(grid: &TimeGrid, subjects: &[&SubjectRecord]) -> Result<Table> {
    subjects
        .iter()
        .map(|s| {
            let mut row = vec![None; grid.len()];
            for (&t, &y) in s.times.iter().zip(&s.values) {
                let j = grid
                    .index_of(t)
                    .ok_or_else(|| Error::InvalidSpec(format!("time {t} of subject {} is off the grid", s.id)))?;
                row[j] = Some(y);
            }
            Ok(row)
        })
        .collect()
}

struct Pattern {
    obs: Vec<usize>,
    mis: Vec<usize>,
    rows: Vec<usize>,
}

fn patterns(table: &Table) -> Vec<Pattern> {
    let mut by_mask: BTreeMap<Vec<bool>, Vec<usize>> = BTreeMap::new();
    for (i, row) in table.iter().enumerate() {
        by_mask.entry(row.iter().map(Option::is_some).collect()).or_default().push(i);
    }
    by_mask
        .into_iter()
        .map(|(mask, rows)| Pattern {
            obs: (0..mask.len()).filter(|&j| mask[j]).collect(),
            mis: (0..mask.len()).filter(|&j| !mask[j]).collect(),
            rows,
        })
        .collect()
}

fn sub(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Regression of missing on observed coordinates: (coefficients, residual covariance).
fn conditional(params: &MvnParams, obs: &[usize], mis: &[usize]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let s_oo = sub(&params.cov, obs, obs);
    let s_mo = sub(&params.cov, mis, obs);
    let s_mm = sub(&params.cov, mis, mis);
    if obs.is_empty() {
        return Ok((DMatrix::zeros(mis.len(), 0), s_mm));
    }
    let chol = Cholesky::new(s_oo.clone())
        .or_else(|| Cholesky::new(clip_psd(&s_oo, EIGEN_FLOOR)))
        .ok_or_else(|| Error::Rank("observed-block covariance is singular".into()))?;
    let coef = chol.solve(&s_mo.transpose()).transpose();
    let resid = s_mm - &coef * s_mo.transpose();
    Ok((coef, resid))
}

fn conditional_mean(params: &MvnParams, coef: &DMatrix<f64>, row: &[Option<f64>], obs: &[usize], mis: &[usize]) -> DVector<f64> {
    let dev = DVector::from_iterator(obs.len(), obs.iter().map(|&j| row[j].unwrap() - params.mean[j]));
    let base = DVector::from_iterator(mis.len(), mis.iter().map(|&j| params.mean[j]));
    base + coef * dev
}

fn initial_params(table: &Table, m: usize) -> Result<MvnParams> {
    let mut mean = DVector::zeros(m);
    let mut var = DVector::zeros(m);
    for j in 0..m {
        let col: Vec<f64> = table.iter().filter_map(|r| r[j]).collect();
        if col.is_empty() {
            return Err(Error::InsufficientData(format!("no observed values at grid position {j}")));
        }
        let mu = col.iter().sum::<f64>() / col.len() as f64;
        mean[j] = mu;
        var[j] = col.iter().map(|y| (y - mu).powi(2)).sum::<f64>() / col.len() as f64;
    }
    let floor = var.max().max(1.0) * EIGEN_FLOOR;
    Ok(MvnParams { mean, cov: DMatrix::from_diagonal(&var.map(|v| v.max(floor))) })
}

/// EM estimate of the mean and covariance of rows with missing cells.
fn em(table: &Table, m: usize, cfg: &ImputationConfig, start: Option<&MvnParams>) -> Result<MvnParams> {
    let n = table.len() as f64;
    let pats = patterns(table);
    let mut params = match start {
        Some(p) => p.clone(),
        None => initial_params(table, m)?,
    };
    let mut change = f64::INFINITY;
    for _ in 0..cfg.max_em_iters {
        let mut t1 = DVector::zeros(m);
        let mut t2 = DMatrix::zeros(m, m);
        for pat in &pats {
            let (coef, resid) = conditional(&params, &pat.obs, &pat.mis)?;
            for &i in &pat.rows {
                let row = &table[i];
                let mut x = DVector::zeros(m);
                for &j in &pat.obs {
                    x[j] = row[j].unwrap();
                }
                if !pat.mis.is_empty() {
                    let cm = conditional_mean(&params, &coef, row, &pat.obs, &pat.mis);
                    for (k, &j) in pat.mis.iter().enumerate() {
                        x[j] = cm[k];
                    }
                }
                t1 += &x;
                t2 += &x * x.transpose();
            }
            for (a, &ja) in pat.mis.iter().enumerate() {
                for (b, &jb) in pat.mis.iter().enumerate() {
                    t2[(ja, jb)] += resid[(a, b)] * pat.rows.len() as f64;
                }
            }
        }
        let mean = t1 / n;
        let mut cov = t2 / n - &mean * mean.transpose();
        if cfg.ridge > 0.0 {
            let diag = cov.diagonal();
            cov /= 1.0 + cfg.ridge;
            cov.set_diagonal(&diag);
        }
        let scale = cov.diagonal().max().abs().max(1e-300);
        let cov = clip_psd(&cov, EIGEN_FLOOR * scale);
        change = (&mean - &params.mean).amax().max((&cov - &params.cov).amax()) / scale.sqrt().max(scale);
        params = MvnParams { mean, cov };
        if change < cfg.em_tol {
            return Ok(params);
        }
    }
    Err(Error::EmNotConverged { iterations: cfg.max_em_iters, last_change: change })
}

/// EM fit of the grid-outcome distribution for one group.
pub fn em_mvn(data: &LongitudinalDataset, group: usize, cfg: &ImputationConfig) -> Result<MvnParams> {
    let subjects: Vec<&SubjectRecord> = data.group_subjects(group).collect();
    em(&to_table(&data.grid, &subjects)?, data.grid.len(), cfg, None)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root)
}

/// `cfg.m` completed copies of `data`. Within each group, every imputation
/// refits the MVN by EM on a bootstrap resample of subjects and then draws
/// each subject's missing cells from the conditional normal given its
/// observed cells. Observed cells are copied unchanged.
pub fn impute_mvn(data: &LongitudinalDataset, cfg: &ImputationConfig, seed: u64) -> Result<Vec<LongitudinalDataset>> {
    if cfg.m < 2 {
        return Err(Error::Contract(format!("multiple imputation needs M >= 2, got {}", cfg.m)));
    }
    if !(cfg.ridge >= 0.0 && cfg.ridge.is_finite()) {
        return Err(Error::Contract(format!("ridge weight must be finite and >= 0, got {}", cfg.ridge)));
    }
    let baseline = data.grid.baseline();
    if let Some(s) = data.subjects.iter().find(|s| s.first().map(|f| f.0) != Some(baseline)) {
        return Err(Error::InsufficientData(format!("subject {} has no baseline observation", s.id)));
    }
    if data.is_complete() {
        return Ok(vec![data.clone(); cfg.m]);
    }
    let m = data.grid.len();
    let grid_times = data.grid.points().to_vec();
    let mut outputs: Vec<Vec<SubjectRecord>> = vec![data.subjects.clone(); cfg.m];

    for group in 0..data.n_groups() {
        let members: Vec<usize> = (0..data.subjects.len()).filter(|&i| data.subjects[i].group == group).collect();
        if members.iter().all(|&i| data.subjects[i].len() == m) {
            continue;
        }
        let refs: Vec<&SubjectRecord> = members.iter().map(|&i| &data.subjects[i]).collect();
        let table = to_table(&data.grid, &refs)?;
        let full = em(&table, m, cfg, None)?;
        let pats = patterns(&table);

        for (k, out) in outputs.iter_mut().enumerate() {
            let mut rng = seed::rng_for(seed, &[stream::IMPUTATION, group as u64, k as u64]);
            let params = bootstrap_params(&table, m, cfg, &full, &mut rng)?;
            for pat in pats.iter().filter(|p| !p.mis.is_empty()) {
                let (coef, resid) = conditional(&params, &pat.obs, &pat.mis)?;
                let root = sqrt_psd(&resid);
                for &r in &pat.rows {
                    let row = &table[r];
                    let cm = conditional_mean(&params, &coef, row, &pat.obs, &pat.mis);
                    let z = DVector::from_iterator(pat.mis.len(), (0..pat.mis.len()).map(|_| StandardNormal.sample(&mut rng)));
                    let draw = cm + &root * z;
                    let mut values = vec![0.0; m];
                    for &j in &pat.obs {
                        values[j] = row[j].unwrap();
                    }
                    for (a, &j) in pat.mis.iter().enumerate() {
                        values[j] = draw[a];
                    }
                    let target = &mut out[members[r]];
                    target.times = grid_times.clone();
                    target.values = values;
                }
            }
        }
    }
    outputs
        .into_iter()
        .map(|subjects| LongitudinalDataset::new(data.grid.clone(), subjects, data.groups.clone()))
        .collect()
}

/// EM on a bootstrap resample; redraws when a resample leaves a grid time unobserved.
fn bootstrap_params(table: &Table, m: usize, cfg: &ImputationConfig, full: &MvnParams, rng: &mut SimRng) -> Result<MvnParams> {
    let n = table.len();
    let mut last_err = None;
    for _ in 0..20 {
        let resample: Table = (0..n).map(|_| table[rng.random_range(0..n)].clone()).collect();
        let covered = (0..m).all(|j| resample.iter().any(|r| r[j].is_some()));
        if !covered {
            continue;
        }
        match em(&resample, m, cfg, Some(full)) {
            Ok(p) => return Ok(p),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::InsufficientData("bootstrap resamples never covered every grid time".into())))
}
