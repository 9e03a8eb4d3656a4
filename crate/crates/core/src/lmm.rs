//! Gaussian linear mixed-effects model fitted by maximum likelihood.
//!
//! Per group k the model is `Y_i = X_i β + Z_i b_i + ε_i` with
//! `b_i ~ N(0, D)` and `ε_i ~ N(0, σ² I)`. The fixed effects are profiled out
//! by generalized least squares and σ² in closed form (writing D = σ² Δ), so
//! the simplex search runs over the Cholesky coordinates of Δ alone, taken
//! relative to the Cholesky factor of the starting value. The Cholesky
//! diagonal is unconstrained: a singular D, a common ML optimum, is then an
//! interior point rather than a limit at −∞.
//!
//! Subjects sharing an observation pattern share `V_i`, so the likelihood is
//! accumulated per pattern from the sufficient statistics Σ y and Σ y yᵀ.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::Serialize;

use crate::basisfn::{Basis, TimeGrid};
use crate::data::{LongitudinalDataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::optim::{self, SimplexOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// σ² is floored at scale·e^(−2·LOG_BOUND); keeps degenerate (noiseless) fits finite.
const LOG_BOUND: f64 = 25.0;
/// Ridge added to the Cholesky diagonal of D when some V_i is numerically singular.
const RIDGE: f64 = 1e-8;

/// Fixed-effect basis plus the random-effect design.
///
/// The random-effect design is the monomial basis `1, t, ..., t^(q-1)`. For a
/// polynomial fixed basis this is exactly the leading `q` columns of X.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmSpec {
    basis: Basis,
    re_basis: Basis,
}

impl LmmSpec {
    pub fn new(basis: Basis, re_dim: usize) -> Result<Self> {
        if re_dim == 0 {
            return Err(Error::InvalidSpec("random-effect dimension must be at least 1".into()));
        }
        if re_dim > basis.dim() {
            return Err(Error::InvalidSpec(format!(
                "random-effect dimension {re_dim} exceeds fixed-effect dimension {}",
                basis.dim()
            )));
        }
        let (lo, hi) = basis.domain();
        let re_basis = Basis::polynomial(re_dim - 1, lo, hi)?;
        Ok(Self { basis, re_basis })
    }

    /// Full random effects for polynomial bases, intercept/linear/quadratic otherwise.
    pub fn with_default_random_effects(basis: Basis) -> Result<Self> {
        let q = if basis.is_polynomial() { basis.dim() } else { 3.min(basis.dim()) };
        Self::new(basis, q)
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn re_basis(&self) -> &Basis {
        &self.re_basis
    }

    pub fn p(&self) -> usize {
        self.basis.dim()
    }

    pub fn q(&self) -> usize {
        self.re_basis.dim()
    }

    /// Free parameters of one group: β, the lower triangle of D, and σ².
    pub fn n_parameters(&self) -> usize {
        let q = self.q();
        self.p() + q * (q + 1) / 2 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceParams {
    pub d: DMatrix<f64>,
    pub sigma2: f64,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub f_tol: f64,
    /// Overrides the moment-based starting point.
    pub start: Option<VarianceParams>,
    pub record_trace: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iterations: 2000, f_tol: 1e-9, start: None, record_trace: false }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub evaluations: usize,
    /// Likelihood evaluations that needed the ridge fallback.
    pub ridge_events: usize,
    pub ridge_at_optimum: bool,
    /// Best log-likelihood after each simplex iteration.
    pub loglik_trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LmmFit {
    pub spec: LmmSpec,
    pub beta: DVector<f64>,
    pub d: DMatrix<f64>,
    pub sigma2: f64,
    pub cov_beta: DMatrix<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub n_subjects: usize,
    pub n_observations: usize,
    pub blups: BTreeMap<String, DVector<f64>>,
    pub diagnostics: FitDiagnostics,
}

impl LmmFit {
    /// A fit assembled from known parameters rather than estimated; useful for
    /// evaluating summaries at true values.
    pub fn from_parameters(spec: LmmSpec, beta: DVector<f64>, params: VarianceParams, cov_beta: DMatrix<f64>) -> Self {
        Self {
            spec,
            beta,
            d: params.d,
            sigma2: params.sigma2,
            cov_beta,
            loglik: f64::NAN,
            converged: true,
            n_subjects: 0,
            n_observations: 0,
            blups: BTreeMap::new(),
            diagnostics: FitDiagnostics::default(),
        }
    }

    /// b̂_i = D Zᵢᵀ Vᵢ⁻¹ (yᵢ − Xᵢ β̂).
    pub fn blup(&self, subject: &SubjectRecord) -> Result<DVector<f64>> {
        let x = self.spec.basis.eval_design(&subject.times)?;
        let z = self.spec.re_basis.eval_design(&subject.times)?;
        let y = DVector::from_column_slice(&subject.values);
        let v = &z * &self.d * z.transpose() + DMatrix::identity(y.len(), y.len()) * self.sigma2;
        let chol = Cholesky::new(v)
            .ok_or_else(|| Error::Rank("marginal covariance is not positive definite".into()))?;
        let resid = y - x * &self.beta;
        Ok(&self.d * z.transpose() * chol.solve(&resid))
    }

    pub fn variance_params(&self) -> VarianceParams {
        VarianceParams { d: self.d.clone(), sigma2: self.sigma2 }
    }
}

/// Per-group fits in group order.
pub fn fit_lmm(data: &LongitudinalDataset, spec: &LmmSpec) -> Result<Vec<LmmFit>> {
    (0..data.n_groups())
        .map(|k| fit_group(data, k, spec, &FitOptions::default()))
        .collect()
}

pub fn fit_group(data: &LongitudinalDataset, group: usize, spec: &LmmSpec, opts: &FitOptions) -> Result<LmmFit> {
    let subjects: Vec<&SubjectRecord> = data.group_subjects(group).collect();
    fit_subjects(&data.grid, &subjects, spec, opts)
}

/// Sum of per-group maximized log-likelihoods, or one shared fit when `pooled`.
pub fn loglik_joint(data: &LongitudinalDataset, spec: &LmmSpec, pooled: bool) -> Result<f64> {
    let opts = FitOptions::default();
    if pooled {
        let all: Vec<&SubjectRecord> = data.subjects.iter().collect();
        Ok(fit_subjects(&data.grid, &all, spec, &opts)?.loglik)
    } else {
        (0..data.n_groups())
            .map(|k| fit_group(data, k, spec, &opts).map(|f| f.loglik))
            .sum()
    }
}

#[derive(Debug, Clone)]
struct Pattern {
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    count: f64,
    sum_y: DVector<f64>,
    sum_yy: DMatrix<f64>,
}

struct Problem {
    patterns: Vec<Pattern>,
    p: usize,
    q: usize,
    n_obs: usize,
}

impl Problem {
    fn new(grid: &TimeGrid, subjects: &[&SubjectRecord], spec: &LmmSpec) -> Result<Self> {
        let mut by_key: BTreeMap<Vec<usize>, Vec<&SubjectRecord>> = BTreeMap::new();
        for s in subjects {
            let key = s
                .times
                .iter()
                .map(|&t| {
                    grid.index_of(t)
                        .ok_or_else(|| Error::InvalidSpec(format!("subject {} has off-grid time {t}", s.id)))
                })
                .collect::<Result<Vec<_>>>()?;
            by_key.entry(key).or_default().push(s);
        }
        let mut patterns = Vec::with_capacity(by_key.len());
        for (key, members) in by_key {
            let times: Vec<f64> = key.iter().map(|&i| grid.points()[i]).collect();
            let m = times.len();
            let mut sum_y = DVector::zeros(m);
            let mut sum_yy = DMatrix::zeros(m, m);
            for s in &members {
                let y = DVector::from_column_slice(&s.values);
                sum_yy += &y * y.transpose();
                sum_y += y;
            }
            patterns.push(Pattern {
                x: spec.basis.eval_design(&times)?,
                z: spec.re_basis.eval_design(&times)?,
                count: members.len() as f64,
                sum_y,
                sum_yy,
            });
        }
        Ok(Self {
            patterns,
            p: spec.p(),
            q: spec.q(),
            n_obs: subjects.iter().map(|s| s.len()).sum(),
        })
    }
}

/// GLS quantities at fixed variance parameters.
#[derive(Debug, Clone)]
pub struct GlsResult {
    pub beta: DVector<f64>,
    pub cov_beta: DMatrix<f64>,
    pub loglik: f64,
}

/// Profile the fixed effects at the given D and σ².
pub fn profile_at(grid: &TimeGrid, subjects: &[&SubjectRecord], spec: &LmmSpec, params: &VarianceParams) -> Result<GlsResult> {
    let problem = Problem::new(grid, subjects, spec)?;
    gls(&problem, &params.d, params.sigma2)
        .ok_or_else(|| Error::Rank("GLS system is singular at the given variance parameters".into()))
}

struct Accumulated {
    a: DMatrix<f64>,
    b: DVector<f64>,
    quad_yy: f64,
    logdet: f64,
}

/// Σ over subjects of XᵀV⁻¹X, XᵀV⁻¹y, yᵀV⁻¹y and log|V| with V = Z M Zᵀ + noise·I.
fn accumulate(problem: &Problem, m_re: &DMatrix<f64>, noise: f64) -> Option<Accumulated> {
    let p = problem.p;
    let mut acc = Accumulated { a: DMatrix::zeros(p, p), b: DVector::zeros(p), quad_yy: 0.0, logdet: 0.0 };
    for pat in &problem.patterns {
        let m = pat.x.nrows();
        let v = &pat.z * m_re * pat.z.transpose() + DMatrix::identity(m, m) * noise;
        let chol = Cholesky::new(v)?;
        let ld: f64 = chol.l_dirty().diagonal().iter().map(|l| l.ln()).sum::<f64>() * 2.0;
        let vinv_x = chol.solve(&pat.x);
        acc.a += pat.x.transpose() * &vinv_x * pat.count;
        acc.b += vinv_x.transpose() * &pat.sum_y;
        acc.quad_yy += chol.solve(&pat.sum_yy).trace();
        acc.logdet += pat.count * ld;
    }
    Some(acc)
}

fn gls(problem: &Problem, d: &DMatrix<f64>, sigma2: f64) -> Option<GlsResult> {
    let acc = accumulate(problem, d, sigma2)?;
    let a_chol = Cholesky::new(acc.a)?;
    let beta = a_chol.solve(&acc.b);
    let rss = acc.quad_yy - acc.b.dot(&beta);
    let loglik = -0.5 * (problem.n_obs as f64 * LN_2PI + acc.logdet + rss);
    if !loglik.is_finite() {
        return None;
    }
    Some(GlsResult { beta, cov_beta: a_chol.inverse(), loglik })
}

/// ML with σ² profiled out: D = σ² Δ, σ̂² = r(Δ)/N.
struct Profiled {
    gls: GlsResult,
    sigma2: f64,
}

fn gls_profiled(problem: &Problem, delta: &DMatrix<f64>, sigma2_floor: f64) -> Option<Profiled> {
    let acc = accumulate(problem, delta, 1.0)?;
    let a_chol = Cholesky::new(acc.a)?;
    let beta = a_chol.solve(&acc.b);
    let n = problem.n_obs as f64;
    let rss = (acc.quad_yy - acc.b.dot(&beta)).max(0.0);
    let sigma2 = (rss / n).max(sigma2_floor);
    let loglik = -0.5 * (n * (LN_2PI + sigma2.ln()) + acc.logdet + rss / sigma2);
    if !loglik.is_finite() {
        return None;
    }
    Some(Profiled {
        gls: GlsResult { beta, cov_beta: a_chol.inverse() * sigma2, loglik },
        sigma2,
    })
}

/// Maps optimizer coordinates to the relative covariance Δ = D/σ².
struct Parameterization {
    q: usize,
    base_chol: DMatrix<f64>,
}

impl Parameterization {
    fn anchored(q: usize, delta: &DMatrix<f64>) -> Option<Self> {
        Cholesky::new(delta.clone()).map(|c| Parameterization { q, base_chol: c.unpack() })
    }

    /// Coordinates of L̃ = I.
    fn identity(&self) -> Vec<f64> {
        let mut theta = vec![0.0; self.q * (self.q + 1) / 2];
        let mut k = 0;
        for i in 0..self.q {
            theta[k + i] = 1.0;
            k += i + 1;
        }
        theta
    }

    fn delta(&self, theta: &[f64], ridge: f64) -> DMatrix<f64> {
        let q = self.q;
        let mut l = DMatrix::zeros(q, q);
        let mut k = 0;
        for i in 0..q {
            for j in 0..=i {
                let t = theta[k].clamp(-1e8, 1e8);
                // √|t| on the diagonal makes Δ's eigenvalues roughly linear in
                // the coordinates, so a singular optimum is a kink rather than
                // a flat valley floor.
                l[(i, j)] = if i == j { t.abs().sqrt() + ridge } else { t };
                k += 1;
            }
        }
        let c = &self.base_chol * l;
        &c * c.transpose()
    }
}

fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
    let xtx = x.transpose() * x;
    let chol = Cholesky::new(xtx)?;
    let coef = chol.solve(&(x.transpose() * y));
    let rss = (y - x * &coef).norm_squared();
    Some((coef, rss))
}

/// Clip eigenvalues from below so the matrix admits a Cholesky factor.
pub(crate) fn clip_psd(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// σ²₀ from pooled per-subject OLS residuals; D₀ from the spread of per-subject
/// random-effect-design OLS coefficients net of their sampling noise.
fn moment_start(subjects: &[&SubjectRecord], spec: &LmmSpec, scale: f64) -> Result<VarianceParams> {
    let p = spec.p();
    let q = spec.q();
    let mut rss_sum = 0.0;
    let mut dof = 0usize;
    let mut coefs: Vec<DVector<f64>> = Vec::new();
    let mut noise_acc = DMatrix::zeros(q, q);
    for s in subjects {
        let y = DVector::from_column_slice(&s.values);
        if s.len() > p {
            let x = spec.basis.eval_design(&s.times)?;
            if let Some((_, rss)) = ols(&x, &y) {
                rss_sum += rss;
                dof += s.len() - p;
            }
        }
        if s.len() >= q {
            let z = spec.re_basis.eval_design(&s.times)?;
            if let Some(inv) = Cholesky::new(z.transpose() * &z).map(|c| c.inverse()) {
                if let Some((c, _)) = ols(&z, &y) {
                    coefs.push(c);
                    noise_acc += inv;
                }
            }
        }
    }
    let sigma2 = if dof > 0 && rss_sum > 0.0 { rss_sum / dof as f64 } else { 0.5 * scale };
    let sigma2 = sigma2.max(1e-8 * scale);
    let d = if coefs.len() > q {
        let n = coefs.len() as f64;
        let mean = coefs.iter().fold(DVector::zeros(q), |acc, c| acc + c) / n;
        let cov = coefs
            .iter()
            .fold(DMatrix::zeros(q, q), |acc, c| acc + (c - &mean) * (c - &mean).transpose())
            / (n - 1.0);
        let corrected = cov - noise_acc * (sigma2 / n);
        let top = corrected.diagonal().iter().cloned().fold(0.0, f64::max).max(scale * 1e-3);
        clip_psd(&corrected, top * 1e-2)
    } else {
        DMatrix::identity(q, q) * (0.5 * scale)
    };
    Ok(VarianceParams { d, sigma2 })
}

fn data_scale(problem: &Problem) -> f64 {
    let n: f64 = problem.patterns.iter().map(|p| p.count * p.x.nrows() as f64).sum();
    let s1: f64 = problem.patterns.iter().map(|p| p.sum_y.sum()).sum();
    let s2: f64 = problem.patterns.iter().map(|p| p.sum_yy.trace()).sum();
    let mean = s1 / n;
    let var = (s2 / n - mean * mean).max(0.0);
    if var > 0.0 {
        var
    } else {
        1e-10 * (1.0 + mean * mean)
    }
}

pub fn fit_subjects(grid: &TimeGrid, subjects: &[&SubjectRecord], spec: &LmmSpec, opts: &FitOptions) -> Result<LmmFit> {
    if subjects.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "mixed model needs at least 2 subjects per group, got {}",
            subjects.len()
        )));
    }
    let problem = Problem::new(grid, subjects, spec)?;
    if problem.n_obs <= spec.n_parameters() {
        return Err(Error::InsufficientData(format!(
            "{} observations cannot identify {} parameters",
            problem.n_obs,
            spec.n_parameters()
        )));
    }
    let xtx = problem
        .patterns
        .iter()
        .fold(DMatrix::zeros(problem.p, problem.p), |acc, pat| acc + pat.x.transpose() * &pat.x * pat.count);
    if Cholesky::new(xtx).is_none() {
        return Err(Error::Rank("pooled fixed-effect design is rank deficient".into()));
    }

    let scale = data_scale(&problem);
    let start = match &opts.start {
        Some(s) => s.clone(),
        None => moment_start(subjects, spec, scale)?,
    };
    let sigma2_start = start.sigma2.max(1e-12 * scale);
    let delta0 = clip_psd(&(&start.d / sigma2_start), 1e-10 * scale / sigma2_start);
    let param = Parameterization::anchored(problem.q, &delta0)
        .ok_or_else(|| Error::Rank("starting random-effect covariance is not positive definite".into()))?;
    let sigma2_floor = scale * (-2.0 * LOG_BOUND).exp();

    let mut ridge_events = 0usize;
    let objective = |theta: &[f64]| -> f64 {
        if let Some(r) = gls_profiled(&problem, &param.delta(theta, 0.0), sigma2_floor) {
            return -r.gls.loglik;
        }
        ridge_events += 1;
        gls_profiled(&problem, &param.delta(theta, RIDGE), sigma2_floor).map_or(f64::INFINITY, |r| -r.gls.loglik)
    };
    let simplex = SimplexOptions {
        max_iterations: opts.max_iterations,
        f_tol: opts.f_tol,
        initial_step: 0.5,
        restarts: 1,
        record_trace: opts.record_trace,
        ..SimplexOptions::default()
    };
    let result = optim::minimize(objective, &param.identity(), &simplex);

    let mut ridge_at_optimum = false;
    let mut delta = param.delta(&result.x, 0.0);
    let best = match gls_profiled(&problem, &delta, sigma2_floor) {
        Some(r) => r,
        None => {
            ridge_at_optimum = true;
            delta = param.delta(&result.x, RIDGE);
            gls_profiled(&problem, &delta, sigma2_floor)
                .ok_or_else(|| Error::Rank("marginal covariance singular at the optimum".into()))?
        }
    };
    let sigma2 = best.sigma2;
    let d = (&delta + delta.transpose()) * (0.5 * sigma2);
    let gls_at_best = best.gls;

    let mut fit = LmmFit {
        spec: spec.clone(),
        beta: gls_at_best.beta,
        d,
        sigma2,
        cov_beta: gls_at_best.cov_beta,
        loglik: gls_at_best.loglik,
        converged: result.converged,
        n_subjects: subjects.len(),
        n_observations: problem.n_obs,
        blups: BTreeMap::new(),
        diagnostics: FitDiagnostics {
            iterations: result.iterations,
            evaluations: result.evaluations,
            ridge_events,
            ridge_at_optimum,
            loglik_trace: result.trace.iter().map(|v| -v).collect(),
        },
    };
    for s in subjects {
        let b = fit.blup(s)?;
        fit.blups.insert(s.id.clone(), b);
    }
    if !fit.converged {
        return Err(Error::FitFailure { iterations: result.iterations, best: Box::new(fit) });
    }
    Ok(fit)
}

/// Σ Xᵢᵀ V̂ᵢ⁻¹ (yᵢ − Xᵢ β̂); zero at the GLS solution.
pub fn gls_score(subjects: &[&SubjectRecord], fit: &LmmFit) -> Result<DVector<f64>> {
    let mut score = DVector::zeros(fit.spec.p());
    for s in subjects {
        let x = fit.spec.basis.eval_design(&s.times)?;
        let z = fit.spec.re_basis.eval_design(&s.times)?;
        let m = s.len();
        let v = &z * &fit.d * z.transpose() + DMatrix::<f64>::identity(m, m) * fit.sigma2;
        let chol: Cholesky<f64, Dyn> =
            Cholesky::new(v).ok_or_else(|| Error::Rank("marginal covariance is singular".into()))?;
        let resid = DVector::from_column_slice(&s.values) - &x * &fit.beta;
        score += x.transpose() * chol.solve(&resid);
    }
    Ok(score)
}
