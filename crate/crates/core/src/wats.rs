//! Weighted average tangent slope (WATS) with a data-driven weight.
//!
//! The weight is w(t) = c·(u(t)ᵀv)² for a spline basis u, so it is
//! nonnegative by construction and c makes it integrate to one. The
//! coefficients v maximize the squared standardized distance between the
//! two groups' WATS values, a ratio of two quartic forms in v.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::basisfn::{weighted_slope_integral, Basis, BasisSpec, TimeGrid, WeightFn};
use crate::data::SubjectRecord;
use crate::error::{Error, Result};
use crate::inference::{wald_mc_test, Alternative, TestResult};
use crate::lmm::LmmFit;
use crate::optim::{self, SimplexOptions};
use crate::quadrature;
use crate::seed::{self, stream};
use crate::summaries::{SummaryEstimate, SummaryKind};

/// Cubic B-spline with two equally spaced interior knots (6 functions).
pub fn default_weight_basis(grid: &TimeGrid) -> Result<Basis> {
    let (lo, span) = (grid.baseline(), grid.span());
    Basis::new(
        &BasisSpec::Bspline { knots: Some(vec![lo + span / 3.0, lo + 2.0 * span / 3.0]) },
        lo,
        grid.last(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightModel {
    pub u_basis: Basis,
    pub v: DVector<f64>,
    /// c with c·∫(uᵀv)² = 1.
    pub norm_const: f64,
}

impl WeightModel {
    pub fn new(u_basis: Basis, v: DVector<f64>) -> Result<Self> {
        if v.len() != u_basis.dim() {
            return Err(Error::Contract(format!("v has length {}, weight basis has {}", v.len(), u_basis.dim())));
        }
        let mass = v.dot(&(gram(&u_basis)? * &v));
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::InvalidSpec("weight coefficients give a zero weight".into()));
        }
        Ok(Self { u_basis, v, norm_const: 1.0 / mass })
    }

    /// The weight that is constant over the domain.
    pub fn uniform(u_basis: Basis) -> Result<Self> {
        let c = u_basis
            .constant_coefficients()
            .ok_or_else(|| Error::InvalidSpec("weight basis does not span constants".into()))?;
        Self::new(u_basis, DVector::from_vec(c))
    }

    /// Sampled (t, w(t)) at `points` equally spaced times.
    pub fn curve(&self, points: usize) -> Result<Vec<(f64, f64)>> {
        let (lo, hi) = self.u_basis.domain();
        let step = (hi - lo) / (points.max(2) - 1) as f64;
        (0..points.max(2))
            .map(|i| {
                let t = if i + 1 == points.max(2) { hi } else { lo + step * i as f64 };
                Ok((t, self.value(t)?))
            })
            .collect()
    }

    pub fn value(&self, t: f64) -> Result<f64> {
        let u = self.u_basis.eval(t)?;
        let s: f64 = u.iter().zip(self.v.iter()).map(|(a, b)| a * b).sum();
        Ok(self.norm_const * s * s)
    }

    pub fn spec(&self) -> BasisSpec {
        self.u_basis.spec()
    }
}

impl WeightFn for WeightModel {
    fn weight(&self, t: f64) -> f64 {
        self.value(t).unwrap_or(0.0)
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.u_basis.breakpoints().to_vec()
    }
}

fn quadrature_points(a: &Basis, b: &Basis) -> Vec<(f64, f64)> {
    let (lo, hi) = a.domain();
    let mut interior = a.breakpoints().to_vec();
    interior.extend_from_slice(b.breakpoints());
    quadrature::composite_points(&quadrature::segments(lo, hi, &interior))
}

/// ∫ u uᵀ dt.
pub fn gram(u_basis: &Basis) -> Result<DMatrix<f64>> {
    let k = u_basis.dim();
    let mut g = DMatrix::zeros(k, k);
    for (t, w) in quadrature_points(u_basis, u_basis) {
        let u = DVector::from_vec(u_basis.eval(t)?);
        g += &u * u.transpose() * w;
    }
    Ok(g)
}

/// θ_w = S_wᵀβ with S_w = ∫ w g′ dt.
pub fn wats_value(weight: &WeightModel, basis: &Basis, beta: &DVector<f64>) -> Result<f64> {
    Ok(weighted_slope_integral(basis, weight)?.dot(beta))
}

/// Q_j = ∫ u uᵀ g′_j dt, one k_w×k_w matrix per fixed-effect basis function.
#[derive(Debug, Clone)]
pub struct SlopeMoments {
    pub q: Vec<DMatrix<f64>>,
}

impl SlopeMoments {
    pub fn new(u_basis: &Basis, basis: &Basis) -> Result<Self> {
        if u_basis.domain() != basis.domain() {
            return Err(Error::Contract("weight and trajectory bases must share a domain".into()));
        }
        let (k, p) = (u_basis.dim(), basis.dim());
        let mut q = vec![DMatrix::zeros(k, k); p];
        for (t, w) in quadrature_points(u_basis, basis) {
            let u = DVector::from_vec(u_basis.eval(t)?);
            let uu = &u * u.transpose() * w;
            for (qj, dj) in q.iter_mut().zip(basis.deriv(t)?) {
                *qj += &uu * dj;
            }
        }
        Ok(Self { q })
    }

    /// M_β = ∫ u uᵀ (g′ᵀβ) dt.
    pub fn m(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        self.q.iter().zip(beta.iter()).fold(DMatrix::zeros(self.q[0].nrows(), self.q[0].ncols()), |acc, (qj, b)| acc + qj * *b)
    }

    /// H_v = ∫ u uᵀ v g′ᵀ dt, with column j equal to Q_j v.
    pub fn h(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = self.q.iter().map(|qj| qj * v).collect();
        DMatrix::from_columns(&cols)
    }

    /// Hᵀv = ∫ (uᵀv)² g′ dt: the slope functional of the unnormalized weight.
    pub fn slope_vector(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.q.len(), self.q.iter().map(|qj| v.dot(&(qj * v))))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WatsMatrices {
    pub m1: DMatrix<f64>,
    pub m2: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

pub fn build_wats_matrices(
    u_basis: &Basis,
    basis: &Basis,
    v: &DVector<f64>,
    beta1: &DVector<f64>,
    beta2: &DVector<f64>,
    cov1: &DMatrix<f64>,
    cov2: &DMatrix<f64>,
) -> Result<WatsMatrices> {
    let mom = SlopeMoments::new(u_basis, basis)?;
    let (m1, m2) = (mom.m(beta1), mom.m(beta2));
    let h = mom.h(v);
    let dv = (&m1 - &m2) * v;
    let a = &dv * dv.transpose();
    let b = &h * (cov1 + cov2) * h.transpose();
    Ok(WatsMatrices { m1, m2, h, a, b })
}

/// vᵀAv / vᵀBv evaluated without forming A or B.
#[derive(Debug, Clone)]
pub struct RayleighObjective {
    moments: SlopeMoments,
    diff: DMatrix<f64>,
    cov: DMatrix<f64>,
}

impl RayleighObjective {
    pub fn new(u_basis: &Basis, fit1: &LmmFit, fit2: &LmmFit) -> Result<Self> {
        let moments = SlopeMoments::new(u_basis, fit1.spec.basis())?;
        let diff = moments.m(&(&fit1.beta - &fit2.beta));
        Ok(Self { moments, diff, cov: &fit1.cov_beta + &fit2.cov_beta })
    }

    pub fn value(&self, v: &DVector<f64>) -> f64 {
        let num = v.dot(&(&self.diff * v)).powi(2);
        let s = self.moments.slope_vector(v);
        let den = s.dot(&(&self.cov * &s));
        if den > 0.0 {
            num / den
        } else {
            f64::NAN
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightOutcome {
    pub model: WeightModel,
    pub objective: f64,
    pub uniform_objective: f64,
    /// No start beat the uniform weight; `model` is the uniform weight.
    pub fallback: bool,
}

pub const RANDOM_STARTS: usize = 10;

/// Maximizes the Rayleigh quotient by Nelder–Mead from the uniform-weight
/// coefficients and [`RANDOM_STARTS`] random unit vectors.
pub fn optimize_weight(fit1: &LmmFit, fit2: &LmmFit, u_basis: &Basis, seed: u64) -> Result<WeightOutcome> {
    if fit1.spec.basis() != fit2.spec.basis() {
        return Err(Error::Contract("group fits use different bases".into()));
    }
    let objective = RayleighObjective::new(u_basis, fit1, fit2)?;
    let uniform = WeightModel::uniform(u_basis.clone())?;
    let uniform_objective = objective.value(&uniform.v);
    let k = u_basis.dim();

    let mut starts = vec![uniform.v.clone()];
    for i in 0..RANDOM_STARTS {
        let mut rng = seed::rng_for(seed, &[stream::WEIGHT_STARTS, i as u64]);
        let z: DVector<f64> = DVector::from_iterator(k, (0..k).map(|_| StandardNormal.sample(&mut rng)));
        starts.push(&z / z.norm());
    }
    let opts = SimplexOptions { max_iterations: 5000, f_tol: 1e-10, ..SimplexOptions::default() };
    let results: Vec<(f64, DVector<f64>)> = starts
        .par_iter()
        .map(|v0| {
            let r = optim::minimize(|x: &[f64]| -objective.value(&DVector::from_column_slice(x)), v0.as_slice(), &opts);
            (-r.value, DVector::from_vec(r.x))
        })
        .collect();

    let mut best: Option<(f64, WeightModel)> = None;
    for (value, v) in results {
        if !value.is_finite() {
            continue;
        }
        let Ok(model) = WeightModel::new(u_basis.clone(), v) else { continue };
        let normalized = &model.v * model.norm_const.sqrt();
        let better = match &best {
            None => true,
            Some((bv, bm)) => {
                let tie = (value - bv).abs() <= 1e-12 * bv.abs().max(1e-300);
                value > *bv && !tie || tie && normalized.norm() < (&bm.v * bm.norm_const.sqrt()).norm()
            }
        };
        if better {
            best = Some((value, model));
        }
    }
    match best {
        Some((value, model)) if uniform_objective.is_nan() || value > uniform_objective * (1.0 + 1e-12) => Ok(WeightOutcome {
            model,
            objective: value,
            uniform_objective,
            fallback: false,
        }),
        _ => Ok(WeightOutcome {
            model: uniform,
            objective: uniform_objective,
            uniform_objective,
            fallback: true,
        }),
    }
}

/// Wald test of θ_w,1 − θ_w,2 with variance S_wᵀ(Cov₁ + Cov₂)S_w.
pub fn weighted_mc_test(fit1: &LmmFit, fit2: &LmmFit, weight: &WeightModel, alt: Alternative) -> Result<TestResult> {
    let s = weighted_slope_integral(fit1.spec.basis(), weight)?;
    let est = |fit: &LmmFit| SummaryEstimate {
        kind: SummaryKind::Wmc,
        value: s.dot(&fit.beta),
        variance: s.dot(&(&fit.cov_beta * &s)).max(0.0),
        n: fit.n_subjects,
        excluded: 0,
    };
    wald_mc_test(&est(fit1), &est(fit2), alt)
}

/// S_wᵀβ̂ + S_w(z)ᵀb̂_i, where z is the random-effect design.
pub fn individual_wats(weight: &WeightModel, fit: &LmmFit, subject: &SubjectRecord) -> Result<f64> {
    let b = match fit.blups.get(&subject.id) {
        Some(b) => b.clone(),
        None => fit.blup(subject)?,
    };
    let fixed = weighted_slope_integral(fit.spec.basis(), weight)?.dot(&fit.beta);
    let random = weighted_slope_integral(fit.spec.re_basis(), weight)?.dot(&b);
    Ok(fixed + random)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndividualWats {
    pub subject: String,
    pub group: usize,
    /// Under the uniform weight, i.e. the subject's own ATS.
    pub uniform: f64,
    pub weighted: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basisfn::make_basis;
    use crate::lmm::{LmmSpec, VarianceParams};

    fn grid() -> TimeGrid {
        TimeGrid::integer(7)
    }

    fn quad() -> Basis {
        make_basis(&BasisSpec::quadratic(), &grid()).unwrap()
    }

    fn fit_with(beta: [f64; 3], cov_scale: f64) -> LmmFit {
        let spec = LmmSpec::new(quad(), 3).unwrap();
        let params = VarianceParams { d: DMatrix::identity(3, 3), sigma2: 1.0 };
        let cov = DMatrix::from_row_slice(3, 3, &[0.1, 0.01, 0.0, 0.01, 0.02, -0.001, 0.0, -0.001, 0.0005]) * cov_scale;
        LmmFit::from_parameters(spec, DVector::from_row_slice(&beta), params, cov)
    }

    #[test]
    fn uniform_weight_gives_ats() {
        let w = WeightModel::uniform(default_weight_basis(&grid()).unwrap()).unwrap();
        let v = wats_value(&w, &quad(), &DVector::from_vec(vec![20.0, -2.0, 0.2])).unwrap();
        assert!((v + 0.6).abs() < 1e-12);
        assert_eq!(wats_value(&w, &quad(), &DVector::zeros(3)).unwrap(), 0.0);
        for (_, wt) in w.curve(201).unwrap() {
            assert!((wt - 1.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_near_endpoint_tends_to_final_slope() {
        // Last B-spline function alone is a bump at t = 7 of width 7/12.
        let knots: Vec<f64> = (1..12).map(|i| 7.0 * i as f64 / 12.0).collect();
        let u = Basis::new(&BasisSpec::Bspline { knots: Some(knots) }, 0.0, 7.0).unwrap();
        let mut v = DVector::zeros(u.dim());
        v[u.dim() - 1] = 1.0;
        let w = WeightModel::new(u, v).unwrap();
        let th = wats_value(&w, &quad(), &DVector::from_vec(vec![20.0, -2.0, 0.2])).unwrap();
        assert!((th - 0.8).abs() < 0.1, "{th}");
    }

    #[test]
    fn normalization() {
        let u = default_weight_basis(&grid()).unwrap();
        let v = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.1, 0.5, -0.7]);
        let w = WeightModel::new(u.clone(), v).unwrap();
        let mass = quadrature::integrate_composite(&quadrature::segments(0.0, 7.0, u.breakpoints()), |t| w.weight(t));
        assert!((mass - 1.0).abs() < 1e-10);
        assert!(w.curve(1000).unwrap().iter().all(|p| p.1 >= 0.0));
    }

    #[test]
    fn matrix_identities() {
        let u = default_weight_basis(&grid()).unwrap();
        let g = quad();
        let v = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.1, 0.5, -0.7]);
        let (f1, f2) = (fit_with([20.0, -2.0, 0.2], 1.0), fit_with([20.0, 1.2, -0.3], 2.0));
        let m = build_wats_matrices(&u, &g, &v, &f1.beta, &f2.beta, &f1.cov_beta, &f2.cov_beta).unwrap();
        let vm1v = v.dot(&(&m.m1 * &v));
        assert!((vm1v - v.dot(&(&m.h * &f1.beta))).abs() < 1e-8);
        let vm2v = v.dot(&(&m.m2 * &v));
        assert!((v.dot(&(&m.a * &v)) - (vm1v - vm2v).powi(2)).abs() < 1e-10);
        // vᵀBv against S_w of the normalized weight, rescaled by c².
        let w = WeightModel::new(u.clone(), v.clone()).unwrap();
        let s = weighted_slope_integral(&g, &w).unwrap();
        let direct = s.dot(&((&f1.cov_beta + &f2.cov_beta) * &s)) / w.norm_const.powi(2);
        assert!((v.dot(&(&m.b * &v)) - direct).abs() < 1e-10 * direct.abs().max(1.0));
        let same = build_wats_matrices(&u, &g, &v, &f1.beta, &f1.beta, &f1.cov_beta, &f2.cov_beta).unwrap();
        assert!(same.a.amax() == 0.0);
    }

    #[test]
    fn objective_is_scale_invariant() {
        let u = default_weight_basis(&grid()).unwrap();
        let obj = RayleighObjective::new(&u, &fit_with([20.0, -2.0, 0.2], 1.0), &fit_with([20.0, 1.2, -0.3], 1.0)).unwrap();
        let v = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.1, 0.5, -0.7]);
        let (a, b) = (obj.value(&v), obj.value(&(&v * 2.0)));
        assert!(((a - b) / a).abs() < 1e-10);
    }

    #[test]
    fn optimizer_dominates_uniform() {
        let u = default_weight_basis(&grid()).unwrap();
        let (f1, f2) = (fit_with([20.0, -2.0, 0.2], 1.0), fit_with([20.0, 1.2, -0.3], 1.0));
        let out = optimize_weight(&f1, &f2, &u, 11).unwrap();
        assert!(!out.fallback);
        assert!(out.objective >= out.uniform_objective);
        let again = optimize_weight(&f1, &f2, &u, 11).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn equal_fits_fall_back_to_uniform() {
        let u = default_weight_basis(&grid()).unwrap();
        let f = fit_with([20.0, -2.0, 0.2], 1.0);
        let out = optimize_weight(&f, &f, &u, 1).unwrap();
        assert!(out.fallback);
        assert_eq!(out.model, WeightModel::uniform(u).unwrap());
    }

    #[test]
    fn individual_wats_without_random_effect_is_group_value() {
        let f = fit_with([20.0, -2.0, 0.2], 1.0);
        let mut fit = f.clone();
        fit.blups.insert("a".into(), DVector::zeros(3));
        let s = SubjectRecord { id: "a".into(), group: 0, times: vec![0.0], values: vec![20.0] };
        let w = WeightModel::uniform(default_weight_basis(&grid()).unwrap()).unwrap();
        assert!((individual_wats(&w, &fit, &s).unwrap() + 0.6).abs() < 1e-12);
        fit.blups.insert("a".into(), DVector::from_vec(vec![1.0, 0.5, 0.1]));
        // Uniform weight: ATS of β + b = (−2 + 0.5) + (0.2 + 0.1)·7.
        assert!((individual_wats(&w, &fit, &s).unwrap() - (-1.5 + 2.1)).abs() < 1e-12);
    }
}
