//! Trajectory and weight bases: raw monomials and clamped cubic B-splines.
//!
//! A [`Basis`] knows its domain and answers value, first-derivative and
//! definite-integral queries. Integrals against arbitrary weights go through
//! the composite Gauss–Legendre rule with one segment per knot interval, so
//! every piecewise-polynomial integrand in the crate is integrated exactly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature;

/// Relative slack when checking that a time lies in the basis domain.
const DOMAIN_EPS: f64 = 1e-9;

/// Design times shared by all subjects, strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "time grid needs at least two points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidSpec("time grid contains a non-finite point".into()));
        }
        if let Some(w) = points.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSpec(format!(
                "time grid must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self { points })
    }

    /// Integer times `0, 1, ..., last`.
    pub fn integer(last: usize) -> Self {
        Self::new((0..=last).map(|t| t as f64).collect()).expect("integer grid is valid")
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn baseline(&self) -> f64 {
        self.points[0]
    }

    pub fn last(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn span(&self) -> f64 {
        self.last() - self.baseline()
    }

    /// Position of `t` on the grid, tolerant to rounding in parsed input.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let tol = 1e-9 * (1.0 + self.span().abs());
        self.points.iter().position(|&p| (p - t).abs() <= tol)
    }
}

/// Configuration-level description of a basis. The domain comes from the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BasisSpec {
    /// Monomials `1, t, ..., t^degree`.
    Polynomial { degree: usize },
    /// Clamped cubic B-spline. `None` places a single knot at the domain midpoint.
    Bspline {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        knots: Option<Vec<f64>>,
    },
}

impl BasisSpec {
    pub fn quadratic() -> Self {
        BasisSpec::Polynomial { degree: 2 }
    }

    pub fn linear() -> Self {
        BasisSpec::Polynomial { degree: 1 }
    }

    pub fn midpoint_bspline() -> Self {
        BasisSpec::Bspline { knots: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Polynomial { degree: usize },
    CubicBSpline { interior: Vec<f64>, knots: Vec<f64> },
}

const CUBIC: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    kind: Kind,
    lo: f64,
    hi: f64,
}

/// Build a basis on the grid's domain.
pub fn make_basis(spec: &BasisSpec, grid: &TimeGrid) -> Result<Basis> {
    Basis::new(spec, grid.baseline(), grid.last())
}

impl Basis {
    pub fn new(spec: &BasisSpec, lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidSpec(format!("invalid basis domain [{lo}, {hi}]")));
        }
        let kind = match spec {
            BasisSpec::Polynomial { degree } => Kind::Polynomial { degree: *degree },
            BasisSpec::Bspline { knots } => {
                let interior = knots.clone().unwrap_or_else(|| vec![0.5 * (lo + hi)]);
                if let Some(k) = interior.iter().find(|&&k| !(k > lo && k < hi)) {
                    return Err(Error::InvalidSpec(format!(
                        "knot {k} is not strictly inside [{lo}, {hi}]"
                    )));
                }
                if interior.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::InvalidSpec("interior knots must be strictly increasing".into()));
                }
                let mut full = vec![lo; CUBIC + 1];
                full.extend_from_slice(&interior);
                full.extend(std::iter::repeat_n(hi, CUBIC + 1));
                Kind::CubicBSpline { interior, knots: full }
            }
        };
        Ok(Self { kind, lo, hi })
    }

    pub fn polynomial(degree: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(&BasisSpec::Polynomial { degree }, lo, hi)
    }

    /// The specification that rebuilds this basis on its domain.
    pub fn spec(&self) -> BasisSpec {
        match &self.kind {
            Kind::Polynomial { degree } => BasisSpec::Polynomial { degree: *degree },
            Kind::CubicBSpline { interior, .. } => BasisSpec::Bspline { knots: Some(interior.clone()) },
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            Kind::Polynomial { degree } => degree + 1,
            Kind::CubicBSpline { interior, .. } => CUBIC + 1 + interior.len(),
        }
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn is_polynomial(&self) -> bool {
        matches!(self.kind, Kind::Polynomial { .. })
    }

    /// Interior breakpoints where the basis loses smoothness.
    pub fn breakpoints(&self) -> &[f64] {
        match &self.kind {
            Kind::Polynomial { .. } => &[],
            Kind::CubicBSpline { interior, .. } => interior,
        }
    }

    fn check(&self, t: f64) -> Result<f64> {
        let tol = DOMAIN_EPS * (1.0 + (self.hi - self.lo).abs());
        if !t.is_finite() || t < self.lo - tol || t > self.hi + tol {
            return Err(Error::Domain { t, lo: self.lo, hi: self.hi });
        }
        Ok(t.clamp(self.lo, self.hi))
    }

    /// g(t) written into `out` (length `dim()`).
    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let t = self.check(t)?;
        match &self.kind {
            Kind::Polynomial { .. } => {
                let mut v = 1.0;
                for o in out.iter_mut() {
                    *o = v;
                    v *= t;
                }
            }
            Kind::CubicBSpline { knots, .. } => {
                let vals = bspline_values(knots, CUBIC, t, self.hi);
                out.copy_from_slice(&vals);
            }
        }
        Ok(())
    }

    /// g'(t) written into `out`.
    pub fn deriv_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let t = self.check(t)?;
        match &self.kind {
            Kind::Polynomial { .. } => {
                out[0] = 0.0;
                let mut v = 1.0;
                for (k, o) in out.iter_mut().enumerate().skip(1) {
                    *o = k as f64 * v;
                    v *= t;
                }
            }
            Kind::CubicBSpline { knots, .. } => {
                let lower = bspline_values(knots, CUBIC - 1, t, self.hi);
                for (j, o) in out.iter_mut().enumerate() {
                    let left = ratio(lower[j], knots[j + CUBIC] - knots[j]);
                    let right = ratio(lower[j + 1], knots[j + CUBIC + 1] - knots[j + 1]);
                    *o = CUBIC as f64 * (left - right);
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    pub fn deriv(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.deriv_into(t, &mut out)?;
        Ok(out)
    }

    /// ∫_a^b g_j(t) dt for every basis function.
    pub fn integral(&self, a: f64, b: f64) -> Result<Vec<f64>> {
        let a = self.check(a)?;
        let b = self.check(b)?;
        match &self.kind {
            Kind::Polynomial { .. } => Ok((0..self.dim())
                .map(|k| {
                    let e = k as i32 + 1;
                    (b.powi(e) - a.powi(e)) / e as f64
                })
                .collect()),
            Kind::CubicBSpline { .. } => {
                let (lo, hi, sign) = if a <= b { (a, b, 1.0) } else { (b, a, -1.0) };
                let breaks = quadrature::segments(lo, hi, self.breakpoints());
                let mut acc = vec![0.0; self.dim()];
                let mut g = vec![0.0; self.dim()];
                for (t, w) in quadrature::composite_points(&breaks) {
                    self.eval_into(t, &mut g)?;
                    for (s, gi) in acc.iter_mut().zip(&g) {
                        *s += sign * w * gi;
                    }
                }
                Ok(acc)
            }
        }
    }

    /// Design matrix with row i equal to g(times_i)ᵀ.
    pub fn eval_design(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let p = self.dim();
        let mut x = DMatrix::zeros(times.len(), p);
        let mut row = vec![0.0; p];
        for (i, &t) in times.iter().enumerate() {
            self.eval_into(t, &mut row)?;
            for (j, v) in row.iter().enumerate() {
                x[(i, j)] = *v;
            }
        }
        Ok(x)
    }

    /// Coefficients c with g(t)ᵀc ≡ 1, when the basis spans constants.
    pub fn constant_coefficients(&self) -> Option<Vec<f64>> {
        match &self.kind {
            Kind::Polynomial { .. } => {
                let mut c = vec![0.0; self.dim()];
                c[0] = 1.0;
                Some(c)
            }
            // Partition of unity.
            Kind::CubicBSpline { .. } => Some(vec![1.0; self.dim()]),
        }
    }
}

#[inline]
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// All B-spline basis values of the given degree on a clamped knot vector (Cox–de Boor).
fn bspline_values(knots: &[f64], degree: usize, t: f64, hi: f64) -> Vec<f64> {
    let n0 = knots.len() - 1;
    let mut n = vec![0.0; n0];
    // Half-open spans, except the right end which belongs to the last non-empty span.
    let span = if t >= hi {
        (0..n0).rev().find(|&i| knots[i] < knots[i + 1]).unwrap_or(0)
    } else {
        (0..n0)
            .find(|&i| knots[i] <= t && t < knots[i + 1])
            .unwrap_or(0)
    };
    n[span] = 1.0;
    for d in 1..=degree {
        for i in 0..(n0 - d) {
            let left = ratio((t - knots[i]) * n[i], knots[i + d] - knots[i]);
            let right = ratio((knots[i + d + 1] - t) * n[i + 1], knots[i + d + 1] - knots[i + 1]);
            n[i] = left + right;
        }
    }
    // Basis of `degree` on the cubic knot vector has knots.len() - degree - 1 members.
    n.truncate(knots.len() - degree - 1);
    n
}

/// A nonnegative weight over the basis domain.
pub trait WeightFn {
    fn weight(&self, t: f64) -> f64;

    /// Points where the weight is not smooth, for quadrature segmentation.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

impl<F: Fn(f64) -> f64> WeightFn for F {
    fn weight(&self, t: f64) -> f64 {
        self(t)
    }
}

/// w(t) = 1/(hi − lo).
#[derive(Debug, Clone, Copy)]
pub struct UniformWeight {
    pub lo: f64,
    pub hi: f64,
}

impl UniformWeight {
    pub fn on(grid: &TimeGrid) -> Self {
        Self { lo: grid.baseline(), hi: grid.last() }
    }
}

impl WeightFn for UniformWeight {
    fn weight(&self, _t: f64) -> f64 {
        1.0 / (self.hi - self.lo)
    }
}

/// S_w with components ∫ w(t) g'_j(t) dt over the basis domain.
pub fn weighted_slope_integral<W: WeightFn + ?Sized>(basis: &Basis, weight: &W) -> Result<DVector<f64>> {
    let (lo, hi) = basis.domain();
    let mut breaks_in = basis.breakpoints().to_vec();
    breaks_in.extend(weight.breakpoints());
    let breaks = quadrature::segments(lo, hi, &breaks_in);
    let p = basis.dim();
    let mut acc = DVector::zeros(p);
    let mut d = vec![0.0; p];
    for (t, w) in quadrature::composite_points(&breaks) {
        let wt = weight.weight(t);
        if wt == 0.0 {
            continue;
        }
        basis.deriv_into(t, &mut d)?;
        for (s, di) in acc.iter_mut().zip(&d) {
            *s += w * wt * di;
        }
    }
    Ok(acc)
}

/// G = (g(t*_m) − g(t*_1)) / (t*_m − t*_1).
pub fn endpoint_slope_vector(basis: &Basis, grid: &TimeGrid) -> Result<DVector<f64>> {
    let first = basis.eval(grid.baseline())?;
    let last = basis.eval(grid.last())?;
    let span = grid.span();
    Ok(DVector::from_iterator(
        basis.dim(),
        last.iter().zip(&first).map(|(l, f)| (l - f) / span),
    ))
}
