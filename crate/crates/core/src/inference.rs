//! Two-group tests on scalar summaries and Rubin pooling across imputations.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};

use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::lmm::{loglik_joint, LmmSpec};
use crate::summaries::{AncovaFit, SummaryEstimate};

/// One-sided alternative, stated in terms of the first group's summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// Group 1 changes more negatively (improvement when lower scores are better).
    #[default]
    FirstLower,
    FirstHigher,
}

impl Alternative {
    pub fn flipped(self) -> Self {
        match self {
            Alternative::FirstLower => Alternative::FirstHigher,
            Alternative::FirstHigher => Alternative::FirstLower,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "df", rename_all = "snake_case")]
pub enum Reference {
    Normal,
    StudentT(f64),
    ChiSquared(f64),
}

impl Reference {
    fn cdf_sf(&self, x: f64) -> (f64, f64) {
        match *self {
            Reference::StudentT(df) if df.is_finite() => {
                let d = StudentsT::new(0.0, 1.0, df).expect("positive df");
                (d.cdf(x), d.sf(x))
            }
            Reference::ChiSquared(df) => {
                let d = ChiSquared::new(df).expect("positive df");
                (d.cdf(x), d.sf(x))
            }
            _ => {
                let d = Normal::standard();
                (d.cdf(x), d.sf(x))
            }
        }
    }

    /// Degrees of freedom; `None` for the normal reference.
    pub fn df(&self) -> Option<f64> {
        match *self {
            Reference::Normal => None,
            Reference::StudentT(df) | Reference::ChiSquared(df) => Some(df),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    WaldMc,
    WelchT,
    AncovaT,
    Lrt,
    RubinT,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_two_sided: f64,
    pub p_one_sided: f64,
    pub method: TestMethod,
    pub reference: Reference,
    /// Zero-variance edge case resolved by convention rather than by a distribution.
    pub degenerate: bool,
}

impl TestResult {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_two_sided < alpha
    }
}

/// `favoured_sign` is the sign of the statistic under the one-sided alternative.
fn finish(statistic: f64, reference: Reference, method: TestMethod, favoured_sign: f64) -> TestResult {
    let (lower, upper) = reference.cdf_sf(statistic);
    let (p_two, p_one) = match reference {
        Reference::ChiSquared(_) => (upper, upper),
        _ => ((2.0 * lower.min(upper)).min(1.0), if favoured_sign < 0.0 { lower } else { upper }),
    };
    TestResult {
        statistic,
        p_two_sided: p_two.clamp(0.0, 1.0),
        p_one_sided: p_one.clamp(0.0, 1.0),
        method,
        reference,
        degenerate: false,
    }
}

fn sign_for(alt: Alternative) -> f64 {
    match alt {
        Alternative::FirstLower => -1.0,
        Alternative::FirstHigher => 1.0,
    }
}

/// Zero standard error: an infinite statistic when the estimates differ.
fn degenerate(diff: f64, reference: Reference, method: TestMethod, alt: Alternative) -> Result<TestResult> {
    if diff == 0.0 {
        return Err(Error::DegenerateTest("zero variance and no difference between groups".into()));
    }
    let statistic = diff.signum() * f64::INFINITY;
    let in_direction = diff.signum() == sign_for(alt);
    Ok(TestResult {
        statistic,
        p_two_sided: 0.0,
        p_one_sided: if in_direction { 0.0 } else { 1.0 },
        method,
        reference,
        degenerate: true,
    })
}

/// (v₁ − v₂)/√(var₁ + var₂) against the standard normal.
pub fn wald_mc_test(mc1: &SummaryEstimate, mc2: &SummaryEstimate, alt: Alternative) -> Result<TestResult> {
    let diff = mc1.value - mc2.value;
    let var = mc1.variance + mc2.variance;
    if var <= 0.0 {
        return degenerate(diff, Reference::Normal, TestMethod::WaldMc, alt);
    }
    Ok(finish(diff / var.sqrt(), Reference::Normal, TestMethod::WaldMc, sign_for(alt)))
}

/// Welch t on two summaries whose variances are (sample variance)/n.
pub fn two_sample_t(s1: &SummaryEstimate, s2: &SummaryEstimate, alt: Alternative) -> Result<TestResult> {
    if s1.n < 2 || s2.n < 2 {
        return Err(Error::InsufficientData("two-sample t needs at least 2 subjects per group".into()));
    }
    let diff = s1.value - s2.value;
    let var = s1.variance + s2.variance;
    if var <= 0.0 {
        return degenerate(diff, Reference::StudentT(f64::INFINITY), TestMethod::WelchT, alt);
    }
    let df = var * var / (s1.variance.powi(2) / (s1.n - 1) as f64 + s2.variance.powi(2) / (s2.n - 1) as f64);
    Ok(finish(diff / var.sqrt(), Reference::StudentT(df), TestMethod::WelchT, sign_for(alt)))
}

/// t = α₂/se(α₂) on the fit's residual df. α₂ is group 2 minus group 1, so
/// the first group being lower corresponds to a positive statistic.
pub fn ancova_test(fit: &AncovaFit, alt: Alternative) -> Result<TestResult> {
    let reference = Reference::StudentT(fit.df as f64);
    if fit.se2 <= 0.0 {
        return degenerate(fit.alpha2, reference, TestMethod::AncovaT, alt.flipped());
    }
    Ok(finish(fit.alpha2 / fit.se2.sqrt(), reference, TestMethod::AncovaT, -sign_for(alt)))
}

/// Parameters gained by fitting groups separately: (K − 1)(p + q(q+1)/2 + 1).
pub fn lrt_df(spec: &LmmSpec, groups: usize) -> usize {
    spec.n_parameters() * groups.saturating_sub(1)
}

/// 2(ℓ_separate − ℓ_pooled) against χ² with [`lrt_df`] degrees of freedom.
pub fn lrt_groups(data: &LongitudinalDataset, spec: &LmmSpec) -> Result<TestResult> {
    data.require_two_groups()?;
    let separate = loglik_joint(data, spec, false)?;
    let pooled = loglik_joint(data, spec, true)?;
    lrt_from_logliks(separate, pooled, lrt_df(spec, data.n_groups()))
}

pub fn lrt_from_logliks(separate: f64, pooled: f64, df: usize) -> Result<TestResult> {
    let statistic = 2.0 * (separate - pooled);
    if statistic < -1e-6 {
        return Err(Error::Optimization(format!(
            "separate fits fell below the pooled fit (LRT statistic {statistic:.3e})"
        )));
    }
    Ok(finish(statistic.max(0.0), Reference::ChiSquared(df as f64), TestMethod::Lrt, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiResult {
    pub m: usize,
    pub estimates: Vec<f64>,
    pub variances: Vec<f64>,
    pub pooled_estimate: f64,
    /// W̄ + (1 + 1/M)B.
    pub pooled_variance: f64,
    pub within: f64,
    pub between: f64,
    /// (M − 1)(1 + W̄/((1 + 1/M)B))²; infinite when B = 0.
    pub df_adj: f64,
}

/// Rubin's rules over per-imputation (estimate, variance) pairs.
pub fn rubin_pool(results: &[(f64, f64)]) -> Result<MiResult> {
    let m = results.len();
    if m < 2 {
        return Err(Error::Contract(format!("Rubin pooling needs at least 2 imputations, got {m}")));
    }
    let mf = m as f64;
    let estimates: Vec<f64> = results.iter().map(|r| r.0).collect();
    let variances: Vec<f64> = results.iter().map(|r| r.1).collect();
    let pooled_estimate = estimates.iter().sum::<f64>() / mf;
    let within = variances.iter().sum::<f64>() / mf;
    let between = estimates.iter().map(|e| (e - pooled_estimate).powi(2)).sum::<f64>() / (mf - 1.0);
    let inflated = (1.0 + 1.0 / mf) * between;
    let df_adj = if between > 0.0 {
        (mf - 1.0) * (1.0 + within / inflated).powi(2)
    } else {
        f64::INFINITY
    };
    Ok(MiResult {
        m,
        estimates,
        variances,
        pooled_estimate,
        pooled_variance: within + inflated,
        within,
        between,
        df_adj,
    })
}

/// t test of a pooled group difference (group 1 minus group 2) on `df_adj`.
pub fn rubin_test(pooled: &MiResult, alt: Alternative) -> Result<TestResult> {
    let reference = if pooled.df_adj.is_finite() {
        Reference::StudentT(pooled.df_adj)
    } else {
        Reference::Normal
    };
    if pooled.pooled_variance <= 0.0 {
        return degenerate(pooled.pooled_estimate, reference, TestMethod::RubinT, alt);
    }
    let t = pooled.pooled_estimate / pooled.pooled_variance.sqrt();
    Ok(finish(t, reference, TestMethod::RubinT, sign_for(alt)))
}
