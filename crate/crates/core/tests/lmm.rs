use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wats_core::basisfn::{make_basis, BasisSpec, TimeGrid};
use wats_core::data::{LongitudinalDataset, SubjectRecord};
use wats_core::lmm::{fit_group, gls_score, loglik_joint, FitOptions, LmmFit, LmmSpec, VarianceParams};
use wats_core::missing::{apply_missingness, MissingnessSpec};
use wats_core::simgen::{generate, random_effect_cov, NoiseSpec, ScenarioId, BETA_GROUP1};

fn grid() -> TimeGrid {
    TimeGrid::integer(7)
}

fn quad_spec() -> LmmSpec {
    LmmSpec::with_default_random_effects(make_basis(&BasisSpec::quadratic(), &grid()).unwrap()).unwrap()
}

fn x_star() -> DMatrix<f64> {
    DMatrix::from_fn(8, 3, |i, j| (i as f64).powi(j as i32))
}

fn group1(n: usize, sigma: f64, seed: u64) -> LongitudinalDataset {
    generate(ScenarioId::Q1vQ1, NoiseSpec::new(sigma).unwrap(), n, seed).unwrap().single_group(0)
}

fn fit(data: &LongitudinalDataset) -> LmmFit {
    fit_group(data, 0, &quad_spec(), &FitOptions::default()).unwrap()
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

#[test]
fn woodbury_identity_on_the_design_grid() {
    let x = x_star();
    let d = random_effect_cov();
    for sigma in [0.5, 1.0, 1.5, 2.0, 2.5, 3.0] {
        let s2: f64 = sigma * sigma;
        let v = &x * &d * x.transpose() + DMatrix::identity(8, 8) * s2;
        let lhs = (x.transpose() * v.try_inverse().unwrap() * &x).try_inverse().unwrap();
        let rhs = (x.transpose() * &x).try_inverse().unwrap() * s2 + &d;
        assert!((lhs - rhs).amax() < 1e-8, "sigma {sigma}");
    }
}

#[test]
fn gls_fixed_point() {
    let data = apply_missingness(&group1(100, 1.0, 3), &MissingnessSpec::mcar_default(), 3).unwrap();
    let f = fit(&data);
    let subjects: Vec<&SubjectRecord> = data.subjects.iter().collect();
    let score = gls_score(&subjects, &f).unwrap();
    assert!(score.amax() < 1e-8, "{score}");
}

fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    x.clone().svd(true, true).solve(y, 1e-14).unwrap()
}

#[test]
fn no_random_effects_and_tiny_noise_reduce_to_ols() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let beta = DVector::from_row_slice(&BETA_GROUP1);
    let mut subjects = Vec::new();
    let (mut rows, mut ys) = (Vec::new(), Vec::new());
    for i in 0..40 {
        // Unbalanced: subject i keeps times 0..=(3 + i % 5).
        let times: Vec<f64> = (0..=(3 + i % 5)).map(|t| t as f64).collect();
        let values: Vec<f64> = times
            .iter()
            .map(|&t| {
                let e: f64 = StandardNormal.sample(&mut rng);
                beta[0] + beta[1] * t + beta[2] * t * t + 1e-7 * e
            })
            .collect();
        for (&t, &v) in times.iter().zip(&values) {
            rows.push([1.0, t, t * t]);
            ys.push(v);
        }
        subjects.push(SubjectRecord { id: format!("s{i}"), group: 0, times, values });
    }
    let data = LongitudinalDataset::new(grid(), subjects, vec!["a".into()]).unwrap();
    let f = fit(&data);
    let x = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
    let b_ols = ols(&x, &DVector::from_vec(ys));
    assert!((&f.beta - &b_ols).amax() < 1e-6, "{} vs {}", f.beta, b_ols);
}

#[test]
fn complete_balanced_cov_beta_matches_closed_form() {
    let data = group1(100, 1.0, 11);
    let f = fit(&data);
    let x = x_star();
    let v = &x * &f.d * x.transpose() + DMatrix::identity(8, 8) * f.sigma2;
    let closed = (x.transpose() * v.try_inverse().unwrap() * &x).try_inverse().unwrap() / 100.0;
    assert!((&f.cov_beta - &closed).amax() < 1e-10);
}

#[test]
fn simulated_fixed_effects_recovered() {
    let reps = 100;
    let estimates: Vec<DVector<f64>> = (0..reps).map(|r| fit(&group1(100, 1.0, 1000 + r)).beta).collect();
    for j in 0..3 {
        let xs: Vec<f64> = estimates.iter().map(|b| b[j]).collect();
        let mean = xs.iter().sum::<f64>() / reps as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let se = sd / (reps as f64).sqrt();
        assert!((mean - BETA_GROUP1[j]).abs() < 3.0 * se, "beta[{j}] mean {mean} se {se}");
    }
}

#[test]
fn fitted_variance_components_are_valid() {
    for seed in 0..20 {
        let data = apply_missingness(&group1(60, 2.0, seed), &MissingnessSpec::dropout_default(), seed).unwrap();
        let f = fit(&data);
        assert!(f.sigma2 > 0.0);
        assert!((&f.d - f.d.transpose()).amax() == 0.0);
        assert!(min_eig(&f.d) >= -1e-10);
        assert!((&f.cov_beta - f.cov_beta.transpose()).amax() < 1e-12);
        assert!(min_eig(&f.cov_beta) >= -1e-12);
    }
}

#[test]
fn likelihood_trace_is_monotone() {
    let data = group1(100, 1.5, 21);
    let opts = FitOptions { record_trace: true, ..FitOptions::default() };
    let f = fit_group(&data, 0, &quad_spec(), &opts).unwrap();
    let trace = &f.diagnostics.loglik_trace;
    assert!(trace.len() > 10);
    assert!(trace.windows(2).all(|w| w[1] >= w[0]));
    assert!((trace.last().unwrap() - f.loglik).abs() < 1e-6);
}

#[test]
fn restart_from_another_start_reaches_the_same_optimum() {
    for seed in [31, 32, 33] {
        let data = group1(100, 1.0, seed);
        let base = fit(&data);
        let opts = FitOptions {
            start: Some(VarianceParams { d: DMatrix::identity(3, 3) * 0.5, sigma2: 4.0 }),
            ..FitOptions::default()
        };
        let other = fit_group(&data, 0, &quad_spec(), &opts).unwrap();
        assert!((base.loglik - other.loglik).abs() < 1e-4, "{} vs {}", base.loglik, other.loglik);
    }
}

#[test]
fn blup_of_exact_mean_subject_is_zero() {
    let f = fit(&group1(80, 1.0, 41));
    let times: Vec<f64> = (0..8).map(|t| t as f64).collect();
    let values = times.iter().map(|&t| f.beta[0] + f.beta[1] * t + f.beta[2] * t * t).collect();
    let s = SubjectRecord { id: "x".into(), group: 0, times, values };
    assert!(f.blup(&s).unwrap().amax() < 1e-10);
}

#[test]
fn zero_random_effect_covariance_gives_zero_blups() {
    let spec = quad_spec();
    let f = LmmFit::from_parameters(
        spec,
        DVector::from_row_slice(&BETA_GROUP1),
        VarianceParams { d: DMatrix::zeros(3, 3), sigma2: 1.0 },
        DMatrix::identity(3, 3),
    );
    for s in &group1(10, 1.0, 2).subjects {
        assert_eq!(f.blup(s).unwrap().amax(), 0.0);
    }
}

#[test]
fn blups_average_to_zero() {
    let data = group1(500, 1.0, 51);
    let f = fit(&data);
    let n = f.blups.len() as f64;
    for j in 0..3 {
        let xs: Vec<f64> = f.blups.values().map(|b| b[j]).collect();
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 3.0 * sd / n.sqrt(), "component {j}: mean {mean}, sd {sd}");
    }
}

#[test]
fn separate_fits_dominate_the_pooled_fit() {
    let one = group1(60, 1.0, 61);
    let mut subjects = one.subjects.clone();
    subjects.extend(one.subjects.iter().map(|s| SubjectRecord { id: format!("{}-copy", s.id), group: 1, ..s.clone() }));
    let twice = LongitudinalDataset::new(grid(), subjects, vec!["a".into(), "b".into()]).unwrap();
    let spec = quad_spec();
    let sep = loglik_joint(&twice, &spec, false).unwrap();
    let pooled = loglik_joint(&twice, &spec, true).unwrap();
    assert!(sep - pooled >= -1e-6, "{sep} < {pooled}");

    let a = loglik_joint(&one, &spec, false).unwrap();
    let b = loglik_joint(&one, &spec, true).unwrap();
    assert!((a - b).abs() < 1e-8);
}

#[test]
fn lrt_statistic_grows_with_sample_size() {
    let spec = quad_spec();
    let medians: Vec<f64> = [50usize, 100, 200]
        .iter()
        .map(|&n| {
            let mut stats: Vec<f64> = (0..15)
                .map(|r| {
                    let d = generate(ScenarioId::Q1vQ2, NoiseSpec::new(1.0).unwrap(), n, 700 + r).unwrap();
                    2.0 * (loglik_joint(&d, &spec, false).unwrap() - loglik_joint(&d, &spec, true).unwrap())
                })
                .collect();
            stats.sort_by(f64::total_cmp);
            stats[stats.len() / 2]
        })
        .collect();
    assert!(medians[0] < medians[1] && medians[1] < medians[2], "{medians:?}");
}

#[test]
fn bspline_model_uses_three_random_effects() {
    let b = make_basis(&BasisSpec::midpoint_bspline(), &grid()).unwrap();
    let spec = LmmSpec::with_default_random_effects(b).unwrap();
    assert_eq!((spec.p(), spec.q()), (5, 3));
    let data = generate(ScenarioId::NQ1vNQ2, NoiseSpec::new(1.0).unwrap(), 100, 8).unwrap();
    let f = fit_group(&data, 0, &spec, &FitOptions::default()).unwrap();
    assert_eq!(f.d.nrows(), 3);
    assert!(min_eig(&f.d) >= -1e-10);
}
