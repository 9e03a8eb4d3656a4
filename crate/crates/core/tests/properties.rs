use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use wats_core::basisfn::{endpoint_slope_vector, weighted_slope_integral, Basis, BasisSpec, TimeGrid, UniformWeight};
use wats_core::data::LongitudinalDataset;
use wats_core::harness::{run_cell, Estimator, ScenarioSpec};
use wats_core::inference::{rubin_pool, two_sample_t, wald_mc_test, Alternative};
use wats_core::lmm::{FitOptions, LmmFit, LmmSpec, VarianceParams};
use wats_core::missing::{apply_missingness, impute_mvn, ImputationConfig, MissingnessSpec};
use wats_core::quadrature;
use wats_core::seed::derive;
use wats_core::simgen::{generate, NoiseSpec, ScenarioId};
use wats_core::summaries::{
    cs_contrast, hat_rayleigh, marginal_cov, var_cs_theoretical, var_mc_theoretical, DropoutLaw, SummaryEstimate,
    SummaryKind,
};
use wats_core::wats::{build_wats_matrices, default_weight_basis, RayleighObjective, SlopeMoments, WeightModel};

fn grid() -> TimeGrid {
    TimeGrid::integer(7)
}

fn x_star() -> DMatrix<f64> {
    DMatrix::from_fn(8, 3, |i, j| (i as f64).powi(j as i32))
}

fn basis_strategy() -> impl Strategy<Value = Basis> {
    prop_oneof![
        (0usize..6).prop_map(|d| Basis::polynomial(d, 0.0, 7.0).unwrap()),
        prop::collection::vec(0.1f64..6.9, 0..4).prop_map(|mut k| {
            k.sort_by(f64::total_cmp);
            k.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
            Basis::new(&BasisSpec::Bspline { knots: Some(k) }, 0.0, 7.0).unwrap()
        }),
    ]
}

fn vector(len: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-3.0f64..3.0, len).prop_map(DVector::from_vec)
}

/// A 3×3 PSD matrix L Lᵀ.
fn psd3() -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0f64..2.0, 9).prop_map(|x| {
        let l = DMatrix::from_vec(3, 3, x);
        &l * l.transpose()
    })
}

fn est(value: f64, variance: f64, n: usize) -> SummaryEstimate {
    SummaryEstimate { kind: SummaryKind::Cs, value, variance, n, excluded: 0 }
}

fn fit_from(beta: DVector<f64>, cov: DMatrix<f64>) -> LmmFit {
    let spec = LmmSpec::new(Basis::polynomial(2, 0.0, 7.0).unwrap(), 3).unwrap();
    LmmFit::from_parameters(spec, beta, VarianceParams { d: DMatrix::identity(3, 3), sigma2: 1.0 }, cov)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn uniform_weight_gives_the_endpoint_slope(basis in basis_strategy()) {
        let s = weighted_slope_integral(&basis, &UniformWeight::on(&grid())).unwrap();
        let g = endpoint_slope_vector(&basis, &grid()).unwrap();
        prop_assert!((s - g).amax() < 1e-10);
    }

    #[test]
    fn bspline_partition_of_unity(
        knots in prop::collection::vec(0.1f64..6.9, 0..5),
        ts in prop::collection::vec(0.0f64..=7.0, 50),
    ) {
        let mut k = knots;
        k.sort_by(f64::total_cmp);
        k.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
        let b = Basis::new(&BasisSpec::Bspline { knots: Some(k) }, 0.0, 7.0).unwrap();
        for t in ts {
            prop_assert!((b.eval(t).unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quadrature_is_exact_for_polynomials(
        coef in prop::collection::vec(-1.0f64..1.0, 1..40),
        a in -1.0f64..1.0,
        len in 0.01f64..2.0,
    ) {
        let b = a + len;
        let f = |t: f64| coef.iter().rev().fold(0.0, |acc, c| acc * t + c);
        let exact: f64 = coef.iter().enumerate().map(|(k, c)| c * (b.powi(k as i32 + 1) - a.powi(k as i32 + 1)) / (k + 1) as f64).sum();
        let scale: f64 = coef.iter().enumerate().map(|(k, c)| c.abs() * (b.abs().max(a.abs())).powi(k as i32 + 1)).sum::<f64>() * len;
        let got = quadrature::rule().integrate(a, b, f);
        prop_assert!((got - exact).abs() <= 1e-12 * scale.max(1.0), "{} vs {}", got, exact);
    }

    #[test]
    fn mc_never_less_efficient_than_cs(d in psd3(), sigma in 0.1f64..5.0, n in 2usize..500) {
        let s2 = sigma * sigma;
        let x = x_star();
        let cs = var_cs_theoretical(&marginal_cov(&x, &d, s2), &grid(), n).unwrap();
        let mc = var_mc_theoretical(&d, s2, &x, &DVector::from_vec(vec![0.0, 1.0, 7.0]), n).unwrap();
        let h = cs_contrast(&grid());
        let rq = hat_rayleigh(&x, &h).unwrap();
        prop_assert!((0.0..=1.0).contains(&rq));
        let gap = s2 / n as f64 * h.dot(&h) * (1.0 - rq);
        prop_assert!(((cs - mc) - gap).abs() < 1e-10 * (1.0 + cs.abs()));
        prop_assert!(mc < cs);
    }

    #[test]
    fn one_sided_p_follows_the_direction_rule(
        v1 in -3.0f64..3.0, v2 in -3.0f64..3.0, var1 in 1e-4f64..2.0, var2 in 1e-4f64..2.0, lower in any::<bool>(),
    ) {
        prop_assume!(v1 != v2);
        let alt = if lower { Alternative::FirstLower } else { Alternative::FirstHigher };
        let r = wald_mc_test(&est(v1, var1, 100), &est(v2, var2, 100), alt).unwrap();
        let in_direction = (v1 < v2) == lower;
        let expected = if in_direction { r.p_two_sided / 2.0 } else { 1.0 - r.p_two_sided / 2.0 };
        prop_assert!((r.p_one_sided - expected).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&r.p_one_sided) && (0.0..=1.0).contains(&r.p_two_sided));
        let t = two_sample_t(&est(v1, var1, 30), &est(v2, var2, 50), alt).unwrap();
        let flip = two_sample_t(&est(v1, var1, 30), &est(v2, var2, 50), alt.flipped()).unwrap();
        prop_assert!((t.p_one_sided + flip.p_one_sided - 1.0).abs() < 1e-12);
        let swapped = two_sample_t(&est(v2, var2, 50), &est(v1, var1, 30), alt).unwrap();
        prop_assert!((t.p_two_sided - swapped.p_two_sided).abs() < 1e-12);
    }

    #[test]
    fn rubin_pooling_invariants(pairs in prop::collection::vec((-5.0f64..5.0, 0.0f64..3.0), 2..30)) {
        let r = rubin_pool(&pairs).unwrap();
        let m = pairs.len() as f64;
        prop_assert!((r.pooled_variance - (r.within + (1.0 + 1.0 / m) * r.between)).abs() < 1e-12);
        prop_assert!(r.pooled_variance >= r.within);
        prop_assert!(r.between >= 0.0);
        let mut rev = pairs.clone();
        rev.reverse();
        let s = rubin_pool(&rev).unwrap();
        prop_assert!((r.pooled_estimate - s.pooled_estimate).abs() < 1e-12);
        prop_assert!((r.pooled_variance - s.pooled_variance).abs() < 1e-12);
    }

    #[test]
    fn objective_is_scale_invariant(v in vector(6), c in 0.01f64..100.0, b1 in vector(3), b2 in vector(3), cov in psd3()) {
        prop_assume!(v.norm() > 0.1);
        let u = default_weight_basis(&grid()).unwrap();
        let cov = cov + DMatrix::identity(3, 3) * 0.01;
        let obj = RayleighObjective::new(&u, &fit_from(b1, cov.clone()), &fit_from(b2, cov)).unwrap();
        let (a, b) = (obj.value(&v), obj.value(&(&v * c)));
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-300), "{} vs {}", a, b);
    }

    #[test]
    fn wats_quadratic_form_identity(v in vector(6), beta in vector(3), cov in psd3()) {
        let u = default_weight_basis(&grid()).unwrap();
        let basis = Basis::polynomial(2, 0.0, 7.0).unwrap();
        let mom = SlopeMoments::new(&u, &basis).unwrap();
        let lhs = v.dot(&(mom.m(&beta) * &v));
        let rhs = v.dot(&(mom.h(&v) * &beta));
        prop_assert!((lhs - rhs).abs() < 1e-8 * (1.0 + lhs.abs()));
        let w = build_wats_matrices(&u, &basis, &v, &beta, &DVector::zeros(3), &cov, &cov).unwrap();
        prop_assert!((&w.b - w.b.transpose()).amax() < 1e-10 * (1.0 + w.b.amax()));
        prop_assert!(SymmetricEigen::new(w.b.clone()).eigenvalues.min() >= -1e-8 * (1.0 + w.b.amax()));
    }

    #[test]
    fn weight_is_a_normalized_density(v in vector(6), c in 0.01f64..100.0) {
        prop_assume!(v.norm() > 0.1);
        let u = default_weight_basis(&grid()).unwrap();
        let w = WeightModel::new(u.clone(), v.clone()).unwrap();
        let breaks = quadrature::segments(0.0, 7.0, u.breakpoints());
        let mass = quadrature::integrate_composite(&breaks, |t| w.value(t).unwrap());
        prop_assert!((mass - 1.0).abs() < 1e-8);
        let scaled = WeightModel::new(u, v * c).unwrap();
        for (a, b) in w.curve(101).unwrap().iter().zip(scaled.curve(101).unwrap()) {
            prop_assert!(a.1 >= 0.0);
            prop_assert!((a.1 - b.1).abs() < 1e-10 * (1.0 + a.1));
        }
    }

    #[test]
    fn generation_and_seeds_are_deterministic(seed in any::<u64>(), path in prop::collection::vec(any::<u64>(), 0..4)) {
        prop_assert_eq!(derive(seed, &path), derive(seed, &path));
        let a = generate(ScenarioId::NQ1vNQ2, NoiseSpec::new(1.0).unwrap(), 3, seed).unwrap();
        let b = generate(ScenarioId::NQ1vNQ2, NoiseSpec::new(1.0).unwrap(), 3, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn missingness_strategy() -> impl Strategy<Value = MissingnessSpec> {
    prop_oneof![
        (0.0f64..=1.0).prop_map(|rate| MissingnessSpec::Mcar { rate }),
        prop::collection::vec(0.0f64..1.0, 7).prop_map(|w| {
            let total: f64 = w.iter().sum::<f64>() + 1e-9;
            let mut p: Vec<f64> = w.iter().map(|x| x / total).collect();
            let rest = 1.0 - p[..6].iter().sum::<f64>();
            p[6] = rest;
            MissingnessSpec::Dropout { law: DropoutLaw::new(p).unwrap() }
        }),
        (0.5f64..4.0, -4.0f64..2.0, any::<bool>())
            .prop_map(|(latent_sd, cutoff, include_latent)| MissingnessSpec::Mnar { latent_sd, cutoff, include_latent }),
    ]
}

fn check_pattern(data: &LongitudinalDataset, spec: &MissingnessSpec) -> Result<(), TestCaseError> {
    let g = grid();
    for s in &data.subjects {
        prop_assert_eq!(s.times.first().copied(), Some(0.0));
        if let MissingnessSpec::Dropout { .. } = spec {
            prop_assert_eq!(&s.times[..], &g.points()[..s.times.len()]);
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn missingness_keeps_baseline_and_dropout_is_monotone(spec in missingness_strategy(), seed in any::<u64>()) {
        let full = generate(ScenarioId::Q1vQ2, NoiseSpec::new(1.0).unwrap(), 20, seed).unwrap();
        let out = apply_missingness(&full, &spec, seed).unwrap();
        check_pattern(&out, &spec)?;
        prop_assert_eq!(out.subjects.len(), full.subjects.len());
    }

    #[test]
    fn imputation_preserves_observed_cells(seed in any::<u64>(), rate in 0.05f64..0.4) {
        let full = generate(ScenarioId::Q1vQ1, NoiseSpec::new(1.0).unwrap(), 25, seed).unwrap();
        let miss = apply_missingness(&full, &MissingnessSpec::Mcar { rate }, seed).unwrap();
        let cfg = ImputationConfig { m: 2, ..ImputationConfig::default() };
        for imp in impute_mvn(&miss, &cfg, seed).unwrap() {
            prop_assert!(imp.is_complete());
            for (a, b) in miss.subjects.iter().zip(&imp.subjects) {
                for (&t, &y) in a.times.iter().zip(&a.values) {
                    prop_assert_eq!(b.value_at(&imp.grid, t).map(f64::to_bits), Some(y.to_bits()));
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn rejection_rows_follow_the_binomial_formula(reps in 1usize..6, seed in any::<u64>()) {
        let mut cell = ScenarioSpec::new(ScenarioId::Q1vQ2, 1.0, 10, reps, seed);
        cell.estimators = vec![Estimator::Cs, Estimator::Mc];
        let rows = run_cell(&cell).unwrap();
        prop_assert_eq!(&rows, &run_cell(&cell).unwrap());
        for r in rows {
            prop_assert_eq!(r.completed + r.failures, reps);
            if r.completed > 0 {
                prop_assert_eq!(r.rate, r.rejections as f64 / r.completed as f64);
                prop_assert_eq!(r.se, (r.rate * (1.0 - r.rate) / r.completed as f64).sqrt());
                prop_assert!((0.0..=1.0).contains(&r.rate));
            }
            if reps == 1 && r.completed == 1 {
                prop_assert_eq!(r.se, 0.0);
            }
        }
    }
}

#[test]
fn fit_options_default_matches_the_documented_budget() {
    let o = FitOptions::default();
    assert_eq!((o.max_iterations, o.f_tol), (2000, 1e-9));
}
