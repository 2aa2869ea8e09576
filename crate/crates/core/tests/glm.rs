use epigam::basis::{BSplineSpec, RandomInterceptSpec};
use epigam::design::{DesignMatrix, DesignSpec, Frame, TermSpec};
use epigam::family::Family;
use epigam::glm::{
    estimate_nb_theta, fit_negative_binomial, fit_pirls, sandwich_covariance, FitOptions,
    PredictType, Smoothing, THETA_CAP,
};
use epigam::rng::{self, SeedStream};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn intercept_only(n: usize) -> DesignMatrix {
    DesignMatrix::from_matrix(DMatrix::from_element(n, 1, 1.0), vec!["(Intercept)".into()])
}

fn none() -> Smoothing {
    Smoothing::Fixed(vec![])
}

/// Poisson counts around a smooth curve plus a smooth design over x ∈ [0, 1].
fn smooth_problem(seed: u64, n: usize) -> (DesignMatrix, Vec<f64>) {
    let mut r = SeedStream::new(seed).substream("smooth", 0);
    let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&v| rng::poisson(&mut r, (1.5 + (6.0 * v).sin()).exp()))
        .collect();
    let frame = Frame::new(n).with_numeric("x", x).unwrap();
    let spec = DesignSpec::new().term(
        "s(x)",
        TermSpec::BSpline {
            var: "x".into(),
            spec: BSplineSpec::cubic(10, 0.0, 1.0).unwrap(),
            centered: true,
            by: None,
        },
    );
    let d = spec.compile(&frame).unwrap().matrix(&frame, None).unwrap();
    (d, y)
}

#[test]
fn intercept_only_closed_forms() {
    let o = FitOptions::default();
    let p = fit_pirls(&intercept_only(2), &[2.0, 4.0], Family::Poisson, &none(), &o).unwrap();
    assert!((p.beta[0] - 1.0986122886681098).abs() < 1e-8);

    let d = intercept_only(2).with_offset(vec![2f64.ln(); 2]).unwrap();
    let p = fit_pirls(&d, &[2.0, 4.0], Family::Poisson, &none(), &o).unwrap();
    assert!((p.beta[0] - (3f64.ln() - 2f64.ln())).abs() < 1e-8);

    let b = fit_pirls(
        &intercept_only(1),
        &[3.0],
        Family::Binomial,
        &none(),
        &FitOptions::default().with_trials(vec![10.0]),
    )
    .unwrap();
    assert!((b.beta[0] + 0.8472978603872037).abs() < 1e-8);

    let g = fit_pirls(&intercept_only(3), &[1.0, 2.0, 6.0], Family::Gaussian, &none(), &o).unwrap();
    assert!((g.beta[0] - 3.0).abs() < 1e-10);
}

#[test]
fn predictions_on_training_rows_match_stored_eta() {
    let (d, y) = smooth_problem(3, 120);
    let fit = fit_pirls(&d, &y, Family::Poisson, &Smoothing::Fixed(vec![1.0]), &FitOptions::default())
        .unwrap();
    let eta = fit.predict(&d, PredictType::Link).unwrap();
    for (a, b) in eta.iter().zip(&fit.eta) {
        assert!((a - b).abs() < 1e-10);
    }
    let mu = fit.predict(&d, PredictType::Response).unwrap();
    for (a, b) in mu.iter().zip(&fit.mu) {
        assert!((a - b).abs() <= 1e-10 * b.abs());
    }
}

#[test]
fn poisson_data_give_large_theta() {
    let mut r = SeedStream::new(2024).substream("pois", 0);
    let y: Vec<f64> = (0..2000).map(|_| rng::poisson(&mut r, 5.0)).collect();
    let fit = fit_negative_binomial(&intercept_only(2000), &y, &none(), &FitOptions::default())
        .unwrap();
    let t = fit.theta.unwrap();
    assert!(t.theta > 1e4, "theta {}", t.theta);
}

#[test]
fn nb_theta_two_is_recovered() {
    let mut r = SeedStream::new(11).substream("nb", 0);
    let y: Vec<f64> = (0..5000).map(|_| rng::negative_binomial(&mut r, 6.0, 2.0)).collect();
    let fit = fit_negative_binomial(&intercept_only(5000), &y, &none(), &FitOptions::default())
        .unwrap();
    let t = fit.theta.unwrap().theta;
    assert!((1.7..=2.3).contains(&t), "theta {t}");
    assert!((fit.dispersion - 1.0 / t).abs() < 1e-12);
}

#[test]
fn equal_counts_are_poisson_like() {
    let y = vec![7.0; 40];
    let fit = fit_negative_binomial(&intercept_only(40), &y, &none(), &FitOptions::default())
        .unwrap();
    let t = fit.theta.unwrap();
    assert!(t.poisson_like);
    assert_eq!(t.theta, THETA_CAP);
}

#[test]
fn bernoulli_sandwich_matches_model_variance() {
    let mut r = SeedStream::new(5).substream("bern", 0);
    let n = 10_000;
    let y: Vec<f64> = (0..n).map(|_| rng::binomial(&mut r, 1, 0.3) as f64).collect();
    let fit = fit_pirls(
        &intercept_only(n),
        &y,
        Family::Binomial,
        &none(),
        &FitOptions::default().with_trials(vec![1.0; n]),
    )
    .unwrap();
    let ratio = fit.cov_sandwich[(0, 0)] / fit.cov_model[(0, 0)];
    assert!((ratio - 1.0).abs() < 0.1, "ratio {ratio}");
}

#[test]
fn single_unit_sandwich_is_zero() {
    let mut r = SeedStream::new(6).substream("pois", 0);
    let y: Vec<f64> = (0..300).map(|_| rng::poisson(&mut r, 3.0)).collect();
    let d = intercept_only(300);
    let fit = fit_pirls(&d, &y, Family::Poisson, &none(), &FitOptions::default()).unwrap();
    let v = sandwich_covariance(&d, &y, &fit, &vec![0; 300], None).unwrap();
    assert!(v[(0, 0)].abs() < 1e-12 * fit.cov_model[(0, 0)], "{}", v[(0, 0)]);
}

#[test]
fn clustered_overdispersion_inflates_sandwich() {
    let mut r = SeedStream::new(8).substream("clus", 0);
    let clusters = 60;
    let per = 25;
    let mut y = Vec::new();
    let mut g = Vec::new();
    for c in 0..clusters {
        let u = 0.6 * rng::standard_normal(&mut r);
        for _ in 0..per {
            y.push(rng::poisson(&mut r, (1.0 + u).exp()));
            g.push(c);
        }
    }
    let n = y.len();
    let fit = fit_pirls(
        &intercept_only(n),
        &y,
        Family::Poisson,
        &none(),
        &FitOptions::default().with_groups(g),
    )
    .unwrap();
    assert!(fit.cov_sandwich[(0, 0)] > 2.0 * fit.cov_model[(0, 0)]);
}

#[test]
fn gcv_selection_is_reproducible() {
    let (d, y) = smooth_problem(9, 200);
    let a = fit_pirls(&d, &y, Family::Poisson, &Smoothing::Select, &FitOptions::default()).unwrap();
    let b = fit_pirls(&d, &y, Family::Poisson, &Smoothing::Select, &FitOptions::default()).unwrap();
    assert_eq!(a.lambda(), b.lambda());
    assert_eq!(a.beta, b.beta);
    assert!(a.edf_total() <= d.ncols() as f64 + 1e-9);
}

#[test]
fn ridge_limit_shrinks_random_intercepts() {
    let levels: Vec<String> = (0..8).map(|i| format!("r{i}")).collect();
    let lab: Vec<String> = (0..160).map(|i| levels[i % 8].clone()).collect();
    let mut r = SeedStream::new(4).substream("ri", 0);
    let y: Vec<f64> = (0..160)
        .map(|i| rng::poisson(&mut r, (1.0 + 0.3 * (i % 8) as f64).exp()))
        .collect();
    let frame = Frame::new(160).with_factor("district", lab).unwrap();
    let spec = DesignSpec::new().term(
        "re(district)",
        TermSpec::RandomIntercept {
            var: "district".into(),
            spec: RandomInterceptSpec::new(levels).unwrap(),
        },
    );
    let d = spec.compile(&frame).unwrap().matrix(&frame, None).unwrap();
    let fit = fit_pirls(&d, &y, Family::Poisson, &Smoothing::Fixed(vec![1e8]), &FitOptions::default())
        .unwrap();
    let max_u = fit.beta.rows(1, 8).amax();
    assert!(max_u < 1e-6, "max |u| {max_u}");
}

#[test]
fn theta_profile_beats_neighbours() {
    let mut r = SeedStream::new(12).substream("nb", 0);
    let mu = vec![4.0; 3000];
    let y: Vec<f64> = mu.iter().map(|&m| rng::negative_binomial(&mut r, m, 3.0)).collect();
    let est = estimate_nb_theta(&y, &mu);
    let ll = |t: f64| -> f64 {
        y.iter()
            .zip(&mu)
            .map(|(&y, &m)| Family::NegativeBinomial { theta: t }.log_likelihood(y, m, 1.0))
            .sum()
    };
    assert!(ll(est.theta) >= ll(est.theta * 1.01));
    assert!(ll(est.theta) >= ll(est.theta / 1.01));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, .. ProptestConfig::default() })]

    #[test]
    fn penalized_score_vanishes(seed in 0u64..1_000, lambda in 1e-3f64..1e3) {
        let (d, y) = smooth_problem(seed, 150);
        let fit = fit_pirls(&d, &y, Family::Poisson, &Smoothing::Fixed(vec![lambda]), &FitOptions::default()).unwrap();
        let resid: Vec<f64> = y.iter().zip(&fit.mu).map(|(a, b)| a - b).collect();
        let score = d.x.tr_mul(&nalgebra::DVector::from_vec(resid))
            - d.total_penalty(&[lambda]) * &fit.beta;
        let scale = y.iter().fold(1.0_f64, |a, &v| a.max(v));
        prop_assert!(score.amax() < 1e-6 * scale * y.len() as f64, "{}", score.amax());
    }

    #[test]
    fn family_scores_match_finite_differences(
        y in 0u32..40, eta in -2.0f64..3.0, m in 40u32..80, theta in 0.5f64..50.0,
    ) {
        let fams = [Family::Gaussian, Family::Poisson, Family::Binomial, Family::NegativeBinomial { theta }];
        let (y, m) = (y as f64, m as f64);
        for fam in fams {
            let f = |e: f64| fam.log_likelihood(y, fam.mean(e, m), m);
            let h = 1e-5;
            let fd = (f(eta + h) - f(eta - h)) / (2.0 * h);
            let an = fam.score_eta(y, fam.mean(eta, m), m);
            prop_assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "{:?}: {} vs {}", fam, fd, an);
        }
    }

    #[test]
    fn edf_decreases_with_lambda(seed in 0u64..1_000, a in -3.0f64..3.0, gap in 0.1f64..3.0) {
        let (d, y) = smooth_problem(seed, 120);
        let lo = 10f64.powf(a);
        let hi = 10f64.powf(a + gap);
        let o = FitOptions::default();
        let f1 = fit_pirls(&d, &y, Family::Poisson, &Smoothing::Fixed(vec![lo]), &o).unwrap();
        let f2 = fit_pirls(&d, &y, Family::Poisson, &Smoothing::Fixed(vec![hi]), &o).unwrap();
        prop_assert!(f1.blocks[0].edf >= f2.blocks[0].edf - 1e-9);
    }

    #[test]
    fn constant_offset_moves_only_the_intercept(seed in 0u64..1_000, c in -3.0f64..3.0) {
        let (d, y) = smooth_problem(seed, 120);
        let o = FitOptions::default();
        let base = fit_pirls(&d, &y, Family::Poisson, &Smoothing::Fixed(vec![2.0]), &o).unwrap();
        let shifted = d.clone().with_offset(vec![c; d.nrows()]).unwrap();
        let moved = fit_pirls(&shifted, &y, Family::Poisson, &Smoothing::Fixed(vec![2.0]), &o).unwrap();
        prop_assert!((moved.beta[0] - (base.beta[0] - c)).abs() < 1e-8);
        for j in 1..d.ncols() {
            prop_assert!((moved.beta[j] - base.beta[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn covariances_are_symmetric_psd(seed in 0u64..1_000) {
        let (d, y) = smooth_problem(seed, 100);
        let fit = fit_pirls(&d, &y, Family::Poisson, &Smoothing::Fixed(vec![1.0]), &FitOptions::default()).unwrap();
        for m in [&fit.cov_model, &fit.cov_sandwich] {
            prop_assert!((m - m.transpose()).amax() < 1e-12 * m.amax().max(1e-300));
            let (vals, _) = epigam::linalg::sym_eigen_sorted(m);
            prop_assert!(vals.iter().all(|&v| v >= -1e-10 * vals[0].abs()));
        }
        prop_assert!(fit.edf_total() <= d.ncols() as f64 + 1e-9);
    }

    #[test]
    fn poisson_samples_rarely_show_overdispersion(seed in 0u64..10_000) {
        // The profile maximum may sit below the cap by chance; when it does,
        // the likelihood gain over the Poisson limit must be insignificant.
        let mut r = SeedStream::new(seed).substream("pois", 0);
        let y: Vec<f64> = (0..2000).map(|_| rng::poisson(&mut r, 5.0)).collect();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let mu = vec![mean; y.len()];
        let est = estimate_nb_theta(&y, &mu);
        let ll = |t: f64| -> f64 {
            y.iter().map(|&v| Family::NegativeBinomial { theta: t }.log_likelihood(v, mean, 1.0)).sum()
        };
        prop_assert!(est.poisson_like || 2.0 * (ll(est.theta) - ll(THETA_CAP)) < 6.63);
    }
}
