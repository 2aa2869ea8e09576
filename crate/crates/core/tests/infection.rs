use epigam::glm::{fit_negative_binomial, FitOptions, GlmError, Smoothing};
use epigam::infection::*;
use epigam::rng::SeedStream;
use nalgebra::DMatrix;

fn labels(p: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{p}{i}")).collect()
}

fn study(replicates: usize) -> CdrStudyConfig {
    CdrStudyConfig {
        replicates,
        ..Default::default()
    }
}

#[test]
fn per_age_fit_matches_direct_fit() {
    let cfg = CdrStudyConfig {
        districts: 6,
        weeks: 40,
        lag: vec![vec![0.6]],
        ..Default::default()
    };
    let (panel, pop, _) = simulate_study_panel(&cfg, &SeedStream::new(1)).unwrap();
    let fits = fit_infection_model(&panel, &pop, 1.0).unwrap();
    let d = build_infection_design(&panel, &pop, 0, 1.0).unwrap();
    let direct = fit_negative_binomial(&d.design, &d.y, &Smoothing::Fixed(vec![]), &FitOptions::default())
        .unwrap();
    assert!((&fits[0].fit.beta - &direct.beta).amax() < 1e-12);
}

#[test]
fn simulated_lag_coefficients_are_recovered() {
    let cfg = study(100);
    let master = SeedStream::new(77);
    let mut hits = 0;
    let mut total = 0;
    for i in 0..cfg.replicates {
        let (panel, pop, truth) = simulate_study_panel(&cfg, &master.child("rep", i as u64)).unwrap();
        let fits = fit_infection_model(&panel, &pop, 1.0).unwrap();
        for row in lag_table(&fits, &panel.age_groups) {
            let a = panel.age_groups.iter().position(|g| *g == row.model_age_group).unwrap();
            let k = panel.age_groups.iter().position(|g| *g == row.covariate_age_group).unwrap();
            total += 1;
            if (row.estimate - truth.lag[a][k]).abs() <= 3.0 * row.se_sandwich {
                hits += 1;
            }
        }
    }
    let share = hits as f64 / total as f64;
    assert!(share >= 0.95, "share {share}");
}

#[test]
fn zero_panel_is_rank_deficient() {
    let panel = WeeklyPanel::zeros(labels("W", 5), labels("D", 4), labels("A", 2));
    let pop = PopulationTable {
        pop: DMatrix::from_element(4, 2, 1e4),
    };
    let err = fit_infection_model(&panel, &pop, 1.0).unwrap_err();
    match err {
        InfectionError::Fit {
            source: GlmError::RankDeficient { term, .. },
            ..
        } => assert!(term.starts_with("lag[")),
        other => panic!("unexpected {other:?}"),
    }
}

fn flat_truth(r: usize, w: usize, c: f64, theta: Option<f64>) -> InfectionTruth {
    InfectionTruth {
        intercepts: vec![vec![c]; w],
        lag: vec![vec![0.0]],
        theta,
        delta: 1.0,
        initial: vec![vec![0.0]; r],
    }
}

#[test]
fn zero_lag_simulation_has_analytic_mean() {
    let (r, w) = (300, 11);
    let pop = PopulationTable {
        pop: DMatrix::from_element(r, 1, 5e4),
    };
    let c = -7.0;
    let theta = 4.0;
    let panel = simulate_infection_panel(
        &flat_truth(r, w, c, Some(theta)),
        &pop,
        labels("W", w),
        labels("D", r),
        labels("A", 1),
        &SeedStream::new(3),
    )
    .unwrap();
    let mean = 5e4 * c.exp();
    let draws: Vec<f64> = (1..w).flat_map(|wi| (0..r).map(move |ri| (wi, ri))).map(|(wi, ri)| panel.get(wi, ri, 0)).collect();
    let m = draws.iter().sum::<f64>() / draws.len() as f64;
    let se = ((mean + mean * mean / theta) / draws.len() as f64).sqrt();
    assert!((m - mean).abs() < 3.0 * se, "{m} vs {mean}");
}

#[test]
fn simulation_is_deterministic_and_poisson_limit_is_equidispersed() {
    let (r, w) = (400, 6);
    let pop = PopulationTable {
        pop: DMatrix::from_element(r, 1, 1e4),
    };
    let sim = |seed| {
        simulate_infection_panel(
            &flat_truth(r, w, -6.0, None),
            &pop,
            labels("W", w),
            labels("D", r),
            labels("A", 1),
            &SeedStream::new(seed),
        )
        .unwrap()
    };
    let a = sim(9);
    assert_eq!(a, sim(9));
    let draws: Vec<f64> = (1..w).flat_map(|wi| (0..r).map(move |ri| (wi, ri))).map(|(wi, ri)| a.get(wi, ri, 0)).collect();
    let m = draws.iter().sum::<f64>() / draws.len() as f64;
    let v = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
    assert!((v / m - 1.0).abs() < 0.1, "dispersion {}", v / m);
}

#[test]
fn explosive_dynamics_abort() {
    let r = 2;
    let pop = PopulationTable {
        pop: DMatrix::from_element(r, 1, 1e6),
    };
    let truth = InfectionTruth {
        intercepts: vec![vec![0.0]; 30],
        lag: vec![vec![1.5]],
        theta: None,
        delta: 1.0,
        initial: vec![vec![100.0]; r],
    };
    let err = simulate_infection_panel(&truth, &pop, labels("W", 30), labels("D", r), labels("A", 1), &SeedStream::new(1))
        .unwrap_err();
    assert!(matches!(err, InfectionError::Explosion { .. }));
}

#[test]
fn half_detection_halves_totals() {
    let (panel, _, _) = simulate_study_panel(&study(1), &SeedStream::new(5)).unwrap();
    let (w, _, a) = panel.dims();
    let thinned = apply_cdr_thinning(&panel, &CdrConfig::constant(w, a, 0.5, 200.0, 8)).unwrap();
    let ratio = thinned.total() / panel.total();
    assert!((0.48..=0.52).contains(&ratio), "{ratio}");
}

#[test]
fn full_detection_changes_nothing() {
    let cfg = CdrStudyConfig {
        districts: 60,
        weeks: 8,
        ..Default::default()
    };
    let (panel, pop, _) = simulate_study_panel(&cfg, &SeedStream::new(6)).unwrap();
    let (w, _, a) = panel.dims();
    let same = apply_cdr_thinning(&panel, &CdrConfig::constant(w, a, 1.0, f64::INFINITY, 1)).unwrap();
    let report = cdr_invariance_report(&panel, &same, &pop, 1.0).unwrap();
    assert!(report.coefficients.iter().all(|c| c.difference.abs() < 1e-8));
    assert!(!report.bias_flag);
}

#[test]
fn fitted_means_follow_the_linear_predictor() {
    let (panel, pop, _) = simulate_study_panel(&study(1), &SeedStream::new(10)).unwrap();
    let fits = fit_infection_model(&panel, &pop, 1.0).unwrap();
    for f in &fits {
        for (e, m) in f.fit.eta.iter().zip(&f.fit.mu) {
            assert!((e.exp() - m).abs() <= 1e-10 * m);
        }
    }
}

#[test]
fn intercepts_absorb_constant_under_reporting() {
    // Near-deterministic ratios keep errors-in-variables attenuation small.
    let cfg = CdrStudyConfig {
        replicates: 4,
        concentration: 5000.0,
        adversarial_half_count: None,
        ..Default::default()
    };
    let s = run_cdr_study(&cfg).unwrap();
    for r in &s.replicates {
        for (m, e) in r.mean_intercept_shift.iter().zip(&r.expected_intercept_shift) {
            assert!((m - e).abs() < 0.03, "{m} vs {e}");
        }
    }
}

#[test]
fn outcome_dependent_reporting_is_flagged() {
    let cfg = CdrStudyConfig {
        replicates: 3,
        ..Default::default()
    };
    let s = run_cdr_study(&cfg).unwrap();
    assert!(s.adversarial_share_flagged.unwrap() >= 0.5);
    assert!(s.share_within_3se >= 0.9);
}
