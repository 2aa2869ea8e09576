use chrono::NaiveDate;
use epigam::glm::GlmError;
use epigam::hosp::{simulate_hospitalisations, HospSimConfig, HospSimulation};
use epigam::nowcast::*;
use epigam::rng::{self, SeedStream};
use nalgebra::DMatrix;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn day(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
}

fn record(id: usize, admission: Option<&str>, infection: Option<&str>, report: &str, age: &str) -> LineRecord {
    LineRecord {
        case_id: format!("C{id}"),
        admission_date: admission.map(day),
        infection_report_date: infection.map(day),
        report_date: day(report),
        age_group: age.into(),
        gender: "F".into(),
        district: "D1".into(),
    }
}

fn coarse() -> Vec<String> {
    NOWCAST_AGE_GROUPS.iter().map(|s| s.to_string()).collect()
}

/// Triangle drawn from Poisson totals and per-age delay pmfs; returns the
/// final totals `H[a][t−1]` alongside.
fn simulate_triangle(
    days: usize,
    dmax: usize,
    mean: impl Fn(usize, usize) -> f64,
    pmf: &[Vec<f64>],
    seed: u64,
) -> (ReportingTriangle, Vec<Vec<f64>>) {
    let mut tri = ReportingTriangle::zeros(day("2021-10-01"), days + 1, dmax, coarse()).unwrap();
    let mut h = vec![vec![0.0; days]; 2];
    let seeds = SeedStream::new(seed);
    for t in 1..=days {
        let mut r = seeds.substream("day", t as u64);
        for a in 0..2 {
            let n = rng::poisson(&mut r, mean(t, a)) as u64;
            h[a][t - 1] = n as f64;
            for (k, c) in rng::multinomial(&mut r, n, &pmf[a]).into_iter().enumerate() {
                tri.add(t, a, k + 1, c as f64);
            }
        }
    }
    (tri, h)
}

fn constant_hazard_pmf(p: f64, dmax: usize) -> Vec<f64> {
    let mut hz = vec![p; dmax];
    hz[0] = 1.0;
    pmf_from_hazards(&hz)
}

fn sim(seed: u64) -> HospSimulation {
    simulate_hospitalisations(&HospSimConfig {
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn true_daily(s: &HospSimulation, t: usize) -> f64 {
    let p = &s.final_counts;
    (0..p.districts.len())
        .flat_map(|r| (0..p.cells()).map(move |g| (r, g)))
        .map(|(r, g)| p.get(t, r, g))
        .sum()
}

#[test]
fn empty_line_list_gives_zero_triangle() {
    let tri = build_triangle(&[], day("2021-10-01"), day("2021-10-20"), 10, &AgeMap::default()).unwrap();
    assert_eq!(tri.total(), 0.0);
    assert_eq!(tri.diagnostics, TriangleDiagnostics::default());
    assert_eq!(tri.reported(1, 0), 0.0);
}

#[test]
fn worked_triangle_counts() {
    let start = day("2021-10-01");
    let recs = vec![
        record(1, Some("2021-10-01"), None, "2021-10-02", "0-14"),
        record(2, Some("2021-10-01"), None, "2021-10-02", "15-34"),
        record(3, Some("2021-10-01"), None, "2021-10-04", "35-59"),
        record(4, Some("2021-10-02"), None, "2021-10-04", "0-59"),
    ];
    let tri = build_triangle(&recs, start, day("2021-10-04"), 3, &AgeMap::default()).unwrap();
    assert_eq!(tri.now, 4);
    assert_eq!((1..=3).map(|d| tri.n(1, 0, d)).collect::<Vec<_>>(), vec![2.0, 0.0, 1.0]);
    assert_eq!(tri.cumulative(1, 0, 3), Some(3.0));
    assert!(tri.complete(1));
    assert_eq!(tri.cumulative(2, 0, 2), Some(1.0));
    assert_eq!(tri.cumulative(2, 0, 3), None);
    assert!(!tri.complete(2));
    assert_eq!(tri.diagnostics.used, 4);
}

#[test]
fn same_day_reports_count_at_delay_one() {
    let recs = vec![record(1, Some("2021-10-01"), None, "2021-10-01", "80+")];
    let tri = build_triangle(&recs, day("2021-10-01"), day("2021-10-05"), 3, &AgeMap::default()).unwrap();
    assert_eq!(tri.n(1, 1, 1), 1.0);
}

#[test]
fn delays_at_dmax_jump_at_the_end() {
    let recs: Vec<_> = (0..5)
        .map(|i| record(i, Some("2021-10-01"), None, "2021-10-05", "60-79"))
        .collect();
    let tri = build_triangle(&recs, day("2021-10-01"), day("2021-10-10"), 4, &AgeMap::default()).unwrap();
    for d in 1..4 {
        assert_eq!(tri.cumulative(1, 1, d), Some(0.0));
    }
    assert_eq!(tri.cumulative(1, 1, 4), Some(5.0));
}

#[test]
fn rejected_records_are_counted() {
    let recs = vec![
        record(1, Some("2021-10-03"), None, "2021-10-02", "0-14"),
        record(2, Some("2021-10-01"), None, "2021-10-09", "0-14"),
        record(3, Some("2021-09-20"), None, "2021-09-22", "0-14"),
        record(4, None, Some("2021-10-01"), "2021-10-02", "0-14"),
        record(5, Some("2021-10-04"), None, "2021-10-06", "0-14"),
    ];
    let tri = build_triangle(&recs, day("2021-10-01"), day("2021-10-05"), 3, &AgeMap::default()).unwrap();
    let d = &tri.diagnostics;
    assert_eq!(
        (d.negative_delay, d.beyond_dmax, d.before_window, d.missing_admission, d.not_yet_observable, d.used),
        (1, 1, 1, 1, 1, 0)
    );
    assert_eq!(tri.total(), 0.0);
}

#[test]
fn unknown_age_is_an_error() {
    let recs = vec![record(1, Some("2021-10-01"), None, "2021-10-02", "adult")];
    let err = build_triangle(&recs, day("2021-10-01"), day("2021-10-05"), 3, &AgeMap::default()).unwrap_err();
    assert!(matches!(err, NowcastError::UnknownAge(_)));
}

#[test]
fn imputation_without_missing_dates_is_identity() {
    let recs = vec![
        record(1, Some("2021-10-01"), Some("2021-09-29"), "2021-10-02", "0-14"),
        record(2, Some("2021-10-02"), None, "2021-10-03", "80+"),
    ];
    let (out, rep) = impute_admission_dates(&recs);
    assert_eq!(out, recs);
    assert_eq!((rep.records, rep.imputed, rep.dropped), (2, 0, 0));
}

#[test]
fn missing_admission_takes_the_infection_date() {
    let recs = vec![record(1, None, Some("2021-10-01"), "2021-10-04", "0-14")];
    let (out, rep) = impute_admission_dates(&recs);
    assert_eq!(out[0].admission_date, Some(day("2021-10-01")));
    assert_eq!(rep.imputed, 1);
    assert_eq!(rep.imputed_share(), 1.0);
}

#[test]
fn records_without_any_date_are_dropped() {
    let recs: Vec<_> = (0..3).map(|i| record(i, None, None, "2021-10-04", "0-14")).collect();
    let (out, rep) = impute_admission_dates(&recs);
    assert!(out.is_empty());
    assert_eq!((rep.records, rep.imputed, rep.dropped), (3, 0, 3));
}

#[test]
fn zero_hazards_give_unit_cdf() {
    let mut p = vec![0.0; 6];
    p[0] = 1.0;
    assert!(cdf_from_hazards(&p).iter().all(|&f| f == 1.0));
}

#[test]
fn worked_delay_cdf() {
    let p = [1.0, 0.25, 0.5];
    assert_eq!(cdf_from_hazards(&p), vec![0.375, 0.5, 1.0]);
    let pmf = pmf_from_hazards(&p);
    assert_eq!(pmf, vec![0.375, 0.125, 0.5]);
    assert_eq!(pmf.iter().sum::<f64>(), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn implied_pmf_sums_to_one(tail in prop::collection::vec(0.0f64..=1.0, 1..60)) {
        let mut p = vec![1.0];
        p.extend(tail);
        let pmf = pmf_from_hazards(&p);
        prop_assert!((pmf.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        let f = cdf_from_hazards(&p);
        prop_assert_eq!(*f.last().unwrap(), 1.0);
        for d in 0..f.len() - 1 {
            prop_assert!(f[d] <= f[d + 1]);
            if p[d + 1] > 0.0 && f[d + 1] > 0.0 {
                prop_assert!(f[d] < f[d + 1]);
            }
        }
    }

    #[test]
    fn cumulative_counts_are_monotone(
        events in prop::collection::vec((0i64..20, 0i64..12, 0usize..2), 0..80),
        dmax in 1usize..8,
    ) {
        let start = day("2021-10-01");
        let as_of = day("2021-10-15");
        let recs: Vec<_> = events
            .iter()
            .enumerate()
            .map(|(i, &(e, d, a))| {
                let adm = start + chrono::Duration::days(e - 3);
                LineRecord {
                    case_id: i.to_string(),
                    admission_date: Some(adm),
                    infection_report_date: None,
                    report_date: adm + chrono::Duration::days(d - 1),
                    age_group: NOWCAST_AGE_GROUPS[a].into(),
                    gender: "M".into(),
                    district: "D".into(),
                }
            })
            .collect();
        let tri = build_triangle(&recs, start, as_of, dmax, &AgeMap::default()).unwrap();
        let dg = &tri.diagnostics;
        prop_assert_eq!(
            dg.used + dg.negative_delay + dg.before_window + dg.beyond_dmax + dg.not_yet_observable,
            recs.len()
        );
        prop_assert_eq!(tri.total(), dg.used as f64);
        for a in 0..2 {
            for t in 1..=tri.days() {
                for d in 1..=dmax {
                    match tri.cumulative(t, a, d) {
                        Some(c) => {
                            prop_assert!(t + d <= tri.now);
                            if d > 1 {
                                prop_assert!(c >= tri.cumulative(t, a, d - 1).unwrap());
                            }
                        }
                        None => prop_assert!(t + d > tri.now),
                    }
                }
            }
        }
    }
}

#[test]
fn constant_hazard_recovers_the_intercept() {
    let dmax = 15;
    let pmf = constant_hazard_pmf(0.2, dmax);
    let target = (0.2f64 / 0.8).ln();
    let mut edf: Vec<(f64, f64)> = Vec::new();
    for seed in 1..=10 {
        let (tri, _) = simulate_triangle(70, dmax, |_, a| if a == 0 { 400.0 } else { 0.0 }, &[pmf.clone(), pmf.clone()], seed);
        let m = fit_delay_model(&tri, &DelayModelConfig::default()).unwrap();
        assert!(m.fit.converged);
        let j = m.fit.coefficient_index("(Intercept)").unwrap();
        let est = m.fit.beta[j];
        assert!((est - target).abs() < 4.0 * m.fit.se_model(j), "{est} vs {target}");
        let names: Vec<&str> = m.fit.blocks.iter().map(|b| b.name.as_str()).collect();
        assert_eq!(names, ["time", "delay"]);
        edf.push((m.fit.blocks[0].edf, m.fit.blocks[1].edf));
        for t in [1, 35, 70] {
            let p = m.hazards(t, 0).unwrap();
            assert!(p[1..].iter().all(|&x| (x - 0.2).abs() < 0.03), "{p:?}");
        }
    }
    // GCV undersmooths on a minority of draws; the typical fit keeps only the
    // unpenalized linear part of each smooth.
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        0.5 * (v[4] + v[5])
    };
    let time = median(edf.iter().map(|e| e.0).collect());
    let delay = median(edf.iter().map(|e| e.1).collect());
    assert!(time < 1.5 && delay < 1.5, "median edf time {time} delay {delay}");
}

#[test]
fn single_day_of_data_is_rank_deficient() {
    let dmax = 12;
    let pmf = constant_hazard_pmf(0.3, dmax);
    let (tri, _) = simulate_triangle(20, dmax, |t, a| if t == 1 && a == 0 { 500.0 } else { 0.0 }, &[pmf.clone(), pmf], 2);
    let err = fit_delay_model(&tri, &DelayModelConfig::default()).unwrap_err();
    match err {
        NowcastError::Fit(GlmError::RankDeficient { term, .. }) => {
            assert!(term == "time" || term == "(Intercept)", "{term}")
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn all_zero_trials_is_an_empty_model() {
    let tri = ReportingTriangle::zeros(day("2021-10-01"), 20, 5, coarse()).unwrap();
    assert!(matches!(fit_delay_model(&tri, &DelayModelConfig::default()), Err(NowcastError::EmptyModel)));
}

#[test]
fn longer_delays_in_the_old_group_are_detected() {
    let dmax = 40;
    let cfg = HospSimConfig::default();
    let (tri, _) = simulate_triangle(56, dmax, |_, a| if a == 0 { 150.0 } else { 120.0 }, &cfg.truth.delay_pmf, 8);
    let m = fit_delay_model(&tri, &DelayModelConfig::default()).unwrap();
    let idx: Vec<usize> = m
        .fit
        .column_names
        .iter()
        .enumerate()
        .filter(|(_, c)| c.starts_with("delay_60plus."))
        .map(|(i, _)| i)
        .collect();
    assert!(!idx.is_empty());
    let beta = nalgebra::DVector::from_iterator(idx.len(), idx.iter().map(|&i| m.fit.beta[i]));
    let v = DMatrix::from_fn(idx.len(), idx.len(), |i, j| m.fit.cov_model[(idx[i], idx[j])]);
    let tol = 1e-10 * v.amax();
    let vinv = v.clone().pseudo_inverse(tol).unwrap();
    let rank = v.svd(false, false).singular_values.iter().filter(|&&s| s > tol).count();
    let w = beta.dot(&(&vinv * &beta));
    let pval = 1.0 - ChiSquared::new(rank as f64).unwrap().cdf(w);
    assert!(pval < 1e-3, "wald {w} df {rank} p {pval}");
}

#[test]
fn fitted_cdf_is_one_at_dmax() {
    let dmax = 20;
    let pmf = constant_hazard_pmf(0.25, dmax);
    let (tri, _) = simulate_triangle(40, dmax, |_, _| 100.0, &[pmf.clone(), pmf], 3);
    let m = fit_delay_model(&tri, &DelayModelConfig::default()).unwrap();
    for t in [1, 20, 40] {
        for a in 0..2 {
            assert_eq!(m.delay_cdf(t, a, dmax).unwrap(), 1.0);
            let f = m.cdf(t, a).unwrap();
            assert!(f.windows(2).all(|w| w[0] < w[1]));
            let pmf = pmf_from_hazards(&m.hazards(t, a).unwrap());
            assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }
    assert!(matches!(m.delay_cdf(1, 0, dmax + 1), Err(NowcastError::DelayOutOfRange { .. })));
    assert!(matches!(m.delay_cdf(41, 0, 1), Err(NowcastError::DayOutOfRange { .. })));
}

/// Sets every hazard to `p` by keeping only the intercept.
fn flatten_hazards(m: &mut DelayModel, p: f64) {
    let j = m.fit.coefficient_index("(Intercept)").unwrap();
    m.fit.beta.fill(0.0);
    m.fit.beta[j] = (p / (1.0 - p)).ln();
}

#[test]
fn point_nowcast_divides_by_the_reporting_cdf() {
    let dmax = 3;
    let mut tri = ReportingTriangle::zeros(day("2021-10-04"), 12, dmax, coarse()).unwrap();
    let mut r = SeedStream::new(1).substream("fill", 0);
    for t in 1..=11 {
        for a in 0..2 {
            for d in 1..=dmax {
                tri.add(t, a, d, rng::poisson(&mut r, 20.0));
            }
        }
    }
    let mut m = fit_delay_model(&tri, &DelayModelConfig::default()).unwrap();
    flatten_hazards(&mut m, 0.625);
    // Day T − 2 has seen delays up to 2, so F = 1 − p(3) = 0.375.
    let t = tri.now - 2;
    let mut tri30 = tri.clone();
    let c = tri30.reported(t, 0);
    tri30.add(t, 0, 1, 30.0 - c);
    let res = nowcast_point(&tri30, &m).unwrap();
    let row = res.get(t, "0-59").unwrap();
    assert_eq!(row.reported, 30.0);
    assert!((row.f_hat - 0.375).abs() < 1e-12);
    assert!((row.nowcast - 80.0).abs() < 1e-9);
    let done = res.get(1, "60+").unwrap();
    assert_eq!(done.f_hat, 1.0);
    assert_eq!(done.nowcast, done.reported);
}

#[test]
fn tiny_reporting_cdf_is_flagged_unstable() {
    let dmax = 10;
    let pmf = constant_hazard_pmf(0.3, dmax);
    let (tri, _) = simulate_triangle(30, dmax, |_, _| 50.0, &[pmf.clone(), pmf], 5);
    let mut m = fit_delay_model(&tri, &DelayModelConfig::default()).unwrap();
    flatten_hazards(&mut m, 0.6);
    let res = nowcast_point(&tri, &m).unwrap();
    let last = res.get(tri.days(), "0-59").unwrap();
    assert!(last.f_hat < UNSTABLE_F);
    assert!(last.unstable);
    assert!(res.get(tri.days(), ALL_AGES).unwrap().unstable);
    assert!(!res.get(1, "0-59").unwrap().unstable);
}

#[test]
fn zero_covariance_collapses_parameter_intervals() {
    let s = sim(11);
    let mut m = fit_delay_model(&s.triangle, &DelayModelConfig::default()).unwrap();
    m.fit.cov_model.fill(0.0);
    let cfg = BootstrapConfig {
        mode: BootstrapMode::Parameter,
        ..BootstrapConfig::new(200, 3)
    };
    let res = nowcast(&s.triangle, &m, &cfg).unwrap();
    for r in &res.rows {
        let tol = 1e-9 * r.nowcast.max(1.0);
        assert!((r.ci_lo - r.nowcast).abs() < tol && (r.ci_hi - r.nowcast).abs() < tol, "{r:?}");
    }
}

#[test]
fn bootstrap_needs_enough_replicates() {
    let s = sim(12);
    let m = fit_delay_model(&s.triangle, &DelayModelConfig::default()).unwrap();
    let err = nowcast(&s.triangle, &m, &BootstrapConfig::new(MIN_BOOTSTRAP - 1, 1)).unwrap_err();
    assert!(matches!(err, NowcastError::TooFewReplicates(_)));
}

#[test]
fn bootstrap_is_seed_deterministic() {
    let s = sim(13);
    let m = fit_delay_model(&s.triangle, &DelayModelConfig::default()).unwrap();
    let a = nowcast(&s.triangle, &m, &BootstrapConfig::new(300, 9)).unwrap();
    let b = nowcast(&s.triangle, &m, &BootstrapConfig::new(300, 9)).unwrap();
    let c = nowcast(&s.triangle, &m, &BootstrapConfig::new(300, 10)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn nowcast_invariants_hold() {
    for seed in [21, 22, 23] {
        let s = sim(seed);
        let m = fit_delay_model(&s.triangle, &DelayModelConfig::default()).unwrap();
        let res = nowcast(&s.triangle, &m, &BootstrapConfig::new(1000, seed)).unwrap();
        let days = s.triangle.days();
        for r in &res.rows {
            assert!(r.nowcast >= r.reported, "{r:?}");
            assert!(r.f_hat > 0.0 && r.f_hat <= 1.0);
            assert!(r.ci_lo <= r.nowcast && r.nowcast <= r.ci_hi, "{r:?}");
        }
        for t in 1..=days {
            let parts: f64 = NOWCAST_AGE_GROUPS.iter().map(|a| res.get(t, a).unwrap().nowcast).sum();
            let all = res.get(t, ALL_AGES).unwrap();
            assert!((parts - all.nowcast).abs() <= 1e-9 * all.nowcast.max(1.0));
            if s.triangle.complete(t) {
                assert_eq!(all.nowcast, true_daily(&s, t));
                assert_eq!(all.ci_lo, all.ci_hi);
            }
            if t >= 7 {
                let roll: f64 = (t - 6..=t).map(|k| res.get(k, ALL_AGES).unwrap().nowcast).sum();
                assert!((all.rolling7_nowcast.unwrap() - roll).abs() < 1e-9 * roll.max(1.0));
            } else {
                assert!(all.rolling7_nowcast.is_none());
            }
        }
    }
}

#[test]
fn nowcasts_recover_recent_totals() {
    let mut errs = Vec::new();
    let mut daily = Vec::new();
    for rep in 0..10 {
        let s = sim(1000 + rep);
        let m = fit_delay_model(&s.triangle, &DelayModelConfig::default()).unwrap();
        let res = nowcast_point(&s.triangle, &m).unwrap();
        let days = s.triangle.days();
        let (mut est, mut truth) = (0.0, 0.0);
        for t in days - 13..=days {
            let (e, h) = (res.get(t, ALL_AGES).unwrap().nowcast, true_daily(&s, t));
            est += e;
            truth += h;
            daily.push((e - h).abs() / h);
        }
        errs.push((est - truth).abs() / truth);
    }
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    let mean_daily = daily.iter().sum::<f64>() / daily.len() as f64;
    assert!(mean < 0.10, "14-day total error {mean}");
    assert!(mean_daily < 0.10, "daily error {mean_daily}");
}

#[test]
fn bootstrap_intervals_cover_the_truth() {
    let (mut hit, mut total) = (0, 0);
    for rep in 0..100 {
        let s = sim(5000 + rep);
        let m = fit_delay_model(&s.triangle, &DelayModelConfig::default()).unwrap();
        let res = nowcast(&s.triangle, &m, &BootstrapConfig::new(1000, rep)).unwrap();
        let days = s.triangle.days();
        for t in days - 13..=days {
            let r = res.get(t, ALL_AGES).unwrap();
            let h = true_daily(&s, t);
            total += 1;
            if r.ci_lo <= h && h <= r.ci_hi {
                hit += 1;
            }
        }
    }
    let share = hit as f64 / total as f64;
    assert!((0.88..=0.99).contains(&share), "coverage {share}");
}

#[test]
fn bootstrap_quantiles_are_stable_in_b() {
    let s = sim(31);
    let m = fit_delay_model(&s.triangle, &DelayModelConfig::default()).unwrap();
    let small = nowcast(&s.triangle, &m, &BootstrapConfig::new(1000, 4)).unwrap();
    let big = bootstrap_draws(&s.triangle, &m, &BootstrapConfig::new(5000, 4)).unwrap();
    let days = s.triangle.days();
    // The B = 1000 quantile must sit inside a ±4 Monte-Carlo SE probability
    // band of the B = 5000 draws.
    let band = 4.0 * (0.025f64 * 0.975 / 1000.0).sqrt();
    for (j, &(t, a)) in big.cells.iter().enumerate() {
        if t + 14 <= days {
            continue;
        }
        let mut col: Vec<f64> = big.draws.column(j).iter().copied().collect();
        col.sort_by(f64::total_cmp);
        let row = small.get(t, &s.triangle.age_groups[a]).unwrap();
        for (q, v) in [(0.025, row.ci_lo), (0.975, row.ci_hi)] {
            let lo = quantile_sorted(&col, (q - band).max(0.0));
            let hi = quantile_sorted(&col, (q + band).min(1.0));
            assert!(lo <= v && v <= hi, "t {t} a {a} q {q}: {v} outside [{lo}, {hi}]");
        }
    }
}

#[test]
fn mismatched_triangle_is_rejected() {
    let s = sim(14);
    let m = fit_delay_model(&s.triangle, &DelayModelConfig::default()).unwrap();
    let other = ReportingTriangle::zeros(s.triangle.start, s.triangle.now - 1, s.triangle.dmax, coarse()).unwrap();
    assert!(matches!(nowcast_point(&other, &m), Err(NowcastError::Mismatch(_))));
}
