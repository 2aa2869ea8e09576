use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use epigam::hosp::{simulate_hospitalisations, HospSimConfig};
use epigam::nowcast::{build_triangle, AgeMap};
use epigam_cli::error::CliError;
use epigam_cli::io;
use epigam_cli::output::Outputs;
use epigam_cli::synth::{self, Scenario};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/minimal")
}

fn epigam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epigam"))
        .args(args)
        .env_remove("EPIGAM_THREADS")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Copies the minimal fixture into a temporary directory.
fn fixture_copy() -> TempDir {
    let dir = TempDir::new().unwrap();
    for e in fs::read_dir(fixture()).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), dir.path().join(e.file_name())).unwrap();
    }
    dir
}

fn issues(e: CliError) -> Vec<epigam_cli::Issue> {
    match e {
        CliError::Invalid(v) => v,
        other => panic!("expected validation issues, got {other}"),
    }
}

fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn minimal_fixture_validates() {
    let out = epigam(&["validate", p(&fixture())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["ok"], true);
    let kinds: Vec<&str> = report["bundles"].as_array().unwrap().iter().map(|b| b["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["infection", "line_list", "hosp", "icu"]);
}

#[test]
fn loaders_fill_grids_and_round_beds() {
    let f = fixture();
    let inf = io::load_infection(&f.join(io::INFECTION_PANEL), &f.join(io::INFECTION_POPULATION)).unwrap();
    assert_eq!(inf.panel.dims(), (3, 2, 2));
    assert_eq!(inf.zero_filled, 1);
    assert_eq!(inf.panel.weeks, ["2021-W01", "2021-W02", "2021-W03"]);
    assert_eq!(inf.panel.age_groups, ["old", "young"]);
    assert_eq!(inf.panel.get(1, 1, 0), 0.0);
    assert_eq!(inf.population.pop[(1, 1)], 9000.0);

    let icu = io::load_icu(&f.join(io::ICU_PANEL), &f.join(io::ICU_INCIDENCE), &f.join(io::COORDS)).unwrap();
    assert_eq!(icu.panel.beds(1, 1), [4.0, 2.0, 4.0]);
    assert_eq!(icu.rounded, 2);
    assert_eq!(icu.zero_filled_incidence, 3 * 2 * 4 - 7);
    assert_eq!(icu.panel.incidence(0, 0), [20.5, 31.0, 12.25, 8.0]);

    let as_of = chrono::NaiveDate::from_ymd_opt(2021, 11, 4).unwrap();
    let h = io::load_hosp(
        &f.join(io::HOSP_PANEL),
        &f.join(io::HOSP_POPULATION),
        &f.join(io::COORDS),
        None,
        as_of,
    )
    .unwrap();
    assert_eq!(h.panel.days(), 3);
    assert_eq!(h.panel.ages, ["15-34", "60-79"]);
    assert_eq!(h.panel.genders, ["M", "F"]);
    assert_eq!(h.zero_filled, 3 * 2 * 4 - 3);
    let g = h.panel.cell_index("15-34", "F").unwrap();
    assert_eq!(h.panel.get(2, 1, g), 2.0);

    let lines = io::load_line_list(&f.join(io::LINE_LIST)).unwrap();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[1].admission_date, None);
    assert_eq!(lines[2].infection_report_date, None);
}

#[test]
fn negative_count_is_rejected_with_its_line() {
    let d = fixture_copy();
    let path = d.path().join(io::INFECTION_PANEL);
    let text = fs::read_to_string(&path).unwrap().replace("2021-W02,A,old,6", "2021-W02,A,old,-6");
    fs::write(&path, text).unwrap();
    let found = issues(io::load_infection(&path, &d.path().join(io::INFECTION_POPULATION)).err().unwrap());
    assert_eq!(found.len(), 1);
    assert_eq!(found[0].line, Some(7));
    assert_eq!(found[0].column.as_deref(), Some("count"));
    assert!(found[0].reason.contains("negative"));

    let out = epigam(&["validate", p(d.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "validation");
    assert_eq!(err["issues"][0]["line"], 7);
}

#[test]
fn unknown_district_is_a_foreign_key_error() {
    let d = fixture_copy();
    let path = d.path().join(io::ICU_PANEL);
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("2021-11-15,Zeta,1,1,1\n");
    fs::write(&path, text).unwrap();
    let found = issues(
        io::load_icu(&path, &d.path().join(io::ICU_INCIDENCE), &d.path().join(io::COORDS))
            .err()
            .unwrap(),
    );
    assert_eq!(found.len(), 1);
    assert!(found[0].reason.contains("'Zeta'"), "{:?}", found[0]);
    assert_eq!(found[0].line, Some(8));

    let ll = d.path().join(io::LINE_LIST);
    let mut text = fs::read_to_string(&ll).unwrap();
    text.push_str("c9,2021-11-02,,2021-11-03,15-34,M,Nowhere\n");
    fs::write(&ll, text).unwrap();
    let report = io::validate_dir(d.path()).unwrap();
    assert!(!report.ok);
    let line_list = report.bundles.iter().find(|b| b.kind == "line_list").unwrap();
    assert!(line_list.issues[0].reason.contains("'Nowhere'"));
}

#[test]
fn duplicate_keys_are_rejected() {
    let d = fixture_copy();
    let path = d.path().join(io::HOSP_PANEL);
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("2021-11-01,A,60-79,M,4\n");
    fs::write(&path, text).unwrap();
    let as_of = chrono::NaiveDate::from_ymd_opt(2021, 11, 4).unwrap();
    let found = issues(
        io::load_hosp(
            &path,
            &d.path().join(io::HOSP_POPULATION),
            &d.path().join(io::COORDS),
            None,
            as_of,
        )
        .err()
        .unwrap(),
    );
    assert_eq!(found.len(), 1);
    assert!(found[0].reason.contains("duplicate key"));
    assert!(found[0].reason.contains("first on line 2"));
    assert_eq!(found[0].line, Some(5));

    let ll = d.path().join(io::LINE_LIST);
    let mut text = fs::read_to_string(&ll).unwrap();
    text.push_str("c1,2021-11-02,,2021-11-03,15-34,M,A\n");
    fs::write(&ll, text).unwrap();
    assert!(issues(io::load_line_list(&ll).err().unwrap())[0].reason.contains("case_id c1"));
}

#[test]
fn schema_problems_are_reported() {
    let d = fixture_copy();
    fs::write(d.path().join(io::INFECTION_POPULATION), "district,age,population\nA,young,1\n").unwrap();
    let found = issues(
        io::load_infection(&d.path().join(io::INFECTION_PANEL), &d.path().join(io::INFECTION_POPULATION))
            .err()
            .unwrap(),
    );
    assert_eq!(found[0].column.as_deref(), Some("age_group"));
    assert_eq!(found[0].reason, "missing column");

    let ll = d.path().join(io::LINE_LIST);
    let text = fs::read_to_string(&ll).unwrap().replace("2021-11-03,60-79", "03/11/2021,60-79");
    fs::write(&ll, text).unwrap();
    let found = issues(io::load_line_list(&ll).err().unwrap());
    assert_eq!(found[0].column.as_deref(), Some("registry_report_date"));
    assert!(found[0].reason.contains("ISO 8601"));
}

#[test]
fn icu_week_gaps_are_listed() {
    let d = fixture_copy();
    let path = d.path().join(io::ICU_PANEL);
    let text = fs::read_to_string(&path).unwrap().replace("2021-11-08", "2021-11-29");
    fs::write(&path, text).unwrap();
    let inc = d.path().join(io::ICU_INCIDENCE);
    fs::write(&inc, "week,district,age_group,incidence_per_100k\n").unwrap();
    let found = issues(io::load_icu(&path, &inc, &d.path().join(io::COORDS)).err().unwrap());
    assert!(found[0].reason.contains("2021-11-08, 2021-11-22"), "{:?}", found[0]);
}

#[test]
fn infection_week_gaps_are_listed() {
    let d = fixture_copy();
    let path = d.path().join(io::INFECTION_PANEL);
    let text = fs::read_to_string(&path).unwrap().replace("2021-W03", "2021-W05");
    fs::write(&path, text).unwrap();
    let found = issues(io::load_infection(&path, &d.path().join(io::INFECTION_POPULATION)).err().unwrap());
    assert_eq!(found.len(), 1);
    assert_eq!(found[0].reason, "missing weeks: 2021-W03, 2021-W04");

    let text = fs::read_to_string(&path).unwrap().replace("2021-W0", "week ");
    fs::write(&path, text).unwrap();
    assert!(io::load_infection(&path, &d.path().join(io::INFECTION_POPULATION)).is_ok());
}

#[test]
fn usage_errors_exit_with_two() {
    let out = epigam(&["validate", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = epigam(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = epigam(&["simulate", "--scenario", "icu", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2), "seed is mandatory");
    let out = Command::new(env!("CARGO_BIN_EXE_epigam"))
        .args(["validate", p(&fixture())])
        .env("EPIGAM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(epigam(&["--help"]).status.code(), Some(0));
}

#[test]
fn pipeline_errors_exit_with_one() {
    let d = TempDir::new().unwrap();
    let f = fixture();
    let out = epigam(&[
        "icu",
        "forecast",
        "--panel",
        p(&f.join(io::ICU_PANEL)),
        "--incidence",
        p(&f.join(io::ICU_INCIDENCE)),
        "--coords",
        p(&f.join(io::COORDS)),
        "--seed",
        "1",
        "--out",
        p(d.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "pipeline");
    assert!(err["message"].as_str().unwrap().contains("rolling window"));
}

#[test]
fn simulation_is_byte_identical_under_a_seed() {
    for s in ["infection", "nowcast", "icu"] {
        let a = TempDir::new().unwrap();
        let b = TempDir::new().unwrap();
        let c = TempDir::new().unwrap();
        let out = |d: &TempDir, seed: &str| {
            let o = epigam(&["simulate", "--scenario", s, "--seed", seed, "--out", p(d.path())]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            dir_files(d.path())
                .into_iter()
                .filter(|(n, _)| n != "manifest.json")
                .collect::<Vec<_>>()
        };
        let (fa, fb, fc) = (out(&a, "5"), out(&b, "5"), out(&c, "6"));
        assert_eq!(fa, fb, "{s}");
        assert_ne!(fa, fc, "{s}");
    }
}

#[test]
fn generated_bundles_validate() {
    for scenario in [Scenario::Infection, Scenario::Nowcast, Scenario::Icu] {
        for seed in [1, 2] {
            let d = TempDir::new().unwrap();
            let mut out = Outputs::create(d.path()).unwrap();
            synth::generate(scenario, seed, None, &mut out).unwrap();
            let report = io::validate_dir(d.path()).unwrap();
            assert!(report.ok, "{scenario:?} {seed}: {report:?}");
        }
    }
}

/// Analytic NB means `pop · exp(intercept)` with zero lags.
#[test]
fn zero_lag_infection_scenario_matches_analytic_means() {
    let d = TempDir::new().unwrap();
    let mut out = Outputs::create(d.path()).unwrap();
    let params = serde_json::json!({
        "lag": [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
        "districts": 200,
        "weeks": 12,
    });
    synth::generate(Scenario::Infection, 11, Some(&params), &mut out).unwrap();
    let b = io::load_infection(&d.path().join(io::INFECTION_PANEL), &d.path().join(io::INFECTION_POPULATION)).unwrap();
    let truth: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join(synth::TRUTH)).unwrap()).unwrap();
    let theta = truth["truth"]["theta"].as_f64().unwrap();
    let intercepts = &truth["truth"]["intercepts"];
    let (w, r, a) = b.panel.dims();
    let mut z_max: f64 = 0.0;
    for wi in 1..w {
        for ai in 0..a {
            let int = intercepts[wi][ai].as_f64().unwrap();
            let (mut obs, mut mean, mut var) = (0.0, 0.0, 0.0);
            for ri in 0..r {
                let mu = b.population.pop[(ri, ai)] * int.exp();
                obs += b.panel.get(wi, ri, ai);
                mean += mu;
                var += mu + mu * mu / theta;
            }
            let z = (obs - mean) / var.sqrt();
            assert!(z.abs() <= 3.0, "week {wi} age {ai}: z = {z}");
            z_max = z_max.max(z.abs());
        }
    }
    assert!(z_max > 0.0);
}

#[test]
fn nowcast_scenario_round_trips_the_triangle() {
    let d = TempDir::new().unwrap();
    let mut out = Outputs::create(d.path()).unwrap();
    let params = serde_json::json!({ "districts": 20, "days": 40 });
    synth::generate(Scenario::Nowcast, 21, Some(&params), &mut out).unwrap();
    let truth: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join(synth::TRUTH)).unwrap()).unwrap();
    let cfg: HospSimConfig = serde_json::from_value(truth["params"].clone()).unwrap();
    let sim = simulate_hospitalisations(&cfg).unwrap();
    let records = io::load_line_list(&d.path().join(io::LINE_LIST)).unwrap();
    assert_eq!(records, sim.line_list);
    let tri = build_triangle(&records, cfg.start, sim.as_of(), cfg.dmax, &AgeMap::default()).unwrap();
    let expect = &sim.triangle;
    assert_eq!((tri.start, tri.now, tri.dmax), (expect.start, expect.now, expect.dmax));
    assert_eq!(tri.age_groups, expect.age_groups);
    for t in 1..=tri.days() {
        for a in 0..tri.age_groups.len() {
            for dd in 1..=tri.dmax {
                assert_eq!(tri.n(t, a, dd), expect.n(t, a, dd), "t={t} a={a} d={dd}");
            }
        }
    }
    assert!(tri.total() > 0.0);
    assert_eq!(tri.total(), expect.total());
}

fn simulate_into(dir: &Path, scenario: &str, seed: &str, params: Option<&str>) {
    let mut args = vec!["simulate", "--scenario", scenario, "--seed", seed, "--out", p(dir)];
    let pf = dir.join("params.json");
    if let Some(json) = params {
        fs::create_dir_all(dir).unwrap();
        fs::write(&pf, json).unwrap();
        args.extend(["--params", p(&pf)]);
    }
    let o = epigam(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn icu_forecast_is_deterministic() {
    let d = TempDir::new().unwrap();
    let data = d.path().join("data");
    simulate_into(&data, "icu", "3", Some(r#"{"districts": 25, "weeks": 13}"#));
    let run = |name: &str, threads: &str| {
        let out = d.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_epigam"))
            .args([
                "icu",
                "forecast",
                "--panel",
                p(&data.join(io::ICU_PANEL)),
                "--incidence",
                p(&data.join(io::ICU_INCIDENCE)),
                "--coords",
                p(&data.join(io::COORDS)),
                "--window",
                "8",
                "--seed",
                "7",
                "--out",
                p(&out),
            ])
            .env("EPIGAM_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out.join("score_table.csv")).unwrap()
    };
    let a = run("a", "1");
    assert_eq!(a, run("b", "1"));
    assert_eq!(a, run("c", "3"));
    let text = String::from_utf8(a).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("variant,omitted_effects,average_score,p_value"));
    assert_eq!(lines.count(), 5);
}

#[derive(serde::Deserialize)]
struct NowcastCsv {
    age_group: String,
    reported: f64,
    #[serde(rename = "F_hat")]
    f_hat: f64,
    nowcast: f64,
    ci_lo: f64,
    ci_hi: f64,
    rolling7_nowcast: Option<f64>,
    rolling7_ci_lo: Option<f64>,
    rolling7_ci_hi: Option<f64>,
}

#[test]
fn nowcast_and_hosp_commands_run_end_to_end() {
    let d = TempDir::new().unwrap();
    let data = d.path().join("data");
    simulate_into(&data, "nowcast", "9", Some(r#"{"districts": 12}"#));
    let nc = d.path().join("nowcast");
    let o = epigam(&[
        "nowcast",
        "fit",
        "--linelist",
        p(&data.join(io::LINE_LIST)),
        "--as-of",
        "2021-11-19",
        "--dmax",
        "40",
        "--bootstrap",
        "300",
        "--seed",
        "4",
        "--out",
        p(&nc),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(nc.join("nowcast.csv")).unwrap();
    let headers: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        headers,
        [
            "date",
            "age_group",
            "reported",
            "F_hat",
            "nowcast",
            "ci_lo",
            "ci_hi",
            "rolling7_reported",
            "rolling7_nowcast",
            "rolling7_ci_lo",
            "rolling7_ci_hi"
        ]
    );
    let rows: Vec<NowcastCsv> = rdr.deserialize().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 56 * 3);
    for r in &rows {
        assert!(r.nowcast >= r.reported, "{}", r.age_group);
        assert!(r.ci_lo <= r.nowcast && r.nowcast <= r.ci_hi);
        assert!(r.ci_lo >= r.reported);
        assert!(r.f_hat > 0.0 && r.f_hat <= 1.0);
        if let (Some(n), Some(lo), Some(hi)) = (r.rolling7_nowcast, r.rolling7_ci_lo, r.rolling7_ci_hi) {
            assert!(lo <= n && n <= hi);
        }
    }

    let h = d.path().join("hosp");
    let o = epigam(&[
        "hosp",
        "fit",
        "--panel",
        p(&data.join(io::HOSP_PANEL)),
        "--population",
        p(&data.join(io::HOSP_POPULATION)),
        "--coords",
        p(&data.join(io::COORDS)),
        "--as-of",
        "2021-11-19",
        "--nowcast-model",
        p(&nc.join("nowcast_model.json")),
        "--grid",
        "5",
        "--out",
        p(&h),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "hosp_fit.json",
        "age_gender_effects.csv",
        "time_effect.csv",
        "spatial_surface.csv",
        "district_effects.csv",
        "weekday_effects.csv",
        "manifest.json",
    ] {
        assert!(h.join(f).is_file(), "{f}");
    }
    let surface = fs::read_to_string(h.join("spatial_surface.csv")).unwrap();
    assert_eq!(surface.lines().count(), 1 + 25);
}

#[test]
fn manifest_hashes_inputs_and_outputs() {
    let d = TempDir::new().unwrap();
    let f = fixture();
    let out = d.path().join("inf");
    let o = epigam(&[
        "infection",
        "fit",
        "--panel",
        p(&f.join(io::INFECTION_PANEL)),
        "--population",
        p(&f.join(io::INFECTION_POPULATION)),
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["schema"], "epigam.manifest.v1");
    assert_eq!(m["config"]["command"], "infection fit");
    assert_eq!(m["config"]["parameters"]["delta"], 1.0);
    let sha = |path: &Path| format!("{:x}", Sha256::digest(fs::read(path).unwrap()));
    let inputs = m["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 2);
    for i in inputs {
        assert_eq!(i["sha256"].as_str().unwrap(), sha(Path::new(i["path"].as_str().unwrap())));
    }
    let outputs = m["outputs"].as_array().unwrap();
    let names: Vec<&str> = outputs.iter().map(|o| o["path"].as_str().unwrap()).collect();
    assert_eq!(names, ["lag_coefficients.csv", "week_intercepts.csv", "infection_fits.json"]);
    for o in outputs {
        assert_eq!(o["sha256"].as_str().unwrap(), sha(&out.join(o["path"].as_str().unwrap())));
    }
    let lag = fs::read_to_string(out.join("lag_coefficients.csv")).unwrap();
    assert!(lag.starts_with("model_age_group,covariate_age_group,estimate,se_model,se_sandwich,ci_lo,ci_hi\n"));
    assert_eq!(lag.lines().count(), 1 + 4);
}

#[test]
fn scenario_parameters_merge_over_defaults() {
    let base = synth::InfectionScenario::default();
    let merged: synth::InfectionScenario =
        synth::merge_params(&base, Some(&serde_json::json!({ "districts": 7 }))).unwrap();
    assert_eq!(merged.districts, 7);
    assert_eq!(merged.lag, base.lag);
    assert!(synth::merge_params(&base, Some(&serde_json::json!({ "districts": "many" }))).is_err());
    assert_eq!(synth::parse_iso_week("2021-W10"), chrono::NaiveDate::from_ymd_opt(2021, 3, 8));
    assert_eq!(synth::iso_week_label(chrono::NaiveDate::from_ymd_opt(2021, 1, 3).unwrap()), "2020-W53");
}
