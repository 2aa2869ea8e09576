//! Synthetic data sets in the ingestion schemas, with their generating
//! parameters in `truth.json`.

use std::collections::BTreeMap;

use chrono::{Datelike, Days, NaiveDate, Weekday};
use epigam::hosp::{simulate_hospitalisations, HospSimConfig};
use epigam::icu::{simulate_icu, IcuSimConfig, ICU_AGE_GROUPS};
use epigam::infection::{simulate_study_panel, CdrStudyConfig, InfectionTruth, DEFAULT_DELTA};
use epigam::nowcast::{add_days, NOWCAST_AGE_GROUPS};
use epigam::rng::SeedStream;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::io;
use crate::output::Outputs;

pub const TRUTH: &str = "truth.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Infection,
    Nowcast,
    Icu,
}

impl Scenario {
    pub fn id(&self) -> &'static str {
        match self {
            Scenario::Infection => "infection",
            Scenario::Nowcast => "nowcast",
            Scenario::Icu => "icu",
        }
    }
}

/// Settings of the infection scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfectionScenario {
    /// ISO week label of the first week, `YYYY-Www`.
    pub first_week: String,
    pub weeks: usize,
    pub districts: usize,
    pub age_groups: Vec<String>,
    /// A × A lag matrix, row = target age group.
    pub lag: Vec<Vec<f64>>,
    /// NB size; `null` for Poisson.
    pub theta: Option<f64>,
    pub target_count: f64,
    pub base_population: f64,
    pub delta: f64,
}

impl Default for InfectionScenario {
    fn default() -> Self {
        let study = CdrStudyConfig::default();
        Self {
            first_week: "2021-W10".into(),
            weeks: study.weeks,
            districts: 50,
            age_groups: vec!["0-34".into(), "35-59".into(), "60+".into()],
            lag: study.lag,
            theta: study.theta,
            target_count: study.target_count,
            base_population: study.base_population,
            delta: DEFAULT_DELTA,
        }
    }
}

pub fn parse_iso_week(label: &str) -> Option<NaiveDate> {
    let (y, w) = label.split_once("-W")?;
    NaiveDate::from_isoywd_opt(y.parse().ok()?, w.parse().ok()?, Weekday::Mon)
}

pub fn iso_week_label(date: NaiveDate) -> String {
    let w = date.iso_week();
    format!("{:04}-W{:02}", w.year(), w.week())
}

/// Overlays the keys of `overrides` on the serialized defaults, recursing
/// into objects.
pub fn merge_params<T: Serialize + DeserializeOwned>(defaults: &T, overrides: Option<&serde_json::Value>) -> Result<T, CliError> {
    fn merge(base: &mut serde_json::Value, over: &serde_json::Value) {
        match (base, over) {
            (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
                for (k, v) in o {
                    match b.get_mut(k) {
                        Some(slot) => merge(slot, v),
                        None => {
                            b.insert(k.clone(), v.clone());
                        }
                    }
                }
            }
            (b, o) => *b = o.clone(),
        }
    }
    let mut v = serde_json::to_value(defaults)?;
    if let Some(o) = overrides {
        merge(&mut v, o);
    }
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("invalid scenario parameters: {e}")))
}

#[derive(Serialize)]
struct CountRow<'a> {
    week: &'a str,
    district: &'a str,
    age_group: &'a str,
    count: f64,
}

#[derive(Serialize)]
struct PopRow<'a> {
    district: &'a str,
    age_group: &'a str,
    population: f64,
}

#[derive(Serialize)]
struct InfectionTruthFile<'a> {
    scenario: &'static str,
    seed: u64,
    params: &'a InfectionScenario,
    truth: &'a InfectionTruth,
}

fn infection(out: &mut Outputs, seed: u64, overrides: Option<&serde_json::Value>) -> Result<serde_json::Value, CliError> {
    let p: InfectionScenario = merge_params(&InfectionScenario::default(), overrides)?;
    let first = parse_iso_week(&p.first_week)
        .ok_or_else(|| CliError::Usage(format!("first_week '{}' is not an ISO week label", p.first_week)))?;
    if p.age_groups.len() != p.lag.len() {
        return Err(CliError::Usage(format!(
            "{} age groups for a {}-row lag matrix",
            p.age_groups.len(),
            p.lag.len()
        )));
    }
    let cfg = CdrStudyConfig {
        districts: p.districts,
        weeks: p.weeks,
        lag: p.lag.clone(),
        theta: p.theta,
        target_count: p.target_count,
        base_population: p.base_population,
        delta: p.delta,
        seed,
        ..CdrStudyConfig::default()
    };
    let (mut panel, pop, truth) = simulate_study_panel(&cfg, &SeedStream::new(seed))?;
    panel.weeks = (0..p.weeks).map(|w| iso_week_label(first + Days::new(7 * w as u64))).collect();
    panel.age_groups = p.age_groups.clone();
    let (w, r, a) = panel.dims();
    let mut rows = Vec::with_capacity(w * r * a);
    for wi in 0..w {
        for ri in 0..r {
            for ai in 0..a {
                rows.push(CountRow {
                    week: &panel.weeks[wi],
                    district: &panel.districts[ri],
                    age_group: &panel.age_groups[ai],
                    count: panel.get(wi, ri, ai),
                });
            }
        }
    }
    out.csv(io::INFECTION_PANEL, &rows)?;
    let pop_rows: Vec<PopRow> = (0..r)
        .flat_map(|ri| (0..a).map(move |ai| (ri, ai)))
        .map(|(ri, ai)| PopRow {
            district: &panel.districts[ri],
            age_group: &panel.age_groups[ai],
            population: pop.pop[(ri, ai)],
        })
        .collect();
    out.csv(io::INFECTION_POPULATION, &pop_rows)?;
    out.json(
        TRUTH,
        &InfectionTruthFile {
            scenario: "infection",
            seed,
            params: &p,
            truth: &truth,
        },
    )?;
    Ok(serde_json::json!({ "weeks": w, "districts": r, "age_groups": a, "total": panel.total() }))
}

#[derive(Serialize)]
struct LineRow<'a> {
    case_id: &'a str,
    admission_date: Option<NaiveDate>,
    infection_report_date: Option<NaiveDate>,
    registry_report_date: NaiveDate,
    age_group: &'a str,
    gender: &'a str,
    district: &'a str,
}

#[derive(Serialize)]
struct HospRow<'a> {
    date: NaiveDate,
    district: &'a str,
    age_group: &'a str,
    gender: &'a str,
    reported_count: f64,
}

#[derive(Serialize)]
struct HospPopRow<'a> {
    district: &'a str,
    age_group: &'a str,
    gender: &'a str,
    population: f64,
}

#[derive(Serialize)]
struct CoordRow<'a> {
    district: &'a str,
    lon: f64,
    lat: f64,
}

#[derive(Serialize)]
struct FinalDaily {
    date: NaiveDate,
    age_group: String,
    final_count: f64,
}

#[derive(Serialize)]
struct NowcastTruthFile<'a> {
    scenario: &'static str,
    seed: u64,
    as_of: NaiveDate,
    params: &'a HospSimConfig,
    district_effects: BTreeMap<&'a str, f64>,
    /// Statewide counts per coarse age group once reporting is complete.
    final_daily: Vec<FinalDaily>,
}

fn nowcast(out: &mut Outputs, seed: u64, overrides: Option<&serde_json::Value>) -> Result<serde_json::Value, CliError> {
    let mut p: HospSimConfig = merge_params(&HospSimConfig::default(), overrides)?;
    p.seed = seed;
    let sim = simulate_hospitalisations(&p)?;
    let panel = &sim.panel;
    let lines: Vec<LineRow> = sim
        .line_list
        .iter()
        .map(|r| LineRow {
            case_id: &r.case_id,
            admission_date: r.admission_date,
            infection_report_date: r.infection_report_date,
            registry_report_date: r.report_date,
            age_group: &r.age_group,
            gender: &r.gender,
            district: &r.district,
        })
        .collect();
    out.csv(io::LINE_LIST, &lines)?;
    let mut rows = Vec::new();
    for t in 1..=panel.days() {
        for (r, d) in panel.districts.iter().enumerate() {
            for g in 0..panel.cells() {
                let c = panel.get(t, r, g);
                if c > 0.0 {
                    let (age, gender) = panel.cell(g);
                    rows.push(HospRow {
                        date: panel.date(t),
                        district: d,
                        age_group: age,
                        gender,
                        reported_count: c,
                    });
                }
            }
        }
    }
    out.csv(io::HOSP_PANEL, &rows)?;
    let pop_rows: Vec<HospPopRow> = (0..panel.districts.len())
        .flat_map(|r| (0..panel.cells()).map(move |g| (r, g)))
        .map(|(r, g)| {
            let (age, gender) = panel.cell(g);
            HospPopRow {
                district: &panel.districts[r],
                age_group: age,
                gender,
                population: panel.population[(r, g)],
            }
        })
        .collect();
    out.csv(io::HOSP_POPULATION, &pop_rows)?;
    write_coords(out, &panel.districts, &panel.coords)?;
    let ages = epigam::nowcast::AgeMap::default();
    let fin = &sim.final_counts;
    let mut final_daily = Vec::new();
    for t in 1..=fin.days() {
        let mut sums = [0.0; 2];
        for r in 0..fin.districts.len() {
            for g in 0..fin.cells() {
                let a = ages.index_of(fin.cell(g).0)?;
                sums[a] += fin.get(t, r, g);
            }
        }
        for (a, s) in sums.iter().enumerate() {
            final_daily.push(FinalDaily {
                date: add_days(p.start, t - 1),
                age_group: NOWCAST_AGE_GROUPS[a].into(),
                final_count: *s,
            });
        }
    }
    out.json(
        TRUTH,
        &NowcastTruthFile {
            scenario: "nowcast",
            seed,
            as_of: sim.as_of(),
            params: &p,
            district_effects: panel.districts.iter().map(String::as_str).zip(sim.district_effects.iter().copied()).collect(),
            final_daily,
        },
    )?;
    Ok(serde_json::json!({
        "records": sim.line_list.len(),
        "as_of": sim.as_of(),
        "reported": panel.total(),
    }))
}

fn write_coords(out: &mut Outputs, districts: &[String], coords: &[(f64, f64)]) -> Result<(), CliError> {
    let rows: Vec<CoordRow> = districts
        .iter()
        .zip(coords)
        .map(|(d, &(lon, lat))| CoordRow { district: d, lon, lat })
        .collect();
    out.csv(io::COORDS, &rows)
}

#[derive(Serialize)]
struct BedRow<'a> {
    week: NaiveDate,
    district: &'a str,
    beds_free: f64,
    beds_covid: f64,
    beds_noncovid: f64,
}

#[derive(Serialize)]
struct IncidenceRow<'a> {
    week: NaiveDate,
    district: &'a str,
    age_group: &'a str,
    incidence_per_100k: f64,
}

#[derive(Serialize)]
struct IcuTruthFile<'a> {
    scenario: &'static str,
    seed: u64,
    params: &'a IcuSimConfig,
    /// Random intercepts per district for the free and non-COVID logits.
    district_effects: BTreeMap<&'a str, [f64; 2]>,
}

fn icu(out: &mut Outputs, seed: u64, overrides: Option<&serde_json::Value>) -> Result<serde_json::Value, CliError> {
    let mut p: IcuSimConfig = merge_params(&IcuSimConfig::default(), overrides)?;
    p.seed = seed;
    let sim = simulate_icu(&p)?;
    let panel = &sim.panel;
    let mut beds = Vec::new();
    let mut inc = Vec::new();
    for (w, week) in panel.weeks.iter().enumerate() {
        for (r, d) in panel.districts.iter().enumerate() {
            let z = panel.beds(w, r);
            beds.push(BedRow {
                week: *week,
                district: d,
                beds_free: z[0],
                beds_covid: z[1],
                beds_noncovid: z[2],
            });
            for (a, y) in panel.incidence(w, r).iter().enumerate() {
                inc.push(IncidenceRow {
                    week: *week,
                    district: d,
                    age_group: ICU_AGE_GROUPS[a],
                    incidence_per_100k: *y,
                });
            }
        }
    }
    out.csv(io::ICU_PANEL, &beds)?;
    out.csv(io::ICU_INCIDENCE, &inc)?;
    write_coords(out, &panel.districts, &panel.coords)?;
    out.json(
        TRUTH,
        &IcuTruthFile {
            scenario: "icu",
            seed,
            params: &p,
            district_effects: panel.districts.iter().map(String::as_str).zip(sim.district_effects.iter().copied()).collect(),
        },
    )?;
    Ok(serde_json::json!({ "weeks": panel.n_weeks(), "districts": panel.n_districts() }))
}

/// Writes the scenario's files into `out`; returns a short summary.
pub fn generate(
    scenario: Scenario,
    seed: u64,
    params: Option<&serde_json::Value>,
    out: &mut Outputs,
) -> Result<serde_json::Value, CliError> {
    match scenario {
        Scenario::Infection => infection(out, seed, params),
        Scenario::Nowcast => nowcast(out, seed, params),
        Scenario::Icu => icu(out, seed, params),
    }
}
