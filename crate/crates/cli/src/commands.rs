use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use epigam::basis::{DEFAULT_1D_BASIS, DEFAULT_TPS_RANK};
use epigam::glm::Smoothing;
use epigam::hosp::{build_hosp_design, effect_grids, fit_hosp_model, HospConfig};
use epigam::icu::{
    self, build_icu_design, coefficient_table, fit_icu_model, icu_effect_grids, rolling_forecast, score_table,
    ForecastConfig, IcuConfig, Variant,
};
use epigam::infection::{fit_infection_model, lag_table, run_cdr_study, week_intercepts, CdrStudyConfig};
use epigam::multinomial::MultinomialSmoothing;
use epigam::nowcast::{
    self, build_triangle, fit_delay_model, impute_admission_dates, AgeMap, BootstrapConfig, BootstrapMode,
    DelayModelConfig, ReportingCdfTable,
};
use serde::Serialize;
use serde_json::json;

use crate::error::CliError;
use crate::io;
use crate::output::{Outputs, RunConfig};
use crate::synth::{self, Scenario};

#[derive(Debug, Parser)]
#[command(name = "epigam", version, about = "Penalized GAM pipelines for epidemic surveillance data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Autoregressive NB model of weekly infections.
    #[command(subcommand)]
    Infection(InfectionCmd),
    /// Delay-distribution nowcast of hospitalisations.
    #[command(subcommand)]
    Nowcast(NowcastCmd),
    /// Hospitalisation incidence model with the reporting offset.
    #[command(subcommand)]
    Hosp(HospCmd),
    /// Multinomial ICU occupancy model.
    #[command(subcommand)]
    Icu(IcuCmd),
    /// Writes a synthetic data set and its truth.json.
    Simulate(SimulateArgs),
    /// Checks the input files found in a directory.
    Validate(ValidateArgs),
}

#[derive(Debug, Subcommand)]
pub enum InfectionCmd {
    Fit(InfectionFitArgs),
    /// Repeated case-detection-ratio thinning experiment.
    CdrStudy(CdrStudyArgs),
}

#[derive(Debug, Subcommand)]
pub enum NowcastCmd {
    Fit(NowcastFitArgs),
}

#[derive(Debug, Subcommand)]
pub enum HospCmd {
    Fit(HospFitArgs),
}

#[derive(Debug, Subcommand)]
pub enum IcuCmd {
    Fit(IcuFitArgs),
    /// Rolling one-week-ahead forecasts of the nested model variants.
    Forecast(IcuForecastArgs),
}

#[derive(Debug, Args)]
pub struct InfectionFitArgs {
    #[arg(long, default_value = io::INFECTION_PANEL)]
    pub panel: PathBuf,
    #[arg(long, default_value = io::INFECTION_POPULATION)]
    pub population: PathBuf,
    #[arg(long, default_value_t = epigam::infection::DEFAULT_DELTA)]
    pub delta: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CdrStudyArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub replicates: usize,
    #[arg(long, default_value_t = 200)]
    pub districts: usize,
    #[arg(long, default_value_t = 20)]
    pub weeks: usize,
    #[arg(long, default_value_t = 0.4)]
    pub mean_cdr: f64,
    #[arg(long, default_value_t = 200.0)]
    pub concentration: f64,
    /// Skips the outcome-dependent thinning run.
    #[arg(long)]
    pub no_adversarial: bool,
    /// JSON overrides of the study settings.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NowcastFitArgs {
    #[arg(long, default_value = io::LINE_LIST)]
    pub linelist: PathBuf,
    #[arg(long)]
    pub as_of: NaiveDate,
    /// First event day; defaults to the earliest admission date.
    #[arg(long)]
    pub start: Option<NaiveDate>,
    #[arg(long, default_value_t = nowcast::DEFAULT_DMAX)]
    pub dmax: usize,
    #[arg(long = "bootstrap", default_value_t = nowcast::DEFAULT_BOOTSTRAP)]
    pub bootstrap: usize,
    #[arg(long)]
    pub seed: u64,
    /// Bootstrap mode: predictive or parameter.
    #[arg(long, default_value = "predictive", value_parser = ["predictive", "parameter"])]
    pub mode: String,
    #[arg(long, default_value_t = 8)]
    pub delay_basis: usize,
    #[arg(long, default_value_t = epigam::basis::TruncatedLinearSpec::DEFAULT_SPACING)]
    pub knot_spacing: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HospFitArgs {
    #[arg(long, default_value = io::HOSP_PANEL)]
    pub panel: PathBuf,
    #[arg(long, default_value = io::HOSP_POPULATION)]
    pub population: PathBuf,
    #[arg(long, default_value = io::COORDS)]
    pub coords: PathBuf,
    #[arg(long)]
    pub as_of: NaiveDate,
    /// Reporting CDF table written by `nowcast fit`.
    #[arg(long)]
    pub nowcast_model: PathBuf,
    #[arg(long, default_value_t = DEFAULT_1D_BASIS)]
    pub time_basis: usize,
    #[arg(long, default_value_t = DEFAULT_TPS_RANK)]
    pub tps_rank: usize,
    /// Side length of the spatial effect grid.
    #[arg(long, default_value_t = 25)]
    pub grid: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IcuInputs {
    #[arg(long, default_value = io::ICU_PANEL)]
    pub panel: PathBuf,
    #[arg(long, default_value = io::ICU_INCIDENCE)]
    pub incidence: PathBuf,
    #[arg(long, default_value = io::COORDS)]
    pub coords: PathBuf,
    #[arg(long, default_value_t = icu::DEFAULT_DELTA)]
    pub delta: f64,
    #[arg(long, default_value_t = DEFAULT_TPS_RANK)]
    pub tps_rank: usize,
}

#[derive(Debug, Args)]
pub struct IcuFitArgs {
    #[command(flatten)]
    pub inputs: IcuInputs,
    #[arg(long, default_value_t = 25)]
    pub grid: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IcuForecastArgs {
    #[command(flatten)]
    pub inputs: IcuInputs,
    #[arg(long, default_value_t = icu::DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = icu::DEFAULT_PERMUTATIONS)]
    pub n_perm: usize,
    #[arg(long)]
    pub seed: u64,
    /// Comma-separated subset of full, no_ar, no_infection, linear, intercept_only.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub scenario: Scenario,
    #[arg(long)]
    pub seed: u64,
    /// JSON overrides of the scenario's generating parameters.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub dir: PathBuf,
    /// Also writes validation.json and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn read_json(path: &Path) -> Result<serde_json::Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Infection(InfectionCmd::Fit(a)) => infection_fit(a),
        Command::Infection(InfectionCmd::CdrStudy(a)) => cdr_study(a),
        Command::Nowcast(NowcastCmd::Fit(a)) => nowcast_fit(a),
        Command::Hosp(HospCmd::Fit(a)) => hosp_fit(a),
        Command::Icu(IcuCmd::Fit(a)) => icu_fit(a),
        Command::Icu(IcuCmd::Forecast(a)) => icu_forecast(a),
        Command::Simulate(a) => simulate(a),
        Command::Validate(a) => validate(a),
    }
}

#[derive(Serialize)]
struct NamedFit {
    age_group: String,
    fit: epigam::glm::FitDocument,
}

fn infection_fit(a: InfectionFitArgs) -> Result<(), CliError> {
    let b = io::load_infection(&a.panel, &a.population)?;
    let fits = fit_infection_model(&b.panel, &b.population, a.delta)?;
    let mut out = Outputs::create(&a.out)?;
    out.csv("lag_coefficients.csv", &lag_table(&fits, &b.panel.age_groups))?;
    out.csv("week_intercepts.csv", &week_intercepts(&fits, &b.panel.weeks))?;
    let docs: Vec<NamedFit> = fits
        .iter()
        .map(|f| NamedFit {
            age_group: f.age.clone(),
            fit: f.fit.to_document(),
        })
        .collect();
    out.json("infection_fits.json", &docs)?;
    let cfg = RunConfig::new("infection fit", &a.out)
        .input("panel", &a.panel)
        .input("population", &a.population)
        .param("delta", a.delta);
    out.finish(cfg, json!({ "zero_filled": b.zero_filled }))?;
    Ok(())
}

#[derive(Serialize)]
struct CdrRow {
    replicate: usize,
    lag_coefficients: usize,
    within_3se: usize,
    adversarial_outside_3se: Option<usize>,
    max_abs_standardized: f64,
}

fn cdr_study(a: CdrStudyArgs) -> Result<(), CliError> {
    let base = CdrStudyConfig {
        replicates: a.replicates,
        districts: a.districts,
        weeks: a.weeks,
        mean_cdr: a.mean_cdr,
        concentration: a.concentration,
        adversarial_half_count: if a.no_adversarial {
            None
        } else {
            CdrStudyConfig::default().adversarial_half_count
        },
        ..CdrStudyConfig::default()
    };
    let overrides = a.params.as_deref().map(read_json).transpose()?;
    let mut cfg: CdrStudyConfig = synth::merge_params(&base, overrides.as_ref())?;
    cfg.seed = a.seed;
    let summary = run_cdr_study(&cfg)?;
    let mut out = Outputs::create(&a.out)?;
    let rows: Vec<CdrRow> = summary
        .replicates
        .iter()
        .map(|r| CdrRow {
            replicate: r.replicate,
            lag_coefficients: r.lag_coefficients,
            within_3se: r.within_3se,
            adversarial_outside_3se: r.adversarial_outside_3se,
            max_abs_standardized: r.max_abs_standardized,
        })
        .collect();
    out.csv("cdr_replicates.csv", &rows)?;
    out.json("cdr_study.json", &summary)?;
    let mut run = RunConfig::new("infection cdr-study", &a.out).seed(a.seed).param("study", &cfg);
    if let Some(p) = &a.params {
        run = run.input("params", p);
    }
    out.finish(
        run,
        json!({
            "share_within_3se": summary.share_within_3se,
            "adversarial_share_flagged": summary.adversarial_share_flagged,
        }),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct NowcastCsvRow<'a> {
    date: NaiveDate,
    age_group: &'a str,
    reported: f64,
    #[serde(rename = "F_hat")]
    f_hat: f64,
    nowcast: f64,
    ci_lo: f64,
    ci_hi: f64,
    rolling7_reported: Option<f64>,
    rolling7_nowcast: Option<f64>,
    rolling7_ci_lo: Option<f64>,
    rolling7_ci_hi: Option<f64>,
}

pub const NOWCAST_MODEL: &str = "nowcast_model.json";

fn nowcast_fit(a: NowcastFitArgs) -> Result<(), CliError> {
    let records = io::load_line_list(&a.linelist)?;
    let (records, imputation) = impute_admission_dates(&records);
    let start = match a.start {
        Some(s) => s,
        None => records
            .iter()
            .filter_map(|r| r.admission_date)
            .filter(|d| *d <= a.as_of)
            .min()
            .ok_or_else(|| CliError::Pipeline("no admission dates on or before the current date".into()))?,
    };
    let tri = build_triangle(&records, start, a.as_of, a.dmax, &AgeMap::default())?;
    let model = fit_delay_model(
        &tri,
        &DelayModelConfig {
            knot_spacing: a.knot_spacing,
            delay_basis: a.delay_basis,
            smoothing: Smoothing::Select,
        },
    )?;
    let mode = if a.mode == "parameter" {
        BootstrapMode::Parameter
    } else {
        BootstrapMode::Predictive
    };
    let res = nowcast::nowcast(
        &tri,
        &model,
        &BootstrapConfig {
            replicates: a.bootstrap,
            seed: a.seed,
            mode,
        },
    )?;
    let mut out = Outputs::create(&a.out)?;
    let rows: Vec<NowcastCsvRow> = res
        .rows
        .iter()
        .map(|r| NowcastCsvRow {
            date: r.date,
            age_group: &r.age_group,
            reported: r.reported,
            f_hat: r.f_hat,
            nowcast: r.nowcast,
            ci_lo: r.ci_lo,
            ci_hi: r.ci_hi,
            rolling7_reported: r.rolling7_reported,
            rolling7_nowcast: r.rolling7_nowcast,
            rolling7_ci_lo: r.rolling7_ci_lo,
            rolling7_ci_hi: r.rolling7_ci_hi,
        })
        .collect();
    out.csv("nowcast.csv", &rows)?;
    out.csv("delay_effects.csv", &model.effects()?)?;
    let table: ReportingCdfTable = model.reporting_cdf_table()?;
    out.json(NOWCAST_MODEL, &table)?;
    let unstable: Vec<String> = res
        .rows
        .iter()
        .filter(|r| r.unstable)
        .map(|r| format!("{} {}", r.date, r.age_group))
        .collect();
    let cfg = RunConfig::new("nowcast fit", &a.out)
        .seed(a.seed)
        .input("linelist", &a.linelist)
        .param("as_of", a.as_of)
        .param("start", start)
        .param("dmax", a.dmax)
        .param("bootstrap", a.bootstrap)
        .param("mode", &a.mode)
        .param("delay_basis", a.delay_basis)
        .param("knot_spacing", a.knot_spacing);
    out.finish(
        cfg,
        json!({
            "imputation": imputation,
            "triangle": tri.diagnostics,
            "unstable": unstable,
            "notes": res.notes,
        }),
    )?;
    Ok(())
}

fn hosp_fit(a: HospFitArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&a.nowcast_model).map_err(|e| CliError::io(&a.nowcast_model, e))?;
    let cdf: ReportingCdfTable = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: not a reporting CDF table: {e}", a.nowcast_model.display())))?;
    let b = io::load_hosp(&a.panel, &a.population, &a.coords, Some(cdf.start), a.as_of)?;
    let cfg = HospConfig {
        time_basis: a.time_basis,
        tps_rank: a.tps_rank,
        ..HospConfig::default()
    };
    let design = build_hosp_design(&b.panel, &cdf, &cfg)?;
    let fit = fit_hosp_model(&design, &Smoothing::Select)?;
    let grids = effect_grids(&b.panel, &design, &fit, a.grid)?;
    let mut out = Outputs::create(&a.out)?;
    out.json("hosp_fit.json", &fit.to_document())?;
    out.csv("age_gender_effects.csv", &grids.age_gender)?;
    out.csv("time_effect.csv", &grids.time)?;
    out.csv_with_header("spatial_surface.csv", &grids.spatial, Some(&["lon", "lat", "estimate"]))?;
    out.csv("district_effects.csv", &grids.districts)?;
    out.csv("weekday_effects.csv", &grids.weekday)?;
    let run = RunConfig::new("hosp fit", &a.out)
        .input("panel", &a.panel)
        .input("population", &a.population)
        .input("coords", &a.coords)
        .input("nowcast_model", &a.nowcast_model)
        .param("as_of", a.as_of)
        .param("time_basis", a.time_basis)
        .param("tps_rank", a.tps_rank)
        .param("grid", a.grid);
    out.finish(
        run,
        json!({
            "rows": design.rows.len(),
            "zero_filled": b.zero_filled,
            "outside_window": b.outside_window,
            "dropped_zero_population": design.dropped_zero_population,
            "notes": design.notes,
        }),
    )?;
    Ok(())
}

fn icu_run(name: &str, i: &IcuInputs, out: &Path) -> RunConfig {
    RunConfig::new(name, out)
        .input("panel", &i.panel)
        .input("incidence", &i.incidence)
        .input("coords", &i.coords)
        .param("delta", i.delta)
        .param("tps_rank", i.tps_rank)
}

fn icu_fit(a: IcuFitArgs) -> Result<(), CliError> {
    let b = io::load_icu(&a.inputs.panel, &a.inputs.incidence, &a.inputs.coords)?;
    let cfg = IcuConfig {
        delta: a.inputs.delta,
        tps_rank: a.inputs.tps_rank,
        variant: Variant::Full,
    };
    let design = build_icu_design(&b.panel, &cfg)?;
    let fit = fit_icu_model(&design, &MultinomialSmoothing::Select)?;
    let (surface, districts) = icu_effect_grids(&b.panel, &design, &fit, a.grid)?;
    let mut out = Outputs::create(&a.out)?;
    out.csv("icu_coefficients.csv", &coefficient_table(&design, &fit))?;
    out.json("icu_fit.json", &fit.to_document())?;
    out.csv("icu_surface.csv", &surface)?;
    out.csv("icu_district_effects.csv", &districts)?;
    let run = icu_run("icu fit", &a.inputs, &a.out).param("grid", a.grid);
    out.finish(
        run,
        json!({
            "rows": design.rows.len(),
            "rounded": b.rounded,
            "zero_filled_incidence": b.zero_filled_incidence,
            "notes": design.notes,
        }),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct ScoreCsvRow<'a> {
    week: NaiveDate,
    variant: &'a str,
    score: f64,
}

#[derive(Serialize)]
struct ProbRow<'a> {
    week: NaiveDate,
    variant: &'a str,
    district: &'a str,
    pi_free: f64,
    pi_covid: f64,
    pi_noncovid: f64,
    beds_free: f64,
    beds_covid: f64,
    beds_noncovid: f64,
}

#[derive(Serialize)]
struct ScoreTableRow<'a> {
    variant: &'a str,
    omitted_effects: &'a str,
    average_score: Option<f64>,
    p_value: Option<f64>,
}

fn icu_forecast(a: IcuForecastArgs) -> Result<(), CliError> {
    let variants = match &a.variants {
        None => Variant::ALL.to_vec(),
        Some(ids) => ids
            .iter()
            .map(|s| Variant::from_id(s.trim()).ok_or_else(|| CliError::Usage(format!("unknown variant '{s}'"))))
            .collect::<Result<Vec<_>, _>>()?,
    };
    let b = io::load_icu(&a.inputs.panel, &a.inputs.incidence, &a.inputs.coords)?;
    let cfg = ForecastConfig {
        window: a.window,
        variants: variants.clone(),
        delta: a.inputs.delta,
        tps_rank: a.inputs.tps_rank,
    };
    let rf = rolling_forecast(&b.panel, &cfg)?;
    let table = score_table(&rf, a.n_perm, a.seed)?;
    let mut records: Vec<_> = rf.records.iter().collect();
    records.sort_by_key(|r| (r.week, r.variant));
    let mut out = Outputs::create(&a.out)?;
    let scores: Vec<ScoreCsvRow> = records
        .iter()
        .map(|r| ScoreCsvRow {
            week: r.week,
            variant: r.variant.id(),
            score: r.score,
        })
        .collect();
    out.csv_with_header("forecast_scores.csv", &scores, Some(&["week", "variant", "score"]))?;
    let mut probs = Vec::new();
    for r in &records {
        for (i, d) in b.panel.districts.iter().enumerate() {
            probs.push(ProbRow {
                week: r.week,
                variant: r.variant.id(),
                district: d,
                pi_free: r.probs[(i, 0)],
                pi_covid: r.probs[(i, 1)],
                pi_noncovid: r.probs[(i, 2)],
                beds_free: r.observed[(i, 0)],
                beds_covid: r.observed[(i, 1)],
                beds_noncovid: r.observed[(i, 2)],
            });
        }
    }
    out.csv_with_header(
        "forecast_probs.csv",
        &probs,
        Some(&[
            "week",
            "variant",
            "district",
            "pi_free",
            "pi_covid",
            "pi_noncovid",
            "beds_free",
            "beds_covid",
            "beds_noncovid",
        ]),
    )?;
    let rows: Vec<ScoreTableRow> = table
        .iter()
        .map(|r| ScoreTableRow {
            variant: r.variant.id(),
            omitted_effects: &r.omitted_effects,
            average_score: r.average_score,
            p_value: r.p_value,
        })
        .collect();
    out.csv_with_header(
        "score_table.csv",
        &rows,
        Some(&["variant", "omitted_effects", "average_score", "p_value"]),
    )?;
    let run = icu_run("icu forecast", &a.inputs, &a.out)
        .seed(a.seed)
        .param("window", a.window)
        .param("n_perm", a.n_perm)
        .param("variants", variants.iter().map(|v| v.id()).collect::<Vec<_>>());
    let failures: Vec<_> = rf
        .failures
        .iter()
        .map(|f| json!({ "week": f.week, "variant": f.variant.id(), "reason": f.reason }))
        .collect();
    let lambda: serde_json::Map<String, serde_json::Value> =
        rf.lambda.iter().map(|(v, l)| (v.id().to_string(), json!(l))).collect();
    out.finish(
        run,
        json!({
            "target_weeks": rf.target_weeks.len(),
            "failures": failures,
            "lambda": lambda,
            "rounded": b.rounded,
        }),
    )?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let params = a.params.as_deref().map(read_json).transpose()?;
    let mut out = Outputs::create(&a.out)?;
    let summary = synth::generate(a.scenario, a.seed, params.as_ref(), &mut out)?;
    let mut run = RunConfig::new("simulate", &a.out)
        .seed(a.seed)
        .param("scenario", a.scenario.id());
    if let Some(p) = &a.params {
        run = run.input("params", p);
    }
    out.finish(run, summary)?;
    Ok(())
}

fn validate(a: ValidateArgs) -> Result<(), CliError> {
    let report = io::validate_dir(&a.dir)?;
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&report)?);
    if let Some(dir) = &a.out {
        let mut out = Outputs::create(dir)?;
        out.json("validation.json", &report)?;
        let mut run = RunConfig::new("validate", dir).param("dir", a.dir.display().to_string());
        for b in &report.bundles {
            for f in &b.files {
                if Path::new(f).is_file() {
                    run = run.input(&format!("{}:{}", b.kind, file_name(f)), Path::new(f));
                }
            }
        }
        out.finish(run, json!({ "ok": report.ok }))?;
    }
    if report.ok {
        Ok(())
    } else {
        Err(CliError::Invalid(report.bundles.into_iter().flat_map(|b| b.issues).collect()))
    }
}

fn file_name(p: &str) -> String {
    Path::new(p).file_name().map_or_else(|| p.to_string(), |n| n.to_string_lossy().into_owned())
}
