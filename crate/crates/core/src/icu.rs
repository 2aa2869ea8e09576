//! Multinomial model of weekly ICU bed occupancy per district, split into
//! free, COVID and non-COVID beds with COVID as the reference category:
//!
//! ```text
//! Z[w,r] ~ Multinomial(N[w,r], π[w,r])
//! log(π_j / π_covid) = θ₀ⱼ + θ_AR,ⱼ · Z̃[w−1,r] + Σ_a θ_I,ⱼ,a · log(Y[w−1,r,a] + δ)
//!                      + sⱼ(lon, lat) + u[r,j]
//! ```
//!
//! `Z̃` holds the free and COVID shares of the previous week. Covariates are
//! standardized on the fitting rows and the statistics are reused for
//! prediction. Rolling one-week-ahead forecasts compare five nested
//! variants by log score, with sign-flip permutation tests against the full
//! model.

use chrono::{Days, NaiveDate};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BasisError, RandomInterceptSpec, ThinPlateSpec, DEFAULT_TPS_RANK};
use crate::design::{CompiledDesign, DesignError, DesignMatrix, DesignSpec, Frame, TermSpec};
use crate::infection::Z975;
use crate::multinomial::{
    fit_multinomial, log_score, MultinomialData, MultinomialError, MultinomialFit, MultinomialOptions,
    MultinomialSmoothing,
};
use crate::rng::{self, SeedStream};

pub const ICU_CATEGORIES: [&str; 3] = ["free", "covid", "noncovid"];
/// Index of the COVID category.
pub const REFERENCE_CATEGORY: usize = 1;
pub const ICU_AGE_GROUPS: [&str; 4] = ["15-34", "35-59", "60-79", "80+"];
pub const DEFAULT_DELTA: f64 = 1.0;
pub const DEFAULT_WINDOW: usize = 8;
pub const DEFAULT_PERMUTATIONS: usize = 9999;
/// Names of the previous-week share covariates.
pub const AR_COVARIATES: [&str; 2] = ["ar_free", "ar_covid"];

#[derive(Debug, Error)]
pub enum IcuError {
    #[error("cannot normalize a constant covariate")]
    ConstantCovariate,
    #[error("need at least {min} values, got {got}")]
    TooShort { min: usize, got: usize },
    #[error("weeks must increase in steps of 7 days; missing weeks: {}", fmt_weeks(.missing))]
    WeekGap { missing: Vec<NaiveDate> },
    #[error("week {0} is not 7 days after its predecessor")]
    WeekSpacing(NaiveDate),
    #[error("{what}: expected {expected} values, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid {what} {value} in week {week}, district '{district}'")]
    BadValue {
        what: &'static str,
        week: NaiveDate,
        district: String,
        value: f64,
    },
    #[error("district '{district}' has no beds in week {week}")]
    NoBeds { week: NaiveDate, district: String },
    #[error("rolling window of {window} weeks needs at least {needed} weeks, panel has {got}")]
    WindowTooLong { window: usize, needed: usize, got: usize },
    #[error("score vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("penalized variant '{0}' has no smoothing parameters")]
    MissingLambda(String),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Fit(#[from] MultinomialError),
}

fn fmt_weeks(w: &[NaiveDate]) -> String {
    w.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
}

pub type Result<T> = std::result::Result<T, IcuError>;

/// Mean and population standard deviation of a covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: f64,
    pub sd: f64,
}

impl NormalizationStats {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.sd
    }
}

pub fn normalize(x: &[f64]) -> Result<(Vec<f64>, NormalizationStats)> {
    if x.len() < 2 {
        return Err(IcuError::TooShort { min: 2, got: x.len() });
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(sd > 1e-12 * mean.abs().max(1.0)) {
        return Err(IcuError::ConstantCovariate);
    }
    let stats = NormalizationStats { mean, sd };
    Ok((x.iter().map(|&v| stats.apply(v)).collect(), stats))
}

/// Weekly bed counts and lagged incidences per district.
#[derive(Debug, Clone, PartialEq)]
pub struct IcuPanel {
    /// Consecutive week start dates.
    pub weeks: Vec<NaiveDate>,
    pub districts: Vec<String>,
    pub coords: Vec<(f64, f64)>,
    /// `[free, covid, noncovid]` per `(w, r)`, week-major.
    beds: Vec<[f64; 3]>,
    /// Incidence per 100,000 for [`ICU_AGE_GROUPS`] per `(w, r)`.
    incidence: Vec<[f64; 4]>,
}

/// Missing week starts between consecutive entries, or a spacing error.
pub fn check_weeks(weeks: &[NaiveDate]) -> Result<()> {
    let mut missing = Vec::new();
    for pair in weeks.windows(2) {
        let gap = (pair[1] - pair[0]).num_days();
        if gap <= 0 || gap % 7 != 0 {
            return Err(IcuError::WeekSpacing(pair[1]));
        }
        let mut d = pair[0] + Days::new(7);
        while d < pair[1] {
            missing.push(d);
            d = d + Days::new(7);
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(IcuError::WeekGap { missing })
    }
}

impl IcuPanel {
    pub fn zeros(weeks: Vec<NaiveDate>, districts: Vec<String>, coords: Vec<(f64, f64)>) -> Result<Self> {
        check_weeks(&weeks)?;
        if coords.len() != districts.len() {
            return Err(IcuError::Shape {
                what: "coordinates",
                expected: districts.len(),
                got: coords.len(),
            });
        }
        let n = weeks.len() * districts.len();
        Ok(Self {
            weeks,
            districts,
            coords,
            beds: vec![[0.0; 3]; n],
            incidence: vec![[0.0; 4]; n],
        })
    }

    pub fn n_weeks(&self) -> usize {
        self.weeks.len()
    }

    pub fn n_districts(&self) -> usize {
        self.districts.len()
    }

    fn idx(&self, w: usize, r: usize) -> usize {
        w * self.districts.len() + r
    }

    pub fn beds(&self, w: usize, r: usize) -> [f64; 3] {
        self.beds[self.idx(w, r)]
    }

    pub fn set_beds(&mut self, w: usize, r: usize, z: [f64; 3]) -> Result<()> {
        for v in z {
            if !(v >= 0.0 && v.is_finite() && v.fract() == 0.0) {
                return Err(self.bad("bed count", w, r, v));
            }
        }
        let i = self.idx(w, r);
        self.beds[i] = z;
        Ok(())
    }

    pub fn incidence(&self, w: usize, r: usize) -> [f64; 4] {
        self.incidence[self.idx(w, r)]
    }

    pub fn set_incidence(&mut self, w: usize, r: usize, y: [f64; 4]) -> Result<()> {
        for v in y {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(self.bad("incidence", w, r, v));
            }
        }
        let i = self.idx(w, r);
        self.incidence[i] = y;
        Ok(())
    }

    fn bad(&self, what: &'static str, w: usize, r: usize, value: f64) -> IcuError {
        IcuError::BadValue {
            what,
            week: self.weeks[w],
            district: self.districts[r].clone(),
            value,
        }
    }

    /// Weeks `from..to` as a new panel.
    pub fn slice(&self, from: usize, to: usize) -> IcuPanel {
        let r = self.districts.len();
        IcuPanel {
            weeks: self.weeks[from..to].to_vec(),
            districts: self.districts.clone(),
            coords: self.coords.clone(),
            beds: self.beds[from * r..to * r].to_vec(),
            incidence: self.incidence[from * r..to * r].to_vec(),
        }
    }
}

/// Rounds average occupancies to integer counts, ties to even.
pub fn round_counts(x: f64) -> f64 {
    x.round_ties_even()
}

/// Nested model variants of the rolling comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoAr,
    NoInfection,
    Linear,
    InterceptOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoAr,
        Variant::NoInfection,
        Variant::Linear,
        Variant::InterceptOnly,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAr => "no_ar",
            Variant::NoInfection => "no_infection",
            Variant::Linear => "linear",
            Variant::InterceptOnly => "intercept_only",
        }
    }

    pub fn from_id(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.id() == s)
    }

    pub fn omitted_effects(&self) -> &'static str {
        match self {
            Variant::Full => "",
            Variant::NoAr => "AR(1)",
            Variant::NoInfection => "infection",
            Variant::Linear => "spatial+district",
            Variant::InterceptOnly => "all",
        }
    }

    fn ar(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoInfection | Variant::Linear)
    }

    fn infection(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoAr | Variant::Linear)
    }

    fn spatial(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoAr | Variant::NoInfection)
    }
}

pub fn incidence_covariates() -> Vec<String> {
    ICU_AGE_GROUPS.iter().map(|a| format!("log_inc_{a}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcuConfig {
    pub delta: f64,
    pub tps_rank: usize,
    pub variant: Variant,
}

impl Default for IcuConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            tps_rank: DEFAULT_TPS_RANK,
            variant: Variant::Full,
        }
    }
}

/// Unnormalized covariates of response week `w` (lags from week `w − 1`).
fn raw_row(panel: &IcuPanel, w: usize, r: usize, delta: f64) -> Result<[f64; 6]> {
    let z = panel.beds(w - 1, r);
    let n: f64 = z.iter().sum();
    if n <= 0.0 {
        return Err(IcuError::NoBeds {
            week: panel.weeks[w - 1],
            district: panel.districts[r].clone(),
        });
    }
    let y = panel.incidence(w - 1, r);
    Ok([
        z[0] / n,
        z[1] / n,
        (y[0] + delta).ln(),
        (y[1] + delta).ln(),
        (y[2] + delta).ln(),
        (y[3] + delta).ln(),
    ])
}

/// Covariate names in [`raw_row`] order.
fn raw_names() -> Vec<String> {
    AR_COVARIATES.iter().map(|s| s.to_string()).chain(incidence_covariates()).collect()
}

#[derive(Debug, Clone)]
pub struct IcuDesign {
    pub config: IcuConfig,
    pub compiled: CompiledDesign,
    pub data: MultinomialData,
    /// `(week, district)` per row.
    pub rows: Vec<(usize, usize)>,
    /// Normalized covariates in the model with their training statistics.
    pub stats: Vec<(String, NormalizationStats)>,
    /// Raw covariate values per row in the order of `stats`.
    pub raw: Vec<Vec<f64>>,
    pub notes: Vec<String>,
}

/// Rows for response weeks `1..W` of the panel and every district.
pub fn build_icu_design(panel: &IcuPanel, cfg: &IcuConfig) -> Result<IcuDesign> {
    if panel.n_weeks() < 2 {
        return Err(IcuError::TooShort {
            min: 2,
            got: panel.n_weeks(),
        });
    }
    let rows: Vec<(usize, usize)> = (1..panel.n_weeks())
        .flat_map(|w| (0..panel.n_districts()).map(move |r| (w, r)))
        .collect();
    let raw_rows = rows
        .iter()
        .map(|&(w, r)| raw_row(panel, w, r, cfg.delta))
        .collect::<Result<Vec<_>>>()?;
    let names = raw_names();
    let mut notes = Vec::new();
    let mut stats = Vec::new();
    let mut raw = Vec::new();
    let mut frame = Frame::new(rows.len());
    let mut spec = DesignSpec::new();
    for (k, name) in names.iter().enumerate() {
        let keep = if k < 2 { cfg.variant.ar() } else { cfg.variant.infection() };
        if !keep {
            continue;
        }
        let x: Vec<f64> = raw_rows.iter().map(|v| v[k]).collect();
        match normalize(&x) {
            Ok((xn, s)) => {
                frame = frame.with_numeric(name, xn)?;
                spec = spec.linear(name);
                stats.push((name.clone(), s));
                raw.push(x);
            }
            Err(IcuError::ConstantCovariate) => notes.push(format!("covariate {name} is constant and was dropped")),
            Err(e) => return Err(e),
        }
    }
    if cfg.variant.spatial() {
        let distinct = ThinPlateSpec::new(panel.coords.clone(), cfg.tps_rank).distinct_centers().len();
        if distinct >= 4 {
            spec = spec.term(
                "spatial",
                TermSpec::ThinPlate {
                    var: "loc".into(),
                    spec: ThinPlateSpec::new(panel.coords.clone(), cfg.tps_rank.min(distinct)),
                    centered: true,
                },
            );
        } else {
            notes.push(format!("{distinct} distinct district locations: spatial smooth dropped"));
        }
        if panel.n_districts() > 1 {
            spec = spec.term(
                "district",
                TermSpec::RandomIntercept {
                    var: "district".into(),
                    spec: RandomInterceptSpec::new(panel.districts.clone())?,
                },
            );
        }
    }
    let frame = frame
        .with_coords("loc", rows.iter().map(|&(_, r)| panel.coords[r]).collect())?
        .with_factor("district", rows.iter().map(|&(_, r)| panel.districts[r].clone()).collect())?;
    let compiled = spec.compile(&frame)?;
    let design = compiled.matrix(&frame, None)?;
    let counts = DMatrix::from_fn(rows.len(), 3, |i, j| {
        let (w, r) = rows[i];
        panel.beds(w, r)[j]
    });
    Ok(IcuDesign {
        config: cfg.clone(),
        compiled,
        data: MultinomialData {
            design,
            counts,
            categories: ICU_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            reference: REFERENCE_CATEGORY,
            groups: Some(rows.iter().map(|r| r.1).collect()),
        },
        rows,
        stats,
        raw,
        notes,
    })
}

impl IcuDesign {
    /// Design rows for response week `w` of `panel` (any panel sharing the
    /// districts), normalized with the training statistics.
    pub fn prediction_design(&self, panel: &IcuPanel, w: usize) -> Result<DesignMatrix> {
        let names = raw_names();
        let r_n = panel.n_districts();
        let raw = (0..r_n)
            .map(|r| raw_row(panel, w, r, self.config.delta))
            .collect::<Result<Vec<_>>>()?;
        let mut frame = Frame::new(r_n);
        for (name, s) in &self.stats {
            let k = names.iter().position(|n| n == name).expect("known covariate");
            frame = frame.with_numeric(name, raw.iter().map(|v| s.apply(v[k])).collect())?;
        }
        let frame = frame
            .with_coords("loc", panel.coords.clone())?
            .with_factor("district", panel.districts.clone())?;
        Ok(self.compiled.matrix(&frame, None)?)
    }

    /// Number of smoothing parameters: one per (logit, penalized block).
    pub fn n_lambda(&self) -> usize {
        (ICU_CATEGORIES.len() - 1) * self.data.design.blocks.len()
    }
}

pub fn fit_icu_model(design: &IcuDesign, smoothing: &MultinomialSmoothing) -> Result<MultinomialFit> {
    let smoothing = match smoothing {
        MultinomialSmoothing::Fixed(_) if design.n_lambda() == 0 => MultinomialSmoothing::Fixed(Vec::new()),
        MultinomialSmoothing::Fixed(l) if l.is_empty() => {
            return Err(IcuError::MissingLambda(design.config.variant.id().into()))
        }
        other => other.clone(),
    };
    Ok(fit_multinomial(&design.data, &smoothing, &MultinomialOptions::default())?)
}

/// Parametric coefficients with sandwich intervals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientRow {
    /// Non-reference category of the logit.
    pub logit: String,
    pub covariate: String,
    pub estimate: f64,
    pub se_sandwich: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

pub fn coefficient_table(design: &IcuDesign, fit: &MultinomialFit) -> Vec<CoefficientRow> {
    let mut columns = vec!["(Intercept)".to_string()];
    columns.extend(design.stats.iter().map(|s| s.0.clone()));
    let mut out = Vec::new();
    for j in fit.logits() {
        let logit = &fit.categories[j];
        for c in &columns {
            let Some(i) = fit.coefficient_index(logit, c) else { continue };
            let estimate = fit.beta[i];
            let se = fit.cov_sandwich[(i, i)].max(0.0).sqrt();
            out.push(CoefficientRow {
                logit: logit.clone(),
                covariate: c.clone(),
                estimate,
                se_sandwich: se,
                ci_lo: estimate - Z975 * se,
                ci_hi: estimate + Z975 * se,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IcuSurfacePoint {
    pub logit: String,
    pub lon: f64,
    pub lat: f64,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IcuDistrictEffect {
    pub logit: String,
    pub district: String,
    pub spatial: f64,
    pub u_r: f64,
}

/// Spatial surface on a `grid × grid` lattice over the district bounding
/// box and per-district effects, for each logit.
pub fn icu_effect_grids(
    panel: &IcuPanel,
    design: &IcuDesign,
    fit: &MultinomialFit,
    grid: usize,
) -> Result<(Vec<IcuSurfacePoint>, Vec<IcuDistrictEffect>)> {
    let p = design.data.design.ncols();
    let spatial = design.data.design.term("spatial").cloned();
    let re = design.data.design.term("district").cloned();
    let (lo_lon, hi_lon, lo_lat, hi_lat) = panel.coords.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
    );
    let step = |lo: f64, hi: f64, i: usize| if grid > 1 { lo + (hi - lo) * i as f64 / (grid - 1) as f64 } else { lo };
    let pts: Vec<(f64, f64)> = (0..grid)
        .flat_map(|i| (0..grid).map(move |j| (j, i)))
        .map(|(j, i)| (step(lo_lon, hi_lon, j), step(lo_lat, hi_lat, i)))
        .collect();
    let eval = |coords: &[(f64, f64)], l: usize| -> Result<Vec<f64>> {
        let Some(t) = &spatial else { return Ok(vec![0.0; coords.len()]) };
        let frame = Frame::new(coords.len()).with_coords("loc", coords.to_vec())?;
        let b = design.compiled.term_matrix("spatial", &frame)?;
        Ok((b * fit.beta.rows(l * p + t.start, t.len)).iter().copied().collect())
    };
    let mut surface = Vec::new();
    let mut districts = Vec::new();
    for (l, j) in fit.logits().into_iter().enumerate() {
        let logit = &fit.categories[j];
        for (&(lon, lat), e) in pts.iter().zip(eval(&pts, l)?) {
            surface.push(IcuSurfacePoint {
                logit: logit.clone(),
                lon,
                lat,
                estimate: e,
            });
        }
        for (r, s) in eval(&panel.coords, l)?.into_iter().enumerate() {
            districts.push(IcuDistrictEffect {
                logit: logit.clone(),
                district: panel.districts[r].clone(),
                spatial: s,
                u_r: re.as_ref().map_or(0.0, |t| fit.beta[l * p + t.start + r]),
            });
        }
    }
    Ok((surface, districts))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastConfig {
    pub window: usize,
    pub variants: Vec<Variant>,
    pub delta: f64,
    pub tps_rank: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            variants: Variant::ALL.to_vec(),
            delta: DEFAULT_DELTA,
            tps_rank: DEFAULT_TPS_RANK,
        }
    }
}

/// One-week-ahead forecast of one variant for one target week.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRecord {
    pub week: NaiveDate,
    pub variant: Variant,
    /// Predicted probabilities per district (rows) and category.
    pub probs: DMatrix<f64>,
    pub observed: DMatrix<f64>,
    /// Sum over districts of the negative log multinomial pmf.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastFailure {
    pub week: NaiveDate,
    pub variant: Variant,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RollingForecast {
    pub target_weeks: Vec<NaiveDate>,
    pub records: Vec<ForecastRecord>,
    pub failures: Vec<ForecastFailure>,
    /// Smoothing parameters fixed after the first successful window.
    pub lambda: Vec<(Variant, Vec<f64>)>,
}

impl RollingForecast {
    /// Weekly scores of a variant aligned with `target_weeks`; `None` marks
    /// a failed fit.
    pub fn scores(&self, variant: Variant) -> Vec<Option<f64>> {
        self.target_weeks
            .iter()
            .map(|w| {
                self.records
                    .iter()
                    .find(|r| r.variant == variant && r.week == *w)
                    .map(|r| r.score)
            })
            .collect()
    }

    pub fn average_score(&self, variant: Variant) -> Option<f64> {
        let s: Vec<f64> = self.scores(variant).into_iter().flatten().collect();
        (!s.is_empty()).then(|| s.iter().sum::<f64>() / s.len() as f64)
    }
}

/// Fits on weeks `w − window − 1 ..= w − 1` (responses `w − window ..= w − 1`)
/// and scores week `w`.
fn forecast_one(
    panel: &IcuPanel,
    w: usize,
    window: usize,
    cfg: &IcuConfig,
    smoothing: &MultinomialSmoothing,
) -> Result<(ForecastRecord, Vec<f64>)> {
    let train = panel.slice(w - window - 1, w);
    let design = build_icu_design(&train, cfg)?;
    let fit = fit_icu_model(&design, smoothing)?;
    let x = design.prediction_design(panel, w)?;
    let probs = fit.predict_probs(&x);
    let observed = DMatrix::from_fn(panel.n_districts(), 3, |r, j| panel.beds(w, r)[j]);
    let score = log_score(&probs, &observed).total();
    Ok((
        ForecastRecord {
            week: panel.weeks[w],
            variant: cfg.variant,
            probs,
            observed,
            score,
        },
        fit.lambda(),
    ))
}

pub fn rolling_forecast(panel: &IcuPanel, cfg: &ForecastConfig) -> Result<RollingForecast> {
    let needed = cfg.window + 2;
    if cfg.window < 1 || panel.n_weeks() < needed {
        return Err(IcuError::WindowTooLong {
            window: cfg.window,
            needed,
            got: panel.n_weeks(),
        });
    }
    let targets: Vec<usize> = (cfg.window + 1..panel.n_weeks()).collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut lambdas = Vec::new();
    for &variant in &cfg.variants {
        let icfg = IcuConfig {
            delta: cfg.delta,
            tps_rank: cfg.tps_rank,
            variant,
        };
        // Select λ on the earliest window that fits, then freeze it.
        let mut lambda = None;
        let mut first = targets.len();
        for (i, &w) in targets.iter().enumerate() {
            match forecast_one(panel, w, cfg.window, &icfg, &MultinomialSmoothing::Select) {
                Ok((rec, l)) => {
                    records.push(rec);
                    lambda = Some(l);
                    first = i + 1;
                    break;
                }
                Err(e) => failures.push(ForecastFailure {
                    week: panel.weeks[w],
                    variant,
                    reason: e.to_string(),
                }),
            }
        }
        let Some(lambda) = lambda else { continue };
        let fixed = MultinomialSmoothing::Fixed(lambda.clone());
        let rest: Vec<_> = targets[first..]
            .par_iter()
            .map(|&w| (w, forecast_one(panel, w, cfg.window, &icfg, &fixed)))
            .collect();
        for (w, res) in rest {
            match res {
                Ok((rec, _)) => records.push(rec),
                Err(e) => failures.push(ForecastFailure {
                    week: panel.weeks[w],
                    variant,
                    reason: e.to_string(),
                }),
            }
        }
        lambdas.push((variant, lambda));
    }
    Ok(RollingForecast {
        target_weeks: targets.iter().map(|&w| panel.weeks[w]).collect(),
        records,
        failures,
        lambda: lambdas,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PermutationTest {
    /// Mean of `alt − full`.
    pub statistic: f64,
    pub p_value: f64,
    pub exhaustive: bool,
    /// All differences are zero.
    pub degenerate: bool,
    /// Sign patterns evaluated, including the observed one.
    pub evaluated: u64,
}

/// Paired sign-flip test of `mean(alt − full)`, two-sided. Enumerates all
/// `2ⁿ` sign patterns when that is at most `n_perm + 1`; otherwise draws
/// `n_perm` random patterns and counts the observed one.
pub fn permutation_test(full: &[f64], alt: &[f64], n_perm: usize, seed: u64) -> Result<PermutationTest> {
    if full.len() != alt.len() {
        return Err(IcuError::LengthMismatch(full.len(), alt.len()));
    }
    let n = full.len();
    if n < 2 {
        return Err(IcuError::TooShort { min: 2, got: n });
    }
    let d: Vec<f64> = alt.iter().zip(full).map(|(a, f)| a - f).collect();
    let stat = d.iter().sum::<f64>() / n as f64;
    if d.iter().all(|&x| x == 0.0) {
        return Ok(PermutationTest {
            statistic: 0.0,
            p_value: 1.0,
            exhaustive: false,
            degenerate: true,
            evaluated: 0,
        });
    }
    let scale: f64 = d.iter().map(|x| x.abs()).sum::<f64>() / n as f64;
    let threshold = stat.abs() - 1e-12 * scale;
    let flipped = |sign: &dyn Fn(usize) -> bool| {
        let s: f64 = d.iter().enumerate().map(|(i, &x)| if sign(i) { -x } else { x }).sum();
        (s / n as f64).abs() >= threshold
    };
    let exhaustive = n < 63 && (1u64 << n) <= n_perm as u64 + 1;
    let (hits, evaluated) = if exhaustive {
        let total = 1u64 << n;
        let hits = (0..total).filter(|&m| flipped(&|i| m >> i & 1 == 1)).count() as u64;
        (hits, total)
    } else {
        let mut rng = SeedStream::new(seed).substream("permutation", 0);
        let mut hits = 1u64;
        for _ in 0..n_perm {
            let signs: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            if flipped(&|i| signs[i]) {
                hits += 1;
            }
        }
        (hits, n_perm as u64 + 1)
    };
    Ok(PermutationTest {
        statistic: stat,
        p_value: hits as f64 / evaluated as f64,
        exhaustive,
        degenerate: false,
        evaluated,
    })
}

/// One line of the variant comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub variant: Variant,
    pub omitted_effects: String,
    pub average_score: Option<f64>,
    /// Against the full model on weeks where both fitted; `None` for the
    /// full model itself.
    pub p_value: Option<f64>,
    pub weeks: usize,
}

pub fn score_table(result: &RollingForecast, n_perm: usize, seed: u64) -> Result<Vec<ScoreRow>> {
    let full = result.scores(Variant::Full);
    let mut out = Vec::new();
    for (variant, _) in &result.lambda {
        let scores = result.scores(*variant);
        let weeks = scores.iter().flatten().count();
        let p_value = if *variant == Variant::Full {
            None
        } else {
            let (f, a): (Vec<f64>, Vec<f64>) = full
                .iter()
                .zip(&scores)
                .filter_map(|(f, a)| Some(((*f)?, (*a)?)))
                .unzip();
            if f.len() >= 2 {
                Some(permutation_test(&f, &a, n_perm, seed)?.p_value)
            } else {
                None
            }
        };
        out.push(ScoreRow {
            variant: *variant,
            omitted_effects: variant.omitted_effects().into(),
            average_score: result.average_score(*variant),
            p_value,
            weeks,
        });
    }
    Ok(out)
}

/// Generating coefficients on the raw covariate scale, per logit
/// (free, noncovid).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcuTruth {
    pub intercept: [f64; 2],
    /// Coefficients of the previous free and COVID shares.
    pub ar: [[f64; 2]; 2],
    /// Coefficients of `log(Y + δ)` per age group.
    pub incidence: [[f64; 4]; 2],
    pub spatial_amplitude: [f64; 2],
    pub re_sd: f64,
    /// Mean log incidence per 100,000 by age group.
    pub log_incidence_mean: [f64; 4],
    pub incidence_district_sd: f64,
    pub incidence_wave: f64,
    pub incidence_rho: f64,
    pub incidence_sd: f64,
}

impl IcuTruth {
    pub fn spatial(&self, l: usize, lon: f64, lat: f64) -> f64 {
        let base = if l == 0 {
            (1.1 * lon).sin() + (1.4 * lat).cos()
        } else {
            (0.9 * lon + 0.5 * lat).cos()
        };
        self.spatial_amplitude[l] * base
    }

    /// Exchangeable categories: every coefficient and effect zero.
    pub fn null() -> Self {
        Self {
            intercept: [0.0; 2],
            ar: [[0.0; 2]; 2],
            incidence: [[0.0; 4]; 2],
            spatial_amplitude: [0.0; 2],
            re_sd: 0.0,
            ..IcuSimConfig::default().truth
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcuSimConfig {
    pub first_week: NaiveDate,
    pub weeks: usize,
    pub districts: usize,
    pub min_beds: u32,
    pub max_beds: u32,
    pub delta: f64,
    pub seed: u64,
    pub truth: IcuTruth,
}

impl Default for IcuSimConfig {
    fn default() -> Self {
        Self {
            first_week: NaiveDate::from_ymd_opt(2021, 3, 1).expect("valid date"),
            weeks: 40,
            districts: 100,
            min_beds: 15,
            max_beds: 80,
            delta: DEFAULT_DELTA,
            seed: 20210301,
            truth: IcuTruth {
                intercept: [2.5, 3.5],
                ar: [[2.5, -1.0], [0.5, -2.0]],
                incidence: [[-0.15, -0.2, -0.25, -0.1], [-0.1, -0.15, -0.2, -0.1]],
                spatial_amplitude: [0.3, 0.3],
                re_sd: 0.3,
                log_incidence_mean: [4.0, 3.8, 3.4, 3.6],
                incidence_district_sd: 0.4,
                incidence_wave: 0.8,
                incidence_rho: 0.7,
                incidence_sd: 0.3,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct IcuSimulation {
    pub panel: IcuPanel,
    /// District random effects per logit.
    pub district_effects: Vec<[f64; 2]>,
}

/// Category probabilities `(free, covid, noncovid)` for linear predictors
/// of the free and non-COVID logits.
fn softmax3(eta_free: f64, eta_noncovid: f64) -> [f64; 3] {
    let m = eta_free.max(eta_noncovid).max(0.0);
    let e = [(eta_free - m).exp(), (-m).exp(), (eta_noncovid - m).exp()];
    let s: f64 = e.iter().sum();
    [e[0] / s, e[1] / s, e[2] / s]
}

pub fn simulate_icu(cfg: &IcuSimConfig) -> Result<IcuSimulation> {
    let t = &cfg.truth;
    let seeds = SeedStream::new(cfg.seed);
    let mut rng = seeds.substream("districts", 0);
    let mut coords = Vec::with_capacity(cfg.districts);
    let mut beds = Vec::with_capacity(cfg.districts);
    let mut effects = Vec::with_capacity(cfg.districts);
    let mut level = Vec::with_capacity(cfg.districts);
    for _ in 0..cfg.districts {
        coords.push((rng::uniform(&mut rng, 9.0, 13.8), rng::uniform(&mut rng, 47.3, 50.5)));
        let span = f64::from(cfg.max_beds - cfg.min_beds + 1);
        beds.push(u64::from(cfg.min_beds) + rng::uniform(&mut rng, 0.0, span).floor() as u64);
        effects.push([
            t.re_sd * rng::standard_normal(&mut rng),
            t.re_sd * rng::standard_normal(&mut rng),
        ]);
        level.push(t.incidence_district_sd * rng::standard_normal(&mut rng));
    }
    let weeks: Vec<NaiveDate> = (0..cfg.weeks)
        .map(|w| cfg.first_week + Days::new(7 * w as u64))
        .collect();
    let districts: Vec<String> = (1..=cfg.districts).map(|r| format!("D{r:03}")).collect();
    let mut panel = IcuPanel::zeros(weeks, districts, coords.clone())?;
    let mut noise = vec![[0.0f64; 4]; cfg.districts];
    for w in 0..cfg.weeks {
        let mut rng = seeds.substream("week", w as u64);
        let wave = t.incidence_wave * (2.0 * std::f64::consts::PI * w as f64 / 26.0).sin();
        for r in 0..cfg.districts {
            let mut y = [0.0; 4];
            for a in 0..4 {
                let e = t.incidence_sd * rng::standard_normal(&mut rng);
                noise[r][a] = if w == 0 { e } else { t.incidence_rho * noise[r][a] + e };
                y[a] = (t.log_incidence_mean[a] + level[r] + wave + noise[r][a]).exp();
            }
            panel.set_incidence(w, r, y)?;
            let (lon, lat) = coords[r];
            let (shares, lag_y) = if w == 0 {
                ([1.0 / 3.0; 2], y)
            } else {
                let z = panel.beds(w - 1, r);
                let n: f64 = z.iter().sum();
                ([z[0] / n, z[1] / n], panel.incidence(w - 1, r))
            };
            let eta: Vec<f64> = (0..2)
                .map(|l| {
                    t.intercept[l]
                        + t.ar[l][0] * shares[0]
                        + t.ar[l][1] * shares[1]
                        + (0..4).map(|a| t.incidence[l][a] * (lag_y[a] + cfg.delta).ln()).sum::<f64>()
                        + t.spatial(l, lon, lat)
                        + effects[r][l]
                })
                .collect();
            let p = softmax3(eta[0], eta[1]);
            let z = rng::multinomial(&mut rng, beds[r], &p);
            panel.set_beds(w, r, [z[0] as f64, z[1] as f64, z[2] as f64])?;
        }
    }
    Ok(IcuSimulation {
        panel,
        district_effects: effects,
    })
}

/// Normalized-scale targets of the generating coefficients for a design:
/// `(logit, covariate, value)`, raw coefficient times the covariate's
/// standard deviation on the design rows.
pub fn normalized_truth(truth: &IcuTruth, design: &IcuDesign) -> Vec<(String, String, f64)> {
    let names = raw_names();
    let logits = ["free", "noncovid"];
    let mut out = Vec::new();
    for (l, logit) in logits.iter().enumerate() {
        for (name, s) in &design.stats {
            let k = names.iter().position(|n| n == name).expect("known covariate");
            let raw = if k < 2 { truth.ar[l][k] } else { truth.incidence[l][k - 2] };
            out.push((logit.to_string(), name.clone(), raw * s.sd));
        }
    }
    out
}

/// Mean over rows of `probs` of the predicted pairwise covariances
/// `−N π_k π_l`; all negative for interior probabilities.
pub fn predicted_covariances(probs: &DMatrix<f64>, trials: &[f64]) -> DVector<f64> {
    let mut out = DVector::zeros(3);
    let pairs = [(0, 1), (0, 2), (1, 2)];
    for (i, n) in trials.iter().enumerate() {
        for (k, &(a, b)) in pairs.iter().enumerate() {
            out[k] -= n * probs[(i, a)] * probs[(i, b)];
        }
    }
    out / trials.len().max(1) as f64
}
