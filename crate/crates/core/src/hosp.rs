//! Negative-binomial model for reported hospitalisations by day, district
//! and age/gender cell, with the reporting delay absorbed in the offset:
//!
//! ```text
//! C[t,r,g] ~ NB(μ, θ)
//! log μ = log(pop[r,g] · F̂[t,g'](T − t)) + θ₀ + age + gender + age:gender
//!         + weekday(t) + s₁(t) + s₂(lon, lat) + u_r
//! ```
//!
//! `g'` is the coarse nowcast age group of `g`. With `F̂ = 1` the model
//! treats the reported counts as final.

use chrono::{Datelike, NaiveDate};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BSplineSpec, BasisError, RandomInterceptSpec, ThinPlateSpec, DEFAULT_1D_BASIS, DEFAULT_TPS_RANK};
use crate::design::{CompiledDesign, DesignError, DesignMatrix, DesignSpec, Frame, TermSpec};
use crate::glm::{fit_negative_binomial, FitOptions, FitResult, GlmError, Smoothing};
use crate::infection::Z975;
use crate::nowcast::{
    add_days, hazards_from_pmf, AgeMap, LineRecord, NowcastError, ReportingCdfTable, ReportingTriangle,
    NOWCAST_AGE_GROUPS,
};
use crate::rng::{self, SeedStream};

pub const FINE_AGE_GROUPS: [&str; 5] = ["0-14", "15-34", "35-59", "60-79", "80+"];
pub const GENDERS: [&str; 2] = ["M", "F"];
pub const REFERENCE_AGE: &str = "15-34";
pub const REFERENCE_GENDER: &str = "M";
pub const WEEKDAYS: [&str; 7] = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"];

#[derive(Debug, Error)]
pub enum HospError {
    #[error("panel has no {0}")]
    Empty(&'static str),
    #[error("{what}: expected {expected} values, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid count {value} on day {t}, district '{district}'")]
    BadCount { t: usize, district: String, value: f64 },
    #[error("age group '{0}' has no coarse mapping")]
    UnknownAge(String),
    #[error("reporting CDF table does not cover {0}")]
    CdfTable(String),
    #[error("reference level '{0}' missing")]
    Reference(String),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Fit(#[from] GlmError),
    #[error(transparent)]
    Nowcast(#[from] NowcastError),
}

pub type Result<T> = std::result::Result<T, HospError>;

/// Reported counts `C[t,r,g]` for event days `t = 1..T−1`, complete over
/// districts and age × gender cells. Cell `g = age_index · |genders| +
/// gender_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct HospPanel {
    pub start: NaiveDate,
    pub as_of: NaiveDate,
    pub districts: Vec<String>,
    pub coords: Vec<(f64, f64)>,
    pub ages: Vec<String>,
    pub genders: Vec<String>,
    /// `R × G`.
    pub population: DMatrix<f64>,
    counts: Vec<f64>,
}

impl HospPanel {
    pub fn zeros(
        start: NaiveDate,
        as_of: NaiveDate,
        districts: Vec<String>,
        coords: Vec<(f64, f64)>,
        ages: Vec<String>,
        genders: Vec<String>,
        population: DMatrix<f64>,
    ) -> Result<Self> {
        let days = (as_of - start).num_days();
        if days < 1 {
            return Err(HospError::Empty("days before the current date"));
        }
        if districts.is_empty() {
            return Err(HospError::Empty("districts"));
        }
        if coords.len() != districts.len() {
            return Err(HospError::Shape {
                what: "coordinates",
                expected: districts.len(),
                got: coords.len(),
            });
        }
        let g = ages.len() * genders.len();
        if population.shape() != (districts.len(), g) {
            return Err(HospError::Shape {
                what: "population cells",
                expected: districts.len() * g,
                got: population.len(),
            });
        }
        let n = days as usize * districts.len() * g;
        Ok(Self {
            start,
            as_of,
            districts,
            coords,
            ages,
            genders,
            population,
            counts: vec![0.0; n],
        })
    }

    pub fn days(&self) -> usize {
        (self.as_of - self.start).num_days() as usize
    }

    pub fn cells(&self) -> usize {
        self.ages.len() * self.genders.len()
    }

    pub fn cell(&self, g: usize) -> (&str, &str) {
        let k = self.genders.len();
        (&self.ages[g / k], &self.genders[g % k])
    }

    pub fn cell_index(&self, age: &str, gender: &str) -> Option<usize> {
        let a = self.ages.iter().position(|x| x == age)?;
        let s = self.genders.iter().position(|x| x == gender)?;
        Some(a * self.genders.len() + s)
    }

    fn idx(&self, t: usize, r: usize, g: usize) -> usize {
        ((t - 1) * self.districts.len() + r) * self.cells() + g
    }

    pub fn get(&self, t: usize, r: usize, g: usize) -> f64 {
        self.counts[self.idx(t, r, g)]
    }

    pub fn set(&mut self, t: usize, r: usize, g: usize, v: f64) {
        let i = self.idx(t, r, g);
        self.counts[i] = v;
    }

    pub fn add(&mut self, t: usize, r: usize, g: usize, v: f64) {
        let i = self.idx(t, r, g);
        self.counts[i] += v;
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn date(&self, t: usize) -> NaiveDate {
        add_days(self.start, t - 1)
    }
}

/// Aggregates a line list into panel counts using the triangle rules:
/// delays floored at 1, delays beyond `dmax` and reports after the current
/// date excluded. Records must carry admission dates.
pub fn panel_counts_from_line_list(panel: &mut HospPanel, records: &[LineRecord], dmax: usize) -> usize {
    let mut used = 0;
    for r in records {
        let Some(event) = r.admission_date else { continue };
        let raw = (r.report_date - event).num_days();
        let t = (event - panel.start).num_days() + 1;
        if raw < 0 || raw.max(1) as usize > dmax || t < 1 || t as usize > panel.days() || r.report_date > panel.as_of {
            continue;
        }
        let Some(d) = panel.districts.iter().position(|x| *x == r.district) else { continue };
        let Some(g) = panel.cell_index(&r.age_group, &r.gender) else { continue };
        panel.add(t as usize, d, g, 1.0);
        used += 1;
    }
    used
}

#[derive(Debug, Clone)]
pub struct HospConfig {
    pub age_map: AgeMap,
    pub reference_age: String,
    pub reference_gender: String,
    pub time_basis: usize,
    pub tps_rank: usize,
}

impl Default for HospConfig {
    fn default() -> Self {
        Self {
            age_map: AgeMap::default(),
            reference_age: REFERENCE_AGE.into(),
            reference_gender: REFERENCE_GENDER.into(),
            time_basis: DEFAULT_1D_BASIS,
            tps_rank: DEFAULT_TPS_RANK,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HospDesign {
    pub compiled: CompiledDesign,
    pub design: DesignMatrix,
    pub y: Vec<f64>,
    /// District index per row.
    pub groups: Vec<usize>,
    /// `(t, r, g)` per row.
    pub rows: Vec<(usize, usize, usize)>,
    pub dropped_zero_population: usize,
    pub weekday_levels: Vec<String>,
    pub notes: Vec<String>,
}

fn weekday_of(date: NaiveDate) -> String {
    WEEKDAYS[date.weekday().num_days_from_monday() as usize].to_string()
}

/// Rows, response, offset and model terms. The offset is
/// `log(pop · F̂[t, coarse(g)])`.
pub fn build_hosp_design(panel: &HospPanel, cdf: &ReportingCdfTable, cfg: &HospConfig) -> Result<HospDesign> {
    let days = panel.days();
    if cdf.start != panel.start || cdf.days() < days {
        return Err(HospError::CdfTable(format!("days 1..={days} from {}", panel.start)));
    }
    if !panel.ages.contains(&cfg.reference_age) {
        return Err(HospError::Reference(cfg.reference_age.clone()));
    }
    if !panel.genders.contains(&cfg.reference_gender) {
        return Err(HospError::Reference(cfg.reference_gender.clone()));
    }
    let mut coarse = Vec::with_capacity(panel.cells());
    for g in 0..panel.cells() {
        let age = panel.cell(g).0;
        let c = cfg
            .age_map
            .coarse_of(age)
            .map_err(|_| HospError::UnknownAge(age.to_string()))?;
        if !cdf.age_groups.iter().any(|x| x == c) {
            return Err(HospError::CdfTable(format!("age group {c}")));
        }
        coarse.push(c.to_string());
    }
    let mut rows = Vec::new();
    let mut y = Vec::new();
    let mut offset = Vec::new();
    let mut dropped = 0;
    for t in 1..=days {
        for r in 0..panel.districts.len() {
            for (g, c) in coarse.iter().enumerate() {
                let pop = panel.population[(r, g)];
                if !(pop > 0.0) {
                    dropped += 1;
                    continue;
                }
                let v = panel.get(t, r, g);
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(HospError::BadCount {
                        t,
                        district: panel.districts[r].clone(),
                        value: v,
                    });
                }
                let f = cdf.get(t, c).ok_or_else(|| HospError::CdfTable(format!("day {t}")))?;
                rows.push((t, r, g));
                y.push(v);
                offset.push((pop * f).ln());
            }
        }
    }
    if rows.is_empty() {
        return Err(HospError::Empty("rows with positive population"));
    }
    let mut notes = Vec::new();
    if dropped > 0 {
        notes.push(format!("{dropped} zero-population cells dropped"));
    }
    let weekday_levels: Vec<String> = WEEKDAYS
        .iter()
        .filter(|w| rows.iter().any(|&(t, _, _)| weekday_of(panel.date(t)) == **w))
        .map(|w| w.to_string())
        .collect();
    let frame = hosp_frame(panel, &rows, &weekday_levels)?;

    let mut spec = DesignSpec::new()
        .factor("age", panel.ages.clone(), Some(&cfg.reference_age))
        .factor("gender", panel.genders.clone(), Some(&cfg.reference_gender))
        .term(
            "age:gender",
            TermSpec::Interaction {
                a: "age".into(),
                a_levels: panel.ages.clone(),
                a_ref: cfg.reference_age.clone(),
                b: "gender".into(),
                b_levels: panel.genders.clone(),
                b_ref: cfg.reference_gender.clone(),
            },
        );
    if weekday_levels.len() > 1 {
        spec = spec.factor("weekday", weekday_levels.clone(), Some(&weekday_levels[0]));
    }
    if days >= 4 {
        spec = spec.term(
            "time",
            TermSpec::BSpline {
                var: "t".into(),
                spec: BSplineSpec::cubic(cfg.time_basis, 1.0, days as f64)?,
                centered: true,
                by: None,
            },
        );
    } else {
        notes.push("fewer than 4 days: time smooth dropped".into());
    }
    let spatial = ThinPlateSpec::new(panel.coords.clone(), cfg.tps_rank);
    let distinct = spatial.distinct_centers().len();
    if distinct >= 4 {
        let rank = cfg.tps_rank.min(distinct);
        spec = spec.term(
            "spatial",
            TermSpec::ThinPlate {
                var: "loc".into(),
                spec: ThinPlateSpec::new(panel.coords.clone(), rank),
                centered: true,
            },
        );
    } else {
        notes.push(format!("{distinct} distinct district locations: spatial smooth dropped"));
    }
    if panel.districts.len() > 1 {
        spec = spec.term(
            "district",
            TermSpec::RandomIntercept {
                var: "district".into(),
                spec: RandomInterceptSpec::new(panel.districts.clone())?,
            },
        );
    } else {
        notes.push("single district: random intercepts dropped".into());
    }
    let compiled = spec.compile(&frame)?;
    let design = compiled.matrix(&frame, Some(offset))?;
    Ok(HospDesign {
        compiled,
        design,
        y,
        groups: rows.iter().map(|r| r.1).collect(),
        rows,
        dropped_zero_population: dropped,
        weekday_levels,
        notes,
    })
}

fn hosp_frame(panel: &HospPanel, rows: &[(usize, usize, usize)], weekday_levels: &[String]) -> Result<Frame> {
    let n = rows.len();
    let mut age = Vec::with_capacity(n);
    let mut gender = Vec::with_capacity(n);
    let mut wd = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    let mut loc = Vec::with_capacity(n);
    let mut district = Vec::with_capacity(n);
    for &(ti, r, g) in rows {
        let (a, s) = panel.cell(g);
        age.push(a.to_string());
        gender.push(s.to_string());
        let w = weekday_of(panel.date(ti));
        wd.push(if weekday_levels.contains(&w) { w } else { weekday_levels.first().cloned().unwrap_or(w) });
        t.push(ti as f64);
        loc.push(panel.coords[r]);
        district.push(panel.districts[r].clone());
    }
    Ok(Frame::new(n)
        .with_factor("age", age)?
        .with_factor("gender", gender)?
        .with_factor("weekday", wd)?
        .with_numeric("t", t)?
        .with_coords("loc", loc)?
        .with_factor("district", district)?)
}

/// NB fit with θ estimation and GCV smoothing; sandwich grouped by district.
pub fn fit_hosp_model(design: &HospDesign, smoothing: &Smoothing) -> Result<FitResult> {
    let opts = FitOptions::default().with_groups(design.groups.clone());
    Ok(fit_negative_binomial(&design.design, &design.y, smoothing, &opts)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgeGenderEffect {
    pub age_group: String,
    pub gender: String,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub t: usize,
    pub date: NaiveDate,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurfacePoint {
    pub lon: f64,
    pub lat: f64,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistrictEffect {
    pub district: String,
    pub lon: f64,
    pub lat: f64,
    pub spatial: f64,
    pub u_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelEffect {
    pub level: String,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectGrids {
    pub age_gender: Vec<AgeGenderEffect>,
    pub time: Vec<CurvePoint>,
    pub spatial: Vec<SurfacePoint>,
    pub districts: Vec<DistrictEffect>,
    pub weekday: Vec<LevelEffect>,
}

fn contrast_se(fit: &FitResult, c: &DVector<f64>) -> f64 {
    (c.transpose() * &fit.cov_model * c)[(0, 0)].max(0.0).sqrt()
}

fn term_block(design: &DesignMatrix, name: &str) -> Option<(usize, usize)> {
    design.term(name).map(|r| (r.start, r.len))
}

/// Plot-ready effect tables; `grid` is the side length of the spatial grid.
pub fn effect_grids(panel: &HospPanel, design: &HospDesign, fit: &FitResult, grid: usize) -> Result<EffectGrids> {
    let p = fit.beta.len();
    let col = |name: String| fit.coefficient_index(&name);
    let mut age_gender = Vec::new();
    for g in 0..panel.cells() {
        let (a, s) = panel.cell(g);
        let mut c = DVector::zeros(p);
        for name in [format!("age[{a}]"), format!("gender[{s}]"), format!("age:gender[{a}:{s}]")] {
            if let Some(j) = col(name) {
                c[j] = 1.0;
            }
        }
        age_gender.push(AgeGenderEffect {
            age_group: a.into(),
            gender: s.into(),
            estimate: c.dot(&fit.beta),
            se: contrast_se(fit, &c),
        });
    }

    let curve = |term: &str, frame: &Frame| -> Result<Option<(DVector<f64>, Vec<f64>)>> {
        let Some((start, len)) = term_block(&design.design, term) else { return Ok(None) };
        let b = design.compiled.term_matrix(term, frame)?;
        let beta = fit.beta.rows(start, len);
        let v = fit.cov_model.view((start, start), (len, len));
        let est = &b * beta;
        let bv = &b * v;
        let se = (0..b.nrows()).map(|i| bv.row(i).dot(&b.row(i)).max(0.0).sqrt()).collect();
        Ok(Some((est, se)))
    };

    let days = panel.days();
    let tf = Frame::new(days).with_numeric("t", (1..=days).map(|t| t as f64).collect())?;
    let time = match curve("time", &tf)? {
        Some((est, se)) => (1..=days)
            .map(|t| CurvePoint {
                t,
                date: panel.date(t),
                estimate: est[t - 1],
                ci_lo: est[t - 1] - Z975 * se[t - 1],
                ci_hi: est[t - 1] + Z975 * se[t - 1],
            })
            .collect(),
        None => Vec::new(),
    };

    let (lo_lon, hi_lon, lo_lat, hi_lat) = panel.coords.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
    );
    let mut pts = Vec::with_capacity(grid * grid);
    let step = |lo: f64, hi: f64, i: usize| if grid > 1 { lo + (hi - lo) * i as f64 / (grid - 1) as f64 } else { lo };
    for i in 0..grid {
        for j in 0..grid {
            pts.push((step(lo_lon, hi_lon, j), step(lo_lat, hi_lat, i)));
        }
    }
    let sf = Frame::new(pts.len()).with_coords("loc", pts.clone())?;
    let spatial = match curve("spatial", &sf)? {
        Some((est, _)) => pts
            .iter()
            .zip(est.iter())
            .map(|(&(lon, lat), &e)| SurfacePoint { lon, lat, estimate: e })
            .collect(),
        None => Vec::new(),
    };

    let df = Frame::new(panel.districts.len()).with_coords("loc", panel.coords.clone())?;
    let at_districts = curve("spatial", &df)?.map(|c| c.0);
    let re = term_block(&design.design, "district");
    let districts = panel
        .districts
        .iter()
        .enumerate()
        .map(|(r, name)| DistrictEffect {
            district: name.clone(),
            lon: panel.coords[r].0,
            lat: panel.coords[r].1,
            spatial: at_districts.as_ref().map_or(0.0, |v| v[r]),
            u_r: re.map_or(0.0, |(s, _)| fit.beta[s + r]),
        })
        .collect();

    let weekday = design
        .weekday_levels
        .iter()
        .map(|l| match col(format!("weekday[{l}]")) {
            Some(j) => LevelEffect {
                level: l.clone(),
                estimate: fit.beta[j],
                se: fit.se_model(j),
            },
            None => LevelEffect {
                level: l.clone(),
                estimate: 0.0,
                se: 0.0,
            },
        })
        .collect();
    Ok(EffectGrids {
        age_gender,
        time,
        spatial,
        districts,
        weekday,
    })
}

/// Ground truth of a synthetic hospitalisation data set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HospTruth {
    pub intercept: f64,
    /// Per fine age group, reference first at zero.
    pub age_effects: Vec<(String, f64)>,
    pub gender_effect: f64,
    /// Female × age interaction per fine age group.
    pub interaction: Vec<(String, f64)>,
    /// Monday first.
    pub weekday: Vec<f64>,
    pub trend_slope: f64,
    pub trend_amplitude: f64,
    pub trend_period: f64,
    pub re_sd: f64,
    pub theta: f64,
    /// Delay pmf over `1..=dmax` per coarse age group.
    pub delay_pmf: Vec<Vec<f64>>,
}

impl HospTruth {
    pub fn trend(&self, t: usize) -> f64 {
        let t = t as f64;
        self.trend_slope * t + self.trend_amplitude * (2.0 * std::f64::consts::PI * t / self.trend_period).sin()
    }

    pub fn spatial(lon: f64, lat: f64) -> f64 {
        0.25 * (1.3 * lon).sin() + 0.2 * (1.7 * lat).cos()
    }

    pub fn hazards(&self, a: usize) -> Vec<f64> {
        hazards_from_pmf(&self.delay_pmf[a])
    }
}

/// Discretized gamma-shaped pmf on `1..=dmax`.
pub fn gamma_delay_pmf(shape: f64, scale: f64, dmax: usize) -> Vec<f64> {
    let w: Vec<f64> = (1..=dmax)
        .map(|d| {
            let x = d as f64 - 0.5;
            x.powf(shape - 1.0) * (-x / scale).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HospSimConfig {
    pub start: NaiveDate,
    /// Event days; the current date is the day after the last one.
    pub days: usize,
    pub districts: usize,
    pub dmax: usize,
    pub base_population: f64,
    /// Share of records whose admission date is withheld.
    pub missing_admission: f64,
    pub seed: u64,
    pub truth: HospTruth,
}

impl Default for HospSimConfig {
    fn default() -> Self {
        let dmax = crate::nowcast::DEFAULT_DMAX;
        Self {
            start: NaiveDate::from_ymd_opt(2021, 9, 24).expect("valid date"),
            days: 56,
            districts: 50,
            dmax,
            base_population: 1e5,
            missing_admission: 0.0,
            seed: 20211119,
            truth: HospTruth {
                intercept: -11.6,
                age_effects: vec![
                    ("0-14".into(), -1.0),
                    ("15-34".into(), 0.0),
                    ("35-59".into(), 0.6),
                    ("60-79".into(), 1.7),
                    ("80+".into(), 2.5),
                ],
                gender_effect: -0.3,
                interaction: vec![
                    ("0-14".into(), 0.2),
                    ("15-34".into(), 0.0),
                    ("35-59".into(), -0.1),
                    ("60-79".into(), -0.2),
                    ("80+".into(), 0.1),
                ],
                weekday: vec![0.0, 0.05, 0.05, 0.0, -0.05, -0.3, -0.4],
                trend_slope: 0.025,
                trend_amplitude: 0.1,
                trend_period: 30.0,
                re_sd: 0.15,
                theta: 10.0,
                delay_pmf: vec![gamma_delay_pmf(1.3, 5.0, dmax), gamma_delay_pmf(1.6, 6.0, dmax)],
            },
        }
    }
}

/// Age shares of the population by fine group.
const AGE_SHARES: [f64; 5] = [0.14, 0.24, 0.34, 0.2, 0.08];

#[derive(Debug, Clone)]
pub struct HospSimulation {
    pub line_list: Vec<LineRecord>,
    /// Panel of counts reported by the current date.
    pub panel: HospPanel,
    /// Final counts `H[t,r,g]` (reported within `dmax`), same layout.
    pub final_counts: HospPanel,
    /// Expected counts `E H[t,r,g]`, same layout.
    pub expected: HospPanel,
    /// Triangle of the reported records.
    pub triangle: ReportingTriangle,
    pub district_effects: Vec<f64>,
}

impl HospSimulation {
    pub fn as_of(&self) -> NaiveDate {
        self.panel.as_of
    }
}

pub fn simulate_hospitalisations(cfg: &HospSimConfig) -> Result<HospSimulation> {
    let truth = &cfg.truth;
    let seeds = SeedStream::new(cfg.seed);
    let mut rng = seeds.substream("districts", 0);
    let districts: Vec<String> = (1..=cfg.districts).map(|r| format!("D{r:03}")).collect();
    let mut coords = Vec::with_capacity(cfg.districts);
    let mut effects = Vec::with_capacity(cfg.districts);
    let mut pop = DMatrix::zeros(cfg.districts, FINE_AGE_GROUPS.len() * GENDERS.len());
    for r in 0..cfg.districts {
        let lon = rng::uniform(&mut rng, 9.0, 13.8);
        let lat = rng::uniform(&mut rng, 47.3, 50.5);
        coords.push((lon, lat));
        effects.push(truth.re_sd * rng::standard_normal(&mut rng));
        let size = cfg.base_population * rng::uniform(&mut rng, -0.5, 0.5).exp();
        for (a, share) in AGE_SHARES.iter().enumerate() {
            for s in 0..GENDERS.len() {
                pop[(r, a * GENDERS.len() + s)] = (size * share * 0.5).round();
            }
        }
    }
    let as_of = add_days(cfg.start, cfg.days);
    let ages: Vec<String> = FINE_AGE_GROUPS.iter().map(|s| s.to_string()).collect();
    let genders: Vec<String> = GENDERS.iter().map(|s| s.to_string()).collect();
    let mk = || HospPanel::zeros(cfg.start, as_of, districts.clone(), coords.clone(), ages.clone(), genders.clone(), pop.clone());
    let mut panel = mk()?;
    let mut final_counts = mk()?;
    let mut expected = mk()?;
    let groups: Vec<String> = NOWCAST_AGE_GROUPS.iter().map(|s| s.to_string()).collect();
    let mut triangle = ReportingTriangle::zeros(cfg.start, cfg.days + 1, cfg.dmax, groups)?;
    let map = AgeMap::default();
    let age_eff = |a: &str| truth.age_effects.iter().find(|x| x.0 == a).map_or(0.0, |x| x.1);
    let inter = |a: &str| truth.interaction.iter().find(|x| x.0 == a).map_or(0.0, |x| x.1);
    let mut line_list = Vec::new();
    let mut case = 0usize;
    for t in 1..=cfg.days {
        let mut rng = seeds.substream("cases", t as u64);
        let date = panel.date(t);
        let wd = truth.weekday[date.weekday().num_days_from_monday() as usize];
        for r in 0..cfg.districts {
            let (lon, lat) = coords[r];
            for g in 0..panel.cells() {
                let (a, s) = (ages[g / GENDERS.len()].as_str(), genders[g % GENDERS.len()].as_str());
                let female = s == "F";
                let eta = truth.intercept
                    + age_eff(a)
                    + if female { truth.gender_effect + inter(a) } else { 0.0 }
                    + wd
                    + truth.trend(t)
                    + HospTruth::spatial(lon, lat)
                    + effects[r];
                let mean = pop[(r, g)] * eta.exp();
                expected.set(t, r, g, mean);
                let h = rng::negative_binomial(&mut rng, mean, truth.theta) as u64;
                final_counts.set(t, r, g, h as f64);
                if h == 0 {
                    continue;
                }
                let ca = map.index_of(a)?;
                let delays = rng::multinomial(&mut rng, h, &truth.delay_pmf[ca]);
                for (k, &n) in delays.iter().enumerate() {
                    let d = k + 1;
                    let report = add_days(date, d);
                    if report > as_of {
                        continue;
                    }
                    triangle.add(t, ca, d, n as f64);
                    panel.add(t, r, g, n as f64);
                    for _ in 0..n {
                        case += 1;
                        let lag = (rng::uniform(&mut rng, 0.0, 3.0)).floor() as u64;
                        let infection = date - chrono::Days::new(lag);
                        let missing = cfg.missing_admission > 0.0 && rng::uniform(&mut rng, 0.0, 1.0) < cfg.missing_admission;
                        line_list.push(LineRecord {
                            case_id: format!("H{case:07}"),
                            admission_date: (!missing).then_some(date),
                            infection_report_date: Some(infection),
                            report_date: report,
                            age_group: a.to_string(),
                            gender: s.to_string(),
                            district: districts[r].clone(),
                        });
                    }
                }
            }
        }
    }
    triangle.diagnostics.used = line_list.len();
    Ok(HospSimulation {
        line_list,
        panel,
        final_counts,
        expected,
        triangle,
        district_effects: effects,
    })
}
