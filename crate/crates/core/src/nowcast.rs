//! Reporting-delay nowcasting with a sequential binomial delay model.
//!
//! Day `t = 1` is the first day of the window and `T` is the index of the
//! current date. An event on day `t` that is reported on day `t + d` has
//! delay `d ≥ 1`; same-day reports count as `d = 1`. The cell `(t, d)` is
//! observed when `t + d ≤ T`. With `p(d) = P(D = d | D ≤ d)`,
//!
//! ```text
//! F(d) = Π_{k=d+1}^{d_max} (1 − p(k)),     E(H_t) = E(C_{t,d}) / F(d)
//! N[t,a,d] ~ Binomial(C[t,a,d], p_{t,a}(d)),  d ≥ 2
//! logit p = θ₀ + s₁(t) + s₂(d) + s₃(d)·I(60+) + weekday(t) + weekday(t+d)
//! ```
//!
//! `p(1) = 1` by construction, so `d = 1` cells carry no information and are
//! left out of the likelihood.

use std::collections::BTreeMap;

use chrono::{Datelike, Days, NaiveDate, Weekday};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{BSplineSpec, BasisError, TruncatedLinearSpec};
use crate::design::{CompiledDesign, DesignError, DesignSpec, Frame, TermSpec};
use crate::family::{logistic, Family};
use crate::glm::{fit_pirls, FitOptions, FitResult, GlmError, Smoothing};
use crate::linalg::{clip_psd, psd_factor};
use crate::rng::{self, SeedStream};

pub const DEFAULT_DMAX: usize = 40;
pub const DEFAULT_BOOTSTRAP: usize = 1000;
pub const MIN_BOOTSTRAP: usize = 200;
/// Nowcasts whose reporting CDF falls below this are flagged.
pub const UNSTABLE_F: f64 = 0.01;
pub const NOWCAST_AGE_GROUPS: [&str; 2] = ["0-59", "60+"];
pub const OLD_AGE_GROUP: &str = "60+";
/// Label of the summed-over-ages series.
pub const ALL_AGES: &str = "all";

#[derive(Debug, Error)]
pub enum NowcastError {
    #[error("d_max must be at least {min}, got {got}")]
    BadDmax { min: usize, got: usize },
    #[error("current date {as_of} must be at least one day after the window start {start}")]
    BadWindow { start: NaiveDate, as_of: NaiveDate },
    #[error("age group '{0}' has no coarse mapping")]
    UnknownAge(String),
    #[error("no cells with positive trials at delay ≥ 2")]
    EmptyModel,
    #[error("day {t} outside 1..={days}")]
    DayOutOfRange { t: usize, days: usize },
    #[error("delay {d} outside 1..={dmax}")]
    DelayOutOfRange { d: usize, dmax: usize },
    #[error("bootstrap needs at least {MIN_BOOTSTRAP} replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("triangle and delay model disagree on {0}")]
    Mismatch(&'static str),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("delay model: {0}")]
    Fit(#[from] GlmError),
}

pub type Result<T> = std::result::Result<T, NowcastError>;

/// Map from fine age labels to the two coarse nowcast groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeMap {
    pub coarse: BTreeMap<String, String>,
}

impl Default for AgeMap {
    fn default() -> Self {
        let pairs = [
            ("0-14", "0-59"),
            ("15-34", "0-59"),
            ("35-59", "0-59"),
            ("60-79", "60+"),
            ("80+", "60+"),
            ("0-59", "0-59"),
            ("60+", "60+"),
        ];
        Self {
            coarse: pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
        }
    }
}

impl AgeMap {
    pub fn coarse_of(&self, age: &str) -> Result<&str> {
        self.coarse
            .get(age)
            .map(String::as_str)
            .ok_or_else(|| NowcastError::UnknownAge(age.to_string()))
    }

    /// Index into [`NOWCAST_AGE_GROUPS`].
    pub fn index_of(&self, age: &str) -> Result<usize> {
        let c = self.coarse_of(age)?;
        NOWCAST_AGE_GROUPS
            .iter()
            .position(|g| *g == c)
            .ok_or_else(|| NowcastError::UnknownAge(age.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineRecord {
    pub case_id: String,
    pub admission_date: Option<NaiveDate>,
    pub infection_report_date: Option<NaiveDate>,
    pub report_date: NaiveDate,
    pub age_group: String,
    pub gender: String,
    pub district: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImputationReport {
    pub records: usize,
    pub imputed: usize,
    pub dropped: usize,
}

impl ImputationReport {
    pub fn imputed_share(&self) -> f64 {
        if self.records == 0 {
            0.0
        } else {
            self.imputed as f64 / self.records as f64
        }
    }
}

/// Replaces missing admission dates with the infection report date; records
/// missing both are dropped.
pub fn impute_admission_dates(records: &[LineRecord]) -> (Vec<LineRecord>, ImputationReport) {
    let mut report = ImputationReport {
        records: records.len(),
        ..Default::default()
    };
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        match (r.admission_date, r.infection_report_date) {
            (Some(_), _) => out.push(r.clone()),
            (None, Some(d)) => {
                report.imputed += 1;
                out.push(LineRecord {
                    admission_date: Some(d),
                    ..r.clone()
                });
            }
            (None, None) => report.dropped += 1,
        }
    }
    (out, report)
}

/// Records left out of a triangle, by reason.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriangleDiagnostics {
    pub used: usize,
    pub missing_admission: usize,
    pub negative_delay: usize,
    pub before_window: usize,
    pub beyond_dmax: usize,
    pub not_yet_observable: usize,
}

/// Counts `N[t,a,d]` for event days `t = 1..T−1`, coarse age groups and
/// delays `1..=d_max`. Unobserved cells stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportingTriangle {
    pub start: NaiveDate,
    /// Index `T` of the current date.
    pub now: usize,
    pub dmax: usize,
    pub age_groups: Vec<String>,
    pub diagnostics: TriangleDiagnostics,
    counts: Vec<f64>,
}

pub fn add_days(date: NaiveDate, days: usize) -> NaiveDate {
    date + Days::new(days as u64)
}

impl ReportingTriangle {
    pub fn zeros(start: NaiveDate, now: usize, dmax: usize, age_groups: Vec<String>) -> Result<Self> {
        if dmax < 1 {
            return Err(NowcastError::BadDmax { min: 1, got: dmax });
        }
        if now < 2 {
            return Err(NowcastError::BadWindow {
                start,
                as_of: add_days(start, now.saturating_sub(1)),
            });
        }
        let n = age_groups.len() * (now - 1) * dmax;
        Ok(Self {
            start,
            now,
            dmax,
            age_groups,
            diagnostics: TriangleDiagnostics::default(),
            counts: vec![0.0; n],
        })
    }

    /// Number of event days, `T − 1`.
    pub fn days(&self) -> usize {
        self.now - 1
    }

    pub fn date(&self, t: usize) -> NaiveDate {
        add_days(self.start, t - 1)
    }

    pub fn as_of(&self) -> NaiveDate {
        self.date(self.now)
    }

    pub fn observed(&self, t: usize, d: usize) -> bool {
        t >= 1 && d >= 1 && d <= self.dmax && t + d <= self.now
    }

    /// Largest observed delay for day `t`.
    pub fn last_delay(&self, t: usize) -> usize {
        (self.now - t).min(self.dmax)
    }

    /// Whether day `t` is past the maximal delay, so `C = H`.
    pub fn complete(&self, t: usize) -> bool {
        self.now - t >= self.dmax
    }

    fn idx(&self, t: usize, a: usize, d: usize) -> usize {
        (a * self.days() + t - 1) * self.dmax + d - 1
    }

    /// Adds to an observed cell; returns false (and adds nothing) otherwise.
    pub fn add(&mut self, t: usize, a: usize, d: usize, count: f64) -> bool {
        if !self.observed(t, d) || a >= self.age_groups.len() {
            return false;
        }
        let i = self.idx(t, a, d);
        self.counts[i] += count;
        true
    }

    pub fn n(&self, t: usize, a: usize, d: usize) -> f64 {
        if self.observed(t, d) {
            self.counts[self.idx(t, a, d)]
        } else {
            0.0
        }
    }

    /// `C[t,a,d] = Σ_{l≤d} N[t,a,l]`, defined only on observed cells.
    pub fn cumulative(&self, t: usize, a: usize, d: usize) -> Option<f64> {
        self.observed(t, d)
            .then(|| (1..=d).map(|l| self.counts[self.idx(t, a, l)]).sum())
    }

    /// Count reported so far for day `t`, `C[t,a,min(T−t, d_max)]`.
    pub fn reported(&self, t: usize, a: usize) -> f64 {
        self.cumulative(t, a, self.last_delay(t)).unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Builds the triangle from a line list as of `as_of`. Records need an
/// admission date (run [`impute_admission_dates`] first); age groups are
/// mapped to the coarse nowcast groups.
pub fn build_triangle(
    records: &[LineRecord],
    start: NaiveDate,
    as_of: NaiveDate,
    dmax: usize,
    ages: &AgeMap,
) -> Result<ReportingTriangle> {
    let now = (as_of - start).num_days() + 1;
    if now < 2 {
        return Err(NowcastError::BadWindow { start, as_of });
    }
    let groups = NOWCAST_AGE_GROUPS.iter().map(|s| s.to_string()).collect();
    let mut tri = ReportingTriangle::zeros(start, now as usize, dmax, groups)?;
    let mut diag = TriangleDiagnostics::default();
    for r in records {
        let Some(event) = r.admission_date else {
            diag.missing_admission += 1;
            continue;
        };
        let raw = (r.report_date - event).num_days();
        if raw < 0 {
            diag.negative_delay += 1;
            continue;
        }
        let t = (event - start).num_days() + 1;
        if t < 1 {
            diag.before_window += 1;
            continue;
        }
        let d = raw.max(1) as usize;
        if d > dmax {
            diag.beyond_dmax += 1;
            continue;
        }
        let a = ages.index_of(&r.age_group)?;
        if r.report_date > as_of || !tri.add(t as usize, a, d, 1.0) {
            diag.not_yet_observable += 1;
            continue;
        }
        diag.used += 1;
    }
    tri.diagnostics = diag;
    Ok(tri)
}

/// `F(1..=d_max)` from conditional probabilities `p(1..=d_max)`.
pub fn cdf_from_hazards(p: &[f64]) -> Vec<f64> {
    let n = p.len();
    let mut f = vec![1.0; n];
    for d in (0..n.saturating_sub(1)).rev() {
        f[d] = f[d + 1] * (1.0 - p[d + 1]);
    }
    f
}

/// Implied `P(D = d) = p(d) F(d)`.
pub fn pmf_from_hazards(p: &[f64]) -> Vec<f64> {
    cdf_from_hazards(p).iter().zip(p).map(|(f, q)| f * q).collect()
}

/// Conditional probabilities of a delay distribution, the inverse of
/// [`pmf_from_hazards`].
pub fn hazards_from_pmf(pmf: &[f64]) -> Vec<f64> {
    let mut cum = 0.0;
    pmf.iter()
        .map(|&q| {
            cum += q;
            if cum > 0.0 {
                (q / cum).min(1.0)
            } else {
                0.0
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DelayModelConfig {
    /// Spacing of the hinges of the piece-wise linear time effect.
    pub knot_spacing: u32,
    /// Cubic B-spline dimension for both delay smooths.
    pub delay_basis: usize,
    pub smoothing: Smoothing,
}

impl Default for DelayModelConfig {
    fn default() -> Self {
        Self {
            knot_spacing: TruncatedLinearSpec::DEFAULT_SPACING,
            delay_basis: 8,
            smoothing: Smoothing::Select,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DelayModel {
    pub start: NaiveDate,
    pub now: usize,
    pub dmax: usize,
    pub age_groups: Vec<String>,
    pub fit: FitResult,
    design: CompiledDesign,
    event_levels: Vec<String>,
    report_levels: Vec<String>,
    old: Option<usize>,
}

fn weekday_label(date: NaiveDate) -> String {
    date.weekday().to_string()
}

const WEEK: [Weekday; 7] = [
    Weekday::Mon,
    Weekday::Tue,
    Weekday::Wed,
    Weekday::Thu,
    Weekday::Fri,
    Weekday::Sat,
    Weekday::Sun,
];

/// Weekdays present, Monday first when present; the first is the reference.
fn present_weekdays(dates: impl Iterator<Item = NaiveDate>) -> Vec<String> {
    let mut seen = [false; 7];
    for d in dates {
        seen[d.weekday().num_days_from_monday() as usize] = true;
    }
    WEEK.iter()
        .zip(seen)
        .filter(|(_, s)| *s)
        .map(|(w, _)| w.to_string())
        .collect()
}

/// Frame for rows `(t, a, d)`; weekdays unseen in training fall back to
/// the reference level.
fn delay_frame(
    start: NaiveDate,
    old: Option<usize>,
    cells: &[(usize, usize, usize)],
    event_levels: &[String],
    report_levels: &[String],
) -> Result<Frame> {
    let known = |levels: &[String], date: NaiveDate| {
        let l = weekday_label(date);
        if levels.contains(&l) {
            l
        } else {
            levels[0].clone()
        }
    };
    let n = cells.len();
    let mut t = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    let mut o = Vec::with_capacity(n);
    let mut we = Vec::with_capacity(n);
    let mut wr = Vec::with_capacity(n);
    for &(ti, a, di) in cells {
        let date = add_days(start, ti - 1);
        t.push(ti as f64);
        d.push(di as f64);
        o.push(if Some(a) == old { 1.0 } else { 0.0 });
        we.push(known(event_levels, date));
        wr.push(known(report_levels, add_days(date, di)));
    }
    Ok(Frame::new(n)
        .with_numeric("t", t)?
        .with_numeric("d", d)?
        .with_numeric("old", o)?
        .with_factor("weekday_event", we)?
        .with_factor("weekday_report", wr)?)
}

/// Fits the delay model to all observed cells with `d ≥ 2` and `C > 0`.
pub fn fit_delay_model(tri: &ReportingTriangle, cfg: &DelayModelConfig) -> Result<DelayModel> {
    if tri.dmax < 3 {
        return Err(NowcastError::BadDmax { min: 3, got: tri.dmax });
    }
    let mut cells = Vec::new();
    let mut y = Vec::new();
    let mut trials = Vec::new();
    for a in 0..tri.age_groups.len() {
        for t in 1..=tri.days() {
            for d in 2..=tri.last_delay(t) {
                let c = tri.cumulative(t, a, d).unwrap_or(0.0);
                if c > 0.0 {
                    cells.push((t, a, d));
                    y.push(tri.n(t, a, d));
                    trials.push(c);
                }
            }
        }
    }
    if cells.is_empty() {
        return Err(NowcastError::EmptyModel);
    }
    let old = tri.age_groups.iter().position(|g| g == OLD_AGE_GROUP);
    let has_old = cells.iter().any(|c| Some(c.1) == old);
    let has_young = cells.iter().any(|c| Some(c.1) != old);
    let old = old.filter(|_| has_old && has_young);
    let event_levels = present_weekdays(cells.iter().map(|c| tri.date(c.0)));
    let report_levels = present_weekdays(cells.iter().map(|c| add_days(tri.date(c.0), c.2)));

    let delay_spec = BSplineSpec::cubic(cfg.delay_basis, 2.0, tri.dmax as f64)?;
    let mut spec = DesignSpec::new()
        .term(
            "time",
            TermSpec::TruncatedLinear {
                var: "t".into(),
                spec: TruncatedLinearSpec::new(cfg.knot_spacing, tri.days() as f64)?,
            },
        )
        .term(
            "delay",
            TermSpec::BSpline {
                var: "d".into(),
                spec: delay_spec.clone(),
                centered: true,
                by: None,
            },
        );
    if old.is_some() {
        spec = spec.term(
            "delay_60plus",
            TermSpec::BSpline {
                var: "d".into(),
                spec: delay_spec,
                centered: false,
                by: Some("old".into()),
            },
        );
    }
    for (name, levels) in [("weekday_event", &event_levels), ("weekday_report", &report_levels)] {
        if levels.len() > 1 {
            spec = spec.factor(name, levels.clone(), Some(&levels[0]));
        }
    }
    let frame = delay_frame(tri.start, old, &cells, &event_levels, &report_levels)?;
    let design = spec.compile(&frame)?;
    let dm = design.matrix(&frame, None)?;
    let fit = fit_pirls(
        &dm,
        &y,
        Family::Binomial,
        &cfg.smoothing,
        &FitOptions::default().with_trials(trials),
    )?;
    Ok(DelayModel {
        start: tri.start,
        now: tri.now,
        dmax: tri.dmax,
        age_groups: tri.age_groups.clone(),
        fit,
        design,
        event_levels,
        report_levels,
        old,
    })
}

/// `F̂(min(T − t, d_max))` by coarse age group and event day, the input to
/// the offset of the incidence model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportingCdfTable {
    pub start: NaiveDate,
    pub as_of: NaiveDate,
    pub dmax: usize,
    pub age_groups: Vec<String>,
    /// `f[a][t − 1]`.
    pub f: Vec<Vec<f64>>,
}

impl ReportingCdfTable {
    /// No delay correction: `F = 1` everywhere.
    pub fn ones(start: NaiveDate, as_of: NaiveDate, dmax: usize) -> Self {
        let days = (as_of - start).num_days().max(0) as usize;
        Self {
            start,
            as_of,
            dmax,
            age_groups: NOWCAST_AGE_GROUPS.iter().map(|s| s.to_string()).collect(),
            f: vec![vec![1.0; days]; NOWCAST_AGE_GROUPS.len()],
        }
    }

    pub fn days(&self) -> usize {
        self.f.first().map_or(0, Vec::len)
    }

    pub fn get(&self, t: usize, coarse_age: &str) -> Option<f64> {
        let a = self.age_groups.iter().position(|g| g == coarse_age)?;
        self.f.get(a)?.get(t.checked_sub(1)?).copied()
    }
}

/// One point of an estimated effect curve with its model-based SE.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectPoint {
    pub term: String,
    pub x: String,
    pub estimate: f64,
    pub se: f64,
}

impl DelayModel {
    pub fn days(&self) -> usize {
        self.now - 1
    }

    pub fn as_of(&self) -> NaiveDate {
        add_days(self.start, self.now - 1)
    }

    fn check(&self, t: usize, d: usize) -> Result<()> {
        if t < 1 || t > self.days() {
            return Err(NowcastError::DayOutOfRange { t, days: self.days() });
        }
        if d < 1 || d > self.dmax {
            return Err(NowcastError::DelayOutOfRange { d, dmax: self.dmax });
        }
        Ok(())
    }

    /// Design rows for `k = 2..=d_max` of every `(t, a)` cell, cell-major.
    fn prediction_matrix(&self, cells: &[(usize, usize)]) -> Result<DMatrix<f64>> {
        let rows: Vec<_> = cells
            .iter()
            .flat_map(|&(t, a)| (2..=self.dmax).map(move |k| (t, a, k)))
            .collect();
        let frame = delay_frame(self.start, self.old, &rows, &self.event_levels, &self.report_levels)?;
        Ok(self.design.matrix(&frame, None)?.x)
    }

    /// Conditional probabilities `p(1..=d_max)` with `p(1) = 1`.
    pub fn hazards(&self, t: usize, a: usize) -> Result<Vec<f64>> {
        self.check(t, 1)?;
        let x = self.prediction_matrix(&[(t, a)])?;
        let eta = &x * &self.fit.beta;
        let mut p = vec![1.0];
        p.extend(eta.iter().map(|&e| logistic(e)));
        Ok(p)
    }

    pub fn cdf(&self, t: usize, a: usize) -> Result<Vec<f64>> {
        Ok(cdf_from_hazards(&self.hazards(t, a)?))
    }

    pub fn delay_cdf(&self, t: usize, a: usize, d: usize) -> Result<f64> {
        self.check(t, d)?;
        Ok(self.cdf(t, a)?[d - 1])
    }

    /// `F̂(min(T − t, d_max))` for every day and age group, age-major.
    pub fn reporting_cdf(&self) -> Result<Vec<Vec<f64>>> {
        let cells = self.incomplete_cells();
        let f = reporting_cdfs(self, &cells, &self.prediction_matrix(&cells)?, &self.fit.beta);
        let mut out = vec![vec![1.0; self.days()]; self.age_groups.len()];
        for (&(t, a), v) in cells.iter().zip(f) {
            out[a][t - 1] = v;
        }
        Ok(out)
    }

    pub fn reporting_cdf_table(&self) -> Result<ReportingCdfTable> {
        Ok(ReportingCdfTable {
            start: self.start,
            as_of: self.as_of(),
            dmax: self.dmax,
            age_groups: self.age_groups.clone(),
            f: self.reporting_cdf()?,
        })
    }

    fn incomplete_cells(&self) -> Vec<(usize, usize)> {
        let first = self.now.saturating_sub(self.dmax) + 1;
        (0..self.age_groups.len())
            .flat_map(|a| (first.max(1)..=self.days()).map(move |t| (t, a)))
            .collect()
    }

    /// Link-scale effect curves of the time and delay terms and the weekday
    /// coefficients.
    pub fn effects(&self) -> Result<Vec<EffectPoint>> {
        let mut out = Vec::new();
        let curve = |term: &str, cells: &[(usize, usize, usize)], xs: Vec<String>, out: &mut Vec<EffectPoint>| -> Result<()> {
            let Some(range) = self.fit_term(term) else {
                return Ok(());
            };
            let frame = delay_frame(self.start, self.old, cells, &self.event_levels, &self.report_levels)?;
            let b = self.design.term_matrix(term, &frame)?;
            let beta = self.fit.beta.rows(range.0, range.1);
            let v = self.fit.cov_model.view((range.0, range.0), (range.1, range.1));
            let est = &b * beta;
            let bv = &b * v;
            for (i, x) in xs.into_iter().enumerate() {
                let var = bv.row(i).dot(&b.row(i));
                out.push(EffectPoint {
                    term: term.into(),
                    x,
                    estimate: est[i],
                    se: var.max(0.0).sqrt(),
                });
            }
            Ok(())
        };
        let days: Vec<_> = (1..=self.days()).map(|t| (t, 0, 2)).collect();
        curve("time", &days, (1..=self.days()).map(|t| t.to_string()).collect(), &mut out)?;
        let old = self.old.unwrap_or(0);
        let delays: Vec<_> = (2..=self.dmax).map(|d| (1, old, d)).collect();
        let labels: Vec<String> = (2..=self.dmax).map(|d| d.to_string()).collect();
        curve("delay", &delays, labels.clone(), &mut out)?;
        curve("delay_60plus", &delays, labels, &mut out)?;
        for (name, levels) in [("weekday_event", &self.event_levels), ("weekday_report", &self.report_levels)] {
            for (i, l) in levels.iter().enumerate() {
                let (estimate, se) = match self.fit.coefficient_index(&format!("{name}[{l}]")) {
                    Some(j) if i > 0 => (self.fit.beta[j], self.fit.se_model(j)),
                    _ => (0.0, 0.0),
                };
                out.push(EffectPoint {
                    term: name.into(),
                    x: l.clone(),
                    estimate,
                    se,
                });
            }
        }
        Ok(out)
    }

    fn fit_term(&self, term: &str) -> Option<(usize, usize)> {
        let prefix = format!("{term}.");
        let idx: Vec<usize> = self
            .fit
            .column_names
            .iter()
            .enumerate()
            .filter(|(_, c)| c.starts_with(&prefix))
            .map(|(i, _)| i)
            .collect();
        Some((*idx.first()?, idx.len()))
    }
}

/// `F(last observed delay)` per cell under coefficients `beta`.
fn reporting_cdfs(model: &DelayModel, cells: &[(usize, usize)], x: &DMatrix<f64>, beta: &DVector<f64>) -> Vec<f64> {
    let eta = x * beta;
    let m = model.dmax - 1;
    cells
        .iter()
        .enumerate()
        .map(|(i, &(t, _))| {
            let last = (model.now - t).min(model.dmax);
            // p(k) for k = last+1..=d_max sits at row offset k − 2.
            (last + 1..=model.dmax)
                .map(|k| 1.0 - logistic(eta[i * m + k - 2]))
                .product()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BootstrapMode {
    /// Coefficient uncertainty only: `Ĥ⁽ᵇ⁾ = C / F⁽ᵇ⁾`.
    Parameter,
    /// Adds the not-yet-reported count: `H⁽ᵇ⁾ = C + Poisson(λ(1 − F⁽ᵇ⁾))`
    /// with `λ ~ Gamma(C + ½, F⁽ᵇ⁾)`.
    Predictive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub mode: BootstrapMode,
}

impl BootstrapConfig {
    pub fn new(replicates: usize, seed: u64) -> Self {
        Self {
            replicates,
            seed,
            mode: BootstrapMode::Predictive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NowcastRow {
    pub t: usize,
    pub date: NaiveDate,
    pub age_group: String,
    pub reported: f64,
    pub f_hat: f64,
    pub nowcast: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub unstable: bool,
    pub rolling7_reported: Option<f64>,
    pub rolling7_nowcast: Option<f64>,
    pub rolling7_ci_lo: Option<f64>,
    pub rolling7_ci_hi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NowcastResult {
    /// Ordered by date, then age group with [`ALL_AGES`] last.
    pub rows: Vec<NowcastRow>,
    pub replicates: usize,
    pub mode: Option<BootstrapMode>,
    pub notes: Vec<String>,
}

impl NowcastResult {
    pub fn get(&self, t: usize, age_group: &str) -> Option<&NowcastRow> {
        self.rows.iter().find(|r| r.t == t && r.age_group == age_group)
    }

    pub fn series<'a>(&'a self, age_group: &'a str) -> impl Iterator<Item = &'a NowcastRow> + 'a {
        self.rows.iter().filter(move |r| r.age_group == age_group)
    }
}

/// Bootstrap nowcasts for every `(t, a)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapDraws {
    /// `(t, a)` in age-major order.
    pub cells: Vec<(usize, usize)>,
    /// One row per replicate, one column per cell.
    pub draws: DMatrix<f64>,
    pub clipped: bool,
}

fn check_pair(tri: &ReportingTriangle, model: &DelayModel) -> Result<()> {
    if tri.now != model.now || tri.start != model.start {
        return Err(NowcastError::Mismatch("current date"));
    }
    if tri.dmax != model.dmax {
        return Err(NowcastError::Mismatch("d_max"));
    }
    if tri.age_groups != model.age_groups {
        return Err(NowcastError::Mismatch("age groups"));
    }
    Ok(())
}

fn all_cells(tri: &ReportingTriangle) -> Vec<(usize, usize)> {
    (0..tri.age_groups.len())
        .flat_map(|a| (1..=tri.days()).map(move |t| (t, a)))
        .collect()
}

pub fn bootstrap_draws(tri: &ReportingTriangle, model: &DelayModel, cfg: &BootstrapConfig) -> Result<BootstrapDraws> {
    check_pair(tri, model)?;
    if cfg.replicates < MIN_BOOTSTRAP {
        return Err(NowcastError::TooFewReplicates(cfg.replicates));
    }
    let cells = all_cells(tri);
    let open = model.incomplete_cells();
    let x = model.prediction_matrix(&open)?;
    let (cov, clipped) = clip_psd(&model.fit.cov_model);
    let l = psd_factor(&cov);
    let p = model.fit.beta.len();
    let seeds = SeedStream::new(cfg.seed);
    let reported: Vec<f64> = cells.iter().map(|&(t, a)| tri.reported(t, a)).collect();
    let open_pos: Vec<usize> = open
        .iter()
        .map(|&(t, a)| a * tri.days() + t - 1)
        .collect();
    let rows: Vec<Vec<f64>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = seeds.substream("bootstrap", b as u64);
            let z = DVector::from_iterator(p, (0..p).map(|_| rng::standard_normal(&mut rng)));
            let beta = &model.fit.beta + &l * z;
            let f = reporting_cdfs(model, &open, &x, &beta);
            let mut row = reported.clone();
            for (&pos, &fb) in open_pos.iter().zip(&f) {
                let c = reported[pos];
                row[pos] = match cfg.mode {
                    BootstrapMode::Parameter => c / fb,
                    BootstrapMode::Predictive => {
                        if fb >= 1.0 {
                            c
                        } else {
                            let rate = fb / (1.0 - fb);
                            let lam = rng::gamma(&mut rng, c + 0.5, rate.max(f64::MIN_POSITIVE));
                            c + rng::poisson(&mut rng, lam)
                        }
                    }
                };
            }
            row
        })
        .collect();
    let draws = DMatrix::from_fn(cfg.replicates, cells.len(), |i, j| rows[i][j]);
    Ok(BootstrapDraws { cells, draws, clipped })
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 95% quantile interval, widened to include the point estimate when the
/// draws are discrete and concentrated on one side of it.
fn interval(values: impl Iterator<Item = f64>, point: f64) -> (f64, f64) {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    (
        quantile_sorted(&v, 0.025).min(point),
        quantile_sorted(&v, 0.975).max(point),
    )
}

/// Point nowcasts without intervals.
pub fn nowcast_point(tri: &ReportingTriangle, model: &DelayModel) -> Result<NowcastResult> {
    assemble(tri, model, None)
}

/// Point nowcasts with bootstrap 95% intervals.
pub fn nowcast(tri: &ReportingTriangle, model: &DelayModel, cfg: &BootstrapConfig) -> Result<NowcastResult> {
    let draws = bootstrap_draws(tri, model, cfg)?;
    assemble(tri, model, Some((cfg, draws)))
}

fn assemble(
    tri: &ReportingTriangle,
    model: &DelayModel,
    boot: Option<(&BootstrapConfig, BootstrapDraws)>,
) -> Result<NowcastResult> {
    check_pair(tri, model)?;
    let days = tri.days();
    let ages = tri.age_groups.len();
    let f = model.reporting_cdf()?;
    let mut notes = Vec::new();
    // Series per age group plus the total, each of length `days`.
    let mut reported = vec![vec![0.0; days]; ages + 1];
    let mut point = vec![vec![0.0; days]; ages + 1];
    for a in 0..ages {
        for t in 1..=days {
            let c = tri.reported(t, a);
            reported[a][t - 1] = c;
            point[a][t - 1] = c / f[a][t - 1];
            reported[ages][t - 1] += c;
            point[ages][t - 1] += c / f[a][t - 1];
        }
    }
    let window = 7;
    let rolling = |s: &[f64], t: usize| (t >= window).then(|| s[t - window..t].iter().sum::<f64>());
    // Bootstrap series in the same layout: draws × days per group.
    let series_draws: Option<Vec<DMatrix<f64>>> = boot.as_ref().map(|(_, b)| {
        let mut out = vec![DMatrix::zeros(b.draws.nrows(), days); ages + 1];
        for (j, &(t, a)) in b.cells.iter().enumerate() {
            for i in 0..b.draws.nrows() {
                let v = b.draws[(i, j)];
                out[a][(i, t - 1)] += v;
                out[ages][(i, t - 1)] += v;
            }
        }
        out
    });
    if let Some((_, b)) = &boot {
        if b.clipped {
            notes.push("coefficient covariance was not PSD; negative eigenvalues clipped".into());
        }
    }
    let mut rows = Vec::with_capacity(days * (ages + 1));
    for t in 1..=days {
        for g in 0..=ages {
            let label = if g == ages { ALL_AGES.to_string() } else { tri.age_groups[g].clone() };
            let c = reported[g][t - 1];
            let h = point[g][t - 1];
            let f_hat = if g == ages {
                if h > 0.0 { c / h } else { 1.0 }
            } else {
                f[g][t - 1]
            };
            let unstable = if g == ages {
                (0..ages).any(|a| f[a][t - 1] < UNSTABLE_F)
            } else {
                f_hat < UNSTABLE_F
            };
            let (lo, hi, rlo, rhi) = match &series_draws {
                Some(sd) => {
                    let m = &sd[g];
                    let (lo, hi) = interval(m.column(t - 1).iter().copied(), h);
                    let (rlo, rhi) = if let Some(r) = rolling(&point[g], t) {
                        let (a, b) = interval(
                            (0..m.nrows()).map(|i| (t - window..t).map(|k| m[(i, k)]).sum::<f64>()),
                            r,
                        );
                        (Some(a), Some(b))
                    } else {
                        (None, None)
                    };
                    (lo, hi, rlo, rhi)
                }
                None => {
                    let r = rolling(&point[g], t);
                    (h, h, r, r)
                }
            };
            rows.push(NowcastRow {
                t,
                date: tri.date(t),
                age_group: label,
                reported: c,
                f_hat,
                nowcast: h,
                ci_lo: lo,
                ci_hi: hi,
                unstable,
                rolling7_reported: rolling(&reported[g], t),
                rolling7_nowcast: rolling(&point[g], t),
                rolling7_ci_lo: rlo,
                rolling7_ci_hi: rhi,
            });
        }
    }
    let unstable = rows.iter().filter(|r| r.unstable && r.age_group != ALL_AGES).count();
    if unstable > 0 {
        notes.push(format!("{unstable} nowcasts unstable: delay mass unobserved (F < {UNSTABLE_F})"));
    }
    Ok(NowcastResult {
        rows,
        replicates: boot.as_ref().map_or(0, |(c, _)| c.replicates),
        mode: boot.map(|(c, _)| c.mode),
        notes,
    })
}
