//! Autoregressive negative-binomial model for weekly counts by district and
//! age group, and the simulation harness for multiplicative under-reporting.
//!
//! For target age group `a`:
//!
//! ```text
//! Y[w,r,a] ~ NB(μ, θ),  log μ = log pop[r,a] + θ_w + Σ_k θ[a,k] log(Y[w-1,r,k] + δ)
//! ```
//!
//! with one free intercept per week `w = 2..W` and no global intercept.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;
use thiserror::Error;

use crate::design::DesignMatrix;
use crate::glm::{fit_negative_binomial, FitOptions, FitResult, GlmError, Smoothing};
use crate::rng::{self, SeedStream};

pub const DEFAULT_DELTA: f64 = 1.0;
/// Two-sided 95% normal quantile.
pub const Z975: f64 = 1.959_963_984_540_054;
/// Simulated means above this abort the simulation.
pub const EXPLOSION_LIMIT: f64 = 1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InfectionError {
    #[error("panel has no {0}")]
    EmptyDesign(&'static str),
    #[error("panel needs at least 2 weeks, got {0}")]
    TooFewWeeks(usize),
    #[error("delta must be positive, got {0}")]
    BadDelta(f64),
    #[error("{what}: expected {expected} values, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("population for district '{district}', age group '{age}' must be positive")]
    BadPopulation { district: String, age: String },
    #[error("invalid count {value} at week '{week}', district '{district}', age group '{age}'")]
    BadCount {
        week: String,
        district: String,
        age: String,
        value: f64,
    },
    #[error("explosive dynamics: mean {mean:.3e} at week {week}, district {district}, age group {age}")]
    Explosion {
        week: usize,
        district: usize,
        age: usize,
        mean: f64,
    },
    #[error("age group '{age}': {source}")]
    Fit { age: String, source: GlmError },
}

pub type Result<T> = std::result::Result<T, InfectionError>;

/// Complete week × district × age-group count array.
#[derive(Debug, Clone, PartialEq)]
pub struct WeeklyPanel {
    pub weeks: Vec<String>,
    pub districts: Vec<String>,
    pub age_groups: Vec<String>,
    counts: Vec<f64>,
}

impl WeeklyPanel {
    pub fn zeros(weeks: Vec<String>, districts: Vec<String>, age_groups: Vec<String>) -> Self {
        let n = weeks.len() * districts.len() * age_groups.len();
        Self {
            weeks,
            districts,
            age_groups,
            counts: vec![0.0; n],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.weeks.len(), self.districts.len(), self.age_groups.len())
    }

    fn idx(&self, w: usize, r: usize, a: usize) -> usize {
        (w * self.districts.len() + r) * self.age_groups.len() + a
    }

    pub fn get(&self, w: usize, r: usize, a: usize) -> f64 {
        self.counts[self.idx(w, r, a)]
    }

    pub fn set(&mut self, w: usize, r: usize, a: usize, v: f64) {
        let i = self.idx(w, r, a);
        self.counts[i] = v;
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let (w, r, a) = self.dims();
        for wi in 0..w {
            for ri in 0..r {
                for ai in 0..a {
                    let v = self.get(wi, ri, ai);
                    if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0) {
                        return Err(InfectionError::BadCount {
                            week: self.weeks[wi].clone(),
                            district: self.districts[ri].clone(),
                            age: self.age_groups[ai].clone(),
                            value: v,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Positive population per district and age group.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationTable {
    /// R × A.
    pub pop: DMatrix<f64>,
}

impl PopulationTable {
    pub fn check(&self, panel: &WeeklyPanel) -> Result<()> {
        let (_, r, a) = panel.dims();
        if self.pop.shape() != (r, a) {
            return Err(InfectionError::Shape {
                what: "population table",
                expected: r * a,
                got: self.pop.len(),
            });
        }
        for ri in 0..r {
            for ai in 0..a {
                let v = self.pop[(ri, ai)];
                if !(v.is_finite() && v > 0.0) {
                    return Err(InfectionError::BadPopulation {
                        district: panel.districts[ri].clone(),
                        age: panel.age_groups[ai].clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Design, response and district grouping for one target age group.
#[derive(Debug, Clone)]
pub struct InfectionDesign {
    pub design: DesignMatrix,
    pub y: Vec<f64>,
    pub groups: Vec<usize>,
}

pub fn week_column(week: &str) -> String {
    format!("week[{week}]")
}

pub fn lag_column(age: &str) -> String {
    format!("lag[{age}]")
}

pub fn build_infection_design(
    panel: &WeeklyPanel,
    pop: &PopulationTable,
    target: usize,
    delta: f64,
) -> Result<InfectionDesign> {
    let (w, r, a) = panel.dims();
    if a == 0 {
        return Err(InfectionError::EmptyDesign("age groups"));
    }
    if r == 0 {
        return Err(InfectionError::EmptyDesign("districts"));
    }
    if w < 2 {
        return Err(InfectionError::TooFewWeeks(w));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(InfectionError::BadDelta(delta));
    }
    pop.check(panel)?;
    let n = (w - 1) * r;
    let p = (w - 1) + a;
    let mut x = DMatrix::zeros(n, p);
    let mut y = Vec::with_capacity(n);
    let mut offset = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    let mut row = 0;
    for wi in 1..w {
        for ri in 0..r {
            x[(row, wi - 1)] = 1.0;
            for k in 0..a {
                x[(row, w - 1 + k)] = (panel.get(wi - 1, ri, k) + delta).ln();
            }
            y.push(panel.get(wi, ri, target));
            offset.push(pop.pop[(ri, target)].ln());
            groups.push(ri);
            row += 1;
        }
    }
    let mut names: Vec<String> = panel.weeks[1..].iter().map(|l| week_column(l)).collect();
    names.extend(panel.age_groups.iter().map(|l| lag_column(l)));
    let design = DesignMatrix::from_matrix(x, names)
        .with_offset(offset)
        .expect("offset length matches");
    Ok(InfectionDesign { design, y, groups })
}

#[derive(Debug, Clone)]
pub struct AgeGroupFit {
    pub age: String,
    pub fit: FitResult,
}

/// One NB model per target age group, sandwich covariance grouped by district.
pub fn fit_infection_model(
    panel: &WeeklyPanel,
    pop: &PopulationTable,
    delta: f64,
) -> Result<Vec<AgeGroupFit>> {
    panel.validate()?;
    let (_, _, a) = panel.dims();
    (0..a)
        .into_par_iter()
        .map(|t| fit_age_group(panel, pop, t, delta))
        .collect()
}

pub fn fit_age_group(
    panel: &WeeklyPanel,
    pop: &PopulationTable,
    target: usize,
    delta: f64,
) -> Result<AgeGroupFit> {
    let d = build_infection_design(panel, pop, target, delta)?;
    let opts = FitOptions::default().with_groups(d.groups.clone());
    let age = panel.age_groups[target].clone();
    let fit = fit_negative_binomial(&d.design, &d.y, &Smoothing::Fixed(vec![]), &opts).map_err(
        |source| InfectionError::Fit {
            age: age.clone(),
            source,
        },
    )?;
    Ok(AgeGroupFit { age, fit })
}

/// One row of the autoregressive coefficient table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagCoefficient {
    pub model_age_group: String,
    pub covariate_age_group: String,
    pub estimate: f64,
    pub se_model: f64,
    pub se_sandwich: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Week intercept estimate; these absorb under-reporting and are not
/// comparable across reporting regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeekIntercept {
    pub model_age_group: String,
    pub week: String,
    pub estimate: f64,
    pub se_sandwich: f64,
    pub cdr_invariant: bool,
}

pub fn lag_table(fits: &[AgeGroupFit], age_groups: &[String]) -> Vec<LagCoefficient> {
    let mut out = Vec::new();
    for f in fits {
        for k in age_groups {
            let j = f
                .fit
                .coefficient_index(&lag_column(k))
                .expect("lag column present");
            let est = f.fit.beta[j];
            let se = f.fit.se_sandwich(j);
            out.push(LagCoefficient {
                model_age_group: f.age.clone(),
                covariate_age_group: k.clone(),
                estimate: est,
                se_model: f.fit.se_model(j),
                se_sandwich: se,
                ci_lo: est - Z975 * se,
                ci_hi: est + Z975 * se,
            });
        }
    }
    out
}

pub fn week_intercepts(fits: &[AgeGroupFit], weeks: &[String]) -> Vec<WeekIntercept> {
    let mut out = Vec::new();
    for f in fits {
        for w in &weeks[1..] {
            let j = f.fit.coefficient_index(&week_column(w)).expect("week column");
            out.push(WeekIntercept {
                model_age_group: f.age.clone(),
                week: w.clone(),
                estimate: f.fit.beta[j],
                se_sandwich: f.fit.se_sandwich(j),
                cdr_invariant: false,
            });
        }
    }
    out
}

/// Generating parameters of the autoregressive model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfectionTruth {
    /// W × A week intercepts; row 0 is unused.
    pub intercepts: Vec<Vec<f64>>,
    /// A × A lag coefficients, row = target age group.
    pub lag: Vec<Vec<f64>>,
    /// NB size; `None` means Poisson.
    pub theta: Option<f64>,
    pub delta: f64,
    /// R × A counts of the first week.
    pub initial: Vec<Vec<f64>>,
}

/// Forward simulation from the initial week. Each age group draws from its
/// own substream.
pub fn simulate_infection_panel(
    truth: &InfectionTruth,
    pop: &PopulationTable,
    weeks: Vec<String>,
    districts: Vec<String>,
    age_groups: Vec<String>,
    seed: &SeedStream,
) -> Result<WeeklyPanel> {
    let (w, r, a) = (weeks.len(), districts.len(), age_groups.len());
    if w < 2 {
        return Err(InfectionError::TooFewWeeks(w));
    }
    let check = |what, expected, got| {
        if expected == got {
            Ok(())
        } else {
            Err(InfectionError::Shape {
                what,
                expected,
                got,
            })
        }
    };
    check("intercept rows", w, truth.intercepts.len())?;
    check("lag rows", a, truth.lag.len())?;
    check("initial rows", r, truth.initial.len())?;
    let mut panel = WeeklyPanel::zeros(weeks, districts, age_groups);
    pop.check(&panel)?;
    for (ri, row) in truth.initial.iter().enumerate() {
        check("initial columns", a, row.len())?;
        for (ai, &v) in row.iter().enumerate() {
            panel.set(0, ri, ai, v);
        }
    }
    let theta = truth.theta.unwrap_or(f64::INFINITY);
    let mut streams: Vec<_> = (0..a).map(|ai| seed.substream("infection", ai as u64)).collect();
    for wi in 1..w {
        check("intercept columns", a, truth.intercepts[wi].len())?;
        for ri in 0..r {
            let logs: Vec<f64> = (0..a)
                .map(|k| (panel.get(wi - 1, ri, k) + truth.delta).ln())
                .collect();
            for (ai, stream) in streams.iter_mut().enumerate() {
                let eta = pop.pop[(ri, ai)].ln()
                    + truth.intercepts[wi][ai]
                    + truth.lag[ai].iter().zip(&logs).map(|(t, l)| t * l).sum::<f64>();
                let mean = eta.exp();
                if !(mean <= EXPLOSION_LIMIT) {
                    return Err(InfectionError::Explosion {
                        week: wi,
                        district: ri,
                        age: ai,
                        mean,
                    });
                }
                panel.set(wi, ri, ai, rng::negative_binomial(stream, mean, theta));
            }
        }
    }
    Ok(panel)
}

/// Outcome-dependent reporting: the mean CDR becomes `π / (1 + Y/κ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeDependence {
    pub half_count: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdrConfig {
    /// W × A mean detection ratio in (0, 1].
    pub mean_cdr: DMatrix<f64>,
    /// Beta concentration `a + b`; infinite means a deterministic ratio.
    pub concentration: f64,
    pub seed: u64,
    pub dependence: Option<OutcomeDependence>,
}

impl CdrConfig {
    pub fn constant(weeks: usize, ages: usize, pi: f64, concentration: f64, seed: u64) -> Self {
        Self {
            mean_cdr: DMatrix::from_element(weeks, ages, pi),
            concentration,
            seed,
            dependence: None,
        }
    }
}

/// `Ỹ = round(R·Y)` with half-to-even rounding and independent Beta ratios.
pub fn apply_cdr_thinning(panel: &WeeklyPanel, cdr: &CdrConfig) -> Result<WeeklyPanel> {
    let (w, r, a) = panel.dims();
    if cdr.mean_cdr.shape() != (w, a) {
        return Err(InfectionError::Shape {
            what: "mean CDR matrix",
            expected: w * a,
            got: cdr.mean_cdr.len(),
        });
    }
    let seed = SeedStream::new(cdr.seed);
    let mut out = panel.clone();
    for ai in 0..a {
        let mut stream = seed.substream("cdr", ai as u64);
        for wi in 0..w {
            for ri in 0..r {
                let y = panel.get(wi, ri, ai);
                let mut pi = cdr.mean_cdr[(wi, ai)];
                if let Some(dep) = cdr.dependence {
                    pi /= 1.0 + y / dep.half_count;
                }
                let ratio = rng::beta_mean(&mut stream, pi, cdr.concentration);
                out.set(wi, ri, ai, (ratio * y).round_ties_even());
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdrComparison {
    pub model_age_group: String,
    pub covariate_age_group: String,
    pub true_estimate: f64,
    pub thinned_estimate: f64,
    pub difference: f64,
    /// Difference over the thinned fit's sandwich SE.
    pub standardized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterceptShift {
    pub model_age_group: String,
    pub week: String,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdrReport {
    pub coefficients: Vec<CdrComparison>,
    pub intercept_shifts: Vec<InterceptShift>,
    pub max_abs_standardized: f64,
    /// Some lag coefficient moved by more than three standard errors.
    pub bias_flag: bool,
}

impl CdrReport {
    pub fn within(&self, z: f64) -> usize {
        self.coefficients
            .iter()
            .filter(|c| c.standardized.abs() <= z)
            .count()
    }
}

/// Fits both panels and compares lag coefficients and week intercepts.
pub fn cdr_invariance_report(
    truth: &WeeklyPanel,
    thinned: &WeeklyPanel,
    pop: &PopulationTable,
    delta: f64,
) -> Result<CdrReport> {
    if truth.dims() != thinned.dims() {
        return Err(InfectionError::Shape {
            what: "thinned panel",
            expected: truth.counts.len(),
            got: thinned.counts.len(),
        });
    }
    let ft = fit_infection_model(truth, pop, delta)?;
    let fo = fit_infection_model(thinned, pop, delta)?;
    Ok(compare_fits(&ft, &fo, &truth.age_groups, &truth.weeks))
}

fn compare_fits(
    ft: &[AgeGroupFit],
    fo: &[AgeGroupFit],
    ages: &[String],
    weeks: &[String],
) -> CdrReport {
    let mut coefficients = Vec::new();
    let mut intercept_shifts = Vec::new();
    for (t, o) in ft.iter().zip(fo) {
        for k in ages {
            let col = lag_column(k);
            let jt = t.fit.coefficient_index(&col).expect("lag column");
            let jo = o.fit.coefficient_index(&col).expect("lag column");
            let diff = o.fit.beta[jo] - t.fit.beta[jt];
            let se = o.fit.se_sandwich(jo);
            coefficients.push(CdrComparison {
                model_age_group: t.age.clone(),
                covariate_age_group: k.clone(),
                true_estimate: t.fit.beta[jt],
                thinned_estimate: o.fit.beta[jo],
                difference: diff,
                standardized: if se > 0.0 { diff / se } else if diff == 0.0 { 0.0 } else { f64::INFINITY },
            });
        }
        for w in &weeks[1..] {
            let col = week_column(w);
            let jt = t.fit.coefficient_index(&col).expect("week column");
            let jo = o.fit.coefficient_index(&col).expect("week column");
            intercept_shifts.push(InterceptShift {
                model_age_group: t.age.clone(),
                week: w.clone(),
                shift: o.fit.beta[jo] - t.fit.beta[jt],
            });
        }
    }
    let max_abs_standardized = coefficients
        .iter()
        .fold(0.0_f64, |m, c| m.max(c.standardized.abs()));
    CdrReport {
        coefficients,
        intercept_shifts,
        max_abs_standardized,
        bias_flag: max_abs_standardized > 3.0,
    }
}

/// `E[log R]` for a Beta ratio with the given mean and concentration.
pub fn expected_log_ratio(mean: f64, concentration: f64) -> f64 {
    if mean >= 1.0 {
        return 0.0;
    }
    if !concentration.is_finite() {
        return mean.ln();
    }
    let a = mean * concentration;
    digamma(a) - digamma(concentration)
}

/// Week-intercept shift implied by independent thinning of every age group:
/// `log π_a − Σ_k θ_ak E[log R_k]`.
pub fn expected_intercept_shift(pi_target: f64, pi: &[f64], lag_row: &[f64], concentration: f64) -> f64 {
    pi_target.ln()
        - lag_row
            .iter()
            .zip(pi)
            .map(|(t, &p)| t * expected_log_ratio(p, concentration))
            .sum::<f64>()
}

/// Settings of the repeated thinning experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdrStudyConfig {
    pub replicates: usize,
    pub districts: usize,
    pub weeks: usize,
    /// A × A lag matrix used to simulate.
    pub lag: Vec<Vec<f64>>,
    pub theta: Option<f64>,
    pub mean_cdr: f64,
    pub concentration: f64,
    /// Typical count level the week intercepts are tuned to.
    pub target_count: f64,
    pub base_population: f64,
    /// κ of the outcome-dependent run; `None` skips it.
    pub adversarial_half_count: Option<f64>,
    pub delta: f64,
    pub seed: u64,
}

impl Default for CdrStudyConfig {
    fn default() -> Self {
        Self {
            replicates: 100,
            districts: 200,
            weeks: 20,
            lag: vec![
                vec![0.5, 0.2, 0.1],
                vec![0.15, 0.5, 0.15],
                vec![0.1, 0.2, 0.5],
            ],
            theta: Some(20.0),
            mean_cdr: 0.4,
            concentration: 200.0,
            target_count: 300.0,
            base_population: 1e5,
            adversarial_half_count: Some(150.0),
            delta: DEFAULT_DELTA,
            seed: 20_210_301,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdrReplicate {
    pub replicate: usize,
    pub lag_coefficients: usize,
    pub within_3se: usize,
    pub adversarial_outside_3se: Option<usize>,
    pub max_abs_standardized: f64,
    pub mean_intercept_shift: Vec<f64>,
    pub expected_intercept_shift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdrStudySummary {
    pub replicates: Vec<CdrReplicate>,
    /// Share of all lag coefficients within 3 SEs under independent thinning.
    pub share_within_3se: f64,
    /// Share of replicates with at least one coefficient beyond 3 SEs under
    /// outcome-dependent thinning.
    pub adversarial_share_flagged: Option<f64>,
}

/// Simulated population and true panel for one replicate.
pub fn simulate_study_panel(
    cfg: &CdrStudyConfig,
    seed: &SeedStream,
) -> Result<(WeeklyPanel, PopulationTable, InfectionTruth)> {
    let a = cfg.lag.len();
    let r = cfg.districts;
    let mut prng = seed.substream("population", 0);
    let pop = PopulationTable {
        pop: DMatrix::from_fn(r, a, |_, _| {
            (cfg.base_population * rng::uniform(&mut prng, -0.2, 0.2).exp()).round()
        }),
    };
    // Intercepts putting the stationary mean at the target count, with a
    // gentle weekly wave.
    let log_target = cfg.target_count.ln();
    let intercepts: Vec<Vec<f64>> = (0..cfg.weeks)
        .map(|w| {
            cfg.lag
                .iter()
                .map(|row| {
                    let s: f64 = row.iter().sum();
                    log_target * (1.0 - s) - cfg.base_population.ln()
                        + 0.15 * (w as f64 * 0.7).sin()
                })
                .collect()
        })
        .collect();
    let truth = InfectionTruth {
        intercepts,
        lag: cfg.lag.clone(),
        theta: cfg.theta,
        delta: cfg.delta,
        initial: vec![vec![cfg.target_count.round(); a]; r],
    };
    let weeks = (1..=cfg.weeks).map(|w| format!("W{w:02}")).collect();
    let districts = (1..=r).map(|d| format!("D{d:03}")).collect();
    let ages = (1..=a).map(|k| format!("A{k}")).collect();
    let panel = simulate_infection_panel(&truth, &pop, weeks, districts, ages, seed)?;
    Ok((panel, pop, truth))
}

/// Runs the thinning experiment; replicates are independent and run in
/// parallel with per-replicate seeds.
pub fn run_cdr_study(cfg: &CdrStudyConfig) -> Result<CdrStudySummary> {
    let master = SeedStream::new(cfg.seed);
    let a = cfg.lag.len();
    let reps: Vec<CdrReplicate> = (0..cfg.replicates)
        .into_par_iter()
        .map(|i| -> Result<CdrReplicate> {
            let seed = master.child("replicate", i as u64);
            let (panel, pop, _) = simulate_study_panel(cfg, &seed)?;
            let (w, _, _) = panel.dims();
            let true_fits = fit_infection_model(&panel, &pop, cfg.delta)?;
            let mut config = CdrConfig::constant(w, a, cfg.mean_cdr, cfg.concentration, seed.child("cdr", 0).master());
            let thinned = apply_cdr_thinning(&panel, &config)?;
            let thin_fits = fit_infection_model(&thinned, &pop, cfg.delta)?;
            let report = compare_fits(&true_fits, &thin_fits, &panel.age_groups, &panel.weeks);
            let adversarial = match cfg.adversarial_half_count {
                Some(k) => {
                    config.dependence = Some(OutcomeDependence { half_count: k });
                    config.seed = seed.child("cdr", 1).master();
                    let adv = apply_cdr_thinning(&panel, &config)?;
                    let adv_fits = fit_infection_model(&adv, &pop, cfg.delta)?;
                    let rep = compare_fits(&true_fits, &adv_fits, &panel.age_groups, &panel.weeks);
                    Some(rep.coefficients.len() - rep.within(3.0))
                }
                None => None,
            };
            let mut mean_shift = vec![0.0; a];
            let mut expected_shift = vec![0.0; a];
            for (t, f) in true_fits.iter().enumerate() {
                let shifts: Vec<f64> = report
                    .intercept_shifts
                    .iter()
                    .filter(|s| s.model_age_group == f.age)
                    .map(|s| s.shift)
                    .collect();
                mean_shift[t] = shifts.iter().sum::<f64>() / shifts.len() as f64;
                let lag_row: Vec<f64> = panel
                    .age_groups
                    .iter()
                    .map(|k| f.fit.coefficient(&lag_column(k)).expect("lag"))
                    .collect();
                expected_shift[t] = expected_intercept_shift(
                    cfg.mean_cdr,
                    &vec![cfg.mean_cdr; a],
                    &lag_row,
                    cfg.concentration,
                );
            }
            Ok(CdrReplicate {
                replicate: i,
                lag_coefficients: report.coefficients.len(),
                within_3se: report.within(3.0),
                adversarial_outside_3se: adversarial,
                max_abs_standardized: report.max_abs_standardized,
                mean_intercept_shift: mean_shift,
                expected_intercept_shift: expected_shift,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total: usize = reps.iter().map(|r| r.lag_coefficients).sum();
    let within: usize = reps.iter().map(|r| r.within_3se).sum();
    let adversarial_share_flagged = cfg.adversarial_half_count.map(|_| {
        reps.iter()
            .filter(|r| r.adversarial_outside_3se.unwrap_or(0) > 0)
            .count() as f64
            / reps.len().max(1) as f64
    });
    Ok(CdrStudySummary {
        share_within_3se: within as f64 / total.max(1) as f64,
        replicates: reps,
        adversarial_share_flagged,
    })
}
