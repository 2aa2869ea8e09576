//! Penalized iteratively reweighted least squares.
//!
//! Fits `g(μ) = Xβ + offset` by maximizing `ℓ(β) − ½ Σ_k λ_k βᵀS_kβ`.
//! Smoothing parameters are either fixed or chosen by a coordinate-wise
//! GCV grid search. Negative-binomial dispersion is handled in [`theta`].

mod json;
pub mod theta;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::DesignMatrix;
use crate::family::Family;
use crate::linalg::{spd_inverse, symmetrize, weakest_direction, xtwx, xtwz};

pub use json::{FitDocument, MatrixDocument};
pub use theta::{estimate_nb_theta, fit_negative_binomial, ThetaEstimate, THETA_CAP};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmError {
    #[error("no observations")]
    Empty,
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("row {row}: {reason}")]
    InvalidResponse { row: usize, reason: String },
    #[error("penalized Hessian is singular: term '{term}' (column '{column}') is not identified")]
    RankDeficient { term: String, column: String },
    #[error("non-finite value during fitting")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, GlmError>;

/// Fixed smoothing parameters or GCV selection.
#[derive(Debug, Clone, PartialEq)]
pub enum Smoothing {
    Fixed(Vec<f64>),
    Select,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Relative change in penalized deviance that counts as converged.
    pub tol: f64,
    /// Binomial trials per row.
    pub trials: Option<Vec<f64>>,
    /// Independent unit per row for the sandwich covariance.
    pub groups: Option<Vec<usize>>,
    /// Unit-diagonal eigenvalue ratio below which the Hessian is singular.
    pub rank_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
            trials: None,
            groups: None,
            rank_tol: 1e-11,
        }
    }
}

impl FitOptions {
    pub fn with_trials(mut self, m: Vec<f64>) -> Self {
        self.trials = Some(m);
        self
    }

    pub fn with_groups(mut self, g: Vec<usize>) -> Self {
        self.groups = Some(g);
        self
    }
}

/// Log-spaced GCV grid: 10⁻⁴ … 10⁴.
pub const LAMBDA_GRID: [f64; 9] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub name: String,
    pub lambda: f64,
    pub edf: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub family: Family,
    pub column_names: Vec<String>,
    pub beta: DVector<f64>,
    pub blocks: Vec<BlockSummary>,
    /// Effective degrees of freedom of every coefficient, summing to the total.
    pub edf_columns: Vec<f64>,
    pub deviance: f64,
    /// Reported dispersion: residual variance (gaussian), 1/θ (negative
    /// binomial), 1 otherwise.
    pub dispersion: f64,
    /// Scale φ multiplying the inverse penalized information.
    pub scale: f64,
    pub cov_model: DMatrix<f64>,
    pub cov_sandwich: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub gcv: f64,
    /// Linear predictor including the offset.
    pub eta: Vec<f64>,
    pub mu: Vec<f64>,
    pub theta: Option<ThetaEstimate>,
    pub notes: Vec<String>,
}

impl FitResult {
    pub fn n(&self) -> usize {
        self.eta.len()
    }

    pub fn edf_total(&self) -> f64 {
        self.edf_columns.iter().sum()
    }

    pub fn lambda(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.lambda).collect()
    }

    pub fn coefficient_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.coefficient_index(name).map(|i| self.beta[i])
    }

    pub fn se_model(&self, j: usize) -> f64 {
        self.cov_model[(j, j)].max(0.0).sqrt()
    }

    pub fn se_sandwich(&self, j: usize) -> f64 {
        self.cov_sandwich[(j, j)].max(0.0).sqrt()
    }

    /// `η` (link) or `g⁻¹(η)` (response, per-trial for binomial) on new rows.
    pub fn predict(&self, design: &DesignMatrix, kind: PredictType) -> Result<Vec<f64>> {
        if design.ncols() != self.beta.len() {
            return Err(GlmError::LengthMismatch {
                what: "design columns",
                expected: self.beta.len(),
                got: design.ncols(),
            });
        }
        let xb = &design.x * &self.beta;
        Ok(xb
            .iter()
            .zip(&design.offset)
            .map(|(e, o)| {
                let eta = e + o;
                match kind {
                    PredictType::Link => eta,
                    PredictType::Response => self.family.inverse_link(eta),
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictType {
    Link,
    Response,
}

/// Converged state of one PIRLS run at fixed λ.
#[derive(Debug, Clone)]
pub(crate) struct Core {
    pub beta: DVector<f64>,
    pub eta: Vec<f64>,
    pub mu: Vec<f64>,
    pub deviance: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Inverse of `XᵀWX + Sλ` and `XᵀWX` at the final weights.
    pub hinv: DMatrix<f64>,
    pub info: DMatrix<f64>,
}

impl Core {
    fn edf_columns(&self) -> Vec<f64> {
        let f = &self.hinv * &self.info;
        (0..f.nrows()).map(|i| f[(i, i)]).collect()
    }

    fn gcv(&self, n: usize) -> f64 {
        let edf: f64 = self.edf_columns().iter().sum();
        let r = n as f64 - edf;
        if r <= 0.0 {
            f64::INFINITY
        } else {
            n as f64 * self.deviance / (r * r)
        }
    }
}

pub(crate) struct Problem<'a> {
    pub design: &'a DesignMatrix,
    pub y: &'a [f64],
    pub m: Vec<f64>,
    pub family: Family,
    pub opts: &'a FitOptions,
}

impl<'a> Problem<'a> {
    pub fn new(
        design: &'a DesignMatrix,
        y: &'a [f64],
        family: Family,
        opts: &'a FitOptions,
    ) -> Result<Self> {
        let n = design.nrows();
        if n == 0 {
            return Err(GlmError::Empty);
        }
        if y.len() != n {
            return Err(GlmError::LengthMismatch {
                what: "response",
                expected: n,
                got: y.len(),
            });
        }
        if design.offset.len() != n {
            return Err(GlmError::LengthMismatch {
                what: "offset",
                expected: n,
                got: design.offset.len(),
            });
        }
        let m = match (&opts.trials, family) {
            (Some(t), Family::Binomial) => {
                if t.len() != n {
                    return Err(GlmError::LengthMismatch {
                        what: "trials",
                        expected: n,
                        got: t.len(),
                    });
                }
                t.clone()
            }
            _ => vec![1.0; n],
        };
        if let Some(g) = &opts.groups {
            if g.len() != n {
                return Err(GlmError::LengthMismatch {
                    what: "groups",
                    expected: n,
                    got: g.len(),
                });
            }
        }
        for (i, (&yi, &mi)) in y.iter().zip(&m).enumerate() {
            if let Some(reason) = family.check_response(yi, mi) {
                return Err(GlmError::InvalidResponse { row: i, reason });
            }
        }
        if design.x.iter().chain(&design.offset).any(|v| !v.is_finite()) {
            return Err(GlmError::NonFinite);
        }
        Ok(Self {
            design,
            y,
            m,
            family,
            opts,
        })
    }

    fn deviance(&self, mu: &[f64]) -> f64 {
        self.y
            .iter()
            .zip(mu)
            .zip(&self.m)
            .map(|((&y, &mu), &m)| self.family.unit_deviance(y, mu, m))
            .sum()
    }

    fn linear_predictor(&self, beta: &DVector<f64>) -> Vec<f64> {
        let xb = &self.design.x * beta;
        xb.iter().zip(&self.design.offset).map(|(a, b)| a + b).collect()
    }

    fn means(&self, eta: &[f64]) -> Vec<f64> {
        eta.iter()
            .zip(&self.m)
            .map(|(&e, &m)| self.family.mean(e, m))
            .collect()
    }

    fn weights(&self, mu: &[f64]) -> Vec<f64> {
        mu.iter()
            .zip(&self.m)
            .map(|(&mu, &m)| self.family.weight(mu, m))
            .collect()
    }

    /// Errors when `XᵀW₀X + Sλ` has an unidentified direction.
    pub fn check_rank(&self, lambda: &[f64]) -> Result<()> {
        let mu0: Vec<f64> = self
            .y
            .iter()
            .zip(&self.m)
            .map(|(&y, &m)| self.family.initial_mean(y, m))
            .collect();
        let w = self.weights(&mu0);
        let h = xtwx(&self.design.x, &w) + self.design.total_penalty(lambda);
        let (ratio, dir) = weakest_direction(&h);
        if ratio < self.opts.rank_tol {
            let j = dir.iamax();
            let term = self.design.term_of_column(j).unwrap_or("?").to_string();
            return Err(GlmError::RankDeficient {
                term,
                column: self.design.column_names[j].clone(),
            });
        }
        Ok(())
    }

    pub fn run(&self, lambda: &[f64], start: Option<&DVector<f64>>) -> Result<Core> {
        let x = &self.design.x;
        let s = self.design.total_penalty(lambda);
        let pen = |b: &DVector<f64>| b.dot(&(&s * b));

        let (mut eta, mut mu) = match start {
            Some(b) => {
                let eta = self.linear_predictor(b);
                let mu = self.means(&eta);
                (eta, mu)
            }
            None => {
                let mu: Vec<f64> = self
                    .y
                    .iter()
                    .zip(&self.m)
                    .map(|(&y, &m)| self.family.initial_mean(y, m))
                    .collect();
                let eta = mu
                    .iter()
                    .zip(&self.m)
                    .map(|(&mu, &m)| self.family.link_fn(mu / m))
                    .collect();
                (eta, mu)
            }
        };
        let mut beta_old: Option<DVector<f64>> = start.cloned();
        let mut pdev_old = match start {
            Some(b) => self.deviance(&mu) + pen(b),
            None => f64::INFINITY,
        };
        let mut converged = false;
        let mut iterations = 0;
        let mut beta = start.cloned().unwrap_or_else(|| DVector::zeros(x.ncols()));
        let mut dev = self.deviance(&mu);

        for iter in 1..=self.opts.max_iter {
            iterations = iter;
            let w = self.weights(&mu);
            let z: Vec<f64> = (0..eta.len())
                .map(|i| {
                    let d = self.family.dmu_deta(mu[i], self.m[i]);
                    eta[i] - self.design.offset[i] + (self.y[i] - mu[i]) / d
                })
                .collect();
            let mut h = xtwx(x, &w) + &s;
            symmetrize(&mut h);
            let rhs = xtwz(x, &w, &z);
            let chol = h.clone().cholesky().ok_or_else(|| self.rank_error(&h))?;
            let mut beta_new = chol.solve(&rhs);
            if beta_new.iter().any(|v| !v.is_finite()) {
                return Err(GlmError::NonFinite);
            }

            let mut eta_new = self.linear_predictor(&beta_new);
            let mut mu_new = self.means(&eta_new);
            let mut dev_new = self.deviance(&mu_new);
            let mut pdev_new = dev_new + pen(&beta_new);
            if let Some(b_old) = &beta_old {
                let mut halvings = 0;
                while !(pdev_new.is_finite() && pdev_new <= pdev_old * (1.0 + 1e-12) + 1e-12)
                    && halvings < 40
                {
                    beta_new = (&beta_new + b_old) * 0.5;
                    eta_new = self.linear_predictor(&beta_new);
                    mu_new = self.means(&eta_new);
                    dev_new = self.deviance(&mu_new);
                    pdev_new = dev_new + pen(&beta_new);
                    halvings += 1;
                }
            }
            if !pdev_new.is_finite() {
                return Err(GlmError::NonFinite);
            }
            let change = (pdev_new - pdev_old).abs();
            beta = beta_new;
            eta = eta_new;
            mu = mu_new;
            dev = dev_new;
            let done = change <= self.opts.tol * (pdev_new.abs() + 0.1);
            pdev_old = pdev_new;
            beta_old = Some(beta.clone());
            if done {
                converged = true;
                break;
            }
        }

        let w = self.weights(&mu);
        let mut info = xtwx(x, &w);
        symmetrize(&mut info);
        let h = &info + &s;
        let hinv = spd_inverse(&h).ok_or_else(|| self.rank_error(&h))?;
        Ok(Core {
            beta,
            eta,
            mu,
            deviance: dev,
            iterations,
            converged,
            hinv,
            info,
        })
    }

    fn rank_error(&self, h: &DMatrix<f64>) -> GlmError {
        let (_, dir) = weakest_direction(h);
        let j = dir.iamax();
        GlmError::RankDeficient {
            term: self.design.term_of_column(j).unwrap_or("?").to_string(),
            column: self.design.column_names[j].clone(),
        }
    }

    /// Per-observation score contributions `x_i ∂ℓ_i/∂η_i`, summed by unit.
    pub fn unit_scores(&self, mu: &[f64], groups: Option<&[usize]>) -> DMatrix<f64> {
        let x = &self.design.x;
        let p = x.ncols();
        let n = x.nrows();
        let g: Vec<usize> = match groups {
            Some(g) => g.to_vec(),
            None => (0..n).collect(),
        };
        let units = g.iter().max().map_or(0, |m| m + 1);
        let mut scores = DMatrix::zeros(units, p);
        for i in 0..n {
            let u = self.family.score_eta(self.y[i], mu[i], self.m[i]);
            if u == 0.0 {
                continue;
            }
            for j in 0..p {
                scores[(g[i], j)] += x[(i, j)] * u;
            }
        }
        scores
    }

    /// Selects λ by coordinate-wise GCV search and returns the final core.
    pub fn select(&self, start: Option<&DVector<f64>>) -> Result<(Vec<f64>, Core)> {
        let nb = self.design.blocks.len();
        let n = self.design.nrows();
        let mut lambda = vec![1.0; nb];
        let mut current = self.run(&lambda, start)?;
        if nb == 0 {
            return Ok((lambda, current));
        }
        let mut best_score = current.gcv(n);

        let sweep = |candidates: &dyn Fn(f64) -> Vec<f64>,
                         lambda: &mut Vec<f64>,
                         current: &mut Core,
                         best_score: &mut f64|
         -> Result<()> {
            for b in 0..nb {
                let warm = current.beta.clone();
                let cands = candidates(lambda[b]);
                let evals: Vec<Option<(f64, Core)>> = cands
                    .par_iter()
                    .map(|&c| {
                        let mut l = lambda.clone();
                        l[b] = c;
                        self.run(&l, Some(&warm)).ok().map(|core| (core.gcv(n), core))
                    })
                    .collect();
                let mut best: Option<(usize, f64)> = None;
                for (k, e) in evals.iter().enumerate() {
                    if let Some((g, _)) = e {
                        if g.is_finite() && best.is_none_or(|(_, bg)| *g < bg) {
                            best = Some((k, *g));
                        }
                    }
                }
                if let Some((k, g)) = best {
                    lambda[b] = cands[k];
                    *best_score = g;
                    *current = evals.into_iter().nth(k).flatten().expect("evaluated").1;
                }
            }
            Ok(())
        };
        sweep(&|_| LAMBDA_GRID.to_vec(), &mut lambda, &mut current, &mut best_score)?;
        let half = 10f64.sqrt();
        sweep(
            &|l| vec![l / half, l, l * half],
            &mut lambda,
            &mut current,
            &mut best_score,
        )?;
        Ok((lambda, current))
    }

    pub fn finish(&self, lambda: Vec<f64>, core: Core, notes: Vec<String>) -> Result<FitResult> {
        let n = self.design.nrows();
        let edf_columns = core.edf_columns();
        let edf_total: f64 = edf_columns.iter().sum();
        let (scale, dispersion) = match self.family {
            Family::Gaussian => {
                let r = (n as f64 - edf_total).max(1.0);
                let phi = core.deviance / r;
                (phi, phi)
            }
            Family::NegativeBinomial { theta } => (1.0, 1.0 / theta),
            _ => (1.0, 1.0),
        };
        let mut cov_model = &core.hinv * scale;
        symmetrize(&mut cov_model);
        let scores = self.unit_scores(&core.mu, self.opts.groups.as_deref());
        let cov_sandwich = sandwich_from_scores(&core.hinv, &scores);
        let blocks = self
            .design
            .blocks
            .iter()
            .zip(&lambda)
            .map(|(b, &l)| BlockSummary {
                name: b.name.clone(),
                lambda: l,
                edf: edf_columns[b.start..b.start + b.len].iter().sum(),
            })
            .collect();
        let gcv = core.gcv(n);
        let theta = None;
        if !core.converged {
            log::warn!("PIRLS did not converge in {} iterations", core.iterations);
        }
        Ok(FitResult {
            family: self.family,
            column_names: self.design.column_names.clone(),
            beta: core.beta,
            blocks,
            edf_columns,
            deviance: core.deviance,
            dispersion,
            scale,
            cov_model,
            cov_sandwich,
            converged: core.converged,
            iterations: core.iterations,
            gcv,
            eta: core.eta,
            mu: core.mu,
            theta,
            notes,
        })
    }
}

/// `A⁻¹ B A⁻¹` from the inverse penalized information and unit scores
/// (one row per unit).
pub fn sandwich_from_scores(hinv: &DMatrix<f64>, scores: &DMatrix<f64>) -> DMatrix<f64> {
    let b = scores.tr_mul(scores);
    let mut v = hinv * b * hinv;
    symmetrize(&mut v);
    v
}

fn check_lambda(design: &DesignMatrix, smoothing: &Smoothing) -> Result<()> {
    if let Smoothing::Fixed(l) = smoothing {
        if l.len() != design.blocks.len() {
            return Err(GlmError::LengthMismatch {
                what: "lambda",
                expected: design.blocks.len(),
                got: l.len(),
            });
        }
    }
    Ok(())
}

/// Fits a penalized GLM with a fixed family.
pub fn fit_pirls(
    design: &DesignMatrix,
    y: &[f64],
    family: Family,
    smoothing: &Smoothing,
    opts: &FitOptions,
) -> Result<FitResult> {
    check_lambda(design, smoothing)?;
    let problem = Problem::new(design, y, family, opts)?;
    let (lambda, core) = match smoothing {
        Smoothing::Fixed(l) => {
            problem.check_rank(l)?;
            (l.clone(), problem.run(l, None)?)
        }
        Smoothing::Select => {
            problem.check_rank(&vec![LAMBDA_GRID[0]; design.blocks.len()])?;
            problem.select(None)?
        }
    };
    problem.finish(lambda, core, Vec::new())
}

/// Robust covariance of a fitted model with scores summed within `groups`
/// (one unit index per row).
pub fn sandwich_covariance(
    design: &DesignMatrix,
    y: &[f64],
    fit: &FitResult,
    groups: &[usize],
    trials: Option<&[f64]>,
) -> Result<DMatrix<f64>> {
    let opts = FitOptions {
        trials: trials.map(|t| t.to_vec()),
        groups: Some(groups.to_vec()),
        ..FitOptions::default()
    };
    let problem = Problem::new(design, y, fit.family, &opts)?;
    let w = problem.weights(&fit.mu);
    let h = xtwx(&design.x, &w) + design.total_penalty(&fit.lambda());
    let hinv = spd_inverse(&h).ok_or_else(|| problem.rank_error(&h))?;
    let scores = problem.unit_scores(&fit.mu, Some(groups));
    Ok(sandwich_from_scores(&hinv, &scores))
}

/// Maps arbitrary labels to dense unit indices in first-seen order.
pub fn group_indices<S: AsRef<str>>(labels: &[S]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(l.as_ref().to_string()).or_insert(next)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intercept(n: usize) -> DesignMatrix {
        DesignMatrix::from_matrix(DMatrix::from_element(n, 1, 1.0), vec!["(Intercept)".into()])
    }

    #[test]
    fn poisson_intercept_is_log_mean() {
        let fit = fit_pirls(
            &intercept(2),
            &[2.0, 4.0],
            Family::Poisson,
            &Smoothing::Fixed(vec![]),
            &FitOptions::default(),
        )
        .unwrap();
        assert!((fit.beta[0] - 3f64.ln()).abs() < 1e-8);
        assert!(fit.converged);
    }

    #[test]
    fn poisson_offset_shifts_intercept() {
        let d = intercept(2).with_offset(vec![2f64.ln(); 2]).unwrap();
        let fit = fit_pirls(
            &d,
            &[2.0, 4.0],
            Family::Poisson,
            &Smoothing::Fixed(vec![]),
            &FitOptions::default(),
        )
        .unwrap();
        assert!((fit.beta[0] - (3f64.ln() - 2f64.ln())).abs() < 1e-8);
    }

    #[test]
    fn binomial_intercept_is_logit_proportion() {
        let opts = FitOptions::default().with_trials(vec![10.0]);
        let fit = fit_pirls(&intercept(1), &[3.0], Family::Binomial, &Smoothing::Fixed(vec![]), &opts)
            .unwrap();
        assert!((fit.beta[0] - (-0.847297860387204)).abs() < 1e-8);
    }

    #[test]
    fn gaussian_matches_normal_equations() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 4.0]);
        let y = [1.0, 2.5, 2.9, 5.2];
        let d = DesignMatrix::from_matrix(x.clone(), vec!["a".into(), "b".into()]);
        let fit =
            fit_pirls(&d, &y, Family::Gaussian, &Smoothing::Fixed(vec![]), &FitOptions::default())
                .unwrap();
        let yv = DVector::from_column_slice(&y);
        let ls = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * yv;
        assert!((fit.beta - ls).amax() < 1e-10);
    }

    #[test]
    fn collinear_columns_are_named() {
        let x = DMatrix::from_fn(5, 2, |_, _| 1.0);
        let d = DesignMatrix::from_matrix(x, vec!["(Intercept)".into(), "const".into()]);
        let err = fit_pirls(
            &d,
            &[1.0, 2.0, 3.0, 1.0, 0.0],
            Family::Poisson,
            &Smoothing::Fixed(vec![]),
            &FitOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, GlmError::RankDeficient { .. }));
    }

    #[test]
    fn invalid_binomial_response() {
        let opts = FitOptions::default().with_trials(vec![2.0]);
        let err = fit_pirls(&intercept(1), &[3.0], Family::Binomial, &Smoothing::Fixed(vec![]), &opts)
            .unwrap_err();
        assert!(matches!(err, GlmError::InvalidResponse { row: 0, .. }));
    }

    #[test]
    fn group_indices_first_seen() {
        assert_eq!(group_indices(&["b", "a", "b", "c"]), vec![0, 1, 0, 2]);
    }
}
