//! Multinomial logit with a reference category.
//!
//! Category `j ≠ ref` has linear predictor `η_j = Xβ_j`; the reference has
//! `η = 0`. All logits share one design matrix, with their own coefficients
//! and penalties. Fitting is penalized Newton on the full multinomial
//! likelihood, whose observed and expected information coincide.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::design::DesignMatrix;
use crate::glm::{sandwich_from_scores, BlockSummary, FitDocument, LAMBDA_GRID};
use crate::linalg::{spd_inverse, symmetrize, weakest_direction, xtwx};

/// Linear predictors beyond this magnitude indicate separation.
pub const SEPARATION_ETA: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MultinomialError {
    #[error("no observations")]
    Empty,
    #[error("need at least two categories")]
    TooFewCategories,
    #[error("reference category {0} out of range")]
    BadReference(usize),
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("row {row}: {reason}")]
    InvalidCounts { row: usize, reason: String },
    #[error("category '{0}' has no positive count")]
    EmptyCategory(String),
    #[error("penalized Hessian is singular: '{column}' in logit '{logit}' is not identified")]
    RankDeficient { logit: String, column: String },
}

pub type Result<T> = std::result::Result<T, MultinomialError>;

#[derive(Debug, Clone)]
pub struct MultinomialData {
    pub design: DesignMatrix,
    /// n × K category counts.
    pub counts: DMatrix<f64>,
    pub categories: Vec<String>,
    /// Zero-based index of the reference category.
    pub reference: usize,
    /// Independent unit per row for the sandwich covariance.
    pub groups: Option<Vec<usize>>,
}

impl MultinomialData {
    pub fn n(&self) -> usize {
        self.counts.nrows()
    }

    pub fn k(&self) -> usize {
        self.counts.ncols()
    }

    pub fn trials(&self) -> Vec<f64> {
        self.counts.row_iter().map(|r| r.sum()).collect()
    }

    /// Non-reference category indices, in order.
    pub fn logits(&self) -> Vec<usize> {
        (0..self.k()).filter(|&j| j != self.reference).collect()
    }

    fn validate(&self) -> Result<()> {
        let (n, k) = self.counts.shape();
        if n == 0 {
            return Err(MultinomialError::Empty);
        }
        if k < 2 {
            return Err(MultinomialError::TooFewCategories);
        }
        if self.reference >= k {
            return Err(MultinomialError::BadReference(self.reference));
        }
        if self.categories.len() != k {
            return Err(MultinomialError::LengthMismatch {
                what: "category names",
                expected: k,
                got: self.categories.len(),
            });
        }
        if self.design.nrows() != n {
            return Err(MultinomialError::LengthMismatch {
                what: "design rows",
                expected: n,
                got: self.design.nrows(),
            });
        }
        if let Some(g) = &self.groups {
            if g.len() != n {
                return Err(MultinomialError::LengthMismatch {
                    what: "groups",
                    expected: n,
                    got: g.len(),
                });
            }
        }
        for i in 0..n {
            for j in 0..k {
                let v = self.counts[(i, j)];
                if !(v.is_finite() && v >= 0.0) {
                    return Err(MultinomialError::InvalidCounts {
                        row: i,
                        reason: format!("count {v} in category '{}'", self.categories[j]),
                    });
                }
            }
        }
        for j in 0..k {
            if self.counts.column(j).sum() <= 0.0 {
                return Err(MultinomialError::EmptyCategory(self.categories[j].clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MultinomialFit {
    pub categories: Vec<String>,
    pub reference: usize,
    /// Names of the shared design columns.
    pub design_columns: Vec<String>,
    /// Stacked coefficients: logit after logit, each of design width.
    pub beta: DVector<f64>,
    pub probs: DMatrix<f64>,
    pub cov_model: DMatrix<f64>,
    pub cov_sandwich: DMatrix<f64>,
    pub blocks: Vec<BlockSummary>,
    pub edf_columns: Vec<f64>,
    pub deviance: f64,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub separation: bool,
    pub notes: Vec<String>,
}

impl MultinomialFit {
    fn p(&self) -> usize {
        self.design_columns.len()
    }

    pub fn logits(&self) -> Vec<usize> {
        (0..self.categories.len()).filter(|&j| j != self.reference).collect()
    }

    /// Coefficient names as `category:column`.
    pub fn coefficient_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for j in self.logits() {
            for c in &self.design_columns {
                out.push(format!("{}:{}", self.categories[j], c));
            }
        }
        out
    }

    pub fn coefficient_index(&self, category: &str, column: &str) -> Option<usize> {
        let l = self
            .logits()
            .iter()
            .position(|&j| self.categories[j] == category)?;
        let c = self.design_columns.iter().position(|x| x == column)?;
        Some(l * self.p() + c)
    }

    pub fn lambda(&self) -> Vec<f64> {
        self.blocks.iter().map(|b| b.lambda).collect()
    }

    pub fn edf_total(&self) -> f64 {
        self.edf_columns.iter().sum()
    }

    /// Fitted category probabilities for new rows (offsets are ignored).
    pub fn predict_probs(&self, design: &DesignMatrix) -> DMatrix<f64> {
        probabilities(&design.x, &self.beta, self.categories.len(), self.reference)
    }

    pub fn to_document(&self) -> FitDocument {
        let mut doc = FitDocument::new(
            "multinomial",
            &self.coefficient_names(),
            self.beta.as_slice(),
            self.blocks.clone(),
            &self.cov_model,
            &self.cov_sandwich,
        );
        doc.edf_total = self.edf_total();
        doc.deviance = self.deviance;
        doc.converged = self.converged;
        doc.iterations = self.iterations;
        doc.notes = self.notes.clone();
        doc
    }
}

/// Linear predictors, n × K with a zero reference column.
fn linear_predictors(x: &DMatrix<f64>, beta: &DVector<f64>, k: usize, reference: usize) -> DMatrix<f64> {
    let p = x.ncols();
    let mut eta = DMatrix::zeros(x.nrows(), k);
    let mut l = 0;
    for j in 0..k {
        if j == reference {
            continue;
        }
        let bj = beta.rows(l * p, p);
        eta.set_column(j, &(x * bj));
        l += 1;
    }
    eta
}

fn softmax_rows(eta: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = eta.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        row /= s;
    }
    out
}

pub fn probabilities(x: &DMatrix<f64>, beta: &DVector<f64>, k: usize, reference: usize) -> DMatrix<f64> {
    softmax_rows(&linear_predictors(x, beta, k, reference))
}

/// `Σ Z log π` over all cells (0 log 0 = 0).
fn kernel_loglik(counts: &DMatrix<f64>, probs: &DMatrix<f64>) -> f64 {
    counts
        .iter()
        .zip(probs.iter())
        .map(|(&z, &p)| if z > 0.0 { z * p.ln() } else { 0.0 })
        .sum()
}

fn saturated_kernel(counts: &DMatrix<f64>) -> f64 {
    let mut s = 0.0;
    for row in counts.row_iter() {
        let n: f64 = row.sum();
        for &z in row.iter() {
            if z > 0.0 {
                s += z * (z / n).ln();
            }
        }
    }
    s
}

fn multinomial_constant(counts: &DMatrix<f64>) -> f64 {
    counts
        .row_iter()
        .map(|r| ln_gamma(r.sum() + 1.0) - r.iter().map(|&z| ln_gamma(z + 1.0)).sum::<f64>())
        .sum()
}

/// Score vector `∂ℓ/∂β`, stacked per logit.
pub fn score(data: &MultinomialData, beta: &DVector<f64>) -> DVector<f64> {
    let probs = probabilities(&data.design.x, beta, data.k(), data.reference);
    let trials = data.trials();
    score_at(data, &probs, &trials)
}

fn score_at(data: &MultinomialData, probs: &DMatrix<f64>, trials: &[f64]) -> DVector<f64> {
    let x = &data.design.x;
    let p = x.ncols();
    let logits = data.logits();
    let mut g = DVector::zeros(p * logits.len());
    for (l, &j) in logits.iter().enumerate() {
        let r = DVector::from_iterator(
            x.nrows(),
            (0..x.nrows()).map(|i| data.counts[(i, j)] - trials[i] * probs[(i, j)]),
        );
        g.rows_mut(l * p, p).copy_from(&x.tr_mul(&r));
    }
    g
}

/// Log-likelihood including the multinomial coefficient.
pub fn log_likelihood(data: &MultinomialData, beta: &DVector<f64>) -> f64 {
    let probs = probabilities(&data.design.x, beta, data.k(), data.reference);
    kernel_loglik(&data.counts, &probs) + multinomial_constant(&data.counts)
}

fn information(data: &MultinomialData, probs: &DMatrix<f64>, trials: &[f64]) -> DMatrix<f64> {
    let x = &data.design.x;
    let p = x.ncols();
    let logits = data.logits();
    let q = logits.len();
    let mut h = DMatrix::zeros(p * q, p * q);
    for (a, &j) in logits.iter().enumerate() {
        for (b, &l) in logits.iter().enumerate().skip(a) {
            let w: Vec<f64> = (0..x.nrows())
                .map(|i| {
                    let pj = probs[(i, j)];
                    let pl = probs[(i, l)];
                    trials[i] * (if j == l { pj } else { 0.0 } - pj * pl)
                })
                .collect();
            let blk = xtwx(x, &w);
            h.view_mut((a * p, b * p), (p, p)).copy_from(&blk);
            if a != b {
                h.view_mut((b * p, a * p), (p, p)).copy_from(&blk.transpose());
            }
        }
    }
    symmetrize(&mut h);
    h
}

/// Penalty over the stacked coefficients: the design's blocks repeated
/// per logit, each with its own λ.
fn stacked_penalty(data: &MultinomialData, lambda: &[f64]) -> DMatrix<f64> {
    let p = data.design.ncols();
    let q = data.k() - 1;
    let nb = data.design.blocks.len();
    let mut s = DMatrix::zeros(p * q, p * q);
    for l in 0..q {
        for (bi, b) in data.design.blocks.iter().enumerate() {
            let off = l * p + b.start;
            let mut v = s.view_mut((off, off), (b.len, b.len));
            v += &b.s * lambda[l * nb + bi];
        }
    }
    s
}

#[derive(Debug, Clone)]
struct Core {
    beta: DVector<f64>,
    probs: DMatrix<f64>,
    deviance: f64,
    hinv: DMatrix<f64>,
    info: DMatrix<f64>,
    iterations: usize,
    converged: bool,
    separation: bool,
}

impl Core {
    fn edf_columns(&self) -> Vec<f64> {
        let f = &self.hinv * &self.info;
        (0..f.nrows()).map(|i| f[(i, i)]).collect()
    }

    fn gcv(&self, n_eff: f64) -> f64 {
        let edf: f64 = self.edf_columns().iter().sum();
        let r = n_eff - edf;
        if r <= 0.0 {
            f64::INFINITY
        } else {
            n_eff * self.deviance / (r * r)
        }
    }
}

#[derive(Debug, Clone)]
pub struct MultinomialOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub rank_tol: f64,
}

impl Default for MultinomialOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
            rank_tol: 1e-11,
        }
    }
}

struct Solver<'a> {
    data: &'a MultinomialData,
    trials: Vec<f64>,
    saturated: f64,
    opts: &'a MultinomialOptions,
}

impl<'a> Solver<'a> {
    fn deviance(&self, probs: &DMatrix<f64>) -> f64 {
        2.0 * (self.saturated - kernel_loglik(&self.data.counts, probs))
    }

    fn column_label(&self, j: usize) -> (String, String) {
        let p = self.data.design.ncols();
        let logits = self.data.logits();
        (
            self.data.categories[logits[j / p]].clone(),
            self.data.design.column_names[j % p].clone(),
        )
    }

    fn rank_error(&self, h: &DMatrix<f64>) -> MultinomialError {
        let (_, dir) = weakest_direction(h);
        let (logit, column) = self.column_label(dir.iamax());
        MultinomialError::RankDeficient { logit, column }
    }

    fn check_rank(&self, lambda: &[f64]) -> Result<()> {
        let q = self.data.k() - 1;
        let beta = DVector::zeros(self.data.design.ncols() * q);
        let probs = probabilities(&self.data.design.x, &beta, self.data.k(), self.data.reference);
        let h = information(self.data, &probs, &self.trials) + stacked_penalty(self.data, lambda);
        if weakest_direction(&h).0 < self.opts.rank_tol {
            return Err(self.rank_error(&h));
        }
        Ok(())
    }

    fn run(&self, lambda: &[f64], start: Option<&DVector<f64>>) -> Result<Core> {
        let data = self.data;
        let (k, r) = (data.k(), data.reference);
        let x = &data.design.x;
        let s = stacked_penalty(data, lambda);
        let dim = s.nrows();
        let mut beta = start.cloned().unwrap_or_else(|| DVector::zeros(dim));
        let mut probs = probabilities(x, &beta, k, r);
        let pen = |b: &DVector<f64>| b.dot(&(&s * b));
        let mut pdev = self.deviance(&probs) + pen(&beta);
        let mut converged = false;
        let mut separation = false;
        let mut iterations = 0;
        for iter in 1..=self.opts.max_iter {
            iterations = iter;
            let g = score_at(data, &probs, &self.trials) - &s * &beta;
            let h = information(data, &probs, &self.trials) + &s;
            let chol = h.clone().cholesky().ok_or_else(|| self.rank_error(&h))?;
            let step = chol.solve(&g);
            let mut t = 1.0;
            let mut cand = &beta + &step;
            let mut cprobs = probabilities(x, &cand, k, r);
            let mut cpdev = self.deviance(&cprobs) + pen(&cand);
            let mut halvings = 0;
            while !(cpdev.is_finite() && cpdev <= pdev * (1.0 + 1e-12) + 1e-12) && halvings < 40 {
                t *= 0.5;
                cand = &beta + &step * t;
                cprobs = probabilities(x, &cand, k, r);
                cpdev = self.deviance(&cprobs) + pen(&cand);
                halvings += 1;
            }
            let change = (pdev - cpdev).abs();
            beta = cand;
            probs = cprobs;
            pdev = cpdev;
            let eta_max = linear_predictors(x, &beta, k, r).amax();
            if eta_max > SEPARATION_ETA {
                separation = true;
                break;
            }
            if change <= self.opts.tol * (pdev.abs() + 0.1) {
                converged = true;
                break;
            }
        }
        let info = information(data, &probs, &self.trials);
        let h = &info + &s;
        let hinv = spd_inverse(&h).ok_or_else(|| self.rank_error(&h))?;
        Ok(Core {
            deviance: self.deviance(&probs),
            beta,
            probs,
            hinv,
            info,
            iterations,
            converged,
            separation,
        })
    }

    fn select(&self) -> Result<(Vec<f64>, Core)> {
        let nl = (self.data.k() - 1) * self.data.design.blocks.len();
        let n_eff = (self.data.n() * (self.data.k() - 1)) as f64;
        let mut lambda = vec![1.0; nl];
        let mut current = self.run(&lambda, None)?;
        if nl == 0 {
            return Ok((lambda, current));
        }
        let half = 10f64.sqrt();
        let passes: [&dyn Fn(f64) -> Vec<f64>; 2] = [
            &|_| LAMBDA_GRID.to_vec(),
            &|l| vec![l / half, l, l * half],
        ];
        for cands_of in passes {
            for b in 0..nl {
                let warm = current.beta.clone();
                let cands = cands_of(lambda[b]);
                let evals: Vec<Option<(f64, Core)>> = cands
                    .par_iter()
                    .map(|&c| {
                        let mut l = lambda.clone();
                        l[b] = c;
                        self.run(&l, Some(&warm))
                            .ok()
                            .filter(|core| !core.separation)
                            .map(|core| (core.gcv(n_eff), core))
                    })
                    .collect();
                let mut best: Option<(usize, f64)> = None;
                for (i, e) in evals.iter().enumerate() {
                    if let Some((g, _)) = e {
                        if g.is_finite() && best.is_none_or(|(_, bg)| *g < bg) {
                            best = Some((i, *g));
                        }
                    }
                }
                if let Some((i, _)) = best {
                    lambda[b] = cands[i];
                    current = evals.into_iter().nth(i).flatten().expect("evaluated").1;
                }
            }
        }
        Ok((lambda, current))
    }
}

/// Smoothing parameters: one per (logit, design block), logit-major.
#[derive(Debug, Clone, PartialEq)]
pub enum MultinomialSmoothing {
    Fixed(Vec<f64>),
    Select,
}

pub fn fit_multinomial(
    data: &MultinomialData,
    smoothing: &MultinomialSmoothing,
    opts: &MultinomialOptions,
) -> Result<MultinomialFit> {
    data.validate()?;
    let nl = (data.k() - 1) * data.design.blocks.len();
    let solver = Solver {
        data,
        trials: data.trials(),
        saturated: saturated_kernel(&data.counts),
        opts,
    };
    let (lambda, core) = match smoothing {
        MultinomialSmoothing::Fixed(l) => {
            if l.len() != nl {
                return Err(MultinomialError::LengthMismatch {
                    what: "lambda",
                    expected: nl,
                    got: l.len(),
                });
            }
            solver.check_rank(l)?;
            (l.clone(), solver.run(l, None)?)
        }
        MultinomialSmoothing::Select => {
            solver.check_rank(&vec![LAMBDA_GRID[0]; nl])?;
            solver.select()?
        }
    };

    let groups: Vec<usize> = data.groups.clone().unwrap_or_else(|| (0..data.n()).collect());
    let scores = unit_scores(data, &core.probs, &solver.trials, &groups);
    let cov_sandwich = sandwich_from_scores(&core.hinv, &scores);
    let edf_columns = core.edf_columns();
    let p = data.design.ncols();
    let mut blocks = Vec::new();
    for (l, &j) in data.logits().iter().enumerate() {
        for (bi, b) in data.design.blocks.iter().enumerate() {
            let off = l * p + b.start;
            blocks.push(BlockSummary {
                name: format!("{}:{}", data.categories[j], b.name),
                lambda: lambda[l * data.design.blocks.len() + bi],
                edf: edf_columns[off..off + b.len].iter().sum(),
            });
        }
    }
    let mut notes = Vec::new();
    if core.separation {
        notes.push(format!(
            "separation: a linear predictor exceeded {SEPARATION_ETA} in magnitude"
        ));
    }
    let log_likelihood = kernel_loglik(&data.counts, &core.probs) + multinomial_constant(&data.counts);
    Ok(MultinomialFit {
        categories: data.categories.clone(),
        reference: data.reference,
        design_columns: data.design.column_names.clone(),
        beta: core.beta,
        probs: core.probs,
        cov_model: core.hinv,
        cov_sandwich,
        blocks,
        edf_columns,
        deviance: core.deviance,
        log_likelihood,
        converged: core.converged && !core.separation,
        iterations: core.iterations,
        separation: core.separation,
        notes,
    })
}

fn unit_scores(
    data: &MultinomialData,
    probs: &DMatrix<f64>,
    trials: &[f64],
    groups: &[usize],
) -> DMatrix<f64> {
    let x = &data.design.x;
    let p = x.ncols();
    let logits = data.logits();
    let units = groups.iter().max().map_or(0, |m| m + 1);
    let mut s = DMatrix::zeros(units, p * logits.len());
    for i in 0..x.nrows() {
        for (l, &j) in logits.iter().enumerate() {
            let r = data.counts[(i, j)] - trials[i] * probs[(i, j)];
            if r == 0.0 {
                continue;
            }
            for c in 0..p {
                s[(groups[i], l * p + c)] += x[(i, c)] * r;
            }
        }
    }
    s
}

/// Robust covariance with scores summed within `groups`.
pub fn multinomial_sandwich(
    data: &MultinomialData,
    fit: &MultinomialFit,
    groups: &[usize],
) -> Result<DMatrix<f64>> {
    if groups.len() != data.n() {
        return Err(MultinomialError::LengthMismatch {
            what: "groups",
            expected: data.n(),
            got: groups.len(),
        });
    }
    let trials = data.trials();
    let h = information(data, &fit.probs, &trials) + stacked_penalty(data, &fit.lambda());
    let hinv = spd_inverse(&h).ok_or_else(|| {
        let (_, dir) = weakest_direction(&h);
        let p = data.design.ncols();
        MultinomialError::RankDeficient {
            logit: data.categories[data.logits()[dir.iamax() / p]].clone(),
            column: data.design.column_names[dir.iamax() % p].clone(),
        }
    })?;
    let scores = unit_scores(data, &fit.probs, &trials, groups);
    Ok(sandwich_from_scores(&hinv, &scores))
}

/// Negative log multinomial probability of each observed row.
#[derive(Debug, Clone, PartialEq)]
pub struct LogScores {
    pub scores: Vec<f64>,
    /// Rows with a positive count in a zero-probability category.
    pub impossible: Vec<usize>,
}

impl LogScores {
    pub fn total(&self) -> f64 {
        self.scores.iter().sum()
    }
}

pub fn log_score(probs: &DMatrix<f64>, counts: &DMatrix<f64>) -> LogScores {
    let mut scores = Vec::with_capacity(counts.nrows());
    let mut impossible = Vec::new();
    for i in 0..counts.nrows() {
        let row = counts.row(i);
        let n: f64 = row.sum();
        let mut lp = ln_gamma(n + 1.0);
        let mut bad = false;
        for (j, &z) in row.iter().enumerate() {
            lp -= ln_gamma(z + 1.0);
            if z > 0.0 {
                let p = probs[(i, j)];
                if p <= 0.0 {
                    bad = true;
                } else {
                    lp += z * p.ln();
                }
            }
        }
        if bad {
            impossible.push(i);
            scores.push(f64::INFINITY);
        } else {
            // Exact zero for certain events despite lnΓ rounding.
            scores.push(if lp.abs() < 1e-12 { 0.0 } else { -lp });
        }
    }
    LogScores { scores, impossible }
}
