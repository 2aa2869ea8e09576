//! Negative-binomial size parameter by profile likelihood, alternated with
//! PIRLS until both settle.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::{check_lambda, FitOptions, FitResult, Problem, Result, Smoothing, LAMBDA_GRID};
use crate::design::DesignMatrix;
use crate::family::Family;

/// Upper bound for θ; reaching it means no detectable overdispersion.
pub const THETA_CAP: f64 = 1e7;
const THETA_FLOOR: f64 = 1e-3;
const OUTER_MAX: usize = 30;
/// Outer iterations during which λ is still re-selected.
const SELECT_ROUNDS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub theta: f64,
    /// θ hit the cap: the data look Poisson.
    pub poisson_like: bool,
}

/// θ-dependent part of the NB log-likelihood, evaluated cheaply for many θ.
struct Profile<'a> {
    y: &'a [f64],
    mu: &'a [f64],
    /// `at_least[j]` = number of observations with y > j (integer data only).
    at_least: Option<Vec<f64>>,
}

impl<'a> Profile<'a> {
    fn new(y: &'a [f64], mu: &'a [f64]) -> Self {
        let integer = y.iter().all(|v| v.fract() == 0.0 && *v >= 0.0 && *v < 1e7);
        let at_least = integer.then(|| {
            let max = y.iter().fold(0.0_f64, |a, &v| a.max(v)) as usize;
            let mut hist = vec![0.0; max + 1];
            for &v in y {
                hist[v as usize] += 1.0;
            }
            // at_least[j] = Σ_{v > j} hist[v]
            let mut out = vec![0.0; max];
            let mut acc = 0.0;
            for j in (0..max).rev() {
                acc += hist[j + 1];
                out[j] = acc;
            }
            out
        });
        Self { y, mu, at_least }
    }

    fn loglik(&self, theta: f64) -> f64 {
        // lnΓ(y+θ) − lnΓ(θ) = Σ_{j<y} ln(θ+j) for integer y.
        let gamma_part = match &self.at_least {
            Some(c) => c
                .iter()
                .enumerate()
                .map(|(j, &cj)| cj * (theta + j as f64).ln())
                .sum(),
            None => self
                .y
                .iter()
                .map(|&y| ln_gamma(y + theta) - ln_gamma(theta))
                .sum::<f64>(),
        };
        let rest: f64 = self
            .y
            .iter()
            .zip(self.mu)
            .map(|(&y, &mu)| theta * (mu / theta).ln_1p() + y * (theta + mu).ln())
            .sum();
        gamma_part - rest
    }
}

/// θ maximizing the NB profile log-likelihood at fixed means.
pub fn estimate_nb_theta(y: &[f64], mu: &[f64]) -> ThetaEstimate {
    let prof = Profile::new(y, mu);
    let lo = THETA_FLOOR.ln();
    let hi = THETA_CAP.ln();
    let steps = 92;
    let grid: Vec<f64> = (0..=steps)
        .map(|i| lo + (hi - lo) * i as f64 / steps as f64)
        .collect();
    let vals: Vec<f64> = grid.iter().map(|&g| prof.loglik(g.exp())).collect();
    let mut k = 0;
    for (i, v) in vals.iter().enumerate() {
        if *v > vals[k] {
            k = i;
        }
    }
    if k == steps {
        return ThetaEstimate {
            theta: THETA_CAP,
            poisson_like: true,
        };
    }
    let mut a = grid[k.saturating_sub(1)];
    let mut b = grid[(k + 1).min(steps)];
    // Golden-section search on log θ.
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = prof.loglik(c.exp());
    let mut fd = prof.loglik(d.exp());
    for _ in 0..200 {
        if (b - a).abs() < 1e-10 {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = prof.loglik(c.exp());
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = prof.loglik(d.exp());
        }
    }
    let theta = (0.5 * (a + b)).exp().min(THETA_CAP);
    ThetaEstimate {
        theta,
        poisson_like: theta >= THETA_CAP * (1.0 - 1e-6),
    }
}

/// Negative-binomial fit with θ estimated by alternating profile
/// maximization and PIRLS, starting from a Poisson pilot.
pub fn fit_negative_binomial(
    design: &DesignMatrix,
    y: &[f64],
    smoothing: &Smoothing,
    opts: &FitOptions,
) -> Result<FitResult> {
    check_lambda(design, smoothing)?;
    let nb = design.blocks.len();
    let pilot_family = Family::Poisson;
    let pilot = Problem::new(design, y, pilot_family, opts)?;
    let mut lambda = match smoothing {
        Smoothing::Fixed(l) => l.clone(),
        Smoothing::Select => vec![1.0; nb],
    };
    let rank_lambda = match smoothing {
        Smoothing::Fixed(l) => l.clone(),
        Smoothing::Select => vec![LAMBDA_GRID[0]; nb],
    };
    pilot.check_rank(&rank_lambda)?;
    let mut core = pilot.run(&lambda, None)?;
    let mut est = estimate_nb_theta(y, &core.mu);
    let mut notes = Vec::new();
    let mut settled = false;
    let min_rounds = match smoothing {
        Smoothing::Select => SELECT_ROUNDS,
        Smoothing::Fixed(_) => 1,
    };
    for round in 0..OUTER_MAX {
        let family = Family::NegativeBinomial { theta: est.theta };
        let problem = Problem::new(design, y, family, opts)?;
        core = if matches!(smoothing, Smoothing::Select) && round < SELECT_ROUNDS {
            let (l, c) = problem.select(Some(&core.beta))?;
            lambda = l;
            c
        } else {
            problem.run(&lambda, Some(&core.beta))?
        };
        let next = estimate_nb_theta(y, &core.mu);
        let stable = (next.theta.ln() - est.theta.ln()).abs() < 1e-6
            || (next.poisson_like && est.poisson_like);
        est = next;
        if stable && round + 1 >= min_rounds {
            settled = true;
            break;
        }
    }
    if !settled {
        notes.push("theta did not settle within the outer iteration limit".to_string());
    }
    if est.poisson_like {
        notes.push("theta reached the cap: Poisson-like".to_string());
    }
    let family = Family::NegativeBinomial { theta: est.theta };
    let problem = Problem::new(design, y, family, opts)?;
    let core = problem.run(&lambda, Some(&core.beta))?;
    let mut fit = problem.finish(lambda, core, notes)?;
    fit.converged &= settled;
    fit.theta = Some(est);
    Ok(fit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_counts_hit_the_cap() {
        let y = vec![4.0; 50];
        let est = estimate_nb_theta(&y, &y);
        assert!(est.poisson_like);
        assert_eq!(est.theta, THETA_CAP);
    }

    #[test]
    fn integer_and_gamma_paths_agree() {
        let y = [0.0, 3.0, 7.0, 1.0, 12.0];
        let mu = [2.0, 3.0, 4.0, 2.5, 6.0];
        let p = Profile::new(&y, &mu);
        let q = Profile {
            y: &y,
            mu: &mu,
            at_least: None,
        };
        for &t in &[0.3, 2.0, 40.0] {
            assert!((p.loglik(t) - q.loglik(t)).abs() < 1e-9);
        }
    }
}
