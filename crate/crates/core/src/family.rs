//! Exponential-family responses with their canonical links.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Log,
    Logit,
}

/// Response distribution. Negative binomial variance is `μ + μ²/θ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Poisson,
    Binomial,
    NegativeBinomial { theta: f64 },
}

const ETA_MAX: f64 = 700.0;
const P_EPS: f64 = 1e-15;

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `y ln(y/μ)` with the convention `0 ln 0 = 0`.
fn ylogy(y: f64, mu: f64) -> f64 {
    if y > 0.0 {
        y * (y / mu).ln()
    } else {
        0.0
    }
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Poisson => "poisson",
            Family::Binomial => "binomial",
            Family::NegativeBinomial { .. } => "negative_binomial",
        }
    }

    pub fn link(&self) -> Link {
        match self {
            Family::Gaussian => Link::Identity,
            Family::Poisson | Family::NegativeBinomial { .. } => Link::Log,
            Family::Binomial => Link::Logit,
        }
    }

    /// Inverse link on the per-trial scale (probability for binomial).
    pub fn inverse_link(&self, eta: f64) -> f64 {
        match self.link() {
            Link::Identity => eta,
            Link::Log => eta.min(ETA_MAX).exp(),
            Link::Logit => logistic(eta),
        }
    }

    pub fn link_fn(&self, mu: f64) -> f64 {
        match self.link() {
            Link::Identity => mu,
            Link::Log => mu.ln(),
            Link::Logit => logit(mu),
        }
    }

    /// Mean of the response; `m` is the number of trials (ignored unless binomial).
    pub fn mean(&self, eta: f64, m: f64) -> f64 {
        match self {
            Family::Binomial => m * logistic(eta),
            _ => self.inverse_link(eta),
        }
    }

    pub fn variance(&self, mu: f64, m: f64) -> f64 {
        match *self {
            Family::Gaussian => 1.0,
            Family::Poisson => mu,
            Family::NegativeBinomial { theta } => mu + mu * mu / theta,
            Family::Binomial => {
                let p = (mu / m).clamp(P_EPS, 1.0 - P_EPS);
                m * p * (1.0 - p)
            }
        }
    }

    /// `dμ/dη` at mean `mu`.
    pub fn dmu_deta(&self, mu: f64, m: f64) -> f64 {
        match self {
            Family::Gaussian => 1.0,
            Family::Poisson | Family::NegativeBinomial { .. } => mu.max(f64::MIN_POSITIVE),
            Family::Binomial => {
                let p = (mu / m).clamp(P_EPS, 1.0 - P_EPS);
                m * p * (1.0 - p)
            }
        }
    }

    /// IRLS weight `(dμ/dη)² / V(μ)`.
    pub fn weight(&self, mu: f64, m: f64) -> f64 {
        let d = self.dmu_deta(mu, m);
        d * d / self.variance(mu, m)
    }

    /// `∂ℓ_i/∂η_i`, the per-observation score on the linear-predictor scale.
    pub fn score_eta(&self, y: f64, mu: f64, m: f64) -> f64 {
        match *self {
            Family::Gaussian | Family::Poisson | Family::Binomial => {
                let _ = m;
                y - mu
            }
            Family::NegativeBinomial { theta } => (y - mu) * theta / (theta + mu),
        }
    }

    /// Starting mean for the iteration.
    pub fn initial_mean(&self, y: f64, m: f64) -> f64 {
        match self {
            Family::Gaussian => y,
            Family::Poisson | Family::NegativeBinomial { .. } => y + 0.5,
            Family::Binomial => m * (y + 0.5) / (m + 1.0),
        }
    }

    pub fn unit_deviance(&self, y: f64, mu: f64, m: f64) -> f64 {
        match *self {
            Family::Gaussian => (y - mu) * (y - mu),
            Family::Poisson => 2.0 * (ylogy(y, mu) - (y - mu)),
            Family::NegativeBinomial { theta } => {
                2.0 * (ylogy(y, mu) - (y + theta) * ((y + theta) / (mu + theta)).ln())
            }
            Family::Binomial => {
                let mu = mu.clamp(m * P_EPS, m * (1.0 - P_EPS));
                2.0 * (ylogy(y, mu) + ylogy(m - y, m - mu))
            }
        }
    }

    /// Full log-likelihood contribution, including normalizing constants.
    /// Gaussian uses unit variance; scale it externally if needed.
    pub fn log_likelihood(&self, y: f64, mu: f64, m: f64) -> f64 {
        match *self {
            Family::Gaussian => -0.5 * (y - mu) * (y - mu) - 0.5 * (2.0 * std::f64::consts::PI).ln(),
            Family::Poisson => {
                let t = if y > 0.0 { y * mu.ln() } else { 0.0 };
                t - mu - ln_gamma(y + 1.0)
            }
            Family::NegativeBinomial { theta } => {
                ln_gamma(y + theta) - ln_gamma(theta) - ln_gamma(y + 1.0)
                    - theta * (mu / theta).ln_1p()
                    + if y > 0.0 { y * (mu / (theta + mu)).ln() } else { 0.0 }
            }
            Family::Binomial => {
                let p = mu / m;
                let a = if y > 0.0 { y * p.ln() } else { 0.0 };
                let b = if m - y > 0.0 { (m - y) * (1.0 - p).ln() } else { 0.0 };
                ln_gamma(m + 1.0) - ln_gamma(y + 1.0) - ln_gamma(m - y + 1.0) + a + b
            }
        }
    }

    /// Checks a response value; returns a reason when invalid.
    pub fn check_response(&self, y: f64, m: f64) -> Option<String> {
        if !y.is_finite() {
            return Some(format!("non-finite response {y}"));
        }
        match self {
            Family::Gaussian => None,
            Family::Poisson | Family::NegativeBinomial { .. } => {
                (y < 0.0).then(|| format!("negative count {y}"))
            }
            Family::Binomial => {
                if !(m.is_finite() && m > 0.0) {
                    Some(format!("trials must be positive, got {m}"))
                } else if y < 0.0 || y > m {
                    Some(format!("successes {y} outside [0, {m}]"))
                } else {
                    None
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_links_at_zero() {
        assert_eq!(Family::Poisson.inverse_link(0.0), 1.0);
        assert_eq!(Family::Binomial.inverse_link(0.0), 0.5);
        assert_eq!(Family::Gaussian.inverse_link(0.3), 0.3);
    }

    #[test]
    fn score_matches_finite_difference_of_loglik() {
        let fams = [
            Family::Gaussian,
            Family::Poisson,
            Family::Binomial,
            Family::NegativeBinomial { theta: 3.5 },
        ];
        for fam in fams {
            for &(y, eta, m) in &[(3.0, 0.7, 10.0), (0.0, -0.4, 4.0), (7.0, 1.9, 12.0)] {
                let f = |e: f64| fam.log_likelihood(y, fam.mean(e, m), m);
                let h = 1e-5;
                let fd = (f(eta + h) - f(eta - h)) / (2.0 * h);
                let an = fam.score_eta(y, fam.mean(eta, m), m);
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{fam:?} {fd} {an}");
            }
        }
    }

    #[test]
    fn deviance_zero_at_saturation() {
        assert!(Family::Poisson.unit_deviance(4.0, 4.0, 1.0).abs() < 1e-14);
        assert!(Family::NegativeBinomial { theta: 2.0 }.unit_deviance(4.0, 4.0, 1.0).abs() < 1e-14);
        assert!(Family::Binomial.unit_deviance(3.0, 3.0, 10.0).abs() < 1e-12);
    }
}
