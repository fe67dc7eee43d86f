//! Candidate scoring: probability of improvement under the normal–Gumbel
//! convolution, and an adaptive upper confidence bound.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::choice::NestId;

/// Which acquisition rule ranks the unlabeled pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquisitionKind {
    Pi,
    Ucb,
}

impl AcquisitionKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pi => "pi",
            Self::Ucb => "ucb",
        }
    }
}

impl std::str::FromStr for AcquisitionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pi" => Ok(Self::Pi),
            "ucb" => Ok(Self::Ucb),
            other => Err(format!("unknown acquisition '{other}' (expected pi or ucb)")),
        }
    }
}

/// Everything the scoring rules need about one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcquisitionInput {
    pub mu_i: f64,
    pub sigma_i: f64,
    /// Incumbent mean.
    pub mu_max: f64,
    /// Incumbent standard deviation.
    pub sigma_star: f64,
    /// Nest scale shared by candidate and incumbent, or 1 across nests.
    pub lambda_m: f64,
    pub t: usize,
    pub p: usize,
}

/// Logistic-scale inflation from the Gaussian part of the noise.
pub fn gamma(sigma_i: f64, sigma_star: f64, lambda_m: f64) -> f64 {
    (1.0 + PI * (sigma_i * sigma_i + sigma_star * sigma_star) / (8.0 * lambda_m * lambda_m)).sqrt()
}

/// Approximate `P(U_i > U_max)` as a logistic in the mean gap with scale
/// `γλ_m`.
pub fn prob_improvement(inp: &AcquisitionInput) -> f64 {
    let g = gamma(inp.sigma_i, inp.sigma_star, inp.lambda_m);
    let z = (inp.mu_i - inp.mu_max) / (g * inp.lambda_m);
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// The nest scale to use between a candidate and the incumbent.
pub fn effective_lambda(candidate: NestId, incumbent: NestId, lambdas: &[f64]) -> f64 {
    if candidate == incumbent {
        lambdas[candidate]
    } else {
        1.0
    }
}

/// `τ_t = 2 log(t^{p/2+2} π² / (3δ))`.
pub fn ucb_tau(t: usize, p: usize, delta: f64) -> f64 {
    let t = t.max(1) as f64;
    2.0 * ((p as f64 / 2.0 + 2.0) * t.ln() + (PI * PI / (3.0 * delta)).ln())
}

/// `μ + √τ_t σ` for a given confidence draw `δ`.
pub fn adaptive_ucb_with_delta(mu: f64, sigma: f64, t: usize, p: usize, delta: f64) -> f64 {
    mu + ucb_tau(t, p, delta).sqrt() * sigma
}

/// Draws `δ ~ U(0, 1)` and evaluates the bound. Sessions draw `δ` once per
/// step and use [`adaptive_ucb_with_delta`] for every candidate.
pub fn adaptive_ucb<R: Rng + ?Sized>(mu: f64, sigma: f64, t: usize, p: usize, rng: &mut R) -> f64 {
    adaptive_ucb_with_delta(mu, sigma, t, p, draw_delta(rng))
}

/// A uniform draw on the open interval `(0, 1)`.
pub fn draw_delta<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let d: f64 = rng.random();
        if d > 0.0 {
            return d;
        }
    }
}
