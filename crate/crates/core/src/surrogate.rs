//! One interface over the DC-GP and DC-DGP fits, as used by the active loop.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chain::PreferenceChain;
use crate::choice::NestConfig;
use crate::dgp::{fit_map_dgp, DgpConfig, DgpFit, DgpWarmStart};
use crate::error::Result;
use crate::gp::{fit_map, FitConfig, GpFit, GpWarmStart, Prediction};

/// The utility prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateKind {
    Gp,
    Dgp1,
    Dgp5,
}

impl SurrogateKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gp => "gp",
            Self::Dgp1 => "dgp1",
            Self::Dgp5 => "dgp5",
        }
    }

    /// Hidden-layer width, `None` for the shallow model.
    pub fn hidden_dim(self) -> Option<usize> {
        match self {
            Self::Gp => None,
            Self::Dgp1 => Some(1),
            Self::Dgp5 => Some(5),
        }
    }
}

impl std::str::FromStr for SurrogateKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "gp" | "dcgp" => Ok(Self::Gp),
            "dgp1" | "dcdgp1" => Ok(Self::Dgp1),
            "dgp5" | "dcdgp5" => Ok(Self::Dgp5),
            other => Err(format!("unknown surrogate '{other}' (expected gp, dgp1 or dgp5)")),
        }
    }
}

/// Settings for either surrogate. The hidden width in `dgp` is overridden
/// by the kind.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub fit: FitConfig,
    pub dgp: DgpConfig,
}

#[derive(Debug, Clone)]
pub enum SurrogateFit {
    Gp(GpFit),
    Dgp(DgpFit),
}

/// Fitted surrogate plus the quantities the acquisition step reads off it.
#[derive(Debug, Clone)]
pub struct SurrogateState {
    pub kind: SurrogateKind,
    pub fit: SurrogateFit,
    /// Row of the largest MAP utility.
    pub x_star_index: usize,
    /// Largest predictive mean over the labeled rows.
    pub mu_max: f64,
}

impl SurrogateState {
    /// Fits `kind` on the labeled rows `x`. A previous state whose rows are
    /// a prefix of `x` is used as a warm start.
    pub fn fit(
        kind: SurrogateKind,
        x: &DMatrix<f64>,
        chain: &PreferenceChain,
        nests: &NestConfig,
        config: &SurrogateConfig,
        previous: Option<&SurrogateState>,
    ) -> Result<Self> {
        let previous = previous.filter(|p| p.kind == kind);
        let fit = match kind.hidden_dim() {
            None => {
                let warm = previous.and_then(|p| match &p.fit {
                    SurrogateFit::Gp(g) => Some(extend_gp_warm(g, x)),
                    SurrogateFit::Dgp(_) => None,
                });
                SurrogateFit::Gp(fit_map(x, chain, nests, &config.fit, warm.as_ref())?)
            }
            Some(d) => {
                let warm: Option<DgpWarmStart> = previous.and_then(|p| match &p.fit {
                    SurrogateFit::Dgp(f) => Some(f.warm_start()),
                    SurrogateFit::Gp(_) => None,
                });
                let cfg = DgpConfig { hidden_dim: d, ..config.dgp.clone() };
                SurrogateFit::Dgp(fit_map_dgp(x, chain, nests, &config.fit, &cfg, warm.as_ref())?)
            }
        };
        let x_star_index = fit.x_star_index();
        let mu_max = fit.train_means().into_iter().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { kind, fit, x_star_index, mu_max })
    }

    pub fn predict(&self, x: &[f64]) -> Prediction {
        self.fit.predict(x)
    }

    pub fn u_star(&self) -> &DVector<f64> {
        self.fit.u_star()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        self.fit.covariance()
    }

    pub fn lambdas(&self) -> &[f64] {
        self.fit.lambdas()
    }

    /// Incumbent standard deviation, read off the Laplace covariance.
    pub fn sigma_star(&self) -> f64 {
        self.covariance()[(self.x_star_index, self.x_star_index)].max(0.0).sqrt()
    }
}

impl SurrogateFit {
    pub fn predict(&self, x: &[f64]) -> Prediction {
        match self {
            Self::Gp(f) => f.predict(x),
            Self::Dgp(f) => f.predict(x),
        }
    }

    pub fn u_star(&self) -> &DVector<f64> {
        match self {
            Self::Gp(f) => &f.u_star,
            Self::Dgp(f) => &f.u_star,
        }
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        match self {
            Self::Gp(f) => &f.hessian,
            Self::Dgp(f) => &f.hessian,
        }
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        match self {
            Self::Gp(f) => &f.covariance,
            Self::Dgp(f) => &f.covariance,
        }
    }

    pub fn lambdas(&self) -> &[f64] {
        match self {
            Self::Gp(f) => &f.lambdas,
            Self::Dgp(f) => &f.lambdas,
        }
    }

    pub fn x_star_index(&self) -> usize {
        match self {
            Self::Gp(f) => f.x_star_index(),
            Self::Dgp(f) => f.x_star_index(),
        }
    }

    pub fn train_means(&self) -> Vec<f64> {
        match self {
            Self::Gp(f) => f.train_means(),
            Self::Dgp(f) => f.train_means(),
        }
    }

    pub fn converged(&self) -> bool {
        match self {
            Self::Gp(f) => f.converged,
            Self::Dgp(f) => f.converged,
        }
    }

    pub fn objective(&self) -> f64 {
        match self {
            Self::Gp(f) => f.objective,
            Self::Dgp(f) => f.objective,
        }
    }

    pub fn iterations(&self) -> usize {
        match self {
            Self::Gp(f) => f.iterations,
            Self::Dgp(f) => f.iterations,
        }
    }
}

/// Carries a GP fit over to `x`, whose leading rows are the old inputs;
/// new rows start at their predictive mean.
fn extend_gp_warm(fit: &GpFit, x: &DMatrix<f64>) -> GpWarmStart {
    let mut warm = fit.warm_start();
    if warm.u.len() > x.nrows() {
        // not a prefix: the caller gets a cold start
        warm.u.clear();
        return warm;
    }
    for r in warm.u.len()..x.nrows() {
        let row: Vec<f64> = x.row(r).iter().copied().collect();
        warm.u.push(fit.predict(&row).mean);
    }
    warm
}
