//! Latent test functions on `[0, 1]^p`, their grids and nest assignments.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::choice::Instance;
use crate::error::{Error, Result};

const LOW: f64 = 0.15;
const HIGH: f64 = 0.65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LatentFunction {
    #[serde(rename = "2d")]
    F2d,
    #[serde(rename = "4d")]
    F4d,
    #[serde(rename = "6d")]
    F6d,
}

impl std::str::FromStr for LatentFunction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().trim_start_matches('f') {
            "2d" => Ok(Self::F2d),
            "4d" => Ok(Self::F4d),
            "6d" => Ok(Self::F6d),
            other => Err(format!("unknown function '{other}' (expected 2d, 4d or 6d)")),
        }
    }
}

/// Shape of one test problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentFunctionSpec {
    pub function: LatentFunction,
    pub dimension: usize,
    pub points_per_dim: usize,
    /// Local maxima, one row per center.
    pub centers: Vec<Vec<f64>>,
    /// Centers with the same coordinate multiset share a nest.
    pub merge_permutations: bool,
}

impl LatentFunction {
    pub fn name(self) -> &'static str {
        match self {
            Self::F2d => "2d",
            Self::F4d => "4d",
            Self::F6d => "6d",
        }
    }

    pub fn spec(self) -> LatentFunctionSpec {
        let (dimension, points_per_dim, merge_permutations) = match self {
            Self::F2d => (2, 22, false),
            Self::F4d => (4, 6, true),
            Self::F6d => (6, 5, true),
        };
        let centers = (0..1usize << dimension)
            .map(|mask| (0..dimension).map(|q| if mask >> (dimension - 1 - q) & 1 == 1 { HIGH } else { LOW }).collect())
            .collect();
        LatentFunctionSpec { function: self, dimension, points_per_dim, centers, merge_permutations }
    }
}

fn term(x: f64) -> f64 {
    x.sin() + x / 3.0 + (12.0 * x).sin()
}

/// `Σ sin x_i + x_i/3 + sin 12x_i`, shifted by −1 and floored at 0 for the
/// 2-D function.
pub fn latent_value(spec: &LatentFunctionSpec, x: &[f64]) -> Result<f64> {
    if x.len() != spec.dimension {
        return Err(Error::Domain(format!("expected {} coordinates, got {}", spec.dimension, x.len())));
    }
    if let Some(v) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("coordinate {v} outside [0, 1]")));
    }
    let s: f64 = x.iter().map(|&v| term(v)).sum();
    Ok(match spec.function {
        LatentFunction::F2d => (s - 1.0).max(0.0),
        LatentFunction::F4d | LatentFunction::F6d => s,
    })
}

/// A discretized problem: instances with nest labels and their true values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub instances: Vec<Instance>,
    pub values: Vec<f64>,
    pub nest_count: usize,
    /// Value of each nest's representative center, best nest first.
    pub nest_center_values: Vec<f64>,
}

/// Builds the full grid. Nest ids are ordered by center value, best first,
/// so nest `m` takes the `m`-th λ mean.
pub fn build_grid(spec: &LatentFunctionSpec) -> Grid {
    let k = spec.points_per_dim;
    let axis: Vec<f64> = (0..k).map(|i| i as f64 / (k - 1) as f64).collect();

    // a point's nearest center is found coordinate by coordinate, because
    // the centers form the full product {LOW, HIGH}^p
    let key_of = |c: &[bool]| -> Vec<bool> {
        if spec.merge_permutations {
            let highs = c.iter().filter(|&&h| h).count();
            (0..c.len()).map(|q| q < highs).collect()
        } else {
            c.to_vec()
        }
    };
    let mut keys: Vec<Vec<bool>> = spec
        .centers
        .iter()
        .map(|c| key_of(&c.iter().map(|&v| v == HIGH).collect::<Vec<_>>()))
        .collect();
    keys.sort();
    keys.dedup();
    let center_value = |key: &[bool]| {
        let x: Vec<f64> = key.iter().map(|&h| if h { HIGH } else { LOW }).collect();
        latent_value(spec, &x).expect("centers lie in the unit cube")
    };
    // stable sort keeps the key order among equal center values
    keys.sort_by(|a, b| center_value(b).total_cmp(&center_value(a)));
    let nest_of: BTreeMap<Vec<bool>, usize> = keys.iter().cloned().enumerate().map(|(m, k)| (k, m)).collect();

    let n = k.pow(spec.dimension as u32);
    let mut instances = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    let mut idx = vec![0usize; spec.dimension];
    for id in 0..n {
        let mut rem = id;
        for q in (0..spec.dimension).rev() {
            idx[q] = rem % k;
            rem /= k;
        }
        let x: Vec<f64> = idx.iter().map(|&i| axis[i]).collect();
        // the midpoint between the two center coordinates goes to the lower one
        let near: Vec<bool> = x.iter().map(|&v| v - LOW > HIGH - v + 1e-12).collect();
        let nest = nest_of[&key_of(&near)];
        values.push(latent_value(spec, &x).expect("grid lies in the unit cube"));
        instances.push(Instance::new(id, x, nest));
    }
    let nest_center_values = keys.iter().map(|k| center_value(k)).collect();
    Grid { instances, values, nest_count: keys.len(), nest_center_values }
}

const LAMBDA_MEANS: [f64; 7] = [0.80, 0.75, 0.70, 0.65, 0.60, 0.55, 0.50];

/// Means of the nest scales, best nest first: 0.80, 0.75, ... down to 0.50,
/// which is repeated for any further nests.
pub fn lambda_means(nest_count: usize) -> Vec<f64> {
    (0..nest_count).map(|m| LAMBDA_MEANS[m.min(LAMBDA_MEANS.len() - 1)]).collect()
}

/// One λ per nest from a normal with `σ = 2μ` truncated to `μ ± 0.05`.
pub fn sample_lambdas<R: Rng + ?Sized>(nest_count: usize, rng: &mut R) -> Vec<f64> {
    lambda_means(nest_count)
        .into_iter()
        .map(|mu| {
            let normal = Normal::new(mu, 2.0 * mu).expect("positive scale");
            loop {
                let v: f64 = normal.sample(rng);
                if (mu - 0.05..=mu + 0.05).contains(&v) && v > 0.0 && v <= 1.0 {
                    return v;
                }
            }
        })
        .collect()
}
