//! Stochastic comparison oracle with nested-logit noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::active::Oracle;
use crate::choice::{pairwise_prob, NestConfig};

/// Answers `a` vs `b` by a coin flip with the nested-logit pairwise
/// probability of the true utilities. That is exactly the marginal of
/// comparing `u + ε` under a fresh correlated-Gumbel draw.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    utilities: Vec<f64>,
    /// Values reported as ground truth, e.g. for gap curves.
    truth: Vec<f64>,
    nests: NestConfig,
    rng: ChaCha8Rng,
}

impl SyntheticOracle {
    /// `nests.membership()` is indexed by instance id.
    pub fn new(utilities: Vec<f64>, truth: Vec<f64>, nests: NestConfig, seed: u64) -> Self {
        assert_eq!(utilities.len(), nests.len(), "one nest per utility");
        assert_eq!(utilities.len(), truth.len(), "one truth value per utility");
        Self { utilities, truth, nests, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Probability that `a` wins against `b`.
    pub fn win_probability(&self, a: usize, b: usize) -> f64 {
        pairwise_prob(self.utilities[a], self.utilities[b], self.nests.nest_of(a), self.nests.nest_of(b), &self.nests)
            .expect("nest configuration was validated")
    }

    pub fn nests(&self) -> &NestConfig {
        &self.nests
    }

    /// Restarts the answer stream from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }
}

impl Oracle for SyntheticOracle {
    fn respond(&mut self, a: usize, b: usize) -> usize {
        let p = self.win_probability(a, b);
        if self.rng.random::<f64>() < p {
            a
        } else {
            b
        }
    }

    fn true_value(&self, id: usize) -> Option<f64> {
        Some(self.truth[id])
    }
}
