//! Benchmark harness: synthetic problems, scenario seeding, the random
//! baseline and gap curves.
//!
//! Every method in one scenario starts from the same initialization: the
//! session seed and the oracle seed are derived from the scenario seed only.
//! The gap after query `t` is `(f_max − f(x_best)) / (f_max − f_min)`.

mod functions;
mod oracle;
mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use functions::{build_grid, lambda_means, latent_value, sample_lambdas, Grid, LatentFunction, LatentFunctionSpec};
pub use oracle::SyntheticOracle;
pub use report::{write_curves_csv, write_curves_svg, write_failures_csv, write_runs_csv};

use crate::acquisition::AcquisitionKind;
use crate::active::{write_trace_csv, QueryRecord, Session, SessionConfig, StopRule};
use crate::choice::{Instance, NestConfig};
use crate::error::{Error, Result};
use crate::itinerary::{self, ItineraryCoefficients, Normalization, TimeBuckets};
use crate::surrogate::{SurrogateConfig, SurrogateKind};

/// What a benchmark runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchTarget {
    #[serde(rename = "2d")]
    F2d,
    #[serde(rename = "4d")]
    F4d,
    #[serde(rename = "6d")]
    F6d,
    #[serde(rename = "itinerary")]
    Itinerary,
}

impl BenchTarget {
    pub fn name(self) -> &'static str {
        match self {
            Self::F2d => "2d",
            Self::F4d => "4d",
            Self::F6d => "6d",
            Self::Itinerary => "itinerary",
        }
    }

    pub fn function(self) -> Option<LatentFunction> {
        match self {
            Self::F2d => Some(LatentFunction::F2d),
            Self::F4d => Some(LatentFunction::F4d),
            Self::F6d => Some(LatentFunction::F6d),
            Self::Itinerary => None,
        }
    }
}

impl std::str::FromStr for BenchTarget {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("itinerary") {
            return Ok(Self::Itinerary);
        }
        Ok(match s.parse::<LatentFunction>()? {
            LatentFunction::F2d => Self::F2d,
            LatentFunction::F4d => Self::F4d,
            LatentFunction::F6d => Self::F6d,
        })
    }
}

/// How the oracle's nest scales are chosen per scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSource {
    /// Drawn per scenario around the best-first means.
    Sampled,
    Fixed(Vec<f64>),
}

/// A pool with its hidden utilities.
#[derive(Debug, Clone)]
pub struct Problem {
    pub name: String,
    /// What the learner sees.
    pub instances: Vec<Instance>,
    /// Utilities the oracle compares.
    pub utilities: Vec<f64>,
    /// Values the gap is measured on.
    pub truth: Vec<f64>,
    pub nest_count: usize,
    pub lambdas: LambdaSource,
}

impl Problem {
    pub fn from_function(function: LatentFunction) -> Self {
        let grid = build_grid(&function.spec());
        Self {
            name: function.name().to_string(),
            utilities: grid.values.clone(),
            truth: grid.values,
            instances: grid.instances,
            nest_count: grid.nest_count,
            lambdas: LambdaSource::Sampled,
        }
    }

    /// Itinerary choice: the oracle compares linear utilities with one
    /// logsum for all six nests and the gap is read off choice probabilities.
    pub fn from_itineraries(its: &[itinerary::Itinerary], coeffs: &ItineraryCoefficients) -> Result<Self> {
        coeffs.validate()?;
        let truth = itinerary::itinerary_choice_probs(its, coeffs, Normalization::Standard)?;
        Ok(Self {
            name: "itinerary".into(),
            instances: itinerary::to_instances(its),
            utilities: its.iter().map(|it| itinerary::utility(it, coeffs)).collect(),
            truth,
            nest_count: itinerary::NEST_COUNT,
            lambdas: LambdaSource::Fixed(vec![coeffs.logsum; itinerary::NEST_COUNT]),
        })
    }

    /// The bundled itineraries with the default coefficients.
    pub fn itinerary_default() -> Self {
        Self::from_itineraries(&itinerary::bundled_itineraries(), &ItineraryCoefficients::default())
            .expect("bundled data is valid")
    }

    pub fn for_target(target: BenchTarget) -> Self {
        match target.function() {
            Some(f) => Self::from_function(f),
            None => Self::itinerary_default(),
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.instances.len();
        if self.utilities.len() != n || self.truth.len() != n {
            return Err(Error::Config("utilities, truth and instances differ in length".into()));
        }
        if let LambdaSource::Fixed(l) = &self.lambdas {
            if l.len() != self.nest_count {
                return Err(Error::Config(format!("{} fixed λ for {} nests", l.len(), self.nest_count)));
            }
        }
        Ok(())
    }

    /// Normalized gap of instance `id`: 0 at the best instance, 1 at the worst.
    pub fn gap(&self, id: usize) -> f64 {
        let (lo, hi) = self.truth_range();
        if hi > lo {
            (hi - self.truth[id]) / (hi - lo)
        } else {
            0.0
        }
    }

    pub fn truth_range(&self) -> (f64, f64) {
        self.truth.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Oracle and nest scales for one scenario.
    pub fn scenario(&self, scenario_seed: u64) -> Result<(SyntheticOracle, Vec<f64>)> {
        let lambdas = match &self.lambdas {
            LambdaSource::Sampled => sample_lambdas(self.nest_count, &mut ChaCha8Rng::seed_from_u64(mix(scenario_seed, 0))),
            LambdaSource::Fixed(l) => l.clone(),
        };
        let nests = NestConfig::new(lambdas.clone(), self.instances.iter().map(|i| i.nest).collect())?;
        let oracle = SyntheticOracle::new(self.utilities.clone(), self.truth.clone(), nests, mix(scenario_seed, 1));
        Ok((oracle, lambdas))
    }
}

/// splitmix64 finalizer over `seed` and a stream index.
pub fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of scenario `s` under experiment seed `seed`.
pub fn scenario_seed(seed: u64, s: usize) -> u64 {
    mix(seed, 1_000 + s as u64)
}

/// A surrogate and acquisition pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Method {
    pub surrogate: SurrogateKind,
    pub acquisition: AcquisitionKind,
}

impl Method {
    pub fn label(&self) -> String {
        format!("{}+{}", self.surrogate.name(), self.acquisition.name())
    }
}

/// Label of the random baseline in every output.
pub const RANDOM_LABEL: &str = "random";

/// Benchmark settings, readable from TOML or JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: BenchTarget,
    pub models: Vec<SurrogateKind>,
    pub acquisitions: Vec<AcquisitionKind>,
    pub random_baseline: bool,
    pub scenarios: usize,
    /// Active queries per run.
    pub budget: usize,
    pub baseline_repetitions: usize,
    pub seed: u64,
    pub zeta: f64,
    pub stop_rule: StopRule,
    pub model: SurrogateConfig,
    /// Itinerary CSV replacing the bundled file.
    pub itineraries: Option<PathBuf>,
    /// Coefficient TOML replacing the bundled one.
    pub coefficients: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            target: BenchTarget::F2d,
            models: vec![SurrogateKind::Dgp1],
            acquisitions: vec![AcquisitionKind::Pi],
            random_baseline: true,
            scenarios: 10,
            budget: 50,
            baseline_repetitions: 500,
            seed: 0,
            zeta: 1e-4,
            stop_rule: StopRule::Threshold,
            model: bench_model_config(),
            itineraries: None,
            coefficients: None,
            out: None,
        }
    }
}

/// Surrogate settings for benchmarks. Warm-started refits stop after 150
/// Adam steps, which keeps a 50-query deep-GP run to a few seconds per query.
/// Lengthscales of both layers are capped at 0.3 median distances because
/// the test functions oscillate on that scale. The library defaults let
/// smooth utilities through and suit unknown pools better.
pub fn bench_model_config() -> SurrogateConfig {
    let mut cfg = SurrogateConfig::default();
    cfg.fit.warm_max_iterations = 150;
    cfg.fit.lengthscale_bounds = (0.05, 0.3);
    cfg.dgp.top_lengthscale_bounds = (0.05, 0.3);
    cfg
}

impl ExperimentConfig {
    /// Reads a `.json` file as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)?,
            _ => toml::from_str(&text)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios == 0 {
            return Err(Error::Config("scenarios must be positive".into()));
        }
        if self.budget == 0 {
            return Err(Error::Config("budget must be positive".into()));
        }
        if self.random_baseline && self.baseline_repetitions == 0 {
            return Err(Error::Config("baseline_repetitions must be positive".into()));
        }
        if self.methods().is_empty() && !self.random_baseline {
            return Err(Error::Config("nothing to run: no model with an acquisition and no random baseline".into()));
        }
        if !(self.zeta >= 0.0 && self.zeta.is_finite()) {
            return Err(Error::Config(format!("zeta must be non-negative, got {}", self.zeta)));
        }
        self.model.fit.validate()?;
        self.model.dgp.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Every model crossed with every acquisition.
    pub fn methods(&self) -> Vec<Method> {
        self.models
            .iter()
            .flat_map(|&surrogate| self.acquisitions.iter().map(move |&acquisition| Method { surrogate, acquisition }))
            .collect()
    }

    /// The problem named by `target`, with file overrides applied.
    pub fn problem(&self) -> Result<Problem> {
        match self.target {
            BenchTarget::Itinerary => {
                let its = match &self.itineraries {
                    Some(p) => itinerary::load_itineraries(p, &TimeBuckets::default())?,
                    None => itinerary::bundled_itineraries(),
                };
                let coeffs = match &self.coefficients {
                    Some(p) => ItineraryCoefficients::load(p)?,
                    None => ItineraryCoefficients::default(),
                };
                Problem::from_itineraries(&its, &coeffs)
            }
            t => Ok(Problem::for_target(t)),
        }
    }
}

/// One run of one method on one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub scenario: usize,
    pub scenario_seed: u64,
    pub method: String,
    pub acquisition: String,
    /// Gap after queries `1..=budget`, carried forward after a stop.
    pub gaps: Vec<f64>,
    pub records: Vec<QueryRecord>,
    /// Set when the run ended with an error.
    pub failure: Option<String>,
}

impl RunResult {
    /// Fit-and-score seconds summed over the first `k` queries.
    pub fn elapsed(&self, k: usize) -> f64 {
        self.records.iter().take(k).map(|r| r.elapsed).sum()
    }
}

/// Mean gap curve of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: String,
    pub t: usize,
    pub mean_gap: f64,
    pub std_err: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub problem: String,
    pub budget: usize,
    pub runs: Vec<RunResult>,
    /// Random-baseline gap per scenario, averaged over repetitions.
    pub baseline_runs: Vec<Vec<f64>>,
    pub curves: Vec<CurvePoint>,
}

impl BenchReport {
    pub fn curve(&self, method: &str) -> Vec<&CurvePoint> {
        self.curves.iter().filter(|c| c.method == method).collect()
    }

    /// Mean gap of `method` after query `t` (1-based).
    pub fn mean_gap(&self, method: &str, t: usize) -> Option<f64> {
        self.curves.iter().find(|c| c.method == method && c.t == t).map(|c| c.mean_gap)
    }

    pub fn runs_of(&self, method: &str) -> impl Iterator<Item = &RunResult> {
        let m = method.to_string();
        self.runs.iter().filter(move |r| r.method == m)
    }

    /// Writes `runs.csv`, `curves.csv`, `traces.csv`, `failures.csv` and
    /// `curves.svg` into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_runs_csv(std::fs::File::create(dir.join("runs.csv"))?, self)?;
        write_curves_csv(std::fs::File::create(dir.join("curves.csv"))?, &self.curves)?;
        self.write_traces(std::fs::File::create(dir.join("traces.csv"))?)?;
        write_failures_csv(std::fs::File::create(dir.join("failures.csv"))?, self)?;
        std::fs::write(dir.join("curves.svg"), write_curves_svg(&self.curves, &self.problem))?;
        Ok(())
    }

    pub fn write_traces<W: std::io::Write>(&self, out: W) -> Result<()> {
        let rows: Vec<(u64, &str, &str, &QueryRecord)> = self
            .runs
            .iter()
            .flat_map(|r| r.records.iter().map(move |rec| (r.scenario_seed, r.method.as_str(), r.acquisition.as_str(), rec)))
            .collect();
        write_trace_csv(out, &rows, true)
    }
}

/// Runs one method on one scenario. Errors end the run early and are
/// recorded; the gap is carried forward from the last chain top.
pub fn run_method(problem: &Problem, method: Method, config: &ExperimentConfig, scenario: usize) -> Result<RunResult> {
    let seed = scenario_seed(config.seed, scenario);
    let (mut oracle, _) = problem.scenario(seed)?;
    let session_config = SessionConfig {
        surrogate: method.surrogate,
        acquisition: method.acquisition,
        zeta: config.zeta,
        budget: config.budget,
        seed: mix(seed, 2),
        stop_rule: config.stop_rule,
        model: config.model.clone(),
    };
    let mut session = Session::new(problem.instances.clone(), session_config)?;
    let failure = session.run(&mut oracle).err().map(|e| e.to_string());
    let records = session.trace().to_vec();
    let start = session.x_best().map(|b| problem.gap(b));
    let initial = match (records.first(), start) {
        // the chain top before the first query is that query's opponent
        (Some(r), _) => problem.gap(r.incumbent),
        (None, Some(g)) => g,
        (None, None) => 1.0,
    };
    let gaps = carry_forward(records.iter().map(|r| problem.gap(r.x_best)), initial, config.budget);
    Ok(RunResult {
        scenario,
        scenario_seed: seed,
        method: method.label(),
        acquisition: method.acquisition.name().to_string(),
        gaps,
        records,
        failure,
    })
}

fn carry_forward(values: impl Iterator<Item = f64>, initial: f64, budget: usize) -> Vec<f64> {
    let mut out: Vec<f64> = values.take(budget).collect();
    let last = out.last().copied().unwrap_or(initial);
    out.resize(budget, last);
    out
}

/// Random search from the shared initialization: each repetition compares a
/// uniformly drawn unlabeled instance with the current best. Returns the
/// per-repetition gap paths.
pub fn random_baseline(problem: &Problem, config: &ExperimentConfig, scenario: usize) -> Result<Vec<Vec<f64>>> {
    let seed = scenario_seed(config.seed, scenario);
    let (mut oracle, _) = problem.scenario(seed)?;
    let mut session = Session::new(
        problem.instances.clone(),
        SessionConfig { seed: mix(seed, 2), budget: config.budget, ..SessionConfig::default() },
    )?;
    session.two_phase_init(&mut oracle)?;
    let start = session.x_best().ok_or_else(|| Error::InvalidState("initialization left no best instance".into()))?;
    let pool: Vec<usize> = session.unlabeled().iter().copied().collect();
    Ok((0..config.baseline_repetitions)
        .map(|rep| {
            let rep_seed = mix(seed, 10_000 + rep as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(rep_seed);
            let mut answers = oracle.clone();
            answers.reseed(mix(rep_seed, 1));
            let mut pool = pool.clone();
            let mut best = start;
            let path = (0..config.budget).map_while(|_| {
                if pool.is_empty() {
                    return None;
                }
                let c = pool.swap_remove(rng.random_range(0..pool.len()));
                best = crate::active::Oracle::respond(&mut answers, c, best);
                Some(problem.gap(best))
            });
            carry_forward(path.collect::<Vec<_>>().into_iter(), problem.gap(start), config.budget)
        })
        .collect())
}

/// Mean and standard error per query index over equally long paths.
pub fn summarize(method: &str, paths: &[Vec<f64>]) -> Vec<CurvePoint> {
    let budget = paths.first().map_or(0, Vec::len);
    let n = paths.len();
    (0..budget)
        .map(|t| {
            let mean = paths.iter().map(|p| p[t]).sum::<f64>() / n as f64;
            let var = if n > 1 {
                paths.iter().map(|p| (p[t] - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            CurvePoint { method: method.to_string(), t: t + 1, mean_gap: mean, std_err: (var / n as f64).sqrt(), n }
        })
        .collect()
}

/// First query index (1-based) whose gap is at most `target`.
pub fn queries_to_reach(gaps: &[f64], target: f64) -> Option<usize> {
    gaps.iter().position(|&g| g <= target).map(|i| i + 1)
}

/// Runs every configured method and the baseline on every scenario.
/// `progress` receives one line per finished run.
pub fn run_benchmark(config: &ExperimentConfig, problem: &Problem, progress: &mut dyn FnMut(&str)) -> Result<BenchReport> {
    config.validate()?;
    problem.validate()?;
    let started = Instant::now();
    let mut runs = Vec::new();
    let mut curves = Vec::new();
    for method in config.methods() {
        let method_runs: Vec<RunResult> =
            (0..config.scenarios).into_par_iter().map(|s| run_method(problem, method, config, s)).collect::<Result<_>>()?;
        for run in &method_runs {
            progress(&format!(
                "{} scenario {}: final gap {:.4}, {} queries{} [{:.1}s]",
                run.method,
                run.scenario,
                run.gaps.last().copied().unwrap_or(f64::NAN),
                run.records.len(),
                run.failure.as_ref().map(|f| format!(", failed: {f}")).unwrap_or_default(),
                started.elapsed().as_secs_f64()
            ));
        }
        let paths: Vec<Vec<f64>> = method_runs.iter().map(|r| r.gaps.clone()).collect();
        curves.extend(summarize(&method.label(), &paths));
        runs.extend(method_runs);
    }
    let mut baseline_runs = Vec::new();
    if config.random_baseline {
        let per_scenario: Vec<Vec<Vec<f64>>> =
            (0..config.scenarios).into_par_iter().map(|s| random_baseline(problem, config, s)).collect::<Result<_>>()?;
        for reps in &per_scenario {
            baseline_runs.push(summarize(RANDOM_LABEL, reps).into_iter().map(|c| c.mean_gap).collect());
        }
        let all: Vec<Vec<f64>> = per_scenario.into_iter().flatten().collect();
        progress(&format!("random baseline: {} paths [{:.1}s]", all.len(), started.elapsed().as_secs_f64()));
        curves.extend(summarize(RANDOM_LABEL, &all));
    }
    Ok(BenchReport { problem: problem.name.clone(), budget: config.budget, runs, baseline_runs, curves })
}

#[cfg(test)]
mod tests;
