//! The active-learning session: two-phase initialization, then one query per
//! step chosen by the acquisition rule and answered by an oracle.
//!
//! A session can be driven by an [`Oracle`] (`two_phase_init`, `step`,
//! `run`) or one answer at a time (`next_query` and `answer`), which is what
//! the elicitation service does with a human in the loop.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{adaptive_ucb_with_delta, draw_delta, effective_lambda, prob_improvement, AcquisitionInput, AcquisitionKind};
use crate::chain::{build_initial_chain, extend_chain, ComparisonSet, PreferenceChain};
use crate::choice::{Instance, NestConfig};
use crate::error::{Error, Result};
use crate::surrogate::{SurrogateConfig, SurrogateKind, SurrogateState};

/// Answers pairwise comparisons.
pub trait Oracle {
    /// The preferred one of `a` and `b`.
    fn respond(&mut self, a: usize, b: usize) -> usize;

    /// Ground-truth utility, when the oracle knows it.
    fn true_value(&self, _id: usize) -> Option<f64> {
        None
    }
}

/// When a session stops before its budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Stop when no candidate reaches `ζ` (probability of improvement only).
    Threshold,
    /// Also stop when the acquisition argmax is the instance with the largest
    /// predictive mean over the whole pool.
    PredictedBest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub surrogate: SurrogateKind,
    pub acquisition: AcquisitionKind,
    /// Lower threshold on the probability of improvement.
    pub zeta: f64,
    /// Maximum number of active queries, initialization excluded.
    pub budget: usize,
    pub seed: u64,
    pub stop_rule: StopRule,
    pub model: SurrogateConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            surrogate: SurrogateKind::Dgp1,
            acquisition: AcquisitionKind::Pi,
            zeta: 1e-4,
            budget: 50,
            seed: 0,
            stop_rule: StopRule::Threshold,
            model: SurrogateConfig::default(),
        }
    }
}

/// Why a session stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum StopReason {
    Budget,
    /// Every instance has been compared.
    PoolExhausted,
    BelowThreshold,
    PredictedBest { candidate: usize },
}

/// One issued active query and its answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub step: usize,
    pub candidate: usize,
    /// The opponent: the chain top when the query was issued.
    pub incumbent: usize,
    /// Instance with the largest MAP utility.
    pub model_best: usize,
    pub acquisition: f64,
    pub candidate_won: bool,
    /// Chain top after the answer.
    pub x_best: usize,
    pub best_true_value: Option<f64>,
    /// Fit and scoring time in seconds.
    pub elapsed: f64,
}

/// A comparison waiting for an answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Query {
    Initialization { a: usize, b: usize },
    Active { candidate: usize, incumbent: usize },
}

impl Query {
    pub fn pair(&self) -> (usize, usize) {
        match *self {
            Self::Initialization { a, b } => (a, b),
            Self::Active { candidate, incumbent } => (candidate, incumbent),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NextQuery {
    Ask(Query),
    Finished(StopReason),
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Continued(QueryRecord),
    Terminated(StopReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initialization,
    Active,
    Finished(StopReason),
}

#[derive(Debug, Clone)]
struct Pending {
    step: usize,
    candidate: usize,
    incumbent: usize,
    model_best: usize,
    acquisition: f64,
    elapsed: f64,
}

/// Two-phase initialization as a small state machine: one within-nest pair
/// per nest, then insertion of the winners into a total order by adjacent
/// comparisons from the bottom.
#[derive(Debug, Clone)]
struct InitPlan {
    pairs: Vec<(usize, usize)>,
    answered: usize,
    winners: Vec<usize>,
    /// Best first.
    order: Vec<usize>,
    /// Winner being inserted and the order position it is compared with.
    inserting: Option<(usize, usize)>,
}

impl InitPlan {
    fn current(&mut self) -> Option<(usize, usize)> {
        if self.answered < self.pairs.len() {
            return Some(self.pairs[self.answered]);
        }
        if self.inserting.is_none() {
            if self.order.is_empty() && !self.winners.is_empty() {
                self.order.push(self.winners[0]);
            }
            if self.order.len() < self.winners.len() {
                self.inserting = Some((self.winners[self.order.len()], self.order.len() - 1));
            }
        }
        self.inserting.map(|(w, pos)| (w, self.order[pos]))
    }

    fn record(&mut self, winner: usize) {
        if self.answered < self.pairs.len() {
            self.winners.push(winner);
            self.answered += 1;
            return;
        }
        let (w, pos) = self.inserting.expect("an insertion is in progress");
        if winner != w {
            self.order.insert(pos + 1, w);
            self.inserting = None;
        } else if pos == 0 {
            self.order.insert(0, w);
            self.inserting = None;
        } else {
            self.inserting = Some((w, pos - 1));
        }
    }

    fn done(&mut self) -> bool {
        self.current().is_none()
    }
}

/// State of one elicitation: the pool, what has been compared, the chain and
/// the query trace.
#[derive(Debug, Clone)]
pub struct Session {
    config: SessionConfig,
    instances: Vec<Instance>,
    nest_count: usize,
    /// Labeled ids in the order they were first compared.
    labeled: Vec<usize>,
    unlabeled: BTreeSet<usize>,
    comparisons: ComparisonSet,
    chain: Option<PreferenceChain>,
    x_best: Option<usize>,
    trace: Vec<QueryRecord>,
    phase: Phase,
    init: InitPlan,
    pending: Option<Pending>,
    surrogate: Option<SurrogateState>,
    rng: ChaCha8Rng,
}

impl Session {
    /// Validates the pool and draws the phase-one pairs. Instance ids must be
    /// `0..n` in order and every nest needs at least two members.
    pub fn new(instances: Vec<Instance>, config: SessionConfig) -> Result<Self> {
        if !(config.zeta >= 0.0 && config.zeta.is_finite()) {
            return Err(Error::Config(format!("zeta must be non-negative, got {}", config.zeta)));
        }
        config.model.fit.validate()?;
        config.model.dgp.validate()?;
        if instances.len() < 2 {
            return Err(Error::Config(format!("need at least two instances, got {}", instances.len())));
        }
        let p = instances[0].features.len();
        for (k, inst) in instances.iter().enumerate() {
            if inst.id != k {
                return Err(Error::Config(format!("instance at position {k} has id {}", inst.id)));
            }
            if inst.features.len() != p {
                return Err(Error::Config(format!("instance {k} has {} features, expected {p}", inst.features.len())));
            }
            if inst.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("instance {k} has a non-finite feature")));
            }
        }
        let nest_count = instances.iter().map(|i| i.nest).max().unwrap_or(0) + 1;
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); nest_count];
        for inst in &instances {
            members[inst.nest].push(inst.id);
        }
        if let Some(m) = members.iter().position(|v| v.len() < 2) {
            return Err(Error::Config(format!("nest {m} has {} instances, need at least two", members[m].len())));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let pairs: Vec<(usize, usize)> = members
            .iter()
            .map(|v| {
                let pick = sample(&mut rng, v.len(), 2);
                (v[pick.index(0)], v[pick.index(1)])
            })
            .collect();
        let unlabeled = (0..instances.len()).collect();
        let phase = if config.budget == 0 { Phase::Finished(StopReason::Budget) } else { Phase::Initialization };
        Ok(Self {
            config,
            instances,
            nest_count,
            labeled: Vec::new(),
            unlabeled,
            comparisons: ComparisonSet::new(),
            chain: None,
            x_best: None,
            trace: Vec::new(),
            phase,
            init: InitPlan { pairs, answered: 0, winners: Vec::new(), order: Vec::new(), inserting: None },
            pending: None,
            surrogate: None,
            rng,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn nest_count(&self) -> usize {
        self.nest_count
    }

    pub fn labeled(&self) -> &[usize] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &BTreeSet<usize> {
        &self.unlabeled
    }

    pub fn comparisons(&self) -> &ComparisonSet {
        &self.comparisons
    }

    pub fn chain(&self) -> Option<&PreferenceChain> {
        self.chain.as_ref()
    }

    pub fn x_best(&self) -> Option<usize> {
        self.x_best
    }

    pub fn trace(&self) -> &[QueryRecord] {
        &self.trace
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// The most recent successful fit, if any.
    pub fn surrogate(&self) -> Option<&SurrogateState> {
        self.surrogate.as_ref()
    }

    /// Predictive mean and variance for each labeled instance under the
    /// latest fit.
    pub fn estimates(&self) -> Option<Vec<(usize, f64, f64)>> {
        let s = self.surrogate.as_ref()?;
        Some(
            self.labeled
                .iter()
                .map(|&id| {
                    let p = s.predict(&self.instances[id].features);
                    (id, p.mean, p.variance)
                })
                .collect(),
        )
    }

    /// The outstanding comparison without computing a new one.
    pub fn pending_query(&mut self) -> Option<Query> {
        match self.phase {
            Phase::Initialization => self.init.current().map(|(a, b)| Query::Initialization { a, b }),
            Phase::Active => self.pending.as_ref().map(|p| Query::Active { candidate: p.candidate, incumbent: p.incumbent }),
            Phase::Finished(_) => None,
        }
    }

    /// The next comparison to ask, fitting the surrogate if needed. On a fit
    /// failure the session is left unchanged.
    pub fn next_query(&mut self) -> Result<NextQuery> {
        if self.phase == Phase::Initialization && self.init.done() {
            self.finish_initialization()?;
        }
        match self.phase {
            Phase::Finished(r) => Ok(NextQuery::Finished(r)),
            Phase::Initialization => {
                let (a, b) = self.init.current().expect("initialization has a pending pair");
                Ok(NextQuery::Ask(Query::Initialization { a, b }))
            }
            Phase::Active => {
                if self.pending.is_none() {
                    if let Some(reason) = self.propose()? {
                        self.phase = Phase::Finished(reason);
                        return Ok(NextQuery::Finished(reason));
                    }
                }
                let p = self.pending.as_ref().expect("a query was proposed");
                Ok(NextQuery::Ask(Query::Active { candidate: p.candidate, incumbent: p.incumbent }))
            }
        }
    }

    /// Records the answer to the outstanding comparison. Returns the trace
    /// record for active queries.
    pub fn answer(&mut self, winner: usize) -> Result<Option<QueryRecord>> {
        let query = self
            .pending_query()
            .ok_or_else(|| Error::InvalidState("no comparison is outstanding".into()))?;
        let (a, b) = query.pair();
        if winner != a && winner != b {
            return Err(Error::InvalidState(format!("winner {winner} is not in the outstanding pair ({a}, {b})")));
        }
        let loser = if winner == a { b } else { a };
        self.comparisons.push(winner, loser);
        for id in [a, b] {
            if self.unlabeled.remove(&id) {
                self.labeled.push(id);
            }
        }
        match query {
            Query::Initialization { .. } => {
                self.init.record(winner);
                if self.init.done() {
                    self.finish_initialization()?;
                }
                Ok(None)
            }
            Query::Active { candidate, .. } => {
                let p = self.pending.take().expect("active query is pending");
                let won = winner == candidate;
                let chain = self.chain.as_ref().expect("chain exists in the active phase");
                let chain = extend_chain(chain, candidate, won)?;
                self.x_best = chain.top();
                self.chain = Some(chain);
                let record = QueryRecord {
                    step: p.step,
                    candidate,
                    incumbent: p.incumbent,
                    model_best: p.model_best,
                    acquisition: p.acquisition,
                    candidate_won: won,
                    x_best: self.x_best.expect("chain has a top"),
                    best_true_value: None,
                    elapsed: p.elapsed,
                };
                self.trace.push(record.clone());
                if self.trace.len() >= self.config.budget {
                    self.phase = Phase::Finished(StopReason::Budget);
                }
                Ok(Some(record))
            }
        }
    }

    /// Runs both initialization phases against `oracle`.
    pub fn two_phase_init(&mut self, oracle: &mut dyn Oracle) -> Result<()> {
        while self.phase == Phase::Initialization {
            let (a, b) = self.init.current().expect("initialization has a pending pair");
            let w = oracle.respond(a, b);
            self.answer(w)?;
        }
        Ok(())
    }

    /// One active step: fit, score, query the oracle and update.
    pub fn step(&mut self, oracle: &mut dyn Oracle) -> Result<StepOutcome> {
        if self.phase == Phase::Initialization {
            return Err(Error::InvalidState("initialization has not finished".into()));
        }
        match self.next_query()? {
            NextQuery::Finished(r) => Ok(StepOutcome::Terminated(r)),
            NextQuery::Ask(q) => {
                let (a, b) = q.pair();
                let w = oracle.respond(a, b);
                let mut record = self.answer(w)?.expect("active answers produce a record");
                record.best_true_value = oracle.true_value(record.x_best);
                if let Some(last) = self.trace.last_mut() {
                    last.best_true_value = record.best_true_value;
                }
                Ok(StepOutcome::Continued(record))
            }
        }
    }

    /// Initializes if needed, then steps until the session stops.
    pub fn run(&mut self, oracle: &mut dyn Oracle) -> Result<Vec<QueryRecord>> {
        self.two_phase_init(oracle)?;
        loop {
            if let StepOutcome::Terminated(_) = self.step(oracle)? {
                break;
            }
        }
        Ok(self.trace.clone())
    }

    fn finish_initialization(&mut self) -> Result<()> {
        let nests = self.pool_nests()?;
        let chain = build_initial_chain(&self.comparisons, &nests, &mut self.rng)?;
        self.x_best = chain.top();
        self.chain = Some(chain);
        self.phase = if self.trace.len() >= self.config.budget {
            Phase::Finished(StopReason::Budget)
        } else if self.unlabeled.is_empty() {
            Phase::Finished(StopReason::PoolExhausted)
        } else {
            Phase::Active
        };
        Ok(())
    }

    fn pool_nests(&self) -> Result<NestConfig> {
        NestConfig::from_instances(&self.instances, vec![self.config.model.fit.lambda_init; self.nest_count])
    }

    /// Fits the surrogate on the labeled rows and picks the next candidate.
    fn propose(&mut self) -> Result<Option<StopReason>> {
        if self.trace.len() >= self.config.budget {
            return Ok(Some(StopReason::Budget));
        }
        if self.unlabeled.is_empty() {
            return Ok(Some(StopReason::PoolExhausted));
        }
        let started = Instant::now();
        let p = self.instances[0].features.len();
        let n = self.labeled.len();
        let x = DMatrix::from_fn(n, p, |r, c| self.instances[self.labeled[r]].features[c]);
        let rows: HashMap<usize, usize> = self.labeled.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        let chain = self.chain.as_ref().expect("chain exists in the active phase").remap(&rows)?;
        let membership = self.labeled.iter().map(|&id| self.instances[id].nest).collect();
        let nests = NestConfig::new(vec![self.config.model.fit.lambda_init; self.nest_count], membership)?;
        let state = SurrogateState::fit(self.config.surrogate, &x, &chain, &nests, &self.config.model, self.surrogate.as_ref())?;

        let t = self.trace.len() + 1;
        let incumbent = self.x_best.expect("chain has a top");
        let model_best = self.labeled[state.x_star_index];
        let sigma_star = state.sigma_star();
        let lambdas = state.lambdas().to_vec();
        let delta = match self.config.acquisition {
            AcquisitionKind::Ucb => draw_delta(&mut self.rng),
            AcquisitionKind::Pi => 1.0,
        };
        let inc_nest = self.instances[incumbent].nest;
        let candidates: Vec<usize> = self.unlabeled.iter().copied().collect();
        let kind = self.config.acquisition;
        let instances = &self.instances;
        let scores: Vec<(f64, f64)> = candidates
            .par_iter()
            .map(|&id| {
                let pred = state.predict(&instances[id].features);
                let sigma = pred.variance.sqrt();
                let value = match kind {
                    AcquisitionKind::Pi => prob_improvement(&AcquisitionInput {
                        mu_i: pred.mean,
                        sigma_i: sigma,
                        mu_max: state.mu_max,
                        sigma_star,
                        lambda_m: effective_lambda(instances[id].nest, inc_nest, &lambdas),
                        t,
                        p,
                    }),
                    AcquisitionKind::Ucb => adaptive_ucb_with_delta(pred.mean, sigma, t, p, delta),
                };
                (value, pred.mean)
            })
            .collect();

        let mut best: Option<(usize, f64)> = None;
        for (&id, &(v, _)) in candidates.iter().zip(&scores) {
            let eligible = kind == AcquisitionKind::Ucb || v >= self.config.zeta;
            if eligible && best.is_none_or(|(_, b)| v > b) {
                best = Some((id, v));
            }
        }
        let Some((candidate, acquisition)) = best else {
            self.surrogate = Some(state);
            return Ok(Some(StopReason::BelowThreshold));
        };
        if self.config.stop_rule == StopRule::PredictedBest {
            let mut top = (candidate, f64::NEG_INFINITY);
            for (&id, &(_, m)) in candidates.iter().zip(&scores) {
                if m > top.1 {
                    top = (id, m);
                }
            }
            let labeled_best = state.fit.train_means().into_iter().fold(f64::NEG_INFINITY, f64::max);
            if top.0 == candidate && top.1 > labeled_best {
                self.surrogate = Some(state);
                return Ok(Some(StopReason::PredictedBest { candidate }));
            }
        }
        self.pending = Some(Pending {
            step: t,
            candidate,
            incumbent,
            model_best,
            acquisition,
            elapsed: started.elapsed().as_secs_f64(),
        });
        self.surrogate = Some(state);
        Ok(None)
    }
}

/// Writes trace rows as CSV: `seed, method, acquisition, step,
/// candidate_id, incumbent_id, pi_value, outcome, best_true_value`. Timings
/// are left out so identical runs give identical bytes.
pub fn write_trace_csv<W: Write>(
    out: W,
    rows: &[(u64, &str, &str, &QueryRecord)],
    header: bool,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    if header {
        w.write_record([
            "seed",
            "method",
            "acquisition",
            "step",
            "candidate_id",
            "incumbent_id",
            "pi_value",
            "outcome",
            "best_true_value",
        ])?;
    }
    for (seed, method, acq, r) in rows {
        w.write_record([
            seed.to_string(),
            method.to_string(),
            acq.to_string(),
            r.step.to_string(),
            r.candidate.to_string(),
            r.incumbent.to_string(),
            r.acquisition.to_string(),
            if r.candidate_won { "candidate" } else { "incumbent" }.to_string(),
            r.best_true_value.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
