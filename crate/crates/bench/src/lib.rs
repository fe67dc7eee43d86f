//! Fixtures shared by the criterion benches: a real labeled set taken from a
//! short simulated session, so fits are timed on the shapes the active loop
//! actually produces.

use std::collections::HashMap;

use nalgebra::DMatrix;
use nestpref::bench::{scenario_seed, LatentFunction, Problem};
use nestpref::{NestConfig, PreferenceChain, Result, Session, SessionConfig, SurrogateKind};

/// Labeled rows, their preference chain and nest scales after a session.
pub struct FitFixture {
    pub x: DMatrix<f64>,
    pub chain: PreferenceChain,
    pub nests: NestConfig,
}

impl FitFixture {
    pub fn labeled(&self) -> usize {
        self.x.nrows()
    }
}

/// Runs `queries` active GP queries on the test function and returns the
/// labeled set, renumbered so rows of `x` match chain ids.
pub fn session_fixture(function: LatentFunction, queries: usize, seed: u64) -> Result<FitFixture> {
    let problem = Problem::from_function(function);
    let (mut oracle, _) = problem.scenario(scenario_seed(seed, 0))?;
    let config = SessionConfig { surrogate: SurrogateKind::Gp, budget: queries, seed, ..SessionConfig::default() };
    let mut session = Session::new(problem.instances.clone(), config)?;
    session.run(&mut oracle)?;

    let labeled = session.labeled().to_vec();
    let rows: HashMap<usize, usize> = labeled.iter().enumerate().map(|(r, &id)| (id, r)).collect();
    let p = problem.instances[0].features.len();
    let x = DMatrix::from_fn(labeled.len(), p, |r, c| problem.instances[labeled[r]].features[c]);
    let chain = session.chain().expect("session has a chain").remap(&rows)?;
    let membership = labeled.iter().map(|&id| problem.instances[id].nest).collect();
    let nests = NestConfig::new(vec![session.config().model.fit.lambda_init; session.nest_count()], membership)?;
    Ok(FitFixture { x, chain, nests })
}
