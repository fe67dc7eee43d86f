//! Comparison digraph and the preference-chain approximation of its likelihood.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::choice::{pairwise_log_prob, triplet_log_prob, NestConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Relation {
    pub winner: usize,
    pub loser: usize,
}

impl Relation {
    pub fn new(winner: usize, loser: usize) -> Self {
        Self { winner, loser }
    }
}

/// The observed preference relations `D`, in the order they were recorded.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSet {
    relations: Vec<Relation>,
}

impl ComparisonSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_relations(relations: Vec<Relation>) -> Self {
        Self { relations }
    }

    pub fn push(&mut self, winner: usize, loser: usize) {
        self.relations.push(Relation::new(winner, loser));
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn contains(&self, winner: usize, loser: usize) -> bool {
        self.relations.iter().any(|r| r.winner == winner && r.loser == loser)
    }
}

/// A main path (most preferred first) plus single-arc offsprings hanging off
/// main-path nodes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceChain {
    main_path: Vec<usize>,
    offsprings: BTreeMap<usize, Vec<usize>>,
}

impl PreferenceChain {
    pub fn from_parts(main_path: Vec<usize>, offsprings: BTreeMap<usize, Vec<usize>>) -> Result<Self> {
        let chain = Self { main_path, offsprings };
        chain.validate()?;
        Ok(chain)
    }

    pub fn main_path(&self) -> &[usize] {
        &self.main_path
    }

    pub fn offsprings(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.offsprings
    }

    /// The most preferred node (zero out-degree in the "is worse than" sense).
    pub fn top(&self) -> Option<usize> {
        self.main_path.first().copied()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.main_path.contains(&id) || self.offsprings.values().any(|v| v.contains(&id))
    }

    /// Every node in the chain: main path first, then offsprings in key order.
    pub fn nodes(&self) -> Vec<usize> {
        let mut out = self.main_path.clone();
        for children in self.offsprings.values() {
            out.extend(children.iter().copied());
        }
        out
    }

    pub fn offspring_arcs(&self) -> impl Iterator<Item = Relation> + '_ {
        self.offsprings
            .iter()
            .flat_map(|(&parent, children)| children.iter().map(move |&c| Relation::new(parent, c)))
    }

    /// Relabels every node, e.g. from instance ids to positions in a utility
    /// vector.
    pub fn remap(&self, map: &HashMap<usize, usize>) -> Result<Self> {
        let get = |id: &usize| {
            map.get(id)
                .copied()
                .ok_or_else(|| Error::InvalidState(format!("chain node {id} has no index")))
        };
        let main_path = self.main_path.iter().map(get).collect::<Result<Vec<_>>>()?;
        let mut offsprings = BTreeMap::new();
        for (parent, children) in &self.offsprings {
            offsprings.insert(get(parent)?, children.iter().map(get).collect::<Result<Vec<_>>>()?);
        }
        Ok(Self { main_path, offsprings })
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &id in &self.main_path {
            if !seen.insert(id) {
                return Err(Error::InvalidState(format!("node {id} repeated on the main path")));
            }
        }
        for (parent, children) in &self.offsprings {
            if !self.main_path.contains(parent) {
                return Err(Error::InvalidState(format!("offspring parent {parent} not on main path")));
            }
            for &c in children {
                if !seen.insert(c) {
                    return Err(Error::InvalidState(format!("offspring {c} already in chain")));
                }
            }
        }
        Ok(())
    }
}

/// Builds the initial chain from the initialization comparisons.
///
/// One arc is drawn per nest (preferring arcs inside the nest, otherwise any
/// arc won by a nest member). The winners are candidates and the longest path
/// through `D` restricted to them becomes the main path. The loser of the
/// last main-path node extends the path; the other losers become offsprings
/// of their winners. `nests.membership()` is indexed by instance id.
pub fn build_initial_chain<R: Rng + ?Sized>(
    d: &ComparisonSet,
    nests: &NestConfig,
    rng: &mut R,
) -> Result<PreferenceChain> {
    if d.is_empty() {
        return Err(Error::InvalidState("cannot build a chain from an empty comparison set".into()));
    }
    let nest_of = |id: usize| -> Result<usize> {
        nests
            .membership()
            .get(id)
            .copied()
            .ok_or_else(|| Error::InvalidState(format!("instance {id} has no nest")))
    };
    for r in d.relations() {
        nest_of(r.winner)?;
        nest_of(r.loser)?;
    }

    let mut selected: Vec<Relation> = Vec::new();
    for m in 0..nests.nest_count() {
        let inside: Vec<Relation> = d
            .relations()
            .iter()
            .copied()
            .filter(|r| nests.nest_of(r.winner) == m && nests.nest_of(r.loser) == m)
            .collect();
        let pool = if inside.is_empty() {
            d.relations().iter().copied().filter(|r| nests.nest_of(r.winner) == m).collect()
        } else {
            inside
        };
        if let Some(&arc) = pool.choose(rng) {
            selected.push(arc);
        }
    }

    let candidates: BTreeSet<usize> = selected.iter().map(|r| r.winner).collect();
    let mut main_path = longest_path(&candidates, d)?;

    let lowest = *main_path.last().expect("longest path is non-empty");
    if let Some(arc) = selected.iter().find(|r| r.winner == lowest) {
        if !main_path.contains(&arc.loser) {
            main_path.push(arc.loser);
        }
    }

    let mut offsprings: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut placed: BTreeSet<usize> = main_path.iter().copied().collect();
    for arc in &selected {
        if arc.winner == lowest || !main_path.contains(&arc.winner) || placed.contains(&arc.loser) {
            continue;
        }
        placed.insert(arc.loser);
        offsprings.entry(arc.winner).or_default().push(arc.loser);
    }
    PreferenceChain::from_parts(main_path, offsprings)
}

/// Longest directed path in the sub-digraph of `d` induced on `nodes`.
/// Ties go to the lexicographically smallest id sequence.
fn longest_path(nodes: &BTreeSet<usize>, d: &ComparisonSet) -> Result<Vec<usize>> {
    let mut succ: BTreeMap<usize, BTreeSet<usize>> = nodes.iter().map(|&n| (n, BTreeSet::new())).collect();
    let mut indegree: BTreeMap<usize, usize> = nodes.iter().map(|&n| (n, 0)).collect();
    for r in d.relations() {
        if r.winner != r.loser && nodes.contains(&r.winner) && nodes.contains(&r.loser) {
            if succ.get_mut(&r.winner).expect("node").insert(r.loser) {
                *indegree.get_mut(&r.loser).expect("node") += 1;
            }
        }
    }

    let mut ready: BTreeSet<usize> = indegree.iter().filter(|(_, &k)| k == 0).map(|(&n, _)| n).collect();
    let mut topo = Vec::with_capacity(nodes.len());
    while let Some(n) = ready.pop_first() {
        topo.push(n);
        for &s in &succ[&n] {
            let k = indegree.get_mut(&s).expect("node");
            *k -= 1;
            if *k == 0 {
                ready.insert(s);
            }
        }
    }
    if topo.len() != nodes.len() {
        return Err(Error::InvalidState("comparison set contains a preference cycle".into()));
    }

    // best[n] = longest path starting at n, as (length, path)
    let mut best: HashMap<usize, Vec<usize>> = HashMap::new();
    for &n in topo.iter().rev() {
        let mut path = vec![n];
        for &s in &succ[&n] {
            let tail = &best[&s];
            if tail.len() + 1 > path.len() || (tail.len() + 1 == path.len() && tail[..] < path[1..]) {
                path = std::iter::once(n).chain(tail.iter().copied()).collect();
            }
        }
        best.insert(n, path);
    }
    let mut winner: Option<&Vec<usize>> = None;
    for n in &topo {
        let p = &best[n];
        winner = match winner {
            Some(w) if w.len() > p.len() || (w.len() == p.len() && w <= p) => Some(w),
            _ => Some(p),
        };
    }
    Ok(winner.cloned().unwrap_or_default())
}

/// Records the outcome of comparing `new_id` against the current top.
pub fn extend_chain(chain: &PreferenceChain, new_id: usize, new_beats_top: bool) -> Result<PreferenceChain> {
    let top = chain
        .top()
        .ok_or_else(|| Error::InvalidState("cannot extend an empty chain".into()))?;
    if chain.contains(new_id) {
        return Err(Error::InvalidState(format!("instance {new_id} is already in the chain")));
    }
    let mut next = chain.clone();
    if new_beats_top {
        next.main_path.insert(0, new_id);
    } else {
        next.offsprings.entry(top).or_default().push(new_id);
    }
    Ok(next)
}

/// Value and gradient of the chain log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainLogLik {
    pub value: f64,
    pub grad_u: Vec<f64>,
    /// One entry per nest.
    pub grad_lambda: Vec<f64>,
}

/// `log P(P | u)`: consecutive triplets down the main path from the top, a
/// trailing pair if two nodes remain, and one pairwise term per offspring arc.
///
/// Chain nodes index into `u` and `nests.membership()`.
pub fn chain_log_likelihood(chain: &PreferenceChain, u: &[f64], nests: &NestConfig) -> Result<ChainLogLik> {
    let n = u.len();
    if nests.len() != n {
        return Err(Error::InvalidParameter(format!(
            "{} utilities but {} nest assignments",
            n,
            nests.len()
        )));
    }
    for id in chain.nodes() {
        if id >= n {
            return Err(Error::InvalidState(format!("chain node {id} outside utility vector of length {n}")));
        }
    }
    let mut out = ChainLogLik { value: 0.0, grad_u: vec![0.0; n], grad_lambda: vec![0.0; nests.nest_count()] };
    let nest = |i: usize| nests.nest_of(i);

    let path = chain.main_path();
    let mut chunks = path.chunks_exact(3);
    for c in chunks.by_ref() {
        let r = triplet_log_prob([u[c[0]], u[c[1]], u[c[2]]], [nest(c[0]), nest(c[1]), nest(c[2])], nests)?;
        out.value += r.value;
        for (k, &id) in c.iter().enumerate() {
            out.grad_u[id] += r.d_u[k];
        }
        if let Some((m, g)) = r.d_lambda {
            out.grad_lambda[m] += g;
        }
    }
    if let [a, b] = *chunks.remainder() {
        add_pair(&mut out, a, b, u, nests)?;
    }
    for arc in chain.offspring_arcs() {
        add_pair(&mut out, arc.winner, arc.loser, u, nests)?;
    }
    Ok(out)
}

fn add_pair(out: &mut ChainLogLik, w: usize, l: usize, u: &[f64], nests: &NestConfig) -> Result<()> {
    let r = pairwise_log_prob(u[w], u[l], nests.nest_of(w), nests.nest_of(l), nests)?;
    out.value += r.value;
    out.grad_u[w] += r.d_winner;
    out.grad_u[l] += r.d_loser;
    if let Some((m, g)) = r.d_lambda {
        out.grad_lambda[m] += g;
    }
    Ok(())
}
