//! Joint Markov Scheduling: absorbing reward chains, free-lunch collapsing,
//! Gittins indices, the index policy, visit vectors and a brute-force oracle.
//!
//! Reward semantics: R(s) of a non-terminal state is paid each time the chain
//! is played from s; R(t) of a terminal state is paid on entry, and entering
//! a terminal state selects the chain.

use std::collections::{HashMap, VecDeque};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::pandora::PandoraInstance;
use crate::tol;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ChainRepr")]
pub struct MarkovChain {
    pub states: usize,
    pub terminal: Vec<usize>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<f64>,
    pub start: usize,
}

#[derive(Deserialize)]
struct ChainRepr {
    states: usize,
    terminal: Vec<usize>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    r: Vec<f64>,
    start: usize,
}

impl TryFrom<ChainRepr> for MarkovChain {
    type Error = Error;
    fn try_from(c: ChainRepr) -> Result<Self> {
        if c.states != c.a.len() {
            return invalid(format!("states = {} but A has {} rows", c.states, c.a.len()));
        }
        MarkovChain::new(c.a, c.r, c.terminal, c.start)
    }
}

impl MarkovChain {
    pub fn new(a: Vec<Vec<f64>>, r: Vec<f64>, mut terminal: Vec<usize>, start: usize) -> Result<Self> {
        let n = a.len();
        terminal.sort_unstable();
        terminal.dedup();
        let c = Self { states: n, terminal, a, r, start };
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        let n = self.states;
        if n == 0 || self.a.len() != n || self.r.len() != n || self.a.iter().any(|row| row.len() != n) {
            return invalid("transition matrix and rewards must be square and match the state count");
        }
        if self.start >= n || self.terminal.iter().any(|&t| t >= n) {
            return invalid("state index out of range");
        }
        if self.r.iter().any(|x| !x.is_finite()) {
            return invalid("rewards must be finite");
        }
        for (s, row) in self.a.iter().enumerate() {
            if row.iter().any(|p| !(*p >= 0.0)) {
                return invalid(format!("row {s} has a negative probability"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > tol::ROW_SUM {
                return invalid(format!("row {s} sums to {sum}"));
            }
            if self.is_terminal(s) && row[s] != 1.0 {
                return invalid(format!("terminal state {s} must be absorbing"));
            }
        }
        // Every non-terminal state must reach a terminal one.
        let mut reach = vec![false; n];
        for &t in &self.terminal {
            reach[t] = true;
        }
        let mut changed = true;
        while changed {
            changed = false;
            for s in 0..n {
                if !reach[s] && (0..n).any(|u| self.a[s][u] > 0.0 && reach[u]) {
                    reach[s] = true;
                    changed = true;
                }
            }
        }
        if let Some(s) = reach.iter().position(|r| !r) {
            return invalid(format!("state {s} cannot reach a terminal state"));
        }
        Ok(())
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal.binary_search(&s).is_ok()
    }

    fn is_free_lunch(&self, s: usize) -> bool {
        !self.is_terminal(s) && self.r[s] > 0.0 && !self.terminal.iter().any(|&t| self.a[s][t] > 0.0)
    }

    /// Expected visits to each state when the chain is played from `start`
    /// until absorption (terminal states: absorption probability).
    pub fn fundamental_row(&self, start_dist: &[f64]) -> Result<Vec<f64>> {
        let nt: Vec<usize> = (0..self.states).filter(|&s| !self.is_terminal(s)).collect();
        let m = nt.len();
        let mut out = vec![0.0; self.states];
        if m == 0 {
            for s in 0..self.states {
                out[s] = start_dist[s];
            }
            return Ok(out);
        }
        let q = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { 0.0 } - self.a[nt[i]][nt[j]]);
        let e = DVector::from_fn(m, |i, _| start_dist[nt[i]]);
        let lu = q.transpose().lu();
        let x = lu.solve(&e).ok_or_else(|| Error::InvalidInput("chain is not absorbing".into()))?;
        for (i, &s) in nt.iter().enumerate() {
            out[s] = x[i];
        }
        for &t in &self.terminal {
            out[t] = start_dist[t] + nt.iter().enumerate().map(|(i, &s)| x[i] * self.a[s][t]).sum::<f64>();
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JmsInstance {
    pub chains: Vec<MarkovChain>,
    pub capacity: usize,
}

impl JmsInstance {
    pub fn new(chains: Vec<MarkovChain>, capacity: usize) -> Result<Self> {
        if chains.is_empty() || capacity < 1 || capacity > chains.len() {
            return invalid(format!("capacity {capacity} outside 1..={}", chains.len()));
        }
        let inst = Self { chains, capacity };
        if inst.chains.iter().flat_map(|c| &c.r).any(|r| r.abs() > 1.0) {
            log::debug!("rewards exceed 1 in absolute value");
        }
        Ok(inst)
    }

    /// Total number of states d.
    pub fn dim(&self) -> usize {
        self.chains.iter().map(|c| c.states).sum()
    }

    /// Offset of each chain's block in global state vectors.
    pub fn offsets(&self) -> Vec<usize> {
        let mut o = Vec::with_capacity(self.chains.len());
        let mut acc = 0;
        for c in &self.chains {
            o.push(acc);
            acc += c.states;
        }
        o
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.chains.iter().flat_map(|c| c.r.iter().copied()).collect()
    }

    /// Same chains with the global reward vector replaced.
    pub fn with_rewards(&self, r: &[f64]) -> Self {
        let mut out = self.clone();
        let mut k = 0;
        for c in &mut out.chains {
            for x in &mut c.r {
                *x = r[k];
                k += 1;
            }
        }
        out
    }

    /// Indicator vector of terminal states.
    pub fn terminal_mask(&self) -> Vec<bool> {
        self.chains
            .iter()
            .flat_map(|c| (0..c.states).map(move |s| c.is_terminal(s)))
            .collect()
    }
}

/// No free lunch: every positive-reward non-terminal state may terminate.
pub fn is_nfl(chain: &MarkovChain) -> bool {
    (0..chain.states).all(|s| !chain.is_free_lunch(s))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CollapseOrder {
    LowestFirst,
    HighestFirst,
}

/// A chain with its free-lunch states eliminated.
#[derive(Clone, Debug, PartialEq)]
pub struct CollapsedChain {
    pub chain: MarkovChain,
    /// Original state → collapsed state (None when eliminated).
    pub state_map: Vec<Option<usize>>,
    /// Eliminated states in elimination order.
    pub eliminated: Vec<usize>,
    /// Start distribution over collapsed states.
    pub start_dist: Vec<f64>,
    /// Expected reward earned before reaching `start_dist`.
    pub prefix_reward: f64,
}

pub fn collapse(chain: &MarkovChain) -> Result<CollapsedChain> {
    collapse_by(chain, CollapseOrder::LowestFirst)
}

/// Remove free-lunch states one at a time. For an eliminated state s and a
/// parent p, R(p) gains A(p,s)·R(s)/(1−A(s,s)) and A(p,c) gains
/// A(p,s)·A(s,c)/(1−A(s,s)). A start state that is eliminated is replayed as
/// a prefix.
pub fn collapse_by(chain: &MarkovChain, order: CollapseOrder) -> Result<CollapsedChain> {
    let n = chain.states;
    let mut a = chain.a.clone();
    let mut r = chain.r.clone();
    let mut alive = vec![true; n];
    let mut start = vec![0.0; n];
    start[chain.start] = 1.0;
    let mut prefix = 0.0;
    let mut eliminated = Vec::new();
    let is_fl = |a: &Vec<Vec<f64>>, r: &Vec<f64>, s: usize| {
        !chain.is_terminal(s) && r[s] > 0.0 && !chain.terminal.iter().any(|&t| a[s][t] > 0.0)
    };
    loop {
        let pick = match order {
            CollapseOrder::LowestFirst => (0..n).find(|&s| alive[s] && is_fl(&a, &r, s)),
            CollapseOrder::HighestFirst => (0..n).rev().find(|&s| alive[s] && is_fl(&a, &r, s)),
        };
        let Some(s) = pick else { break };
        let stay = a[s][s];
        if stay >= 1.0 {
            return invalid(format!("state {s} never leaves"));
        }
        let f = 1.0 / (1.0 - stay);
        for p in 0..n {
            if p == s || !alive[p] || a[p][s] == 0.0 {
                continue;
            }
            let w = a[p][s] * f;
            r[p] += w * r[s];
            for c in 0..n {
                if c != s {
                    a[p][c] += w * a[s][c];
                }
            }
            a[p][s] = 0.0;
        }
        if start[s] > 0.0 {
            let w = start[s] * f;
            prefix += w * r[s];
            for c in 0..n {
                if c != s {
                    start[c] += w * a[s][c];
                }
            }
            start[s] = 0.0;
        }
        alive[s] = false;
        eliminated.push(s);
    }
    let mut state_map = vec![None; n];
    let keep: Vec<usize> = (0..n).filter(|&s| alive[s]).collect();
    for (k, &s) in keep.iter().enumerate() {
        state_map[s] = Some(k);
    }
    let m = keep.len();
    let na: Vec<Vec<f64>> = keep.iter().map(|&p| keep.iter().map(|&c| a[p][c]).collect()).collect();
    let nr: Vec<f64> = keep.iter().map(|&s| r[s]).collect();
    let nterm: Vec<usize> = chain.terminal.iter().filter_map(|&t| state_map[t]).collect();
    let sd: Vec<f64> = keep.iter().map(|&s| start[s]).collect();
    let nstart = sd
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    // Renormalise rows against accumulated rounding.
    let na: Vec<Vec<f64>> = na
        .into_iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            row.into_iter().map(|x| x / s).collect()
        })
        .collect();
    let collapsed = MarkovChain { states: m, terminal: nterm, a: na, r: nr, start: nstart };
    collapsed.validate()?;
    Ok(CollapsedChain { chain: collapsed, state_map, eliminated, start_dist: sd, prefix_reward: prefix })
}

/// Optimal-stopping continuation set and values for terminal rewards
/// shifted by −σ. Returns (V over all states, continuation set).
fn stopping_values(chain: &MarkovChain, sigma: f64) -> (Vec<f64>, Vec<bool>) {
    let n = chain.states;
    let nt: Vec<usize> = (0..n).filter(|&s| !chain.is_terminal(s)).collect();
    let mut cont = vec![false; n];
    for &s in &nt {
        cont[s] = true;
    }
    let mut v = vec![0.0; n];
    for _ in 0..(4 * n + 20) {
        v = evaluate_continuation(chain, sigma, &cont);
        let mut changed = false;
        for &s in &nt {
            let q = chain.r[s] + (0..n).map(|u| chain.a[s][u] * v[u]).sum::<f64>();
            let want = q > 1e-12 * (1.0 + q.abs());
            if want != cont[s] {
                cont[s] = want;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    (v, cont)
}

/// Values of the stationary rule "continue on `cont`, stop elsewhere".
fn evaluate_continuation(chain: &MarkovChain, sigma: f64, cont: &[bool]) -> Vec<f64> {
    let n = chain.states;
    let mut v = vec![0.0; n];
    for &t in &chain.terminal {
        v[t] = chain.r[t] - sigma;
    }
    let cs: Vec<usize> = (0..n).filter(|&s| cont[s]).collect();
    if cs.is_empty() {
        return v;
    }
    let m = cs.len();
    let mat = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { 0.0 } - chain.a[cs[i]][cs[j]]);
    let rhs = DVector::from_fn(m, |i, _| {
        let s = cs[i];
        chain.r[s] + chain.terminal.iter().map(|&t| chain.a[s][t] * (chain.r[t] - sigma)).sum::<f64>()
    });
    if let Some(x) = mat.lu().solve(&rhs) {
        for (i, &s) in cs.iter().enumerate() {
            v[s] = x[i];
        }
    }
    v
}

/// Q_σ(s): play s once, then continue optimally.
fn play_value(chain: &MarkovChain, s: usize, sigma: f64) -> (f64, Vec<bool>) {
    let (v, cont) = stopping_values(chain, sigma);
    let q = chain.r[s] + (0..chain.states).map(|u| chain.a[s][u] * v[u]).sum::<f64>();
    (q, cont)
}

/// Root of the linear piece of σ ↦ Q_σ(s) for a fixed continuation set.
fn piece_root(chain: &MarkovChain, s: usize, cont: &[bool]) -> Option<f64> {
    let n = chain.states;
    let v0 = evaluate_continuation(chain, 0.0, cont);
    let v1 = evaluate_continuation(chain, 1.0, cont);
    let q = |v: &[f64]| chain.r[s] + (0..n).map(|u| chain.a[s][u] * v[u]).sum::<f64>();
    let (q0, q1) = (q(&v0), q(&v1));
    let beta = q0 - q1;
    if beta <= 1e-15 {
        return None;
    }
    Some(q0 / beta)
}

/// Gittins index of a non-terminal state of an NFL chain: the σ at which
/// playing from `state` with terminal rewards shifted by −σ is worth zero.
pub fn gittins_index(chain: &MarkovChain, state: usize) -> Result<f64> {
    if state >= chain.states || chain.is_terminal(state) {
        return invalid(format!("state {state} is not a non-terminal state"));
    }
    let g = |x: f64| play_value(chain, state, x).0;
    let tmin = chain.terminal.iter().map(|&t| chain.r[t]).fold(f64::INFINITY, f64::min);
    let tmax = chain.terminal.iter().map(|&t| chain.r[t]).fold(f64::NEG_INFINITY, f64::max);
    let d = chain.states as f64;
    let mut lo = tmin - d;
    let mut hi = tmax + d;
    let mut width = hi - lo + 1.0;
    let mut guard = 0;
    while g(lo) <= 0.0 {
        lo -= width;
        width *= 2.0;
        guard += 1;
        if guard > 200 {
            return Err(Error::NonConvergence("no lower bracket for the Gittins index".into()));
        }
    }
    while g(hi) > 0.0 {
        hi += width;
        width *= 2.0;
        guard += 1;
        if guard > 200 {
            return Err(Error::NonConvergence("no upper bracket for the Gittins index".into()));
        }
    }
    let mut iters = 0;
    while hi - lo > tol::GITTINS * (1.0 + lo.abs().max(hi.abs())) {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iters += 1;
        if iters > 400 {
            return Err(Error::NonConvergence("Gittins bisection".into()));
        }
    }
    // Exact root on the linear piece at either end of the bracket.
    let slack = 10.0 * (hi - lo) + 1e-12;
    for end in [lo, hi] {
        let (_, cont) = play_value(chain, state, end);
        if let Some(r) = piece_root(chain, state, &cont) {
            if r >= lo - slack && r <= hi + slack {
                return Ok(r);
            }
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Index of every state of every chain (None for terminal states).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexTable {
    pub sigma: Vec<Vec<Option<f64>>>,
}

impl IndexTable {
    pub fn get(&self, chain: usize, state: usize) -> Option<f64> {
        self.sigma[chain][state]
    }
}

/// Collapse every chain and compute Gittins indices; eliminated states get +∞.
pub fn index_table(instance: &JmsInstance) -> Result<IndexTable> {
    let sigma = instance
        .chains
        .iter()
        .map(|c| chain_indices(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(IndexTable { sigma })
}

fn chain_indices(c: &MarkovChain) -> Result<Vec<Option<f64>>> {
    let col = collapse(c)?;
    (0..c.states)
        .map(|s| {
            if c.is_terminal(s) {
                return Ok(None);
            }
            match col.state_map[s] {
                None => Ok(Some(f64::INFINITY)),
                Some(k) => gittins_index(&col.chain, k).map(Some),
            }
        })
        .collect()
}

/// Tie-breaking among chains with equal index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JmsTie {
    /// Lowest chain position first.
    #[default]
    Lexicographic,
    /// Earlier chains in the list first; unlisted chains after, by position.
    Priority { order: Vec<usize> },
}

impl JmsTie {
    fn rank(&self, n: usize) -> Vec<usize> {
        match self {
            JmsTie::Lexicographic => (0..n).collect(),
            JmsTie::Priority { order } => {
                let mut rank = vec![usize::MAX; n];
                for (r, &c) in order.iter().enumerate() {
                    if c < n && rank[c] == usize::MAX {
                        rank[c] = r;
                    }
                }
                let mut next = order.len();
                for x in rank.iter_mut() {
                    if *x == usize::MAX {
                        *x = next;
                        next += 1;
                    }
                }
                rank
            }
        }
    }
}

const INDEX_TOL: f64 = 1e-10;

fn choose_chain(table: &IndexTable, states: &[usize], rank: &[usize], inst: &JmsInstance) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in states.iter().enumerate() {
        if inst.chains[i].is_terminal(s) {
            continue;
        }
        let x = table.sigma[i][s].unwrap_or(f64::NEG_INFINITY);
        best = match best {
            None => Some((i, x)),
            Some((j, y)) => {
                let better = if x.is_infinite() || y.is_infinite() {
                    x > y || (x == y && rank[i] < rank[j])
                } else {
                    x > y + INDEX_TOL || ((x - y).abs() <= INDEX_TOL && rank[i] < rank[j])
                };
                if better { Some((i, x)) } else { Some((j, y)) }
            }
        };
    }
    match best {
        Some((i, x)) if x > INDEX_TOL => Some(i),
        _ => None,
    }
}

/// Supplies the next state of a played chain.
pub trait TransitionStream {
    fn next(&mut self, chain: usize, state: usize, row: &[f64]) -> usize;
}

/// Seeded random transitions.
pub struct SeededStream {
    rng: ChaCha8Rng,
}

impl SeededStream {
    pub fn new(seed: u64, trial: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial);
        Self { rng }
    }
}

impl TransitionStream for SeededStream {
    fn next(&mut self, _chain: usize, _state: usize, row: &[f64]) -> usize {
        let u: f64 = self.rng.gen();
        let mut acc = 0.0;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

/// Scripted transitions: per chain, the successive next states.
pub struct ScriptedStream {
    pub script: Vec<VecDeque<usize>>,
}

impl TransitionStream for ScriptedStream {
    fn next(&mut self, chain: usize, _state: usize, row: &[f64]) -> usize {
        self.script[chain]
            .pop_front()
            .unwrap_or_else(|| row.iter().position(|&p| p > 0.0).unwrap_or(0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Visit counts in global state order.
    pub visits: Vec<f64>,
    pub reward: f64,
    /// Chains selected, in order.
    pub selected: Vec<usize>,
}

/// Run the index policy on one sample path.
pub fn run_index_policy(
    instance: &JmsInstance,
    table: &IndexTable,
    stream: &mut dyn TransitionStream,
    tie: &JmsTie,
) -> Trajectory {
    let n = instance.chains.len();
    let off = instance.offsets();
    let rank = tie.rank(n);
    let mut states: Vec<usize> = instance.chains.iter().map(|c| c.start).collect();
    let mut visits = vec![0.0; instance.dim()];
    let mut reward = 0.0;
    let mut selected = Vec::new();
    // Start states that are terminal count as selected on entry.
    for (i, c) in instance.chains.iter().enumerate() {
        if c.is_terminal(c.start) {
            visits[off[i] + c.start] += 1.0;
            reward += c.r[c.start];
            selected.push(i);
        }
    }
    while selected.len() < instance.capacity {
        let Some(i) = choose_chain(table, &states, &rank, instance) else { break };
        let c = &instance.chains[i];
        let s = states[i];
        visits[off[i] + s] += 1.0;
        reward += c.r[s];
        let t = stream.next(i, s, &c.a[s]);
        states[i] = t;
        if c.is_terminal(t) {
            visits[off[i] + t] += 1.0;
            reward += c.r[t];
            selected.push(i);
        }
    }
    Trajectory { visits, reward, selected }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VisitMethod {
    Exact { cap: usize },
    Mc { trials: usize, seed: u64 },
}

impl Default for VisitMethod {
    fn default() -> Self {
        VisitMethod::Exact { cap: tol::STATE_CAP }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitVector {
    pub p: Vec<f64>,
    pub h_p: f64,
    /// Per-entry standard errors for Monte Carlo estimates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<Vec<f64>>,
}

impl VisitVector {
    pub fn dot(&self, x: &[f64]) -> f64 {
        self.p.iter().zip(x).map(|(a, b)| a * b).sum()
    }
}

/// Upper bound on expected visits: the largest fundamental-matrix entry
/// from each chain's start, and 1 for terminal states.
pub fn h_p(instance: &JmsInstance) -> Result<f64> {
    let mut h = 1.0f64;
    for c in &instance.chains {
        let mut e = vec![0.0; c.states];
        e[c.start] = 1.0;
        let row = c.fundamental_row(&e)?;
        for (s, x) in row.iter().enumerate() {
            if !c.is_terminal(s) {
                h = h.max(*x);
            }
        }
    }
    Ok(h)
}

type JointKey = Vec<u16>;

/// Joint state: per-chain states followed by the selected count.
fn encode(states: &[usize], n_sel: usize) -> JointKey {
    let mut k: Vec<u16> = states.iter().map(|&s| s as u16).collect();
    k.push(n_sel as u16);
    k
}

/// Successors of playing chain i in joint state `key` (self-loop folded).
/// Returns (plays of the current state, [(prob, next key, terminal entered)]).
fn play_successors(inst: &JmsInstance, key: &[u16], i: usize) -> (f64, Vec<(f64, JointKey, Option<usize>)>) {
    let c = &inst.chains[i];
    let s = key[i] as usize;
    let n = inst.chains.len();
    let stay = c.a[s][s];
    let plays = 1.0 / (1.0 - stay);
    let mut out = Vec::new();
    for (t, &p) in c.a[s].iter().enumerate() {
        if t == s || p == 0.0 {
            continue;
        }
        let mut k = key.to_vec();
        k[i] = t as u16;
        let term = c.is_terminal(t);
        if term {
            k[n] += 1;
        }
        out.push((p * plays, k, if term { Some(t) } else { None }));
    }
    (plays, out)
}

/// Kahn order of a graph given successor lists; None if cyclic.
fn topo_order(succ: &[Vec<usize>]) -> Option<Vec<usize>> {
    let n = succ.len();
    let mut indeg = vec![0usize; n];
    for row in succ {
        for &v in row {
            indeg[v] += 1;
        }
    }
    let mut q: VecDeque<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(u) = q.pop_front() {
        order.push(u);
        for &v in &succ[u] {
            indeg[v] -= 1;
            if indeg[v] == 0 {
                q.push_back(v);
            }
        }
    }
    if order.len() == n { Some(order) } else { None }
}

fn check_chain_sizes(inst: &JmsInstance) -> Result<()> {
    if inst.chains.iter().any(|c| c.states > u16::MAX as usize) || inst.capacity > u16::MAX as usize {
        return invalid("chains above 65535 states are not supported by the exact evaluators");
    }
    Ok(())
}

/// Exact expected visit vector of the index policy.
pub fn visit_vector(instance: &JmsInstance, table: &IndexTable, tie: &JmsTie, method: VisitMethod) -> Result<VisitVector> {
    let hp = h_p(instance)?;
    match method {
        VisitMethod::Exact { cap } => {
            let p = exact_visits(instance, table, tie, cap)?;
            Ok(VisitVector { p, h_p: hp, stderr: None })
        }
        VisitMethod::Mc { trials, seed } => {
            let (p, se) = mc_visits(instance, table, tie, trials, seed)?;
            Ok(VisitVector { p, h_p: hp, stderr: Some(se) })
        }
    }
}

fn exact_visits(inst: &JmsInstance, table: &IndexTable, tie: &JmsTie, cap: usize) -> Result<Vec<f64>> {
    check_chain_sizes(inst)?;
    let n = inst.chains.len();
    let off = inst.offsets();
    let rank = tie.rank(n);
    let mut p = vec![0.0; inst.dim()];
    let mut start_states = Vec::with_capacity(n);
    let mut n_sel = 0;
    for (i, c) in inst.chains.iter().enumerate() {
        start_states.push(c.start);
        if c.is_terminal(c.start) {
            p[off[i] + c.start] += 1.0;
            n_sel += 1;
        }
    }
    let start = encode(&start_states, n_sel);
    // Enumerate reachable joint states and the policy's move in each.
    let mut ids: HashMap<JointKey, usize> = HashMap::new();
    let mut keys: Vec<JointKey> = Vec::new();
    let mut moves: Vec<Option<(usize, f64, Vec<(f64, usize, Option<usize>)>)>> = Vec::new();
    ids.insert(start.clone(), 0);
    keys.push(start);
    let mut head = 0;
    while head < keys.len() {
        let key = keys[head].clone();
        let sel = key[n] as usize;
        let states: Vec<usize> = key[..n].iter().map(|&s| s as usize).collect();
        let mv = if sel >= inst.capacity {
            None
        } else {
            choose_chain(table, &states, &rank, inst).map(|i| {
                let (plays, succ) = play_successors(inst, &key, i);
                let succ = succ
                    .into_iter()
                    .map(|(q, k, t)| {
                        let id = match ids.get(&k) {
                            Some(&id) => id,
                            None => {
                                let id = keys.len();
                                ids.insert(k.clone(), id);
                                keys.push(k);
                                id
                            }
                        };
                        (q, id, t)
                    })
                    .collect();
                (i, plays, succ)
            })
        };
        moves.push(mv);
        if keys.len() > cap {
            return Err(Error::CapExceeded { what: "joint state space", size: keys.len() as f64, cap: cap as f64 });
        }
        head += 1;
    }
    let m = keys.len();
    let succ: Vec<Vec<usize>> = moves
        .iter()
        .map(|mv| mv.as_ref().map_or(Vec::new(), |(_, _, s)| s.iter().map(|x| x.1).collect()))
        .collect();
    let mut mass = vec![0.0; m];
    mass[0] = 1.0;
    match topo_order(&succ) {
        Some(order) => {
            for &u in &order {
                if let Some((_, _, s)) = &moves[u] {
                    let mu = mass[u];
                    for &(q, v, _) in s {
                        mass[v] += mu * q;
                    }
                }
            }
        }
        None => {
            // Cycles across states: expected arrivals solve η = e + Pᵀη.
            let mut it = 0;
            loop {
                let mut next = vec![0.0; m];
                next[0] = 1.0;
                for u in 0..m {
                    if let Some((_, _, s)) = &moves[u] {
                        for &(q, v, _) in s {
                            next[v] += mass[u] * q;
                        }
                    }
                }
                let diff = next.iter().zip(&mass).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                mass = next;
                it += 1;
                if diff < 1e-15 {
                    break;
                }
                if it > 1_000_000 {
                    return Err(Error::NonConvergence("visit vector iteration".into()));
                }
            }
        }
    }
    for u in 0..m {
        if let Some((i, plays, s)) = &moves[u] {
            let st = keys[u][*i] as usize;
            p[off[*i] + st] += mass[u] * plays;
            for &(q, _, t) in s {
                if let Some(t) = t {
                    p[off[*i] + t] += mass[u] * q;
                }
            }
        }
    }
    Ok(p)
}

fn mc_visits(inst: &JmsInstance, table: &IndexTable, tie: &JmsTie, trials: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if trials == 0 {
        return invalid("trials must be at least 1");
    }
    let d = inst.dim();
    let chunks: Vec<(usize, usize)> = (0..trials).step_by(256).map(|s| (s, (s + 256).min(trials))).collect();
    let parts: Vec<(Vec<f64>, Vec<f64>)> = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let mut s1 = vec![0.0; d];
            let mut s2 = vec![0.0; d];
            for t in lo..hi {
                let mut stream = SeededStream::new(seed, t as u64);
                let tr = run_index_policy(inst, table, &mut stream, tie);
                for k in 0..d {
                    s1[k] += tr.visits[k];
                    s2[k] += tr.visits[k] * tr.visits[k];
                }
            }
            (s1, s2)
        })
        .collect();
    let mut s1 = vec![0.0; d];
    let mut s2 = vec![0.0; d];
    for (a, b) in parts {
        for k in 0..d {
            s1[k] += a[k];
            s2[k] += b[k];
        }
    }
    let t = trials as f64;
    let mean: Vec<f64> = s1.iter().map(|x| x / t).collect();
    let se = (0..d)
        .map(|k| {
            if trials < 2 {
                return 0.0;
            }
            let var = ((s2[k] / t - mean[k] * mean[k]) * t / (t - 1.0)).max(0.0);
            (var / t).sqrt()
        })
        .collect();
    Ok((mean, se))
}

/// Optimal expected reward over all adaptive policies.
pub fn jms_brute_force_value(instance: &JmsInstance) -> Result<f64> {
    let starts: Vec<Vec<(usize, f64)>> = instance.chains.iter().map(|c| vec![(c.start, 1.0)]).collect();
    brute_force_from(instance, &starts, tol::STATE_CAP)
}

/// Brute-force value of the collapsed instance (start distributions and
/// prefix rewards included).
pub fn jms_brute_force_collapsed(instance: &JmsInstance) -> Result<f64> {
    jms_brute_force_collapsed_by(instance, CollapseOrder::LowestFirst)
}

pub fn jms_brute_force_collapsed_by(instance: &JmsInstance, order: CollapseOrder) -> Result<f64> {
    let cols = instance
        .chains
        .iter()
        .map(|c| collapse_by(c, order))
        .collect::<Result<Vec<_>>>()?;
    let prefix: f64 = cols.iter().map(|c| c.prefix_reward).sum();
    let chains = cols.iter().map(|c| c.chain.clone()).collect();
    let inst = JmsInstance { chains, capacity: instance.capacity };
    let starts = cols
        .iter()
        .map(|c| c.start_dist.iter().enumerate().filter(|(_, p)| **p > 0.0).map(|(s, p)| (s, *p)).collect())
        .collect::<Vec<Vec<_>>>();
    Ok(prefix + brute_force_from(&inst, &starts, tol::STATE_CAP)?)
}

fn brute_force_from(inst: &JmsInstance, starts: &[Vec<(usize, f64)>], cap: usize) -> Result<f64> {
    check_chain_sizes(inst)?;
    let n = inst.chains.len();
    // Enumerate start combinations and the joint states reachable under any action.
    let mut combos: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 1.0)];
    for s in starts {
        let mut next = Vec::new();
        for (v, p) in &combos {
            for &(st, q) in s {
                let mut v2 = v.clone();
                v2.push(st);
                next.push((v2, p * q));
            }
        }
        combos = next;
    }
    let mut ids: HashMap<JointKey, usize> = HashMap::new();
    let mut keys: Vec<JointKey> = Vec::new();
    let mut roots = Vec::new();
    let mut root_reward = Vec::new();
    for (v, p) in &combos {
        let mut sel = 0;
        let mut rew = 0.0;
        for (i, &s) in v.iter().enumerate() {
            if inst.chains[i].is_terminal(s) {
                sel += 1;
                rew += inst.chains[i].r[s];
            }
        }
        let k = encode(v, sel.min(inst.capacity));
        let id = *ids.entry(k.clone()).or_insert_with(|| {
            keys.push(k);
            keys.len() - 1
        });
        roots.push((id, *p));
        root_reward.push(rew);
    }
    type Act = (usize, f64, Vec<(f64, usize, f64)>);
    let mut acts: Vec<Vec<Act>> = Vec::new();
    let mut head = 0;
    while head < keys.len() {
        let key = keys[head].clone();
        let mut list = Vec::new();
        if (key[n] as usize) < inst.capacity {
            for i in 0..n {
                let c = &inst.chains[i];
                let s = key[i] as usize;
                if c.is_terminal(s) {
                    continue;
                }
                let (plays, succ) = play_successors(inst, &key, i);
                let succ = succ
                    .into_iter()
                    .map(|(q, k, t)| {
                        let id = match ids.get(&k) {
                            Some(&id) => id,
                            None => {
                                let id = keys.len();
                                ids.insert(k.clone(), id);
                                keys.push(k);
                                id
                            }
                        };
                        (q, id, t.map_or(0.0, |t| c.r[t]))
                    })
                    .collect();
                list.push((i, plays * c.r[s], succ));
            }
        }
        acts.push(list);
        if keys.len() > cap {
            return Err(Error::CapExceeded { what: "joint state space", size: keys.len() as f64, cap: cap as f64 });
        }
        head += 1;
    }
    let m = keys.len();
    let succ: Vec<Vec<usize>> = acts
        .iter()
        .map(|l| l.iter().flat_map(|(_, _, s)| s.iter().map(|x| x.1)).collect())
        .collect();
    let mut v = vec![0.0; m];
    let bellman = |u: usize, v: &[f64]| -> f64 {
        let mut best = 0.0f64;
        for (_, r0, s) in &acts[u] {
            let q = r0 + s.iter().map(|(p, w, tr)| p * (tr + v[*w])).sum::<f64>();
            best = best.max(q);
        }
        best
    };
    match topo_order(&succ) {
        Some(order) => {
            for &u in order.iter().rev() {
                v[u] = bellman(u, &v);
            }
        }
        None => {
            let mut it = 0;
            loop {
                let mut diff = 0.0f64;
                for u in (0..m).rev() {
                    let x = bellman(u, &v);
                    diff = diff.max((x - v[u]).abs());
                    v[u] = x;
                }
                it += 1;
                if diff < 1e-13 {
                    break;
                }
                if it > 1_000_000 {
                    return Err(Error::NonConvergence("brute-force value iteration".into()));
                }
            }
        }
    }
    Ok(roots.iter().zip(&root_reward).map(|((id, p), r)| p * (r + v[*id])).sum())
}

/// Encode a Pandora instance: per box a root (reward −c), one value state per
/// atom (reward 0) and one terminal per atom (reward v).
pub fn encode_pandora(instance: &PandoraInstance) -> JmsInstance {
    let chains = instance
        .boxes
        .iter()
        .map(|b| {
            let m = b.dist.len();
            let n = 1 + 2 * m;
            let mut a = vec![vec![0.0; n]; n];
            let mut r = vec![0.0; n];
            r[0] = -b.cost;
            for j in 0..m {
                a[0][1 + j] = b.dist.probs()[j];
                a[1 + j][1 + m + j] = 1.0;
                a[1 + m + j][1 + m + j] = 1.0;
                r[1 + m + j] = b.dist.support()[j];
            }
            let terminal = (1 + m..n).collect();
            MarkovChain { states: n, terminal, a, r, start: 0 }
        })
        .collect();
    JmsInstance { chains, capacity: instance.capacity }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pandora::{reservation_index, PandoraBox, ValueDistribution};

    fn example_fs() -> PandoraInstance {
        let data = [(10.0, 4.0), (9.0, 3.0), (8.0, 2.0), (7.0, 1.0)];
        let boxes = data
            .iter()
            .enumerate()
            .map(|(i, &(h, l))| PandoraBox::new(i as u32 + 1, ValueDistribution::new(vec![l, h], vec![0.5, 0.5]).unwrap(), 1.0))
            .collect();
        PandoraInstance::new(boxes, 1).unwrap()
    }

    fn line(r: Vec<f64>) -> MarkovChain {
        // 0 -> 1 -> ... -> n-1 (terminal)
        let n = r.len();
        let mut a = vec![vec![0.0; n]; n];
        for s in 0..n - 1 {
            a[s][s + 1] = 1.0;
        }
        a[n - 1][n - 1] = 1.0;
        MarkovChain::new(a, r, vec![n - 1], 0).unwrap()
    }

    #[test]
    fn nfl_examples() {
        assert!(is_nfl(&line(vec![-1.0, 0.0, 3.0])));
        assert!(!is_nfl(&line(vec![-1.0, 0.5, 0.0, 3.0])));
        for c in encode_pandora(&example_fs()).chains {
            assert!(is_nfl(&c));
        }
    }

    #[test]
    fn collapse_simple_parent() {
        // p -> s (0.5) | c (0.5); s -> c.
        let a = vec![
            vec![0.0, 0.5, 0.5, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ];
        let c = MarkovChain::new(a, vec![-1.0, 2.0, 0.0, 1.0], vec![3], 0).unwrap();
        let col = collapse(&c).unwrap();
        assert_eq!(col.eliminated, vec![1]);
        assert_eq!(col.chain.r[0], 0.0);
        assert_eq!(col.chain.a[0][1], 1.0);
        assert!(is_nfl(&col.chain));
    }

    #[test]
    fn collapse_self_loop() {
        let a = vec![
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.5, 0.5, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ];
        let c = MarkovChain::new(a, vec![0.0, 1.0, 0.0, 1.0], vec![3], 0).unwrap();
        let col = collapse(&c).unwrap();
        // State 0 gains 1·R(1)/(1−0.5) = 2 and then becomes a free-lunch start.
        assert_eq!(col.eliminated, vec![1, 0]);
        assert_eq!(col.prefix_reward, 2.0);
    }

    #[test]
    fn nfl_chain_is_unchanged() {
        let c = line(vec![-1.0, 0.0, 3.0]);
        let col = collapse(&c).unwrap();
        assert_eq!(col.chain, c);
        assert!(col.eliminated.is_empty());
        assert_eq!(col.prefix_reward, 0.0);
    }

    #[test]
    fn gittins_matches_reservation() {
        let inst = example_fs();
        let j = encode_pandora(&inst);
        let want = [8.0, 7.0, 6.0, 5.0];
        for (c, w) in j.chains.iter().zip(want) {
            assert!((gittins_index(c, 0).unwrap() - w).abs() < 1e-12);
        }
        let point = PandoraInstance::new(vec![PandoraBox::new(1, ValueDistribution::point(6.0), 2.0)], 1).unwrap();
        let jc = &encode_pandora(&point).chains[0];
        assert!((gittins_index(jc, 0).unwrap() - 4.0).abs() < 1e-12);
        assert!((gittins_index(jc, 1).unwrap() - 6.0).abs() < 1e-12);
        let d = &inst.boxes[0].dist;
        assert_eq!(reservation_index(d, 1.0), 8.0);
    }

    #[test]
    fn table_marks_collapsed_states() {
        let a = vec![
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.5, 0.5],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ];
        // State 1 is not FL (reaches terminals). Make state 0 FL.
        let c = MarkovChain::new(a, vec![0.5, -1.0, 0.0, 4.0], vec![2, 3], 0).unwrap();
        let t = index_table(&JmsInstance::new(vec![c], 1).unwrap()).unwrap();
        assert_eq!(t.sigma[0][0], Some(f64::INFINITY));
        assert_eq!(t.sigma[0][2], None);
    }

    #[test]
    fn index_policy_examples() {
        let inst = example_fs();
        let j = encode_pandora(&inst);
        let t = index_table(&j).unwrap();
        let v = visit_vector(&j, &t, &JmsTie::Lexicographic, VisitMethod::default()).unwrap();
        assert_eq!(v.p[0], 1.0);
        let value = v.dot(&j.rewards());
        assert!((value - 7.0625).abs() < 1e-12);
        assert!((jms_brute_force_value(&j).unwrap() - 7.0625).abs() < 1e-12);
        // Scripted: box 1 opens high.
        let one = JmsInstance::new(vec![j.chains[0].clone()], 1).unwrap();
        let t1 = index_table(&one).unwrap();
        let mut s = ScriptedStream { script: vec![VecDeque::from(vec![2, 4])] };
        let tr = run_index_policy(&one, &t1, &mut s, &JmsTie::Lexicographic);
        assert_eq!(tr.reward, 9.0);
        assert_eq!(tr.selected, vec![0]);
    }

    #[test]
    fn nothing_to_gain_means_no_play() {
        let c = line(vec![-5.0, 1.0]);
        let j = JmsInstance::new(vec![c], 1).unwrap();
        let t = index_table(&j).unwrap();
        let mut s = SeededStream::new(1, 0);
        let tr = run_index_policy(&j, &t, &mut s, &JmsTie::Lexicographic);
        assert_eq!(tr.reward, 0.0);
        assert_eq!(jms_brute_force_value(&j).unwrap(), 0.0);
    }

    #[test]
    fn deterministic_chain_visits() {
        let c = line(vec![0.0, 1.0]);
        let j = JmsInstance::new(vec![c], 1).unwrap();
        let t = index_table(&j).unwrap();
        let v = visit_vector(&j, &t, &JmsTie::Lexicographic, VisitMethod::default()).unwrap();
        assert_eq!(v.p, vec![1.0, 1.0]);
    }

    #[test]
    fn chain_json_round_trip() {
        let c = line(vec![-1.0, 0.0, 3.0]);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"A\"") && s.contains("\"R\""));
        let back: MarkovChain = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
