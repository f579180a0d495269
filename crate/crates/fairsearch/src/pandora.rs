//! Pandora's box with multiple selections: instances, reservation indices,
//! the refined index policy with pluggable tie-breaking, and evaluation.
//!
//! The policy engine works on per-atom value tables so the same code runs an
//! unadjusted instance and a dual-adjusted one. Utility is always booked on
//! the original values and costs.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tol;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DistRepr")]
pub struct ValueDistribution {
    support: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Deserialize)]
struct DistRepr {
    support: Vec<f64>,
    probs: Vec<f64>,
}

impl TryFrom<DistRepr> for ValueDistribution {
    type Error = Error;
    fn try_from(r: DistRepr) -> Result<Self> {
        ValueDistribution::new(r.support, r.probs)
    }
}

impl ValueDistribution {
    pub fn new(support: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return invalid("empty support");
        }
        if support.len() != probs.len() {
            return invalid(format!(
                "support has {} values but probs has {}",
                support.len(),
                probs.len()
            ));
        }
        if support.iter().any(|v| !v.is_finite()) {
            return invalid("support values must be finite");
        }
        if support.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("support must be strictly increasing");
        }
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return invalid("probabilities must be nonnegative");
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > tol::PROB_SUM {
            return invalid(format!("probabilities sum to {s}, not 1"));
        }
        Ok(Self { support, probs })
    }

    /// A point mass.
    pub fn point(v: f64) -> Self {
        Self { support: vec![v], probs: vec![1.0] }
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.probs).map(|(v, p)| v * p).sum()
    }

    /// Position of `v` in the support, if present.
    pub fn index_of(&self, v: f64) -> Option<usize> {
        self.support.iter().position(|&s| s == v)
    }
}

/// One box: a value distribution, an inspection cost and an optional group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PandoraBox {
    pub id: u32,
    #[serde(flatten)]
    pub dist: ValueDistribution,
    pub cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl PandoraBox {
    pub fn new(id: u32, dist: ValueDistribution, cost: f64) -> Self {
        Self { id, dist, cost, group: None }
    }

    pub fn with_group(mut self, g: impl Into<String>) -> Self {
        self.group = Some(g.into());
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstanceRepr")]
pub struct PandoraInstance {
    pub boxes: Vec<PandoraBox>,
    pub capacity: usize,
}

#[derive(Deserialize)]
struct InstanceRepr {
    boxes: Vec<PandoraBox>,
    capacity: usize,
}

impl TryFrom<InstanceRepr> for PandoraInstance {
    type Error = Error;
    fn try_from(r: InstanceRepr) -> Result<Self> {
        PandoraInstance::new(r.boxes, r.capacity)
    }
}

impl PandoraInstance {
    pub fn new(boxes: Vec<PandoraBox>, capacity: usize) -> Result<Self> {
        let n = boxes.len();
        if capacity < 1 || capacity > n {
            return invalid(format!("capacity {capacity} outside 1..={n}"));
        }
        let mut ids: Vec<u32> = boxes.iter().map(|b| b.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return invalid("box ids must be unique");
        }
        if boxes.iter().any(|b| !b.cost.is_finite()) {
            return invalid("costs must be finite");
        }
        Ok(Self { boxes, capacity })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn position(&self, id: u32) -> Option<usize> {
        self.boxes.iter().position(|b| b.id == id)
    }

    /// Number of joint realizations.
    pub fn realization_count(&self) -> f64 {
        self.boxes.iter().map(|b| b.dist.len() as f64).product()
    }

    pub fn values(&self) -> Vec<Vec<f64>> {
        self.boxes.iter().map(|b| b.dist.support.clone()).collect()
    }

    pub fn probs(&self) -> Vec<Vec<f64>> {
        self.boxes.iter().map(|b| b.dist.probs.clone()).collect()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.boxes.iter().map(|b| b.cost).collect()
    }

    /// Positions of boxes whose group label equals `g`.
    pub fn group_members(&self, g: &str) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.boxes[i].group.as_deref() == Some(g))
            .collect()
    }
}

/// A sample path: the support index drawn for each box, by box position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Realization {
    pub atoms: Vec<usize>,
}

impl Realization {
    pub fn new(instance: &PandoraInstance, atoms: Vec<usize>) -> Result<Self> {
        if atoms.len() != instance.len() {
            return invalid("realization must cover every box");
        }
        for (b, &a) in instance.boxes.iter().zip(&atoms) {
            if a >= b.dist.len() {
                return invalid(format!("atom {a} out of range for box {}", b.id));
            }
        }
        Ok(Self { atoms })
    }

    /// Build from drawn values keyed by box id.
    pub fn from_values(instance: &PandoraInstance, values: &BTreeMap<u32, f64>) -> Result<Self> {
        let mut atoms = Vec::with_capacity(instance.len());
        for b in &instance.boxes {
            let v = match values.get(&b.id) {
                Some(v) => *v,
                None => return invalid(format!("no value for box {}", b.id)),
            };
            match b.dist.index_of(v) {
                Some(a) => atoms.push(a),
                None => return invalid(format!("value {v} not in support of box {}", b.id)),
            }
        }
        Ok(Self { atoms })
    }

    pub fn value(&self, instance: &PandoraInstance, pos: usize) -> f64 {
        instance.boxes[pos].dist.support[self.atoms[pos]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    /// Box ids in inspection order.
    pub inspected: Vec<u32>,
    /// Box ids in selection order.
    pub selected: Vec<u32>,
    pub net_utility: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TieBreakRule {
    Lexicographic,
    NegativeExtreme,
    PositiveExtreme,
    ExplicitScores {
        boxes: BTreeMap<u32, f64>,
        #[serde(default)]
        outside: f64,
    },
    Perturbation { omega: Vec<f64> },
    LexPerturbation { omegas: Vec<Vec<f64>> },
}

impl TieBreakRule {
    pub fn name(&self) -> &'static str {
        match self {
            TieBreakRule::Lexicographic => "lexicographic",
            TieBreakRule::NegativeExtreme => "negative_extreme",
            TieBreakRule::PositiveExtreme => "positive_extreme",
            TieBreakRule::ExplicitScores { .. } => "explicit_scores",
            TieBreakRule::Perturbation { .. } => "perturbation",
            TieBreakRule::LexPerturbation { .. } => "lex_perturbation",
        }
    }

    /// Static priority order: earlier ids get higher scores.
    pub fn from_order(order: &[u32]) -> Self {
        let n = order.len() as f64;
        let boxes = order
            .iter()
            .enumerate()
            .map(|(r, &id)| (id, n - r as f64))
            .collect();
        TieBreakRule::ExplicitScores { boxes, outside: 0.0 }
    }
}

/// Reservation index of a box.
pub fn reservation_index(dist: &ValueDistribution, cost: f64) -> f64 {
    reservation_index_raw(&dist.support, &dist.probs, cost)
}

/// Reservation index for atoms given in any order (adjusted values need not
/// be sorted). Zero-mass atoms are ignored.
pub fn reservation_index_raw(values: &[f64], probs: &[f64], cost: f64) -> f64 {
    if cost < 0.0 {
        return f64::INFINITY;
    }
    let mut idx: Vec<usize> = (0..values.len()).filter(|&j| probs[j] > 0.0).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    if cost == 0.0 {
        return values[idx[0]];
    }
    // On [v_(m+1), v_(m)] the excess E[(v - s)^+] is S_m - s P_m.
    let mut s = 0.0;
    let mut p = 0.0;
    for (pos, &j) in idx.iter().enumerate() {
        s += probs[j] * values[j];
        p += probs[j];
        let sigma = (s - cost) / p;
        match idx.get(pos + 1) {
            Some(&q) if sigma < values[q] => continue,
            _ => return sigma,
        }
    }
    unreachable!("loop returns on the last atom")
}

/// E[(v - sigma)^+].
pub fn expected_excess(values: &[f64], probs: &[f64], sigma: f64) -> f64 {
    values
        .iter()
        .zip(probs)
        .map(|(v, p)| p * (v - sigma).max(0.0))
        .sum()
}

/// Coefficients of one affine functional in per-atom form: `theta_s[i][j]`
/// multiplies selecting box i at atom j, `theta_i[i]` is the expected
/// coefficient on inspecting box i.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefTable {
    pub theta_s: Vec<Vec<f64>>,
    pub theta_i: Vec<f64>,
}

impl CoefTable {
    pub fn zeros(instance: &PandoraInstance) -> Self {
        Self {
            theta_s: instance.boxes.iter().map(|b| vec![0.0; b.dist.len()]).collect(),
            theta_i: vec![0.0; instance.len()],
        }
    }

    /// Σ w_j · table_j.
    pub fn combine(tables: &[CoefTable], w: &[f64]) -> CoefTable {
        let mut out = CoefTable {
            theta_s: tables[0].theta_s.iter().map(|r| vec![0.0; r.len()]).collect(),
            theta_i: vec![0.0; tables[0].theta_i.len()],
        };
        for (t, &wj) in tables.iter().zip(w) {
            for (o, r) in out.theta_s.iter_mut().zip(&t.theta_s) {
                for (x, y) in o.iter_mut().zip(r) {
                    *x += wj * y;
                }
            }
            for (x, y) in out.theta_i.iter_mut().zip(&t.theta_i) {
                *x += wj * y;
            }
        }
        out
    }

    /// E[θ^S·A + θ^I·I] under an exact outcome.
    pub fn apply(&self, out: &ExpectedOutcome) -> f64 {
        let mut s = 0.0;
        for i in 0..self.theta_i.len() {
            s += self.theta_i[i] * out.inspect[i];
            for j in 0..self.theta_s[i].len() {
                s += self.theta_s[i][j] * out.select_atom[i][j];
            }
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Negative,
    Positive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Candidate {
    Box(usize),
    Outside,
}

/// What Alg. 1 sees when it has to break a tie.
#[derive(Clone, Copy, Debug)]
pub struct TieContext<'a> {
    pub adj_values: &'a [Vec<f64>],
    pub probs: &'a [Vec<f64>],
    pub adj_costs: &'a [f64],
    pub opened: &'a [Option<usize>],
    pub o_max: f64,
    pub tol: f64,
}

impl TieContext<'_> {
    /// Positive-mass atoms of box i strictly above and tied with o_max.
    fn split(&self, i: usize) -> (Vec<usize>, Vec<usize>) {
        let mut above = Vec::new();
        let mut tied = Vec::new();
        for (j, (&v, &p)) in self.adj_values[i].iter().zip(&self.probs[i]).enumerate() {
            if p <= 0.0 {
                continue;
            }
            if v > self.o_max + self.tol {
                above.push(j);
            } else if v >= self.o_max - self.tol {
                tied.push(j);
            }
        }
        (above, tied)
    }

    fn mass(&self, i: usize, atoms: &[usize]) -> f64 {
        atoms.iter().map(|&j| self.probs[i][j]).sum()
    }
}

/// Extreme tie-break scores for a constraint with scalar per-box coefficients.
pub fn extreme_scores(
    ctx: &TieContext,
    candidates: &[Candidate],
    theta_s: &[f64],
    theta_i: &[f64],
    sign: Sign,
) -> Vec<f64> {
    candidates
        .iter()
        .map(|c| match *c {
            Candidate::Outside => 0.0,
            Candidate::Box(i) => {
                if ctx.opened[i].is_some() {
                    return match sign {
                        Sign::Negative => theta_s[i],
                        Sign::Positive => -theta_s[i],
                    };
                }
                if ctx.adj_costs[i] < 0.0 {
                    return f64::INFINITY;
                }
                let (above, tied) = ctx.split(i);
                let p_gt = ctx.mass(i, &above);
                let p_ge = p_gt + ctx.mass(i, &tied);
                let (ts, ti) = (theta_s[i], theta_i[i]);
                match sign {
                    Sign::Negative if ti >= 0.0 => {
                        if p_gt == 0.0 {
                            f64::INFINITY
                        } else {
                            ts + ti / p_gt
                        }
                    }
                    Sign::Negative => {
                        if p_ge == 0.0 {
                            f64::NEG_INFINITY
                        } else {
                            ts + ti / p_ge
                        }
                    }
                    Sign::Positive if ti <= 0.0 => {
                        if p_gt == 0.0 {
                            f64::INFINITY
                        } else {
                            -ts - ti / p_gt
                        }
                    }
                    Sign::Positive => {
                        if p_ge == 0.0 {
                            f64::NEG_INFINITY
                        } else {
                            -ts - ti / p_ge
                        }
                    }
                }
            }
        })
        .collect()
}

/// Refined extreme scores for value-specific coefficients.
pub fn refined_extreme_scores(
    ctx: &TieContext,
    candidates: &[Candidate],
    coef: &CoefTable,
    sign: Sign,
) -> Vec<f64> {
    candidates
        .iter()
        .map(|c| match *c {
            Candidate::Outside => 0.0,
            Candidate::Box(i) => {
                if let Some(j) = ctx.opened[i] {
                    return match sign {
                        Sign::Negative => coef.theta_s[i][j],
                        Sign::Positive => -coef.theta_s[i][j],
                    };
                }
                if ctx.adj_costs[i] < 0.0 {
                    return f64::INFINITY;
                }
                let ts = &coef.theta_s[i];
                let ti = coef.theta_i[i];
                let (above, mut tied) = ctx.split(i);
                match sign {
                    Sign::Negative => tied.sort_by(|&a, &b| ts[b].total_cmp(&ts[a])),
                    Sign::Positive => tied.sort_by(|&a, &b| ts[a].total_cmp(&ts[b])),
                }
                let mut p = ctx.mass(i, &above);
                let mut s: f64 = above.iter().map(|&j| ctx.probs[i][j] * ts[j]).sum();
                let p_all = p + ctx.mass(i, &tied);
                match sign {
                    Sign::Negative => {
                        if p == 0.0 && ti >= 0.0 {
                            return f64::INFINITY;
                        }
                        if p_all == 0.0 && ti < 0.0 {
                            return f64::NEG_INFINITY;
                        }
                    }
                    Sign::Positive => {
                        if p == 0.0 && ti <= 0.0 {
                            return f64::INFINITY;
                        }
                        if p_all == 0.0 && ti > 0.0 {
                            return f64::NEG_INFINITY;
                        }
                    }
                }
                let eval = |s: f64, p: f64| match sign {
                    Sign::Negative => s / p + ti / p,
                    Sign::Positive => -s / p - ti / p,
                };
                let mut best = f64::NEG_INFINITY;
                if p > 0.0 {
                    best = eval(s, p);
                }
                for &j in &tied {
                    p += ctx.probs[i][j];
                    s += ctx.probs[i][j] * ts[j];
                    if p > 0.0 {
                        best = best.max(eval(s, p));
                    }
                }
                best
            }
        })
        .collect()
}

/// Lexicographic score: ±∞ or a finite vector.
#[derive(Clone, Debug, PartialEq)]
pub enum LexScore {
    NegInf,
    Finite(Vec<f64>),
    PosInf,
}

fn lex_cmp(a: &[f64], b: &[f64], tol: f64) -> std::cmp::Ordering {
    use std::cmp::Ordering::*;
    for (x, y) in a.iter().zip(b) {
        let scale = 1.0f64.max(x.abs()).max(y.abs());
        if (x - y).abs() > tol * scale {
            return if x > y { Greater } else { Less };
        }
    }
    Equal
}

fn lex_score_cmp(a: &LexScore, b: &LexScore, tol: f64) -> std::cmp::Ordering {
    use std::cmp::Ordering::*;
    use LexScore::*;
    match (a, b) {
        (NegInf, NegInf) | (PosInf, PosInf) => Equal,
        (NegInf, _) | (_, PosInf) => Less,
        (_, NegInf) | (PosInf, _) => Greater,
        (Finite(x), Finite(y)) => lex_cmp(x, y, tol),
    }
}

/// Scores that reproduce the choices of the index policy at λ + ε·ω for
/// infinitesimal ε (one direction per level, compared lexicographically).
/// Each entry is the first-order rate at which the candidate's option value
/// moves away from the tied maximum.
pub fn slope_scores(ctx: &TieContext, candidates: &[Candidate], dirs: &[CoefTable]) -> Vec<LexScore> {
    let m = dirs.len();
    candidates
        .iter()
        .map(|c| match *c {
            Candidate::Outside => LexScore::Finite(vec![0.0; m]),
            Candidate::Box(i) => {
                if let Some(j) = ctx.opened[i] {
                    return LexScore::Finite(dirs.iter().map(|d| -d.theta_s[i][j]).collect());
                }
                if ctx.adj_costs[i] < 0.0 {
                    return LexScore::PosInf;
                }
                let (above, mut tied) = ctx.split(i);
                let a_of = |j: usize| -> Vec<f64> { dirs.iter().map(|d| d.theta_s[i][j]).collect() };
                // Tied atoms in decreasing order of -a.
                tied.sort_by(|&x, &y| lex_cmp(&a_of(x), &a_of(y), 0.0));
                let b: Vec<f64> = dirs.iter().map(|d| d.theta_i[i]).collect();
                let p0 = ctx.mass(i, &above);
                let zero_cost = ctx.adj_costs[i] == 0.0 || p0 == 0.0;
                let mut p = p0;
                let mut s: Vec<f64> = vec![0.0; m];
                for &j in &above {
                    let pj = ctx.probs[i][j];
                    for (k, d) in dirs.iter().enumerate() {
                        s[k] += pj * d.theta_s[i][j];
                    }
                }
                let value = |s: &[f64], p: f64| -> Vec<f64> {
                    s.iter().zip(&b).map(|(sk, bk)| (-sk - bk) / p).collect()
                };
                if zero_cost {
                    let b_sign = lex_cmp(&b, &vec![0.0; m], ctx.tol);
                    if b_sign != std::cmp::Ordering::Greater {
                        return LexScore::PosInf;
                    }
                }
                let mut best: Option<Vec<f64>> = None;
                let consider = |best: &mut Option<Vec<f64>>, v: Vec<f64>| {
                    if best.as_ref().map_or(true, |bv| lex_cmp(&v, bv, 0.0).is_gt()) {
                        *best = Some(v);
                    }
                };
                if !zero_cost && p > 0.0 {
                    consider(&mut best, value(&s, p));
                }
                for &j in &tied {
                    let pj = ctx.probs[i][j];
                    p += pj;
                    for (k, d) in dirs.iter().enumerate() {
                        s[k] += pj * d.theta_s[i][j];
                    }
                    if p > 0.0 {
                        consider(&mut best, value(&s, p));
                    }
                }
                match best {
                    Some(v) => LexScore::Finite(v),
                    None => LexScore::NegInf,
                }
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
enum Scorer {
    Lexicographic,
    Explicit { boxes: Vec<f64>, outside: f64 },
    Extreme { sign: Sign, coef: CoefTable },
    Slope { dirs: Vec<CoefTable> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Inspect(usize),
    Select(usize),
    Stop,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SearchState {
    pub opened: Vec<Option<usize>>,
    pub selected: Vec<bool>,
    pub n_selected: usize,
}

impl SearchState {
    pub fn initial(n: usize) -> Self {
        Self { opened: vec![None; n], selected: vec![false; n], n_selected: 0 }
    }
}

/// A deterministic index policy (Alg. 1) on a possibly adjusted instance.
#[derive(Clone, Debug)]
pub struct IndexPolicy {
    k: usize,
    ids: Vec<u32>,
    /// Box positions by increasing id.
    id_order: Vec<usize>,
    values: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    costs: Vec<f64>,
    adj_values: Vec<Vec<f64>>,
    adj_costs: Vec<f64>,
    sigma: Vec<f64>,
    scorer: Scorer,
    rule: TieBreakRule,
    tol: f64,
}

impl IndexPolicy {
    /// Policy on the unadjusted instance.
    pub fn new(instance: &PandoraInstance, rule: &TieBreakRule) -> Result<Self> {
        Self::adjusted(instance, instance.values(), instance.costs(), rule, &[], tol::TIE)
    }

    /// Policy on adjusted values and costs. `coefs` supplies the constraint
    /// coefficients the extreme and perturbation rules need.
    pub fn adjusted(
        instance: &PandoraInstance,
        adj_values: Vec<Vec<f64>>,
        adj_costs: Vec<f64>,
        rule: &TieBreakRule,
        coefs: &[CoefTable],
        tie_tol: f64,
    ) -> Result<Self> {
        let n = instance.len();
        if adj_values.len() != n || adj_costs.len() != n {
            return invalid("adjusted tables must cover every box");
        }
        let ids: Vec<u32> = instance.boxes.iter().map(|b| b.id).collect();
        let scorer = match rule {
            TieBreakRule::Lexicographic => Scorer::Lexicographic,
            TieBreakRule::NegativeExtreme | TieBreakRule::PositiveExtreme => {
                if coefs.len() != 1 {
                    return invalid(format!(
                        "{} needs exactly one constraint, got {}",
                        rule.name(),
                        coefs.len()
                    ));
                }
                let sign = if *rule == TieBreakRule::NegativeExtreme {
                    Sign::Negative
                } else {
                    Sign::Positive
                };
                Scorer::Extreme { sign, coef: coefs[0].clone() }
            }
            TieBreakRule::ExplicitScores { boxes, outside } => {
                let mut s = Vec::with_capacity(n);
                for id in &ids {
                    match boxes.get(id) {
                        Some(v) => s.push(*v),
                        None => return invalid(format!("explicit scores miss box {id}")),
                    }
                }
                Scorer::Explicit { boxes: s, outside: *outside }
            }
            TieBreakRule::Perturbation { omega } => {
                if omega.len() != coefs.len() || coefs.is_empty() {
                    return invalid("perturbation needs one weight per constraint");
                }
                Scorer::Slope { dirs: vec![CoefTable::combine(coefs, omega)] }
            }
            TieBreakRule::LexPerturbation { omegas } => {
                if coefs.is_empty() || omegas.iter().any(|w| w.len() != coefs.len()) {
                    return invalid("lex perturbation needs one weight per constraint");
                }
                Scorer::Slope {
                    dirs: omegas.iter().map(|w| CoefTable::combine(coefs, w)).collect(),
                }
            }
        };
        let probs = instance.probs();
        let adj_costs: Vec<f64> = adj_costs
            .into_iter()
            .map(|c| if c.abs() <= tie_tol { 0.0 } else { c })
            .collect();
        let sigma = (0..n)
            .map(|i| reservation_index_raw(&adj_values[i], &probs[i], adj_costs[i]))
            .collect();
        let mut id_order: Vec<usize> = (0..n).collect();
        id_order.sort_by_key(|&i| ids[i]);
        Ok(Self {
            k: instance.capacity,
            ids,
            id_order,
            values: instance.values(),
            probs,
            costs: instance.costs(),
            adj_values,
            adj_costs,
            sigma,
            scorer,
            rule: rule.clone(),
            tol: tie_tol,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.k
    }

    pub fn rule(&self) -> &TieBreakRule {
        &self.rule
    }

    /// Adjusted reservation indices.
    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn adjusted_values(&self) -> &[Vec<f64>] {
        &self.adj_values
    }

    pub fn adjusted_costs(&self) -> &[f64] {
        &self.adj_costs
    }

    fn option_value(&self, st: &SearchState, i: usize) -> f64 {
        match st.opened[i] {
            Some(j) => self.adj_values[i][j],
            None => self.sigma[i],
        }
    }

    /// Current maximum option value (outside option included) and the
    /// candidate set of Alg. 1, boxes in id order then the outside option.
    pub fn candidates(&self, st: &SearchState) -> (f64, Vec<Candidate>) {
        let mut o_max = 0.0f64;
        for i in 0..self.len() {
            if !st.selected[i] {
                o_max = o_max.max(self.option_value(st, i));
            }
        }
        let mut cands = Vec::new();
        for &i in &self.id_order {
            if st.selected[i] {
                continue;
            }
            let o = self.option_value(st, i);
            let free = st.opened[i].is_none() && self.adj_costs[i] == 0.0;
            if o >= o_max - self.tol || free {
                cands.push(Candidate::Box(i));
            }
        }
        if o_max <= self.tol {
            cands.push(Candidate::Outside);
        }
        (o_max, cands)
    }

    pub fn tie_context<'a>(&'a self, st: &'a SearchState, o_max: f64) -> TieContext<'a> {
        TieContext {
            adj_values: &self.adj_values,
            probs: &self.probs,
            adj_costs: &self.adj_costs,
            opened: &st.opened,
            o_max,
            tol: self.tol,
        }
    }

    fn choose(&self, st: &SearchState) -> Candidate {
        let (o_max, cands) = self.candidates(st);
        if cands.len() == 1 {
            return cands[0];
        }
        let ctx = self.tie_context(st, o_max);
        let pick_scalar = |scores: &[f64]| -> Candidate {
            let mut best = 0;
            for c in 1..cands.len() {
                let (x, y) = (scores[c], scores[best]);
                let gap = if x.is_infinite() || y.is_infinite() {
                    if x > y { 1.0 } else { 0.0 }
                } else {
                    x - y - tol::SCORE * 1.0f64.max(x.abs()).max(y.abs())
                };
                if gap > 0.0 {
                    best = c;
                }
            }
            cands[best]
        };
        match &self.scorer {
            Scorer::Lexicographic => cands[0],
            Scorer::Explicit { boxes, outside } => {
                let s: Vec<f64> = cands
                    .iter()
                    .map(|c| match c {
                        Candidate::Box(i) => boxes[*i],
                        Candidate::Outside => *outside,
                    })
                    .collect();
                pick_scalar(&s)
            }
            Scorer::Extreme { sign, coef } => {
                pick_scalar(&refined_extreme_scores(&ctx, &cands, coef, *sign))
            }
            Scorer::Slope { dirs } => {
                let s = slope_scores(&ctx, &cands, dirs);
                let mut best = 0;
                for c in 1..cands.len() {
                    if lex_score_cmp(&s[c], &s[best], tol::SCORE).is_gt() {
                        best = c;
                    }
                }
                cands[best]
            }
        }
    }

    /// Next action of Alg. 1 in state `st`.
    pub fn step(&self, st: &SearchState) -> Action {
        if st.n_selected >= self.k {
            return Action::Stop;
        }
        match self.choose(st) {
            Candidate::Outside => Action::Stop,
            Candidate::Box(i) if st.opened[i].is_none() => Action::Inspect(i),
            Candidate::Box(i) => Action::Select(i),
        }
    }

    /// Run on one realization; returns box positions inspected and selected,
    /// in order.
    pub fn run_positions(&self, atoms: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut st = SearchState::initial(self.len());
        let mut insp = Vec::new();
        let mut sel = Vec::new();
        loop {
            match self.step(&st) {
                Action::Stop => break,
                Action::Inspect(i) => {
                    st.opened[i] = Some(atoms[i]);
                    insp.push(i);
                }
                Action::Select(i) => {
                    st.selected[i] = true;
                    st.n_selected += 1;
                    sel.push(i);
                }
            }
        }
        (insp, sel)
    }

    pub fn run(&self, real: &Realization) -> SearchOutcome {
        let (insp, sel) = self.run_positions(&real.atoms);
        let u: f64 = sel.iter().map(|&i| self.values[i][real.atoms[i]]).sum::<f64>()
            - insp.iter().map(|&i| self.costs[i]).sum::<f64>();
        SearchOutcome {
            inspected: insp.iter().map(|&i| self.ids[i]).collect(),
            selected: sel.iter().map(|&i| self.ids[i]).collect(),
            net_utility: u,
        }
    }

    /// Exact expectations by walking the decision tree, branching only on
    /// inspections. `cap` bounds the number of joint realizations.
    pub fn evaluate_exact(&self, cap: f64) -> Result<ExpectedOutcome> {
        let size: f64 = self.probs.iter().map(|p| p.len() as f64).product();
        if size > cap {
            return Err(Error::CapExceeded { what: "realization space", size, cap });
        }
        let mut out = ExpectedOutcome::zeros(&self.probs);
        let st = SearchState::initial(self.len());
        self.walk(st, 1.0, &mut out);
        out.utility = (0..self.len())
            .map(|i| {
                let s: f64 = (0..self.values[i].len())
                    .map(|j| out.select_atom[i][j] * self.values[i][j])
                    .sum();
                s - out.inspect[i] * self.costs[i]
            })
            .sum();
        out.select = out.select_atom.iter().map(|r| r.iter().sum()).collect();
        Ok(out)
    }

    fn walk(&self, mut st: SearchState, prob: f64, out: &mut ExpectedOutcome) {
        loop {
            match self.step(&st) {
                Action::Stop => return,
                Action::Select(i) => {
                    let j = st.opened[i].expect("selected box is open");
                    out.select_atom[i][j] += prob;
                    out.n_selected += prob;
                    st.selected[i] = true;
                    st.n_selected += 1;
                }
                Action::Inspect(i) => {
                    out.inspect[i] += prob;
                    for j in 0..self.probs[i].len() {
                        let p = self.probs[i][j];
                        if p > 0.0 {
                            let mut next = st.clone();
                            next.opened[i] = Some(j);
                            self.walk(next, prob * p, out);
                        }
                    }
                    return;
                }
            }
        }
    }
}

/// Exact or estimated expectations of a policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectedOutcome {
    /// P[box i selected], by position.
    pub select: Vec<f64>,
    /// P[box i selected with atom j].
    pub select_atom: Vec<Vec<f64>>,
    /// P[box i inspected].
    pub inspect: Vec<f64>,
    pub utility: f64,
    /// E[number selected].
    pub n_selected: f64,
}

impl ExpectedOutcome {
    fn zeros(probs: &[Vec<f64>]) -> Self {
        Self {
            select: vec![0.0; probs.len()],
            select_atom: probs.iter().map(|p| vec![0.0; p.len()]).collect(),
            inspect: vec![0.0; probs.len()],
            utility: 0.0,
            n_selected: 0.0,
        }
    }

    /// Weighted combination (weights should sum to one).
    pub fn mix(parts: &[(ExpectedOutcome, f64)]) -> Self {
        let first = &parts[0].0;
        let mut out = ExpectedOutcome {
            select: vec![0.0; first.select.len()],
            select_atom: first.select_atom.iter().map(|r| vec![0.0; r.len()]).collect(),
            inspect: vec![0.0; first.inspect.len()],
            utility: 0.0,
            n_selected: 0.0,
        };
        for (o, w) in parts {
            for i in 0..out.select.len() {
                out.select[i] += w * o.select[i];
                out.inspect[i] += w * o.inspect[i];
                for j in 0..out.select_atom[i].len() {
                    out.select_atom[i][j] += w * o.select_atom[i][j];
                }
            }
            out.utility += w * o.utility;
            out.n_selected += w * o.n_selected;
        }
        out
    }
}

/// Monte Carlo estimate with standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McOutcome {
    pub mean: ExpectedOutcome,
    pub stderr_select: Vec<f64>,
    pub stderr_inspect: Vec<f64>,
    pub stderr_utility: f64,
    /// Mean and standard error of each requested functional.
    pub functionals: Vec<(f64, f64)>,
    pub trials: usize,
}

/// A linear functional of the outcome: Σ select[i][j]·A_ij + Σ inspect[i]·I_i + constant.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearFunctional {
    pub select: Vec<Vec<f64>>,
    pub inspect: Vec<f64>,
    pub constant: f64,
}

impl LinearFunctional {
    pub fn eval(&self, out: &ExpectedOutcome) -> f64 {
        let mut s = self.constant;
        for i in 0..self.inspect.len() {
            s += self.inspect[i] * out.inspect[i];
            for j in 0..self.select[i].len() {
                s += self.select[i][j] * out.select_atom[i][j];
            }
        }
        s
    }

    fn eval_path(&self, atoms: &[usize], insp: &[usize], sel: &[usize]) -> f64 {
        self.constant
            + insp.iter().map(|&i| self.inspect[i]).sum::<f64>()
            + sel.iter().map(|&i| self.select[i][atoms[i]]).sum::<f64>()
    }
}

/// Draw one realization for trial `trial` of stream `seed`.
pub fn sample_atoms(probs: &[Vec<f64>], seed: u64, trial: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    probs
        .iter()
        .map(|p| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (j, &pj) in p.iter().enumerate() {
                acc += pj;
                if u < acc {
                    return j;
                }
            }
            // Rounding: fall back to the last positive-mass atom.
            p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
        })
        .collect()
}

const MC_CHUNK: usize = 256;

/// Monte Carlo evaluation of a mixture of policies with common random
/// numbers: every atom runs on the same realization, and the per-trial value
/// is the weighted combination. Deterministic in `seed`.
pub fn mixture_mc(
    atoms: &[(&IndexPolicy, f64)],
    functionals: &[LinearFunctional],
    trials: usize,
    seed: u64,
) -> Result<McOutcome> {
    if trials == 0 {
        return invalid("trials must be at least 1");
    }
    let first = atoms[0].0;
    let n = first.len();
    let nf = functionals.len();
    #[derive(Clone)]
    struct Acc {
        sel_atom: Vec<Vec<f64>>,
        sel: Vec<f64>,
        sel2: Vec<f64>,
        insp: Vec<f64>,
        insp2: Vec<f64>,
        u: f64,
        u2: f64,
        nsel: f64,
        f: Vec<f64>,
        f2: Vec<f64>,
    }
    let zero = Acc {
        sel_atom: first.probs.iter().map(|p| vec![0.0; p.len()]).collect(),
        sel: vec![0.0; n],
        sel2: vec![0.0; n],
        insp: vec![0.0; n],
        insp2: vec![0.0; n],
        u: 0.0,
        u2: 0.0,
        nsel: 0.0,
        f: vec![0.0; nf],
        f2: vec![0.0; nf],
    };
    let chunks: Vec<(usize, usize)> = (0..trials)
        .step_by(MC_CHUNK)
        .map(|s| (s, (s + MC_CHUNK).min(trials)))
        .collect();
    let parts: Vec<Acc> = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let mut acc = zero.clone();
            let mut sel_t = vec![0.0; n];
            let mut insp_t = vec![0.0; n];
            let mut f_t = vec![0.0; nf];
            for t in lo..hi {
                let real = sample_atoms(&first.probs, seed, t as u64);
                sel_t.iter_mut().for_each(|x| *x = 0.0);
                insp_t.iter_mut().for_each(|x| *x = 0.0);
                f_t.iter_mut().for_each(|x| *x = 0.0);
                let mut u_t = 0.0;
                for &(pol, w) in atoms {
                    let (insp, sel) = pol.run_positions(&real);
                    for &i in &insp {
                        insp_t[i] += w;
                        u_t -= w * pol.costs[i];
                    }
                    for &i in &sel {
                        sel_t[i] += w;
                        acc.sel_atom[i][real[i]] += w;
                        u_t += w * pol.values[i][real[i]];
                    }
                    acc.nsel += w * sel.len() as f64;
                    for (k, f) in functionals.iter().enumerate() {
                        f_t[k] += w * f.eval_path(&real, &insp, &sel);
                    }
                }
                for i in 0..n {
                    acc.sel[i] += sel_t[i];
                    acc.sel2[i] += sel_t[i] * sel_t[i];
                    acc.insp[i] += insp_t[i];
                    acc.insp2[i] += insp_t[i] * insp_t[i];
                }
                acc.u += u_t;
                acc.u2 += u_t * u_t;
                for k in 0..nf {
                    acc.f[k] += f_t[k];
                    acc.f2[k] += f_t[k] * f_t[k];
                }
            }
            acc
        })
        .collect();
    let mut tot = zero;
    for a in parts {
        for i in 0..n {
            tot.sel[i] += a.sel[i];
            tot.sel2[i] += a.sel2[i];
            tot.insp[i] += a.insp[i];
            tot.insp2[i] += a.insp2[i];
            for j in 0..tot.sel_atom[i].len() {
                tot.sel_atom[i][j] += a.sel_atom[i][j];
            }
        }
        tot.u += a.u;
        tot.u2 += a.u2;
        tot.nsel += a.nsel;
        for k in 0..nf {
            tot.f[k] += a.f[k];
            tot.f2[k] += a.f2[k];
        }
    }
    let t = trials as f64;
    let se = |s: f64, s2: f64| -> f64 {
        if trials < 2 {
            return 0.0;
        }
        let m = s / t;
        let var = ((s2 / t - m * m) * t / (t - 1.0)).max(0.0);
        (var / t).sqrt()
    };
    let mean = ExpectedOutcome {
        select: tot.sel.iter().map(|x| x / t).collect(),
        select_atom: tot.sel_atom.iter().map(|r| r.iter().map(|x| x / t).collect()).collect(),
        inspect: tot.insp.iter().map(|x| x / t).collect(),
        utility: tot.u / t,
        n_selected: tot.nsel / t,
    };
    Ok(McOutcome {
        stderr_select: (0..n).map(|i| se(tot.sel[i], tot.sel2[i])).collect(),
        stderr_inspect: (0..n).map(|i| se(tot.insp[i], tot.insp2[i])).collect(),
        stderr_utility: se(tot.u, tot.u2),
        functionals: (0..nf).map(|k| (tot.f[k] / t, se(tot.f[k], tot.f2[k]))).collect(),
        mean,
        trials,
    })
}

/// Run Alg. 1 on one realization.
pub fn run_refined_policy(
    instance: &PandoraInstance,
    tie: &TieBreakRule,
    real: &Realization,
) -> Result<SearchOutcome> {
    if real.atoms.len() != instance.len() {
        return invalid("realization must cover every box");
    }
    Ok(IndexPolicy::new(instance, tie)?.run(real))
}

pub fn expected_outcome_exact(instance: &PandoraInstance, tie: &TieBreakRule) -> Result<ExpectedOutcome> {
    IndexPolicy::new(instance, tie)?.evaluate_exact(tol::ENUM_CAP)
}

pub fn expected_outcome_mc(
    instance: &PandoraInstance,
    tie: &TieBreakRule,
    trials: usize,
    seed: u64,
) -> Result<McOutcome> {
    let pol = IndexPolicy::new(instance, tie)?;
    mixture_mc(&[(&pol, 1.0)], &[], trials, seed)
}

/// Optimal expected utility over all adaptive policies, by backward
/// induction over (opened atoms, selected set).
pub fn brute_force_optimal_value(instance: &PandoraInstance) -> Result<f64> {
    brute_force_optimal_value_capped(instance, tol::STATE_CAP)
}

pub fn brute_force_optimal_value_capped(instance: &PandoraInstance, cap: usize) -> Result<f64> {
    let n = instance.len();
    if instance.boxes.iter().any(|b| b.dist.len() >= 254) {
        return invalid("supports above 253 atoms are not supported by the oracle");
    }
    let mut memo: HashMap<Vec<u8>, f64> = HashMap::new();
    // 0 = unopened, 1 + j = opened at atom j, 255 = selected.
    let start = vec![0u8; n];
    value_rec(instance, &start, 0, &mut memo, cap)
}

fn value_rec(
    inst: &PandoraInstance,
    st: &[u8],
    n_sel: usize,
    memo: &mut HashMap<Vec<u8>, f64>,
    cap: usize,
) -> Result<f64> {
    if n_sel >= inst.capacity {
        return Ok(0.0);
    }
    if let Some(v) = memo.get(st) {
        return Ok(*v);
    }
    if memo.len() >= cap {
        return Err(Error::CapExceeded { what: "brute-force state space", size: memo.len() as f64, cap: cap as f64 });
    }
    let mut best = 0.0f64;
    let mut next = st.to_vec();
    for i in 0..st.len() {
        match st[i] {
            0 => {
                let b = &inst.boxes[i];
                let mut ev = -b.cost;
                for (j, &p) in b.dist.probs.iter().enumerate() {
                    if p > 0.0 {
                        next[i] = 1 + j as u8;
                        ev += p * value_rec(inst, &next, n_sel, memo, cap)?;
                    }
                }
                next[i] = 0;
                best = best.max(ev);
            }
            255 => {}
            a => {
                let v = inst.boxes[i].dist.support[(a - 1) as usize];
                next[i] = 255;
                let ev = v + value_rec(inst, &next, n_sel + 1, memo, cap)?;
                next[i] = a;
                best = best.max(ev);
            }
        }
    }
    memo.insert(st.to_vec(), best);
    Ok(best)
}
