//! One ex-ante affine constraint on a Pandora instance: dual adjustment,
//! dual minimisation by bisection, extreme tie-breaking and RDIP.
//!
//! Sign conventions: the constraint reads E[θ^S·A + θ^I·I] ≤ b (or = b) and
//! its slack is Δ = b − E[θ^S·A + θ^I·I]. The adjusted instance at λ has
//! ṽ = v − λθ^S(v) and c̃ = c + λE[θ^I], so Δ is nondecreasing in λ.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::pandora::{
    mixture_mc, CoefTable, ExpectedOutcome, IndexPolicy, LinearFunctional, McOutcome, PandoraInstance,
    TieBreakRule,
};
use crate::tol;

/// A per-box coefficient: one number, or one per support atom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Coef {
    Scalar(f64),
    PerValue(Vec<f64>),
}

impl Coef {
    fn atoms(&self, n_atoms: usize) -> Result<Vec<f64>> {
        match self {
            Coef::Scalar(x) => Ok(vec![*x; n_atoms]),
            Coef::PerValue(v) if v.len() == n_atoms => Ok(v.clone()),
            Coef::PerValue(v) => invalid(format!(
                "value-specific coefficient has {} entries for a support of {n_atoms}",
                v.len()
            )),
        }
    }

    pub fn is_scalar(&self) -> bool {
        matches!(self, Coef::Scalar(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    Eq,
    Leq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineConstraint {
    #[serde(rename = "theta_S")]
    pub theta_s: Vec<Coef>,
    #[serde(rename = "theta_I")]
    pub theta_i: Vec<Coef>,
    pub b: f64,
    pub sense: Sense,
}

impl AffineConstraint {
    pub fn scalar(theta_s: Vec<f64>, theta_i: Vec<f64>, b: f64, sense: Sense) -> Self {
        Self {
            theta_s: theta_s.into_iter().map(Coef::Scalar).collect(),
            theta_i: theta_i.into_iter().map(Coef::Scalar).collect(),
            b,
            sense,
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.theta_s.iter().chain(&self.theta_i).all(Coef::is_scalar)
    }

    /// Per-atom coefficient table with θ^I replaced by its expectation.
    pub fn table(&self, instance: &PandoraInstance) -> Result<CoefTable> {
        let n = instance.len();
        if self.theta_s.len() != n || self.theta_i.len() != n {
            return invalid(format!("constraint has {} / {} coefficients for {n} boxes", self.theta_s.len(), self.theta_i.len()));
        }
        let mut ts = Vec::with_capacity(n);
        let mut ti = Vec::with_capacity(n);
        for (i, b) in instance.boxes.iter().enumerate() {
            let m = b.dist.len();
            ts.push(self.theta_s[i].atoms(m)?);
            let raw = self.theta_i[i].atoms(m)?;
            ti.push(raw.iter().zip(b.dist.probs()).map(|(x, p)| x * p).sum());
        }
        if ts.iter().flatten().chain(&ti).any(|x: &f64| !x.is_finite()) {
            return invalid("constraint coefficients must be finite");
        }
        Ok(CoefTable { theta_s: ts, theta_i: ti })
    }

    /// Expected per-box coefficients (θ^S averaged over the support).
    fn expected(&self, instance: &PandoraInstance) -> Result<(Vec<f64>, Vec<f64>)> {
        let t = self.table(instance)?;
        let s = instance
            .boxes
            .iter()
            .zip(&t.theta_s)
            .map(|(b, row)| row.iter().zip(b.dist.probs()).map(|(x, p)| x * p).sum())
            .collect();
        Ok((s, t.theta_i))
    }

    pub fn warn_normalisation(&self) {
        if self.b.abs() > 1.0 {
            log::warn!("constraint bound b = {} lies outside [-1, 1]", self.b);
        }
    }
}

/// Slack Δ = b − E[θ^S·A + θ^I·I] of an exact outcome.
pub fn slack(table: &CoefTable, b: f64, out: &ExpectedOutcome) -> f64 {
    b - table.apply(out)
}

/// The linear functional whose mean is the slack.
pub fn slack_functional(table: &CoefTable, b: f64) -> LinearFunctional {
    LinearFunctional {
        select: table.theta_s.iter().map(|r| r.iter().map(|x| -x).collect()).collect(),
        inspect: table.theta_i.iter().map(|x| -x).collect(),
        constant: b,
    }
}

/// Instance with values and costs shifted by λ·θ for one or more constraints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualAdjustedInstance {
    pub base: PandoraInstance,
    pub lambda: Vec<f64>,
    /// Adjusted value of each support atom, aligned with the base support.
    pub values: Vec<Vec<f64>>,
    pub costs: Vec<f64>,
}

impl DualAdjustedInstance {
    pub fn new(base: &PandoraInstance, tables: &[CoefTable], lambda: &[f64]) -> Self {
        let mut values = base.values();
        let mut costs = base.costs();
        for (t, &l) in tables.iter().zip(lambda) {
            for i in 0..values.len() {
                for j in 0..values[i].len() {
                    values[i][j] -= l * t.theta_s[i][j];
                }
                costs[i] += l * t.theta_i[i];
            }
        }
        Self { base: base.clone(), lambda: lambda.to_vec(), values, costs }
    }

    /// Adjusted support of box i, sorted (atom positions follow the sort).
    pub fn sorted_support(&self, i: usize) -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = self.values[i]
            .iter()
            .zip(self.base.boxes[i].dist.probs())
            .map(|(a, b)| (*a, *b))
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }

    pub fn policy(&self, rule: &TieBreakRule, tables: &[CoefTable]) -> Result<IndexPolicy> {
        IndexPolicy::adjusted(
            &self.base,
            self.values.clone(),
            self.costs.clone(),
            rule,
            tables,
            tol::TIE_ADJUSTED,
        )
    }
}

pub fn adjust_instance(
    instance: &PandoraInstance,
    constraint: &AffineConstraint,
    lambda: f64,
) -> Result<DualAdjustedInstance> {
    let t = constraint.table(instance)?;
    Ok(DualAdjustedInstance::new(instance, &[t], &[lambda]))
}

/// Non-emptiness of {0 ≤ x ≤ y ≤ 1, Σx ≤ k, θ^S·x + θ^I·y ≤ b (= b)}.
///
/// The extreme values of the left-hand side over the polytope are found
/// greedily: each box sits at (0,0), (0,1) or (1,1) and the k best upgrades
/// to (1,1) are taken.
pub fn check_feasibility(instance: &PandoraInstance, constraint: &AffineConstraint) -> Result<bool> {
    let (ts, ti) = constraint.expected(instance)?;
    let (lo, hi) = lhs_range(&ts, &ti, instance.capacity);
    let eps = tol::TIE_ADJUSTED * (1.0 + constraint.b.abs());
    Ok(match constraint.sense {
        Sense::Leq => lo <= constraint.b + eps,
        Sense::Eq => lo <= constraint.b + eps && constraint.b <= hi + eps,
    })
}

fn lhs_range(ts: &[f64], ti: &[f64], k: usize) -> (f64, f64) {
    let extreme = |sgn: f64| -> f64 {
        // Minimise sgn·L.
        let mut base = 0.0;
        let mut gains = Vec::with_capacity(ts.len());
        for i in 0..ts.len() {
            let y_only = (sgn * ti[i]).min(0.0);
            base += y_only;
            gains.push(sgn * (ts[i] + ti[i]) - y_only);
        }
        gains.sort_by(|a, b| a.total_cmp(b));
        base += gains.iter().take(k).filter(|g| **g < 0.0).sum::<f64>();
        sgn * base
    };
    (extreme(1.0), extreme(-1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    DropConstraint,
    MakeEquality,
}

/// Decide whether a `leq` constraint can be dropped: it can when some
/// unconstrained-optimal policy (the maximal-slack one) already satisfies it.
pub fn check_binding(instance: &PandoraInstance, constraint: &AffineConstraint) -> Result<Binding> {
    if constraint.sense != Sense::Leq {
        return invalid("check_binding expects an inequality constraint");
    }
    let pt = dual_value_and_slacks(instance, constraint, 0.0)?;
    Ok(if pt.delta_plus >= -tol::TIE_ADJUSTED {
        Binding::DropConstraint
    } else {
        Binding::MakeEquality
    })
}

/// How expectations are computed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalMethod {
    Exact { cap: f64 },
    Mc { trials: usize, seed: u64 },
}

impl Default for EvalMethod {
    fn default() -> Self {
        EvalMethod::Exact { cap: tol::ENUM_CAP }
    }
}

/// Dual function value and extreme slacks at one λ.
#[derive(Clone, Debug, PartialEq)]
pub struct DualPoint {
    pub lambda: f64,
    pub g: f64,
    pub delta_minus: f64,
    pub delta_plus: f64,
    /// Utility (original values) of the τ⁻ and τ⁺ policies.
    pub utility_minus: f64,
    pub utility_plus: f64,
}

pub(crate) fn evaluate_pair(
    adj: &DualAdjustedInstance,
    table: &CoefTable,
    b: f64,
    method: EvalMethod,
) -> Result<(DualPoint, IndexPolicy, IndexPolicy)> {
    let tables = std::slice::from_ref(table);
    let pm = adj.policy(&TieBreakRule::NegativeExtreme, tables)?;
    let pp = adj.policy(&TieBreakRule::PositiveExtreme, tables)?;
    let lambda = adj.lambda[0];
    let (dm, dp, um, up) = match method {
        EvalMethod::Exact { cap } => {
            let om = pm.evaluate_exact(cap)?;
            let op = pp.evaluate_exact(cap)?;
            (slack(table, b, &om), slack(table, b, &op), om.utility, op.utility)
        }
        EvalMethod::Mc { trials, seed } => {
            let f = [slack_functional(table, b)];
            let om = mixture_mc(&[(&pm, 1.0)], &f, trials, seed)?;
            let op = mixture_mc(&[(&pp, 1.0)], &f, trials, seed)?;
            (om.functionals[0].0, op.functionals[0].0, om.mean.utility, op.mean.utility)
        }
    };
    // Both policies are optimal for the adjusted instance, so either gives G.
    let g = up + lambda * dp;
    Ok((
        DualPoint { lambda, g, delta_minus: dm, delta_plus: dp, utility_minus: um, utility_plus: up },
        pm,
        pp,
    ))
}

/// G(λ) = max adjusted utility + λb, with the slacks of τ⁻ and τ⁺.
pub fn dual_value_and_slacks(
    instance: &PandoraInstance,
    constraint: &AffineConstraint,
    lambda: f64,
) -> Result<DualPoint> {
    dual_point_with(instance, constraint, lambda, EvalMethod::default())
}

pub fn dual_point_with(
    instance: &PandoraInstance,
    constraint: &AffineConstraint,
    lambda: f64,
    method: EvalMethod,
) -> Result<DualPoint> {
    let t = constraint.table(instance)?;
    let adj = DualAdjustedInstance::new(instance, std::slice::from_ref(&t), &[lambda]);
    Ok(evaluate_pair(&adj, &t, constraint.b, method)?.0)
}

/// Bound on |λ*|: beyond it the adjusted sign structure no longer changes.
pub fn lambda_bound(instance: &PandoraInstance, tables: &[CoefTable]) -> Option<f64> {
    let mut vmin = f64::INFINITY;
    let mut vmax = f64::NEG_INFINITY;
    for b in &instance.boxes {
        vmin = vmin.min(b.dist.support()[0]);
        vmax = vmax.max(*b.dist.support().last().unwrap());
    }
    let cmax = instance.boxes.iter().map(|b| b.cost.abs()).fold(0.0, f64::max);
    let tmin = tables
        .iter()
        .flat_map(|t| t.theta_s.iter().flatten().chain(&t.theta_i))
        .map(|x| x.abs())
        .filter(|x| *x > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !tmin.is_finite() {
        return None;
    }
    Some((vmax - vmin + cmax + 1.0) / tmin)
}

/// Result of the scalar dual search.
#[derive(Clone, Debug, PartialEq)]
pub struct DualSolution {
    pub lambda: f64,
    /// Bracket [lo, hi] with Δ⁺(lo) < 0 < Δ⁻(hi) when `exact` is false.
    pub lo: f64,
    pub hi: f64,
    /// Whether Δ⁻(λ) ≤ 0 ≤ Δ⁺(λ) was reached.
    pub exact: bool,
}

/// Minimise the dual of an equality-form constraint; returns λ*.
pub fn minimize_dual(instance: &PandoraInstance, constraint: &AffineConstraint, tol: f64) -> Result<f64> {
    Ok(solve_dual(instance, constraint, EvalMethod::default(), tol)?.lambda)
}

pub fn solve_dual(
    instance: &PandoraInstance,
    constraint: &AffineConstraint,
    method: EvalMethod,
    tol: f64,
) -> Result<DualSolution> {
    let t = constraint.table(instance)?;
    let at = |l: f64| dual_point_with(instance, constraint, l, method);
    let straddles = |p: &DualPoint| p.delta_minus <= 0.0 && 0.0 <= p.delta_plus;
    let p0 = at(0.0)?;
    if straddles(&p0) {
        return Ok(DualSolution { lambda: 0.0, lo: 0.0, hi: 0.0, exact: true });
    }
    let big = match lambda_bound(instance, std::slice::from_ref(&t)) {
        Some(l) => l,
        None => return Err(Error::Infeasible(format!("all coefficients are zero but b = {}", constraint.b))),
    };
    let (mut lo, mut hi) = if p0.delta_plus < 0.0 {
        let p = at(big)?;
        if p.delta_plus < 0.0 {
            return Err(Error::Infeasible(format!("slack stays negative up to λ = {big}")));
        }
        if straddles(&p) {
            return Ok(DualSolution { lambda: big, lo: big, hi: big, exact: true });
        }
        (p0, p)
    } else {
        let p = at(-big)?;
        if p.delta_minus > 0.0 {
            return Err(Error::Infeasible(format!("slack stays positive down to λ = {}", -big)));
        }
        if straddles(&p) {
            return Ok(DualSolution { lambda: -big, lo: -big, hi: -big, exact: true });
        }
        (p, p0)
    };
    loop {
        // G is piecewise linear: if a single kink lies in the bracket, the
        // two outer lines meet exactly there.
        let den = lo.delta_plus - hi.delta_minus;
        if den < 0.0 {
            let k = (hi.g - lo.g + lo.delta_plus * lo.lambda - hi.delta_minus * hi.lambda) / den;
            if k > lo.lambda && k < hi.lambda {
                let p = at(k)?;
                if straddles(&p) {
                    return Ok(DualSolution { lambda: k, lo: k, hi: k, exact: true });
                }
            }
        }
        if hi.lambda - lo.lambda <= tol {
            break;
        }
        let mid = 0.5 * (lo.lambda + hi.lambda);
        if mid <= lo.lambda || mid >= hi.lambda {
            break;
        }
        let p = at(mid)?;
        if straddles(&p) {
            return Ok(DualSolution { lambda: mid, lo: mid, hi: mid, exact: true });
        }
        if p.delta_plus < 0.0 {
            lo = p;
        } else {
            hi = p;
        }
    }
    let (lo, hi) = (lo.lambda, hi.lambda);
    Ok(DualSolution { lambda: 0.5 * (lo + hi), lo, hi, exact: false })
}

/// Weights (w_neg, w_pos) mixing an atom with slack `d_neg` ≤ 0 and one with
/// `d_pos` ≥ 0 to zero slack.
pub fn mixing_weights(d_neg: f64, d_pos: f64) -> (f64, f64) {
    if d_pos - d_neg <= 0.0 {
        return (1.0, 0.0);
    }
    (d_pos / (d_pos - d_neg), -d_neg / (d_pos - d_neg))
}

/// One deterministic policy in a mixture.
#[derive(Clone, Debug)]
pub struct PolicyAtom {
    pub adjusted: DualAdjustedInstance,
    pub rule: TieBreakRule,
    pub weight: f64,
    pub policy: IndexPolicy,
}

/// A mixture of dual-adjusted index policies.
#[derive(Clone, Debug)]
pub struct RandomizedIndexPolicy {
    pub lambda: Vec<f64>,
    pub atoms: Vec<PolicyAtom>,
    /// Whether λ was located exactly (false: a bracketing pair is mixed).
    pub exact_dual: bool,
}

impl RandomizedIndexPolicy {
    pub fn evaluate_exact(&self, cap: f64) -> Result<ExpectedOutcome> {
        let parts = self
            .atoms
            .iter()
            .map(|a| Ok((a.policy.evaluate_exact(cap)?, a.weight)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ExpectedOutcome::mix(&parts))
    }

    pub fn evaluate_mc(&self, functionals: &[LinearFunctional], trials: usize, seed: u64) -> Result<McOutcome> {
        let atoms: Vec<(&IndexPolicy, f64)> = self.atoms.iter().map(|a| (&a.policy, a.weight)).collect();
        mixture_mc(&atoms, functionals, trials, seed)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.weight).collect()
    }
}

/// RDIP: the optimal policy under one affine constraint.
pub fn solve_rdip(instance: &PandoraInstance, constraint: &AffineConstraint, tol: f64) -> Result<RandomizedIndexPolicy> {
    solve_rdip_with(instance, constraint, EvalMethod::default(), tol)
}

pub fn solve_rdip_with(
    instance: &PandoraInstance,
    constraint: &AffineConstraint,
    method: EvalMethod,
    tol: f64,
) -> Result<RandomizedIndexPolicy> {
    constraint.warn_normalisation();
    if !check_feasibility(instance, constraint)? {
        return Err(Error::Infeasible("the relaxed selection polytope misses the constraint".into()));
    }
    let t = constraint.table(instance)?;
    let tables = std::slice::from_ref(&t);
    let single = |lambda: f64, rule: TieBreakRule| -> Result<PolicyAtom> {
        let adjusted = DualAdjustedInstance::new(instance, tables, &[lambda]);
        let policy = adjusted.policy(&rule, tables)?;
        Ok(PolicyAtom { adjusted, rule, weight: 1.0, policy })
    };
    let mut eq = constraint.clone();
    if constraint.sense == Sense::Leq {
        let p0 = dual_point_with(instance, constraint, 0.0, method)?;
        if p0.delta_plus >= -tol::TIE_ADJUSTED {
            return Ok(RandomizedIndexPolicy {
                lambda: vec![0.0],
                atoms: vec![single(0.0, TieBreakRule::PositiveExtreme)?],
                exact_dual: true,
            });
        }
        eq.sense = Sense::Eq;
    }
    let sol = solve_dual(instance, &eq, method, tol)?;
    let (neg, pos) = if sol.exact {
        let adj = DualAdjustedInstance::new(instance, tables, &[sol.lambda]);
        let (p, pm, pp) = evaluate_pair(&adj, &t, eq.b, method)?;
        let (wm, wp) = if p.delta_plus == p.delta_minus {
            (1.0, 0.0)
        } else {
            mixing_weights(p.delta_minus, p.delta_plus)
        };
        (
            PolicyAtom { adjusted: adj.clone(), rule: TieBreakRule::NegativeExtreme, weight: wm, policy: pm },
            PolicyAtom { adjusted: adj, rule: TieBreakRule::PositiveExtreme, weight: wp, policy: pp },
        )
    } else {
        // π⁺ at lo has negative slack, π⁻ at hi positive slack.
        let adj_lo = DualAdjustedInstance::new(instance, tables, &[sol.lo]);
        let adj_hi = DualAdjustedInstance::new(instance, tables, &[sol.hi]);
        let (plo, _, pp_lo) = evaluate_pair(&adj_lo, &t, eq.b, method)?;
        let (phi, pm_hi, _) = evaluate_pair(&adj_hi, &t, eq.b, method)?;
        let (wn, wp) = mixing_weights(plo.delta_plus, phi.delta_minus);
        (
            PolicyAtom { adjusted: adj_lo, rule: TieBreakRule::PositiveExtreme, weight: wn, policy: pp_lo },
            PolicyAtom { adjusted: adj_hi, rule: TieBreakRule::NegativeExtreme, weight: wp, policy: pm_hi },
        )
    };
    let atoms: Vec<PolicyAtom> = [neg, pos].into_iter().filter(|a| a.weight > 0.0).collect();
    Ok(RandomizedIndexPolicy { lambda: vec![sol.lambda], atoms, exact_dual: sol.exact })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum SlackReport {
    Exact { slack: f64 },
    Mc { slack: f64, trials: usize, stderr: f64 },
}

impl SlackReport {
    pub fn slack(&self) -> f64 {
        match self {
            SlackReport::Exact { slack } | SlackReport::Mc { slack, .. } => *slack,
        }
    }
}

pub fn slack_of(
    policy: &RandomizedIndexPolicy,
    instance: &PandoraInstance,
    constraint: &AffineConstraint,
    method: EvalMethod,
) -> Result<SlackReport> {
    let t = constraint.table(instance)?;
    match method {
        EvalMethod::Exact { cap } => {
            let out = policy.evaluate_exact(cap)?;
            Ok(SlackReport::Exact { slack: slack(&t, constraint.b, &out) })
        }
        EvalMethod::Mc { trials, seed } => {
            let mc = policy.evaluate_mc(&[slack_functional(&t, constraint.b)], trials, seed)?;
            let (s, se) = mc.functionals[0];
            Ok(SlackReport::Mc { slack: s, trials, stderr: se })
        }
    }
}
