//! G-RDIP: primal-dual learning over visit vectors of a JMS instance with
//! affine and convex ex-ante constraints.
//!
//! The primal player best-responds with the index policy of the adjusted
//! rewards R̃ = R − Σλ_jθ_j − Σβ_iμ_i. The dual player runs projected
//! gradient steps: μ in an inner loop, (λ, β) in an outer loop on the
//! inner-loop average visit vector.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::constrained::Sense;
use crate::error::{invalid, Error, Result};
use crate::jms::{h_p, index_table, visit_vector, IndexTable, JmsInstance, JmsTie, VisitMethod, VisitVector};

/// θ·p ≤ b (or = b) on the visit vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineVisitConstraint {
    pub theta: Vec<f64>,
    pub b: f64,
    pub sense: Sense,
}

impl AffineVisitConstraint {
    pub fn new(theta: Vec<f64>, b: f64, sense: Sense) -> Self {
        Self { theta, b, sense }
    }

    /// θ·p − b.
    pub fn violation(&self, p: &[f64]) -> f64 {
        dot(&self.theta, p) - self.b
    }
}

/// Convex constraint F(p) ≤ 0 with a closed-form conjugate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConvexConstraintSpec {
    /// F(p) = ½α‖p − c‖² + b0.
    Quadratic { center: Vec<f64>, alpha: f64, b0: f64 },
}

pub fn quadratic_constraint(center: Vec<f64>, alpha: f64, b0: f64) -> Result<ConvexConstraintSpec> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return invalid(format!("quadratic weight must be positive, got {alpha}"));
    }
    if center.iter().any(|x| !x.is_finite()) || !b0.is_finite() {
        return invalid("non-finite quadratic constraint data");
    }
    Ok(ConvexConstraintSpec::Quadratic { center, alpha, b0 })
}

impl ConvexConstraintSpec {
    pub fn dim(&self) -> usize {
        match self {
            Self::Quadratic { center, .. } => center.len(),
        }
    }

    pub fn evaluate(&self, p: &[f64]) -> f64 {
        match self {
            Self::Quadratic { center, alpha, b0 } => {
                0.5 * alpha * p.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>() + b0
            }
        }
    }

    pub fn grad(&self, p: &[f64]) -> Vec<f64> {
        match self {
            Self::Quadratic { center, alpha, .. } => p.iter().zip(center).map(|(a, c)| alpha * (a - c)).collect(),
        }
    }

    /// F*(μ) = sup_p μ·p − F(p).
    pub fn conjugate(&self, mu: &[f64]) -> f64 {
        match self {
            Self::Quadratic { center, alpha, b0 } => {
                dot(mu, center) + mu.iter().map(|m| m * m).sum::<f64>() / (2.0 * alpha) - b0
            }
        }
    }

    pub fn conjugate_grad(&self, mu: &[f64]) -> Vec<f64> {
        match self {
            Self::Quadratic { center, alpha, .. } => mu.iter().zip(center).map(|(m, c)| c + m / alpha).collect(),
        }
    }

    /// Bound on |∇F| over the box [0, H_p]^d.
    pub fn h_mu(&self, h_p: f64) -> f64 {
        match self {
            Self::Quadratic { center, alpha, .. } => {
                alpha * center.iter().map(|c| c.abs().max((h_p - c).abs())).fold(0.0, f64::max)
            }
        }
    }

    /// Bound on |∇F*| over the box [−H_μ, H_μ]^d.
    pub fn l_p(&self, h_mu: f64) -> f64 {
        match self {
            Self::Quadratic { center, alpha, .. } => center.iter().map(|c| c.abs() + h_mu / alpha).fold(0.0, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrdipParams {
    pub k_i: u64,
    pub k_o: u64,
    pub gamma_i: f64,
    pub gamma_o_lambda: f64,
    pub gamma_o_beta: f64,
    pub h_lambda: f64,
    pub h_beta: f64,
    pub h_mu: f64,
    /// Inputs kept for the step-size formulas and the stopping test.
    pub epsilon: f64,
    pub delta: f64,
    pub d: usize,
    pub h_p: f64,
    pub l_p: f64,
    pub m_a: usize,
    pub m_c: usize,
    /// Stop once the certificate shows (ε, δ) are met.
    pub early_stop: bool,
}

fn ceil_count(x: f64) -> u64 {
    if !x.is_finite() || x >= u64::MAX as f64 {
        u64::MAX
    } else {
        (x.ceil() as u64).max(1)
    }
}

/// Parameters with the iteration counts and step sizes of the guarantee.
#[allow(clippy::too_many_arguments)]
pub fn default_params(epsilon: f64, delta: f64, d: usize, h_p: f64, h_mu: f64, l_p: f64, m_a: usize, m_c: usize) -> GrdipParams {
    let df = d as f64;
    let h = (df * h_p + epsilon) / delta;
    let k_i = if m_c == 0 {
        1
    } else {
        ceil_count((6.0 * df * h_mu * (h_p + l_p) * h * m_c as f64 / epsilon).powi(2))
    };
    let k_o = ceil_count((3.0 * (2.0 * h * m_a as f64).max(h * m_c as f64) / epsilon).powi(2));
    let mut p = GrdipParams {
        k_i,
        k_o,
        gamma_i: 0.0,
        gamma_o_lambda: 0.0,
        gamma_o_beta: 0.0,
        h_lambda: h,
        h_beta: h,
        h_mu,
        epsilon,
        delta,
        d,
        h_p,
        l_p,
        m_a,
        m_c,
        early_stop: true,
    };
    p.set_steps();
    p
}

impl GrdipParams {
    fn set_steps(&mut self) {
        let ki = self.k_i as f64;
        let ko = self.k_o as f64;
        self.gamma_i = if self.m_c == 0 || self.h_mu == 0.0 {
            0.0
        } else {
            2.0 * self.h_mu / ((self.h_p + self.l_p) * self.h_beta * ki.sqrt())
        };
        self.gamma_o_lambda = self.h_lambda / (2.0 * ko.sqrt());
        self.gamma_o_beta = self.h_beta / ko.sqrt();
    }

    /// Replace the iteration counts; step sizes follow the same formulas.
    pub fn with_iterations(mut self, k_o: u64, k_i: u64) -> Self {
        self.k_o = k_o.max(1);
        self.k_i = if self.m_c == 0 { 1 } else { k_i.max(1) };
        self.set_steps();
        self
    }

    pub fn with_early_stop(mut self, on: bool) -> Self {
        self.early_stop = on;
        self
    }

    /// Parameters derived from the instance and constraint data.
    pub fn for_problem(
        instance: &JmsInstance,
        affine: &[AffineVisitConstraint],
        convex: &[ConvexConstraintSpec],
        epsilon: f64,
        delta: f64,
    ) -> Result<Self> {
        let hp = h_p(instance)?;
        let h_mu = convex.iter().map(|c| c.h_mu(hp)).fold(0.0, f64::max);
        let l_p = convex.iter().map(|c| c.l_p(h_mu)).fold(0.0, f64::max);
        let m_a: usize = affine.iter().map(|a| if a.sense == Sense::Eq { 2 } else { 1 }).sum();
        Ok(default_params(epsilon, delta, instance.dim(), hp, h_mu, l_p, m_a, convex.len()))
    }
}

/// R̃ = R − Σ_j λ_j θ_j − Σ_i β_i μ_i.
pub fn adjusted_reward(r: &[f64], lambdas: &[f64], thetas: &[Vec<f64>], betas: &[f64], mus: &[Vec<f64>]) -> Vec<f64> {
    let mut out = r.to_vec();
    for (l, t) in lambdas.iter().zip(thetas) {
        for (o, x) in out.iter_mut().zip(t) {
            *o -= l * x;
        }
    }
    for (b, m) in betas.iter().zip(mus) {
        for (o, x) in out.iter_mut().zip(m) {
            *o -= b * x;
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GrdipAtom {
    pub adjusted_reward: Vec<f64>,
    pub index_table: IndexTable,
    pub visits: Vec<f64>,
    /// Multiple of 1/(number of best responses); repeated policies are merged.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: u64,
    pub lagrangian: f64,
    pub mean_lagrangian: f64,
    /// θ_j·p̄ − b_j per affine inequality, then F_i(p̄) per convex constraint.
    pub slacks: Vec<f64>,
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// Smallest dual value seen: an upper bound on the constrained optimum.
    pub upper_bound: f64,
    pub objective: f64,
    pub gap: f64,
    pub max_affine_violation: f64,
    pub max_convex_value: f64,
    pub best_responses: u64,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GrdipSolution {
    pub atoms: Vec<GrdipAtom>,
    pub p_hat: VisitVector,
    pub objective: f64,
    /// θ_j·p̂ − b_j in input order (equalities report the signed value).
    pub affine_slacks: Vec<f64>,
    /// F_i(p̂).
    pub convex_values: Vec<f64>,
    pub certificate: Certificate,
    pub trace: Vec<TraceRow>,
    /// Every dual iterate stayed inside its box.
    pub iterates_in_box: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Run the two-layer primal-dual scheme.
pub fn grdip_solve(
    instance: &JmsInstance,
    affine: &[AffineVisitConstraint],
    convex: &[ConvexConstraintSpec],
    params: &GrdipParams,
    visit_method: VisitMethod,
) -> Result<GrdipSolution> {
    let d = instance.dim();
    for a in affine {
        if a.theta.len() != d {
            return invalid(format!("affine constraint has {} coefficients for dimension {d}", a.theta.len()));
        }
    }
    for c in convex {
        if c.dim() != d {
            return invalid(format!("convex constraint has dimension {} instead of {d}", c.dim()));
        }
    }
    // Equalities become two opposing inequalities.
    let mut thetas = Vec::new();
    let mut bs = Vec::new();
    for a in affine {
        thetas.push(a.theta.clone());
        bs.push(a.b);
        if a.sense == Sense::Eq {
            thetas.push(a.theta.iter().map(|x| -x).collect());
            bs.push(-a.b);
        }
    }
    let ma = thetas.len();
    let mc = convex.len();
    let r = instance.rewards();
    let hp = h_p(instance)?;

    let mut lambda = vec![0.0; ma];
    let mut beta = vec![0.0; mc];
    let mut mu = vec![vec![0.0; d]; mc];
    let mut in_box = true;

    let mut sum_p = vec![0.0; d];
    let mut sum_se2: Option<Vec<f64>> = None;
    let mut count = 0u64;
    let mut atoms: Vec<GrdipAtom> = Vec::new();
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut upper = f64::INFINITY;
    let mut trace = Vec::new();
    let mut lag_sum = 0.0;
    let mut stopped = false;

    let summary = |sum_p: &[f64], count: u64| -> (Vec<f64>, f64, f64, f64) {
        let p: Vec<f64> = sum_p.iter().map(|x| x / count as f64).collect();
        let obj = dot(&r, &p);
        let va = thetas.iter().zip(&bs).map(|(t, b)| dot(t, &p) - b).fold(f64::NEG_INFINITY, f64::max);
        let vc = convex.iter().map(|c| c.evaluate(&p)).fold(f64::NEG_INFINITY, f64::max);
        (p, obj, va, vc)
    };

    'outer: for k in 0..params.k_o {
        let mut inner_sum = vec![0.0; d];
        let mut inner_n = 0u64;
        for _l in 0..params.k_i {
            let rt = adjusted_reward(&r, &lambda, &thetas, &beta, &mu);
            if rt.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonConvergence("non-finite adjusted reward".into()));
            }
            let adj = instance.with_rewards(&rt);
            let table = index_table(&adj)?;
            let vv = visit_vector(&adj, &table, &JmsTie::Lexicographic, visit_method)?;
            let p = vv.p;
            // Weak duality: max R̃·p + λ·b + Σβ F*(μ) bounds the optimum.
            let dual = dot(&rt, &p)
                + dot(&lambda, &bs)
                + beta.iter().zip(convex).zip(&mu).map(|((b, c), m)| b * c.conjugate(m)).sum::<f64>();
            upper = upper.min(dual);

            let key: Vec<u64> = p.iter().map(|x| x.to_bits()).collect();
            match seen.get(&key) {
                Some(&i) => atoms[i].weight += 1.0,
                None => {
                    seen.insert(key, atoms.len());
                    atoms.push(GrdipAtom { adjusted_reward: rt, index_table: table, visits: p.clone(), weight: 1.0 });
                }
            }
            if let Some(se) = &vv.stderr {
                let acc = sum_se2.get_or_insert_with(|| vec![0.0; d]);
                for (a, s) in acc.iter_mut().zip(se) {
                    *a += s * s;
                }
            }
            for j in 0..d {
                sum_p[j] += p[j];
                inner_sum[j] += p[j];
            }
            count += 1;
            inner_n += 1;

            for i in 0..mc {
                let g = convex[i].conjugate_grad(&mu[i]);
                for s in 0..d {
                    let x = mu[i][s] - params.gamma_i * beta[i] * (g[s] - p[s]);
                    mu[i][s] = x.clamp(-params.h_mu, params.h_mu);
                    if !mu[i][s].is_finite() {
                        return Err(Error::NonConvergence("non-finite Fenchel dual".into()));
                    }
                }
            }

            if params.early_stop {
                let (_, obj, va, vc) = summary(&sum_p, count);
                if obj >= upper - params.epsilon && va <= params.delta && vc <= params.delta {
                    stopped = true;
                    break 'outer;
                }
            }
        }
        let pbar: Vec<f64> = inner_sum.iter().map(|x| x / inner_n as f64).collect();
        let aff: Vec<f64> = thetas.iter().zip(&bs).map(|(t, b)| dot(t, &pbar) - b).collect();
        let cvx: Vec<f64> = convex.iter().map(|c| c.evaluate(&pbar)).collect();
        let lag = dot(&r, &pbar) - dot(&lambda, &aff) - dot(&beta, &cvx);
        lag_sum += lag;
        trace.push(TraceRow {
            iter: k + 1,
            lagrangian: lag,
            mean_lagrangian: lag_sum / (k + 1) as f64,
            slacks: aff.iter().chain(&cvx).copied().collect(),
            lambda: lambda.clone(),
            beta: beta.clone(),
        });
        for j in 0..ma {
            lambda[j] = (lambda[j] - params.gamma_o_lambda * (bs[j] - dot(&thetas[j], &pbar))).clamp(0.0, params.h_lambda);
        }
        for i in 0..mc {
            beta[i] = (beta[i] + params.gamma_o_beta * cvx[i]).clamp(0.0, params.h_beta);
        }
        in_box &= lambda.iter().all(|l| (0.0..=params.h_lambda).contains(l))
            && beta.iter().all(|b| (0.0..=params.h_beta).contains(b))
            && mu.iter().flatten().all(|m| m.abs() <= params.h_mu);
    }

    let (p, obj, va, vc) = summary(&sum_p, count);
    for a in &mut atoms {
        a.weight /= count as f64;
    }
    let stderr = sum_se2.map(|s| s.iter().map(|x| x.sqrt() / count as f64).collect());
    let affine_slacks = affine.iter().map(|a| a.violation(&p)).collect();
    let convex_values = convex.iter().map(|c| c.evaluate(&p)).collect();
    Ok(GrdipSolution {
        atoms,
        p_hat: VisitVector { p, h_p: hp, stderr },
        objective: obj,
        affine_slacks,
        convex_values,
        certificate: Certificate {
            upper_bound: upper,
            objective: obj,
            gap: upper - obj,
            max_affine_violation: if ma == 0 { 0.0 } else { va },
            max_convex_value: if mc == 0 { f64::NEG_INFINITY } else { vc },
            best_responses: count,
            stopped_early: stopped,
        },
        trace,
        iterates_in_box: in_box,
    })
}

/// Per-constraint values on p̂: θ_j·p̂ − b_j and F_i(p̂).
pub fn feasibility_report(
    solution: &GrdipSolution,
    affine: &[AffineVisitConstraint],
    convex: &[ConvexConstraintSpec],
) -> (Vec<f64>, Vec<f64>) {
    let p = &solution.p_hat.p;
    (
        affine.iter().map(|a| a.violation(p)).collect(),
        convex.iter().map(|c| c.evaluate(p)).collect(),
    )
}
