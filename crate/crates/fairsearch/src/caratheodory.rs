//! Several affine constraints at once: the multi-dimensional dual, a linear
//! optimisation oracle over the slack polytope at λ*, the ellipsoid-based
//! exact Carathéodory search (EEC), convex weight recovery, and the
//! inequality-to-equality reduction with dummy vertices.

use std::cell::Cell;

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::constrained::{
    lambda_bound, slack, AffineConstraint, DualAdjustedInstance, PolicyAtom, RandomizedIndexPolicy, Sense,
};
use crate::error::{invalid, Error, Result};
use crate::pandora::{CoefTable, IndexPolicy, PandoraInstance, TieBreakRule};
use crate::tol;

/// Constraint data prepared for repeated evaluation.
#[derive(Clone, Debug)]
pub struct MultiProblem {
    pub instance: PandoraInstance,
    pub constraints: Vec<AffineConstraint>,
    pub tables: Vec<CoefTable>,
    pub b: Vec<f64>,
    pub cap: f64,
}

/// One evaluated deterministic policy.
#[derive(Clone, Debug)]
pub struct Vertex {
    pub slack: Vec<f64>,
    pub utility: f64,
    pub rule: TieBreakRule,
    pub policy: IndexPolicy,
}

impl MultiProblem {
    pub fn new(instance: &PandoraInstance, constraints: &[AffineConstraint]) -> Result<Self> {
        if constraints.is_empty() {
            return invalid("at least one constraint is required");
        }
        let tables = constraints
            .iter()
            .map(|c| c.table(instance))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            instance: instance.clone(),
            constraints: constraints.to_vec(),
            tables,
            b: constraints.iter().map(|c| c.b).collect(),
            cap: tol::ENUM_CAP,
        })
    }

    pub fn m(&self) -> usize {
        self.tables.len()
    }

    pub fn adjusted(&self, lambda: &[f64]) -> DualAdjustedInstance {
        DualAdjustedInstance::new(&self.instance, &self.tables, lambda)
    }

    /// Exact slack vector and utility of the adjusted policy under `rule`.
    pub fn vertex(&self, lambda: &[f64], rule: TieBreakRule) -> Result<Vertex> {
        let adj = self.adjusted(lambda);
        let policy = adj.policy(&rule, &self.tables)?;
        let out = policy.evaluate_exact(self.cap)?;
        let s = self.tables.iter().zip(&self.b).map(|(t, b)| slack(t, *b, &out)).collect();
        Ok(Vertex { slack: s, utility: out.utility, rule, policy })
    }

    /// G(λ) and one subgradient (the slack of the lexicographic policy).
    pub fn dual(&self, lambda: &[f64]) -> Result<(f64, Vec<f64>)> {
        let v = self.vertex(lambda, TieBreakRule::Lexicographic)?;
        let g = v.utility + dot(lambda, &v.slack);
        Ok((g, v.slack))
    }

    /// Non-emptiness of the relaxed selection polytope under every constraint.
    pub fn relaxed_feasible(&self) -> Result<bool> {
        let n = self.instance.len();
        let mut lp = Problem::new(OptimizationDirection::Minimize);
        let x: Vec<_> = (0..n).map(|_| lp.add_var(0.0, (0.0, 1.0))).collect();
        let y: Vec<_> = (0..n).map(|_| lp.add_var(0.0, (0.0, 1.0))).collect();
        for i in 0..n {
            lp.add_constraint(&[(x[i], 1.0), (y[i], -1.0)], ComparisonOp::Le, 0.0);
        }
        let cap: Vec<_> = x.iter().map(|&v| (v, 1.0)).collect();
        lp.add_constraint(cap.as_slice(), ComparisonOp::Le, self.instance.capacity as f64);
        for (c, t) in self.constraints.iter().zip(&self.tables) {
            let mut row = Vec::with_capacity(2 * n);
            for (i, b) in self.instance.boxes.iter().enumerate() {
                let es: f64 = t.theta_s[i].iter().zip(b.dist.probs()).map(|(a, p)| a * p).sum();
                row.push((x[i], es));
                row.push((y[i], t.theta_i[i]));
            }
            let op = match c.sense {
                Sense::Eq => ComparisonOp::Eq,
                Sense::Leq => ComparisonOp::Le,
            };
            lp.add_constraint(row.as_slice(), op, c.b);
        }
        match lp.solve() {
            Ok(_) => Ok(true),
            Err(minilp::Error::Infeasible) => Ok(false),
            Err(e) => Err(Error::NonConvergence(format!("feasibility LP: {e}"))),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Outcome of the dual search in ℝ^m.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiDual {
    pub lambda: Vec<f64>,
    pub value: f64,
    /// Gap between the best value found and the cutting-plane lower bound.
    pub gap: f64,
    pub evaluations: usize,
}

/// Minimise G(λ) = max_π [U(π) + λ·Δ(π)] over λ (λ_j ≥ 0 for inequalities).
///
/// A short projected subgradient phase (1/√t steps) seeds a cutting-plane
/// model, which is then refined until its lower bound meets the best value.
pub fn minimize_dual_multi(instance: &PandoraInstance, constraints: &[AffineConstraint], tol: f64) -> Result<Vec<f64>> {
    Ok(solve_dual_multi(&MultiProblem::new(instance, constraints)?, tol)?.lambda)
}

pub fn solve_dual_multi(prob: &MultiProblem, tol: f64) -> Result<MultiDual> {
    let m = prob.m();
    let big = match lambda_bound(&prob.instance, &prob.tables) {
        Some(l) => l,
        None => {
            if prob.b.iter().zip(&prob.constraints).all(|(b, c)| *b == 0.0 || (c.sense == Sense::Leq && *b > 0.0)) {
                return Ok(MultiDual { lambda: vec![0.0; m], value: prob.dual(&vec![0.0; m])?.0, gap: 0.0, evaluations: 1 });
            }
            return Err(Error::Infeasible("all coefficients vanish".into()));
        }
    };
    let lower: Vec<f64> = prob
        .constraints
        .iter()
        .map(|c| if c.sense == Sense::Leq { 0.0 } else { -big })
        .collect();
    let project = |l: &mut Vec<f64>| {
        for j in 0..m {
            l[j] = l[j].clamp(lower[j], big);
        }
    };
    let mut cuts: Vec<(Vec<f64>, f64, Vec<f64>)> = Vec::new();
    let mut best = (f64::INFINITY, vec![0.0; m]);
    let mut lam = vec![0.0; m];
    let mut evals = 0;
    let mut record = |l: &Vec<f64>, cuts: &mut Vec<(Vec<f64>, f64, Vec<f64>)>, best: &mut (f64, Vec<f64>)| -> Result<Vec<f64>> {
        let (g, d) = prob.dual(l)?;
        evals += 1;
        if g < best.0 {
            *best = (g, l.clone());
        }
        cuts.push((l.clone(), g, d.clone()));
        Ok(d)
    };
    // Subgradient phase.
    let step0 = big / 10.0;
    for t in 1..=20 {
        let d = record(&lam, &mut cuts, &mut best)?;
        let nrm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nrm < 1e-14 {
            break;
        }
        for j in 0..m {
            lam[j] -= step0 / (t as f64).sqrt() * d[j] / nrm;
        }
        project(&mut lam);
    }
    // Cutting-plane phase.
    let mut gap = f64::INFINITY;
    for _ in 0..2000 {
        let mut lp = Problem::new(OptimizationDirection::Minimize);
        let vars: Vec<_> = (0..m).map(|j| lp.add_var(0.0, (lower[j], big))).collect();
        let tv = lp.add_var(1.0, (f64::NEG_INFINITY, f64::INFINITY));
        for (lk, gk, dk) in &cuts {
            // t − Δ_k·λ ≥ G_k − Δ_k·λ_k
            let mut row: Vec<_> = vars.iter().zip(dk).map(|(&v, &d)| (v, -d)).collect();
            row.push((tv, 1.0));
            lp.add_constraint(row.as_slice(), ComparisonOp::Ge, gk - dot(dk, lk));
        }
        let sol = lp.solve().map_err(|e| Error::NonConvergence(format!("cutting-plane LP: {e}")))?;
        let lb = sol[tv];
        let mut next: Vec<f64> = vars.iter().map(|&v| sol[v]).collect();
        if let Some(snap) = snap_vertex(&cuts, &next, lb, &lower, big) {
            next = snap;
        }
        project(&mut next);
        gap = best.0 - lb;
        if gap <= tol * (1.0 + best.0.abs()) {
            break;
        }
        let before = best.0;
        record(&next, &mut cuts, &mut best)?;
        if best.0 - lb <= tol * (1.0 + best.0.abs()) {
            gap = best.0 - lb;
            break;
        }
        if cuts.len() > 5000 || (best.0 == before && cuts.iter().rev().skip(1).any(|c| c.0 == next)) {
            break;
        }
    }
    let lam = best.1.clone();
    // A minimiser on the bound is fine when G is flat beyond it; it only
    // signals infeasibility if the relaxation agrees.
    for j in 0..m {
        if prob.constraints[j].sense == Sense::Eq && lam[j].abs() >= big * (1.0 - 1e-9) && !prob.relaxed_feasible()? {
            return Err(Error::Infeasible(format!("λ_{j} reached the bound {big}")));
        }
    }
    Ok(MultiDual { lambda: lam, value: best.0, gap, evaluations: evals })
}

/// Solve exactly for the vertex of the cutting-plane model near `approx`.
fn snap_vertex(cuts: &[(Vec<f64>, f64, Vec<f64>)], approx: &[f64], t: f64, lower: &[f64], upper: f64) -> Option<Vec<f64>> {
    let m = approx.len();
    let scale = 1.0 + t.abs();
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for (lk, gk, dk) in cuts {
        let model = gk + dot(dk, &approx.iter().zip(lk).map(|(a, b)| a - b).collect::<Vec<_>>());
        if (model - t).abs() <= 1e-7 * scale {
            // Δ_k·λ − t = Δ_k·λ_k − G_k
            let mut r = dk.clone();
            r.push(-1.0);
            rows.push((r, dot(dk, lk) - gk));
        }
    }
    for j in 0..m {
        for bound in [lower[j], upper] {
            if (approx[j] - bound).abs() <= 1e-7 * (1.0 + bound.abs()) {
                let mut r = vec![0.0; m + 1];
                r[j] = 1.0;
                rows.push((r, bound));
            }
        }
    }
    if rows.len() < m + 1 {
        return None;
    }
    let a = DMatrix::from_fn(rows.len(), m + 1, |i, j| rows[i].0[j]);
    let b = DVector::from_fn(rows.len(), |i, _| rows[i].1);
    let svd = a.clone().svd(true, true);
    if svd.rank(1e-10) < m + 1 {
        return None;
    }
    let x = svd.solve(&b, 1e-12).ok()?;
    let res = (&a * &x - &b).amax();
    if res > 1e-8 * scale {
        return None;
    }
    let out: Vec<f64> = (0..m).map(|j| x[j]).collect();
    if out.iter().zip(approx).any(|(a, b)| (a - b).abs() > 1e-5 * (1.0 + b.abs())) {
        return None;
    }
    Some(out)
}

/// Linear optimisation over the slack polytope at λ*.
pub struct SlackVertexOracle<'a> {
    pub problem: &'a MultiProblem,
    pub lambda: Vec<f64>,
    calls: Cell<usize>,
}

impl<'a> SlackVertexOracle<'a> {
    pub fn new(problem: &'a MultiProblem, lambda: Vec<f64>) -> Self {
        Self { problem, lambda, calls: Cell::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }

    /// Vertex maximising ω·Δ among λ*-optimal policies.
    pub fn lin_oracle(&self, omega: &[f64]) -> Result<Vertex> {
        self.ext_lin_oracle(&[omega.to_vec()])
    }

    /// Vertex maximising ω₁·Δ, then ω₂·Δ among those maximisers, and so on.
    pub fn ext_lin_oracle(&self, omegas: &[Vec<f64>]) -> Result<Vertex> {
        self.calls.set(self.calls.get() + 1);
        let rule = if omegas.is_empty() {
            TieBreakRule::Lexicographic
        } else {
            TieBreakRule::LexPerturbation { omegas: omegas.to_vec() }
        };
        self.problem.vertex(&self.lambda, rule)
    }
}

/// Ellipsoid {c + P^{1/2} u : ‖u‖ ≤ 1} living in the span of `basis`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: DVector<f64>,
    pub shape: DMatrix<f64>,
    /// Orthonormal basis (columns) of the active subspace.
    pub basis: DMatrix<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CutOutcome {
    /// The hyperplane contains the ellipsoid; nothing changed.
    Contained,
    /// Genuine cut with the given volume ratio (within the active subspace).
    Cut { volume_ratio: f64 },
}

impl Ellipsoid {
    /// Unit ball of the orthogonal complement of `omega` (orthonormal rows).
    pub fn projected_ball(m: usize, omega: &[DVector<f64>]) -> Self {
        let mut proj = DMatrix::<f64>::identity(m, m);
        for w in omega {
            proj -= w * w.transpose();
        }
        let basis = orthonormal_columns(&proj);
        let shape = &basis * basis.transpose();
        Self { center: DVector::zeros(m), shape, basis }
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Largest semi-axis length.
    pub fn radius(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        let e = SymmetricEigen::new(self.shape.clone());
        e.eigenvalues.max().max(0.0).sqrt()
    }

    /// Direction of the longest semi-axis.
    pub fn longest_axis(&self) -> DVector<f64> {
        let e = SymmetricEigen::new(self.shape.clone());
        let k = e.eigenvalues.imax();
        e.eigenvectors.column(k).into_owned()
    }

    /// Semi-axis lengths within the active subspace, descending.
    pub fn semi_axes(&self) -> Vec<f64> {
        let r = self.dim();
        let local = self.basis.transpose() * &self.shape * &self.basis;
        let e = SymmetricEigen::new(local);
        let mut v: Vec<f64> = e.eigenvalues.iter().map(|x| x.max(0.0).sqrt()).collect();
        v.sort_by(|a, b| b.total_cmp(a));
        v.truncate(r);
        v
    }

    /// Volume up to the unit-ball constant of the active dimension.
    pub fn log_volume(&self) -> f64 {
        self.semi_axes().iter().map(|a| a.ln()).sum()
    }

    /// Width of the ellipsoid along the unit direction of `normal`.
    pub fn width(&self, normal: &DVector<f64>) -> f64 {
        let n = normal.norm();
        if n == 0.0 {
            return 0.0;
        }
        let u = normal / n;
        (u.transpose() * &self.shape * &u)[(0, 0)].max(0.0).sqrt()
    }
}

fn orthonormal_columns(proj: &DMatrix<f64>) -> DMatrix<f64> {
    let m = proj.nrows();
    let e = SymmetricEigen::new(proj.clone());
    let cols: Vec<DVector<f64>> = (0..m)
        .filter(|&k| e.eigenvalues[k] > 0.5)
        .map(|k| e.eigenvectors.column(k).into_owned())
        .collect();
    if cols.is_empty() {
        return DMatrix::zeros(m, 0);
    }
    DMatrix::from_columns(&cols)
}

/// Minimal ellipsoid containing E ∩ {x : normal·(x − center) ≤ 0}.
pub fn ellipsoid_halfspace_update(e: &Ellipsoid, normal: &DVector<f64>, flat_tol: f64) -> (Ellipsoid, CutOutcome) {
    let r = e.dim();
    let width = e.width(normal);
    if r == 0 || width <= flat_tol {
        return (e.clone(), CutOutcome::Contained);
    }
    let pg = &e.shape * normal;
    let gpg = normal.dot(&pg);
    let b = pg / gpg.sqrt();
    let rf = r as f64;
    let center = &e.center - &b / (rf + 1.0);
    let shape = if r == 1 {
        &e.shape - 0.75 * &b * b.transpose()
    } else {
        (rf * rf / (rf * rf - 1.0)) * (&e.shape - (2.0 / (rf + 1.0)) * &b * b.transpose())
    };
    let shape = 0.5 * (&shape + shape.transpose());
    let next = Ellipsoid { center, shape, basis: e.basis.clone() };
    let ratio = (next.log_volume() - e.log_volume()).exp();
    (next, CutOutcome::Cut { volume_ratio: ratio })
}

/// Diagnostics and output of EEC.
#[derive(Clone, Debug)]
pub struct EecResult<H> {
    pub points: Vec<(Vec<f64>, H)>,
    pub oracle_calls: usize,
    /// (active dimension, volume ratio) of each genuine cut.
    pub cuts: Vec<(usize, f64)>,
    /// Directions factored out, in order.
    pub omega: Vec<Vec<f64>>,
}

/// Ellipsoid-based exact Carathéodory: oracle queries whose returned
/// points cover the origin.
///
/// `oracle(dirs)` must return a lexicographic maximiser of dirs over the
/// polytope. `scale` bounds the norm of polytope points and sets the zero
/// test. The search also stops as soon as the current points verifiably
/// cover the origin.
pub fn eec<H: Clone>(
    m: usize,
    mut oracle: impl FnMut(&[Vec<f64>]) -> Result<(Vec<f64>, H)>,
    scale: f64,
    tol: f64,
) -> Result<EecResult<H>> {
    let zero_tol = 1e-9 * scale.max(1e-300);
    let flat_tol = 1e-9;
    let mut omega: Vec<DVector<f64>> = Vec::new();
    let mut calls = 0usize;
    let mut cuts = Vec::new();
    let mut ask = |dirs: &[DVector<f64>], calls: &mut usize| -> Result<(Vec<f64>, H)> {
        *calls += 1;
        let d: Vec<Vec<f64>> = dirs.iter().map(|v| v.iter().copied().collect()).collect();
        oracle(&d)
    };
    let out = |points: Vec<(Vec<f64>, H)>, calls: usize, cuts: Vec<(usize, f64)>, omega: &[DVector<f64>]| EecResult {
        points,
        oracle_calls: calls,
        cuts,
        omega: omega.iter().map(|v| v.iter().copied().collect()).collect(),
    };
    for _outer in 0..=m {
        let mut e = Ellipsoid::projected_ball(m, &omega);
        let mut pts: Vec<(Vec<f64>, H)> = Vec::new();
        let mut pushed = false;
        for _inner in 0..10_000 {
            if e.radius() < tol {
                return Ok(out(pts, calls, cuts, &omega));
            }
            let w = if e.center.norm() >= tol { e.center.clone() } else { e.longest_axis() };
            let mut dirs = omega.clone();
            dirs.push(w.clone());
            let (v, h) = ask(&dirs, &mut calls)?;
            let vv = DVector::from_vec(v.clone());
            if vv.norm() <= zero_tol {
                return Ok(out(vec![(v, h)], calls, cuts, &omega));
            }
            if !pts.iter().any(|(p, _)| p.iter().zip(&v).all(|(a, b)| (a - b).abs() <= zero_tol)) {
                pts.push((v.clone(), h));
                let only: Vec<Vec<f64>> = pts.iter().map(|p| p.0.clone()).collect();
                if covers_origin(&only, zero_tol) {
                    return Ok(out(pts, calls, cuts, &omega));
                }
            }
            let (next, outcome) = ellipsoid_halfspace_update(&e, &vv, flat_tol);
            match outcome {
                CutOutcome::Cut { volume_ratio } => {
                    cuts.push((e.dim(), volume_ratio));
                    e = next;
                }
                CutOutcome::Contained => {
                    // E lies in the hyperplane: factor out a direction whose
                    // maximum over the current face is zero.
                    let mut cands = Vec::new();
                    if w.norm() > 1e-6 {
                        cands.push(w.clone() / w.norm());
                    }
                    let ax = e.longest_axis();
                    cands.push(ax.clone());
                    cands.push(-ax);
                    let mut chosen = None;
                    for c in cands {
                        let c = orthogonalise(&c, &omega);
                        if c.norm() < 1e-9 {
                            continue;
                        }
                        let mut d = omega.clone();
                        d.push(c.clone());
                        let (u, _) = ask(&d, &mut calls)?;
                        if c.dot(&DVector::from_vec(u)) <= zero_tol {
                            chosen = Some(c);
                            break;
                        }
                    }
                    match chosen {
                        Some(c) => {
                            omega.push(c);
                            pushed = true;
                            break;
                        }
                        None => return Err(Error::NonConvergence("EEC found no supporting direction on a flat ellipsoid".into())),
                    }
                }
            }
        }
        if !pushed {
            return Err(Error::NonConvergence("EEC inner loop exceeded 10000 iterations".into()));
        }
    }
    Err(Error::NonConvergence("EEC exhausted all dimensions".into()))
}

fn orthogonalise(v: &DVector<f64>, basis: &[DVector<f64>]) -> DVector<f64> {
    let mut u = v.clone();
    for b in basis {
        u -= b * b.dot(&u);
    }
    let n = u.norm();
    if n > 0.0 { u / n } else { u }
}

fn covers_origin(points: &[Vec<f64>], tol: f64) -> bool {
    matches!(weight_lp(points), Ok((_, r)) if r <= tol)
}

/// Minimise ‖Σ w_i p_i‖₁ over the simplex; returns (weights, residual).
fn weight_lp(points: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    let k = points.len();
    let m = points[0].len();
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let w: Vec<_> = (0..k).map(|_| lp.add_var(0.0, (0.0, f64::INFINITY))).collect();
    let sp: Vec<_> = (0..m).map(|_| lp.add_var(1.0, (0.0, f64::INFINITY))).collect();
    let sm: Vec<_> = (0..m).map(|_| lp.add_var(1.0, (0.0, f64::INFINITY))).collect();
    for j in 0..m {
        let mut row: Vec<_> = (0..k).map(|i| (w[i], points[i][j])).collect();
        row.push((sp[j], 1.0));
        row.push((sm[j], -1.0));
        lp.add_constraint(row.as_slice(), ComparisonOp::Eq, 0.0);
    }
    let ones: Vec<_> = w.iter().map(|&v| (v, 1.0)).collect();
    lp.add_constraint(ones.as_slice(), ComparisonOp::Eq, 1.0);
    let sol = lp.solve().map_err(|e| Error::NonConvergence(format!("weight LP: {e}")))?;
    let mut wt: Vec<f64> = w.iter().map(|&v| sol[v].max(0.0)).collect();
    let s: f64 = wt.iter().sum();
    wt.iter_mut().for_each(|x| *x /= s);
    let r = residual(points, &wt);
    Ok((wt, r))
}

fn residual(points: &[Vec<f64>], w: &[f64]) -> f64 {
    let m = points[0].len();
    (0..m)
        .map(|j| points.iter().zip(w).map(|(p, x)| p[j] * x).sum::<f64>().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Convex weights putting the origin in the hull of `points`, with
/// residual ‖Σ w_i p_i‖₂ ≤ tol.
pub fn convex_weights(points: &[Vec<f64>], tol: f64) -> Result<Vec<f64>> {
    if points.is_empty() {
        return invalid("no points");
    }
    let (w, r) = weight_lp(points)?;
    if r <= tol {
        return Ok(polish(points, w));
    }
    let p = polish(points, w);
    let r2 = residual(points, &p);
    if r2 <= tol {
        return Ok(p);
    }
    Err(Error::Coverage { residual: r.min(r2) })
}

/// Re-solve the equality system on the LP support for full precision.
fn polish(points: &[Vec<f64>], w: Vec<f64>) -> Vec<f64> {
    let supp: Vec<usize> = (0..w.len()).filter(|&i| w[i] > 1e-12).collect();
    if supp.is_empty() {
        return w;
    }
    let m = points[0].len();
    let a = DMatrix::from_fn(m + 1, supp.len(), |j, c| if j < m { points[supp[c]][j] } else { 1.0 });
    let mut rhs = DVector::zeros(m + 1);
    rhs[m] = 1.0;
    let Ok(x) = a.svd(true, true).solve(&rhs, 1e-14) else { return w };
    if x.iter().any(|v| *v < -1e-12 || !v.is_finite()) {
        return w;
    }
    let mut out = vec![0.0; w.len()];
    for (c, &i) in supp.iter().enumerate() {
        out[i] = x[c].max(0.0);
    }
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    if residual(points, &out) <= residual(points, &w) { out } else { w }
}

/// Mixture from several affine constraints.
#[derive(Clone, Debug)]
pub struct MultiSolution {
    pub policy: RandomizedIndexPolicy,
    pub lambda: Vec<f64>,
    /// Slack vectors of the atoms, aligned with `policy.atoms`.
    pub vertices: Vec<Vec<f64>>,
    pub oracle_calls: usize,
    pub volume_ratios: Vec<(usize, f64)>,
}

/// Exact solution under a list of equality and `leq` constraints.
pub fn solve_multi_affine(instance: &PandoraInstance, constraints: &[AffineConstraint], tol: f64) -> Result<MultiSolution> {
    let prob = MultiProblem::new(instance, constraints)?;
    for c in constraints {
        c.warn_normalisation();
    }
    if !prob.relaxed_feasible()? {
        return Err(Error::Infeasible("the relaxed selection polytope misses the constraints".into()));
    }
    let dual = solve_dual_multi(&prob, 1e-12)?;
    let lambda = dual.lambda.clone();
    let m = prob.m();
    // Dummy vertex −e_j for each inequality whose multiplier is zero.
    let dummies: Vec<usize> = (0..m)
        .filter(|&j| constraints[j].sense == Sense::Leq && lambda[j].abs() <= 1e-9)
        .collect();
    let oracle = SlackVertexOracle::new(&prob, lambda.clone());
    let first = oracle.ext_lin_oracle(&[])?;
    let scale = first.slack.iter().map(|x| x.abs()).fold(1.0, f64::max);
    let dummy_scale = scale;
    let lexcmp = |a: &[f64], b: &[f64]| -> std::cmp::Ordering {
        for (x, y) in a.iter().zip(b) {
            if (x - y).abs() > 1e-10 * (1.0 + x.abs().max(y.abs())) {
                return x.total_cmp(y);
            }
        }
        std::cmp::Ordering::Equal
    };
    let res = eec(
        m,
        |dirs: &[Vec<f64>]| -> Result<(Vec<f64>, Option<Vertex>)> {
            let v = oracle.ext_lin_oracle(dirs)?;
            let score = |p: &[f64]| dirs.iter().map(|d| dot(d, p)).collect::<Vec<_>>();
            let mut best = (v.slack.clone(), Some(v));
            let mut best_score = score(&best.0);
            for &j in &dummies {
                let mut p = vec![0.0; m];
                p[j] = -dummy_scale;
                let s = score(&p);
                if lexcmp(&s, &best_score).is_gt() {
                    best = (p, None);
                    best_score = s;
                }
            }
            Ok(best)
        },
        scale,
        tol::EEC_RADIUS,
    )?;
    let pts: Vec<Vec<f64>> = res.points.iter().map(|p| p.0.clone()).collect();
    let w = convex_weights(&pts, tol.max(tol::WEIGHT_RESIDUAL) * scale)?;
    let mut atoms = Vec::new();
    let mut vertices = Vec::new();
    let mut total = 0.0;
    for ((p, h), wi) in res.points.iter().zip(&w) {
        if let Some(v) = h {
            if *wi > 0.0 {
                total += wi;
                vertices.push(p.clone());
                atoms.push(PolicyAtom {
                    adjusted: prob.adjusted(&lambda),
                    rule: v.rule.clone(),
                    weight: *wi,
                    policy: v.policy.clone(),
                });
            }
        }
    }
    if atoms.is_empty() || total <= 0.0 {
        return Err(Error::Coverage { residual: f64::NAN });
    }
    for a in &mut atoms {
        a.weight /= total;
    }
    Ok(MultiSolution {
        policy: RandomizedIndexPolicy { lambda: lambda.clone(), atoms, exact_dual: true },
        lambda,
        vertices,
        oracle_calls: oracle.calls(),
        volume_ratios: res.cuts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_disk_cut() {
        let e = Ellipsoid::projected_ball(2, &[]);
        let (n, o) = ellipsoid_halfspace_update(&e, &DVector::from_vec(vec![1.0, 0.0]), 1e-12);
        assert!(matches!(o, CutOutcome::Cut { .. }));
        assert!((n.center[0] + 1.0 / 3.0).abs() < 1e-12 && n.center[1].abs() < 1e-12);
        let ax = n.semi_axes();
        assert!((ax[0] - 2.0 / 3f64.sqrt()).abs() < 1e-12);
        assert!((ax[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_normal_is_contained() {
        let w = DVector::from_vec(vec![0.0, 1.0]);
        let e = Ellipsoid::projected_ball(2, &[w]);
        assert_eq!(e.dim(), 1);
        let (n, o) = ellipsoid_halfspace_update(&e, &DVector::from_vec(vec![0.0, 3.0]), 1e-12);
        assert_eq!(o, CutOutcome::Contained);
        assert_eq!(n, e);
    }

    #[test]
    fn weights_examples() {
        let w = convex_weights(&[vec![1.0, 0.0], vec![-1.0, 0.0]], 1e-12).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-12);
        let w = convex_weights(&[vec![2.0, 0.0], vec![-1.0, 0.0]], 1e-12).unwrap();
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-12 && (w[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!(matches!(
            convex_weights(&[vec![1.9, 1.0], vec![-1.8, -1.4]], 1e-9),
            Err(Error::Coverage { .. })
        ));
    }

    #[test]
    fn eec_cross_polytope() {
        let verts = [vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let res = eec(
            2,
            |dirs: &[Vec<f64>]| {
                let mut best = 0;
                for k in 1..verts.len() {
                    let a: Vec<f64> = dirs.iter().map(|d| dot(d, &verts[k])).collect();
                    let b: Vec<f64> = dirs.iter().map(|d| dot(d, &verts[best])).collect();
                    if a.iter().zip(&b).find(|(x, y)| (*x - *y).abs() > 1e-12).map_or(false, |(x, y)| x > y) {
                        best = k;
                    }
                }
                Ok((verts[best].clone(), best))
            },
            1.0,
            1e-7,
        )
        .unwrap();
        assert!(res.points.len() <= 4);
        let pts: Vec<Vec<f64>> = res.points.iter().map(|p| p.0.clone()).collect();
        convex_weights(&pts, 1e-9).unwrap();
    }

    pub(crate) fn counterexample() -> (PandoraInstance, Vec<AffineConstraint>) {
        use crate::pandora::{PandoraBox, ValueDistribution};
        let b = vec![
            PandoraBox::new(1, ValueDistribution::point(6.0), 2.0),
            PandoraBox::new(2, ValueDistribution::new(vec![2.0, 14.0], vec![0.9, 0.1]).unwrap(), 1.0),
            PandoraBox::new(3, ValueDistribution::new(vec![3.0, 9.0], vec![0.2, 0.8]).unwrap(), 4.0),
        ];
        let inst = PandoraInstance::new(b, 1).unwrap();
        let th = vec![-1.0, -1.0, 2.0];
        let cs = vec![
            AffineConstraint::scalar(vec![0.0; 3], th.clone(), 0.0, Sense::Eq),
            AffineConstraint::scalar(th, vec![0.0; 3], 0.0, Sense::Eq),
        ];
        (inst, cs)
    }

    #[test]
    fn counterexample_vertices_and_mixture() {
        let (inst, cs) = counterexample();
        let prob = MultiProblem::new(&inst, &cs).unwrap();
        let lam = solve_dual_multi(&prob, 1e-12).unwrap().lambda;
        assert!(lam.iter().all(|x| x.abs() < 1e-9), "{lam:?}");
        let o = SlackVertexOracle::new(&prob, vec![0.0, 0.0]);
        let v = o.lin_oracle(&[1.0, 1.0]).unwrap().slack;
        assert!((v[0] - 1.9).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9, "{v:?}");
        let v = o.lin_oracle(&[-1.0, -1.0]).unwrap().slack;
        assert!((v[0] + 1.8).abs() < 1e-9 && (v[1] + 1.4).abs() < 1e-9, "{v:?}");
        let sol = solve_multi_affine(&inst, &cs, 1e-9).unwrap();
        assert!(sol.policy.atoms.len() >= 3);
        let out = sol.policy.evaluate_exact(1e7).unwrap();
        for (c, t) in cs.iter().zip(&prob.tables) {
            assert!(slack(t, c.b, &out).abs() < 1e-9);
        }
        let opt = crate::pandora::brute_force_optimal_value(&inst).unwrap();
        assert!((out.utility - opt).abs() < 1e-9);
    }
}
