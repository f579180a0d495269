//! Test oracles written independently of the library's solvers, plus
//! random instance generators.

#![allow(dead_code)]

use std::collections::HashMap;

use fairsearch::caratheodory::{eec, EecResult};
use fairsearch::constrained::{AffineConstraint, Sense};
use fairsearch::grdip::{AffineVisitConstraint, ConvexConstraintSpec};
use fairsearch::jms::{JmsInstance, MarkovChain};
use fairsearch::pandora::{IndexPolicy, PandoraBox, PandoraInstance, Realization, ValueDistribution};
use fairsearch::tol::EEC_RADIUS;
use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const UTIL_TIE: f64 = 1e-9;

/// Plain data view of a Pandora instance with per-action slack contributions.
#[derive(Clone, Debug)]
pub struct Tiny {
    pub values: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
    pub costs: Vec<f64>,
    pub k: usize,
    /// Slack change when box i is selected at atom j.
    pub sel: Vec<Vec<f64>>,
    /// Slack change when box i is opened.
    pub insp: Vec<f64>,
}

impl Tiny {
    pub fn new(inst: &PandoraInstance, c: Option<&AffineConstraint>) -> Self {
        let n = inst.len();
        let values: Vec<Vec<f64>> = inst.boxes.iter().map(|b| b.dist.support().to_vec()).collect();
        let probs: Vec<Vec<f64>> = inst.boxes.iter().map(|b| b.dist.probs().to_vec()).collect();
        let (sel, insp) = match c {
            None => (values.iter().map(|v| vec![0.0; v.len()]).collect(), vec![0.0; n]),
            Some(c) => {
                let t = c.table(inst).unwrap();
                (
                    t.theta_s.iter().map(|r| r.iter().map(|x| -x).collect()).collect(),
                    t.theta_i.iter().map(|x| -x).collect(),
                )
            }
        };
        Self { values, probs, costs: inst.costs(), k: inst.capacity, sel, insp }
    }
}

/// Among all optimal adaptive policies, the best utility and the largest
/// (`maximize`) or smallest slack contribution. b is not included.
pub fn lex_dp(t: &Tiny, maximize: bool) -> (f64, f64) {
    let mut memo = HashMap::new();
    let st = vec![0u8; t.values.len()];
    lex_rec(t, &st, 0, maximize, &mut memo)
}

fn lex_rec(t: &Tiny, st: &[u8], n_sel: usize, maximize: bool, memo: &mut HashMap<Vec<u8>, (f64, f64)>) -> (f64, f64) {
    if n_sel == t.k {
        return (0.0, 0.0);
    }
    if let Some(v) = memo.get(st) {
        return *v;
    }
    let mut opts = vec![(0.0, 0.0)];
    let mut next = st.to_vec();
    for i in 0..st.len() {
        match st[i] {
            0 => {
                let (mut u, mut s) = (-t.costs[i], t.insp[i]);
                for (j, &p) in t.probs[i].iter().enumerate() {
                    next[i] = 1 + j as u8;
                    let (cu, cs) = lex_rec(t, &next, n_sel, maximize, memo);
                    u += p * cu;
                    s += p * cs;
                }
                next[i] = 0;
                opts.push((u, s));
            }
            255 => {}
            a => {
                let j = (a - 1) as usize;
                next[i] = 255;
                let (cu, cs) = lex_rec(t, &next, n_sel + 1, maximize, memo);
                next[i] = a;
                opts.push((t.values[i][j] + cu, t.sel[i][j] + cs));
            }
        }
    }
    let best = opts.iter().map(|o| o.0).fold(f64::NEG_INFINITY, f64::max);
    let pick = opts
        .iter()
        .filter(|o| o.0 >= best - UTIL_TIE)
        .map(|o| o.1)
        .fold(if maximize { f64::NEG_INFINITY } else { f64::INFINITY }, |a, b| if maximize { a.max(b) } else { a.min(b) });
    memo.insert(st.to_vec(), (best, pick));
    (best, pick)
}

/// Oracle view of the λ-adjusted instance.
pub fn adjusted_tiny(inst: &PandoraInstance, c: &AffineConstraint, lambda: f64) -> Tiny {
    let mut t = Tiny::new(inst, Some(c));
    for i in 0..t.values.len() {
        for j in 0..t.values[i].len() {
            // sel holds −θ^S, insp holds −E[θ^I].
            t.values[i][j] += lambda * t.sel[i][j];
        }
        t.costs[i] -= lambda * t.insp[i];
    }
    t
}

pub fn permutations(ids: &[u32]) -> Vec<Vec<u32>> {
    if ids.len() <= 1 {
        return vec![ids.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..ids.len() {
        let mut rest = ids.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

pub fn pandora_opt(inst: &PandoraInstance) -> f64 {
    lex_dp(&Tiny::new(inst, None), true).0
}

/// Exact utility and slack of a deterministic policy, by running it on every
/// realization. Utility uses the original values and costs.
pub fn enumerate_policy(inst: &PandoraInstance, pol: &IndexPolicy, c: Option<&AffineConstraint>) -> (f64, f64) {
    let t = Tiny::new(inst, c);
    let b = c.map_or(0.0, |c| c.b);
    let n = inst.len();
    let mut atoms = vec![0usize; n];
    let (mut eu, mut es) = (0.0, 0.0);
    loop {
        let p: f64 = (0..n).map(|i| t.probs[i][atoms[i]]).product();
        if p > 0.0 {
            let out = pol.run(&Realization::new(inst, atoms.clone()).unwrap());
            let (mut u, mut s) = (0.0, b);
            for id in &out.inspected {
                let i = inst.position(*id).unwrap();
                u -= t.costs[i];
                s += t.insp[i];
            }
            for id in &out.selected {
                let i = inst.position(*id).unwrap();
                u += t.values[i][atoms[i]];
                s += t.sel[i][atoms[i]];
            }
            eu += p * u;
            es += p * s;
        }
        let mut i = 0;
        loop {
            if i == n {
                return (eu, es);
            }
            atoms[i] += 1;
            if atoms[i] < t.values[i].len() {
                break;
            }
            atoms[i] = 0;
            i += 1;
        }
    }
}

/// Reservation value by bisection on E[(v − σ)⁺] = c.
pub fn reservation_bisect(values: &[f64], probs: &[f64], cost: f64) -> f64 {
    let excess = |s: f64| values.iter().zip(probs).map(|(v, p)| p * (v - s).max(0.0)).sum::<f64>();
    let hi0 = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if cost <= 0.0 {
        return hi0;
    }
    let (mut lo, mut hi) = (hi0 - cost - 1.0, hi0);
    while excess(lo) < cost {
        lo -= 2.0 * (hi - lo);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if excess(mid) > cost {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Optimal JMS value and the expected visit vector of one optimal policy.
pub fn jms_opt(inst: &JmsInstance) -> (f64, Vec<f64>) {
    let mut memo = HashMap::new();
    let st: Vec<usize> = inst.chains.iter().map(|c| c.start).collect();
    jms_rec(inst, &st, 0, &mut memo)
}

fn offsets(inst: &JmsInstance) -> Vec<usize> {
    let mut off = Vec::new();
    let mut o = 0;
    for c in &inst.chains {
        off.push(o);
        o += c.states;
    }
    off
}

fn jms_rec(inst: &JmsInstance, st: &[usize], n_sel: usize, memo: &mut HashMap<Vec<usize>, (f64, Vec<f64>)>) -> (f64, Vec<f64>) {
    let dim: usize = inst.chains.iter().map(|c| c.states).sum();
    if n_sel == inst.capacity {
        return (0.0, vec![0.0; dim]);
    }
    if let Some(v) = memo.get(st) {
        return v.clone();
    }
    let off = offsets(inst);
    let mut best = (0.0, vec![0.0; dim]);
    for (i, c) in inst.chains.iter().enumerate() {
        let s = st[i];
        if c.terminal.contains(&s) {
            continue;
        }
        let stay = c.a[s][s];
        let m = 1.0 / (1.0 - stay);
        let mut val = c.r[s] * m;
        let mut vis = vec![0.0; dim];
        vis[off[i] + s] += m;
        for (t, &p) in c.a[s].iter().enumerate() {
            if t == s || p == 0.0 {
                continue;
            }
            let w = p * m;
            let mut next = st.to_vec();
            next[i] = t;
            let (cv, cvis) = if c.terminal.contains(&t) {
                vis[off[i] + t] += w;
                val += w * c.r[t];
                jms_rec(inst, &next, n_sel + 1, memo)
            } else {
                jms_rec(inst, &next, n_sel, memo)
            };
            val += w * cv;
            for (a, b) in vis.iter_mut().zip(&cvis) {
                *a += w * b;
            }
        }
        if val > best.0 + 1e-12 {
            best = (val, vis);
        }
    }
    memo.insert(st.to_vec(), best.clone());
    best
}

/// Visit vectors of every deterministic Markov policy (deduplicated). Their
/// convex hull is the visit polytope. Chains must have no self-loops.
pub fn all_policy_visits(inst: &JmsInstance) -> Vec<Vec<f64>> {
    let mut memo = HashMap::new();
    let st: Vec<usize> = inst.chains.iter().map(|c| c.start).collect();
    visits_rec(inst, &st, 0, &mut memo)
}

fn dedup(mut v: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let key = |x: &Vec<f64>| x.iter().map(|y| (y * 1e9).round() as i64).collect::<Vec<_>>();
    v.sort_by_key(key);
    v.dedup_by(|a, b| key(a) == key(b));
    v
}

fn visits_rec(inst: &JmsInstance, st: &[usize], n_sel: usize, memo: &mut HashMap<Vec<usize>, Vec<Vec<f64>>>) -> Vec<Vec<f64>> {
    let dim: usize = inst.chains.iter().map(|c| c.states).sum();
    if n_sel == inst.capacity {
        return vec![vec![0.0; dim]];
    }
    if let Some(v) = memo.get(st) {
        return v.clone();
    }
    let off = offsets(inst);
    let mut out = vec![vec![0.0; dim]];
    for (i, c) in inst.chains.iter().enumerate() {
        let s = st[i];
        if c.terminal.contains(&s) {
            continue;
        }
        assert_eq!(c.a[s][s], 0.0, "self-loops are not supported here");
        let mut base = vec![0.0; dim];
        base[off[i] + s] = 1.0;
        let mut acc = vec![base];
        for (t, &p) in c.a[s].iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let mut next = st.to_vec();
            next[i] = t;
            let term = c.terminal.contains(&t);
            let sub = visits_rec(inst, &next, n_sel + term as usize, memo);
            let mut grown = Vec::with_capacity(acc.len() * sub.len());
            for a in &acc {
                for x in &sub {
                    let mut y = a.clone();
                    if term {
                        y[off[i] + t] += p;
                    }
                    for (yy, xx) in y.iter_mut().zip(x) {
                        *yy += p * xx;
                    }
                    grown.push(y);
                }
            }
            acc = dedup(grown);
        }
        out.extend(acc);
    }
    let out = dedup(out);
    memo.insert(st.to_vec(), out.clone());
    out
}

pub fn config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config { cases, failure_persistence: None, ..Default::default() }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn grid(r: &mut ChaCha8Rng, lo: f64, hi: f64, step: f64) -> f64 {
    let k = ((hi - lo) / step).round() as i64;
    lo + step * r.gen_range(0..=k) as f64
}

/// Small random Pandora instance on a coarse grid (so ties happen).
pub fn random_pandora(seed: u64, max_boxes: usize) -> PandoraInstance {
    let mut r = rng(seed);
    let n = r.gen_range(2..=max_boxes);
    let boxes = (0..n)
        .map(|i| {
            let m = r.gen_range(1..=3);
            let mut vals: Vec<f64> = (0..m).map(|_| grid(&mut r, 0.0, 10.0, 0.5)).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals.dedup();
            let w: Vec<f64> = vals.iter().map(|_| r.gen_range(1..=4) as f64).collect();
            let tot: f64 = w.iter().sum();
            let probs = w.iter().map(|x| x / tot).collect();
            let cost = if r.gen_bool(0.15) { 0.0 } else { grid(&mut r, 0.25, 3.0, 0.25) };
            let g = if i < n / 2 { "X" } else { "Y" };
            PandoraBox::new(i as u32 + 1, ValueDistribution::new(vals, probs).unwrap(), cost).with_group(g)
        })
        .collect();
    let k = r.gen_range(1..=n.min(2));
    PandoraInstance::new(boxes, k).unwrap()
}

/// Boxes sharing reservation value 4: low atom below, high atom above.
pub fn tied_pandora(seed: u64) -> PandoraInstance {
    let mut r = rng(seed);
    let n = r.gen_range(3..=4);
    let boxes = (0..n)
        .map(|i| {
            let lo = r.gen_range(1..=3) as f64;
            let hi = r.gen_range(5..=7) as f64;
            let p = [0.25, 0.5, 0.75][r.gen_range(0..3)];
            let cost = p * (hi - 4.0);
            PandoraBox::new(i as u32 + 1, ValueDistribution::new(vec![lo, hi], vec![1.0 - p, p]).unwrap(), cost)
        })
        .collect();
    PandoraInstance::new(boxes, r.gen_range(1..=2)).unwrap()
}

/// Random scalar constraint on small integer coefficients.
pub fn random_constraint(seed: u64, n: usize, sense: Sense) -> AffineConstraint {
    let mut r = rng(seed ^ 0x9e37_79b9);
    let ts = (0..n).map(|_| r.gen_range(-2..=2) as f64).collect();
    let ti = (0..n).map(|_| r.gen_range(-2..=2) as f64 * 0.5).collect();
    AffineConstraint::scalar(ts, ti, 0.0, sense)
}

/// Random absorbing chain: non-terminal states in topological order, some
/// self-loops and positive rewards (free-lunch states).
pub fn random_chain(r: &mut ChaCha8Rng, max_nt: usize, self_loops: bool) -> MarkovChain {
    let nt = r.gen_range(1..=max_nt);
    let tt = r.gen_range(1..=2);
    let n = nt + tt;
    let mut a = vec![vec![0.0; n]; n];
    let mut rew = vec![0.0; n];
    for s in 0..nt {
        let mut w = vec![0.0; n];
        for t in (s + 1)..n {
            if r.gen_bool(0.7) {
                w[t] = r.gen_range(1..=4) as f64;
            }
        }
        if w.iter().all(|x| *x == 0.0) {
            w[r.gen_range(nt..n)] = 1.0;
        }
        let tot: f64 = w.iter().sum();
        let stay = if self_loops && r.gen_bool(0.3) { [0.25, 0.5][r.gen_range(0..2)] } else { 0.0 };
        for t in 0..n {
            a[s][t] = (1.0 - stay) * w[t] / tot;
        }
        a[s][s] = stay;
        rew[s] = if r.gen_bool(0.25) { grid(r, 0.0, 1.0, 0.25) } else { -grid(r, 0.0, 2.0, 0.25) };
    }
    for t in nt..n {
        a[t][t] = 1.0;
        rew[t] = grid(r, -1.0, 8.0, 0.5);
    }
    MarkovChain::new(a, rew, (nt..n).collect(), 0).unwrap()
}

pub fn random_jms(seed: u64, self_loops: bool) -> JmsInstance {
    random_jms_sized(seed, 3, 3, self_loops)
}

pub fn random_jms_sized(seed: u64, max_chains: usize, max_nt: usize, self_loops: bool) -> JmsInstance {
    let mut r = rng(seed);
    let n = r.gen_range(1..=max_chains);
    let chains = (0..n).map(|_| random_chain(&mut r, max_nt, self_loops)).collect();
    let k = r.gen_range(1..=n);
    JmsInstance::new(chains, k).unwrap()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Lexicographic maximiser over a finite point set.
pub fn lex_argmax(points: &[Vec<f64>], dirs: &[Vec<f64>]) -> usize {
    let mut cand: Vec<usize> = (0..points.len()).collect();
    for d in dirs {
        let score = |i: usize| points[i].iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
        let best = cand.iter().map(|&i| score(i)).fold(f64::NEG_INFINITY, f64::max);
        cand.retain(|&i| score(i) >= best - 1e-12);
    }
    cand[0]
}

pub fn run_eec(points: &[Vec<f64>]) -> EecResult<usize> {
    let m = points[0].len();
    let scale = points.iter().map(|p| p.iter().map(|x| x * x).sum::<f64>().sqrt()).fold(1e-12, f64::max);
    eec(
        m,
        |dirs: &[Vec<f64>]| {
            let i = lex_argmax(points, dirs);
            Ok((points[i].clone(), i))
        },
        scale,
        EEC_RADIUS,
    )
    .unwrap()
}

pub fn hull_residual(points: &[Vec<f64>], w: &[f64]) -> f64 {
    let m = points[0].len();
    (0..m).map(|j| points.iter().zip(w).map(|(p, x)| p[j] * x).sum::<f64>().powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug)]
pub enum Shape {
    Interior,
    Face,
    Vertex,
    Flat,
}

/// Random point cloud whose hull contains the origin, placed as requested.
pub fn polytope(seed: u64, shape: Shape) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let m = r.gen_range(2..=4);
    let k = r.gen_range(m + 1..=3 * m + 2);
    let mut pts: Vec<Vec<f64>> = (0..k).map(|_| (0..m).map(|_| r.gen_range(-4.0..4.0)).collect()).collect();
    if let Shape::Flat = shape {
        for p in pts.iter_mut() {
            p[m - 1] = 0.0;
        }
    }
    let support: Vec<usize> = match shape {
        Shape::Interior | Shape::Flat => (0..k).collect(),
        Shape::Face => vec![0, 1],
        Shape::Vertex => vec![0],
    };
    let w: Vec<f64> = support.iter().map(|_| r.gen_range(0.1..1.0)).collect();
    let tot: f64 = w.iter().sum();
    let c: Vec<f64> = (0..m).map(|j| support.iter().zip(&w).map(|(&i, x)| pts[i][j] * x / tot).sum()).collect();
    for p in pts.iter_mut() {
        for j in 0..m {
            p[j] -= c[j];
        }
    }
    pts
}

/// max R·p over the hull of `vertices` subject to the affine constraints and
/// F(p) ≤ 0, by Kelley cuts. Returns an upper bound that is tight to 1e-7.
pub fn kelley_opt(
    r: &[f64],
    vertices: &[Vec<f64>],
    affine: &[AffineVisitConstraint],
    convex: &[ConvexConstraintSpec],
) -> Option<f64> {
    let d = r.len();
    let mut cuts: Vec<(Vec<f64>, f64)> = Vec::new();
    for _ in 0..400 {
        let mut lp = Problem::new(OptimizationDirection::Maximize);
        let w: Vec<_> = vertices.iter().map(|v| lp.add_var(v.iter().zip(r).map(|(a, b)| a * b).sum(), (0.0, f64::INFINITY))).collect();
        let ones: Vec<_> = w.iter().map(|&x| (x, 1.0)).collect();
        lp.add_constraint(ones.as_slice(), ComparisonOp::Eq, 1.0);
        let lin = |coef: &[f64]| -> Vec<(minilp::Variable, f64)> {
            w.iter().zip(vertices).map(|(&x, v)| (x, v.iter().zip(coef).map(|(a, b)| a * b).sum())).collect()
        };
        for a in affine {
            let op = if a.sense == Sense::Eq { ComparisonOp::Eq } else { ComparisonOp::Le };
            lp.add_constraint(lin(&a.theta).as_slice(), op, a.b);
        }
        for (g, rhs) in &cuts {
            lp.add_constraint(lin(g).as_slice(), ComparisonOp::Le, *rhs);
        }
        let sol = lp.solve().ok()?;
        let p: Vec<f64> = (0..d).map(|j| w.iter().zip(vertices).map(|(&x, v)| sol[x] * v[j]).sum()).collect();
        let mut worst = 0.0;
        for f in convex {
            let val = f.evaluate(&p);
            if val > 1e-9 {
                // F(p₀) + g·(p − p₀) ≤ 0
                let g = f.grad(&p);
                let rhs = g.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() - val;
                cuts.push((g, rhs));
            }
            worst = f64::max(worst, val);
        }
        if worst <= 1e-7 {
            return Some(sol.objective());
        }
    }
    None
}

