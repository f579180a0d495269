//! Instance generators and the Monte Carlo experiment runner for the biased
//! hiring simulations.

use std::io::Write;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::constrained::{slack_functional, solve_rdip_with, AffineConstraint, EvalMethod, Sense};
use crate::error::{invalid, Result};
use crate::grdip::{grdip_solve, AffineVisitConstraint, GrdipParams, TraceRow};
use crate::jms::{JmsInstance, MarkovChain, VisitMethod};
use crate::pandora::{mixture_mc, IndexPolicy, LinearFunctional, PandoraBox, PandoraInstance, TieBreakRule, ValueDistribution};

/// Equal-mass discretisation of N(mean, sd²): one atom per quantile bin at
/// the bin's conditional mean, clipped to mean ± clip·sd.
pub fn discretize(mean: f64, sd: f64, grid_points: usize, clip: f64) -> Result<ValueDistribution> {
    if grid_points < 2 {
        return invalid("grid_points must be at least 2");
    }
    if !(sd >= 0.0) || !mean.is_finite() || !sd.is_finite() {
        return invalid("mean and sd must be finite with sd ≥ 0");
    }
    if sd == 0.0 {
        return Ok(ValueDistribution::point(mean));
    }
    let z = Normal::new(0.0, 1.0).expect("standard normal");
    let g = grid_points as f64;
    let edge = |k: usize| -> f64 {
        if k == 0 {
            f64::NEG_INFINITY
        } else if k == grid_points {
            f64::INFINITY
        } else {
            z.inverse_cdf(k as f64 / g)
        }
    };
    let pdf = |x: f64| if x.is_finite() { z.pdf(x) } else { 0.0 };
    let mut support = Vec::with_capacity(grid_points);
    for k in 0..grid_points {
        let m = g * (pdf(edge(k)) - pdf(edge(k + 1)));
        support.push(mean + sd * m.clamp(-clip, clip));
    }
    let probs = vec![1.0 / g; grid_points];
    // Clipping can merge the outermost atoms.
    let mut s2: Vec<f64> = Vec::new();
    let mut p2: Vec<f64> = Vec::new();
    for (v, p) in support.into_iter().zip(probs) {
        match s2.last() {
            Some(&l) if v <= l => *p2.last_mut().unwrap() += p,
            _ => {
                s2.push(v);
                p2.push(p);
            }
        }
    }
    let tot: f64 = p2.iter().sum();
    p2.iter_mut().for_each(|p| *p /= tot);
    ValueDistribution::new(s2, p2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasScenario {
    pub n: usize,
    pub cost_range: [f64; 2],
    /// Bias factor of group 𝒴 (𝒳 has 1).
    pub rho: f64,
    pub noise_sd: f64,
    pub mean_scale: f64,
    pub mean_shift: f64,
    pub capacity: usize,
    pub grid_points: usize,
    pub seed: u64,
}

impl Default for BiasScenario {
    fn default() -> Self {
        Self {
            n: 60,
            cost_range: [3.0, 6.0],
            rho: 1.0,
            noise_sd: 10.0,
            mean_scale: 10.0,
            mean_shift: 20.0,
            capacity: 20,
            grid_points: 25,
            seed: 0,
        }
    }
}

pub const GROUP_X: &str = "X";
pub const GROUP_Y: &str = "Y";

/// Generated instance over signals plus the true value v/ρ of every atom.
#[derive(Clone, Debug)]
pub struct PandoraScenario {
    pub instance: PandoraInstance,
    pub true_values: Vec<Vec<f64>>,
    pub rho: Vec<f64>,
}

fn check_scenario(s: &BiasScenario) -> Result<()> {
    if !(s.rho > 0.0 && s.rho <= 1.0) {
        return invalid(format!("rho must lie in (0, 1], got {}", s.rho));
    }
    if s.n == 0 || s.n % 2 != 0 {
        return invalid("n must be a positive even number");
    }
    if !(s.cost_range[0] <= s.cost_range[1]) {
        return invalid("cost range is empty");
    }
    Ok(())
}

/// First half 𝒳 (ρ = 1), second half 𝒴 (ρ). The unbiased means and costs
/// depend only on the seed, so scenarios differing in ρ share them.
pub fn gen_pandora_scenario(s: &BiasScenario) -> Result<PandoraScenario> {
    check_scenario(s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let ln = LogNormal::new(0.0, 1.0).expect("lognormal");
    let cost = Uniform::new_inclusive(s.cost_range[0], s.cost_range[1]);
    let mut boxes = Vec::with_capacity(s.n);
    let mut true_values = Vec::with_capacity(s.n);
    let mut rhos = Vec::with_capacity(s.n);
    for i in 0..s.n {
        let mu_bar = s.mean_scale * ln.sample(&mut rng) + s.mean_shift;
        let c = cost.sample(&mut rng);
        let (rho, g) = if i < s.n / 2 { (1.0, GROUP_X) } else { (s.rho, GROUP_Y) };
        let dist = discretize(mu_bar * rho, s.noise_sd * rho, s.grid_points, 4.0)?;
        true_values.push(dist.support().iter().map(|v| v / rho).collect());
        rhos.push(rho);
        boxes.push(PandoraBox::new(i as u32 + 1, dist, c).with_group(g));
    }
    Ok(PandoraScenario { instance: PandoraInstance::new(boxes, s.capacity)?, true_values, rho: rhos })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ConstraintKind {
    Parity,
    /// At least a θ share of selections (or inspections) from 𝒴.
    Quota { theta: f64 },
    /// At most b selections (or inspections) from 𝒴 in expectation.
    Budget { b: f64 },
}

impl ConstraintKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Parity => "parity",
            Self::Quota { .. } => "quota",
            Self::Budget { .. } => "budget",
        }
    }

    pub fn theta(&self) -> f64 {
        match self {
            Self::Parity => f64::NAN,
            Self::Quota { theta } => *theta,
            Self::Budget { b } => *b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Selection,
    Inspection,
}

/// Per-box coefficients (on 𝒳 members, on 𝒴 members), right-hand side, sense.
fn group_coefficients(kind: ConstraintKind) -> (f64, f64, f64, Sense) {
    match kind {
        ConstraintKind::Parity => (1.0, -1.0, 0.0, Sense::Eq),
        ConstraintKind::Quota { theta } => (theta, theta - 1.0, 0.0, Sense::Leq),
        ConstraintKind::Budget { b } => (0.0, 1.0, b, Sense::Leq),
    }
}

/// Group constraint over boxes labelled `groups.0` (𝒳) and `groups.1` (𝒴).
pub fn build_constraint(
    instance: &PandoraInstance,
    kind: ConstraintKind,
    stage: Stage,
    groups: (&str, &str),
) -> Result<AffineConstraint> {
    let (cx, cy, b, sense) = group_coefficients(kind);
    let mut coef = Vec::with_capacity(instance.len());
    for bx in &instance.boxes {
        coef.push(match bx.group.as_deref() {
            Some(g) if g == groups.0 => cx,
            Some(g) if g == groups.1 => cy,
            _ => 0.0,
        });
    }
    let zeros = vec![0.0; coef.len()];
    Ok(match stage {
        Stage::Selection => AffineConstraint::scalar(coef, zeros, b, sense),
        Stage::Inspection => AffineConstraint::scalar(zeros, coef, b, sense),
    })
}

/// Multi-stage hiring chains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JmsScenario {
    pub n: usize,
    pub rho: f64,
    pub capacity: usize,
    pub grid_points: usize,
    pub pass_prob: f64,
    pub accept_prob: f64,
    pub phone_stage: bool,
    pub phone_cost: [f64; 2],
    pub onsite_cost: [f64; 2],
    pub offer_cost: f64,
    pub noise_sd: f64,
    pub mean_scale: f64,
    pub mean_shift: f64,
    pub seed: u64,
}

impl Default for JmsScenario {
    fn default() -> Self {
        Self {
            n: 10,
            rho: 1.0,
            capacity: 3,
            grid_points: 5,
            pass_prob: 0.8,
            accept_prob: 0.9,
            phone_stage: true,
            phone_cost: [1.0, 2.0],
            onsite_cost: [2.0, 4.0],
            offer_cost: 3.0,
            noise_sd: 10.0,
            mean_scale: 10.0,
            mean_shift: 20.0,
            seed: 0,
        }
    }
}

/// Chain layout of one generated candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct HiringChain {
    pub chain: MarkovChain,
    /// Accept terminals, one per value atom (empty when the onsite stage is unreachable).
    pub accept: Vec<usize>,
    pub true_values: Vec<f64>,
    pub group: &'static str,
}

fn hiring_chain(values: &ValueDistribution, s: &JmsScenario, c_phone: f64, c_onsite: f64) -> Result<(MarkovChain, Vec<usize>)> {
    let m = values.len();
    let mut states = 0usize;
    let mut alloc = |k: usize| {
        let a = states;
        states += k;
        a
    };
    let phone = if s.phone_stage { Some(alloc(1)) } else { None };
    let reject = if s.phone_stage && s.pass_prob < 1.0 { Some(alloc(1)) } else { None };
    let reach_onsite = !s.phone_stage || s.pass_prob > 0.0;
    let onsite = if reach_onsite { Some(alloc(1)) } else { None };
    let offers = if reach_onsite { alloc(m) } else { 0 };
    let accepts = if reach_onsite && s.accept_prob > 0.0 { alloc(m) } else { usize::MAX };
    let decline = if reach_onsite && s.accept_prob < 1.0 { Some(alloc(1)) } else { None };
    let n = states;
    let mut a = vec![vec![0.0; n]; n];
    let mut r = vec![0.0; n];
    let mut terminal = Vec::new();
    if let Some(p) = phone {
        r[p] = -c_phone;
        if let Some(o) = onsite {
            a[p][o] = s.pass_prob;
        }
        if let Some(j) = reject {
            a[p][j] = 1.0 - s.pass_prob;
        }
    }
    for t in [reject, decline].into_iter().flatten() {
        a[t][t] = 1.0;
        terminal.push(t);
    }
    let mut accept_states = Vec::new();
    if let Some(o) = onsite {
        r[o] = -c_onsite;
        for j in 0..m {
            let f = offers + j;
            a[o][f] = values.probs()[j];
            r[f] = -s.offer_cost;
            if accepts != usize::MAX {
                let t = accepts + j;
                a[f][t] = s.accept_prob;
                a[t][t] = 1.0;
                r[t] = values.support()[j];
                terminal.push(t);
                accept_states.push(t);
            }
            if let Some(dc) = decline {
                a[f][dc] = 1.0 - s.accept_prob;
            }
        }
    }
    let start = phone.or(onsite).expect("chain has a start");
    Ok((MarkovChain::new(a, r, terminal, start)?, accept_states))
}

/// Generate hiring chains; first half 𝒳, second half 𝒴.
pub fn gen_jms_scenario(s: &JmsScenario) -> Result<(JmsInstance, Vec<HiringChain>)> {
    if !(s.rho > 0.0 && s.rho <= 1.0) {
        return invalid(format!("rho must lie in (0, 1], got {}", s.rho));
    }
    if !(0.0..=1.0).contains(&s.pass_prob) || !(0.0..=1.0).contains(&s.accept_prob) {
        return invalid("probabilities must lie in [0, 1]");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let ln = LogNormal::new(0.0, 1.0).expect("lognormal");
    let mut chains = Vec::with_capacity(s.n);
    let mut info = Vec::with_capacity(s.n);
    for i in 0..s.n {
        let mu_bar = s.mean_scale * ln.sample(&mut rng) + s.mean_shift;
        let c_phone = rng.gen_range(s.phone_cost[0]..=s.phone_cost[1]);
        let c_onsite = rng.gen_range(s.onsite_cost[0]..=s.onsite_cost[1]);
        let (rho, g) = if i < s.n / 2 { (1.0, GROUP_X) } else { (s.rho, GROUP_Y) };
        let dist = discretize(mu_bar * rho, s.noise_sd * rho, s.grid_points, 4.0)?;
        let (chain, accept) = hiring_chain(&dist, s, c_phone, c_onsite)?;
        let true_values = if accept.is_empty() { Vec::new() } else { dist.support().iter().map(|v| v / rho).collect() };
        chains.push(chain.clone());
        info.push(HiringChain { chain, accept, true_values, group: g });
    }
    Ok((JmsInstance::new(chains, s.capacity)?, info))
}

/// Visit-vector coefficients of a group constraint on accept terminals
/// (selection) or on the first state of each chain (inspection).
pub fn build_visit_constraint(instance: &JmsInstance, info: &[HiringChain], kind: ConstraintKind, stage: Stage) -> AffineVisitConstraint {
    let (cx, cy, b, sense) = group_coefficients(kind);
    let mut theta = vec![0.0; instance.dim()];
    let off = instance.offsets();
    for (i, h) in info.iter().enumerate() {
        let c = if h.group == GROUP_X { cx } else { cy };
        match stage {
            Stage::Selection => {
                for &t in &h.accept {
                    theta[off[i] + t] = c;
                }
            }
            Stage::Inspection => theta[off[i] + instance.chains[i].start] = c,
        }
    }
    AffineVisitConstraint::new(theta, b, sense)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    #[default]
    Rdip,
    Grdip,
}

impl Solver {
    pub fn name(&self) -> &'static str {
        match self {
            Solver::Rdip => "rdip",
            Solver::Grdip => "grdip",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: BiasScenario,
    pub jms: JmsScenario,
    pub rhos: Vec<f64>,
    pub capacities: Vec<usize>,
    pub constraints: Vec<ConstraintKind>,
    pub stage: Stage,
    pub solver: Solver,
    /// Independent instances per (ρ, k, constraint) cell.
    pub replicates: usize,
    pub trials: usize,
    /// Trials used inside the dual search (defaults to `trials`).
    pub solve_trials: Option<usize>,
    pub seed: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub grdip_iterations: Option<(u64, u64)>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: BiasScenario::default(),
            jms: JmsScenario::default(),
            rhos: vec![0.7, 1.0],
            capacities: vec![20],
            constraints: vec![ConstraintKind::Parity],
            stage: Stage::Selection,
            solver: Solver::Rdip,
            replicates: 1,
            trials: 2000,
            solve_trials: None,
            seed: 0,
            epsilon: 0.05,
            delta: 0.05,
            grdip_iterations: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub scenario_id: usize,
    pub rho: f64,
    pub k: usize,
    pub theta: f64,
    pub constraint: String,
    pub solver: String,
    pub u_short_uc: f64,
    pub u_short_c: f64,
    pub u_long_uc: f64,
    pub u_long_c: f64,
    pub pof_short: f64,
    pub pof_long: f64,
    /// Slack b − E[θ·outcome] divided by k.
    pub slack_uc: f64,
    pub slack_c: f64,
    pub unalloc_frac: f64,
    pub lambda_star: f64,
    pub trials: usize,
    pub stderr_u_short_uc: f64,
    pub stderr_u_short_c: f64,
    pub stderr_slack_c: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 { a / b } else { f64::NAN }
}

fn cell_seed(seed: u64, idx: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(idx.wrapping_add(1));
    r.gen()
}

struct Cell {
    id: usize,
    rho: f64,
    k: usize,
    kind: ConstraintKind,
    replicate: usize,
}

/// Run every (ρ, k, constraint, replicate) cell; failing cells are logged and skipped.
pub fn run_experiment(cfg: &ExperimentConfig) -> Vec<ExperimentRow> {
    let mut cells = Vec::new();
    for &rho in &cfg.rhos {
        for &k in &cfg.capacities {
            for &kind in &cfg.constraints {
                for replicate in 0..cfg.replicates.max(1) {
                    cells.push(Cell { id: cells.len(), rho, k, kind, replicate });
                }
            }
        }
    }
    cells
        .par_iter()
        .filter_map(|c| {
            let r = match cfg.solver {
                Solver::Rdip => run_pandora_cell(cfg, c),
                Solver::Grdip => run_jms_cell(cfg, c),
            };
            match r {
                Ok(row) => Some(row),
                Err(e) => {
                    warn!("cell {} (rho={}, k={}, {}) failed: {e}", c.id, c.rho, c.k, c.kind.name());
                    None
                }
            }
        })
        .collect()
}

fn run_pandora_cell(cfg: &ExperimentConfig, c: &Cell) -> Result<ExperimentRow> {
    let mut sc = cfg.scenario.clone();
    sc.rho = c.rho;
    sc.capacity = c.k;
    sc.seed = cell_seed(cfg.seed, c.replicate as u64);
    let gen = gen_pandora_scenario(&sc)?;
    let inst = &gen.instance;
    let con = build_constraint(inst, c.kind, cfg.stage, (GROUP_X, GROUP_Y))?;
    let table = con.table(inst)?;
    let eval_seed = cell_seed(cfg.seed ^ 0x5eed, c.id as u64);
    let solve_trials = cfg.solve_trials.unwrap_or(cfg.trials);
    let pol = solve_rdip_with(inst, &con, EvalMethod::Mc { trials: solve_trials, seed: eval_seed }, 1e-9)?;

    let long = LinearFunctional {
        select: gen.true_values.clone(),
        inspect: inst.costs().iter().map(|c| -c).collect(),
        constant: 0.0,
    };
    let fs = [long, slack_functional(&table, con.b)];
    let uc = IndexPolicy::new(inst, &TieBreakRule::Lexicographic)?;
    let mc_uc = mixture_mc(&[(&uc, 1.0)], &fs, cfg.trials, eval_seed)?;
    let mc_c = pol.evaluate_mc(&fs, cfg.trials, eval_seed)?;
    let k = c.k as f64;
    Ok(ExperimentRow {
        scenario_id: c.id,
        rho: c.rho,
        k: c.k,
        theta: c.kind.theta(),
        constraint: c.kind.name().into(),
        solver: Solver::Rdip.name().into(),
        u_short_uc: mc_uc.mean.utility,
        u_short_c: mc_c.mean.utility,
        u_long_uc: mc_uc.functionals[0].0,
        u_long_c: mc_c.functionals[0].0,
        pof_short: ratio(mc_c.mean.utility, mc_uc.mean.utility),
        pof_long: ratio(mc_c.functionals[0].0, mc_uc.functionals[0].0),
        slack_uc: mc_uc.functionals[1].0 / k,
        slack_c: mc_c.functionals[1].0 / k,
        unalloc_frac: 1.0 - mc_c.mean.n_selected / k,
        lambda_star: pol.lambda[0],
        trials: cfg.trials,
        stderr_u_short_uc: mc_uc.stderr_utility,
        stderr_u_short_c: mc_c.stderr_utility,
        stderr_slack_c: mc_c.functionals[1].1 / k,
    })
}

fn run_jms_cell(cfg: &ExperimentConfig, c: &Cell) -> Result<ExperimentRow> {
    let mut sc = cfg.jms.clone();
    sc.rho = c.rho;
    sc.capacity = c.k;
    sc.seed = cell_seed(cfg.seed, c.replicate as u64);
    let (inst, info) = gen_jms_scenario(&sc)?;
    let con = build_visit_constraint(&inst, &info, c.kind, cfg.stage);
    let method = VisitMethod::Mc { trials: cfg.trials, seed: cell_seed(cfg.seed ^ 0x5eed, c.id as u64) };
    let mut params = GrdipParams::for_problem(&inst, std::slice::from_ref(&con), &[], cfg.epsilon, cfg.delta)?;
    if let Some((ko, ki)) = cfg.grdip_iterations {
        params = params.with_iterations(ko, ki);
    }
    let sol = grdip_solve(&inst, std::slice::from_ref(&con), &[], &params, method)?;
    let uc = grdip_solve(&inst, &[], &[], &params.clone().with_iterations(1, 1), method)?;
    let mut r_true = inst.rewards();
    let off = inst.offsets();
    for (i, h) in info.iter().enumerate() {
        for (j, &t) in h.accept.iter().enumerate() {
            r_true[off[i] + t] = h.true_values[j];
        }
    }
    let k = c.k as f64;
    let selected = |p: &[f64]| -> f64 {
        info.iter().enumerate().map(|(i, h)| h.accept.iter().map(|&t| p[off[i] + t]).sum::<f64>()).sum()
    };
    let slack = |p: &[f64]| -(con.violation(p));
    let (pc, pu) = (&sol.p_hat, &uc.p_hat);
    let se = |v: &crate::jms::VisitVector, w: &[f64]| -> f64 {
        v.stderr.as_ref().map_or(0.0, |s| s.iter().zip(w).map(|(a, b)| (a * b).powi(2)).sum::<f64>().sqrt())
    };
    let r = inst.rewards();
    Ok(ExperimentRow {
        scenario_id: c.id,
        rho: c.rho,
        k: c.k,
        theta: c.kind.theta(),
        constraint: c.kind.name().into(),
        solver: Solver::Grdip.name().into(),
        u_short_uc: pu.dot(&r),
        u_short_c: pc.dot(&r),
        u_long_uc: pu.dot(&r_true),
        u_long_c: pc.dot(&r_true),
        pof_short: ratio(pc.dot(&r), pu.dot(&r)),
        pof_long: ratio(pc.dot(&r_true), pu.dot(&r_true)),
        slack_uc: slack(&pu.p) / k,
        slack_c: slack(&pc.p) / k,
        unalloc_frac: 1.0 - selected(&pc.p) / k,
        lambda_star: sol.trace.last().and_then(|t| t.lambda.first().copied()).unwrap_or(0.0),
        trials: cfg.trials,
        stderr_u_short_uc: se(pu, &r),
        stderr_u_short_c: se(pc, &r),
        stderr_slack_c: se(pc, &con.theta) / k,
    })
}

/// Write rows as CSV with a header.
pub fn write_csv<W: Write>(rows: &[ExperimentRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(|e| crate::Error::InvalidInput(format!("csv: {e}")))?;
    }
    wr.flush().map_err(|e| crate::Error::InvalidInput(format!("csv: {e}")))?;
    Ok(())
}

/// G-RDIP trajectory CSV: iter, lagrangian, mean_lagrangian, then one slack
/// and one λ column per affine inequality.
pub fn write_trace_csv<W: Write>(trace: &[TraceRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| crate::Error::InvalidInput(format!("csv: {e}"));
    let ns = trace.first().map_or(0, |t| t.slacks.len());
    let nl = trace.first().map_or(0, |t| t.lambda.len());
    let mut head = vec!["iter".to_string(), "lagrangian".into(), "mean_lagrangian".into()];
    head.extend((0..ns).map(|j| format!("slack_{j}")));
    head.extend((0..nl).map(|j| format!("lambda_{j}")));
    wr.write_record(&head).map_err(err)?;
    for t in trace {
        let mut rec = vec![t.iter.to_string(), t.lagrangian.to_string(), t.mean_lagrangian.to_string()];
        rec.extend(t.slacks.iter().map(|x| x.to_string()));
        rec.extend(t.lambda.iter().map(|x| x.to_string()));
        wr.write_record(&rec).map_err(err)?;
    }
    wr.flush().map_err(|e| crate::Error::InvalidInput(format!("csv: {e}")))?;
    Ok(())
}

/// Per-realisation normalised ex-post slack from the selected counts of
/// each group (parity and quota only).
pub fn expost_slack(kind: ConstraintKind, n_x: f64, n_y: f64) -> Option<f64> {
    let (num, den) = match kind {
        ConstraintKind::Parity => (n_x - n_y, n_x + n_y),
        ConstraintKind::Quota { theta } => (theta * n_x - (1.0 - theta) * n_y, theta * n_x + (1.0 - theta) * n_y),
        ConstraintKind::Budget { .. } => return None,
    };
    if den == 0.0 { Some(0.0) } else { Some(num / den) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discretize_two_points() {
        let d = discretize(5.0, 2.0, 2, 4.0).unwrap();
        let m = (2.0 / std::f64::consts::PI).sqrt();
        assert!((d.support()[0] - (5.0 - 2.0 * m)).abs() < 1e-9);
        assert!((d.support()[1] - (5.0 + 2.0 * m)).abs() < 1e-9);
        assert_eq!(discretize(3.0, 0.0, 25, 4.0).unwrap().support(), &[3.0]);
        let d = discretize(30.0, 10.0, 25, 4.0).unwrap();
        assert!((d.mean() - 30.0).abs() < 0.6);
    }

    #[test]
    fn constraint_coefficients() {
        let s = gen_pandora_scenario(&BiasScenario { n: 4, capacity: 2, ..Default::default() }).unwrap();
        let c = build_constraint(&s.instance, ConstraintKind::Quota { theta: 0.5 }, Stage::Selection, (GROUP_X, GROUP_Y)).unwrap();
        let t = c.table(&s.instance).unwrap();
        assert_eq!(t.theta_s[0][0], 0.5);
        assert_eq!(t.theta_s[3][0], -0.5);
        assert_eq!(c.sense, Sense::Leq);
    }

    #[test]
    fn jms_chains_valid() {
        let (inst, info) = gen_jms_scenario(&JmsScenario::default()).unwrap();
        assert_eq!(inst.chains.len(), 10);
        assert!(info.iter().all(|h| h.accept.len() == 5));
        let (inst, _) = gen_jms_scenario(&JmsScenario { pass_prob: 0.0, ..Default::default() }).unwrap();
        assert_eq!(inst.chains[0].states, 2);
    }
}
