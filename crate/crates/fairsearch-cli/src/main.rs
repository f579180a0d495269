use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use fairsearch::caratheodory::solve_multi_affine;
use fairsearch::constrained::{slack, solve_rdip_with, AffineConstraint, EvalMethod, PolicyAtom, RandomizedIndexPolicy};
use fairsearch::grdip::{grdip_solve, AffineVisitConstraint, ConvexConstraintSpec, GrdipParams};
use fairsearch::io::{fv, parse_constraints, to_json_string, F, SCHEMA};
use fairsearch::jms::{collapse, index_table, visit_vector, JmsInstance, JmsTie, VisitMethod};
use fairsearch::pandora::{ExpectedOutcome, IndexPolicy, PandoraInstance, TieBreakRule};
use fairsearch::simlab::{run_experiment, write_csv, write_trace_csv, ExperimentConfig};
use fairsearch::{tol, Error};

#[derive(Parser, Debug)]
#[command(name = "fairsearch", version, about = "Constrained Pandora's box and Markov scheduling solvers")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Optimal policy for a Pandora instance, with at most one affine constraint.
    SolvePandora(Common),
    /// Exact mixture under several affine constraints.
    SolveMulti(Common),
    /// Unconstrained index policy of a Markov-chain instance.
    SolveJms(Common),
    /// Approximate solution with affine and convex visit constraints.
    Grdip {
        #[command(flatten)]
        common: Common,
        /// Per-iteration trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run an experiment grid and emit CSV rows.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Experiment configuration JSON.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Index of every state of every chain.
    Gittins(Common),
    /// Eliminate free-lunch states from every chain.
    Collapse(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    #[arg(long)]
    instance: Option<PathBuf>,
    #[arg(long)]
    constraints: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo trials; exact evaluation when omitted.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Output format (json, or csv for simulate).
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn read(path: &Option<PathBuf>, what: &str) -> anyhow::Result<String> {
    let p = path.as_ref().ok_or_else(|| anyhow!("missing --{what} FILE"))?;
    fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str, path: &Option<PathBuf>) -> anyhow::Result<T> {
    let name = path.as_deref().map(Path::display).map(|d| d.to_string()).unwrap_or_default();
    serde_json::from_str(text).with_context(|| format!("invalid JSON in {name}"))
}

fn emit(c: &Common, text: &str) -> anyhow::Result<()> {
    match &c.out {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit_json<T: Serialize>(c: &Common, v: &T) -> anyhow::Result<()> {
    emit(c, &to_json_string(v)?)
}

fn kv_csv(rows: &[(&str, String)]) -> String {
    let mut s = String::from("key,value\n");
    for (k, v) in rows {
        s.push_str(&format!("{k},{v}\n"));
    }
    s
}

fn method(c: &Common) -> EvalMethod {
    match c.trials {
        Some(trials) => EvalMethod::Mc { trials, seed: c.seed.unwrap_or(0) },
        None => EvalMethod::Exact { cap: tol::ENUM_CAP },
    }
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct AtomOut {
    rule: TieBreakRule,
    weight: F,
    lambda: Vec<F>,
    adjusted_values: Vec<Vec<F>>,
    adjusted_costs: Vec<F>,
}

impl From<&PolicyAtom> for AtomOut {
    fn from(a: &PolicyAtom) -> Self {
        Self {
            rule: a.rule.clone(),
            weight: F(a.weight),
            lambda: fv(&a.adjusted.lambda),
            adjusted_values: a.adjusted.values.iter().map(|v| fv(v)).collect(),
            adjusted_costs: fv(&a.adjusted.costs),
        }
    }
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct PandoraOut {
    schema: String,
    command: String,
    method: String,
    lambda: Vec<F>,
    utility: F,
    slacks: Vec<F>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    stderr: Vec<F>,
    select_prob: Vec<F>,
    inspect_prob: Vec<F>,
    expected_selected: F,
    exact_dual: bool,
    atoms: Vec<AtomOut>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    vertices: Vec<Vec<F>>,
}

fn outcome_of(policy: &RandomizedIndexPolicy, inst: &PandoraInstance, cons: &[AffineConstraint], m: EvalMethod) -> anyhow::Result<(ExpectedOutcome, Vec<f64>, Vec<f64>)> {
    let tables = cons.iter().map(|c| c.table(inst)).collect::<Result<Vec<_>, _>>()?;
    match m {
        EvalMethod::Exact { cap } => {
            let out = policy.evaluate_exact(cap)?;
            let s = tables.iter().zip(cons).map(|(t, c)| slack(t, c.b, &out)).collect();
            Ok((out, s, Vec::new()))
        }
        EvalMethod::Mc { trials, seed } => {
            let fs: Vec<_> = tables.iter().zip(cons).map(|(t, c)| fairsearch::constrained::slack_functional(t, c.b)).collect();
            let mc = policy.evaluate_mc(&fs, trials, seed)?;
            let s = mc.functionals.iter().map(|x| x.0).collect();
            let mut se = vec![mc.stderr_utility];
            se.extend(mc.functionals.iter().map(|x| x.1));
            Ok((mc.mean, s, se))
        }
    }
}

fn pandora_out(cmd: &str, m: EvalMethod, policy: &RandomizedIndexPolicy, inst: &PandoraInstance, cons: &[AffineConstraint], vertices: Vec<Vec<f64>>) -> anyhow::Result<PandoraOut> {
    let (out, s, se) = outcome_of(policy, inst, cons, m)?;
    Ok(PandoraOut {
        schema: SCHEMA.into(),
        command: cmd.into(),
        method: match m {
            EvalMethod::Exact { .. } => "exact".into(),
            EvalMethod::Mc { .. } => "mc".into(),
        },
        lambda: fv(&policy.lambda),
        utility: F(out.utility),
        slacks: fv(&s),
        stderr: fv(&se),
        select_prob: fv(&out.select),
        inspect_prob: fv(&out.inspect),
        expected_selected: F(out.n_selected),
        exact_dual: policy.exact_dual,
        atoms: policy.atoms.iter().map(AtomOut::from).collect(),
        vertices: vertices.iter().map(|v| fv(v)).collect(),
    })
}

fn write_pandora(c: &Common, o: &PandoraOut) -> anyhow::Result<()> {
    match c.format.unwrap_or(Format::Json) {
        Format::Json => emit_json(c, o),
        Format::Csv => {
            let mut rows = vec![("utility", o.utility.0.to_string()), ("lambda", join(&o.lambda))];
            rows.push(("slacks", join(&o.slacks)));
            rows.push(("weights", join(&o.atoms.iter().map(|a| a.weight).collect::<Vec<_>>())));
            emit(c, &kv_csv(&rows))
        }
    }
}

fn join(v: &[F]) -> String {
    v.iter().map(|x| x.0.to_string()).collect::<Vec<_>>().join(";")
}

fn load_pandora(c: &Common) -> anyhow::Result<(PandoraInstance, Vec<AffineConstraint>)> {
    let text = read(&c.instance, "instance")?;
    let inst: PandoraInstance = parse(&text, &c.instance)?;
    let cons = match &c.constraints {
        None => Vec::new(),
        Some(_) => {
            let specs = parse_constraints(&read(&c.constraints, "constraints")?)?;
            specs.iter().map(|s| s.resolve(&inst)).collect::<Result<Vec<_>, _>>()?
        }
    };
    Ok((inst, cons))
}

fn unconstrained(inst: &PandoraInstance) -> anyhow::Result<RandomizedIndexPolicy> {
    let adjusted = fairsearch::constrained::DualAdjustedInstance::new(inst, &[], &[]);
    let rule = TieBreakRule::Lexicographic;
    let policy = IndexPolicy::new(inst, &rule)?;
    Ok(RandomizedIndexPolicy { lambda: Vec::new(), atoms: vec![PolicyAtom { adjusted, rule, weight: 1.0, policy }], exact_dual: true })
}

fn solve_pandora(c: &Common) -> anyhow::Result<()> {
    let (inst, cons) = load_pandora(c)?;
    let m = method(c);
    let policy = match cons.len() {
        0 => unconstrained(&inst)?,
        1 => solve_rdip_with(&inst, &cons[0], m, c.tol)?,
        n => bail!("solve-pandora takes one constraint, got {n}; use solve-multi"),
    };
    write_pandora(c, &pandora_out("solve-pandora", m, &policy, &inst, &cons, Vec::new())?)
}

fn solve_multi(c: &Common) -> anyhow::Result<()> {
    let (inst, cons) = load_pandora(c)?;
    if cons.is_empty() {
        bail!("solve-multi needs --constraints FILE");
    }
    let sol = solve_multi_affine(&inst, &cons, c.tol)?;
    write_pandora(c, &pandora_out("solve-multi", method(c), &sol.policy, &inst, &cons, sol.vertices)?)
}

fn load_jms(c: &Common) -> anyhow::Result<JmsInstance> {
    let text = read(&c.instance, "instance")?;
    let inst: JmsInstance = parse(&text, &c.instance)?;
    Ok(JmsInstance::new(inst.chains, inst.capacity)?)
}

fn visit_method(c: &Common) -> VisitMethod {
    match c.trials {
        Some(trials) => VisitMethod::Mc { trials, seed: c.seed.unwrap_or(0) },
        None => VisitMethod::default(),
    }
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct JmsOut {
    schema: String,
    command: String,
    value: F,
    visits: Vec<F>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    stderr: Vec<F>,
    h_p: F,
    index: Vec<Vec<Option<F>>>,
}

fn index_rows(t: &fairsearch::jms::IndexTable) -> Vec<Vec<Option<F>>> {
    t.sigma.iter().map(|r| r.iter().map(|x| x.map(F)).collect()).collect()
}

fn solve_jms(c: &Common) -> anyhow::Result<()> {
    let inst = load_jms(c)?;
    let table = index_table(&inst)?;
    let vv = visit_vector(&inst, &table, &JmsTie::Lexicographic, visit_method(c))?;
    let o = JmsOut {
        schema: SCHEMA.into(),
        command: "solve-jms".into(),
        value: F(vv.dot(&inst.rewards())),
        visits: fv(&vv.p),
        stderr: vv.stderr.as_deref().map(fv).unwrap_or_default(),
        h_p: F(vv.h_p),
        index: index_rows(&table),
    };
    match c.format.unwrap_or(Format::Json) {
        Format::Json => emit_json(c, &o),
        Format::Csv => {
            let mut s = String::from("coordinate,visits\n");
            for (i, v) in o.visits.iter().enumerate() {
                s.push_str(&format!("{i},{}\n", v.0));
            }
            emit(c, &s)
        }
    }
}

fn gittins(c: &Common) -> anyhow::Result<()> {
    let inst = load_jms(c)?;
    let table = index_table(&inst)?;
    match c.format.unwrap_or(Format::Json) {
        Format::Json => {
            #[derive(Serialize)]
            struct Out {
                schema: &'static str,
                command: &'static str,
                index: Vec<Vec<Option<F>>>,
            }
            emit_json(c, &Out { schema: SCHEMA, command: "gittins", index: index_rows(&table) })
        }
        Format::Csv => {
            let mut s = String::from("chain,state,index\n");
            for (i, row) in table.sigma.iter().enumerate() {
                for (st, x) in row.iter().enumerate() {
                    let v = x.map(|v| if v.is_infinite() { "inf".to_string() } else { v.to_string() }).unwrap_or_default();
                    s.push_str(&format!("{i},{st},{v}\n"));
                }
            }
            emit(c, &s)
        }
    }
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct CollapsedOut {
    chain: fairsearch::jms::MarkovChain,
    state_map: Vec<Option<usize>>,
    eliminated: Vec<usize>,
    start_dist: Vec<F>,
    prefix_reward: F,
}

fn collapse_cmd(c: &Common) -> anyhow::Result<()> {
    let inst = load_jms(c)?;
    let chains = inst
        .chains
        .iter()
        .map(|ch| {
            let k = collapse(ch)?;
            Ok(CollapsedOut {
                chain: k.chain,
                state_map: k.state_map,
                eliminated: k.eliminated,
                start_dist: fv(&k.start_dist),
                prefix_reward: F(k.prefix_reward),
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    #[derive(Serialize)]
    struct Out {
        schema: &'static str,
        command: &'static str,
        chains: Vec<CollapsedOut>,
    }
    emit_json(c, &Out { schema: SCHEMA, command: "collapse", chains })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GrdipConfig {
    #[serde(default)]
    affine: Vec<AffineVisitConstraint>,
    #[serde(default)]
    convex: Vec<ConvexConstraintSpec>,
    #[serde(default = "default_eps")]
    epsilon: f64,
    #[serde(default = "default_eps")]
    delta: f64,
    /// (K_O, K_I) overriding the default counts.
    #[serde(default)]
    iterations: Option<(u64, u64)>,
    #[serde(default = "yes")]
    early_stop: bool,
}

fn default_eps() -> f64 {
    0.05
}
fn yes() -> bool {
    true
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct GrdipOut {
    schema: String,
    command: String,
    objective: F,
    p_hat: Vec<F>,
    affine_slacks: Vec<F>,
    convex_values: Vec<F>,
    upper_bound: F,
    gap: F,
    best_responses: u64,
    stopped_early: bool,
    atoms: Vec<GrdipAtomOut>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct GrdipAtomOut {
    weight: F,
    adjusted_reward: Vec<F>,
}

fn grdip(c: &Common, trace: &Option<PathBuf>) -> anyhow::Result<()> {
    let inst = load_jms(c)?;
    let cfg: GrdipConfig = parse(&read(&c.constraints, "constraints")?, &c.constraints)?;
    let mut params = GrdipParams::for_problem(&inst, &cfg.affine, &cfg.convex, cfg.epsilon, cfg.delta)?;
    if let Some((ko, ki)) = cfg.iterations {
        params = params.with_iterations(ko, ki);
    }
    params = params.with_early_stop(cfg.early_stop);
    let sol = grdip_solve(&inst, &cfg.affine, &cfg.convex, &params, visit_method(c))?;
    if let Some(p) = trace {
        let f = fs::File::create(p).with_context(|| format!("cannot write {}", p.display()))?;
        write_trace_csv(&sol.trace, f)?;
    }
    let o = GrdipOut {
        schema: SCHEMA.into(),
        command: "grdip".into(),
        objective: F(sol.objective),
        p_hat: fv(&sol.p_hat.p),
        affine_slacks: fv(&sol.affine_slacks),
        convex_values: fv(&sol.convex_values),
        upper_bound: F(sol.certificate.upper_bound),
        gap: F(sol.certificate.gap),
        best_responses: sol.certificate.best_responses,
        stopped_early: sol.certificate.stopped_early,
        atoms: sol.atoms.iter().map(|a| GrdipAtomOut { weight: F(a.weight), adjusted_reward: fv(&a.adjusted_reward) }).collect(),
    };
    match c.format.unwrap_or(Format::Json) {
        Format::Json => emit_json(c, &o),
        Format::Csv => emit(
            c,
            &kv_csv(&[
                ("objective", o.objective.0.to_string()),
                ("affine_slacks", join(&o.affine_slacks)),
                ("convex_values", join(&o.convex_values)),
                ("gap", o.gap.0.to_string()),
            ]),
        ),
    }
}

fn simulate(c: &Common, config: &Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg: ExperimentConfig = match config {
        Some(_) => parse(&read(config, "config")?, config)?,
        None => ExperimentConfig::default(),
    };
    if let Some(t) = c.trials {
        cfg.trials = t;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let rows = run_experiment(&cfg);
    match c.format.unwrap_or(Format::Csv) {
        Format::Csv => {
            let mut buf = Vec::new();
            write_csv(&rows, &mut buf)?;
            emit(c, &String::from_utf8(buf)?)
        }
        Format::Json => emit_json(c, &rows),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.cmd {
        Command::SolvePandora(c) => solve_pandora(c),
        Command::SolveMulti(c) => solve_multi(c),
        Command::SolveJms(c) => solve_jms(c),
        Command::Grdip { common, trace } => grdip(common, trace),
        Command::Simulate { common, config } => simulate(common, config),
        Command::Gittins(c) => gittins(c),
        Command::Collapse(c) => collapse_cmd(c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let infeasible = e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Infeasible(_))));
            ExitCode::from(if infeasible { 2 } else { 1 })
        }
    }
}
