//! `mfsmp` command-line front end.
//!
//! Exit codes: 0 success, 1 a check or test failed (or the solver failed),
//! 2 usage, parse or validation error.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use mfsmp_core::adjoint::solve_adjoint;
use mfsmp_core::forward::{evaluate, initial_control, ControlProcess};
use mfsmp_core::io::{read_control, write_adjoint, write_control, write_plot_data, write_trajectory};
use mfsmp_core::optimizer::{optimize, random_control, HistoryEntry, OptimizerOptions, Termination};
use mfsmp_core::problem::{parse_problem, CoefficientSource, Direction, FamilyConfig, ProblemSpec};
use mfsmp_core::replica::{compare, ProdconsReplica};
use mfsmp_core::report::{CheckReport, Residual};
use mfsmp_core::selftest::{self, instances, Fault, SelftestOptions, Suite};
use mfsmp_core::smp::{duality_residual, gradient_check, necessary_check, sufficiency_check};
use mfsmp_core::tree::ScenarioTree;
use mfsmp_core::Error;

const THREADS_ENV: &str = "MFSMP_THREADS";
const CHECK_SEED: u64 = 7;

#[derive(Parser, Debug)]
#[command(name = "mfsmp", version, about = "Mean-field stochastic maximum principle on scenario trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Optimize a problem and write the control, trajectory, adjoint and reports.
    Solve(SolveArgs),
    /// Verify a supplied control against the optimality conditions.
    Check(CheckArgs),
    /// Simulate a supplied control and report its objective.
    Simulate(SimulateArgs),
    /// Built-in worked examples.
    #[command(subcommand)]
    Example(Example),
    /// Run the acceptance suites.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug, Serialize)]
struct SolveArgs {
    config: PathBuf,
    #[arg(long, default_value = "mfsmp-out")]
    out: PathBuf,
    /// Tolerance of the necessary-condition and sufficiency checks.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Start from a seeded random control instead of the family default.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct CheckArgs {
    config: PathBuf,
    control: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Also write the reports to this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    config: PathBuf,
    control: PathBuf,
    /// Also write the trajectory CSV to this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Example {
    /// Production-consumption example: closed-form reference recursion next to the general solver.
    Prodcons(ProdconsArgs),
}

#[derive(Args, Debug, Serialize)]
struct ProdconsArgs {
    #[arg(long, default_value_t = 0.5)]
    delta: f64,
    #[arg(long, default_value_t = 0.5)]
    h: f64,
    #[arg(long = "N", default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    x0: f64,
    #[arg(long)]
    plot_data: Option<PathBuf>,
    /// Write the comparison table as JSON to this file.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SelftestArgs {
    /// Run only these suites (repeatable).
    #[arg(long = "suite")]
    suites: Vec<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    inject_fault: Option<String>,
    #[arg(long, default_value_t = selftest::DEFAULT_SEED)]
    seed: u64,
    /// Report file.
    #[arg(long, default_value = "selftest-report.json")]
    report: PathBuf,
}

/// Everything needed to reproduce a run's outputs.
#[derive(Serialize)]
struct RunManifest<'a, T: Serialize> {
    command: &'a str,
    config_path: Option<String>,
    config_sha256: Option<String>,
    tool_version: &'a str,
    threads: Option<usize>,
    options: &'a T,
    outputs: Vec<String>,
}

struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let code = match err.downcast_ref::<Error>() {
            Some(Error::Usage(_) | Error::Parse { .. } | Error::Validation(_) | Error::InvalidModel(_) | Error::TooLarge { .. }) => 2,
            _ => 1,
        };
        Self { code, err }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        anyhow::Error::from(err).into()
    }
}

type CmdResult = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = configure_threads().and_then(|threads| match cli.command {
        Command::Solve(a) => cmd_solve(&a, threads),
        Command::Check(a) => cmd_check(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Example(Example::Prodcons(a)) => cmd_prodcons(&a),
        Command::Selftest(a) => cmd_selftest(&a),
    });
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn configure_threads() -> Result<Option<usize>, Failure> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(None) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| anyhow!("thread pool: {e}"))?;
    Ok(Some(n))
}

fn load(path: &Path) -> Result<(ProblemSpec, ScenarioTree, String), Failure> {
    let text = fs::read_to_string(path).map_err(|e| Error::Usage(format!("cannot read {}: {e}", path.display())))?;
    let spec = parse_problem(&text).with_context(|| format!("in {}", path.display()))?;
    let tree = spec.build_tree()?;
    Ok((spec, tree, hex::encode(Sha256::digest(text.as_bytes()))))
}

fn load_control(path: &Path, spec: &ProblemSpec, tree: &ScenarioTree) -> Result<ControlProcess, Failure> {
    let file = fs::File::open(path).map_err(|e| Error::Usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(read_control(file, spec, tree).with_context(|| format!("in {}", path.display()))?)
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<fs::File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(fs::File::create(&path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn write_text(dir: &Path, name: &str, text: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn is_prodcons(spec: &ProblemSpec) -> bool {
    matches!(spec.source(), Some(CoefficientSource::Family(FamilyConfig::Prodcons(_))))
}

/// `(t_k, E v(t_k))` for `k = 0..=N`.
fn level_mean_control(spec: &ProblemSpec, tree: &ScenarioTree, u: &ControlProcess) -> Vec<(f64, f64)> {
    (0..=spec.grid.steps).map(|k| (spec.grid.time(k), tree.expect_by(k, |i| u.get(k, i)[0]))).collect()
}

#[derive(Serialize)]
struct SolveReport<'a> {
    direction: Direction,
    /// Objective in the problem's own orientation.
    objective: f64,
    /// Minimized objective (negated for maximization problems).
    objective_internal: f64,
    iterations: usize,
    termination: Termination,
    options: &'a OptimizerOptions,
    necessary_pass: bool,
    sufficiency_pass: bool,
    history: &'a [HistoryEntry],
}

fn cmd_solve(a: &SolveArgs, threads: Option<usize>) -> CmdResult {
    let (spec, tree, sha) = load(&a.config)?;
    let mut opts = OptimizerOptions { seed: a.seed, ..Default::default() };
    if let Some(k) = a.max_iters {
        opts.max_iters = k;
    }
    let u0 = match a.seed {
        Some(s) => random_control(&spec, &tree, s),
        None => initial_control(&spec, &tree),
    };
    let res = optimize(&spec, &tree, &u0, &opts)?;
    let (traj, _) = evaluate(&spec, &tree, &res.u)?;
    let adj = solve_adjoint(&spec, &tree, &traj, &res.u)?;
    let nec = necessary_check(&spec, &tree, &traj, &adj, &res.u, a.tol)?;
    let suf = sufficiency_check(&spec, &tree, &traj, &adj, &res.u, a.tol, CHECK_SEED)?;

    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let mut outputs = Vec::new();
    let mut emit = |name: &str, f: &mut dyn FnMut(&Path, &str) -> anyhow::Result<()>| -> anyhow::Result<()> {
        f(&a.out, name)?;
        outputs.push(name.to_string());
        Ok(())
    };
    let report = SolveReport {
        direction: spec.direction,
        objective: spec.user_objective(res.j),
        objective_internal: res.j,
        iterations: res.iterations,
        termination: res.termination,
        options: &opts,
        necessary_pass: nec.pass,
        sufficiency_pass: suf.pass,
        history: &res.history,
    };
    emit("report.json", &mut |d, n| write_text(d, n, &json(&report)))?;
    emit("control.csv", &mut |d, n| Ok(write_control(create(d, n)?, &spec, &tree, &res.u)?))?;
    emit("trajectory.csv", &mut |d, n| Ok(write_trajectory(create(d, n)?, &spec, &tree, &traj, &res.u)?))?;
    emit("adjoint.csv", &mut |d, n| Ok(write_adjoint(create(d, n)?, &spec, &tree, &adj)?))?;
    emit("necessary.json", &mut |d, n| write_text(d, n, &json(&nec)))?;
    emit("sufficiency.json", &mut |d, n| write_text(d, n, &json(&suf)))?;
    if is_prodcons(&spec) {
        let rows = level_mean_control(&spec, &tree, &res.u);
        emit("plot.csv", &mut |d, n| Ok(write_plot_data(create(d, n)?, &rows)?))?;
    }
    let manifest = RunManifest {
        command: "solve",
        config_path: Some(a.config.display().to_string()),
        config_sha256: Some(sha),
        tool_version: env!("CARGO_PKG_VERSION"),
        threads,
        options: a,
        outputs,
    };
    write_text(&a.out, "manifest.json", &json(&manifest))?;

    println!("objective: {}", report.objective);
    println!("termination: {:?} after {} iterations", res.termination, res.iterations);
    println!("necessary condition: {}", if nec.pass { "pass" } else { "FAIL" });
    println!("sufficiency (sampled): {}", if suf.pass { "pass" } else { "not established" });
    println!("outputs written to {}", a.out.display());
    let solver_ok = matches!(res.termination, Termination::Converged | Termination::Stalled);
    Ok(if solver_ok && nec.pass { 0 } else { 1 })
}

#[derive(Serialize)]
struct CheckOutput {
    pass: bool,
    reports: Vec<CheckReport>,
}

fn cmd_check(a: &CheckArgs) -> CmdResult {
    let (spec, tree, _) = load(&a.config)?;
    let u = load_control(&a.control, &spec, &tree)?;
    let (traj, _) = evaluate(&spec, &tree, &u)?;
    let adj = solve_adjoint(&spec, &tree, &traj, &u)?;
    let nec = necessary_check(&spec, &tree, &traj, &adj, &u, a.tol)?;
    let suf = sufficiency_check(&spec, &tree, &traj, &adj, &u, a.tol, CHECK_SEED)?;

    let mut rng = instances::rng(CHECK_SEED);
    let mut dual = CheckReport::new("duality");
    for theta in 0..=spec.grid.steps {
        let run = instances::spike_at(&mut rng, &spec, &tree, theta, 0.1);
        let res = duality_residual(&spec, &tree, &traj, &adj, &u, &run)?;
        dual.push(Residual::new(format!("duality residual (spike at t_{theta})"), res, selftest::DUALITY_TOL).at_level(theta));
    }
    let grad = gradient_check(&spec, &tree, &u, selftest::GRADIENT_TOL)?;

    let out = CheckOutput { pass: nec.pass && suf.pass && dual.pass && grad.pass, reports: vec![nec, suf, dual, grad] };
    let text = json(&out);
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        write_text(dir, "check.json", &text)?;
    }
    print!("{text}");
    Ok(if out.pass { 0 } else { 1 })
}

#[derive(Serialize)]
struct SimulateOutput {
    direction: Direction,
    objective: f64,
    objective_internal: f64,
}

fn cmd_simulate(a: &SimulateArgs) -> CmdResult {
    let (spec, tree, _) = load(&a.config)?;
    let u = load_control(&a.control, &spec, &tree)?;
    let (traj, j) = evaluate(&spec, &tree, &u)?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        write_trajectory(create(dir, "trajectory.csv")?, &spec, &tree, &traj, &u)?;
    }
    print!("{}", json(&SimulateOutput { direction: spec.direction, objective: spec.user_objective(j), objective_internal: j }));
    Ok(0)
}

fn cmd_prodcons(a: &ProdconsArgs) -> CmdResult {
    let replica = ProdconsReplica::new(a.delta, a.h, a.n)?;
    let (cmp, _) = compare(&replica, a.x0, &OptimizerOptions::default())?;
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    println!(
        "{:>6} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}  differs",
        "t", "p_replica", "p_general", "q_replica", "q_general", "v_replica", "v_general"
    );
    for r in &cmp.rows {
        println!(
            "{:>6} {:>10.6} {:>10.6} {:>10} {:>10} {:>10} {:>10}  {}",
            format!("{}", r.t),
            r.p_replica,
            r.p_general.mean,
            opt(r.q_replica),
            opt(r.q_general.map(|v| v.mean)),
            opt(r.v_replica),
            opt(r.v_general.map(|v| v.mean)),
            if r.differs { "yes" } else { "no" }
        );
    }
    for n in &cmp.notes {
        println!("note: {n}");
    }
    if let Some(path) = &a.plot_data {
        let f = fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
        write_plot_data(BufWriter::new(f), &replica.plot_rows())?;
        println!("plot data written to {}", path.display());
    }
    if let Some(path) = &a.table {
        fs::write(path, json(&cmp)).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(0)
}

fn cmd_selftest(a: &SelftestArgs) -> CmdResult {
    let suites = a.suites.iter().map(|s| s.parse::<Suite>()).collect::<Result<Vec<_>, _>>()?;
    let fault = a.inject_fault.as_deref().map(str::parse::<Fault>).transpose()?;
    let opts = SelftestOptions { suites, trials: a.trials, fault, seed: a.seed };
    let report = selftest::run(&opts)?;
    for s in &report.suites {
        println!("{}", s.summary());
    }
    fs::write(&a.report, report.to_json() + "\n").with_context(|| format!("cannot write {}", a.report.display()))?;
    if report.pass {
        println!("all {} criteria pass; report written to {}", report.suites.len(), a.report.display());
        Ok(0)
    } else {
        let failed: Vec<String> = report.failures().iter().map(|s| format!("{}. {}", s.criterion, s.title)).collect();
        println!("FAILED: {}; report written to {}", failed.join(", "), a.report.display());
        Ok(1)
    }
}
