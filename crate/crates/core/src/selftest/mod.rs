//! Acceptance suites over seeded random instances.
//!
//! Every suite is a pure function of the base seed and the trial count, so
//! its JSON report is byte-identical across runs and thread counts. Reports
//! carry no timings for the same reason.

pub mod instances;

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::adjoint::{closed_form_p, forward_rep, linear_forward, phi_apply, solve_adjoint, solve_backward, ClosedFormRoute};
use crate::error::{Error, Result};
use crate::forward::simulate;
use crate::io::write_plot_data;
use crate::optimizer::{brute_force, optimize, random_control, OptimizerOptions};
use crate::problem::{AdmissibleSet, Conventions, Dims};
use crate::replica::{compare, ProdconsReplica};
use crate::report::{CheckReport, Residual};
use crate::smp::{duality_residual, gradient_fd_check, necessary_check, rate_check, smp_gradient, sufficiency_check, GRADIENT_FD_STEP};
use crate::tree::{build_tree, validate_noise, AdaptedProcess, NoiseModel, TimeGrid};

pub const DEFAULT_SEED: u64 = 20_240_917;

pub const NOISE_TOL: f64 = 1e-14;
pub const DUALITY_TOL: f64 = 1e-10;
pub const GRADIENT_TOL: f64 = 1e-6;
pub const SEMIGROUP_TOL: f64 = 1e-12;
pub const REPRESENTATION_TOL: f64 = 1e-12;
pub const CLOSED_FORM_TOL: f64 = 1e-10;
pub const OPTIMIZER_GAP_TOL: f64 = 1e-4;
pub const NECESSARY_TOL: f64 = 1e-6;
pub const BRUTE_FORCE_GRID: usize = 101;
const MEAN_FIELD_CLOSED_FORM_NODES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Noise,
    Duality,
    Gradient,
    Operator,
    Rates,
    Optimizer,
    Replica,
    Determinism,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Noise,
        Suite::Duality,
        Suite::Gradient,
        Suite::Operator,
        Suite::Rates,
        Suite::Optimizer,
        Suite::Replica,
        Suite::Determinism,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Noise => "noise",
            Suite::Duality => "duality",
            Suite::Gradient => "gradient",
            Suite::Operator => "operator",
            Suite::Rates => "rates",
            Suite::Optimizer => "optimizer",
            Suite::Replica => "replica",
            Suite::Determinism => "determinism",
        }
    }

    /// Acceptance criterion number.
    pub fn criterion(self) -> u8 {
        self as u8 + 1
    }

    pub fn title(self) -> &'static str {
        match self {
            Suite::Noise => "noise moments",
            Suite::Duality => "duality identity",
            Suite::Gradient => "gradient consistency",
            Suite::Operator => "fundamental operator",
            Suite::Rates => "perturbation rates",
            Suite::Optimizer => "optimizer vs brute force",
            Suite::Replica => "production-consumption reproduction",
            Suite::Determinism => "determinism",
        }
    }

    /// Number of random instances when no trial count is given; `None` for
    /// suites with a fixed instance list.
    pub fn default_trials(self) -> Option<usize> {
        match self {
            Suite::Duality => Some(50),
            Suite::Gradient => Some(20),
            Suite::Operator => Some(10),
            Suite::Rates => Some(6),
            Suite::Optimizer => Some(5),
            Suite::Noise | Suite::Replica | Suite::Determinism => None,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown suite {s:?}; expected one of {}", names(&Suite::ALL))))
    }
}

fn names(suites: &[Suite]) -> String {
    suites.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ")
}

/// Deliberate defects that the suites must detect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Feed the negated adjoint gradient to the finite-difference comparison.
    GradSign,
    /// Solve the adjoint with the factor `h` dropped on the `f_y` term.
    BseLiteral,
}

impl Fault {
    pub const ALL: [Fault; 2] = [Fault::GradSign, Fault::BseLiteral];

    pub fn name(self) -> &'static str {
        match self {
            Fault::GradSign => "grad-sign",
            Fault::BseLiteral => "bse-literal",
        }
    }
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Fault::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            let all: Vec<_> = Fault::ALL.iter().map(|f| f.name()).collect();
            Error::Usage(format!("unknown fault {s:?}; expected one of {}", all.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestOptions {
    /// Suites to run, in criterion order; empty means all.
    pub suites: Vec<Suite>,
    /// Overrides every suite's default instance count.
    pub trials: Option<usize>,
    pub fault: Option<Fault>,
    pub seed: u64,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self { suites: Vec::new(), trials: None, fault: None, seed: DEFAULT_SEED }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub criterion: u8,
    pub suite: Suite,
    pub title: String,
    pub pass: bool,
    pub instances: Vec<CheckReport>,
}

impl SuiteReport {
    fn new(suite: Suite, instances: Vec<CheckReport>) -> Self {
        let pass = !instances.is_empty() && instances.iter().all(|r| r.pass);
        Self { criterion: suite.criterion(), suite, title: suite.title().into(), pass, instances }
    }

    /// Worst residual over all instances, with the instance name.
    pub fn worst(&self) -> Option<(&str, &Residual)> {
        let mut best: Option<(&str, &Residual)> = None;
        for inst in &self.instances {
            let Some(r) = worst_checked(inst) else { continue };
            let replace = match best {
                None => true,
                Some((_, b)) => (!r.passes() && b.passes()) || (r.passes() == b.passes() && ratio(r) > ratio(b)),
            };
            if replace {
                best = Some((&inst.name, r));
            }
        }
        best
    }

    /// One-line summary without timings.
    pub fn summary(&self) -> String {
        let passed = self.instances.iter().filter(|r| r.pass).count();
        let worst = match self.worst() {
            Some((name, r)) => format!("; worst {} = {:.3e} (tol {:.0e}) in {}", r.label, r.value, r.tol.unwrap_or(f64::NAN), name),
            None => String::new(),
        };
        format!(
            "[{}] {}. {}: {}/{} instances pass{}",
            if self.pass { "PASS" } else { "FAIL" },
            self.criterion,
            self.title,
            passed,
            self.instances.len(),
            worst
        )
    }
}

fn ratio(r: &Residual) -> f64 {
    match r.tol {
        Some(t) if t > 0.0 => r.value / t,
        Some(_) if r.value <= 0.0 => 0.0,
        _ => f64::INFINITY,
    }
}

fn worst_checked(report: &CheckReport) -> Option<&Residual> {
    report.residuals.iter().filter(|r| r.tol.is_some()).max_by(|a, b| (!a.passes()).cmp(&!b.passes()).then(ratio(a).total_cmp(&ratio(b))))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestReport {
    pub seed: u64,
    pub fault: Option<Fault>,
    pub trials: Option<usize>,
    pub pass: bool,
    pub suites: Vec<SuiteReport>,
}

impl SelftestReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    pub fn failures(&self) -> Vec<&SuiteReport> {
        self.suites.iter().filter(|s| !s.pass).collect()
    }
}

/// Runs the selected suites in criterion order.
pub fn run(opts: &SelftestOptions) -> Result<SelftestReport> {
    if opts.trials == Some(0) {
        return Err(Error::Usage("--trials must be at least 1".into()));
    }
    let mut selected = if opts.suites.is_empty() { Suite::ALL.to_vec() } else { opts.suites.clone() };
    selected.sort();
    selected.dedup();
    let suites = selected.into_iter().map(|s| run_suite(s, opts)).collect::<Result<Vec<_>>>()?;
    let pass = suites.iter().all(|s| s.pass);
    Ok(SelftestReport { seed: opts.seed, fault: opts.fault, trials: opts.trials, pass, suites })
}

pub fn run_suite(suite: Suite, opts: &SelftestOptions) -> Result<SuiteReport> {
    let trials = opts.trials.or(suite.default_trials()).unwrap_or(1);
    let instances = match suite {
        Suite::Noise => noise_suite()?,
        Suite::Duality => duality_suite(opts.seed, trials, opts.fault == Some(Fault::BseLiteral)),
        Suite::Gradient => gradient_suite(opts.seed, trials, opts.fault == Some(Fault::GradSign)),
        Suite::Operator => operator_suite(opts.seed, trials),
        Suite::Rates => rates_suite(opts.seed, trials),
        Suite::Optimizer => optimizer_suite(opts.seed, trials),
        Suite::Replica => vec![guarded("delta=0.5 h=0.5 N=5".into(), replica_instance)],
        Suite::Determinism => vec![determinism_instance(opts)?],
    };
    Ok(SuiteReport::new(suite, instances))
}

/// Turns an instance error into a failing report instead of aborting the suite.
fn guarded(label: String, f: impl FnOnce() -> Result<CheckReport>) -> CheckReport {
    match f() {
        Ok(mut r) => {
            r.name = label;
            r
        }
        Err(e) => {
            let mut r = CheckReport::new(label);
            r.push(Residual::new("error", f64::INFINITY, 0.0));
            r.note(e.to_string());
            r
        }
    }
}

fn dims_label(d: Dims) -> String {
    format!("n={} r={} d={}", d.n, d.r, d.d)
}

fn instance_seed(base: u64, suite: Suite, trial: usize) -> u64 {
    base ^ ((suite.criterion() as u64) << 40) ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn noise_suite() -> Result<Vec<CheckReport>> {
    let mut models = Vec::new();
    for d in 1..=3 {
        for h in [1.0, 0.5, 0.25, 0.01] {
            models.push((format!("binary d={d} h={h}"), NoiseModel::binary(d, h)));
        }
    }
    for d in 1..=2 {
        for (h, p) in [(1.0, 1.0 / 6.0), (0.5, 0.25), (0.25, 0.1)] {
            models.push((format!("trinomial d={d} h={h} p={p:.4}"), NoiseModel::trinomial(d, h, p)?));
        }
    }
    models.into_iter().map(|(label, m)| Ok(guarded(label, || validate_noise(&m, NOISE_TOL)))).collect()
}

/// The three coefficient families in rotation: LQ with mean-field terms,
/// production–consumption, and the nonlinear sine family.
fn family_instance(rng: &mut rand_chacha::ChaCha8Rng, trial: usize, max_steps: usize) -> Result<(String, crate::problem::ProblemSpec)> {
    let steps = rng.gen_range(0..=max_steps);
    let max = Dims { n: 3, r: 2, d: 2 };
    Ok(match trial % 3 {
        0 => {
            let dims = instances::dims(rng, max);
            let h = instances::step_size(rng);
            (format!("lq #{trial} {} N={steps} h={h}", dims_label(dims)), instances::lq_spec(rng, dims, steps, h, true, None)?)
        }
        1 => (format!("prodcons #{trial} N={steps}"), instances::prodcons_spec(rng, steps)?),
        _ => {
            let dims = instances::dims(rng, max);
            let h = instances::step_size(rng);
            (format!("sine #{trial} {} N={steps} h={h}", dims_label(dims)), instances::sine_spec(rng, dims, steps, h)?)
        }
    })
}

fn duality_suite(seed: u64, trials: usize, literal: bool) -> Vec<CheckReport> {
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = instances::rng(instance_seed(seed, Suite::Duality, t));
            let (label, spec) = match family_instance(&mut rng, t, 4) {
                Ok(x) => x,
                Err(e) => return guarded(format!("instance #{t}"), || Err(e)),
            };
            guarded(label, || {
                let spec = if literal { spec.with_conventions(Conventions { bse_literal: true, ..Default::default() }) } else { spec };
                let tree = spec.build_tree()?;
                let u = instances::interior_control(&mut rng, &spec, &tree);
                let eps = rng.gen_range(0.1..1.0);
                let run = instances::spike(&mut rng, &spec, &tree, eps);
                let traj = simulate(&spec, &tree, &u)?;
                let adj = solve_adjoint(&spec, &tree, &traj, &u)?;
                let res = duality_residual(&spec, &tree, &traj, &adj, &u, &run)?;
                let mut r = CheckReport::new("");
                r.push(Residual::new("duality residual", res, DUALITY_TOL).at_level(run.theta));
                Ok(r)
            })
        })
        .collect()
}

fn gradient_suite(seed: u64, trials: usize, flip: bool) -> Vec<CheckReport> {
    (0..trials)
        .map(|t| {
            let mut rng = instances::rng(instance_seed(seed, Suite::Gradient, t));
            let (label, spec) = match family_instance(&mut rng, t, 3) {
                Ok(x) => x,
                Err(e) => return guarded(format!("instance #{t}"), || Err(e)),
            };
            guarded(label, || {
                let tree = spec.build_tree()?;
                let u = instances::interior_control(&mut rng, &spec, &tree);
                let mut g = smp_gradient(&spec, &tree, &u)?;
                if flip {
                    g = g.map(|_, _, v| -v);
                }
                gradient_fd_check(&spec, &tree, &u, &g, GRADIENT_FD_STEP, GRADIENT_TOL)
            })
        })
        .collect()
}

fn operator_suite(seed: u64, trials: usize) -> Vec<CheckReport> {
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = instances::rng(instance_seed(seed, Suite::Operator, t));
            let trinomial = t % 2 == 1;
            let d = rng.gen_range(1..=2);
            // keep trinomial trees with d = 2 (branching 9) to a few hundred nodes
            let steps = rng.gen_range(0..=if trinomial && d == 2 { 2 } else { 4 });
            let n = rng.gen_range(1..=3);
            let h = instances::step_size(&mut rng);
            let label = format!("{} d={d} n={n} N={steps} h={h}", if trinomial { "trinomial" } else { "binary" });
            guarded(label, || {
                let noise = if trinomial { NoiseModel::trinomial(d, h, 0.25)? } else { NoiseModel::binary(d, h) };
                let tree = build_tree(TimeGrid::new(0.0, h, steps)?, noise)?;
                operator_instance(&mut rng, &tree, n)
            })
        })
        .collect()
}

fn random_level(rng: &mut rand_chacha::ChaCha8Rng, tree: &crate::tree::ScenarioTree, k: usize, n: usize) -> AdaptedProcess<DVector<f64>> {
    let vals = (0..tree.level_len(k)).map(|_| DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))).collect();
    AdaptedProcess::single_level(k, vals)
}

fn operator_instance(rng: &mut rand_chacha::ChaCha8Rng, tree: &crate::tree::ScenarioTree, n: usize) -> Result<CheckReport> {
    let top = tree.depth();
    let data = instances::linear_data(rng, tree, n, true);
    let mut report = CheckReport::new("");

    let mut semigroup = 0.0f64;
    for k in 0..=top {
        let z = random_level(rng, tree, k, n);
        for m in k..=top {
            let mid = phi_apply(&data, tree, m, k, &z)?;
            for l in m..=top {
                let direct = phi_apply(&data, tree, l, k, &z)?;
                let composed = phi_apply(&data, tree, l, m, &mid)?;
                semigroup = semigroup.max(direct.max_abs_diff(&composed));
            }
        }
    }
    report.push(Residual::new("semigroup |Phi(l,k) - Phi(l,m)Phi(m,k)|", semigroup, SEMIGROUP_TOL));

    let xi0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let rep = forward_rep(&data, tree, &xi0)?;
    let direct = linear_forward(&data, tree, &xi0)?;
    report.push(Residual::new("representation vs recursion", rep.max_abs_diff(&direct), REPRESENTATION_TOL));

    let plain = instances::without_mean_field(&data);
    let (cf, route) = closed_form_p(&plain, tree)?;
    debug_assert_eq!(route, ClosedFormRoute::PathProduct);
    let back = solve_backward(&plain, tree)?;
    report.push(Residual::new("closed form vs backward (A1 = B1 = 0)", cf.max_abs_diff(&back.p), CLOSED_FORM_TOL));

    // the duality route costs O(nodes²); diagnostic only
    if tree.node_count() <= MEAN_FIELD_CLOSED_FORM_NODES {
        let (cf_mf, _) = closed_form_p(&data, tree)?;
        let back_mf = solve_backward(&data, tree)?;
        report.push(Residual::info("closed form vs backward (mean-field, duality route)", cf_mf.max_abs_diff(&back_mf.p)));
    }
    Ok(report)
}

fn rates_suite(seed: u64, trials: usize) -> Vec<CheckReport> {
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = instances::rng(instance_seed(seed, Suite::Rates, t));
            let dims = instances::dims(&mut rng, Dims { n: 2, r: 2, d: 2 });
            let steps = rng.gen_range(1..=3);
            let h = instances::step_size(&mut rng);
            let linear = t % 2 == 1;
            let label = format!("{} #{t} {} N={steps} h={h}", if linear { "lq" } else { "sine" }, dims_label(dims));
            guarded(label, || {
                let spec = if linear {
                    instances::lq_spec(&mut rng, dims, steps, h, true, None)?
                } else {
                    instances::sine_spec(&mut rng, dims, steps, h)?
                };
                let tree = spec.build_tree()?;
                let u = instances::interior_control(&mut rng, &spec, &tree);
                let run = instances::spike(&mut rng, &spec, &tree, 1.0);
                let mut r = rate_check(&spec, &tree, &u, &run)?;
                if linear && !r.residuals.iter().any(|x| x.label.contains("linear floor")) {
                    r.push(Residual::new("linear instance reached the roundoff floor", 1.0, 0.0));
                }
                Ok(r)
            })
        })
        .collect()
}

fn optimizer_suite(seed: u64, trials: usize) -> Vec<CheckReport> {
    (0..trials)
        .map(|t| {
            let mut rng = instances::rng(instance_seed(seed, Suite::Optimizer, t));
            let steps = t % 2;
            let n = rng.gen_range(1..=2);
            let dims = Dims { n, r: 1, d: 1 };
            let h = instances::step_size(&mut rng);
            let lo = rng.gen_range(-1.0..-0.2);
            let hi = lo + rng.gen_range(0.4..1.0);
            let label = format!("lq #{t} {} N={steps} h={h} box=[{lo:.3}, {hi:.3}]", dims_label(dims));
            guarded(label, || {
                let boxes = AdmissibleSet::uniform(DVector::from_element(1, lo), DVector::from_element(1, hi), steps)?;
                let spec = instances::lq_spec(&mut rng, dims, steps, h, true, Some(boxes))?;
                let tree = spec.build_tree()?;
                let u0 = random_control(&spec, &tree, instance_seed(seed, Suite::Optimizer, t));
                let res = optimize(&spec, &tree, &u0, &OptimizerOptions::default())?;
                let bf = brute_force(&spec, &tree, BRUTE_FORCE_GRID)?;
                let mut r = CheckReport::new("");
                r.push(Residual::new("|J(optimize) - J(brute force)|", (res.j - bf.j).abs(), OPTIMIZER_GAP_TOL));
                r.push(Residual::info("J(optimize)", res.j));
                r.push(Residual::info("J(brute force)", bf.j));
                r.push(Residual::info("iterations", res.iterations as f64));
                r.note(format!("termination: {:?}", res.termination));
                let traj = simulate(&spec, &tree, &res.u)?;
                let adj = solve_adjoint(&spec, &tree, &traj, &res.u)?;
                r.absorb(necessary_check(&spec, &tree, &traj, &adj, &res.u, NECESSARY_TOL)?);
                let suff = sufficiency_check(&spec, &tree, &traj, &adj, &res.u, 1e-8, instance_seed(seed, Suite::Optimizer, t))?;
                r.notes.extend(suff.notes.last().cloned());
                Ok(r)
            })
        })
        .collect()
}

// the six-digit reference values are compared as given
#[allow(clippy::approx_constant)]
fn replica_instance() -> Result<CheckReport> {
    let (delta, h) = (0.5, 0.5);
    let replica = ProdconsReplica::new(delta, h, 5)?;
    let p = replica.p();
    let q = replica.q();
    let v = replica.consumption();
    let mut r = CheckReport::new("");
    r.push(Residual::new("|p(6h) - 1|", (p[6] - 1.0).abs(), 0.0));
    r.push(Residual::new("|p(5h) - h(2 - delta)|", (p[5] - 0.75).abs(), 0.0));
    r.push(Residual::new("|p(4h) - h^2(2 - delta)^2|", (p[4] - 0.5625).abs(), 0.0));
    r.push(Residual::new("|q(5h)|", q[5].abs(), 0.0));
    r.push(Residual::new("|q(4h)|", q[4].abs(), 0.0));
    // direct substitution into h^-delta p(t+h)^-delta
    let sub = |pn: f64| (h * pn).powf(-delta);
    r.push(Residual::new("|v(5h) - (h p(6h))^-delta|", (v[5] - sub(1.0)).abs(), 1e-6));
    r.push(Residual::new("|v(4h) - (h p(5h))^-delta|", (v[4] - sub(0.75)).abs(), 1e-6));
    r.push(Residual::new("|v(5h) - 1.414214|", (v[5] - 1.414214).abs(), 1e-6));
    r.push(Residual::new("|v(4h) - 1.632993|", (v[4] - 1.632993).abs(), 1e-6));

    let rows = replica.plot_rows();
    let mut buf = Vec::new();
    write_plot_data(&mut buf, &rows)?;
    let text = String::from_utf8(buf).map_err(|e| Error::Io(e.to_string()))?;
    let data_rows: Vec<&str> = text.lines().skip(1).collect();
    r.push(Residual::new("|plot rows - 6|", (data_rows.len() as f64 - 6.0).abs(), 0.0));
    let ts: Vec<f64> = data_rows.iter().filter_map(|l| l.split(',').next()?.parse().ok()).collect();
    let increasing = ts.len() == data_rows.len() && ts.windows(2).all(|w| w[1] > w[0]);
    r.push(Residual::new("plot t not strictly increasing", if increasing { 0.0 } else { 1.0 }, 0.0));

    let (cmp, _) = compare(&replica, 1.0, &OptimizerOptions::default())?;
    for row in &cmp.rows {
        r.push(Residual::info(format!("general p(t_{})", row.level), row.p_general.mean));
        if let Some(vg) = row.v_general {
            r.push(Residual::info(format!("general v(t_{})", row.level), vg.mean));
        }
    }
    let differing: Vec<String> = cmp.rows.iter().filter(|x| x.differs).map(|x| format!("t_{}", x.level)).collect();
    r.note(format!("replica and general solver differ at {}", if differing.is_empty() { "no level".into() } else { differing.join(", ") }));
    r.notes.extend(cmp.notes);
    Ok(r)
}

/// Suites re-run for the determinism comparison, with reduced trial counts.
const DETERMINISM_PLAN: [(Suite, Option<usize>); 6] = [
    (Suite::Noise, None),
    (Suite::Duality, Some(12)),
    (Suite::Gradient, Some(6)),
    (Suite::Operator, Some(4)),
    (Suite::Rates, Some(2)),
    (Suite::Replica, None),
];

fn determinism_instance(opts: &SelftestOptions) -> Result<CheckReport> {
    let render = |threads: usize| -> Result<String> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
        pool.install(|| {
            let mut out = String::new();
            for (suite, trials) in DETERMINISM_PLAN {
                let sub = SelftestOptions { trials, fault: None, ..opts.clone() };
                out.push_str(&serde_json::to_string(&run_suite(suite, &sub)?).expect("serializable"));
                out.push('\n');
            }
            Ok(out)
        })
    };
    let a = render(1)?;
    let b = render(4)?;
    let c = render(4)?;
    let mut r = CheckReport::new("1 thread vs 4 threads, repeated");
    r.push(Residual::new("bytes differ (1 vs 4 threads)", if a == b { 0.0 } else { 1.0 }, 0.0));
    r.push(Residual::new("bytes differ (repeat)", if b == c { 0.0 } else { 1.0 }, 0.0));
    r.push(Residual::info("report bytes", a.len() as f64));
    r.note(format!("suites compared: {}", names(&DETERMINISM_PLAN.map(|x| x.0))));
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        for f in Fault::ALL {
            assert_eq!(f.name().parse::<Fault>().unwrap(), f);
        }
        assert!(matches!("bogus".parse::<Suite>(), Err(Error::Usage(_))));
        assert_eq!(Suite::Determinism.criterion(), 8);
    }
}
