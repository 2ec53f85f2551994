//! Hamiltonian, first-order optimality, spike variations and sufficiency checks.
//!
//! Everything here works in the internal minimization orientation, where
//! `H(t, v) = ⟨E{p(t+h)|F_t}, h f⟩ + Σ_j ⟨qʲ(t), σʲ⟩ − l` and an optimal
//! control maximizes `H` along feasible directions:
//! `⟨H_u(t, û), v − û⟩ ≤ 0` for every admissible `v`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adjoint::{linearize, solve_adjoint, AdjointSolution};
use crate::error::{Error, Result};
use crate::forward::{check_control_shape, cost, evaluate, simulate, ControlProcess, StateTrajectory};
use crate::problem::{Coefficients, ProblemSpec};
use crate::report::{CheckReport, Residual};
use crate::tree::{AdaptedProcess, ScenarioTree};

type Vector = DVector<f64>;

/// Default finite-difference step for gradient checks.
pub const GRADIENT_FD_STEP: f64 = 1e-5;
/// Spike sizes used by [`rate_check`].
pub const RATE_LADDER: [f64; 3] = [1e-1, 1e-2, 1e-3];
/// Midpoint-convexity tolerance of the sampled sufficiency checks.
pub const CONVEXITY_TOL: f64 = 1e-10;
const CONVEXITY_SAMPLES: usize = 200;

/// Adjoint data frozen at one node: `E{p(t+h)|F_t}`, `qʲ(t)`, `x̂(t)`, `Ex̂(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianContext {
    pub level: usize,
    pub node: usize,
    pub ep: Vector,
    pub q: Vec<Vector>,
    pub x: Vector,
    pub y: Vector,
}

impl HamiltonianContext {
    pub fn new(tree: &ScenarioTree, traj: &StateTrajectory, adj: &AdjointSolution, k: usize, i: usize) -> Result<Self> {
        if k + 1 > tree.depth() || i >= tree.level_len(k) {
            return Err(Error::Usage(format!("no control node {i} at level {k}")));
        }
        let p = &adj.p;
        Ok(Self {
            level: k,
            node: i,
            ep: tree.cond_expect_by(k, i, |c, _| p.get(k + 1, c).clone()),
            q: adj.q.iter().map(|q| q.get(k, i).clone()).collect(),
            x: traj.x.get(k, i).clone(),
            y: traj.mean[k].clone(),
        })
    }
}

/// `H(t, v)` at the context's node.
pub fn hamiltonian(spec: &ProblemSpec, ctx: &HamiltonianContext, v: &Vector) -> Result<f64> {
    hamiltonian_at(spec.coeffs(), spec.grid.h, ctx, &ctx.x, &ctx.y, v)
}

fn hamiltonian_at(c: &dyn Coefficients, h: f64, ctx: &HamiltonianContext, x: &Vector, y: &Vector, v: &Vector) -> Result<f64> {
    let k = ctx.level;
    let mut total = h * ctx.ep.dot(&c.drift(k, x, y, v));
    for (j, q) in ctx.q.iter().enumerate() {
        total += q.dot(&c.diffusion(j, k, x, y, v));
    }
    let l = c.running(k, x, y, v).map_err(|e| Error::Domain { level: k, node: ctx.node, msg: e.0 })?;
    Ok(total - l)
}

/// `H_u = h f_uᵀ E{p(t+h)|F_t} + Σ_j σʲ_uᵀ qʲ(t) − l_u` at `v`.
pub fn hamiltonian_u(spec: &ProblemSpec, ctx: &HamiltonianContext, v: &Vector) -> Result<Vector> {
    let c = spec.coeffs();
    let k = ctx.level;
    let mut g = c.drift_jac(k, &ctx.x, &ctx.y, v).u.tr_mul(&ctx.ep) * spec.grid.h;
    for (j, q) in ctx.q.iter().enumerate() {
        g += c.diffusion_jac(j, k, &ctx.x, &ctx.y, v).u.tr_mul(q);
    }
    let l = c.running_grad(k, &ctx.x, &ctx.y, v).map_err(|e| Error::Domain { level: k, node: ctx.node, msg: e.0 })?;
    Ok(g - l.u)
}

/// `H_u(t, û(t))` at every control node.
pub fn hamiltonian_u_process(
    spec: &ProblemSpec,
    tree: &ScenarioTree,
    traj: &StateTrajectory,
    adj: &AdjointSolution,
    u: &ControlProcess,
) -> Result<ControlProcess> {
    let levels = (0..=spec.grid.steps)
        .map(|k| {
            (0..tree.level_len(k))
                .into_par_iter()
                .map(|i| {
                    let ctx = HamiltonianContext::new(tree, traj, adj, k, i)?;
                    hamiltonian_u(spec, &ctx, u.get(k, i))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    AdaptedProcess::from_levels(tree, 0, levels)
}

/// Gradient density `−H_u` of the minimized cost. The Euclidean partial
/// derivative of `J` with respect to the control at node `m` is
/// `P(m) · g(m)`.
pub fn smp_gradient(spec: &ProblemSpec, tree: &ScenarioTree, u: &ControlProcess) -> Result<ControlProcess> {
    let traj = simulate(spec, tree, u)?;
    let adj = solve_adjoint(spec, tree, &traj, u)?;
    Ok(hamiltonian_u_process(spec, tree, &traj, &adj, u)?.map(|_, _, g| -g))
}

/// Largest `⟨H_u, v − û⟩` over the box vertices at one node. An infinite
/// bound in an ascent direction of `H` contributes `|H_u,i|`.
fn worst_vertex_pairing(hu: &Vector, u: &Vector, lo: &Vector, hi: &Vector) -> f64 {
    let mut total = 0.0;
    for i in 0..hu.len() {
        let g = hu[i];
        let side = |b: f64| {
            if b.is_finite() {
                g * (b - u[i])
            } else if g * b > 0.0 {
                g.abs()
            } else {
                0.0
            }
        };
        total += side(lo[i]).max(side(hi[i])).max(0.0);
    }
    total
}

/// Checks `⟨H_u(t, û), v − û⟩ ≤ tol` for every node and box vertex `v`;
/// one residual per level carries the worst node.
pub fn necessary_check(
    spec: &ProblemSpec,
    tree: &ScenarioTree,
    traj: &StateTrajectory,
    adj: &AdjointSolution,
    u: &ControlProcess,
    tol: f64,
) -> Result<CheckReport> {
    let hu = hamiltonian_u_process(spec, tree, traj, adj, u)?;
    let mut report = CheckReport::new("necessary_condition");
    for k in 0..=spec.grid.steps {
        let (lo, hi) = (spec.admissible.lo(k), spec.admissible.hi(k));
        let (mut worst, mut at) = (f64::NEG_INFINITY, 0);
        for i in 0..tree.level_len(k) {
            let v = worst_vertex_pairing(hu.get(k, i), u.get(k, i), lo, hi);
            if v > worst {
                worst = v;
                at = i;
            }
        }
        report.push(Residual::new(format!("max <H_u, v - u> at t_{k}"), worst, tol).at(k, tree.node(k, at).id));
    }
    Ok(report)
}

/// Spike perturbation `û(θ) + εΔv` at level `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalRun {
    pub theta: usize,
    /// One `r`-vector per node of level `θ`.
    pub delta_v: Vec<Vector>,
    pub epsilon: f64,
}

impl VariationalRun {
    fn check(&self, spec: &ProblemSpec, tree: &ScenarioTree) -> Result<()> {
        if self.theta > spec.grid.steps {
            return Err(Error::Usage(format!("spike time {} is beyond N = {}", self.theta, spec.grid.steps)));
        }
        if self.delta_v.len() != tree.level_len(self.theta) || self.delta_v.iter().any(|v| v.len() != spec.dims.r) {
            return Err(Error::Usage(format!("Δv must hold one r-vector per node of level {}", self.theta)));
        }
        Ok(())
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self { epsilon, ..self.clone() }
    }

    /// `û` with the spike applied (not projected).
    pub fn perturb(&self, u: &ControlProcess) -> ControlProcess {
        let mut out = u.clone();
        for (i, dv) in self.delta_v.iter().enumerate() {
            *out.get_mut(self.theta, i) += dv * self.epsilon;
        }
        out
    }
}

/// Variational process
/// `ξ(t+h) = ξ + h(f_x ξ + f_y Eξ + δ_{tθ} f_u εΔv) + Σ_j (σʲ_x ξ + σʲ_y Eξ + δ_{tθ} σʲ_u εΔv) wʲ`,
/// `ξ(t_0) = 0`. With `xi_literal` the drift block is not multiplied by `h`.
pub fn variational_solve(
    spec: &ProblemSpec,
    tree: &ScenarioTree,
    traj: &StateTrajectory,
    u: &ControlProcess,
    run: &VariationalRun,
) -> Result<AdaptedProcess<Vector>> {
    run.check(spec, tree)?;
    check_control_shape(spec, tree, u)?;
    let c = spec.coeffs();
    let hd = if spec.conventions.xi_literal { 1.0 } else { spec.grid.h };
    let d = spec.dims.d;
    let mut xi = AdaptedProcess::single_level(0, vec![Vector::zeros(spec.dims.n)]);
    for k in 0..=spec.grid.steps {
        let exi = tree.expect_by(k, |i| xi.get(k, i).clone());
        let y = &traj.mean[k];
        let next: Vec<Vector> = (0..tree.level_len(k))
            .into_par_iter()
            .flat_map_iter(|m| {
                let (x, v, z) = (traj.x.get(k, m), u.get(k, m), xi.get(k, m));
                let jf = c.drift_jac(k, x, y, v);
                let mut drift = &jf.x * z + &jf.y * &exi;
                let spike = (k == run.theta).then(|| &run.delta_v[m] * run.epsilon);
                if let Some(s) = &spike {
                    drift += &jf.u * s;
                }
                let base = z + drift * hd;
                let vol: Vec<Vector> = (0..d)
                    .map(|j| {
                        let js = c.diffusion_jac(j, k, x, y, v);
                        let mut s = &js.x * z + &js.y * &exi;
                        if let Some(sp) = &spike {
                            s += &js.u * sp;
                        }
                        s
                    })
                    .collect();
                tree.branches().iter().map(move |br| {
                    let mut out = base.clone();
                    for (j, s) in vol.iter().enumerate() {
                        out.axpy(br.w[j], s, 1.0);
                    }
                    out
                })
            })
            .collect();
        xi.push_level(next);
    }
    Ok(xi)
}

/// `|E⟨p(t_{N+1}), ξ(t_{N+1})⟩ − Σ_t E⟨ℓ(t), ξ(t)⟩ − ε E⟨h f_uᵀ E{p(θ+h)|F_θ} + Σ_j σʲ_uᵀ qʲ(θ), Δv⟩|`.
pub fn duality_residual(
    spec: &ProblemSpec,
    tree: &ScenarioTree,
    traj: &StateTrajectory,
    adj: &AdjointSolution,
    u: &ControlProcess,
    run: &VariationalRun,
) -> Result<f64> {
    let data = linearize(spec, tree, traj, u)?;
    let xi = variational_solve(spec, tree, traj, u, run)?;
    let top = spec.grid.terminal();
    let lhs = tree.expect_by(top, |i| adj.p.get(top, i).dot(xi.get(top, i)));
    let mut rhs = 0.0;
    for k in 0..=spec.grid.steps {
        rhs += tree.expect_by(k, |i| data.ell.get(k, i).dot(xi.get(k, i)));
    }
    let c = spec.coeffs();
    let th = run.theta;
    let y = &traj.mean[th];
    let spike = tree.expect_by(th, |i| {
        let ctx = HamiltonianContext::new(tree, traj, adj, th, i).expect("valid node");
        let (x, v) = (&ctx.x, u.get(th, i));
        let mut g = c.drift_jac(th, x, y, v).u.tr_mul(&ctx.ep) * spec.grid.h;
        for (j, q) in ctx.q.iter().enumerate() {
            g += c.diffusion_jac(j, th, x, y, v).u.tr_mul(q);
        }
        g.dot(&run.delta_v[i])
    });
    rhs += run.epsilon * spike;
    Ok((lhs - rhs).abs())
}

/// `(predicted, actual)` with `predicted = −ε E⟨H_u(θ, û(θ)), Δv⟩` and
/// `actual = J(u^ε) − J(û)`.
pub fn first_order_increment(spec: &ProblemSpec, tree: &ScenarioTree, u: &ControlProcess, run: &VariationalRun) -> Result<(f64, f64)> {
    run.check(spec, tree)?;
    let (traj, j0) = evaluate(spec, tree, u)?;
    let adj = solve_adjoint(spec, tree, &traj, u)?;
    let th = run.theta;
    let hu = (0..tree.level_len(th))
        .map(|i| hamiltonian_u(spec, &HamiltonianContext::new(tree, &traj, &adj, th, i)?, u.get(th, i)))
        .collect::<Result<Vec<_>>>()?;
    let predicted = -run.epsilon * tree.expect_by(th, |i| hu[i].dot(&run.delta_v[i]));
    let ue = run.perturb(u);
    let (_, j1) = evaluate(spec, tree, &ue)?;
    Ok((predicted, j1 - j0))
}

/// Spike-size ladder check of the state perturbation estimates:
/// `ratio₁(ε) = max_k E‖x^ε − x̂‖²/ε²` must stay bounded and
/// `ratio₂(ε) = max_k E‖x^ε − x̂ − ξ‖²/ε²` must fall by at least a decade
/// per decade of `ε` (or sit at the roundoff floor `1e-20` when the
/// dynamics are linear).
pub fn rate_check(spec: &ProblemSpec, tree: &ScenarioTree, u: &ControlProcess, template: &VariationalRun) -> Result<CheckReport> {
    let base = simulate(spec, tree, u)?;
    let mut r1 = Vec::new();
    let mut r2 = Vec::new();
    let mut report = CheckReport::new("perturbation_rates");
    for eps in RATE_LADDER {
        let run = template.with_epsilon(eps);
        let pert = simulate(spec, tree, &run.perturb(u))?;
        let xi = variational_solve(spec, tree, &base, u, &run)?;
        let (mut a, mut b) = (0.0f64, 0.0f64);
        for k in 0..=spec.grid.terminal() {
            let diff = |i: usize| pert.x.get(k, i) - base.x.get(k, i);
            a = a.max(tree.expect_by(k, |i| diff(i).norm_squared()));
            b = b.max(tree.expect_by(k, |i| (diff(i) - xi.get(k, i)).norm_squared()));
        }
        r1.push(a / (eps * eps));
        r2.push(b / (eps * eps));
        report.push(Residual::info(format!("ratio1(eps={eps:.0e})"), a / (eps * eps)));
        report.push(Residual::info(format!("ratio2(eps={eps:.0e})"), b / (eps * eps)));
    }
    let (min1, max1) = r1.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let spread = if max1 == 0.0 { 1.0 } else { max1 / min1 };
    report.push(Residual::new("ratio1 max/min", spread, 10.0));
    let floor = 1e-20;
    if r2.iter().all(|v| *v <= floor) {
        report.push(Residual::new("ratio2 max (linear floor)", r2.iter().cloned().fold(0.0, f64::max), floor));
        report.note("ratio2 at the roundoff floor: the variational process is exact");
    } else {
        for w in 0..r2.len() - 1 {
            let f = if r2[w] == 0.0 { f64::INFINITY } else { r2[w + 1] / r2[w] };
            report.push(Residual::new(format!("ratio2 decay eps {:.0e} -> {:.0e}", RATE_LADDER[w], RATE_LADDER[w + 1]), f, 0.1));
        }
        let total = if r2[0] == 0.0 { f64::INFINITY } else { r2[r2.len() - 1] / r2[0] };
        report.push(Residual::new("ratio2(1e-3) / ratio2(1e-1)", total, 1e-2));
    }
    Ok(report)
}

fn sample_around(rng: &mut ChaCha8Rng, centre: &Vector) -> Vector {
    centre.map(|c| c + rng.gen_range(-1.0..1.0))
}

fn sample_control(rng: &mut ChaCha8Rng, spec: &ProblemSpec, k: usize, centre: &Vector) -> Vector {
    spec.admissible.project(k, &sample_around(rng, centre))
}

fn midpoint_gap(fa: f64, fb: f64, fm: f64) -> f64 {
    ((fm - 0.5 * (fa + fb)) / (1.0 + fa.abs() + fb.abs())).max(0.0)
}

/// Sampled evidence for the sufficient conditions:
/// (i) midpoint convexity of `φ` in `(x, y)` and of `l` and each component
/// of `f`, `σʲ` in `(x, y, u)`; (ii) convexity of `−H` in `(x, y, v)`;
/// (iii) nonnegativity of `f_y`, `σʲ_y`, `φ_y`, `l_y` along the trajectory;
/// (iv) `H(û) ≥ H(v)` for box vertices and random points of
/// `box ∩ [û−1, û+1]`.
pub fn sufficiency_check(
    spec: &ProblemSpec,
    tree: &ScenarioTree,
    traj: &StateTrajectory,
    adj: &AdjointSolution,
    u: &ControlProcess,
    tol: f64,
    seed: u64,
) -> Result<CheckReport> {
    let c = spec.coeffs();
    let (n, d) = (spec.dims.n, spec.dims.d);
    let steps = spec.grid.steps;
    let top = steps + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport::new("sufficiency");

    // (i)
    let mut gaps = [0.0f64; 4];
    for _ in 0..CONVEXITY_SAMPLES {
        let i = rng.gen_range(0..tree.level_len(top));
        let (x0, y0) = (traj.x.get(top, i), &traj.mean[top]);
        let (xa, ya, xb, yb) =
            (sample_around(&mut rng, x0), sample_around(&mut rng, y0), sample_around(&mut rng, x0), sample_around(&mut rng, y0));
        let (xm, ym) = ((&xa + &xb) * 0.5, (&ya + &yb) * 0.5);
        gaps[0] = gaps[0].max(midpoint_gap(c.terminal(&xa, &ya), c.terminal(&xb, &yb), c.terminal(&xm, &ym)));

        let k = rng.gen_range(0..=steps);
        let i = rng.gen_range(0..tree.level_len(k));
        let (x0, y0, u0) = (traj.x.get(k, i), &traj.mean[k], u.get(k, i));
        let (xa, ya, ua) = (sample_around(&mut rng, x0), sample_around(&mut rng, y0), sample_control(&mut rng, spec, k, u0));
        let (xb, yb, ub) = (sample_around(&mut rng, x0), sample_around(&mut rng, y0), sample_control(&mut rng, spec, k, u0));
        let (xm, ym, um) = ((&xa + &xb) * 0.5, (&ya + &yb) * 0.5, (&ua + &ub) * 0.5);
        if let (Ok(la), Ok(lb), Ok(lm)) = (c.running(k, &xa, &ya, &ua), c.running(k, &xb, &yb, &ub), c.running(k, &xm, &ym, &um)) {
            gaps[1] = gaps[1].max(midpoint_gap(la, lb, lm));
        }
        let (fa, fb, fm) = (c.drift(k, &xa, &ya, &ua), c.drift(k, &xb, &yb, &ub), c.drift(k, &xm, &ym, &um));
        for r in 0..n {
            gaps[2] = gaps[2].max(midpoint_gap(fa[r], fb[r], fm[r]));
        }
        for j in 0..d {
            let (sa, sb, sm) = (c.diffusion(j, k, &xa, &ya, &ua), c.diffusion(j, k, &xb, &yb, &ub), c.diffusion(j, k, &xm, &ym, &um));
            for r in 0..n {
                gaps[3] = gaps[3].max(midpoint_gap(sa[r], sb[r], sm[r]));
            }
        }
    }
    for (label, g) in
        ["(i) phi midpoint convexity", "(i) l midpoint convexity", "(i) f componentwise convexity", "(i) sigma componentwise convexity"]
            .into_iter()
            .zip(gaps)
    {
        report.push(Residual::new(label, g, CONVEXITY_TOL));
    }

    // (ii)
    let mut gap_h = 0.0f64;
    for _ in 0..CONVEXITY_SAMPLES {
        let k = rng.gen_range(0..=steps);
        let i = rng.gen_range(0..tree.level_len(k));
        let ctx = HamiltonianContext::new(tree, traj, adj, k, i)?;
        let u0 = u.get(k, i);
        let (xa, ya, ua) = (sample_around(&mut rng, &ctx.x), sample_around(&mut rng, &ctx.y), sample_control(&mut rng, spec, k, u0));
        let (xb, yb, ub) = (sample_around(&mut rng, &ctx.x), sample_around(&mut rng, &ctx.y), sample_control(&mut rng, spec, k, u0));
        let (xm, ym, um) = ((&xa + &xb) * 0.5, (&ya + &yb) * 0.5, (&ua + &ub) * 0.5);
        let h = spec.grid.h;
        if let (Ok(ha), Ok(hb), Ok(hm)) = (
            hamiltonian_at(c, h, &ctx, &xa, &ya, &ua),
            hamiltonian_at(c, h, &ctx, &xb, &yb, &ub),
            hamiltonian_at(c, h, &ctx, &xm, &ym, &um),
        ) {
            gap_h = gap_h.max(midpoint_gap(-ha, -hb, -hm));
        }
    }
    report.push(Residual::new("(ii) -H midpoint convexity in (x, y, v)", gap_h, CONVEXITY_TOL));

    // (iii)
    let mut neg = [0.0f64; 4];
    let mut neg_at = [(0usize, 0usize); 4];
    let mut bump = |slot: usize, v: f64, k: usize, id: usize| {
        if v > neg[slot] {
            neg[slot] = v;
            neg_at[slot] = (k, id);
        }
    };
    let most_negative = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0f64, |m, v| m.max(-v));
    for k in 0..=steps {
        let y = &traj.mean[k];
        for i in 0..tree.level_len(k) {
            let (x, v, id) = (traj.x.get(k, i), u.get(k, i), tree.node(k, i).id);
            bump(0, most_negative(&mut c.drift_jac(k, x, y, v).y.iter().copied()), k, id);
            for j in 0..d {
                bump(1, most_negative(&mut c.diffusion_jac(j, k, x, y, v).y.iter().copied()), k, id);
            }
            if let Ok(g) = c.running_grad(k, x, y, v) {
                bump(3, most_negative(&mut g.y.iter().copied()), k, id);
            }
        }
    }
    for i in 0..tree.level_len(top) {
        let g = c.terminal_grad(traj.x.get(top, i), &traj.mean[top]);
        bump(2, most_negative(&mut g.y.iter().copied()), top, tree.node(top, i).id);
    }
    for (slot, label) in ["(iii) f_y >= 0", "(iii) sigma_y >= 0", "(iii) phi_y >= 0", "(iii) l_y >= 0"].into_iter().enumerate() {
        report.push(Residual::new(label, neg[slot], tol).at(neg_at[slot].0, neg_at[slot].1));
    }

    // (iv)
    let (mut worst, mut worst_at) = (0.0f64, (0usize, 0usize));
    for k in 0..=steps {
        for i in 0..tree.level_len(k) {
            let ctx = HamiltonianContext::new(tree, traj, adj, k, i)?;
            let u0 = u.get(k, i);
            let h0 = hamiltonian(spec, &ctx, u0)?;
            let lo = spec.admissible.lo(k).zip_map(u0, |l, v| l.max(v - 1.0));
            let hi = spec.admissible.hi(k).zip_map(u0, |h, v| h.min(v + 1.0));
            let r = u0.len();
            let mut cands: Vec<Vector> =
                (0..1usize << r).map(|mask| Vector::from_fn(r, |a, _| if mask >> a & 1 == 1 { hi[a] } else { lo[a] })).collect();
            for _ in 0..4 {
                cands.push(Vector::from_fn(r, |a, _| if lo[a] < hi[a] { rng.gen_range(lo[a]..=hi[a]) } else { lo[a] }));
            }
            for v in cands {
                if let Ok(hv) = hamiltonian(spec, &ctx, &v) {
                    let gap = (hv - h0) / (1.0 + h0.abs());
                    if gap > worst {
                        worst = gap;
                        worst_at = (k, tree.node(k, i).id);
                    }
                }
            }
        }
    }
    report.push(Residual::new("(iv) max H(v) - H(u_hat), relative", worst, tol).at(worst_at.0, worst_at.1));

    report.note("maximum-principle form: <H_u(t, u_hat), v - u_hat> <= 0, u_hat maximizes H over the box");
    report.note("infimum form: u_hat minimizes -H, i.e. the same condition in the minimized orientation");
    report.note(if report.pass { "sufficient-conditions-hold (sampled)" } else { "sufficient conditions not established (sampled)" });
    Ok(report)
}

/// Compares `P(m)·g(m)` with central differences of the cost in each nodal
/// control coordinate. The residual is `‖P·g − fd‖∞ / max(‖fd‖∞, 1e-8)`.
pub fn gradient_fd_check(
    spec: &ProblemSpec,
    tree: &ScenarioTree,
    u: &ControlProcess,
    g: &ControlProcess,
    step: f64,
    tol: f64,
) -> Result<CheckReport> {
    check_control_shape(spec, tree, u)?;
    let r = spec.dims.r;
    let coords: Vec<(usize, usize, usize)> =
        (0..=spec.grid.steps).flat_map(|k| (0..tree.level_len(k)).flat_map(move |i| (0..r).map(move |a| (k, i, a)))).collect();
    let diffs = coords
        .par_iter()
        .map(|&(k, i, a)| {
            let mut up = u.clone();
            up.get_mut(k, i)[a] += step;
            let mut dn = u.clone();
            dn.get_mut(k, i)[a] -= step;
            let jp = cost(spec, tree, &up, &simulate(spec, tree, &up)?)?;
            let jm = cost(spec, tree, &dn, &simulate(spec, tree, &dn)?)?;
            Ok((jp - jm) / (2.0 * step))
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mut err, mut scale, mut at) = (0.0f64, 0.0f64, (0, 0));
    for (&(k, i, a), fd) in coords.iter().zip(&diffs) {
        let e = (tree.prob(k, i) * g.get(k, i)[a] - fd).abs();
        if e > err {
            err = e;
            at = (k, tree.node(k, i).id);
        }
        scale = scale.max(fd.abs());
    }
    let mut report = CheckReport::new("gradient_consistency");
    report.push(Residual::new("max |P g - fd| / max |fd|", err / scale.max(1e-8), tol).at(at.0, at.1));
    report.push(Residual::info("max |fd|", scale));
    Ok(report)
}

/// [`gradient_fd_check`] for the adjoint gradient at `u`.
pub fn gradient_check(spec: &ProblemSpec, tree: &ScenarioTree, u: &ControlProcess, tol: f64) -> Result<CheckReport> {
    let g = smp_gradient(spec, tree, u)?;
    gradient_fd_check(spec, tree, u, &g, GRADIENT_FD_STEP, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::constant_control;
    use crate::problem::{AdmissibleSet, LqMeanField};

    fn dv(v: f64) -> Vector {
        Vector::from_element(1, v)
    }

    fn e1(lo: f64, hi: f64) -> (ProblemSpec, ScenarioTree) {
        let spec = LqMeanField::e1_spec(AdmissibleSet::uniform(dv(lo), dv(hi), 0).unwrap()).unwrap();
        let tree = spec.build_tree().unwrap();
        (spec, tree)
    }

    fn solved(spec: &ProblemSpec, tree: &ScenarioTree, u0: f64) -> (ControlProcess, StateTrajectory, AdjointSolution) {
        let u = constant_control(tree, dv(u0));
        let traj = simulate(spec, tree, &u).unwrap();
        let adj = solve_adjoint(spec, tree, &traj, &u).unwrap();
        (u, traj, adj)
    }

    #[test]
    fn e1_adjoint_and_hamiltonian() {
        let (spec, tree) = e1(f64::NEG_INFINITY, f64::INFINITY);
        let (_, traj, adj) = solved(&spec, &tree, 0.0);
        assert_eq!(adj.p.level(1).iter().map(|v| v[0]).collect::<Vec<_>>(), vec![-2.0, 2.0]);
        assert_eq!(adj.q[0].get(0, 0)[0], -2.0);
        assert_eq!(adj.p.get(0, 0)[0], 0.0);
        let ctx = HamiltonianContext::new(&tree, &traj, &adj, 0, 0).unwrap();
        for v in [-1.0, 0.0, 0.5, 2.0] {
            assert!((hamiltonian(&spec, &ctx, &dv(v)).unwrap() - (-2.0 - v * v)).abs() < 1e-15);
        }
        assert_eq!(hamiltonian_u(&spec, &ctx, &dv(0.0)).unwrap()[0], 0.0);
    }

    #[test]
    fn e1_hamiltonian_gradient_at_one() {
        let (spec, tree) = e1(f64::NEG_INFINITY, f64::INFINITY);
        let (u, traj, adj) = solved(&spec, &tree, 1.0);
        let ctx = HamiltonianContext::new(&tree, &traj, &adj, 0, 0).unwrap();
        assert_eq!(hamiltonian_u(&spec, &ctx, u.get(0, 0)).unwrap()[0], -4.0);
        assert_eq!(smp_gradient(&spec, &tree, &u).unwrap().get(0, 0)[0], 4.0);
    }

    #[test]
    fn e1_necessary_condition() {
        let (spec, tree) = e1(-1.0, 1.0);
        let (u, traj, adj) = solved(&spec, &tree, 0.0);
        let rep = necessary_check(&spec, &tree, &traj, &adj, &u, 0.0).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.residuals[0].value, 0.0);

        let (u, traj, adj) = solved(&spec, &tree, 0.5);
        let rep = necessary_check(&spec, &tree, &traj, &adj, &u, 1e-6).unwrap();
        assert!(!rep.pass);
        // H_u = −2, worst vertex v = −1: (−2)(−1.5) = 3
        assert_eq!(rep.residuals[0].value, 3.0);
    }

    #[test]
    fn unbounded_directions_use_sign() {
        let hu = Vector::from_vec(vec![0.0, -0.5]);
        let u = Vector::zeros(2);
        let inf = f64::INFINITY;
        let lo = Vector::from_vec(vec![-inf, -inf]);
        let hi = Vector::from_vec(vec![inf, inf]);
        assert_eq!(worst_vertex_pairing(&hu, &u, &lo, &hi), 0.5);
        let lo = Vector::from_vec(vec![-inf, 0.0]);
        assert_eq!(worst_vertex_pairing(&hu, &u, &lo, &hi), 0.0);
    }

    #[test]
    fn e1_variational_and_duality() {
        let (spec, tree) = e1(f64::NEG_INFINITY, f64::INFINITY);
        let (u, traj, adj) = solved(&spec, &tree, 0.0);
        let run = VariationalRun { theta: 0, delta_v: vec![dv(1.0)], epsilon: 0.01 };
        let xi = variational_solve(&spec, &tree, &traj, &u, &run).unwrap();
        assert!(xi.level(1).iter().all(|v| v[0] == 0.01));
        let lhs = tree.expect_by(1, |i| adj.p.get(1, i).dot(xi.get(1, i)));
        assert_eq!(lhs, 0.0);
        assert_eq!(duality_residual(&spec, &tree, &traj, &adj, &u, &run).unwrap(), 0.0);
        let zero = variational_solve(&spec, &tree, &traj, &u, &run.with_epsilon(0.0)).unwrap();
        assert!(zero.levels().all(|(_, v)| v.iter().all(|x| x[0] == 0.0)));
    }

    #[test]
    fn e1_first_order_increment() {
        let (spec, tree) = e1(f64::NEG_INFINITY, f64::INFINITY);
        let run = VariationalRun { theta: 0, delta_v: vec![dv(1.0)], epsilon: 0.1 };
        let (pred, act) = first_order_increment(&spec, &tree, &constant_control(&tree, dv(0.0)), &run).unwrap();
        assert_eq!(pred, 0.0);
        assert!((act - 0.02).abs() < 1e-15);
        let (pred, act) = first_order_increment(&spec, &tree, &constant_control(&tree, dv(0.5)), &run).unwrap();
        assert!((pred - 0.2).abs() < 1e-15);
        assert!((act - 0.22).abs() < 1e-14);
        let (pred, act) = first_order_increment(&spec, &tree, &constant_control(&tree, dv(0.5)), &run.with_epsilon(0.0)).unwrap();
        assert_eq!((pred, act), (0.0, 0.0));
    }

    #[test]
    fn e1_rates_hit_linear_floor() {
        let (spec, tree) = e1(f64::NEG_INFINITY, f64::INFINITY);
        let run = VariationalRun { theta: 0, delta_v: vec![dv(1.0)], epsilon: 1.0 };
        let rep = rate_check(&spec, &tree, &constant_control(&tree, dv(0.3)), &run).unwrap();
        assert!(rep.pass, "{}", rep.to_json());
    }

    #[test]
    fn e1_sufficiency() {
        let (spec, tree) = e1(-1.0, 1.0);
        let (u, traj, adj) = solved(&spec, &tree, 0.0);
        let rep = sufficiency_check(&spec, &tree, &traj, &adj, &u, 1e-9, 7).unwrap();
        assert!(rep.pass, "{}", rep.to_json());
        assert!(rep.notes.iter().any(|n| n == "sufficient-conditions-hold (sampled)"));
    }

    #[test]
    fn e1_gradient_matches_fd() {
        let (spec, tree) = e1(f64::NEG_INFINITY, f64::INFINITY);
        let rep = gradient_check(&spec, &tree, &constant_control(&tree, dv(0.7)), 1e-6).unwrap();
        assert!(rep.pass, "{}", rep.to_json());
    }
}
