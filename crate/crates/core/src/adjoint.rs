//! Linearization, the mean-field adjoint equation and the fundamental operator.
//!
//! The one-step operator of the linearized system is
//!
//! ```text
//! (Θ(t)z)(c) = (I + A)z(m) + A1·E z(t) + Σ_j (Bʲ z(m) + B1ʲ·E z(t)) wʲ(c)
//! ```
//!
//! for every child `c` of a level-`t` node `m`, and `Φ(l, k) = Θ(l−1)⋯Θ(k)`.
//! The adjoint recursion solved by [`solve_backward`] is exactly the
//! `L²(P)`-adjoint of `Θ` minus the forcing `ℓ`, which is what makes the
//! duality identity hold on the tree.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{ControlProcess, StateTrajectory};
use crate::problem::ProblemSpec;
use crate::report::{CheckReport, Residual};
use crate::tree::{AdaptedProcess, ScenarioTree};

type Vector = DVector<f64>;
type Matrix = DMatrix<f64>;

/// Forward forcing `φ(τ)`, `ψʲ(τ)` of the linear system on levels `0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardForcing {
    pub phi: AdaptedProcess<Vector>,
    pub psi: Vec<AdaptedProcess<Vector>>,
}

/// Coefficients of the linear forward/backward pair. Matrix and forcing
/// processes live on levels `0..=N`, the terminal datum on level `N+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBSDEData {
    pub a: AdaptedProcess<Matrix>,
    pub a1: AdaptedProcess<Matrix>,
    pub b: Vec<AdaptedProcess<Matrix>>,
    pub b1: Vec<AdaptedProcess<Matrix>>,
    pub ell: AdaptedProcess<Vector>,
    pub terminal: AdaptedProcess<Vector>,
    pub forcing: Option<ForwardForcing>,
}

impl LinearBSDEData {
    /// All-zero data on `tree` with state dimension `n`.
    pub fn zeros(tree: &ScenarioTree, n: usize) -> Self {
        let steps = tree.depth() - 1;
        let zm = AdaptedProcess::constant(tree, 0..=steps, Matrix::zeros(n, n));
        let d = tree.noise_dim();
        Self {
            a: zm.clone(),
            a1: zm.clone(),
            b: vec![zm.clone(); d],
            b1: vec![zm; d],
            ell: AdaptedProcess::constant(tree, 0..=steps, Vector::zeros(n)),
            terminal: AdaptedProcess::constant(tree, steps + 1..=steps + 1, Vector::zeros(n)),
            forcing: None,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.ell.get(0, 0).len()
    }

    pub fn noise_dim(&self) -> usize {
        self.b.len()
    }

    /// Last control level `N`.
    pub fn steps(&self) -> usize {
        self.ell.last_level()
    }

    /// True when neither `A1` nor any `B1ʲ` has a nonzero entry.
    pub fn is_mean_field_free(&self) -> bool {
        let zero = |p: &AdaptedProcess<Matrix>| p.levels().all(|(_, v)| v.iter().all(|m| m.iter().all(|e| *e == 0.0)));
        zero(&self.a1) && self.b1.iter().all(zero)
    }

    fn check(&self, tree: &ScenarioTree) -> Result<()> {
        let steps = tree.depth() - 1;
        let n = self.state_dim();
        let d = tree.noise_dim();
        if self.b.len() != d || self.b1.len() != d {
            return Err(Error::Usage(format!("data has {} noise blocks but the tree has d = {d}", self.b.len())));
        }
        let covers = |first: usize, last: usize, f: usize, l: usize| first == f && last == l;
        let mats = std::iter::once(&self.a).chain(std::iter::once(&self.a1)).chain(&self.b).chain(&self.b1);
        for m in mats {
            if !covers(m.first_level(), m.last_level(), 0, steps) || m.levels().any(|(_, v)| v.iter().any(|x| x.shape() != (n, n))) {
                return Err(Error::Usage("coefficient matrices must be n x n on levels 0..=N".into()));
            }
        }
        if !covers(self.ell.first_level(), self.ell.last_level(), 0, steps) {
            return Err(Error::Usage("forcing must cover levels 0..=N".into()));
        }
        if !covers(self.terminal.first_level(), self.terminal.last_level(), steps + 1, steps + 1) {
            return Err(Error::Usage("terminal datum must live on level N+1".into()));
        }
        for k in 0..=steps + 1 {
            let len = tree.level_len(k);
            if k <= steps && (self.a.level(k).len() != len || self.ell.level(k).len() != len) {
                return Err(Error::Usage(format!("data does not match the tree at level {k}")));
            }
        }
        if self.terminal.level(steps + 1).len() != tree.level_len(steps + 1) {
            return Err(Error::Usage("terminal datum does not match the leaves".into()));
        }
        Ok(())
    }
}

/// Adjoint pair: `p` on levels `0..=N+1`, `qʲ` on levels `0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSolution {
    pub p: AdaptedProcess<Vector>,
    pub q: Vec<AdaptedProcess<Vector>>,
}

/// Evaluates the adjoint coefficients along `(x̂, Ex̂, û)`:
/// `A = h f_x`, `A1 = h f_y`, `Bʲ = σʲ_x`, `B1ʲ = σʲ_y`, `ℓ = l_x + E l_y`,
/// terminal `φ_x + E φ_y`. With `bse_literal` the factor `h` on `A1` is dropped.
pub fn linearize(spec: &ProblemSpec, tree: &ScenarioTree, traj: &StateTrajectory, u: &ControlProcess) -> Result<LinearBSDEData> {
    let c = spec.coeffs();
    let h = spec.grid.h;
    let h1 = if spec.conventions.bse_literal { 1.0 } else { h };
    let d = spec.dims.d;
    let steps = spec.grid.steps;

    let mut a = Vec::with_capacity(steps + 1);
    let mut a1 = Vec::with_capacity(steps + 1);
    let mut b = vec![Vec::with_capacity(steps + 1); d];
    let mut b1 = vec![Vec::with_capacity(steps + 1); d];
    let mut ell = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let y = &traj.mean[k];
        #[allow(clippy::type_complexity)]
        let nodes: Vec<(Matrix, Matrix, Vec<(Matrix, Matrix)>, Vector, Vector)> = (0..tree.level_len(k))
            .into_par_iter()
            .map(|i| {
                let (x, v) = (traj.x.get(k, i), u.get(k, i));
                let jf = c.drift_jac(k, x, y, v);
                let js = (0..d)
                    .map(|j| {
                        let s = c.diffusion_jac(j, k, x, y, v);
                        (s.x, s.y)
                    })
                    .collect();
                let g = c.running_grad(k, x, y, v).map_err(|e| e.at(k, tree.node(k, i).id))?;
                Ok((jf.x * h, jf.y * h1, js, g.x, g.y))
            })
            .collect::<Result<_>>()?;
        let e_ly = tree.expect_by(k, |i| nodes[i].4.clone());
        let mut lev_a = Vec::with_capacity(nodes.len());
        let mut lev_a1 = Vec::with_capacity(nodes.len());
        let mut lev_b = vec![Vec::with_capacity(nodes.len()); d];
        let mut lev_b1 = vec![Vec::with_capacity(nodes.len()); d];
        let mut lev_ell = Vec::with_capacity(nodes.len());
        for (ax, ay, js, lx, _) in nodes {
            lev_a.push(ax);
            lev_a1.push(ay);
            for (j, (sx, sy)) in js.into_iter().enumerate() {
                lev_b[j].push(sx);
                lev_b1[j].push(sy);
            }
            lev_ell.push(lx + &e_ly);
        }
        a.push(lev_a);
        a1.push(lev_a1);
        for j in 0..d {
            b[j].push(std::mem::take(&mut lev_b[j]));
            b1[j].push(std::mem::take(&mut lev_b1[j]));
        }
        ell.push(lev_ell);
    }
    let t = steps + 1;
    let y = &traj.mean[t];
    let grads: Vec<_> = (0..tree.level_len(t)).map(|i| c.terminal_grad(traj.x.get(t, i), y)).collect();
    let e_py = tree.expect_by(t, |i| grads[i].y.clone());
    let terminal = grads.into_iter().map(|g| g.x + &e_py).collect();

    Ok(LinearBSDEData {
        a: AdaptedProcess::from_levels(tree, 0, a)?,
        a1: AdaptedProcess::from_levels(tree, 0, a1)?,
        b: b.into_iter().map(|l| AdaptedProcess::from_levels(tree, 0, l)).collect::<Result<_>>()?,
        b1: b1.into_iter().map(|l| AdaptedProcess::from_levels(tree, 0, l)).collect::<Result<_>>()?,
        ell: AdaptedProcess::from_levels(tree, 0, ell)?,
        terminal: AdaptedProcess::single_level(t, terminal),
        forcing: None,
    })
}

/// Backward recursion from `p(t_{N+1}) = −terminal`:
///
/// ```text
/// qʲ(t) = E{p(t+h) wʲ | F_t}
/// p(t)  = (I + Aᵀ) E{p(t+h) | F_t} + E[A1ᵀ E{p(t+h) | F_t}]
///         + Σ_j Bʲᵀ qʲ(t) + Σ_j E[B1ʲᵀ qʲ(t)] − ℓ(t)
/// ```
pub fn solve_backward(data: &LinearBSDEData, tree: &ScenarioTree) -> Result<AdjointSolution> {
    data.check(tree)?;
    let steps = data.steps();
    let d = data.noise_dim();
    let mut p_levels: Vec<Vec<Vector>> = vec![Vec::new(); steps + 2];
    let mut q_levels: Vec<Vec<Vec<Vector>>> = vec![vec![Vec::new(); steps + 1]; d];
    p_levels[steps + 1] = data.terminal.level(steps + 1).iter().map(|v| -v).collect();

    for k in (0..=steps).rev() {
        let next = &p_levels[k + 1];
        let local: Vec<(Vector, Vec<Vector>)> = (0..tree.level_len(k))
            .into_par_iter()
            .map(|i| {
                let ep = tree.cond_expect_by(k, i, |c, _| next[c].clone());
                let qs = (0..d).map(|j| tree.cond_expect_by(k, i, |c, w| &next[c] * w[j])).collect();
                (ep, qs)
            })
            .collect();
        let mut mf = tree.expect_by(k, |i| data.a1.get(k, i).tr_mul(&local[i].0));
        for j in 0..d {
            mf += tree.expect_by(k, |i| data.b1[j].get(k, i).tr_mul(&local[i].1[j]));
        }
        let level: Vec<Vector> = local
            .par_iter()
            .enumerate()
            .map(|(i, (ep, qs))| {
                let mut p = ep + data.a.get(k, i).tr_mul(ep) + &mf - data.ell.get(k, i);
                for (j, q) in qs.iter().enumerate() {
                    p += data.b[j].get(k, i).tr_mul(q);
                }
                p
            })
            .collect();
        p_levels[k] = level;
        for (j, ql) in q_levels.iter_mut().enumerate() {
            ql[k] = local.iter().map(|(_, qs)| qs[j].clone()).collect();
        }
    }
    Ok(AdjointSolution {
        p: AdaptedProcess::from_levels(tree, 0, p_levels)?,
        q: q_levels.into_iter().map(|l| AdaptedProcess::from_levels(tree, 0, l)).collect::<Result<_>>()?,
    })
}

/// Linearizes along the trajectory and solves the adjoint equation.
pub fn solve_adjoint(spec: &ProblemSpec, tree: &ScenarioTree, traj: &StateTrajectory, u: &ControlProcess) -> Result<AdjointSolution> {
    solve_backward(&linearize(spec, tree, traj, u)?, tree)
}

fn unit_level(tree: &ScenarioTree, z: &AdaptedProcess<Vector>, t: usize) -> Result<()> {
    if !z.covers(t) || z.level(t).len() != tree.level_len(t) {
        return Err(Error::Usage(format!("process is not defined on level {t}")));
    }
    Ok(())
}

fn theta_level(data: &LinearBSDEData, tree: &ScenarioTree, t: usize, z: &[Vector]) -> Vec<Vector> {
    let d = data.noise_dim();
    let ez = tree.expect_by(t, |i| z[i].clone());
    z.par_iter()
        .enumerate()
        .flat_map_iter(|(m, zm)| {
            let drift = zm + data.a.get(t, m) * zm + data.a1.get(t, m) * &ez;
            let vol: Vec<Vector> = (0..d).map(|j| data.b[j].get(t, m) * zm + data.b1[j].get(t, m) * &ez).collect();
            tree.branches().iter().map(move |br| {
                let mut v = drift.clone();
                for (j, s) in vol.iter().enumerate() {
                    v.axpy(br.w[j], s, 1.0);
                }
                v
            })
        })
        .collect()
}

/// One application of `Θ(t)`: level-`t` values to level-`t+1` values.
pub fn theta_apply(data: &LinearBSDEData, tree: &ScenarioTree, t: usize, z: &AdaptedProcess<Vector>) -> Result<AdaptedProcess<Vector>> {
    data.check(tree)?;
    unit_level(tree, z, t)?;
    if t > data.steps() {
        return Err(Error::Usage(format!("Θ is defined for levels 0..={}, got {t}", data.steps())));
    }
    Ok(AdaptedProcess::single_level(t + 1, theta_level(data, tree, t, z.level(t))))
}

/// `Φ(l, k) z` for a level-`k` process `z`; the identity for `l = k` and the
/// zero process on level `l` for `l < k`.
pub fn phi_apply(
    data: &LinearBSDEData,
    tree: &ScenarioTree,
    l: usize,
    k: usize,
    z: &AdaptedProcess<Vector>,
) -> Result<AdaptedProcess<Vector>> {
    data.check(tree)?;
    if l > tree.depth() {
        return Err(Error::Usage(format!("level {l} is beyond the tree depth {}", tree.depth())));
    }
    if l < k {
        return Ok(AdaptedProcess::single_level(l, vec![Vector::zeros(data.state_dim()); tree.level_len(l)]));
    }
    unit_level(tree, z, k)?;
    let mut cur = z.level(k).to_vec();
    for t in k..l {
        cur = theta_level(data, tree, t, &cur);
    }
    Ok(AdaptedProcess::single_level(l, cur))
}

fn forcing_increment(f: &ForwardForcing, tree: &ScenarioTree, tau: usize) -> Vec<Vector> {
    let mut out = Vec::with_capacity(tree.level_len(tau + 1));
    for m in 0..tree.level_len(tau) {
        for br in tree.branches() {
            let mut g = f.phi.get(tau, m).clone();
            for (j, psi) in f.psi.iter().enumerate() {
                g.axpy(br.w[j], psi.get(tau, m), 1.0);
            }
            out.push(g);
        }
    }
    out
}

fn forcing(data: &LinearBSDEData) -> Result<&ForwardForcing> {
    let f = data.forcing.as_ref().ok_or_else(|| Error::Usage("forward forcing φ, ψ is missing".into()))?;
    if f.psi.len() != data.noise_dim() {
        return Err(Error::Usage("forcing ψ must have one process per noise component".into()));
    }
    Ok(f)
}

/// Representation formula `z(t) = Φ(t, 0)ξ0 + Σ_{τ<t} Φ(t, τ+1) g(τ)`,
/// with `g(τ)(c) = φ(τ) + Σ_j ψʲ(τ) wʲ(c)`.
pub fn forward_rep(data: &LinearBSDEData, tree: &ScenarioTree, xi0: &Vector) -> Result<AdaptedProcess<Vector>> {
    data.check(tree)?;
    let f = forcing(data)?;
    let top = tree.depth();
    let root = AdaptedProcess::single_level(0, vec![xi0.clone()]);
    let increments: Vec<AdaptedProcess<Vector>> =
        (0..top).map(|tau| AdaptedProcess::single_level(tau + 1, forcing_increment(f, tree, tau))).collect();
    let mut levels = Vec::with_capacity(top + 1);
    for t in 0..=top {
        let mut z = phi_apply(data, tree, t, 0, &root)?.level(t).to_vec();
        for (tau, g) in increments.iter().enumerate().take(t) {
            let term = phi_apply(data, tree, t, tau + 1, g)?;
            for (a, b) in z.iter_mut().zip(term.level(t)) {
                *a += b;
            }
        }
        levels.push(z);
    }
    AdaptedProcess::from_levels(tree, 0, levels)
}

/// Direct recursion `z(t+h) = Θ(t) z(t) + φ(t) + Σ_j ψʲ(t) wʲ`, `z(t_0) = ξ0`.
pub fn linear_forward(data: &LinearBSDEData, tree: &ScenarioTree, xi0: &Vector) -> Result<AdaptedProcess<Vector>> {
    data.check(tree)?;
    let f = forcing(data)?;
    let mut z = AdaptedProcess::single_level(0, vec![xi0.clone()]);
    for t in 0..tree.depth() {
        let ez = tree.expect_by(t, |i| z.get(t, i).clone());
        let mut next = Vec::with_capacity(tree.level_len(t + 1));
        for m in 0..tree.level_len(t) {
            let zm = z.get(t, m);
            for c in tree.children(t, m) {
                let w = tree.increment(t + 1, c);
                let mut v = zm + data.a.get(t, m) * zm + data.a1.get(t, m) * &ez + f.phi.get(t, m);
                for (j, wj) in w.iter().enumerate() {
                    v += (data.b[j].get(t, m) * zm + data.b1[j].get(t, m) * &ez + f.psi[j].get(t, m)) * *wj;
                }
                next.push(v);
            }
        }
        z.push_level(next);
    }
    Ok(z)
}

/// How [`closed_form_p`] computed `Φᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClosedFormRoute {
    /// Products of one-step matrices along tree paths (`A1 = B1 = 0`).
    PathProduct,
    /// Adjoint by duality `⟨Φz, g⟩ = ⟨z, Φᵀg⟩` under the tree inner product.
    /// Diagnostic only.
    Duality,
}

/// `p(t) = −E{Φᵀ(t_{N+1}, t) h_{N+1} + Σ_{s=t}^{N} Φᵀ(s, t) ℓ(s) | F_t}`.
pub fn closed_form_p(data: &LinearBSDEData, tree: &ScenarioTree) -> Result<(AdaptedProcess<Vector>, ClosedFormRoute)> {
    data.check(tree)?;
    if data.is_mean_field_free() {
        Ok((closed_form_paths(data, tree), ClosedFormRoute::PathProduct))
    } else {
        Ok((closed_form_duality(data, tree)?, ClosedFormRoute::Duality))
    }
}

fn closed_form_paths(data: &LinearBSDEData, tree: &ScenarioTree) -> AdaptedProcess<Vector> {
    let n = data.state_dim();
    let d = data.noise_dim();
    let top = tree.depth();
    let datum = |s: usize, i: usize| if s == top { data.terminal.get(s, i) } else { data.ell.get(s, i) };
    AdaptedProcess::from_fn(tree, 0..=top, |t, m| {
        // (node at level s, Φ(s, t) restricted to the path, conditional probability)
        let mut frontier = vec![(m, Matrix::identity(n, n), 1.0)];
        let mut acc = -datum(t, m);
        for s in t..top {
            let mut next = Vec::with_capacity(frontier.len() * tree.branching());
            for (node, mat, prob) in &frontier {
                for (c, br) in tree.children(s, *node).zip(tree.branches()) {
                    let mut step = Matrix::identity(n, n) + data.a.get(s, *node);
                    for j in 0..d {
                        step += data.b[j].get(s, *node) * br.w[j];
                    }
                    next.push((c, step * mat, prob * br.prob));
                }
            }
            frontier = next;
            for (node, mat, prob) in &frontier {
                acc -= mat.tr_mul(datum(s + 1, *node)) * *prob;
            }
        }
        acc
    })
}

fn closed_form_duality(data: &LinearBSDEData, tree: &ScenarioTree) -> Result<AdaptedProcess<Vector>> {
    let n = data.state_dim();
    let top = tree.depth();
    let datum = |s: usize| if s == top { data.terminal.level(s) } else { data.ell.level(s) };
    let mut levels = Vec::with_capacity(top + 1);
    for t in 0..=top {
        let level: Vec<Vector> = (0..tree.level_len(t))
            .into_par_iter()
            .map(|m| {
                let pm = tree.prob(t, m);
                let mut out = Vector::zeros(n);
                for i in 0..n {
                    let mut z = vec![Vector::zeros(n); tree.level_len(t)];
                    z[m][i] = 1.0 / pm;
                    let mut total = 0.0;
                    for s in t..=top {
                        if s > t {
                            z = theta_level(data, tree, s - 1, &z);
                        }
                        let g = datum(s);
                        total += tree.expect_by(s, |c| z[c].dot(&g[c]));
                    }
                    out[i] = -total;
                }
                out
            })
            .collect();
        levels.push(level);
    }
    AdaptedProcess::from_levels(tree, 0, levels)
}

/// Second moments `E‖p(t)‖²` and `E‖qʲ(t)‖²` per level; passes iff all are finite.
pub fn integrability_report(adj: &AdjointSolution, tree: &ScenarioTree) -> CheckReport {
    let mut report = CheckReport::new("integrability");
    for (k, vals) in adj.p.levels() {
        let m = tree.expect_by(k, |i| vals[i].norm_squared());
        report.push(Residual::info(format!("E|p|^2 at t_{k}"), m).at_level(k));
    }
    for (j, q) in adj.q.iter().enumerate() {
        for (k, vals) in q.levels() {
            let m = tree.expect_by(k, |i| vals[i].norm_squared());
            report.push(Residual::info(format!("E|q^{}|^2 at t_{k}", j + 1), m).at_level(k));
        }
    }
    report
}

/// Smallest singular value over the nodes of level `t` of the `n × n` matrix
/// whose columns are `(Φ(t, 0) eᵢ)(c)`. Optional diagnostic for tiny instances.
pub fn invertibility_diagnostic(data: &LinearBSDEData, tree: &ScenarioTree) -> Result<CheckReport> {
    data.check(tree)?;
    let n = data.state_dim();
    let mut columns: Vec<Vec<Vector>> = (0..n).map(|i| vec![Vector::from_fn(n, |r, _| if r == i { 1.0 } else { 0.0 })]).collect();
    let mut report = CheckReport::new("invertibility");
    for t in 0..=tree.depth() {
        if t > 0 {
            for col in columns.iter_mut() {
                *col = theta_level(data, tree, t - 1, col);
            }
        }
        let (mut smin, mut at) = (f64::INFINITY, 0);
        #[allow(clippy::needless_range_loop)]
        for c in 0..tree.level_len(t) {
            let m = Matrix::from_fn(n, n, |r, i| columns[i][c][r]);
            let s = m.singular_values().min();
            if s < smin {
                smin = s;
                at = c;
            }
        }
        report.push(Residual::info(format!("min singular value of Phi(t_{t}, t_0)"), smin).at(t, tree.node(t, at).id));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{build_tree, NoiseModel, TimeGrid};

    fn tree(steps: usize, h: f64) -> ScenarioTree {
        build_tree(TimeGrid::new(0.0, h, steps).unwrap(), NoiseModel::binary(1, h)).unwrap()
    }

    fn dv(v: f64) -> Vector {
        Vector::from_element(1, v)
    }

    #[test]
    fn q_from_two_children() {
        let t = tree(0, 1.0);
        let mut data = LinearBSDEData::zeros(&t, 1);
        // p(t+h) = −terminal = (3, 1) on the (+1, −1) children
        data.terminal = AdaptedProcess::single_level(1, vec![dv(-3.0), dv(-1.0)]);
        let adj = solve_backward(&data, &t).unwrap();
        assert_eq!(adj.q[0].get(0, 0)[0], 1.0);
        assert_eq!(adj.p.get(0, 0)[0], 2.0);
    }

    #[test]
    fn zero_data_zero_adjoint() {
        let t = tree(2, 0.5);
        let adj = solve_backward(&LinearBSDEData::zeros(&t, 2), &t).unwrap();
        assert!(adj.p.levels().all(|(_, v)| v.iter().all(|x| x.iter().all(|e| *e == 0.0))));
        let rep = integrability_report(&adj, &t);
        assert!(rep.pass);
        assert!(rep.residuals.iter().all(|r| r.value == 0.0));
    }

    #[test]
    fn theta_examples() {
        let t = tree(1, 1.0);
        let mut data = LinearBSDEData::zeros(&t, 1);
        let z = AdaptedProcess::single_level(1, vec![dv(1.0), dv(3.0)]);
        let out = theta_apply(&data, &t, 1, &z).unwrap();
        assert_eq!(out.level(2).iter().map(|v| v[0]).collect::<Vec<_>>(), vec![1.0, 1.0, 3.0, 3.0]);

        data.a = AdaptedProcess::constant(&t, 0..=1, Matrix::identity(1, 1));
        let out = theta_apply(&data, &t, 1, &z).unwrap();
        assert_eq!(out.level(2).iter().map(|v| v[0]).collect::<Vec<_>>(), vec![2.0, 2.0, 6.0, 6.0]);

        data.a = AdaptedProcess::constant(&t, 0..=1, Matrix::zeros(1, 1));
        data.a1 = AdaptedProcess::constant(&t, 0..=1, Matrix::identity(1, 1));
        // level mean of z is 2
        let out = theta_apply(&data, &t, 1, &z).unwrap();
        assert_eq!(out.level(2).iter().map(|v| v[0]).collect::<Vec<_>>(), vec![3.0, 3.0, 5.0, 5.0]);
    }

    #[test]
    fn phi_conventions() {
        let t = tree(2, 1.0);
        let data = LinearBSDEData::zeros(&t, 1);
        let z = AdaptedProcess::single_level(1, vec![dv(1.0), dv(2.0)]);
        assert_eq!(phi_apply(&data, &t, 1, 1, &z).unwrap(), z);
        let zero = phi_apply(&data, &t, 0, 1, &z).unwrap();
        assert_eq!(zero.level(0), &[dv(0.0)]);
    }

    #[test]
    fn telescoping_forcing() {
        let t = tree(3, 1.0);
        let mut data = LinearBSDEData::zeros(&t, 1);
        data.forcing = Some(ForwardForcing {
            phi: AdaptedProcess::constant(&t, 0..=3, dv(0.5)),
            psi: vec![AdaptedProcess::constant(&t, 0..=3, dv(0.0))],
        });
        let z = forward_rep(&data, &t, &dv(1.0)).unwrap();
        for k in 0..=4 {
            assert!(z.level(k).iter().all(|v| v[0] == 1.0 + 0.5 * k as f64));
        }
        data.forcing = None;
        assert!(matches!(forward_rep(&data, &t, &dv(0.0)), Err(Error::Usage(_))));
    }

    #[test]
    fn closed_form_constant_terminal() {
        let t = tree(2, 0.5);
        let mut data = LinearBSDEData::zeros(&t, 2);
        let c = Vector::from_vec(vec![1.5, -2.0]);
        data.terminal = AdaptedProcess::constant(&t, 3..=3, c.clone());
        let (p, route) = closed_form_p(&data, &t).unwrap();
        assert_eq!(route, ClosedFormRoute::PathProduct);
        assert!(p.levels().all(|(_, v)| v.iter().all(|x| *x == -&c)));
    }

    #[test]
    fn closed_form_single_step() {
        let t = tree(0, 1.0);
        let mut data = LinearBSDEData::zeros(&t, 1);
        data.a = AdaptedProcess::constant(&t, 0..=0, Matrix::from_element(1, 1, 0.3));
        data.b[0] = AdaptedProcess::constant(&t, 0..=0, Matrix::from_element(1, 1, 0.2));
        data.ell = AdaptedProcess::constant(&t, 0..=0, dv(0.7));
        data.terminal = AdaptedProcess::single_level(1, vec![dv(2.0), dv(-1.0)]);
        let (p, _) = closed_form_p(&data, &t).unwrap();
        // −E{(1.3 + 0.2 w) h} − ℓ with w = ±1
        let expected = -(0.5 * 1.5 * 2.0 - 0.5 * 1.1) - 0.7;
        assert!((p.get(0, 0)[0] - expected).abs() < 1e-15);
        let adj = solve_backward(&data, &t).unwrap();
        assert!((adj.p.get(0, 0)[0] - expected).abs() < 1e-15);
    }
}
