//! Forward simulation of the controlled mean-field system and the cost functional.
//!
//! Levels are processed breadth-first: the level mean `Ex(t_k)` is formed
//! before any node at level `k` steps, because every node's drift and
//! diffusion depend on it.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::problem::ProblemSpec;
use crate::tree::{AdaptedProcess, ScenarioTree};

/// Nodal controls over levels `0..=N`.
pub type ControlProcess = AdaptedProcess<DVector<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    /// State over levels `0..=N+1`.
    pub x: AdaptedProcess<DVector<f64>>,
    /// `Ex(t_k)` for `k = 0..=N+1`.
    pub mean: Vec<DVector<f64>>,
}

/// The same control value at every node of levels `0..=N`.
pub fn constant_control(tree: &ScenarioTree, v: DVector<f64>) -> ControlProcess {
    AdaptedProcess::constant(tree, 0..=tree.depth() - 1, v)
}

/// Each family's preferred starting control, projected into the box.
pub fn initial_control(spec: &ProblemSpec, tree: &ScenarioTree) -> ControlProcess {
    let c = spec.coeffs();
    AdaptedProcess::from_fn(tree, 0..=spec.grid.steps, |k, _| spec.admissible.project(k, &c.initial_control(k)))
}

/// Checks that `u` covers exactly levels `0..=N` with `r`-vectors.
pub fn check_control_shape(spec: &ProblemSpec, tree: &ScenarioTree, u: &ControlProcess) -> Result<()> {
    if u.first_level() != 0 || u.last_level() != spec.grid.steps {
        return Err(Error::Usage(format!(
            "control must cover levels 0..={}, got {}..={}",
            spec.grid.steps,
            u.first_level(),
            u.last_level()
        )));
    }
    for (k, vals) in u.levels() {
        if vals.len() != tree.level_len(k) {
            return Err(Error::Usage(format!("control has {} values at level {k}, tree has {}", vals.len(), tree.level_len(k))));
        }
        if let Some(i) = vals.iter().position(|v| v.len() != spec.dims.r) {
            return Err(Error::Usage(format!("control at level {k}, node {i} does not have r = {} entries", spec.dims.r)));
        }
    }
    Ok(())
}

/// Whether every nodal control lies in its box.
pub fn is_feasible(spec: &ProblemSpec, u: &ControlProcess) -> bool {
    u.levels().all(|(k, vals)| vals.iter().all(|v| spec.admissible.contains(k, v)))
}

/// Componentwise projection of every nodal control.
pub fn project_control(spec: &ProblemSpec, u: &ControlProcess) -> ControlProcess {
    u.map(|k, _, v| spec.admissible.project(k, v))
}

pub fn simulate(spec: &ProblemSpec, tree: &ScenarioTree, u: &ControlProcess) -> Result<StateTrajectory> {
    check_control_shape(spec, tree, u)?;
    let c = spec.coeffs();
    let h = spec.grid.h;
    let d = spec.dims.d;
    let mut x = AdaptedProcess::single_level(0, vec![spec.x0.clone()]);
    let mut mean = vec![spec.x0.clone()];
    for k in 0..=spec.grid.steps {
        let y = mean[k].clone();
        let next: Vec<DVector<f64>> = x
            .level(k)
            .par_iter()
            .enumerate()
            .flat_map_iter(|(i, xm)| {
                let um = u.get(k, i);
                let base = xm + c.drift(k, xm, &y, um) * h;
                let sig: Vec<DVector<f64>> = (0..d).map(|j| c.diffusion(j, k, xm, &y, um)).collect();
                tree.branches().iter().map(move |br| {
                    let mut v = base.clone();
                    for (j, s) in sig.iter().enumerate() {
                        v.axpy(br.w[j], s, 1.0);
                    }
                    v
                })
            })
            .collect();
        if next.iter().any(|v| !v.iter().all(|e| e.is_finite())) {
            return Err(Error::Simulation { level: k + 1 });
        }
        x.push_level(next);
        mean.push(tree.expect_by(k + 1, |i| x.get(k + 1, i).clone()));
    }
    Ok(StateTrajectory { x, mean })
}

/// `J = E φ(x(t_{N+1}), Ex(t_{N+1})) + E Σ_k l(t_k, x, Ex, u)` in the internal
/// (minimized) orientation.
pub fn cost(spec: &ProblemSpec, tree: &ScenarioTree, u: &ControlProcess, traj: &StateTrajectory) -> Result<f64> {
    let c = spec.coeffs();
    let mut total = 0.0;
    for k in 0..=spec.grid.steps {
        let y = &traj.mean[k];
        let vals: Vec<f64> = (0..tree.level_len(k))
            .into_par_iter()
            .map(|i| c.running(k, traj.x.get(k, i), y, u.get(k, i)).map_err(|e| e.at(k, tree.node(k, i).id)))
            .collect::<Result<_>>()?;
        total += vals.iter().enumerate().map(|(i, l)| tree.prob(k, i) * l).sum::<f64>();
    }
    let t = spec.grid.terminal();
    let y = &traj.mean[t];
    total += tree.expect_by(t, |i| c.terminal(traj.x.get(t, i), y));
    Ok(total)
}

/// Simulates and evaluates the cost in one call.
pub fn evaluate(spec: &ProblemSpec, tree: &ScenarioTree, u: &ControlProcess) -> Result<(StateTrajectory, f64)> {
    let traj = simulate(spec, tree, u)?;
    let j = cost(spec, tree, u, &traj)?;
    Ok((traj, j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{AdmissibleSet, LqMeanField, Prodcons, ProdconsParams};

    fn dv(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn e1_leaves_and_cost() {
        let spec = LqMeanField::e1_spec(AdmissibleSet::unbounded(1, 0)).unwrap();
        let tree = spec.build_tree().unwrap();
        let (traj, j) = evaluate(&spec, &tree, &constant_control(&tree, dv(0.0))).unwrap();
        let leaves: Vec<f64> = traj.x.level(1).iter().map(|v| v[0]).collect();
        assert_eq!(leaves, vec![1.0, -1.0]);
        assert_eq!(j, 1.0);
        let (_, j) = evaluate(&spec, &tree, &constant_control(&tree, dv(1.0))).unwrap();
        assert_eq!(j, 3.0);
    }

    #[test]
    fn prodcons_one_step() {
        let spec = Prodcons::spec(&ProdconsParams::default(), 0.5, 0, 1.0).unwrap();
        let tree = spec.build_tree().unwrap();
        // v = 0 lies outside the utility's domain but the dynamics are still defined
        let traj = simulate(&spec, &tree, &constant_control(&tree, dv(0.0))).unwrap();
        let s = 0.5 * 0.5f64.sqrt();
        assert!((traj.x.get(1, 0)[0] - (1.25 + s)).abs() < 1e-15);
        assert!((traj.x.get(1, 1)[0] - (1.25 - s)).abs() < 1e-15);
        let err = cost(&spec, &tree, &constant_control(&tree, dv(0.0)), &traj).unwrap_err();
        assert!(matches!(err, Error::Domain { level: 0, node: 0, .. }));
    }

    #[test]
    fn control_shape_is_checked() {
        let spec = LqMeanField::e1_spec(AdmissibleSet::unbounded(1, 0)).unwrap();
        let tree = spec.build_tree().unwrap();
        let bad = AdaptedProcess::single_level(0, vec![DVector::zeros(2)]);
        assert!(matches!(simulate(&spec, &tree, &bad), Err(Error::Usage(_))));
    }
}
