//! Projected-gradient solver and an exhaustive grid oracle.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{check_control_shape, evaluate, project_control, ControlProcess};
use crate::problem::ProblemSpec;
use crate::smp::smp_gradient;
use crate::tree::{AdaptedProcess, ScenarioTree};

/// Candidate cap for [`brute_force`].
pub const BRUTE_FORCE_CAP: f64 = 1e7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerOptions {
    pub max_iters: usize,
    /// First trial step; later iterations start from the Barzilai–Borwein
    /// step when it is positive.
    pub step_init: f64,
    pub armijo_c: f64,
    pub shrink: f64,
    pub grad_tol: f64,
    /// Relative decrease `(J − J⁺) / (1 + |J|)` below which the run stalls.
    pub stall_tol: f64,
    /// When set, front ends draw the starting control with [`random_control`]
    /// instead of the family default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self { max_iters: 500, step_init: 1.0, armijo_c: 1e-4, shrink: 0.5, grad_tol: 1e-8, stall_tol: 1e-15, seed: None }
    }
}

impl OptimizerOptions {
    pub fn check(&self) -> Result<()> {
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::Validation(format!("shrink must lie in (0, 1), got {}", self.shrink)));
        }
        if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) {
            return Err(Error::Validation(format!("armijo_c must lie in (0, 1), got {}", self.armijo_c)));
        }
        if !(self.step_init > 0.0 && self.step_init.is_finite()) {
            return Err(Error::Validation("step_init must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// `‖project(u − g) − u‖∞ ≤ grad_tol`.
    Converged,
    /// Accepted step decreased `J` by no more than `stall_tol · (1 + |J|)`.
    Stalled,
    MaxIters,
    LineSearchFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    /// Internal (minimized) objective.
    pub j: f64,
    /// `‖project(u − g) − u‖∞`.
    pub proj_grad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub u: ControlProcess,
    /// Internal (minimized) objective at `u`.
    pub j: f64,
    pub iterations: usize,
    pub history: Vec<HistoryEntry>,
    pub termination: Termination,
}

fn proj_grad_norm(spec: &ProblemSpec, u: &ControlProcess, g: &ControlProcess) -> f64 {
    let mut worst = 0.0f64;
    for (k, vals) in u.levels() {
        for (i, v) in vals.iter().enumerate() {
            let step = spec.admissible.project(k, &(v - g.get(k, i))) - v;
            worst = worst.max(step.amax());
        }
    }
    worst
}

/// Starting control drawn uniformly from `box ∩ [−1, 1]` per coordinate.
pub fn random_control(spec: &ProblemSpec, tree: &ScenarioTree, seed: u64) -> ControlProcess {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    AdaptedProcess::from_fn(tree, 0..=spec.grid.steps, |k, _| {
        let (lo, hi) = (spec.admissible.lo(k), spec.admissible.hi(k));
        DVector::from_fn(spec.dims.r, |a, _| {
            let (l, h) = (lo[a].max(-1.0), hi[a].min(1.0));
            if l < h {
                rng.gen_range(l..h)
            } else {
                lo[a].max(hi[a].min(0.0))
            }
        })
    })
}

/// `Σ_k E⟨a, b⟩` over the control levels.
fn inner(tree: &ScenarioTree, a: &ControlProcess, b: &ControlProcess) -> f64 {
    a.levels().map(|(k, _)| tree.expect_by(k, |i| a.get(k, i).dot(b.get(k, i)))).sum()
}

fn diff(a: &ControlProcess, b: &ControlProcess) -> ControlProcess {
    a.map(|k, i, v| v - b.get(k, i))
}

/// Relative resolution of `J` below which function values no longer rank
/// nearby controls.
const J_RESOLUTION: f64 = 1e-14;

/// Iterations without a new best projected gradient, all with decreases
/// under `stall_tol`, before the run counts as stalled.
const STALL_PATIENCE: usize = 10;

/// Projected gradient with Armijo backtracking:
/// `u ← project(u − α g)` with `g = −H_u`, accepted when
/// `J(u⁺) ≤ J(u) + c Σ_m P(m) ⟨g(m), u⁺(m) − u(m)⟩`.
/// The trial `α` is the Barzilai–Borwein step `⟨s, s⟩ / ⟨s, y⟩` in the
/// probability-weighted inner product (`s`, `y` the last control and
/// gradient changes).
///
/// Near the optimum the predicted decrease drops below the resolution of
/// `J`; there a step with `J(u⁺) ≤ J(u)` is accepted when the directional
/// derivative at `u⁺` is at most `(1 − 2c)` times the initial descent rate
/// (approximate Wolfe), so the history stays nonincreasing while `H_u`
/// keeps shrinking.
pub fn optimize(spec: &ProblemSpec, tree: &ScenarioTree, u0: &ControlProcess, opts: &OptimizerOptions) -> Result<OptimizeResult> {
    opts.check()?;
    check_control_shape(spec, tree, u0)?;
    let mut u = project_control(spec, u0);
    let (_, mut j) = evaluate(spec, tree, &u)?;
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut prev: Option<(ControlProcess, ControlProcess)> = None;
    let mut g = smp_gradient(spec, tree, &u)?;
    let (mut best_pg, mut idle) = (f64::INFINITY, 0);
    let termination = loop {
        let pg = proj_grad_norm(spec, &u, &g);
        history.push(HistoryEntry { j, proj_grad: pg });
        if pg <= opts.grad_tol {
            break Termination::Converged;
        }
        if pg < best_pg {
            best_pg = pg;
            idle = 0;
        } else if idle >= STALL_PATIENCE {
            break Termination::Stalled;
        }
        if iterations >= opts.max_iters {
            break Termination::MaxIters;
        }
        let mut alpha = opts.step_init;
        if let Some((u_prev, g_prev)) = &prev {
            let sd = diff(&u, u_prev);
            let sy = inner(tree, &sd, &diff(&g, g_prev));
            let bb = inner(tree, &sd, &sd) / sy;
            if sy > 0.0 && bb.is_finite() {
                alpha = bb.clamp(1e-10, 1e10);
            }
        }
        let band = J_RESOLUTION * (1.0 + j.abs());
        let mut accepted = None;
        let mut unresolved = false;
        while alpha > 1e-20 {
            let cand = u.map(|k, i, v| spec.admissible.project(k, &(v - g.get(k, i) * alpha)));
            alpha *= opts.shrink;
            let Ok((_, jc)) = evaluate(spec, tree, &cand) else { continue };
            if !jc.is_finite() {
                continue;
            }
            let step = diff(&cand, &u);
            let slope = inner(tree, &g, &step);
            if jc <= j + opts.armijo_c * slope {
                accepted = Some((cand, jc, None));
                break;
            }
            if -opts.armijo_c * slope <= band {
                unresolved = true;
                if jc <= j {
                    let gc = smp_gradient(spec, tree, &cand)?;
                    if inner(tree, &gc, &step) <= (2.0 * opts.armijo_c - 1.0) * slope {
                        accepted = Some((cand, jc, Some(gc)));
                        break;
                    }
                }
            }
        }
        let Some((cand, jc, gc)) = accepted else {
            // function values cannot separate the remaining candidates
            break if unresolved { Termination::Stalled } else { Termination::LineSearchFailure };
        };
        iterations += 1;
        if j - jc > opts.stall_tol * (1.0 + j.abs()) {
            idle = 0;
        } else {
            idle += 1;
        }
        let g_next = match gc {
            Some(gc) => gc,
            None => smp_gradient(spec, tree, &cand)?,
        };
        prev = Some((std::mem::replace(&mut u, cand), std::mem::replace(&mut g, g_next)));
        j = jc;
    };
    Ok(OptimizeResult { u, j, iterations, history, termination })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    pub u: ControlProcess,
    /// Internal (minimized) objective.
    pub j: f64,
    pub candidates: usize,
}

/// Exhaustive search over `grid_per_axis` equispaced values per control
/// coordinate of every node. Boxes must be finite; degenerate axes use their
/// single point. Ties go to the first candidate in odometer order.
pub fn brute_force(spec: &ProblemSpec, tree: &ScenarioTree, grid_per_axis: usize) -> Result<BruteForceResult> {
    if grid_per_axis == 0 {
        return Err(Error::Usage("grid needs at least one point per axis".into()));
    }
    if !spec.admissible.is_bounded() {
        return Err(Error::Usage("brute force needs finite boxes".into()));
    }
    // (level, node, component) per axis with its grid values
    let mut axes: Vec<(usize, usize, usize, Vec<f64>)> = Vec::new();
    for k in 0..=spec.grid.steps {
        let (lo, hi) = (spec.admissible.lo(k), spec.admissible.hi(k));
        for i in 0..tree.level_len(k) {
            for a in 0..spec.dims.r {
                let vals = if lo[a] == hi[a] || grid_per_axis == 1 {
                    vec![lo[a]]
                } else {
                    (0..grid_per_axis).map(|s| lo[a] + (hi[a] - lo[a]) * s as f64 / (grid_per_axis - 1) as f64).collect()
                };
                axes.push((k, i, a, vals));
            }
        }
    }
    let size: f64 = axes.iter().map(|ax| ax.3.len() as f64).product();
    if size > BRUTE_FORCE_CAP {
        return Err(Error::GridTooLarge { size, cap: BRUTE_FORCE_CAP });
    }
    let total = size as usize;
    let template = AdaptedProcess::constant(tree, 0..=spec.grid.steps, DVector::zeros(spec.dims.r));
    let decode = |mut idx: usize| {
        let mut u = template.clone();
        // last axis varies fastest
        for (k, i, a, vals) in axes.iter().rev() {
            u.get_mut(*k, *i)[*a] = vals[idx % vals.len()];
            idx /= vals.len();
        }
        u
    };
    let best = (0..total)
        .into_par_iter()
        .filter_map(|idx| evaluate(spec, tree, &decode(idx)).ok().map(|(_, j)| (j, idx)))
        .filter(|(j, _)| j.is_finite())
        .reduce_with(|a, b| match a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)) {
            std::cmp::Ordering::Greater => b,
            _ => a,
        });
    let (j, idx) = best.ok_or_else(|| Error::Validation("no grid candidate has a finite cost".into()))?;
    Ok(BruteForceResult { u: decode(idx), j, candidates: total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::constant_control;
    use crate::problem::{AdmissibleSet, Coefficients, Dims, Direction, LqMeanField, LqStage, LqTerminal, NoiseConfig};
    use crate::tree::TimeGrid;
    use std::sync::Arc;

    fn dv(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn e1_from_one() {
        let spec = LqMeanField::e1_spec(AdmissibleSet::unbounded(1, 0)).unwrap();
        let tree = spec.build_tree().unwrap();
        let res = optimize(&spec, &tree, &constant_control(&tree, dv(1.0)), &OptimizerOptions::default()).unwrap();
        assert!(res.u.get(0, 0)[0].abs() <= 1e-8);
        assert!((res.j - 1.0).abs() <= 1e-10);
        assert!(res.history.windows(2).all(|w| w[1].j <= w[0].j));
    }

    #[test]
    fn stationary_start_stops_immediately() {
        let spec = LqMeanField::e1_spec(AdmissibleSet::unbounded(1, 0)).unwrap();
        let tree = spec.build_tree().unwrap();
        let res = optimize(&spec, &tree, &constant_control(&tree, dv(0.0)), &OptimizerOptions::default()).unwrap();
        assert!(res.iterations <= 1);
        assert_eq!(res.termination, Termination::Converged);
    }

    fn mean_field_square() -> ProblemSpec {
        // f = u, φ = (Ex)², so J(u) = u²
        let dims = Dims { n: 1, r: 1, d: 1 };
        let mut st = LqStage::zeros(dims);
        st.b[(0, 0)] = 1.0;
        let mut term = LqTerminal::zeros(1);
        term.g_bar[(0, 0)] = 2.0;
        let fam: Arc<dyn Coefficients> = Arc::new(LqMeanField::new(dims, vec![st], term).unwrap());
        ProblemSpec::new(
            TimeGrid::new(0.0, 1.0, 0).unwrap(),
            NoiseConfig::Binary,
            DVector::zeros(1),
            fam,
            AdmissibleSet::unbounded(1, 0),
            Direction::Minimize,
        )
        .unwrap()
    }

    #[test]
    fn mean_field_square_from_point_seven() {
        let spec = mean_field_square();
        let tree = spec.build_tree().unwrap();
        let g = smp_gradient(&spec, &tree, &constant_control(&tree, dv(0.7))).unwrap();
        assert!((g.get(0, 0)[0] - 1.4).abs() < 1e-15);
        let res = optimize(&spec, &tree, &constant_control(&tree, dv(0.7)), &OptimizerOptions::default()).unwrap();
        assert!(res.u.get(0, 0)[0].abs() < 1e-8);
    }

    #[test]
    fn e1_brute_force() {
        let spec = LqMeanField::e1_spec(AdmissibleSet::uniform(dv(-1.0), dv(1.0), 0).unwrap()).unwrap();
        let tree = spec.build_tree().unwrap();
        let bf = brute_force(&spec, &tree, 41).unwrap();
        assert_eq!(bf.u.get(0, 0)[0], 0.0);
        assert_eq!(bf.j, 1.0);
    }

    #[test]
    fn shifted_running_cost() {
        // l = (u − 0.3)² = u² − 0.6u + 0.09; the constant does not move the argmin
        let dims = Dims { n: 1, r: 1, d: 1 };
        let mut st = LqStage::zeros(dims);
        st.r[(0, 0)] = 2.0;
        st.r_lin[0] = -0.6;
        let fam: Arc<dyn Coefficients> = Arc::new(LqMeanField::new(dims, vec![st], LqTerminal::zeros(1)).unwrap());
        let spec = ProblemSpec::new(
            TimeGrid::new(0.0, 1.0, 0).unwrap(),
            NoiseConfig::Binary,
            DVector::zeros(1),
            fam,
            AdmissibleSet::uniform(dv(0.0), dv(1.0), 0).unwrap(),
            Direction::Minimize,
        )
        .unwrap();
        let tree = spec.build_tree().unwrap();
        let bf = brute_force(&spec, &tree, 11).unwrap();
        assert!((bf.u.get(0, 0)[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn degenerate_box_and_cap() {
        let spec = LqMeanField::e1_spec(AdmissibleSet::uniform(dv(0.25), dv(0.25), 0).unwrap()).unwrap();
        let tree = spec.build_tree().unwrap();
        let bf = brute_force(&spec, &tree, 101).unwrap();
        assert_eq!(bf.u.get(0, 0)[0], 0.25);
        assert_eq!(bf.candidates, 1);

        let big = crate::problem::Prodcons::spec(&Default::default(), 0.5, 3, 1.0).unwrap();
        let tree = big.build_tree().unwrap();
        assert!(matches!(brute_force(&big, &tree, 101), Err(Error::Usage(_))));
    }

    #[test]
    fn grid_cap_refuses() {
        let spec = LqMeanField::e1_spec(AdmissibleSet::uniform(dv(-1.0), dv(1.0), 0).unwrap()).unwrap();
        let spec = ProblemSpec::new(
            TimeGrid::new(0.0, 1.0, 3).unwrap(),
            NoiseConfig::Binary,
            DVector::zeros(1),
            Arc::new(LqMeanField::e1()),
            AdmissibleSet::uniform(dv(-1.0), dv(1.0), 3).unwrap(),
            spec.direction,
        )
        .unwrap();
        let tree = spec.build_tree().unwrap();
        match brute_force(&spec, &tree, 11) {
            Err(Error::GridTooLarge { size, .. }) => assert_eq!(size, 11f64.powi(15)),
            other => panic!("expected cap error, got {other:?}"),
        }
    }
}
