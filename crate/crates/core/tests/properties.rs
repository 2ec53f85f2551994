//! Randomized invariants of the tree, forward, adjoint and SMP layers.

use std::sync::Arc;

use mfsmp_core::adjoint::{linearize, solve_adjoint, solve_backward};
use mfsmp_core::forward::{evaluate, simulate};
use mfsmp_core::io::{read_control, write_control};
use mfsmp_core::optimizer::{optimize, random_control, OptimizerOptions};
use mfsmp_core::problem::{AdmissibleSet, Dims, Direction, LqMeanField, LqStage, LqTerminal, NoiseConfig, ProblemSpec};
use mfsmp_core::selftest::instances;
use mfsmp_core::smp::{first_order_increment, hamiltonian_u_process, necessary_check, smp_gradient, variational_solve};
use mfsmp_core::tree::{build_tree, cond_expect, expect, AdaptedProcess, NoiseModel, TimeGrid};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;

fn config() -> ProptestConfig {
    ProptestConfig { cases: 24, ..ProptestConfig::default() }
}

fn small_dims() -> Dims {
    Dims { n: 3, r: 2, d: 2 }
}

/// Rebuilds an LQ spec from a modified family, keeping everything else.
fn respec(spec: &ProblemSpec, fam: LqMeanField) -> ProblemSpec {
    ProblemSpec::new(spec.grid, NoiseConfig::Binary, spec.x0.clone(), Arc::new(fam), spec.admissible.clone(), Direction::Minimize).unwrap()
}

fn scaled_cost(s: &LqStage, c: f64) -> LqStage {
    LqStage {
        q: &s.q * c,
        q_bar: &s.q_bar * c,
        r: &s.r * c,
        q_lin: &s.q_lin * c,
        q_bar_lin: &s.q_bar_lin * c,
        r_lin: &s.r_lin * c,
        ..s.clone()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn tower_property(seed in any::<u64>(), d in 1usize..=2, steps in 0usize..=2, trinomial in any::<bool>()) {
        let mut rng = instances::rng(seed);
        let noise = if trinomial { NoiseModel::trinomial(d, 0.5, 0.25).unwrap() } else { NoiseModel::binary(d, 0.5) };
        let tree = build_tree(TimeGrid::new(0.0, 0.5, steps).unwrap(), noise).unwrap();
        let top = steps + 1;
        let z = AdaptedProcess::from_fn(&tree, top..=top, |_, _| rng.gen_range(-1.0..1.0));
        let lhs: f64 = expect(&tree, &z, top).unwrap();
        let mid = AdaptedProcess::from_fn(&tree, steps..=steps, |k, i| cond_expect(&tree, &z, k, i).unwrap());
        let rhs: f64 = expect(&tree, &mid, steps).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-14, "{lhs} vs {rhs}");
    }

    #[test]
    fn project_is_idempotent(lo in -2.0f64..0.0, width in 0.0f64..2.0, v in proptest::collection::vec(-5.0f64..5.0, 2)) {
        let set = AdmissibleSet::uniform(DVector::from_element(2, lo), DVector::from_element(2, lo + width), 0).unwrap();
        let once = set.project(0, &DVector::from_vec(v));
        prop_assert!(set.contains(0, &once));
        prop_assert_eq!(set.project(0, &once), once);
    }

    #[test]
    fn mean_follows_recursion(seed in any::<u64>()) {
        let mut rng = instances::rng(seed);
        let dims = instances::dims(&mut rng, small_dims());
        let steps = rng.gen_range(0..=3);
        let h = instances::step_size(&mut rng);
        let spec = instances::lq_spec(&mut rng, dims, steps, h, true, None).unwrap();
        let tree = spec.build_tree().unwrap();
        let u = instances::interior_control(&mut rng, &spec, &tree);
        let traj = simulate(&spec, &tree, &u).unwrap();
        let c = spec.coeffs();
        for k in 0..=steps {
            let y = &traj.mean[k];
            let fbar = tree.expect_by(k, |i| c.drift(k, traj.x.get(k, i), y, u.get(k, i)));
            let rec = y + fbar * h;
            prop_assert!((&traj.mean[k + 1] - rec).amax() <= 1e-12);
            let direct: DVector<f64> = expect(&tree, &traj.x, k + 1).unwrap();
            prop_assert!((&traj.mean[k + 1] - direct).amax() <= 1e-12);
        }
    }

    #[test]
    fn zero_noise_levels_are_identical(seed in any::<u64>()) {
        let mut rng = instances::rng(seed);
        let dims = instances::dims(&mut rng, small_dims());
        let steps = rng.gen_range(1..=3);
        let spec = instances::lq_spec(&mut rng, dims, steps, 0.5, true, None).unwrap();
        let fam = instances::lq_family(&mut rng, dims, steps, true).unwrap();
        let silent: Vec<LqStage> = fam
            .stages()
            .iter()
            .map(|s| {
                let z = |m: &Vec<_>| m.iter().map(|x: &nalgebra::DMatrix<f64>| x * 0.0).collect();
                LqStage { sig_x: z(&s.sig_x), sig_y: z(&s.sig_y), sig_u: z(&s.sig_u), sig_0: s.sig_0.iter().map(|v| v * 0.0).collect(), ..s.clone() }
            })
            .collect();
        let spec = respec(&spec, LqMeanField::new(dims, silent, fam.terminal_cost().clone()).unwrap());
        let tree = spec.build_tree().unwrap();
        // the control must also be level-constant for the state to be
        let u = AdaptedProcess::from_fn(&tree, 0..=steps, |k, _| DVector::from_element(dims.r, 0.1 * k as f64 - 0.2));
        let traj = simulate(&spec, &tree, &u).unwrap();
        for k in 0..=steps + 1 {
            let level = traj.x.level(k);
            prop_assert!(level.iter().all(|x| x == &level[0]), "level {k}");
        }
    }

    #[test]
    fn q_is_definitional(seed in any::<u64>()) {
        let mut rng = instances::rng(seed);
        let dims = instances::dims(&mut rng, small_dims());
        let steps = rng.gen_range(0..=3);
        let spec = instances::lq_spec(&mut rng, dims, steps, 0.5, true, None).unwrap();
        let tree = spec.build_tree().unwrap();
        let u = instances::interior_control(&mut rng, &spec, &tree);
        let traj = simulate(&spec, &tree, &u).unwrap();
        let adj = solve_adjoint(&spec, &tree, &traj, &u).unwrap();
        for k in 0..=steps {
            for i in 0..tree.level_len(k) {
                for (j, q) in adj.q.iter().enumerate() {
                    let want = tree.cond_expect_by(k, i, |c, w| adj.p.get(k + 1, c) * w[j]);
                    prop_assert!((q.get(k, i) - want).amax() <= 1e-14);
                }
            }
        }
    }

    #[test]
    fn mean_field_terms_are_level_constant(seed in any::<u64>(), steps in 0usize..=3) {
        let mut rng = instances::rng(seed);
        let tree = build_tree(TimeGrid::new(0.0, 0.5, steps).unwrap(), NoiseModel::binary(2, 0.5)).unwrap();
        let data = instances::linear_data(&mut rng, &tree, 2, true);
        let free = instances::without_mean_field(&data);
        // both solutions share p(t_{N+1}), so at level N they differ only by
        // the mean-field expectations (up to roundoff in the subtraction)
        let with = solve_backward(&data, &tree).unwrap();
        let without = solve_backward(&free, &tree).unwrap();
        let diff: Vec<DVector<f64>> = (0..tree.level_len(steps)).map(|i| with.p.get(steps, i) - without.p.get(steps, i)).collect();
        let scale = 1.0 + with.p.level(steps).iter().map(|v| v.amax()).fold(0.0, f64::max);
        prop_assert!(diff.iter().all(|v| (v - &diff[0]).amax() <= 1e-14 * scale));
    }

    #[test]
    fn hamiltonian_gradient_scales_with_the_cost(seed in any::<u64>()) {
        let mut rng = instances::rng(seed);
        let dims = instances::dims(&mut rng, small_dims());
        let steps = rng.gen_range(0..=2);
        let spec = instances::lq_spec(&mut rng, dims, steps, 0.5, true, None).unwrap();
        let fam = instances::lq_family(&mut rng, dims, steps, true).unwrap();
        let t = fam.terminal_cost();
        let doubled = LqMeanField::new(
            dims,
            fam.stages().iter().map(|s| scaled_cost(s, 2.0)).collect(),
            LqTerminal { g: &t.g * 2.0, g_bar: &t.g_bar * 2.0, g_lin: &t.g_lin * 2.0, g_bar_lin: &t.g_bar_lin * 2.0 },
        )
        .unwrap();
        let (base, twice) = (respec(&spec, fam), respec(&spec, doubled));
        let tree = base.build_tree().unwrap();
        let u = instances::interior_control(&mut rng, &base, &tree);
        let hu = |s: &ProblemSpec| {
            let traj = simulate(s, &tree, &u).unwrap();
            let adj = solve_adjoint(s, &tree, &traj, &u).unwrap();
            let nec = necessary_check(s, &tree, &traj, &adj, &u, 0.0).unwrap();
            (hamiltonian_u_process(s, &tree, &traj, &adj, &u).unwrap(), nec.pass)
        };
        let ((h1, pass1), (h2, pass2)) = (hu(&base), hu(&twice));
        prop_assert_eq!(pass1, pass2);
        for (k, level) in h1.levels() {
            for (i, v) in level.iter().enumerate() {
                prop_assert_eq!(v * 2.0, h2.get(k, i).clone());
            }
        }
    }

    #[test]
    fn variational_process_is_linear_in_epsilon(seed in any::<u64>()) {
        let mut rng = instances::rng(seed);
        let dims = instances::dims(&mut rng, small_dims());
        let steps = rng.gen_range(0..=3);
        let spec = instances::sine_spec(&mut rng, dims, steps, 0.5).unwrap();
        let tree = spec.build_tree().unwrap();
        let u = instances::interior_control(&mut rng, &spec, &tree);
        let traj = simulate(&spec, &tree, &u).unwrap();
        let run = instances::spike(&mut rng, &spec, &tree, 0.125);
        let one = variational_solve(&spec, &tree, &traj, &u, &run).unwrap();
        let two = variational_solve(&spec, &tree, &traj, &u, &run.with_epsilon(0.25)).unwrap();
        prop_assert!(one.map(|_, _, v| v * 2.0).max_abs_diff(&two) <= 1e-14);
    }

    #[test]
    fn spike_slope_matches_gradient(seed in any::<u64>()) {
        let mut rng = instances::rng(seed);
        let dims = instances::dims(&mut rng, small_dims());
        let steps = rng.gen_range(0..=3);
        let spec = instances::sine_spec(&mut rng, dims, steps, 0.5).unwrap();
        let tree = spec.build_tree().unwrap();
        let u = instances::interior_control(&mut rng, &spec, &tree);
        let run = instances::spike(&mut rng, &spec, &tree, 1e-3);
        let (predicted, _) = first_order_increment(&spec, &tree, &u, &run).unwrap();
        let g = smp_gradient(&spec, &tree, &u).unwrap();
        // P·g is the Euclidean gradient of J, so J moves by E⟨g, εΔv⟩
        let slope = run.epsilon * tree.expect_by(run.theta, |i| g.get(run.theta, i).dot(&run.delta_v[i]));
        prop_assert!((predicted - slope).abs() <= 1e-12 * (1.0 + slope.abs()), "{predicted} vs {slope}");
    }

    #[test]
    fn control_csv_round_trip(seed in any::<u64>()) {
        let mut rng = instances::rng(seed);
        let dims = instances::dims(&mut rng, small_dims());
        let steps = rng.gen_range(0..=3);
        let spec = instances::lq_spec(&mut rng, dims, steps, 1.0, false, None).unwrap();
        let tree = spec.build_tree().unwrap();
        let u = AdaptedProcess::from_fn(&tree, 0..=steps, |_, _| DVector::from_fn(dims.r, |_, _| rng.gen::<f64>() * 1e3 - 5e2));
        let mut buf = Vec::new();
        write_control(&mut buf, &spec, &tree, &u).unwrap();
        prop_assert!(!String::from_utf8(buf.clone()).unwrap().contains('\r'));
        prop_assert_eq!(read_control(buf.as_slice(), &spec, &tree).unwrap(), u);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn optimizer_descends_inside_the_box(seed in any::<u64>()) {
        let mut rng = instances::rng(seed);
        let dims = instances::dims(&mut rng, Dims { n: 2, r: 2, d: 1 });
        let steps = rng.gen_range(0..=2);
        let boxes = AdmissibleSet::uniform(DVector::from_element(dims.r, -0.5), DVector::from_element(dims.r, 0.5), steps).unwrap();
        let spec = instances::lq_spec(&mut rng, dims, steps, 0.5, true, Some(boxes)).unwrap();
        let tree = spec.build_tree().unwrap();
        let res = optimize(&spec, &tree, &random_control(&spec, &tree, seed), &OptimizerOptions::default()).unwrap();
        prop_assert!(res.history.windows(2).all(|w| w[1].j <= w[0].j));
        for (k, level) in res.u.levels() {
            prop_assert!(level.iter().all(|v| spec.admissible.contains(k, v)));
        }
        let (_, j) = evaluate(&spec, &tree, &res.u).unwrap();
        prop_assert_eq!(j, res.j);
    }
}

#[test]
fn linearization_is_consistent_with_solve_adjoint() {
    let mut rng = instances::rng(3);
    let spec = instances::lq_spec(&mut rng, Dims { n: 2, r: 1, d: 2 }, 2, 0.5, true, None).unwrap();
    let tree = spec.build_tree().unwrap();
    let u = instances::interior_control(&mut rng, &spec, &tree);
    let traj = simulate(&spec, &tree, &u).unwrap();
    let data = linearize(&spec, &tree, &traj, &u).unwrap();
    let a = solve_backward(&data, &tree).unwrap();
    let b = solve_adjoint(&spec, &tree, &traj, &u).unwrap();
    assert_eq!(a.p.max_abs_diff(&b.p), 0.0);
}
