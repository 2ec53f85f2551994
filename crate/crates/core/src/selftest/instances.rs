//! Seeded random problem instances shared by the self-test suites and the
//! property tests.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjoint::{ForwardForcing, LinearBSDEData};
use crate::error::Result;
use crate::forward::ControlProcess;
use crate::problem::{
    AdmissibleSet, CoefficientSource, Dims, Direction, FamilyConfig, LqMeanField, LqStage, LqTerminal, NoiseConfig, ProblemSpec, Prodcons,
    ProdconsParams, SineMeanField, SineParams, TablesConfig,
};
use crate::smp::VariationalRun;
use crate::tree::{AdaptedProcess, ScenarioTree, TimeGrid};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

fn vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.gen_range(-scale..scale))
}

/// `scale · MMᵀ / n + shift · I`, symmetric positive semidefinite.
fn psd(rng: &mut ChaCha8Rng, n: usize, scale: f64, shift: f64) -> DMatrix<f64> {
    let m = mat(rng, n, n, 1.0);
    (&m * m.transpose()) * (scale / n as f64) + DMatrix::identity(n, n) * shift
}

/// Dimensions with `n ≤ max.n`, `r ≤ max.r`, `d ≤ max.d`.
pub fn dims(rng: &mut ChaCha8Rng, max: Dims) -> Dims {
    Dims { n: rng.gen_range(1..=max.n), r: rng.gen_range(1..=max.r), d: rng.gen_range(1..=max.d) }
}

pub fn step_size(rng: &mut ChaCha8Rng) -> f64 {
    [0.25, 0.5, 1.0][rng.gen_range(0..3)]
}

fn lq_stage(rng: &mut ChaCha8Rng, dims: Dims, mean_field: bool) -> LqStage {
    let Dims { n, r, d } = dims;
    let mf = if mean_field { 1.0 } else { 0.0 };
    LqStage {
        a: mat(rng, n, n, 0.5),
        a_bar: mat(rng, n, n, 0.4) * mf,
        b: mat(rng, n, r, 0.8),
        c: vec(rng, n, 0.5),
        sig_x: (0..d).map(|_| mat(rng, n, n, 0.4)).collect(),
        sig_y: (0..d).map(|_| mat(rng, n, n, 0.4) * mf).collect(),
        sig_u: (0..d).map(|_| mat(rng, n, r, 0.4)).collect(),
        sig_0: (0..d).map(|_| vec(rng, n, 0.5)).collect(),
        q: psd(rng, n, 1.0, 0.0),
        q_bar: psd(rng, n, 0.5, 0.0) * mf,
        r: psd(rng, r, 0.5, 0.2),
        q_lin: vec(rng, n, 0.5),
        q_bar_lin: vec(rng, n, 0.5) * mf,
        r_lin: vec(rng, r, 0.5),
    }
}

/// Convex time-varying LQ instance with one stage per step.
pub fn lq_family(rng: &mut ChaCha8Rng, dims: Dims, steps: usize, mean_field: bool) -> Result<LqMeanField> {
    let stages = (0..=steps).map(|_| lq_stage(rng, dims, mean_field)).collect();
    let mf = if mean_field { 1.0 } else { 0.0 };
    let terminal = LqTerminal {
        g: psd(rng, dims.n, 1.0, 0.0),
        g_bar: psd(rng, dims.n, 0.5, 0.0) * mf,
        g_lin: vec(rng, dims.n, 0.5),
        g_bar_lin: vec(rng, dims.n, 0.5) * mf,
    };
    LqMeanField::new(dims, stages, terminal)
}

/// LQ problem on binary noise with the given box (unbounded when `None`).
pub fn lq_spec(
    rng: &mut ChaCha8Rng,
    dims: Dims,
    steps: usize,
    h: f64,
    mean_field: bool,
    admissible: Option<AdmissibleSet>,
) -> Result<ProblemSpec> {
    let fam = lq_family(rng, dims, steps, mean_field)?;
    let x0 = vec(rng, dims.n, 1.0);
    let admissible = admissible.unwrap_or_else(|| AdmissibleSet::unbounded(dims.r, steps));
    let tables = TablesConfig::from_family(&fam);
    let spec = ProblemSpec::new(TimeGrid::new(0.0, h, steps)?, NoiseConfig::Binary, x0, Arc::new(fam), admissible, Direction::Minimize)?;
    Ok(spec.with_source(CoefficientSource::Tables(tables)))
}

/// Production–consumption problem with randomized rates.
pub fn prodcons_spec(rng: &mut ChaCha8Rng, steps: usize) -> Result<ProblemSpec> {
    let params = ProdconsParams {
        depreciation: rng.gen_range(0.0..1.0),
        delta_util: rng.gen_range(0.3..0.7),
        income_rate: rng.gen_range(0.5..1.5),
        volatility: rng.gen_range(0.1..0.6),
        v_min: 1e-6,
    };
    let h = [0.25, 0.5][rng.gen_range(0..2)];
    Prodcons::spec(&params, h, steps, rng.gen_range(0.5..2.0))
}

/// Smooth nonlinear mean-field problem (drift and diffusion nonlinear in
/// state, mean and control).
pub fn sine_spec(rng: &mut ChaCha8Rng, dims: Dims, steps: usize, h: f64) -> Result<ProblemSpec> {
    let params = SineParams {
        a: rng.gen_range(-0.6..0.6),
        b: rng.gen_range(-0.6..0.6),
        c: rng.gen_range(-0.5..0.5),
        s: (0..dims.d).map(|_| rng.gen_range(0.1..0.5)).collect(),
        g: rng.gen_range(-0.4..0.4),
        k: None,
        q: rng.gen_range(0.5..1.5),
        rho: rng.gen_range(0.5..1.5),
        kappa: rng.gen_range(0.0..0.5),
        g_t: rng.gen_range(0.5..1.5),
        g_y: rng.gen_range(0.0..0.5),
        kappa_t: rng.gen_range(0.0..0.5),
    };
    let fam = SineMeanField::new(dims, params.clone())?;
    let spec = ProblemSpec::new(
        TimeGrid::new(0.0, h, steps)?,
        NoiseConfig::Binary,
        vec(rng, dims.n, 1.0),
        Arc::new(fam),
        AdmissibleSet::unbounded(dims.r, steps),
        Direction::Minimize,
    )?;
    Ok(spec.with_source(CoefficientSource::Family(FamilyConfig::SineMeanfield(params))))
}

/// Control away from any domain boundary: consumption in `[0.3, 1]` for
/// the production–consumption family, `[−1, 1]` otherwise, then projected.
pub fn interior_control(rng: &mut ChaCha8Rng, spec: &ProblemSpec, tree: &ScenarioTree) -> ControlProcess {
    let prodcons = matches!(spec.source(), Some(CoefficientSource::Family(FamilyConfig::Prodcons(_))));
    let (lo, hi) = if prodcons { (0.3, 1.0) } else { (-1.0, 1.0) };
    AdaptedProcess::from_fn(tree, 0..=spec.grid.steps, |k, _| {
        spec.admissible.project(k, &DVector::from_fn(spec.dims.r, |_, _| rng.gen_range(lo..hi)))
    })
}

/// Spike at a random level with unit-box direction per node.
pub fn spike(rng: &mut ChaCha8Rng, spec: &ProblemSpec, tree: &ScenarioTree, epsilon: f64) -> VariationalRun {
    let theta = rng.gen_range(0..=spec.grid.steps);
    spike_at(rng, spec, tree, theta, epsilon)
}

/// Spike at level `theta` with unit-box direction per node.
pub fn spike_at(rng: &mut ChaCha8Rng, spec: &ProblemSpec, tree: &ScenarioTree, theta: usize, epsilon: f64) -> VariationalRun {
    let delta_v = (0..tree.level_len(theta)).map(|_| vec(rng, spec.dims.r, 1.0)).collect();
    VariationalRun { theta, delta_v, epsilon }
}

/// Random linear data on `tree` with state dimension `n`; mean-field blocks
/// are zero unless requested, and forward forcing is always present.
pub fn linear_data(rng: &mut ChaCha8Rng, tree: &ScenarioTree, n: usize, mean_field: bool) -> LinearBSDEData {
    let steps = tree.depth() - 1;
    let d = tree.noise_dim();
    let zero = AdaptedProcess::constant(tree, 0..=steps, DMatrix::zeros(n, n));
    let mut m = |scale: f64| AdaptedProcess::from_fn(tree, 0..=steps, |_, _| mat(rng, n, n, scale));
    let a = m(0.4);
    let a1 = if mean_field { m(0.3) } else { zero.clone() };
    let b = (0..d).map(|_| m(0.3)).collect();
    let b1 = (0..d).map(|_| if mean_field { m(0.3) } else { zero.clone() }).collect();
    let mut v = |range: std::ops::RangeInclusive<usize>| AdaptedProcess::from_fn(tree, range, |_, _| vec(rng, n, 1.0));
    let ell = v(0..=steps);
    let terminal = v(steps + 1..=steps + 1);
    let phi = v(0..=steps);
    let psi = (0..d).map(|_| v(0..=steps)).collect();
    LinearBSDEData { a, a1, b, b1, ell, terminal, forcing: Some(ForwardForcing { phi, psi }) }
}

/// Same data with `A1 = B1 = 0`.
pub fn without_mean_field(data: &LinearBSDEData) -> LinearBSDEData {
    let zero = |p: &AdaptedProcess<DMatrix<f64>>| p.map(|_, _, x| DMatrix::zeros(x.nrows(), x.ncols()));
    LinearBSDEData { a1: zero(&data.a1), b1: data.b1.iter().map(zero).collect(), ..data.clone() }
}
