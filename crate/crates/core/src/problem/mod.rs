//! Problem definition: coefficient evaluators with analytic partials,
//! admissible control boxes and the built-in problem families.

mod config;
mod lq;
mod prodcons;
mod sine;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DomainError, Error, Result};
use crate::report::{CheckReport, Residual};
use crate::tree::{build_tree, NoiseModel, ScenarioTree, TimeGrid};

pub use config::{
    builtin, parse_problem, BoxConfig, CoefficientSource, CustomNoiseParams, DimsConfig, FamilyConfig, GridConfig, LqFamilyParams,
    LqStageConfig, LqTerminalConfig, NoiseConfig, ProblemConfig, TablesConfig, TrinomialParams,
};
pub use lq::{LqMeanField, LqStage, LqTerminal};
pub use prodcons::{Prodcons, ProdconsParams};
pub use sine::{SineMeanField, SineParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// State dimension.
    pub n: usize,
    /// Control dimension.
    pub r: usize,
    /// Noise dimension.
    pub d: usize,
}

/// Partial derivatives of a vector-valued coefficient in `(x, y, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobians {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

/// Gradient of a scalar coefficient in `(x, y, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub u: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalGradient {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
}

/// Box from which validation and convexity probes draw sample points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleDomain {
    pub x: (f64, f64),
    pub u: (f64, f64),
}

impl Default for SampleDomain {
    fn default() -> Self {
        Self { x: (-1.0, 1.0), u: (-1.0, 1.0) }
    }
}

/// Drift `f`, diffusions `σʲ`, running cost `l` and terminal cost `φ` of the
/// controlled mean-field system, with their analytic partials.
///
/// `k` is the step index and `y` always stands for the mean `Ex(t_k)`.
/// Implementations must be pure.
pub trait Coefficients: Send + Sync + fmt::Debug {
    fn dims(&self) -> Dims;

    fn drift(&self, k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn drift_jac(&self, k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> Jacobians;

    fn diffusion(&self, j: usize, k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn diffusion_jac(&self, j: usize, k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> Jacobians;

    fn running(&self, k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> std::result::Result<f64, DomainError>;
    fn running_grad(&self, k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> std::result::Result<Gradients, DomainError>;

    fn terminal(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64;
    fn terminal_grad(&self, x: &DVector<f64>, y: &DVector<f64>) -> TerminalGradient;

    fn sample_domain(&self) -> SampleDomain {
        SampleDomain::default()
    }

    /// Starting control for the optimizer before projection.
    fn initial_control(&self, _k: usize) -> DVector<f64> {
        DVector::zeros(self.dims().r)
    }
}

/// Flips the sign of `l` and `φ` so that maximization problems are solved
/// as minimization of the negated objective.
#[derive(Debug)]
struct Negated(Arc<dyn Coefficients>);

impl Coefficients for Negated {
    fn dims(&self) -> Dims {
        self.0.dims()
    }
    fn drift(&self, k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.0.drift(k, x, y, u)
    }
    fn drift_jac(&self, k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> Jacobians {
        self.0.drift_jac(k, x, y, u)
    }
    fn diffusion(&self, j: usize, k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.0.diffusion(j, k, x, y, u)
    }
    fn diffusion_jac(&self, j: usize, k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> Jacobians {
        self.0.diffusion_jac(j, k, x, y, u)
    }
    fn running(&self, k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> std::result::Result<f64, DomainError> {
        self.0.running(k, x, y, u).map(|v| -v)
    }
    fn running_grad(&self, k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> std::result::Result<Gradients, DomainError> {
        self.0.running_grad(k, x, y, u).map(|g| Gradients { x: -g.x, y: -g.y, u: -g.u })
    }
    fn terminal(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        -self.0.terminal(x, y)
    }
    fn terminal_grad(&self, x: &DVector<f64>, y: &DVector<f64>) -> TerminalGradient {
        let g = self.0.terminal_grad(x, y);
        TerminalGradient { x: -g.x, y: -g.y }
    }
    fn sample_domain(&self) -> SampleDomain {
        self.0.sample_domain()
    }
    fn initial_control(&self, k: usize) -> DVector<f64> {
        self.0.initial_control(k)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Minimize,
    Maximize,
}

/// Switches that drop the step factor `h` from single terms of the adjoint
/// and variational equations. Both default to off; with either on, the
/// duality identity no longer holds exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conventions {
    /// Drop the factor `h` on the `f_y` term of the adjoint equation.
    #[serde(default)]
    pub bse_literal: bool,
    /// Drop the factor `h` on the drift block of the variational equation.
    #[serde(default)]
    pub xi_literal: bool,
}

/// Per-step box constraints `lo(t_k) ≤ v ≤ hi(t_k)`; bounds may be infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibleSet {
    lo: Vec<DVector<f64>>,
    hi: Vec<DVector<f64>>,
}

impl AdmissibleSet {
    pub fn unbounded(r: usize, steps: usize) -> Self {
        Self::uniform(DVector::from_element(r, f64::NEG_INFINITY), DVector::from_element(r, f64::INFINITY), steps)
            .expect("unbounded box is valid")
    }

    /// The same box at every step `0..=steps`.
    pub fn uniform(lo: DVector<f64>, hi: DVector<f64>, steps: usize) -> Result<Self> {
        Self::per_step(vec![lo; steps + 1], vec![hi; steps + 1])
    }

    pub fn per_step(lo: Vec<DVector<f64>>, hi: Vec<DVector<f64>>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Validation("admissible set needs one box per step".into()));
        }
        for (k, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if l.len() != h.len() {
                return Err(Error::Validation(format!("box at step {k} has mismatched bound lengths")));
            }
            for (i, (a, b)) in l.iter().zip(h.iter()).enumerate() {
                if a.is_nan() || b.is_nan() || a > b || *a == f64::INFINITY || *b == f64::NEG_INFINITY {
                    return Err(Error::Validation(format!("empty box at step {k}, component {}: lo = {a}, hi = {b}", i + 1)));
                }
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn steps(&self) -> usize {
        self.lo.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.lo[0].len()
    }

    pub fn lo(&self, k: usize) -> &DVector<f64> {
        &self.lo[k]
    }

    pub fn hi(&self, k: usize) -> &DVector<f64> {
        &self.hi[k]
    }

    pub fn is_bounded(&self) -> bool {
        self.lo.iter().chain(&self.hi).all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn project(&self, k: usize, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(v.len(), v.iter().enumerate().map(|(i, &x)| x.max(self.lo[k][i]).min(self.hi[k][i])))
    }

    pub fn contains(&self, k: usize, v: &DVector<f64>) -> bool {
        v.iter().enumerate().all(|(i, &x)| x >= self.lo[k][i] && x <= self.hi[k][i])
    }
}

/// A fully validated control problem on a finite scenario tree.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub dims: Dims,
    pub grid: TimeGrid,
    pub noise: NoiseConfig,
    pub x0: DVector<f64>,
    pub admissible: AdmissibleSet,
    pub direction: Direction,
    pub conventions: Conventions,
    user: Arc<dyn Coefficients>,
    internal: Arc<dyn Coefficients>,
    source: Option<CoefficientSource>,
}

impl ProblemSpec {
    pub fn new(
        grid: TimeGrid,
        noise: NoiseConfig,
        x0: DVector<f64>,
        coeffs: Arc<dyn Coefficients>,
        admissible: AdmissibleSet,
        direction: Direction,
    ) -> Result<Self> {
        let dims = coeffs.dims();
        if dims.n == 0 || dims.r == 0 || dims.d == 0 {
            return Err(Error::Validation(format!("dimensions must be positive, got {dims:?}")));
        }
        if x0.len() != dims.n {
            return Err(Error::Validation(format!("x0 has length {} but n = {}", x0.len(), dims.n)));
        }
        if !x0.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("x0 must be finite".into()));
        }
        if admissible.steps() != grid.steps {
            return Err(Error::Validation(format!("admissible set covers {} steps but N = {}", admissible.steps() + 1, grid.steps + 1)));
        }
        if admissible.dim() != dims.r {
            return Err(Error::Validation(format!("admissible boxes have dimension {} but r = {}", admissible.dim(), dims.r)));
        }
        noise.model(dims.d, grid.h)?;
        let internal: Arc<dyn Coefficients> = match direction {
            Direction::Minimize => coeffs.clone(),
            Direction::Maximize => Arc::new(Negated(coeffs.clone())),
        };
        Ok(Self { dims, grid, noise, x0, admissible, direction, conventions: Conventions::default(), user: coeffs, internal, source: None })
    }

    pub fn with_conventions(mut self, conventions: Conventions) -> Self {
        self.conventions = conventions;
        self
    }

    pub(crate) fn with_source(mut self, source: CoefficientSource) -> Self {
        self.source = Some(source);
        self
    }

    pub fn source(&self) -> Option<&CoefficientSource> {
        self.source.as_ref()
    }

    /// Coefficients in the internal minimization orientation.
    pub fn coeffs(&self) -> &dyn Coefficients {
        self.internal.as_ref()
    }

    /// Coefficients exactly as supplied, before any sign flip.
    pub fn user_coeffs(&self) -> &dyn Coefficients {
        self.user.as_ref()
    }

    /// Replaces the coefficient set, keeping grid, noise and constraints.
    pub fn with_coeffs(&self, coeffs: Arc<dyn Coefficients>) -> Result<Self> {
        let spec = Self::new(self.grid, self.noise.clone(), self.x0.clone(), coeffs, self.admissible.clone(), self.direction)?;
        Ok(spec.with_conventions(self.conventions))
    }

    pub fn noise_model(&self) -> NoiseModel {
        self.noise.model(self.dims.d, self.grid.h).expect("validated at construction")
    }

    pub fn build_tree(&self) -> Result<ScenarioTree> {
        build_tree(self.grid, self.noise_model())
    }

    /// Converts an internal (minimized) objective value to the user's orientation.
    pub fn user_objective(&self, internal: f64) -> f64 {
        match self.direction {
            Direction::Minimize => internal,
            Direction::Maximize => -internal,
        }
    }
}

/// Componentwise clamp of `v` into the step-`k` box.
pub fn project(spec: &ProblemSpec, k: usize, v: &DVector<f64>) -> DVector<f64> {
    spec.admissible.project(k, v)
}

pub const FD_STEP: f64 = 1e-6;

/// Sampled surrogate for the smoothness assumptions: analytic partials are
/// compared with central differences at random points. This samples; it does
/// not certify global Lipschitz constants.
pub fn validate_spec(spec: &ProblemSpec, tol: f64) -> CheckReport {
    validate_spec_with(spec, tol, 20, 0x5eed)
}

pub fn validate_spec_with(spec: &ProblemSpec, tol: f64, points: usize, seed: u64) -> CheckReport {
    let mut report = CheckReport::new("validate_spec");
    let c = spec.user_coeffs();
    let Dims { n, r, d } = spec.dims;
    let dom = c.sample_domain();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // admissible boxes
    for k in 0..=spec.grid.steps {
        let ok = spec.admissible.lo(k).iter().zip(spec.admissible.hi(k).iter()).all(|(a, b)| a <= b);
        report.push(Residual::new("box nonempty", if ok { 0.0 } else { 1.0 }, 0.0).at_level(k));
    }

    let mut worst = std::collections::BTreeMap::<String, f64>::new();
    let mut record = |label: String, value: f64| {
        let e = worst.entry(label).or_insert(0.0);
        *e = e.max(value);
    };
    let mut shape_errors = 0usize;

    for _ in 0..points {
        let k = rng.gen_range(0..=spec.grid.steps);
        let x = sample_vec(&mut rng, n, dom.x);
        let y = sample_vec(&mut rng, n, dom.x);
        let (ulo, uhi) = (spec.admissible.lo(k).map(|v| v.max(dom.u.0)), spec.admissible.hi(k).map(|v| v.min(dom.u.1)));
        let u = DVector::from_iterator(r, (0..r).map(|i| if ulo[i] < uhi[i] { rng.gen_range(ulo[i]..uhi[i]) } else { ulo[i] }));

        let f = c.drift(k, &x, &y, &u);
        let jf = c.drift_jac(k, &x, &y, &u);
        shape_errors += usize::from(f.len() != n || !jac_shape_ok(&jf, n, r));
        if shape_errors == 0 {
            for (lbl, v) in jac_fd_errors(&jf, |xx, yy, uu| c.drift(k, xx, yy, uu), &x, &y, &u) {
                record(format!("f_{lbl}"), v);
            }
        }
        for j in 0..d {
            let s = c.diffusion(j, k, &x, &y, &u);
            let js = c.diffusion_jac(j, k, &x, &y, &u);
            shape_errors += usize::from(s.len() != n || !jac_shape_ok(&js, n, r));
            if shape_errors == 0 {
                for (lbl, v) in jac_fd_errors(&js, |xx, yy, uu| c.diffusion(j, k, xx, yy, uu), &x, &y, &u) {
                    record(format!("sigma^{}_{lbl}", j + 1), v);
                }
            }
        }
        match c.running_grad(k, &x, &y, &u) {
            Ok(g) => {
                shape_errors += usize::from(g.x.len() != n || g.y.len() != n || g.u.len() != r);
                if shape_errors == 0 {
                    let scalar = |xx: &DVector<f64>, yy: &DVector<f64>, uu: &DVector<f64>| {
                        DVector::from_element(1, c.running(k, xx, yy, uu).unwrap_or(f64::NAN))
                    };
                    let jac = Jacobians { x: row(&g.x), y: row(&g.y), u: row(&g.u) };
                    for (lbl, v) in jac_fd_errors(&jac, scalar, &x, &y, &u) {
                        record(format!("l_{lbl}"), v);
                    }
                }
            }
            Err(e) => {
                report.push(Residual::new(format!("l domain error: {e}"), 1.0, 0.0).at_level(k));
            }
        }
        let g = c.terminal_grad(&x, &y);
        shape_errors += usize::from(g.x.len() != n || g.y.len() != n);
        if shape_errors == 0 {
            let scalar = |xx: &DVector<f64>, yy: &DVector<f64>, _: &DVector<f64>| DVector::from_element(1, c.terminal(xx, yy));
            let jac = Jacobians { x: row(&g.x), y: row(&g.y), u: DMatrix::zeros(1, r) };
            for (lbl, v) in jac_fd_errors(&jac, scalar, &x, &y, &u) {
                if lbl != "u" {
                    record(format!("phi_{lbl}"), v);
                }
            }
        }
    }
    report.push(Residual::new("dimension mismatches", shape_errors as f64, 0.0));
    for (label, v) in worst {
        report.push(Residual::new(format!("{label} rel. error"), v, tol));
    }
    report
}

fn row(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, v.len(), v.as_slice())
}

fn sample_vec(rng: &mut ChaCha8Rng, len: usize, (lo, hi): (f64, f64)) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| rng.gen_range(lo..hi)))
}

fn jac_shape_ok(j: &Jacobians, n: usize, r: usize) -> bool {
    j.x.shape() == (n, n) && j.y.shape() == (n, n) && j.u.shape() == (n, r)
}

/// Largest relative error `|analytic − fd| / max(1, |analytic|)` per argument block.
fn jac_fd_errors(
    jac: &Jacobians,
    eval: impl Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
    y: &DVector<f64>,
    u: &DVector<f64>,
) -> [(&'static str, f64); 3] {
    let column_err = |analytic: &DMatrix<f64>, which: usize| {
        let len = analytic.ncols();
        let mut worst: f64 = 0.0;
        for i in 0..len {
            let (mut xp, mut yp, mut up) = (x.clone(), y.clone(), u.clone());
            let (mut xm, mut ym, mut um) = (x.clone(), y.clone(), u.clone());
            match which {
                0 => {
                    xp[i] += FD_STEP;
                    xm[i] -= FD_STEP;
                }
                1 => {
                    yp[i] += FD_STEP;
                    ym[i] -= FD_STEP;
                }
                _ => {
                    up[i] += FD_STEP;
                    um[i] -= FD_STEP;
                }
            }
            let fd = (eval(&xp, &yp, &up) - eval(&xm, &ym, &um)) / (2.0 * FD_STEP);
            for row in 0..analytic.nrows() {
                let a = analytic[(row, i)];
                let e = (a - fd[row]).abs() / a.abs().max(1.0);
                worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
            }
        }
        worst
    };
    [("x", column_err(&jac.x, 0)), ("y", column_err(&jac.y, 1)), ("u", column_err(&jac.u, 2))]
}
