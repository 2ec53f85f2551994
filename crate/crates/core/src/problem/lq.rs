use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{AdmissibleSet, Coefficients, Dims, Direction, Gradients, Jacobians, ProblemSpec, TerminalGradient};
use crate::error::{DomainError, Error, Result};
use crate::problem::config::NoiseConfig;
use crate::tree::TimeGrid;

/// Affine dynamics and quadratic costs for one step:
///
/// ```text
/// f  = A x + Ā y + B u + c
/// σʲ = Cʲ x + C̄ʲ y + Dʲ u + eʲ
/// l  = ½xᵀQx + ½yᵀQ̄y + ½uᵀRu + qᵀx + q̄ᵀy + ρᵀu
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct LqStage {
    pub a: DMatrix<f64>,
    pub a_bar: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub sig_x: Vec<DMatrix<f64>>,
    pub sig_y: Vec<DMatrix<f64>>,
    pub sig_u: Vec<DMatrix<f64>>,
    pub sig_0: Vec<DVector<f64>>,
    pub q: DMatrix<f64>,
    pub q_bar: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_lin: DVector<f64>,
    pub q_bar_lin: DVector<f64>,
    pub r_lin: DVector<f64>,
}

impl LqStage {
    pub fn zeros(dims: Dims) -> Self {
        let Dims { n, r, d } = dims;
        Self {
            a: DMatrix::zeros(n, n),
            a_bar: DMatrix::zeros(n, n),
            b: DMatrix::zeros(n, r),
            c: DVector::zeros(n),
            sig_x: vec![DMatrix::zeros(n, n); d],
            sig_y: vec![DMatrix::zeros(n, n); d],
            sig_u: vec![DMatrix::zeros(n, r); d],
            sig_0: vec![DVector::zeros(n); d],
            q: DMatrix::zeros(n, n),
            q_bar: DMatrix::zeros(n, n),
            r: DMatrix::zeros(r, r),
            q_lin: DVector::zeros(n),
            q_bar_lin: DVector::zeros(n),
            r_lin: DVector::zeros(r),
        }
    }

    fn check(&self, dims: Dims) -> Result<()> {
        let Dims { n, r, d } = dims;
        let mats: [(&str, &DMatrix<f64>, (usize, usize)); 6] = [
            ("a", &self.a, (n, n)),
            ("a_bar", &self.a_bar, (n, n)),
            ("b", &self.b, (n, r)),
            ("q", &self.q, (n, n)),
            ("q_bar", &self.q_bar, (n, n)),
            ("r", &self.r, (r, r)),
        ];
        for (name, m, shape) in mats {
            if m.shape() != shape {
                return Err(Error::Validation(format!("{name} has shape {:?}, expected {shape:?}", m.shape())));
            }
        }
        let vecs: [(&str, &DVector<f64>, usize); 4] =
            [("c", &self.c, n), ("q_lin", &self.q_lin, n), ("q_bar_lin", &self.q_bar_lin, n), ("r_lin", &self.r_lin, r)];
        for (name, v, len) in vecs {
            if v.len() != len {
                return Err(Error::Validation(format!("{name} has length {}, expected {len}", v.len())));
            }
        }
        if self.sig_x.len() != d || self.sig_y.len() != d || self.sig_u.len() != d || self.sig_0.len() != d {
            return Err(Error::Validation(format!("diffusion blocks must come in {d} copies, one per noise component")));
        }
        for j in 0..d {
            if self.sig_x[j].shape() != (n, n) || self.sig_y[j].shape() != (n, n) || self.sig_u[j].shape() != (n, r) {
                return Err(Error::Validation(format!("diffusion block {} has wrong shape", j + 1)));
            }
            if self.sig_0[j].len() != n {
                return Err(Error::Validation(format!("sig_0[{}] has wrong length", j + 1)));
            }
        }
        Ok(())
    }
}

/// `φ = ½xᵀGx + ½yᵀḠy + gᵀx + ḡᵀy`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqTerminal {
    pub g: DMatrix<f64>,
    pub g_bar: DMatrix<f64>,
    pub g_lin: DVector<f64>,
    pub g_bar_lin: DVector<f64>,
}

impl LqTerminal {
    pub fn zeros(n: usize) -> Self {
        Self { g: DMatrix::zeros(n, n), g_bar: DMatrix::zeros(n, n), g_lin: DVector::zeros(n), g_bar_lin: DVector::zeros(n) }
    }
}

/// Linear–quadratic mean-field family, optionally time-varying.
#[derive(Debug, Clone, PartialEq)]
pub struct LqMeanField {
    dims: Dims,
    stages: Vec<LqStage>,
    terminal: LqTerminal,
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

impl LqMeanField {
    /// One stage reused at every step, or one stage per step.
    pub fn new(dims: Dims, stages: Vec<LqStage>, terminal: LqTerminal) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Validation("LQ family needs at least one stage".into()));
        }
        for s in &stages {
            s.check(dims)?;
        }
        let n = dims.n;
        if terminal.g.shape() != (n, n) || terminal.g_bar.shape() != (n, n) || terminal.g_lin.len() != n || terminal.g_bar_lin.len() != n {
            return Err(Error::Validation("terminal cost blocks have wrong shape".into()));
        }
        Ok(Self { dims, stages, terminal })
    }

    pub fn stages(&self) -> &[LqStage] {
        &self.stages
    }

    pub fn terminal_cost(&self) -> &LqTerminal {
        &self.terminal
    }

    pub fn stage(&self, k: usize) -> &LqStage {
        &self.stages[k.min(self.stages.len() - 1)]
    }

    /// Scalar benchmark: `h = 1`, `f = u`, `σ = 1`, `l = u²`, `φ = x²`,
    /// for which `J(u) = 2u² + 1` under binary noise.
    pub fn e1() -> Self {
        let dims = Dims { n: 1, r: 1, d: 1 };
        let mut st = LqStage::zeros(dims);
        st.b[(0, 0)] = 1.0;
        st.sig_0[0][0] = 1.0;
        st.r[(0, 0)] = 2.0;
        let mut term = LqTerminal::zeros(1);
        term.g[(0, 0)] = 2.0;
        Self::new(dims, vec![st], term).expect("valid")
    }

    pub fn e1_spec(admissible: AdmissibleSet) -> Result<ProblemSpec> {
        let e1 = Self::e1();
        let spec = ProblemSpec::new(
            TimeGrid::new(0.0, 1.0, 0)?,
            NoiseConfig::Binary,
            DVector::zeros(1),
            Arc::new(e1.clone()),
            admissible,
            Direction::Minimize,
        )?;
        Ok(spec.with_source(super::CoefficientSource::Family(super::FamilyConfig::LqMeanfield(
            super::config::LqFamilyParams::from_family(&e1),
        ))))
    }
}

impl Coefficients for LqMeanField {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn drift(&self, k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let s = self.stage(k);
        &s.a * x + &s.a_bar * y + &s.b * u + &s.c
    }

    fn drift_jac(&self, k: usize, _x: &DVector<f64>, _y: &DVector<f64>, _u: &DVector<f64>) -> Jacobians {
        let s = self.stage(k);
        Jacobians { x: s.a.clone(), y: s.a_bar.clone(), u: s.b.clone() }
    }

    fn diffusion(&self, j: usize, k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let s = self.stage(k);
        &s.sig_x[j] * x + &s.sig_y[j] * y + &s.sig_u[j] * u + &s.sig_0[j]
    }

    fn diffusion_jac(&self, j: usize, k: usize, _x: &DVector<f64>, _y: &DVector<f64>, _u: &DVector<f64>) -> Jacobians {
        let s = self.stage(k);
        Jacobians { x: s.sig_x[j].clone(), y: s.sig_y[j].clone(), u: s.sig_u[j].clone() }
    }

    fn running(&self, k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> std::result::Result<f64, DomainError> {
        let s = self.stage(k);
        Ok(0.5 * (x.dot(&(&s.q * x)) + y.dot(&(&s.q_bar * y)) + u.dot(&(&s.r * u))) + s.q_lin.dot(x) + s.q_bar_lin.dot(y) + s.r_lin.dot(u))
    }

    fn running_grad(&self, k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> std::result::Result<Gradients, DomainError> {
        let s = self.stage(k);
        Ok(Gradients { x: sym(&s.q) * x + &s.q_lin, y: sym(&s.q_bar) * y + &s.q_bar_lin, u: sym(&s.r) * u + &s.r_lin })
    }

    fn terminal(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let t = &self.terminal;
        0.5 * (x.dot(&(&t.g * x)) + y.dot(&(&t.g_bar * y))) + t.g_lin.dot(x) + t.g_bar_lin.dot(y)
    }

    fn terminal_grad(&self, x: &DVector<f64>, y: &DVector<f64>) -> TerminalGradient {
        let t = &self.terminal;
        TerminalGradient { x: sym(&t.g) * x + &t.g_lin, y: sym(&t.g_bar) * y + &t.g_bar_lin }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn e1_coefficients() {
        let e1 = LqMeanField::e1();
        let x = DVector::from_element(1, 0.3);
        let y = DVector::from_element(1, -0.2);
        let u = DVector::from_element(1, 0.7);
        assert_eq!(e1.drift(0, &x, &y, &u)[0], 0.7);
        assert_eq!(e1.diffusion(0, 0, &x, &y, &u)[0], 1.0);
        assert!((e1.running(0, &x, &y, &u).unwrap() - 0.49).abs() < 1e-15);
        assert!((e1.terminal(&x, &y) - 0.09).abs() < 1e-15);
        assert_eq!(e1.terminal_grad(&x, &y).x[0], 0.6);
    }

    #[test]
    fn zero_family_is_identically_zero() {
        let dims = Dims { n: 2, r: 1, d: 2 };
        let z = LqMeanField::new(dims, vec![LqStage::zeros(dims)], LqTerminal::zeros(2)).unwrap();
        let x = DVector::from_vec(vec![1.0, -2.0]);
        let u = DVector::from_element(1, 3.0);
        assert_eq!(z.drift(0, &x, &x, &u), DVector::zeros(2));
        assert_eq!(z.diffusion(1, 0, &x, &x, &u), DVector::zeros(2));
        assert_eq!(z.running(0, &x, &x, &u).unwrap(), 0.0);
        assert_eq!(z.terminal(&x, &x), 0.0);
    }

    #[test]
    fn shape_errors_reported() {
        let dims = Dims { n: 2, r: 1, d: 1 };
        let mut st = LqStage::zeros(dims);
        st.b = DMatrix::zeros(2, 2);
        assert!(LqMeanField::new(dims, vec![st], LqTerminal::zeros(2)).is_err());
    }

    #[test]
    fn time_varying_stage_lookup() {
        let dims = Dims { n: 1, r: 1, d: 1 };
        let mut s0 = LqStage::zeros(dims);
        s0.c[0] = 1.0;
        let mut s1 = LqStage::zeros(dims);
        s1.c[0] = 2.0;
        let fam = LqMeanField::new(dims, vec![s0, s1], LqTerminal::zeros(1)).unwrap();
        let z = DVector::zeros(1);
        assert_eq!(fam.drift(0, &z, &z, &z)[0], 1.0);
        assert_eq!(fam.drift(1, &z, &z, &z)[0], 2.0);
    }
}
