//! Smooth nonlinear mean-field family used for rate and gradient checks.
//!
//! With `z = K u`:
//!
//! ```text
//! f_i  = a sin x_i + b tanh y_i + z_i + c cos z_i
//! σʲ_i = sʲ (cos x_i + ½ sin y_i) + g z_i²
//! l    = ½ q |x|² + ½ ρ |u|² + κ Σ ln cosh y_i
//! φ    = ½ g_T |x|² + ½ g_Y |y|² + κ_T Σ sin x_i
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Coefficients, Dims, Gradients, Jacobians, TerminalGradient};
use crate::error::{DomainError, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SineParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Diffusion scale per noise component.
    pub s: Vec<f64>,
    pub g: f64,
    /// Control coupling `K`, row-major `n × r`; `None` means `K_ij = [i mod r == j]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<Vec<f64>>>,
    pub q: f64,
    pub rho: f64,
    pub kappa: f64,
    pub g_t: f64,
    pub g_y: f64,
    pub kappa_t: f64,
}

impl SineParams {
    pub fn default_for(d: usize) -> Self {
        Self { a: 0.5, b: 0.3, c: 0.2, s: vec![0.4; d], g: 0.3, k: None, q: 1.0, rho: 0.5, kappa: 0.2, g_t: 1.0, g_y: 0.5, kappa_t: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SineMeanField {
    dims: Dims,
    params: SineParams,
    k: DMatrix<f64>,
}

impl SineMeanField {
    pub fn new(dims: Dims, params: SineParams) -> Result<Self> {
        if params.s.len() != dims.d {
            return Err(Error::Validation(format!("s has {} entries but d = {}", params.s.len(), dims.d)));
        }
        let k = match &params.k {
            Some(rows) => {
                if rows.len() != dims.n || rows.iter().any(|r| r.len() != dims.r) {
                    return Err(Error::Validation(format!("k must be {} x {}", dims.n, dims.r)));
                }
                DMatrix::from_fn(dims.n, dims.r, |i, j| rows[i][j])
            }
            None => DMatrix::from_fn(dims.n, dims.r, |i, j| if i % dims.r == j { 1.0 } else { 0.0 }),
        };
        let all = [params.a, params.b, params.c, params.g, params.q, params.rho, params.kappa, params.g_t, params.g_y, params.kappa_t];
        if !all.iter().chain(&params.s).chain(k.iter()).all(|v| v.is_finite()) {
            return Err(Error::Validation("sine family parameters must be finite".into()));
        }
        Ok(Self { dims, params, k })
    }

    pub fn params(&self) -> &SineParams {
        &self.params
    }
}

impl Coefficients for SineMeanField {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn drift(&self, _k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let p = &self.params;
        let z = &self.k * u;
        DVector::from_fn(self.dims.n, |i, _| p.a * x[i].sin() + p.b * y[i].tanh() + z[i] + p.c * z[i].cos())
    }

    fn drift_jac(&self, _k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> Jacobians {
        let p = &self.params;
        let z = &self.k * u;
        let dz = DVector::from_fn(self.dims.n, |i, _| 1.0 - p.c * z[i].sin());
        Jacobians {
            x: DMatrix::from_diagonal(&x.map(|v| p.a * v.cos())),
            y: DMatrix::from_diagonal(&y.map(|v| p.b / v.cosh().powi(2))),
            u: DMatrix::from_diagonal(&dz) * &self.k,
        }
    }

    fn diffusion(&self, j: usize, _k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let p = &self.params;
        let z = &self.k * u;
        DVector::from_fn(self.dims.n, |i, _| p.s[j] * (x[i].cos() + 0.5 * y[i].sin()) + p.g * z[i] * z[i])
    }

    fn diffusion_jac(&self, j: usize, _k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> Jacobians {
        let p = &self.params;
        let z = &self.k * u;
        Jacobians {
            x: DMatrix::from_diagonal(&x.map(|v| -p.s[j] * v.sin())),
            y: DMatrix::from_diagonal(&y.map(|v| 0.5 * p.s[j] * v.cos())),
            u: DMatrix::from_diagonal(&z.map(|v| 2.0 * p.g * v)) * &self.k,
        }
    }

    fn running(&self, _k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> std::result::Result<f64, DomainError> {
        let p = &self.params;
        Ok(0.5 * p.q * x.norm_squared() + 0.5 * p.rho * u.norm_squared() + p.kappa * y.iter().map(|v| v.cosh().ln()).sum::<f64>())
    }

    fn running_grad(&self, _k: usize, x: &DVector<f64>, y: &DVector<f64>, u: &DVector<f64>) -> std::result::Result<Gradients, DomainError> {
        let p = &self.params;
        Ok(Gradients { x: x * p.q, y: y.map(|v| p.kappa * v.tanh()), u: u * p.rho })
    }

    fn terminal(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let p = &self.params;
        0.5 * p.g_t * x.norm_squared() + 0.5 * p.g_y * y.norm_squared() + p.kappa_t * x.iter().map(|v| v.sin()).sum::<f64>()
    }

    fn terminal_grad(&self, x: &DVector<f64>, y: &DVector<f64>) -> TerminalGradient {
        let p = &self.params;
        TerminalGradient { x: x * p.g_t + x.map(|v| p.kappa_t * v.cos()), y: y * p.g_y }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_coupling_is_identity_like() {
        let fam = SineMeanField::new(Dims { n: 3, r: 2, d: 1 }, SineParams::default_for(1)).unwrap();
        assert_eq!(fam.k[(0, 0)], 1.0);
        assert_eq!(fam.k[(1, 1)], 1.0);
        assert_eq!(fam.k[(2, 0)], 1.0);
        assert_eq!(fam.k[(2, 1)], 0.0);
    }

    #[test]
    fn wrong_noise_scale_count() {
        assert!(SineMeanField::new(Dims { n: 1, r: 1, d: 2 }, SineParams::default_for(1)).is_err());
    }
}
