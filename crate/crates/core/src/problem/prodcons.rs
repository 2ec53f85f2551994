//! Production–consumption model with risky capital.
//!
//! Capital evolves as
//! `x(t+h) = x + h(a·x − δ_dep·x) − v + s·x·w_h(t)` and the investor maximizes
//! `E x(t_{N+1}) + E Σ l(v)` with the isoelastic utility
//! `l(v) = δ/(δ−1) · v^{1−1/δ}`, `0 < δ < 1`.
//!
//! The consumption `v` enters without the factor `h`; in drift form that is
//! `f = (a − δ_dep)x − v/h`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    AdmissibleSet, CoefficientSource, Coefficients, Dims, Direction, FamilyConfig, Gradients, Jacobians, ProblemSpec, SampleDomain,
    TerminalGradient,
};
use crate::error::{DomainError, Error, Result};
use crate::problem::config::NoiseConfig;
use crate::tree::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProdconsParams {
    /// Capital depreciation rate.
    pub depreciation: f64,
    /// Utility exponent δ ∈ (0, 1).
    pub delta_util: f64,
    /// Income production `f(x) = income_rate · x`.
    #[serde(default = "one")]
    pub income_rate: f64,
    /// Exogenous risk `σ(x) = volatility · x`.
    #[serde(default = "half")]
    pub volatility: f64,
    /// Lower consumption bound keeping the utility finite.
    #[serde(default = "v_min_default")]
    pub v_min: f64,
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn v_min_default() -> f64 {
    1e-6
}

impl Default for ProdconsParams {
    fn default() -> Self {
        Self { depreciation: 0.5, delta_util: 0.5, income_rate: 1.0, volatility: 0.5, v_min: 1e-6 }
    }
}

impl ProdconsParams {
    pub fn check(&self) -> Result<()> {
        if !(self.delta_util > 0.0 && self.delta_util < 1.0) {
            return Err(Error::Validation(format!("delta_util must lie in (0, 1), got {}", self.delta_util)));
        }
        if !(self.v_min > 0.0 && self.v_min.is_finite()) {
            return Err(Error::Validation(format!("v_min must be positive, got {}", self.v_min)));
        }
        for (name, v) in [("depreciation", self.depreciation), ("income_rate", self.income_rate), ("volatility", self.volatility)] {
            if !v.is_finite() {
                return Err(Error::Validation(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prodcons {
    pub params: ProdconsParams,
    pub h: f64,
}

impl Prodcons {
    pub fn new(params: ProdconsParams, h: f64) -> Result<Self> {
        params.check()?;
        Ok(Self { params, h })
    }

    /// Maximization problem on binary noise with consumption box `[v_min, ∞)`.
    pub fn spec(params: &ProdconsParams, h: f64, steps: usize, x0: f64) -> Result<ProblemSpec> {
        let fam = Self::new(*params, h)?;
        let grid = TimeGrid::new(0.0, h, steps)?;
        let spec = ProblemSpec::new(
            grid,
            NoiseConfig::Binary,
            DVector::from_element(1, x0),
            Arc::new(fam),
            Self::default_box(params, steps),
            Direction::Maximize,
        )?;
        Ok(spec.with_source(CoefficientSource::Family(FamilyConfig::Prodcons(*params))))
    }

    pub fn default_box(params: &ProdconsParams, steps: usize) -> AdmissibleSet {
        AdmissibleSet::uniform(DVector::from_element(1, params.v_min), DVector::from_element(1, f64::INFINITY), steps)
            .expect("v_min is finite")
    }

    /// `l(v) = δ/(δ−1) v^{1−1/δ}`.
    pub fn utility(&self, v: f64) -> std::result::Result<f64, DomainError> {
        if !(v > 0.0) {
            return Err(DomainError(format!("utility undefined for consumption v = {v} <= 0")));
        }
        let d = self.params.delta_util;
        Ok(d / (d - 1.0) * v.powf(1.0 - 1.0 / d))
    }

    /// `l'(v) = v^{−1/δ}`.
    pub fn marginal_utility(&self, v: f64) -> std::result::Result<f64, DomainError> {
        if !(v > 0.0) {
            return Err(DomainError(format!("utility undefined for consumption v = {v} <= 0")));
        }
        Ok(v.powf(-1.0 / self.params.delta_util))
    }

    fn drift_rate(&self) -> f64 {
        self.params.income_rate - self.params.depreciation
    }
}

fn m1(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

impl Coefficients for Prodcons {
    fn dims(&self) -> Dims {
        Dims { n: 1, r: 1, d: 1 }
    }

    fn drift(&self, _k: usize, x: &DVector<f64>, _y: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, self.drift_rate() * x[0] - u[0] / self.h)
    }

    fn drift_jac(&self, _k: usize, _x: &DVector<f64>, _y: &DVector<f64>, _u: &DVector<f64>) -> Jacobians {
        Jacobians { x: m1(self.drift_rate()), y: m1(0.0), u: m1(-1.0 / self.h) }
    }

    fn diffusion(&self, _j: usize, _k: usize, x: &DVector<f64>, _y: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, self.params.volatility * x[0])
    }

    fn diffusion_jac(&self, _j: usize, _k: usize, _x: &DVector<f64>, _y: &DVector<f64>, _u: &DVector<f64>) -> Jacobians {
        Jacobians { x: m1(self.params.volatility), y: m1(0.0), u: m1(0.0) }
    }

    fn running(&self, _k: usize, _x: &DVector<f64>, _y: &DVector<f64>, u: &DVector<f64>) -> std::result::Result<f64, DomainError> {
        self.utility(u[0])
    }

    fn running_grad(
        &self,
        _k: usize,
        _x: &DVector<f64>,
        _y: &DVector<f64>,
        u: &DVector<f64>,
    ) -> std::result::Result<Gradients, DomainError> {
        Ok(Gradients { x: DVector::zeros(1), y: DVector::zeros(1), u: DVector::from_element(1, self.marginal_utility(u[0])?) })
    }

    fn terminal(&self, x: &DVector<f64>, _y: &DVector<f64>) -> f64 {
        x[0]
    }

    fn terminal_grad(&self, _x: &DVector<f64>, _y: &DVector<f64>) -> TerminalGradient {
        TerminalGradient { x: DVector::from_element(1, 1.0), y: DVector::zeros(1) }
    }

    fn sample_domain(&self) -> SampleDomain {
        SampleDomain { x: (0.5, 2.0), u: (0.2, 2.0) }
    }

    fn initial_control(&self, _k: usize) -> DVector<f64> {
        DVector::from_element(1, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dynamics_match_capital_equation() {
        let fam = Prodcons::new(ProdconsParams::default(), 0.5).unwrap();
        let x = DVector::from_element(1, 1.0);
        let v = DVector::from_element(1, 0.3);
        // x + h f = x + h(x − δx) − v
        let step = x[0] + 0.5 * fam.drift(0, &x, &x, &v)[0];
        assert!((step - (1.0 + 0.5 * (1.0 - 0.5) - 0.3)).abs() < 1e-15);
        assert_eq!(fam.diffusion(0, 0, &x, &x, &v)[0], 0.5);
    }

    #[test]
    fn utility_and_marginal() {
        let fam = Prodcons::new(ProdconsParams::default(), 0.5).unwrap();
        // δ = 1/2: l(v) = −1/v, l'(v) = v^{-2}
        assert!((fam.utility(2.0).unwrap() + 0.5).abs() < 1e-15);
        assert!((fam.marginal_utility(2.0).unwrap() - 0.25).abs() < 1e-15);
        assert!(fam.utility(0.0).is_err());
        assert!(fam.utility(-1.0).is_err());
    }

    #[test]
    fn delta_out_of_range_rejected() {
        for d in [0.0, 1.0, 1.5, -0.2] {
            let p = ProdconsParams { delta_util: d, ..Default::default() };
            assert!(Prodcons::spec(&p, 0.5, 5, 1.0).is_err());
        }
    }
}
