//! JSON problem configuration.
//!
//! ```json
//! {
//!   "dims": {"n": 1, "r": 1, "d": 1},
//!   "grid": {"t0": 0.0, "h": 1.0, "N": 0},
//!   "noise": {"kind": "binary"},
//!   "x0": [0.0],
//!   "family": {"name": "lq_meanfield", "params": {"stage": {"b": [[1.0]]}, "terminal": {"g": [[2.0]]}}},
//!   "admissible": [{"lo": [-1.0], "hi": [1.0]}],
//!   "direction": "minimize"
//! }
//! ```
//!
//! Unbounded box sides are written as `null`. Unknown keys are rejected.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    AdmissibleSet, Coefficients, Conventions, Dims, Direction, LqMeanField, LqStage, LqTerminal, ProblemSpec, Prodcons, ProdconsParams,
    SineMeanField, SineParams,
};
use crate::error::{Error, Result};
use crate::tree::{validate_noise, NoiseModel, SupportPoint, TimeGrid};

/// Moment tolerance for user-supplied noise laws (decimal inputs such as
/// `±0.7071` are rounded).
const CUSTOM_NOISE_TOL: f64 = 1e-9;

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub dims: DimsConfig,
    pub grid: GridConfig,
    pub noise: NoiseConfig,
    pub x0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tables: Option<TablesConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub admissible: Option<Vec<BoxConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conventions: Option<Conventions>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimsConfig {
    pub n: usize,
    pub r: usize,
    pub d: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t0: f64,
    pub h: f64,
    #[serde(rename = "N")]
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum NoiseConfig {
    /// `±√h` with probability ½ per component.
    Binary,
    /// `{−a, 0, a}` with probabilities `{p, 1−2p, p}`.
    Trinomial(TrinomialParams),
    /// Explicit per-component support, shared by all components.
    Custom(CustomNoiseParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrinomialParams {
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomNoiseParams {
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
}

impl NoiseConfig {
    pub fn trinomial(p: f64) -> Self {
        Self::Trinomial(TrinomialParams { p })
    }

    pub fn model(&self, d: usize, h: f64) -> Result<NoiseModel> {
        match self {
            Self::Binary => Ok(NoiseModel::binary(d, h)),
            Self::Trinomial(t) => NoiseModel::trinomial(d, h, t.p),
            Self::Custom(c) => {
                if c.values.len() != c.probs.len() {
                    return Err(Error::InvalidModel("custom noise needs one probability per value".into()));
                }
                let comp: Vec<SupportPoint> = c.values.iter().zip(&c.probs).map(|(&value, &prob)| SupportPoint { value, prob }).collect();
                let model = NoiseModel { h, components: vec![comp; d] };
                let report = validate_noise(&model, CUSTOM_NOISE_TOL)?;
                match report.residuals.iter().find(|r| !r.passes()) {
                    Some(bad) => {
                        Err(Error::InvalidModel(format!("custom noise: {} = {:e} exceeds {CUSTOM_NOISE_TOL:e}", bad.label, bad.value)))
                    }
                    None => Ok(model),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum FamilyConfig {
    LqMeanfield(LqFamilyParams),
    Prodcons(ProdconsParams),
    SineMeanfield(SineParams),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqFamilyParams {
    #[serde(default)]
    pub stage: LqStageConfig,
    #[serde(default)]
    pub terminal: LqTerminalConfig,
}

/// Time-varying LQ coefficients: one stage per step `0..=N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TablesConfig {
    pub stages: Vec<LqStageConfig>,
    #[serde(default)]
    pub terminal: LqTerminalConfig,
}

/// LQ stage blocks; absent entries are zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqStageConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_bar: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sig_x: Option<Vec<Rows>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sig_y: Option<Vec<Rows>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sig_u: Option<Vec<Rows>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sig_0: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_bar: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_lin: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_bar_lin: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_lin: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqTerminalConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_bar: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_lin: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_bar_lin: Option<Vec<f64>>,
}

/// Box entry; without `t` it applies to every step, with `t` (a step index)
/// it overrides that step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    pub lo: Vec<Option<f64>>,
    pub hi: Vec<Option<f64>>,
}

/// Where a spec's coefficients came from, kept for re-serialization.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum CoefficientSource {
    Family(FamilyConfig),
    Tables(TablesConfig),
}

fn mat(name: &str, rows: &Option<Rows>, shape: (usize, usize)) -> Result<DMatrix<f64>> {
    let Some(rows) = rows else {
        return Ok(DMatrix::zeros(shape.0, shape.1));
    };
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(Error::Validation(format!("{name} must be a {} x {} matrix", shape.0, shape.1)));
    }
    Ok(DMatrix::from_fn(shape.0, shape.1, |i, j| rows[i][j]))
}

fn vector(name: &str, v: &Option<Vec<f64>>, len: usize) -> Result<DVector<f64>> {
    match v {
        None => Ok(DVector::zeros(len)),
        Some(v) if v.len() == len => Ok(DVector::from_column_slice(v)),
        Some(v) => Err(Error::Validation(format!("{name} has length {}, expected {len}", v.len()))),
    }
}

fn mats(name: &str, list: &Option<Vec<Rows>>, d: usize, shape: (usize, usize)) -> Result<Vec<DMatrix<f64>>> {
    match list {
        None => Ok(vec![DMatrix::zeros(shape.0, shape.1); d]),
        Some(l) if l.len() == d => l.iter().enumerate().map(|(j, m)| mat(&format!("{name}[{j}]"), &Some(m.clone()), shape)).collect(),
        Some(l) => Err(Error::Validation(format!("{name} lists {} blocks, expected d = {d}", l.len()))),
    }
}

fn rows_of(m: &DMatrix<f64>) -> Option<Rows> {
    if m.iter().all(|v| *v == 0.0) {
        return None;
    }
    Some((0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect())
}

fn vec_of(v: &DVector<f64>) -> Option<Vec<f64>> {
    if v.iter().all(|x| *x == 0.0) {
        None
    } else {
        Some(v.iter().copied().collect())
    }
}

impl LqStageConfig {
    fn build(&self, dims: Dims) -> Result<LqStage> {
        let Dims { n, r, d } = dims;
        let sig_0 = match &self.sig_0 {
            None => vec![DVector::zeros(n); d],
            Some(l) if l.len() == d => {
                l.iter().enumerate().map(|(j, v)| vector(&format!("sig_0[{j}]"), &Some(v.clone()), n)).collect::<Result<_>>()?
            }
            Some(l) => return Err(Error::Validation(format!("sig_0 lists {} vectors, expected d = {d}", l.len()))),
        };
        Ok(LqStage {
            a: mat("a", &self.a, (n, n))?,
            a_bar: mat("a_bar", &self.a_bar, (n, n))?,
            b: mat("b", &self.b, (n, r))?,
            c: vector("c", &self.c, n)?,
            sig_x: mats("sig_x", &self.sig_x, d, (n, n))?,
            sig_y: mats("sig_y", &self.sig_y, d, (n, n))?,
            sig_u: mats("sig_u", &self.sig_u, d, (n, r))?,
            sig_0,
            q: mat("q", &self.q, (n, n))?,
            q_bar: mat("q_bar", &self.q_bar, (n, n))?,
            r: mat("r", &self.r, (r, r))?,
            q_lin: vector("q_lin", &self.q_lin, n)?,
            q_bar_lin: vector("q_bar_lin", &self.q_bar_lin, n)?,
            r_lin: vector("r_lin", &self.r_lin, r)?,
        })
    }

    fn from_stage(s: &LqStage) -> Self {
        let list = |ms: &[DMatrix<f64>]| {
            if ms.iter().all(|m| m.iter().all(|v| *v == 0.0)) {
                None
            } else {
                Some(ms.iter().map(|m| rows_of(m).unwrap_or_else(|| vec![vec![0.0; m.ncols()]; m.nrows()])).collect())
            }
        };
        let sig_0 = if s.sig_0.iter().all(|v| v.iter().all(|x| *x == 0.0)) {
            None
        } else {
            Some(s.sig_0.iter().map(|v| v.iter().copied().collect()).collect())
        };
        Self {
            a: rows_of(&s.a),
            a_bar: rows_of(&s.a_bar),
            b: rows_of(&s.b),
            c: vec_of(&s.c),
            sig_x: list(&s.sig_x),
            sig_y: list(&s.sig_y),
            sig_u: list(&s.sig_u),
            sig_0,
            q: rows_of(&s.q),
            q_bar: rows_of(&s.q_bar),
            r: rows_of(&s.r),
            q_lin: vec_of(&s.q_lin),
            q_bar_lin: vec_of(&s.q_bar_lin),
            r_lin: vec_of(&s.r_lin),
        }
    }
}

impl LqTerminalConfig {
    fn build(&self, n: usize) -> Result<LqTerminal> {
        Ok(LqTerminal {
            g: mat("g", &self.g, (n, n))?,
            g_bar: mat("g_bar", &self.g_bar, (n, n))?,
            g_lin: vector("g_lin", &self.g_lin, n)?,
            g_bar_lin: vector("g_bar_lin", &self.g_bar_lin, n)?,
        })
    }

    fn from_terminal(t: &LqTerminal) -> Self {
        Self { g: rows_of(&t.g), g_bar: rows_of(&t.g_bar), g_lin: vec_of(&t.g_lin), g_bar_lin: vec_of(&t.g_bar_lin) }
    }
}

impl LqFamilyParams {
    pub fn from_family(f: &LqMeanField) -> Self {
        Self { stage: LqStageConfig::from_stage(&f.stages()[0]), terminal: LqTerminalConfig::from_terminal(f.terminal_cost()) }
    }
}

impl TablesConfig {
    pub fn from_family(f: &LqMeanField) -> Self {
        Self {
            stages: f.stages().iter().map(LqStageConfig::from_stage).collect(),
            terminal: LqTerminalConfig::from_terminal(f.terminal_cost()),
        }
    }
}

impl ProblemConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization")
    }

    pub fn build(&self) -> Result<ProblemSpec> {
        let dims = Dims { n: self.dims.n, r: self.dims.r, d: self.dims.d };
        let grid = TimeGrid::new(self.grid.t0, self.grid.h, self.grid.steps)?;
        let source = match (&self.family, &self.tables) {
            (Some(f), None) => CoefficientSource::Family(f.clone()),
            (None, Some(t)) => CoefficientSource::Tables(t.clone()),
            (Some(_), Some(_)) => return Err(Error::Validation("give either `family` or `tables`, not both".into())),
            (None, None) => return Err(Error::Validation("one of `family` or `tables` is required".into())),
        };
        let (coeffs, default_box, default_dir): (Arc<dyn Coefficients>, AdmissibleSet, Direction) = match &source {
            CoefficientSource::Family(FamilyConfig::LqMeanfield(p)) => {
                let fam = LqMeanField::new(dims, vec![p.stage.build(dims)?], p.terminal.build(dims.n)?)?;
                (Arc::new(fam), AdmissibleSet::unbounded(dims.r, grid.steps), Direction::Minimize)
            }
            CoefficientSource::Family(FamilyConfig::Prodcons(p)) => {
                if dims != (Dims { n: 1, r: 1, d: 1 }) {
                    return Err(Error::Validation("prodcons requires n = r = d = 1".into()));
                }
                (Arc::new(Prodcons::new(*p, grid.h)?), Prodcons::default_box(p, grid.steps), Direction::Maximize)
            }
            CoefficientSource::Family(FamilyConfig::SineMeanfield(p)) => {
                (Arc::new(SineMeanField::new(dims, p.clone())?), AdmissibleSet::unbounded(dims.r, grid.steps), Direction::Minimize)
            }
            CoefficientSource::Tables(t) => {
                if t.stages.len() != grid.steps + 1 {
                    return Err(Error::Validation(format!("tables list {} stages, expected N + 1 = {}", t.stages.len(), grid.steps + 1)));
                }
                let stages = t.stages.iter().map(|s| s.build(dims)).collect::<Result<Vec<_>>>()?;
                let fam = LqMeanField::new(dims, stages, t.terminal.build(dims.n)?)?;
                (Arc::new(fam), AdmissibleSet::unbounded(dims.r, grid.steps), Direction::Minimize)
            }
        };
        if coeffs.dims() != dims {
            return Err(Error::Validation(format!("family dimensions {:?} disagree with dims {:?}", coeffs.dims(), dims)));
        }
        let admissible = match &self.admissible {
            None => default_box,
            Some(entries) => boxes_from_entries(entries, dims.r, grid.steps, &default_box)?,
        };
        if self.x0.len() != dims.n {
            return Err(Error::Validation(format!("x0 has length {} but n = {}", self.x0.len(), dims.n)));
        }
        let spec = ProblemSpec::new(
            grid,
            self.noise.clone(),
            DVector::from_column_slice(&self.x0),
            coeffs,
            admissible,
            self.direction.unwrap_or(default_dir),
        )?;
        Ok(spec.with_conventions(self.conventions.unwrap_or_default()).with_source(source))
    }
}

fn boxes_from_entries(entries: &[BoxConfig], r: usize, steps: usize, default: &AdmissibleSet) -> Result<AdmissibleSet> {
    let mut lo: Vec<DVector<f64>> = (0..=steps).map(|k| default.lo(k).clone()).collect();
    let mut hi: Vec<DVector<f64>> = (0..=steps).map(|k| default.hi(k).clone()).collect();
    let global = entries.iter().filter(|e| e.t.is_none());
    let specific = entries.iter().filter(|e| e.t.is_some());
    for e in global.chain(specific) {
        if e.lo.len() != r || e.hi.len() != r {
            return Err(Error::Validation(format!("admissible box bounds must have length r = {r}")));
        }
        let l = DVector::from_iterator(r, e.lo.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)));
        let h = DVector::from_iterator(r, e.hi.iter().map(|v| v.unwrap_or(f64::INFINITY)));
        match e.t {
            Some(t) if t > steps => {
                return Err(Error::Validation(format!("admissible entry for step {t} beyond N = {steps}")));
            }
            Some(t) => {
                lo[t] = l;
                hi[t] = h;
            }
            None => {
                lo.iter_mut().for_each(|v| *v = l.clone());
                hi.iter_mut().for_each(|v| *v = h.clone());
            }
        }
    }
    AdmissibleSet::per_step(lo, hi)
}

fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl ProblemSpec {
    /// Normalized configuration: boxes are written out per step and the
    /// direction is explicit. Fails for specs built from custom coefficient sets.
    pub fn to_config(&self) -> Result<ProblemConfig> {
        let source = self.source().ok_or_else(|| Error::Usage("spec was built from custom coefficients and has no config form".into()))?;
        let (family, tables) = match source {
            CoefficientSource::Family(f) => (Some(f.clone()), None),
            CoefficientSource::Tables(t) => (None, Some(t.clone())),
        };
        let admissible = (0..=self.grid.steps)
            .map(|k| BoxConfig {
                t: Some(k),
                lo: self.admissible.lo(k).iter().copied().map(finite_or_none).collect(),
                hi: self.admissible.hi(k).iter().copied().map(finite_or_none).collect(),
            })
            .collect();
        Ok(ProblemConfig {
            dims: DimsConfig { n: self.dims.n, r: self.dims.r, d: self.dims.d },
            grid: GridConfig { t0: self.grid.t0, h: self.grid.h, steps: self.grid.steps },
            noise: self.noise.clone(),
            x0: self.x0.iter().copied().collect(),
            family,
            tables,
            admissible: Some(admissible),
            direction: Some(self.direction),
            conventions: (self.conventions != Conventions::default()).then_some(self.conventions),
        })
    }
}

/// Parses and validates a JSON problem configuration.
pub fn parse_problem(text: &str) -> Result<ProblemSpec> {
    let cfg: ProblemConfig =
        serde_json::from_str(text).map_err(|e| Error::Parse { line: e.line(), column: e.column(), msg: e.to_string() })?;
    cfg.build()
}

/// Builds a built-in family by name on binary noise with its default box.
pub fn builtin(name: &str, params: serde_json::Value, dims: Dims, grid: TimeGrid, x0: &[f64]) -> Result<ProblemSpec> {
    let family: FamilyConfig = serde_json::from_value(serde_json::json!({ "name": name, "params": params }))
        .map_err(|e| Error::Validation(format!("family `{name}`: {e}")))?;
    ProblemConfig {
        dims: DimsConfig { n: dims.n, r: dims.r, d: dims.d },
        grid: GridConfig { t0: grid.t0, h: grid.h, steps: grid.steps },
        noise: NoiseConfig::Binary,
        x0: x0.to_vec(),
        family: Some(family),
        tables: None,
        admissible: None,
        direction: None,
        conventions: None,
    }
    .build()
}
