//! Finite filtered probability space.
//!
//! A [`ScenarioTree`] enumerates every path of a finite-support noise model
//! over the time grid. Level `k` holds one node per atom of the σ-field
//! generated by the first `k` increments, so adapted processes are simply
//! values attached to nodes and every expectation is an exact weighted sum.
//!
//! Increments are indexed by step: the branch leading from a level-`k` node
//! to its level-`k+1` child carries `w_h(t_k)`.

use std::ops::{Range, RangeInclusive};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::{CheckReport, Residual};

/// Default cap on the total number of tree nodes.
pub const DEFAULT_NODE_CAP: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub h: f64,
    /// Number of control steps `N`; times run over `t_0..=t_{N+1}`.
    #[serde(rename = "N")]
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, h: f64, steps: usize) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Validation(format!("step size h must be positive, got {h}")));
        }
        if !t0.is_finite() {
            return Err(Error::Validation("t0 must be finite".into()));
        }
        Ok(Self { t0, h, steps })
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.h
    }

    /// Index of the terminal level, `N + 1`.
    pub fn terminal(&self) -> usize {
        self.steps + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportPoint {
    pub value: f64,
    pub prob: f64,
}

/// Product-form law of one increment `w_h(t_k) ∈ ℝ^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    /// Step size the second moments are calibrated to.
    pub h: f64,
    pub components: Vec<Vec<SupportPoint>>,
}

impl NoiseModel {
    /// Symmetric two-point law `±√h` with probability ½ per component.
    pub fn binary(d: usize, h: f64) -> Self {
        let a = h.sqrt();
        let comp = vec![SupportPoint { value: a, prob: 0.5 }, SupportPoint { value: -a, prob: 0.5 }];
        Self { h, components: vec![comp; d] }
    }

    /// `{−a, 0, +a}` with probabilities `{p, 1−2p, p}` and `2pa² = h`.
    pub fn trinomial(d: usize, h: f64, p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 0.5) {
            return Err(Error::InvalidModel(format!("trinomial edge probability must lie in (0, 1/2), got {p}")));
        }
        let a = (h / (2.0 * p)).sqrt();
        let comp =
            vec![SupportPoint { value: -a, prob: p }, SupportPoint { value: 0.0, prob: 1.0 - 2.0 * p }, SupportPoint { value: a, prob: p }];
        Ok(Self { h, components: vec![comp; d] })
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn branching(&self) -> usize {
        self.components.iter().map(Vec::len).product()
    }

    fn check_support(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::InvalidModel("noise dimension must be at least 1".into()));
        }
        for (j, comp) in self.components.iter().enumerate() {
            if comp.is_empty() {
                return Err(Error::InvalidModel(format!("component {} has empty support", j + 1)));
            }
            if let Some(bad) = comp.iter().find(|s| !(s.prob > 0.0) || !s.value.is_finite()) {
                return Err(Error::InvalidModel(format!(
                    "component {} has invalid support point (value {}, prob {})",
                    j + 1,
                    bad.value,
                    bad.prob
                )));
            }
        }
        Ok(())
    }

    /// Joint support points in lexicographic order (last component fastest).
    pub fn joint_support(&self) -> Vec<(Vec<f64>, f64)> {
        let mut out = vec![(Vec::with_capacity(self.dim()), 1.0)];
        for comp in &self.components {
            out = out
                .into_iter()
                .flat_map(|(w, p)| {
                    comp.iter().map(move |s| {
                        let mut w = w.clone();
                        w.push(s.value);
                        (w, p * s.prob)
                    })
                })
                .collect();
        }
        out
    }
}

/// Checks the moment conditions on the increments: zero mean, variance `h`,
/// uncorrelated components, finite fourth moment.
pub fn validate_noise(noise: &NoiseModel, tol: f64) -> Result<CheckReport> {
    noise.check_support()?;
    let h = noise.h;
    let mut report = CheckReport::new("noise_moments");
    for (j, comp) in noise.components.iter().enumerate() {
        let c = j + 1;
        let total: f64 = comp.iter().map(|s| s.prob).sum();
        let m1: f64 = comp.iter().map(|s| s.prob * s.value).sum();
        let m2: f64 = comp.iter().map(|s| s.prob * s.value * s.value).sum();
        let m4: f64 = comp.iter().map(|s| s.prob * s.value.powi(4)).sum();
        report.push(Residual::new(format!("|sum p - 1| (w^{c})"), (total - 1.0).abs(), tol));
        report.push(Residual::new(format!("|E w^{c}|"), m1.abs(), tol));
        report.push(Residual::new(format!("|E (w^{c})^2 - h|"), (m2 - h).abs(), tol));
        report.push(Residual::info(format!("E (w^{c})^4"), m4));
    }
    let joint = noise.joint_support();
    for m in 0..noise.dim() {
        for l in (m + 1)..noise.dim() {
            let cross: f64 = joint.iter().map(|(w, p)| p * w[m] * w[l]).sum();
            report.push(Residual::new(format!("|E w^{} w^{}|", m + 1, l + 1), cross.abs(), tol));
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    /// Breadth-first identifier, unique across the tree.
    pub id: usize,
    pub level: usize,
    /// Index of the parent within level `level - 1`.
    pub parent: Option<usize>,
    /// Index into [`ScenarioTree::branches`] of the increment on the incoming edge.
    pub branch: Option<usize>,
    pub cond_prob: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub w: Vec<f64>,
    pub prob: f64,
}

/// Immutable recombination-free tree over levels `0..=N+1`.
#[derive(Debug, Clone)]
pub struct ScenarioTree {
    grid: TimeGrid,
    noise: NoiseModel,
    branches: Vec<Branch>,
    levels: Vec<Vec<Node>>,
}

pub fn build_tree(grid: TimeGrid, noise: NoiseModel) -> Result<ScenarioTree> {
    build_tree_with_cap(grid, noise, DEFAULT_NODE_CAP)
}

pub fn build_tree_with_cap(grid: TimeGrid, noise: NoiseModel, cap: usize) -> Result<ScenarioTree> {
    noise.check_support()?;
    let b = noise.branching();
    let depth = grid.terminal();
    let total: f64 = (0..=depth).map(|k| (b as f64).powi(k as i32)).sum();
    if total > cap as f64 {
        return Err(Error::TooLarge { nodes: total, cap });
    }
    let branches: Vec<Branch> = noise.joint_support().into_iter().map(|(w, prob)| Branch { w, prob }).collect();

    let mut levels: Vec<Vec<Node>> = Vec::with_capacity(depth + 1);
    levels.push(vec![Node { id: 0, level: 0, parent: None, branch: None, cond_prob: 1.0, prob: 1.0 }]);
    let mut next_id = 1;
    for k in 1..=depth {
        let prev = &levels[k - 1];
        let mut level = Vec::with_capacity(prev.len() * b);
        for (pi, parent) in prev.iter().enumerate() {
            for (bi, br) in branches.iter().enumerate() {
                level.push(Node {
                    id: next_id,
                    level: k,
                    parent: Some(pi),
                    branch: Some(bi),
                    cond_prob: br.prob,
                    prob: parent.prob * br.prob,
                });
                next_id += 1;
            }
        }
        levels.push(level);
    }
    Ok(ScenarioTree { grid, noise, branches, levels })
}

impl ScenarioTree {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn noise_dim(&self) -> usize {
        self.noise.dim()
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn branching(&self) -> usize {
        self.branches.len()
    }

    /// Index of the last level, `N + 1`.
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, k: usize) -> &[Node] {
        &self.levels[k]
    }

    pub fn level_len(&self, k: usize) -> usize {
        self.levels[k].len()
    }

    pub fn node_count(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn node(&self, k: usize, i: usize) -> &Node {
        &self.levels[k][i]
    }

    pub fn prob(&self, k: usize, i: usize) -> f64 {
        self.levels[k][i].prob
    }

    /// Indices within level `k + 1` of the children of node `(k, i)`.
    pub fn children(&self, k: usize, i: usize) -> Range<usize> {
        debug_assert!(k < self.depth());
        let b = self.branching();
        i * b..(i + 1) * b
    }

    /// Increment `w_h(t_{k-1})` on the edge into node `(k, i)`; empty at the root.
    pub fn increment(&self, k: usize, i: usize) -> &[f64] {
        match self.levels[k][i].branch {
            Some(b) => &self.branches[b].w,
            None => &[],
        }
    }

    /// `E{ g(child) | F_k }` at node `(k, i)`, where `g` receives the child
    /// index in level `k + 1` and the increment on its incoming edge.
    pub fn cond_expect_by<T: NodeValue>(&self, k: usize, i: usize, mut g: impl FnMut(usize, &[f64]) -> T) -> T {
        let mut acc: Option<T> = None;
        for (c, br) in self.children(k, i).zip(&self.branches) {
            let v = g(c, &br.w);
            match acc.as_mut() {
                Some(a) => a.axpy(br.prob, &v),
                None => {
                    let mut a = v.zeros_like();
                    a.axpy(br.prob, &v);
                    acc = Some(a);
                }
            }
        }
        acc.expect("nonempty branch set")
    }

    /// `E g(node)` over level `k`.
    pub fn expect_by<T: NodeValue>(&self, k: usize, mut g: impl FnMut(usize) -> T) -> T {
        let mut acc: Option<T> = None;
        for (i, node) in self.levels[k].iter().enumerate() {
            let v = g(i);
            match acc.as_mut() {
                Some(a) => a.axpy(node.prob, &v),
                None => {
                    let mut a = v.zeros_like();
                    a.axpy(node.prob, &v);
                    acc = Some(a);
                }
            }
        }
        acc.expect("nonempty level")
    }

    /// Maps every level-(k+1) node to the breadth-first id of its parent.
    pub fn parent_id(&self, k: usize, i: usize) -> Option<usize> {
        let p = self.levels[k][i].parent?;
        Some(self.levels[k - 1][p].id)
    }
}

/// Values that can be averaged over nodes.
pub trait NodeValue: Clone {
    fn zeros_like(&self) -> Self;
    /// `self += a * x`.
    fn axpy(&mut self, a: f64, x: &Self);
}

impl NodeValue for f64 {
    fn zeros_like(&self) -> Self {
        0.0
    }
    fn axpy(&mut self, a: f64, x: &Self) {
        *self += a * x;
    }
}

impl NodeValue for DVector<f64> {
    fn zeros_like(&self) -> Self {
        DVector::zeros(self.len())
    }
    fn axpy(&mut self, a: f64, x: &Self) {
        nalgebra::Matrix::axpy(self, a, x, 1.0);
    }
}

impl NodeValue for DMatrix<f64> {
    fn zeros_like(&self) -> Self {
        DMatrix::zeros(self.nrows(), self.ncols())
    }
    fn axpy(&mut self, a: f64, x: &Self) {
        *self += x * a;
    }
}

/// Node-indexed values over a contiguous range of levels.
///
/// Measurability is structural: a level-`k` value is a function of the
/// level-`k` node only.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess<T> {
    first_level: usize,
    levels: Vec<Vec<T>>,
}

impl<T: Clone> AdaptedProcess<T> {
    pub fn from_fn(tree: &ScenarioTree, range: RangeInclusive<usize>, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let first_level = *range.start();
        let levels = range.map(|k| (0..tree.level_len(k)).map(|i| f(k, i)).collect()).collect();
        Self { first_level, levels }
    }

    /// Same value at every node of the range.
    pub fn constant(tree: &ScenarioTree, range: RangeInclusive<usize>, value: T) -> Self {
        Self::from_fn(tree, range, |_, _| value.clone())
    }

    /// Builds a process from explicit level vectors, checking shapes against the tree.
    pub fn from_levels(tree: &ScenarioTree, first_level: usize, levels: Vec<Vec<T>>) -> Result<Self> {
        for (offset, vals) in levels.iter().enumerate() {
            let k = first_level + offset;
            if k > tree.depth() || vals.len() != tree.level_len(k) {
                return Err(Error::Usage(format!(
                    "level {k} has {} values but the tree has {} nodes there",
                    vals.len(),
                    if k > tree.depth() { 0 } else { tree.level_len(k) }
                )));
            }
        }
        Ok(Self { first_level, levels })
    }

    /// A process holding a single level.
    pub fn single_level(k: usize, values: Vec<T>) -> Self {
        Self { first_level: k, levels: vec![values] }
    }

    pub fn first_level(&self) -> usize {
        self.first_level
    }

    pub fn last_level(&self) -> usize {
        self.first_level + self.levels.len() - 1
    }

    pub fn covers(&self, k: usize) -> bool {
        k >= self.first_level && k <= self.last_level()
    }

    pub fn level(&self, k: usize) -> &[T] {
        &self.levels[k - self.first_level]
    }

    pub fn level_mut(&mut self, k: usize) -> &mut [T] {
        &mut self.levels[k - self.first_level]
    }

    pub fn get(&self, k: usize, i: usize) -> &T {
        &self.levels[k - self.first_level][i]
    }

    pub fn get_mut(&mut self, k: usize, i: usize) -> &mut T {
        &mut self.levels[k - self.first_level][i]
    }

    pub fn levels(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.levels.iter().enumerate().map(move |(o, v)| (self.first_level + o, v.as_slice()))
    }

    pub fn push_level(&mut self, values: Vec<T>) {
        self.levels.push(values);
    }

    pub fn map<U: Clone>(&self, mut f: impl FnMut(usize, usize, &T) -> U) -> AdaptedProcess<U> {
        AdaptedProcess {
            first_level: self.first_level,
            levels: self.levels().map(|(k, vals)| vals.iter().enumerate().map(|(i, v)| f(k, i, v)).collect()).collect(),
        }
    }
}

impl AdaptedProcess<DVector<f64>> {
    /// Largest absolute componentwise difference; infinite if the shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.first_level != other.first_level || self.levels.len() != other.levels.len() {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for (a, b) in self.levels.iter().zip(&other.levels) {
            if a.len() != b.len() {
                return f64::INFINITY;
            }
            for (x, y) in a.iter().zip(b) {
                if x.len() != y.len() {
                    return f64::INFINITY;
                }
                worst = worst.max((x - y).amax());
            }
        }
        worst
    }
}

/// `E{ z(t_{k+1}) | F_k }` at node `(k, i)`.
pub fn cond_expect<T: NodeValue>(tree: &ScenarioTree, proc: &AdaptedProcess<T>, k: usize, i: usize) -> Result<T> {
    if k >= tree.depth() || !proc.covers(k + 1) {
        return Err(Error::Usage(format!("conditional expectation at level {k} needs the process on level {}", k + 1)));
    }
    if i >= tree.level_len(k) {
        return Err(Error::Usage(format!("node {i} does not exist at level {k}")));
    }
    Ok(tree.cond_expect_by(k, i, |c, _| proc.get(k + 1, c).clone()))
}

/// `E z(t_k)`.
pub fn expect<T: NodeValue>(tree: &ScenarioTree, proc: &AdaptedProcess<T>, k: usize) -> Result<T> {
    if k > tree.depth() || !proc.covers(k) {
        return Err(Error::Usage(format!("process is not defined on level {k}")));
    }
    Ok(tree.expect_by(k, |i| proc.get(k, i).clone()))
}
