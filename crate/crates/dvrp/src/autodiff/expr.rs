//! Scalar expression graphs with exact reverse-mode gradients.
//!
//! Expressions are built once as an arena of primitive ops referencing
//! parameter indices, then evaluated repeatedly against different
//! `ParamVector`s. The forward pass walks the arena in construction order
//! (a topological order by construction) and the backward pass walks it in
//! reverse, so both are bitwise deterministic for fixed inputs. Reductions
//! are fixed left-to-right folds.

use super::param::ParamVector;
use crate::error::{DvrpError, Result};
use std::collections::HashMap;

/// Handle to a node inside an expression graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) u32);

#[derive(Debug, Clone, Copy)]
enum Op {
    Const(f64),
    Param(u32),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Tanh(NodeId),
    Min(NodeId, NodeId),
    Max(NodeId, NodeId),
    StopGrad(NodeId),
}

/// Abstract numeric backend. The policy and objective forward passes are
/// written once against this trait; instantiating with [`Values`] evaluates
/// directly in `f64`, instantiating with [`GraphBuilder`] records the same
/// operations (in the same order) into a differentiable graph. Sharing the
/// code path is what makes sampled log-probabilities bitwise equal to the
/// graph-evaluated ones.
pub trait Algebra {
    type V: Copy;
    fn constant(&mut self, x: f64) -> Self::V;
    fn param(&mut self, index: usize) -> Self::V;
    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn div(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn neg(&mut self, a: Self::V) -> Self::V;
    fn exp(&mut self, a: Self::V) -> Self::V;
    fn ln(&mut self, a: Self::V) -> Self::V;
    fn tanh(&mut self, a: Self::V) -> Self::V;
    fn min(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn max(&mut self, a: Self::V, b: Self::V) -> Self::V;
    /// Value passes through; gradient does not.
    fn stop_grad(&mut self, a: Self::V) -> Self::V;

    /// Left-to-right sum. Empty input sums to 0.
    fn sum(&mut self, items: &[Self::V]) -> Self::V {
        match items.split_first() {
            None => self.constant(0.0),
            Some((&first, rest)) => {
                let mut acc = first;
                for &x in rest {
                    acc = self.add(acc, x);
                }
                acc
            }
        }
    }

    /// Dot product as a left-to-right sum of products.
    fn dot(&mut self, a: &[Self::V], b: &[Self::V]) -> Self::V {
        debug_assert_eq!(a.len(), b.len());
        let prods: Vec<Self::V> = a.iter().zip(b).map(|(&x, &y)| self.mul(x, y)).collect();
        self.sum(&prods)
    }

    /// Dense row-major matrix (rows x cols) times vector.
    fn matvec(&mut self, mat: &[Self::V], rows: usize, cols: usize, v: &[Self::V]) -> Vec<Self::V> {
        debug_assert_eq!(mat.len(), rows * cols);
        debug_assert_eq!(v.len(), cols);
        (0..rows).map(|r| self.dot(&mat[r * cols..(r + 1) * cols], v)).collect()
    }

    /// Numerically stable softmax: shift by the running max, exponentiate,
    /// normalize. The shift changes nothing mathematically, so gradients
    /// remain exact even at argmax ties.
    fn softmax(&mut self, logits: &[Self::V]) -> Vec<Self::V> {
        debug_assert!(!logits.is_empty());
        let mut m = logits[0];
        for &z in &logits[1..] {
            m = self.max(m, z);
        }
        let shifted: Vec<Self::V> = logits.iter().map(|&z| self.sub(z, m)).collect();
        let exps: Vec<Self::V> = shifted.iter().map(|&z| self.exp(z)).collect();
        let total = self.sum(&exps);
        exps.iter().map(|&e| self.div(e, total)).collect()
    }
}

/// Direct `f64` evaluation backend.
pub struct Values<'a> {
    params: &'a [f64],
}

impl<'a> Values<'a> {
    pub fn new(params: &'a ParamVector) -> Self {
        Self { params: params.values() }
    }

    pub fn from_slice(params: &'a [f64]) -> Self {
        Self { params }
    }
}

impl Algebra for Values<'_> {
    type V = f64;
    fn constant(&mut self, x: f64) -> f64 {
        x
    }
    fn param(&mut self, index: usize) -> f64 {
        self.params[index]
    }
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    fn div(&mut self, a: f64, b: f64) -> f64 {
        a / b
    }
    fn neg(&mut self, a: f64) -> f64 {
        -a
    }
    fn exp(&mut self, a: f64) -> f64 {
        a.exp()
    }
    fn ln(&mut self, a: f64) -> f64 {
        a.ln()
    }
    fn tanh(&mut self, a: f64) -> f64 {
        a.tanh()
    }
    fn min(&mut self, a: f64, b: f64) -> f64 {
        if a <= b {
            a
        } else {
            b
        }
    }
    fn max(&mut self, a: f64, b: f64) -> f64 {
        if a >= b {
            a
        } else {
            b
        }
    }
    fn stop_grad(&mut self, a: f64) -> f64 {
        a
    }
}

/// Records operations into an arena for later evaluation and
/// differentiation. Parameter nodes are deduplicated by index.
#[derive(Default)]
pub struct GraphBuilder {
    ops: Vec<Op>,
    param_nodes: HashMap<u32, NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let id = NodeId(self.ops.len() as u32);
        self.ops.push(op);
        id
    }

    pub fn node_count(&self) -> usize {
        self.ops.len()
    }

    /// Finish building; `root` becomes the scalar the expression denotes.
    pub fn finish(self, root: NodeId) -> ScalarExpr {
        assert!((root.0 as usize) < self.ops.len(), "root out of range");
        ScalarExpr { ops: self.ops, root }
    }
}

impl Algebra for GraphBuilder {
    type V = NodeId;
    fn constant(&mut self, x: f64) -> NodeId {
        self.push(Op::Const(x))
    }
    fn param(&mut self, index: usize) -> NodeId {
        let idx = u32::try_from(index).expect("param index fits u32");
        if let Some(&id) = self.param_nodes.get(&idx) {
            return id;
        }
        let id = self.push(Op::Param(idx));
        self.param_nodes.insert(idx, id);
        id
    }
    fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }
    fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }
    fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Div(a, b))
    }
    fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Neg(a))
    }
    fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }
    fn ln(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Ln(a))
    }
    fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }
    fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Min(a, b))
    }
    fn max(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Max(a, b))
    }
    fn stop_grad(&mut self, a: NodeId) -> NodeId {
        self.push(Op::StopGrad(a))
    }
}

/// An immutable scalar-valued expression over a `ParamVector`.
/// Cheap to evaluate repeatedly; safe to share across threads.
pub struct ScalarExpr {
    ops: Vec<Op>,
    root: NodeId,
}

impl ScalarExpr {
    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node_count(&self) -> usize {
        self.ops.len()
    }

    /// Forward pass over every node. Returns the full value buffer so
    /// callers can read intermediate nodes (e.g. loss components).
    pub fn forward(&self, params: &ParamVector) -> Result<Vec<f64>> {
        let p = params.values();
        let mut vals = vec![0.0f64; self.ops.len()];
        for (i, op) in self.ops.iter().enumerate() {
            let v = match *op {
                Op::Const(c) => c,
                Op::Param(idx) => *p.get(idx as usize).ok_or_else(|| {
                    DvrpError::Domain(format!("param index {idx} out of range {}", p.len()))
                })?,
                Op::Add(a, b) => vals[a.0 as usize] + vals[b.0 as usize],
                Op::Sub(a, b) => vals[a.0 as usize] - vals[b.0 as usize],
                Op::Mul(a, b) => vals[a.0 as usize] * vals[b.0 as usize],
                Op::Div(a, b) => {
                    let d = vals[b.0 as usize];
                    if d == 0.0 {
                        return Err(DvrpError::Domain("division by zero".into()));
                    }
                    vals[a.0 as usize] / d
                }
                Op::Neg(a) => -vals[a.0 as usize],
                Op::Exp(a) => vals[a.0 as usize].exp(),
                Op::Ln(a) => {
                    let x = vals[a.0 as usize];
                    if x <= 0.0 {
                        return Err(DvrpError::Domain(format!("log of non-positive value {x}")));
                    }
                    x.ln()
                }
                Op::Tanh(a) => vals[a.0 as usize].tanh(),
                Op::Min(a, b) => {
                    let (x, y) = (vals[a.0 as usize], vals[b.0 as usize]);
                    if x <= y {
                        x
                    } else {
                        y
                    }
                }
                Op::Max(a, b) => {
                    let (x, y) = (vals[a.0 as usize], vals[b.0 as usize]);
                    if x >= y {
                        x
                    } else {
                        y
                    }
                }
                Op::StopGrad(a) => vals[a.0 as usize],
            };
            vals[i] = v;
        }
        Ok(vals)
    }

    /// Value of the expression at `params`.
    pub fn eval(&self, params: &ParamVector) -> Result<f64> {
        Ok(self.forward(params)?[self.root.0 as usize])
    }

    /// Reverse accumulation from `seed_root` given a forward value buffer.
    /// Returns d(root)/d(params) as a dense vector of `params.len()`.
    pub fn backward(&self, values: &[f64], param_len: usize) -> Vec<f64> {
        debug_assert_eq!(values.len(), self.ops.len());
        let mut adj = vec![0.0f64; self.ops.len()];
        let mut grad = vec![0.0f64; param_len];
        adj[self.root.0 as usize] = 1.0;
        for i in (0..=self.root.0 as usize).rev() {
            let g = adj[i];
            if g == 0.0 {
                // Sparse graphs (stop-grad subtrees, clipped branches) make
                // this skip worthwhile; correctness does not depend on it.
                if !matches!(self.ops[i], Op::Param(_)) {
                    continue;
                }
            }
            match self.ops[i] {
                Op::Const(_) => {}
                Op::Param(idx) => grad[idx as usize] += g,
                Op::Add(a, b) => {
                    adj[a.0 as usize] += g;
                    adj[b.0 as usize] += g;
                }
                Op::Sub(a, b) => {
                    adj[a.0 as usize] += g;
                    adj[b.0 as usize] -= g;
                }
                Op::Mul(a, b) => {
                    adj[a.0 as usize] += g * values[b.0 as usize];
                    adj[b.0 as usize] += g * values[a.0 as usize];
                }
                Op::Div(a, b) => {
                    let d = values[b.0 as usize];
                    adj[a.0 as usize] += g / d;
                    adj[b.0 as usize] -= g * values[a.0 as usize] / (d * d);
                }
                Op::Neg(a) => adj[a.0 as usize] -= g,
                Op::Exp(a) => adj[a.0 as usize] += g * values[i],
                Op::Ln(a) => adj[a.0 as usize] += g / values[a.0 as usize],
                Op::Tanh(a) => {
                    let t = values[i];
                    adj[a.0 as usize] += g * (1.0 - t * t);
                }
                Op::Min(a, b) => {
                    if values[a.0 as usize] <= values[b.0 as usize] {
                        adj[a.0 as usize] += g;
                    } else {
                        adj[b.0 as usize] += g;
                    }
                }
                Op::Max(a, b) => {
                    if values[a.0 as usize] >= values[b.0 as usize] {
                        adj[a.0 as usize] += g;
                    } else {
                        adj[b.0 as usize] += g;
                    }
                }
                Op::StopGrad(_) => {}
            }
        }
        grad
    }

    /// d(root)/d(params) via reverse accumulation.
    pub fn gradient(&self, params: &ParamVector) -> Result<Vec<f64>> {
        let values = self.forward(params)?;
        Ok(self.backward(&values, params.len()))
    }
}

/// Central finite differences: (f(p + h e_i) - f(p - h e_i)) / 2h per
/// coordinate. The verification oracle for every gradient in this crate;
/// deliberately independent of the reverse-mode path.
pub fn finite_difference_gradient<F>(f: F, params: &ParamVector, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&ParamVector) -> Result<f64>,
{
    assert!(h > 0.0, "step must be positive");
    let mut grad = vec![0.0f64; params.len()];
    let mut work = params.clone();
    for i in 0..params.len() {
        let orig = params.values()[i];
        work.values_mut()[i] = orig + h;
        let up = f(&work)?;
        work.values_mut()[i] = orig - h;
        let down = f(&work)?;
        work.values_mut()[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Per-coordinate check of `grad` against `reference` with relative
/// tolerance `rel` and absolute floor `abs` for near-zero coordinates.
pub fn gradient_close(grad: &[f64], reference: &[f64], rel: f64, abs: f64) -> bool {
    grad.len() == reference.len()
        && grad.iter().zip(reference).all(|(&g, &r)| {
            let diff = (g - r).abs();
            diff <= abs || diff <= rel * r.abs().max(g.abs())
        })
}
