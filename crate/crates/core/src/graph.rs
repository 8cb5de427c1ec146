//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is a fixed, topologically ordered list of primitive ops over
//! named leaves. Leaves are bound to concrete matrices at evaluation time, so
//! one graph serves every mini-batch of a training loop. Broadcasting only
//! happens along the batch (row) dimension.
//!
//! ```
//! use ridnoise::graph::{Bindings, Graph};
//! use ridnoise::matrix::Matrix;
//!
//! let mut g = Graph::new();
//! let x = g.input("x");
//! let sq = g.mul(x, x);
//! let out = g.sum(sq);
//!
//! let mut b = Bindings::new();
//! b.insert("x".into(), Matrix::scalar(3.0));
//! let grads = g.gradients(&b, out, &["x"]).unwrap();
//! assert_eq!(grads["x"].get(0, 0), 6.0);
//! ```

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::{gemm, Matrix, Operand};

/// Values bound to graph leaves, keyed by leaf name.
pub type Bindings = BTreeMap<String, Matrix>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Input,
    Param,
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf { name: String, kind: LeafKind },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `n x c` plus a `1 x c` row repeated over the batch.
    AddRow(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Atan(NodeId),
    /// `n x c -> n x 1`.
    RowSum(NodeId),
    /// All entries to `1 x 1`.
    Sum(NodeId),
    /// Mean of all entries to `1 x 1`.
    Mean(NodeId),
    /// Column-wise concatenation.
    Concat(Vec<NodeId>),
    /// Columns `start..start + len`.
    Split { src: NodeId, start: usize, len: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Atan(..) => "atan",
            Op::RowSum(..) => "row_sum",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat(..) => "concat",
            Op::Split { .. } => "split",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Atan(a)
            | Op::RowSum(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::Split { src, .. } => vec![*src],
        }
    }
}

/// An immutable-once-built computation graph.
///
/// Nodes can only reference earlier nodes, so insertion order is a valid
/// topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Op>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0]
    }

    fn push(&mut self, op: Op) -> NodeId {
        for operand in op.operands() {
            assert!(operand.0 < self.nodes.len(), "node {operand:?} does not exist yet");
        }
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, name: &str, kind: LeafKind) -> NodeId {
        // a name maps to one leaf node so gradients accumulate in one place
        if let Some(i) = self
            .nodes
            .iter()
            .position(|op| matches!(op, Op::Leaf { name: n, .. } if n == name))
        {
            return NodeId(i);
        }
        self.push(Op::Leaf {
            name: name.to_string(),
            kind,
        })
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.leaf(name, LeafKind::Input)
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        self.leaf(name, LeafKind::Param)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        self.push(Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::AddScalar(a, c))
    }

    /// `a - b`, composed from scale and add.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn atan(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Atan(a))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowSum(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn split(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::Split { src, start, len })
    }

    /// Names of every leaf of the given kind, in insertion order.
    pub fn leaves(&self, kind: LeafKind) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|op| match op {
                Op::Leaf { name, kind: k } if *k == kind => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    fn leaf_node(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .iter()
            .position(|op| matches!(op, Op::Leaf { name: n, .. } if n == name))
            .map(NodeId)
            .ok_or_else(|| Error::UnboundLeaf(name.to_string()))
    }

    /// Marks every node that some node in `targets` depends on.
    fn needed(&self, targets: &[NodeId]) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        for t in targets {
            needed[t.0] = true;
        }
        for i in (0..self.nodes.len()).rev() {
            if needed[i] {
                for o in self.nodes[i].operands() {
                    needed[o.0] = true;
                }
            }
        }
        needed
    }

    /// Forward pass over the nodes `targets` depend on.
    pub fn forward(&self, bindings: &Bindings, targets: &[NodeId]) -> Result<Tape<'_>> {
        let needed = self.needed(targets);
        let mut values: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        for (i, op) in self.nodes.iter().enumerate() {
            if !needed[i] {
                values.push(None);
                continue;
            }
            let v = self.eval_op(i, op, &values, bindings)?;
            values.push(Some(v));
        }
        Ok(Tape {
            graph: self,
            values,
        })
    }

    /// Values of the requested nodes.
    pub fn evaluate(&self, bindings: &Bindings, outputs: &[NodeId]) -> Result<Vec<Matrix>> {
        let tape = self.forward(bindings, outputs)?;
        Ok(outputs.iter().map(|o| tape.value(*o).clone()).collect())
    }

    /// Gradients of a `1 x 1` output with respect to the named leaves.
    pub fn gradients(
        &self,
        bindings: &Bindings,
        scalar_output: NodeId,
        wrt: &[&str],
    ) -> Result<BTreeMap<String, Matrix>> {
        let tape = self.forward(bindings, &[scalar_output])?;
        tape.backward(scalar_output, wrt)
    }

    fn eval_op(
        &self,
        i: usize,
        op: &Op,
        values: &[Option<Matrix>],
        bindings: &Bindings,
    ) -> Result<Matrix> {
        let val = |id: &NodeId| values[id.0].as_ref().expect("operand evaluated");
        let mismatch = |detail: String| Error::ShapeMismatch {
            node: i,
            op: op.name(),
            detail,
        };
        Ok(match op {
            Op::Leaf { name, .. } => bindings
                .get(name)
                .cloned()
                .ok_or_else(|| Error::UnboundLeaf(name.clone()))?,
            Op::MatMul(a, b) => {
                let (a, b) = (val(a), val(b));
                if a.cols() != b.rows() {
                    return Err(mismatch(format!("{:?} x {:?}", a.shape(), b.shape())));
                }
                a.matmul(b)?
            }
            Op::Add(a, b) => {
                let (a, b) = (val(a), val(b));
                a.zip_map(b, |x, y| x + y)
                    .map_err(|_| mismatch(format!("{:?} + {:?}", a.shape(), b.shape())))?
            }
            Op::AddRow(a, r) => {
                let (a, r) = (val(a), val(r));
                a.add_row(r)
                    .map_err(|_| mismatch(format!("{:?} + row {:?}", a.shape(), r.shape())))?
            }
            Op::Mul(a, b) => {
                let (a, b) = (val(a), val(b));
                a.zip_map(b, |x, y| x * y)
                    .map_err(|_| mismatch(format!("{:?} * {:?}", a.shape(), b.shape())))?
            }
            Op::Scale(a, c) => val(a).scale(*c),
            Op::AddScalar(a, c) => val(a).map(|x| x + c),
            Op::Tanh(a) => val(a).map(f64::tanh),
            Op::Relu(a) => val(a).map(|x| x.max(0.0)),
            Op::Exp(a) => val(a).map(f64::exp),
            Op::Log(a) => val(a).map(f64::ln),
            Op::Atan(a) => val(a).map(f64::atan),
            Op::RowSum(a) => {
                let a = val(a);
                Matrix::new(a.rows(), 1, a.row_sums())?
            }
            Op::Sum(a) => Matrix::scalar(val(a).sum()),
            Op::Mean(a) => {
                let a = val(a);
                let count = a.rows() * a.cols();
                if count == 0 {
                    return Err(mismatch("mean of an empty matrix".into()));
                }
                Matrix::scalar(a.sum() / count as f64)
            }
            Op::Concat(parts) => {
                let parts: Vec<&Matrix> = parts.iter().map(val).collect();
                Matrix::hcat(&parts).map_err(|e| mismatch(e.to_string()))?
            }
            Op::Split { src, start, len } => {
                let s = val(src);
                if start + len > s.cols() {
                    return Err(mismatch(format!(
                        "columns {start}..{} of {:?}",
                        start + len,
                        s.shape()
                    )));
                }
                s.col_range(*start, *len)
            }
        })
    }
}

/// Node values from one forward pass.
pub struct Tape<'g> {
    graph: &'g Graph,
    values: Vec<Option<Matrix>>,
}

impl Tape<'_> {
    pub fn value(&self, node: NodeId) -> &Matrix {
        self.values[node.0]
            .as_ref()
            .expect("node was not part of the forward pass")
    }

    /// Back-propagates from a `1 x 1` node.
    pub fn backward(&self, output: NodeId, wrt: &[&str]) -> Result<BTreeMap<String, Matrix>> {
        let graph = self.graph;
        if self.value(output).shape() != (1, 1) {
            return Err(Error::NonScalarOutput(output.0));
        }
        let mut leaves = Vec::with_capacity(wrt.len());
        for name in wrt {
            let id = graph.leaf_node(name)?;
            if self.values[id.0].is_none() {
                return Err(Error::UnboundLeaf(name.to_string()));
            }
            leaves.push(id);
        }

        // only nodes on a path from a requested leaf carry adjoints
        let mut live = vec![false; graph.nodes.len()];
        for l in &leaves {
            live[l.0] = true;
        }
        for (i, op) in graph.nodes.iter().enumerate() {
            if op.operands().iter().any(|o| live[o.0]) {
                live[i] = true;
            }
        }

        let mut adj: Vec<Option<Matrix>> = vec![None; graph.nodes.len()];
        adj[output.0] = Some(Matrix::scalar(1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if matches!(graph.nodes[i], Op::Leaf { .. }) {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &live, &mut adj);
        }

        Ok(wrt
            .iter()
            .zip(&leaves)
            .map(|(name, id)| {
                let shape = self.value(*id).shape();
                let g = adj[id.0]
                    .take()
                    .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
                // the same leaf may be requested twice
                adj[id.0] = Some(g.clone());
                (name.to_string(), g)
            })
            .collect())
    }

    fn propagate(&self, i: usize, g: &Matrix, live: &[bool], adj: &mut [Option<Matrix>]) {
        let v = |id: &NodeId| self.value(*id);
        let mut send = |id: &NodeId, contribution: Matrix| {
            if !live[id.0] {
                return;
            }
            match &mut adj[id.0] {
                Some(acc) => {
                    for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        };
        match &self.graph.nodes[i] {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                if live[a.0] {
                    let bm = v(b);
                    let mut da = Matrix::zeros(g.rows(), bm.rows());
                    gemm(Operand::plain(g), Operand::transposed(bm), &mut da, 0.0);
                    send(a, da);
                }
                if live[b.0] {
                    let am = v(a);
                    let mut db = Matrix::zeros(am.cols(), g.cols());
                    gemm(Operand::transposed(am), Operand::plain(g), &mut db, 0.0);
                    send(b, db);
                }
            }
            Op::Add(a, b) => {
                send(a, g.clone());
                send(b, g.clone());
            }
            Op::AddRow(a, r) => {
                send(a, g.clone());
                send(r, Matrix::row_vector(&g.col_sums()));
            }
            Op::Mul(a, b) => {
                if live[a.0] {
                    send(a, g.zip_map(v(b), |x, y| x * y).expect("shape checked"));
                }
                if live[b.0] {
                    send(b, g.zip_map(v(a), |x, y| x * y).expect("shape checked"));
                }
            }
            Op::Scale(a, c) => send(a, g.scale(*c)),
            Op::AddScalar(a, _) => send(a, g.clone()),
            Op::Tanh(a) => {
                let y = self.value(NodeId(i));
                send(a, g.zip_map(y, |gv, t| gv * (1.0 - t * t)).expect("shape"));
            }
            Op::Relu(a) => {
                send(
                    a,
                    g.zip_map(v(a), |gv, x| if x > 0.0 { gv } else { 0.0 })
                        .expect("shape"),
                );
            }
            Op::Exp(a) => {
                let y = self.value(NodeId(i));
                send(a, g.zip_map(y, |gv, e| gv * e).expect("shape"));
            }
            Op::Log(a) => send(a, g.zip_map(v(a), |gv, x| gv / x).expect("shape")),
            Op::Atan(a) => send(
                a,
                g.zip_map(v(a), |gv, x| gv / (1.0 + x * x)).expect("shape"),
            ),
            Op::RowSum(a) => {
                let am = v(a);
                let mut d = Matrix::zeros(am.rows(), am.cols());
                for r in 0..am.rows() {
                    let gr = g.get(r, 0);
                    d.row_mut(r).iter_mut().for_each(|x| *x = gr);
                }
                send(a, d);
            }
            Op::Sum(a) => {
                let (r, c) = v(a).shape();
                send(a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::Mean(a) => {
                let (r, c) = v(a).shape();
                send(a, Matrix::filled(r, c, g.get(0, 0) / (r * c) as f64));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = v(p).cols();
                    if live[p.0] {
                        send(p, g.col_range(start, w));
                    }
                    start += w;
                }
            }
            Op::Split { src, start, len } => {
                let s = v(src);
                let mut d = Matrix::zeros(s.rows(), s.cols());
                for r in 0..s.rows() {
                    d.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                }
                send(src, d);
            }
        }
    }
}

/// Compares [`Graph::gradients`] against central differences.
///
/// Returns the largest entrywise relative error, using
/// `max(|analytic|, |numeric|, 1e-8)` as the denominator.
pub fn finite_diff_check(
    graph: &Graph,
    bindings: &Bindings,
    scalar_output: NodeId,
    wrt: &[&str],
    h: f64,
) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let analytic = graph.gradients(bindings, scalar_output, wrt)?;
    let mut probe = bindings.clone();
    let mut worst: f64 = 0.0;
    for name in wrt {
        let n = probe
            .get(*name)
            .ok_or_else(|| Error::UnboundLeaf(name.to_string()))?
            .data()
            .len();
        for k in 0..n {
            let original = probe[*name].data()[k];
            probe.get_mut(*name).unwrap().data_mut()[k] = original + h;
            let plus = graph.evaluate(&probe, &[scalar_output])?[0].get(0, 0);
            probe.get_mut(*name).unwrap().data_mut()[k] = original - h;
            let minus = graph.evaluate(&probe, &[scalar_output])?[0].get(0, 0);
            probe.get_mut(*name).unwrap().data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[*name].data()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Matrix)]) -> Bindings {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_by_identity() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let c = g.matmul(a, b);
        let a_val = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let out = g
            .evaluate(&bind(&[("a", a_val.clone()), ("b", Matrix::identity(2))]), &[c])
            .unwrap();
        assert_eq!(out[0], a_val);
    }

    #[test]
    fn tanh_of_zero() {
        let mut g = Graph::new();
        let x = g.input("x");
        let t = g.tanh(x);
        let out = g.evaluate(&bind(&[("x", Matrix::scalar(0.0))]), &[t]).unwrap();
        assert_eq!(out[0], Matrix::scalar(0.0));
    }

    #[test]
    fn square_then_row_sum() {
        let mut g = Graph::new();
        let x = g.input("x");
        let sq = g.mul(x, x);
        let rs = g.row_sum(sq);
        let out = g.evaluate(&bind(&[("x", Matrix::scalar(3.0))]), &[rs]).unwrap();
        assert_eq!(out[0], Matrix::scalar(9.0));
    }

    #[test]
    fn gradient_of_square() {
        let mut g = Graph::new();
        let x = g.param("x");
        let sq = g.mul(x, x);
        let s = g.sum(sq);
        let grads = g.gradients(&bind(&[("x", Matrix::scalar(3.0))]), s, &["x"]).unwrap();
        assert_eq!(grads["x"], Matrix::scalar(6.0));
    }

    #[test]
    fn gradient_through_matmul() {
        let mut g = Graph::new();
        let a = g.param("a");
        let b = g.input("b");
        let c = g.matmul(a, b);
        let s = g.sum(c);
        let grads = g
            .gradients(
                &bind(&[("a", m(&[&[1.0, 2.0]])), ("b", m(&[&[1.0], &[1.0]]))]),
                s,
                &["a"],
            )
            .unwrap();
        assert_eq!(grads["a"], m(&[&[1.0, 1.0]]));
    }

    #[test]
    fn tanh_slope_at_zero() {
        let mut g = Graph::new();
        let x = g.param("x");
        let t = g.tanh(x);
        let grads = g.gradients(&bind(&[("x", Matrix::scalar(0.0))]), t, &["x"]).unwrap();
        assert_eq!(grads["x"], Matrix::scalar(1.0));
    }

    #[test]
    fn unbound_leaf_is_reported() {
        let mut g = Graph::new();
        let x = g.input("x");
        let t = g.tanh(x);
        assert!(matches!(
            g.evaluate(&Bindings::new(), &[t]),
            Err(Error::UnboundLeaf(name)) if name == "x"
        ));
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let c = g.matmul(a, b);
        let err = g
            .evaluate(
                &bind(&[("a", Matrix::zeros(2, 3)), ("b", Matrix::zeros(2, 3))]),
                &[c],
            )
            .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { node, op: "matmul", .. } if node == c.index()));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut g = Graph::new();
        let x = g.param("x");
        let t = g.tanh(x);
        let err = g
            .gradients(&bind(&[("x", Matrix::zeros(2, 1))]), t, &["x"])
            .unwrap_err();
        assert!(matches!(err, Error::NonScalarOutput(_)));
    }

    #[test]
    fn shared_leaf_accumulates() {
        // d/dx sum(x * x + x) = 2x + 1
        let mut g = Graph::new();
        let x = g.param("x");
        let sq = g.mul(x, x);
        let y = g.add(sq, x);
        let s = g.sum(y);
        let grads = g
            .gradients(&bind(&[("x", m(&[&[1.0, -2.0]]))]), s, &["x"])
            .unwrap();
        assert_eq!(grads["x"], m(&[&[3.0, -3.0]]));
    }

    #[test]
    fn linear_graph_central_difference_is_exact() {
        let mut g = Graph::new();
        let a = g.param("a");
        let b = g.input("b");
        let c = g.matmul(a, b);
        let s = g.sum(c);
        let err = finite_diff_check(
            &g,
            &bind(&[("a", m(&[&[0.3, -1.2]])), ("b", m(&[&[2.0], &[0.5]]))]),
            s,
            &["a"],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn quadratic_graph_central_difference() {
        let mut g = Graph::new();
        let x = g.param("x");
        let sq = g.mul(x, x);
        let s = g.sum(sq);
        let err = finite_diff_check(&g, &bind(&[("x", m(&[&[0.7, -1.3, 2.1]]))]), s, &["x"], 1e-5)
            .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn zero_step_is_rejected() {
        let mut g = Graph::new();
        let x = g.param("x");
        let s = g.sum(x);
        assert!(finite_diff_check(&g, &bind(&[("x", Matrix::scalar(1.0))]), s, &["x"], 0.0).is_err());
    }
}
