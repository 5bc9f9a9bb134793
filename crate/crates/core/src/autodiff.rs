//! Tape-style reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only list of nodes. Every node caches its forward
//! value, so inputs always precede outputs and the graph is acyclic by
//! construction. Trainable leaves carry a parameter name; [`Graph::backward`]
//! returns one gradient per name, including zeros for leaves the root does
//! not depend on.
//!
//! The op set is deliberately small: what the toy models and the orthogonal
//! penalty need, and nothing more. Ops that do not fit the elementwise /
//! matmul vocabulary can be attached as a [`ScalarOp`].

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{BinaryKind, Tensor};

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// A scalar-valued function of several tensors with a hand-written gradient.
pub trait ScalarOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<f32>;

    /// Adds `upstream` times the gradient with respect to `inputs[index]`
    /// into `out`, which has that input's length.
    fn backward_into(&self, inputs: &[&Tensor], index: usize, upstream: f32, out: &mut [f32]);
}

enum Op {
    Leaf,
    Binary(BinaryKind, NodeId, NodeId),
    Scale(f32, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ExpandRows(NodeId),
    RowSum(NodeId),
    ExpandCols(NodeId),
    L1(NodeId, NodeId),
    Mse(NodeId, NodeId),
    Custom(Vec<NodeId>, Arc<dyn ScalarOp>),
}

struct Node {
    op: Op,
    value: Tensor,
    param: Option<String>,
    requires_grad: bool,
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

#[inline]
fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, len: usize, f: impl Fn(usize) -> f32) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    for (i, b) in buf.iter_mut().enumerate() {
        *b += f(i);
    }
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

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            param: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Adds a trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.nodes.iter().any(|n| n.param.as_deref() == Some(name)) {
            return Err(Error::DuplicateKey(name.to_string()));
        }
        let id = self.push(Op::Leaf, value, true);
        self.nodes[id.0].param = Some(name.to_string());
        Ok(id)
    }

    /// Adds a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f32 {
        self.nodes[id.0].value.data()[0]
    }

    pub fn binary(&mut self, kind: BinaryKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = Tensor::ew_binary(kind, self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Binary(kind, a, b), v, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, c: f32, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).scale(c)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Scale(c, a), v, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), v, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(Op::Transpose(a), v, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0))?;
        let rg = self.rg(a);
        Ok(self.push(Op::Relu(a), v, rg))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f32::tanh)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Tanh(a), v, rg))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f32::abs)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Abs(a), v, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).sum_f64() as f32;
        let v = Tensor::new(vec![], vec![s])?;
        let rg = self.rg(a);
        Ok(self.push(Op::Sum(a), v, rg))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let n = t.numel().max(1) as f64;
        let v = Tensor::new(vec![], vec![(t.sum_f64() / n) as f32])?;
        let rg = self.rg(a);
        Ok(self.push(Op::Mean(a), v, rg))
    }

    /// Repeats a length-`h` vector (shape `[h]` or `[1,h]`) into `rows` rows.
    pub fn expand_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let t = self.value(a);
        let h = match t.shape() {
            [h] | [1, h] => *h,
            s => {
                return Err(Error::ShapeMismatch {
                    op: "expand_rows",
                    left: s.to_vec(),
                    right: vec![1, 0],
                })
            }
        };
        let mut data = Vec::with_capacity(rows * h);
        for _ in 0..rows {
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![rows, h], data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::ExpandRows(a), v, rg))
    }

    /// `[B,d] -> [B,1]` row sums.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let (b, d) = t.dims2()?;
        let data: Vec<f32> = (0..b)
            .map(|i| t.data()[i * d..(i + 1) * d].iter().sum())
            .collect();
        let v = Tensor::new(vec![b, 1], data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::RowSum(a), v, rg))
    }

    /// `[B,1] -> [B,cols]`, repeating each row's value.
    pub fn expand_cols(&mut self, a: NodeId, cols: usize) -> Result<NodeId> {
        let t = self.value(a);
        let (b, one) = t.dims2()?;
        if one != 1 {
            return Err(Error::ShapeMismatch {
                op: "expand_cols",
                left: t.shape().to_vec(),
                right: vec![b, 1],
            });
        }
        let data: Vec<f32> = t
            .data()
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, cols))
            .collect();
        let v = Tensor::new(vec![b, cols], data)?;
        let rg = self.rg(a);
        Ok(self.push(Op::ExpandCols(a), v, rg))
    }

    /// Mean absolute error between equal-shaped tensors.
    pub fn l1_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (p, t) = (self.value(pred), self.value(target));
        let diff = p.sub(t)?;
        let n = diff.numel().max(1) as f64;
        let s: f64 = diff.data().iter().map(|d| d.abs() as f64).sum();
        let v = Tensor::new(vec![], vec![(s / n) as f32])?;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Op::L1(pred, target), v, rg))
    }

    /// Mean squared error between equal-shaped tensors.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (p, t) = (self.value(pred), self.value(target));
        let diff = p.sub(t)?;
        let n = diff.numel().max(1) as f64;
        let s: f64 = diff.data().iter().map(|&d| (d as f64) * (d as f64)).sum();
        let v = Tensor::new(vec![], vec![(s / n) as f32])?;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Op::Mse(pred, target), v, rg))
    }

    /// Attaches a scalar op with a custom gradient.
    pub fn custom(&mut self, inputs: &[NodeId], op: Arc<dyn ScalarOp>) -> Result<NodeId> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let s = op.forward(&vals)?;
        let v = Tensor::new(vec![], vec![s])
            .map_err(|_| Error::NonFinite(format!("custom op {}", op.name())))?;
        let rg = inputs.iter().any(|&i| self.rg(i));
        Ok(self.push(Op::Custom(inputs.to_vec(), op), v, rg))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Binary(kind, a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let n = g.len();
                    match kind {
                        BinaryKind::Add => {
                            if self.rg(*a) {
                                accumulate(&mut grads[a.0], n, |i| g[i]);
                            }
                            if self.rg(*b) {
                                accumulate(&mut grads[b.0], n, |i| g[i]);
                            }
                        }
                        BinaryKind::Sub => {
                            if self.rg(*a) {
                                accumulate(&mut grads[a.0], n, |i| g[i]);
                            }
                            if self.rg(*b) {
                                accumulate(&mut grads[b.0], n, |i| -g[i]);
                            }
                        }
                        BinaryKind::Mul => {
                            if self.rg(*a) {
                                accumulate(&mut grads[a.0], n, |i| g[i] * bv[i]);
                            }
                            if self.rg(*b) {
                                accumulate(&mut grads[b.0], n, |i| g[i] * av[i]);
                            }
                        }
                    }
                }
                Op::Scale(c, a) => {
                    accumulate(&mut grads[a.0], g.len(), |i| c * g[i]);
                }
                Op::MatMul(a, b) => {
                    let gt = Tensor::new_allow_nonfinite(node.value.shape().to_vec(), g)?;
                    if self.rg(*a) {
                        let ga = gt.matmul(&self.value(*b).transpose()?)?;
                        let d = ga.data();
                        accumulate(&mut grads[a.0], d.len(), |i| d[i]);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).transpose()?.matmul(&gt)?;
                        let d = gb.data();
                        accumulate(&mut grads[b.0], d.len(), |i| d[i]);
                    }
                }
                Op::Transpose(a) => {
                    let gt = Tensor::new_allow_nonfinite(node.value.shape().to_vec(), g)?
                        .transpose()?;
                    let d = gt.data();
                    accumulate(&mut grads[a.0], d.len(), |i| d[i]);
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    accumulate(&mut grads[a.0], g.len(), |i| {
                        if x[i] > 0.0 {
                            g[i]
                        } else {
                            0.0
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    accumulate(&mut grads[a.0], g.len(), |i| g[i] * (1.0 - y[i] * y[i]));
                }
                Op::Abs(a) => {
                    let x = self.value(*a).data();
                    accumulate(&mut grads[a.0], g.len(), |i| g[i] * sign(x[i]));
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    accumulate(&mut grads[a.0], n, |_| g[0]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).numel();
                    let s = g[0] / n.max(1) as f32;
                    accumulate(&mut grads[a.0], n, |_| s);
                }
                Op::ExpandRows(a) => {
                    let (rows, h) = node.value.dims2()?;
                    accumulate(&mut grads[a.0], h, |j| (0..rows).map(|r| g[r * h + j]).sum());
                }
                Op::RowSum(a) => {
                    let (b, d) = self.value(*a).dims2()?;
                    accumulate(&mut grads[a.0], b * d, |i| g[i / d]);
                }
                Op::ExpandCols(a) => {
                    let (b, cols) = node.value.dims2()?;
                    accumulate(&mut grads[a.0], b, |i| {
                        g[i * cols..(i + 1) * cols].iter().sum()
                    });
                }
                Op::L1(p, t) => {
                    let (pv, tv) = (self.value(*p).data(), self.value(*t).data());
                    let n = pv.len();
                    let s = g[0] / n.max(1) as f32;
                    if self.rg(*p) {
                        accumulate(&mut grads[p.0], n, |i| s * sign(pv[i] - tv[i]));
                    }
                    if self.rg(*t) {
                        accumulate(&mut grads[t.0], n, |i| -s * sign(pv[i] - tv[i]));
                    }
                }
                Op::Mse(p, t) => {
                    let (pv, tv) = (self.value(*p).data(), self.value(*t).data());
                    let n = pv.len();
                    let s = 2.0 * g[0] / n.max(1) as f32;
                    if self.rg(*p) {
                        accumulate(&mut grads[p.0], n, |i| s * (pv[i] - tv[i]));
                    }
                    if self.rg(*t) {
                        accumulate(&mut grads[t.0], n, |i| -s * (pv[i] - tv[i]));
                    }
                }
                Op::Custom(inputs, op) => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                    for (k, inp) in inputs.iter().enumerate() {
                        if self.rg(*inp) {
                            let n = vals[k].numel();
                            let buf = grads[inp.0].get_or_insert_with(|| vec![0.0; n]);
                            op.backward_into(&vals, k, g[0], buf);
                        }
                    }
                }
            }
        }

        let mut out = Gradients::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                let shape = node.value.shape().to_vec();
                let t = match grads[idx].take() {
                    Some(g) => Tensor::new(shape, g)
                        .map_err(|_| Error::NonFinite(format!("gradient of {name}")))?,
                    None => Tensor::zeros(&shape),
                };
                out.insert(name.clone(), t);
            }
        }
        Ok(out)
    }
}
