//! Reverse-mode differentiation over the op vocabulary the classifiers need.
//!
//! A [`Graph`] is an immutable, topologically ordered list of operation
//! records built once per architecture. Evaluating it against a set of leaf
//! [`Bindings`] produces an [`Evaluation`] holding every cached forward
//! value; gradients with respect to any differentiable leaf come from
//! [`Evaluation::backpropagate`]. All per-call state lives in the
//! `Evaluation`, so one graph can be evaluated concurrently from many
//! workers.
//!
//! Shapes are not fixed at construction: the same graph accepts any batch
//! size, and every op checks consistency when it runs.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node inside one graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    /// Bound at evaluate; `differentiable` marks it as a gradient target.
    Leaf { name: String, differentiable: bool },
    Constant(Tensor),
    /// [m,k] x [k,n] -> [m,n]
    MatMul(NodeId, NodeId),
    /// [n,b] + [b], or [n,c,L] + [c] broadcast over batch and time.
    BiasAdd(NodeId, NodeId),
    /// Same-padding stride-1 convolution: [n,c_in,L] x [c_out,c_in,k] -> [n,c_out,L], k odd.
    Conv1d(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Log(NodeId),
    /// Elementwise sum of two same-shaped tensors (also the residual skip).
    Add(NodeId, NodeId),
    /// Elementwise product (gating).
    Mul(NodeId, NodeId),
    /// Elementwise y = mul * x + add.
    Affine(NodeId, f64, f64),
    /// Row softmax over the last axis of a [k] or [n,k] tensor.
    Softmax(NodeId),
    /// Fused stable cross-entropy: logits [n,k] with target distribution
    /// [n,k] -> per-row loss [n]. Hard labels are one-hot targets.
    SoftmaxCrossEntropy(NodeId, NodeId),
    /// [n,c,L] -> [n,c]
    MeanOverTime(NodeId),
    /// Insert a length-1 axis at `axis`.
    InsertAxis(NodeId, usize),
    /// Column `t` of a [n,L] tensor as [n,1].
    SliceTime(NodeId, usize),
    /// Full reductions to a scalar.
    Sum(NodeId),
    Mean(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::BiasAdd(..) => "bias_add",
            Op::Conv1d(..) => "conv1d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Log(_) => "log",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Softmax(_) => "softmax",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
            Op::MeanOverTime(_) => "mean_over_time",
            Op::InsertAxis(..) => "insert_axis",
            Op::SliceTime(..) => "slice_time",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf { .. } | Op::Constant(_) => vec![],
            Op::MatMul(a, b)
            | Op::BiasAdd(a, b)
            | Op::Conv1d(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::SoftmaxCrossEntropy(a, b) => vec![a.0, b.0],
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Log(a)
            | Op::Affine(a, _, _)
            | Op::Softmax(a)
            | Op::MeanOverTime(a)
            | Op::InsertAxis(a, _)
            | Op::SliceTime(a, _)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a.0],
        }
    }
}

/// Leaf values for one evaluate call, keyed by leaf name.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    map: BTreeMap<String, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, name: impl Into<String>, value: Tensor) -> Self {
        self.map.insert(name.into(), value);
        self
    }

    pub fn set(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }
}

/// Builds a graph by appending nodes; inputs always precede their consumers.
#[derive(Default)]
pub struct GraphBuilder {
    nodes: Vec<Op>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf (parameters, attacked inputs).
    pub fn leaf(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Leaf {
            name: name.into(),
            differentiable: true,
        })
    }

    /// Non-differentiable leaf (labels, dropout masks).
    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Leaf {
            name: name.into(),
            differentiable: false,
        })
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::BiasAdd(x, bias))
    }

    pub fn conv1d(&mut self, x: NodeId, weight: NodeId) -> NodeId {
        self.push(Op::Conv1d(x, weight))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        self.push(Op::Affine(x, mul, add))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.affine(x, c, 0.0)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax(x))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        self.push(Op::SoftmaxCrossEntropy(logits, targets))
    }

    pub fn mean_over_time(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MeanOverTime(x))
    }

    pub fn insert_axis(&mut self, x: NodeId, axis: usize) -> NodeId {
        self.push(Op::InsertAxis(x, axis))
    }

    pub fn slice_time(&mut self, x: NodeId, t: usize) -> NodeId {
        self.push(Op::SliceTime(x, t))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x))
    }

    pub fn finish(self, output: NodeId) -> Graph {
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, op)| match op {
                Op::Leaf {
                    name,
                    differentiable,
                } => Some((i, name.clone(), *differentiable)),
                _ => None,
            })
            .collect();
        Graph {
            nodes: self.nodes,
            output,
            leaves,
        }
    }
}

/// Immutable computation graph. Evaluate with [`Graph::evaluate`].
#[derive(Clone)]
pub struct Graph {
    nodes: Vec<Op>,
    output: NodeId,
    /// (node index, name, differentiable)
    leaves: Vec<(usize, String, bool)>,
}

impl Graph {
    pub fn output_node(&self) -> NodeId {
        self.output
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.iter().map(|(_, n, _)| n.as_str())
    }

    pub fn differentiable_leaves(&self) -> impl Iterator<Item = &str> {
        self.leaves
            .iter()
            .filter(|(_, _, d)| *d)
            .map(|(_, n, _)| n.as_str())
    }

    /// Run the forward pass, caching every intermediate value.
    pub fn evaluate(&self, bindings: &Bindings) -> Result<Evaluation<'_>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, op) in self.nodes.iter().enumerate() {
            let value = self.forward(op, &values, bindings)?;
            if !value.all_finite() {
                return Err(Error::NonFinite {
                    node: idx,
                    op: op.name().to_string(),
                });
            }
            values.push(value);
        }
        Ok(Evaluation {
            graph: self,
            values,
        })
    }

    /// Central finite-difference gradient of the scalar output with respect
    /// to one leaf: (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
    /// Verification oracle; independent of the backward pass.
    pub fn finite_difference_gradient(
        &self,
        bindings: &Bindings,
        leaf: &str,
        h: f64,
    ) -> Result<Tensor> {
        if h <= 0.0 {
            return Err(Error::NonPositiveStep(h));
        }
        let base = bindings
            .get(leaf)
            .ok_or_else(|| Error::UnboundLeaf(leaf.to_string()))?
            .clone();
        // Check the output is scalar before doing 2n evaluations.
        let probe = self.evaluate(bindings)?;
        probe.output().scalar_value()?;
        let mut grad = Tensor::zeros(base.shape());
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus.values_mut()[i] += h;
            let mut minus = base.clone();
            minus.values_mut()[i] -= h;
            let mut b_plus = bindings.clone();
            b_plus.set(leaf, plus);
            let mut b_minus = bindings.clone();
            b_minus.set(leaf, minus);
            let f_plus = self.evaluate(&b_plus)?.output().scalar_value()?;
            let f_minus = self.evaluate(&b_minus)?.output().scalar_value()?;
            grad.values_mut()[i] = (f_plus - f_minus) / (2.0 * h);
        }
        Ok(grad)
    }

    fn forward(&self, op: &Op, values: &[Tensor], bindings: &Bindings) -> Result<Tensor> {
        match op {
            Op::Leaf { name, .. } => bindings
                .get(name)
                .cloned()
                .ok_or_else(|| Error::UnboundLeaf(name.clone())),
            Op::Constant(t) => Ok(t.clone()),
            Op::MatMul(a, b) => matmul_forward(&values[a.0], &values[b.0]),
            Op::BiasAdd(x, b) => bias_add_forward(&values[x.0], &values[b.0]),
            Op::Conv1d(x, w) => conv1d_forward(&values[x.0], &values[w.0]),
            Op::Relu(x) => Ok(values[x.0].map(|v| if v > 0.0 { v } else { 0.0 })),
            Op::Sigmoid(x) => Ok(values[x.0].map(sigmoid)),
            Op::Tanh(x) => Ok(values[x.0].map(f64::tanh)),
            Op::Log(x) => Ok(values[x.0].map(f64::ln)),
            Op::Add(a, b) => elementwise(&values[a.0], &values[b.0], "add", |x, y| x + y),
            Op::Mul(a, b) => elementwise(&values[a.0], &values[b.0], "mul", |x, y| x * y),
            Op::Affine(x, m, c) => Ok(values[x.0].map(|v| m * v + c)),
            Op::Softmax(x) => softmax_forward(&values[x.0]),
            Op::SoftmaxCrossEntropy(z, p) => cross_entropy_forward(&values[z.0], &values[p.0]),
            Op::MeanOverTime(x) => mean_over_time_forward(&values[x.0]),
            Op::InsertAxis(x, axis) => {
                let t = &values[x.0];
                if *axis > t.shape().len() {
                    return Err(Error::shape(
                        "insert_axis",
                        format!("axis <= {}", t.shape().len()),
                        format!("axis {axis}"),
                    ));
                }
                let mut shape = t.shape().to_vec();
                shape.insert(*axis, 1);
                Tensor::new(shape, t.values().to_vec())
            }
            Op::SliceTime(x, t) => slice_time_forward(&values[x.0], *t),
            Op::Sum(x) => Ok(Tensor::scalar(values[x.0].values().iter().sum())),
            Op::Mean(x) => {
                let t = &values[x.0];
                Ok(Tensor::scalar(
                    t.values().iter().sum::<f64>() / t.len() as f64,
                ))
            }
        }
    }
}

/// One forward pass over a graph: cached values plus gradient entry points.
pub struct Evaluation<'g> {
    graph: &'g Graph,
    values: Vec<Tensor>,
}

impl Evaluation<'_> {
    pub fn output(&self) -> &Tensor {
        &self.values[self.graph.output.0]
    }

    /// Cached forward value of any node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// d(output)/d(leaf) for every differentiable leaf.
    pub fn backpropagate(&self) -> Result<BTreeMap<String, Tensor>> {
        let names: Vec<&str> = self.graph.differentiable_leaves().collect();
        self.gradients_for(&names)
    }

    /// Gradients restricted to the named leaves; subgraphs that cannot reach
    /// any of them are skipped.
    pub fn gradients_for(&self, leaves: &[&str]) -> Result<BTreeMap<String, Tensor>> {
        self.output().scalar_value()?;
        let n = self.graph.nodes.len();

        let mut wanted_idx: BTreeMap<&str, usize> = BTreeMap::new();
        for (idx, name, _) in &self.graph.leaves {
            if leaves.contains(&name.as_str()) {
                wanted_idx.insert(name, *idx);
            }
        }
        for name in leaves {
            if !wanted_idx.contains_key(name) {
                return Err(Error::UnboundLeaf((*name).to_string()));
            }
        }

        // A node needs a gradient iff a wanted leaf is reachable through it.
        let mut needed = vec![false; n];
        for &idx in wanted_idx.values() {
            needed[idx] = true;
        }
        for i in 0..n {
            if !needed[i] {
                needed[i] = self.graph.nodes[i].inputs().iter().any(|&j| needed[j]);
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let out = self.graph.output.0;
        if needed[out] {
            grads[out] = Some(Tensor::scalar(1.0));
        }

        for i in (0..n).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            self.backward_into(i, &grad, &needed, &mut grads);
            // Leaves keep their accumulated gradient.
            if matches!(self.graph.nodes[i], Op::Leaf { .. }) {
                grads[i] = Some(grad);
            }
        }

        let mut result = BTreeMap::new();
        for (name, idx) in wanted_idx {
            let g = grads[idx]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.values[idx].shape()));
            result.insert(name.to_string(), g);
        }
        Ok(result)
    }

    fn backward_into(
        &self,
        node: usize,
        grad: &Tensor,
        needed: &[bool],
        grads: &mut [Option<Tensor>],
    ) {
        let push = |grads: &mut [Option<Tensor>], target: usize, update: Tensor| {
            match &mut grads[target] {
                Some(existing) => {
                    for (e, u) in existing.values_mut().iter_mut().zip(update.values()) {
                        *e += u;
                    }
                }
                slot @ None => *slot = Some(update),
            }
        };

        match &self.graph.nodes[node] {
            Op::Leaf { .. } | Op::Constant(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                if needed[a.0] {
                    push(grads, a.0, matmul_backward_lhs(grad, bv));
                }
                if needed[b.0] {
                    push(grads, b.0, matmul_backward_rhs(av, grad));
                }
            }
            Op::BiasAdd(x, b) => {
                if needed[x.0] {
                    push(grads, x.0, grad.clone());
                }
                if needed[b.0] {
                    push(grads, b.0, bias_add_backward(grad, &self.values[b.0]));
                }
            }
            Op::Conv1d(x, w) => {
                let (xv, wv) = (&self.values[x.0], &self.values[w.0]);
                if needed[x.0] {
                    push(grads, x.0, conv1d_backward_input(grad, wv, xv.shape()));
                }
                if needed[w.0] {
                    push(grads, w.0, conv1d_backward_weight(grad, xv, wv.shape()));
                }
            }
            Op::Relu(x) => {
                if needed[x.0] {
                    let xin = &self.values[x.0];
                    let mut g = grad.clone();
                    for (gv, &xv) in g.values_mut().iter_mut().zip(xin.values()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    push(grads, x.0, g);
                }
            }
            Op::Sigmoid(x) => {
                if needed[x.0] {
                    let s = &self.values[node];
                    let mut g = grad.clone();
                    for (gv, &sv) in g.values_mut().iter_mut().zip(s.values()) {
                        *gv *= sv * (1.0 - sv);
                    }
                    push(grads, x.0, g);
                }
            }
            Op::Tanh(x) => {
                if needed[x.0] {
                    let y = &self.values[node];
                    let mut g = grad.clone();
                    for (gv, &yv) in g.values_mut().iter_mut().zip(y.values()) {
                        *gv *= 1.0 - yv * yv;
                    }
                    push(grads, x.0, g);
                }
            }
            Op::Log(x) => {
                if needed[x.0] {
                    let xin = &self.values[x.0];
                    let mut g = grad.clone();
                    for (gv, &xv) in g.values_mut().iter_mut().zip(xin.values()) {
                        *gv /= xv;
                    }
                    push(grads, x.0, g);
                }
            }
            Op::Add(a, b) => {
                if needed[a.0] {
                    push(grads, a.0, grad.clone());
                }
                if needed[b.0] {
                    push(grads, b.0, grad.clone());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.values[a.0], &self.values[b.0]);
                if needed[a.0] {
                    let mut g = grad.clone();
                    for (gv, &v) in g.values_mut().iter_mut().zip(bv.values()) {
                        *gv *= v;
                    }
                    push(grads, a.0, g);
                }
                if needed[b.0] {
                    let mut g = grad.clone();
                    for (gv, &v) in g.values_mut().iter_mut().zip(av.values()) {
                        *gv *= v;
                    }
                    push(grads, b.0, g);
                }
            }
            Op::Affine(x, m, _) => {
                if needed[x.0] {
                    push(grads, x.0, grad.map(|g| g * m));
                }
            }
            Op::Softmax(x) => {
                if needed[x.0] {
                    push(grads, x.0, softmax_backward(grad, &self.values[node]));
                }
            }
            Op::SoftmaxCrossEntropy(z, p) => {
                let (zv, pv) = (&self.values[z.0], &self.values[p.0]);
                if needed[z.0] {
                    push(grads, z.0, cross_entropy_backward_logits(grad, zv, pv));
                }
                if needed[p.0] {
                    // d(lse - sum p z)/dp = -z
                    let width = last_dim(zv);
                    let mut g = Tensor::zeros(pv.shape());
                    for (row, gout) in grad.values().iter().enumerate() {
                        for k in 0..width {
                            g.values_mut()[row * width + k] = -gout * zv.values()[row * width + k];
                        }
                    }
                    push(grads, p.0, g);
                }
            }
            Op::MeanOverTime(x) => {
                if needed[x.0] {
                    let xin = &self.values[x.0];
                    let len = xin.shape()[2];
                    let mut g = Tensor::zeros(xin.shape());
                    for i in 0..grad.len() {
                        let gv = grad.values()[i] / len as f64;
                        for t in 0..len {
                            g.values_mut()[i * len + t] = gv;
                        }
                    }
                    push(grads, x.0, g);
                }
            }
            Op::InsertAxis(x, _) => {
                if needed[x.0] {
                    let target_shape = self.values[x.0].shape().to_vec();
                    let g = Tensor::new(target_shape, grad.values().to_vec())
                        .expect("insert_axis preserves element count");
                    push(grads, x.0, g);
                }
            }
            Op::SliceTime(x, t) => {
                if needed[x.0] {
                    let xin = &self.values[x.0];
                    let len = xin.shape()[1];
                    let mut g = Tensor::zeros(xin.shape());
                    for (row, gv) in grad.values().iter().enumerate() {
                        g.values_mut()[row * len + t] = *gv;
                    }
                    push(grads, x.0, g);
                }
            }
            Op::Sum(x) => {
                if needed[x.0] {
                    let g = grad.values()[0];
                    push(grads, x.0, Tensor::filled(self.values[x.0].shape(), g));
                }
            }
            Op::Mean(x) => {
                if needed[x.0] {
                    let n = self.values[x.0].len() as f64;
                    let g = grad.values()[0] / n;
                    push(grads, x.0, Tensor::filled(self.values[x.0].shape(), g));
                }
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.shape()[t.shape().len() - 1]
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            "[m,k] x [k,n]".to_string(),
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    let (av, bv) = (a.values(), b.values());
    let ov = out.values_mut();
    for i in 0..m {
        let arow = &av[i * k..(i + 1) * k];
        let orow = &mut ov[i * n..(i + 1) * n];
        for (l, &x) in arow.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let brow = &bv[l * n..(l + 1) * n];
            for (o, &bval) in orow.iter_mut().zip(brow) {
                *o += x * bval;
            }
        }
    }
    Ok(out)
}

/// dA = dC . B^T
fn matmul_backward_lhs(dc: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (dc.shape()[0], dc.shape()[1]);
    let k = b.shape()[0];
    let mut da = Tensor::zeros(&[m, k]);
    let (dcv, bv) = (dc.values(), b.values());
    let dav = da.values_mut();
    for i in 0..m {
        let dcrow = &dcv[i * n..(i + 1) * n];
        let darow = &mut dav[i * k..(i + 1) * k];
        for (l, d) in darow.iter_mut().enumerate() {
            let brow = &bv[l * n..(l + 1) * n];
            *d = dcrow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    da
}

/// dB = A^T . dC
fn matmul_backward_rhs(a: &Tensor, dc: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = dc.shape()[1];
    let mut db = Tensor::zeros(&[k, n]);
    let (av, dcv) = (a.values(), dc.values());
    let dbv = db.values_mut();
    for i in 0..m {
        let arow = &av[i * k..(i + 1) * k];
        let dcrow = &dcv[i * n..(i + 1) * n];
        for (l, &x) in arow.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let dbrow = &mut dbv[l * n..(l + 1) * n];
            for (d, &g) in dbrow.iter_mut().zip(dcrow) {
                *d += x * g;
            }
        }
    }
    db
}

fn bias_add_forward(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mismatch = || {
        Error::shape(
            "bias_add",
            "[n,b]+[b] or [n,c,L]+[c]".to_string(),
            format!("{:?} + {:?}", x.shape(), bias.shape()),
        )
    };
    if bias.shape().len() != 1 {
        return Err(mismatch());
    }
    let mut out = x.clone();
    match x.shape().len() {
        2 => {
            let width = x.shape()[1];
            if bias.len() != width {
                return Err(mismatch());
            }
            for row in 0..x.shape()[0] {
                for (o, &b) in out.values_mut()[row * width..(row + 1) * width]
                    .iter_mut()
                    .zip(bias.values())
                {
                    *o += b;
                }
            }
        }
        3 => {
            let (channels, len) = (x.shape()[1], x.shape()[2]);
            if bias.len() != channels {
                return Err(mismatch());
            }
            for slab in out.values_mut().chunks_mut(channels * len) {
                for (c, &b) in bias.values().iter().enumerate() {
                    for o in &mut slab[c * len..(c + 1) * len] {
                        *o += b;
                    }
                }
            }
        }
        _ => return Err(mismatch()),
    }
    Ok(out)
}

fn bias_add_backward(grad: &Tensor, bias: &Tensor) -> Tensor {
    let mut db = Tensor::zeros(bias.shape());
    match grad.shape().len() {
        2 => {
            let width = grad.shape()[1];
            for row in grad.values().chunks(width) {
                for (d, &g) in db.values_mut().iter_mut().zip(row) {
                    *d += g;
                }
            }
        }
        _ => {
            let (channels, len) = (grad.shape()[1], grad.shape()[2]);
            for slab in grad.values().chunks(channels * len) {
                for c in 0..channels {
                    db.values_mut()[c] += slab[c * len..(c + 1) * len].iter().sum::<f64>();
                }
            }
        }
    }
    db
}

fn conv1d_forward(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let bad = || {
        Error::shape(
            "conv1d",
            "[n,c_in,L] x [c_out,c_in,k] with k odd".to_string(),
            format!("{:?} x {:?}", x.shape(), w.shape()),
        )
    };
    if x.shape().len() != 3 || w.shape().len() != 3 {
        return Err(bad());
    }
    let (n, c_in, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, w_cin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if w_cin != c_in || k % 2 == 0 {
        return Err(bad());
    }
    let pad = k / 2;
    let mut out = Tensor::zeros(&[n, c_out, len]);
    let (xv, wv) = (x.values(), w.values());
    let ov = out.values_mut();
    for m in 0..n {
        for co in 0..c_out {
            let orow = &mut ov[(m * c_out + co) * len..(m * c_out + co + 1) * len];
            for ci in 0..c_in {
                let xrow = &xv[(m * c_in + ci) * len..(m * c_in + ci + 1) * len];
                for j in 0..k {
                    let weight = wv[(co * c_in + ci) * k + j];
                    if weight == 0.0 {
                        continue;
                    }
                    let shift = j as isize - pad as isize;
                    let t_lo = 0.max(-shift) as usize;
                    let t_hi = len.min((len as isize - shift) as usize);
                    let src = &xrow[(t_lo as isize + shift) as usize..(t_hi as isize + shift) as usize];
                    for (o, &xval) in orow[t_lo..t_hi].iter_mut().zip(src) {
                        *o += weight * xval;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv1d_backward_input(grad: &Tensor, w: &Tensor, x_shape: &[usize]) -> Tensor {
    let (n, c_in, len) = (x_shape[0], x_shape[1], x_shape[2]);
    let (c_out, _, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let pad = k / 2;
    let mut dx = Tensor::zeros(x_shape);
    let (gv, wv) = (grad.values(), w.values());
    let dxv = dx.values_mut();
    for m in 0..n {
        for co in 0..c_out {
            let grow = &gv[(m * c_out + co) * len..(m * c_out + co + 1) * len];
            for ci in 0..c_in {
                let drow = &mut dxv[(m * c_in + ci) * len..(m * c_in + ci + 1) * len];
                for j in 0..k {
                    let weight = wv[(co * c_in + ci) * k + j];
                    if weight == 0.0 {
                        continue;
                    }
                    let shift = j as isize - pad as isize;
                    // x[s] contributed to y[s - shift]
                    let s_lo = 0.max(shift) as usize;
                    let s_hi = len.min((len as isize + shift) as usize);
                    let src = &grow[(s_lo as isize - shift) as usize..(s_hi as isize - shift) as usize];
                    for (d, &g) in drow[s_lo..s_hi].iter_mut().zip(src) {
                        *d += weight * g;
                    }
                }
            }
        }
    }
    dx
}

fn conv1d_backward_weight(grad: &Tensor, x: &Tensor, w_shape: &[usize]) -> Tensor {
    let (n, c_in, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, _, k) = (w_shape[0], w_shape[1], w_shape[2]);
    let pad = k / 2;
    let mut dw = Tensor::zeros(w_shape);
    let (gv, xv) = (grad.values(), x.values());
    let dwv = dw.values_mut();
    for m in 0..n {
        for co in 0..c_out {
            let grow = &gv[(m * c_out + co) * len..(m * c_out + co + 1) * len];
            for ci in 0..c_in {
                let xrow = &xv[(m * c_in + ci) * len..(m * c_in + ci + 1) * len];
                for j in 0..k {
                    let shift = j as isize - pad as isize;
                    let t_lo = 0.max(-shift) as usize;
                    let t_hi = len.min((len as isize - shift) as usize);
                    let src = &xrow[(t_lo as isize + shift) as usize..(t_hi as isize + shift) as usize];
                    dwv[(co * c_in + ci) * k + j] += grow[t_lo..t_hi]
                        .iter()
                        .zip(src)
                        .map(|(g, x)| g * x)
                        .sum::<f64>();
                }
            }
        }
    }
    dw
}

fn elementwise(a: &Tensor, b: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), values)
}

fn rows_of(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    match t.shape().len() {
        1 => Ok((1, t.shape()[0])),
        2 => Ok((t.shape()[0], t.shape()[1])),
        _ => Err(Error::shape(
            op,
            "[k] or [n,k]".to_string(),
            format!("{:?}", t.shape()),
        )),
    }
}

fn softmax_forward(x: &Tensor) -> Result<Tensor> {
    let (rows, width) = rows_of(x, "softmax")?;
    let mut out = x.clone();
    for r in 0..rows {
        let row = &mut out.values_mut()[r * width..(r + 1) * width];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

fn softmax_backward(grad: &Tensor, softmax: &Tensor) -> Tensor {
    let width = last_dim(softmax);
    let rows = softmax.len() / width;
    let mut dx = Tensor::zeros(softmax.shape());
    for r in 0..rows {
        let s = &softmax.values()[r * width..(r + 1) * width];
        let g = &grad.values()[r * width..(r + 1) * width];
        let inner: f64 = s.iter().zip(g).map(|(sv, gv)| sv * gv).sum();
        for (d, (&sv, &gv)) in dx.values_mut()[r * width..(r + 1) * width]
            .iter_mut()
            .zip(s.iter().zip(g))
        {
            *d = sv * (gv - inner);
        }
    }
    dx
}

/// Per-row loss: logsumexp(z) - sum_k p_k z_k. Never forms log(softmax).
fn cross_entropy_forward(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.shape() != targets.shape() {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{:?}", logits.shape()),
            format!("{:?}", targets.shape()),
        ));
    }
    let (rows, width) = rows_of(logits, "softmax_cross_entropy")?;
    let mut out = Tensor::zeros(&[rows]);
    for r in 0..rows {
        let z = &logits.values()[r * width..(r + 1) * width];
        let p = &targets.values()[r * width..(r + 1) * width];
        let max = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let weighted: f64 = z.iter().zip(p).map(|(&zv, &pv)| zv * pv).sum();
        out.values_mut()[r] = lse - weighted;
    }
    Ok(out)
}

/// dz = upstream * (softmax(z) - p) per row.
fn cross_entropy_backward_logits(grad: &Tensor, logits: &Tensor, targets: &Tensor) -> Tensor {
    let width = last_dim(logits);
    let rows = logits.len() / width;
    let mut dz = Tensor::zeros(logits.shape());
    for r in 0..rows {
        let z = &logits.values()[r * width..(r + 1) * width];
        let p = &targets.values()[r * width..(r + 1) * width];
        let g = grad.values()[r];
        let max = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let total: f64 = z.iter().map(|&v| (v - max).exp()).sum();
        for (k, d) in dz.values_mut()[r * width..(r + 1) * width]
            .iter_mut()
            .enumerate()
        {
            let q = (z[k] - max).exp() / total;
            *d = g * (q - p[k]);
        }
    }
    dz
}

fn mean_over_time_forward(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 3 {
        return Err(Error::shape(
            "mean_over_time",
            "[n,c,L]".to_string(),
            format!("{:?}", x.shape()),
        ));
    }
    let (n, c, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n * c {
        out.values_mut()[i] =
            x.values()[i * len..(i + 1) * len].iter().sum::<f64>() / len as f64;
    }
    Ok(out)
}

fn slice_time_forward(x: &Tensor, t: usize) -> Result<Tensor> {
    if x.shape().len() != 2 || t >= x.shape()[1] {
        return Err(Error::shape(
            "slice_time",
            format!("[n,L] with t < L, t = {t}"),
            format!("{:?}", x.shape()),
        ));
    }
    let (n, len) = (x.shape()[0], x.shape()[1]);
    let values = (0..n).map(|i| x.values()[i * len + t]).collect();
    Tensor::new(vec![n, 1], values)
}
