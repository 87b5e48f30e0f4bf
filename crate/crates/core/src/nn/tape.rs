//! Reverse-mode automatic differentiation over a recorded operation list.

use std::collections::HashMap;
use std::sync::Arc;

use crate::losses::{self, GradientOp};
use crate::nn::exec::Exec;
use crate::nn::kernels;
use crate::nn::params::{ParamId, ParamStore, StoreId};
use crate::tensor::{Real, Shape, Tensor};

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize, transpose: bool },
    LeakyRelu { x: NodeId, slope: f64 },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Concat(Vec<NodeId>),
    AvgPool { x: NodeId, k: usize },
    PadReflect { x: NodeId, pads: [usize; 4] },
    Crop { x: NodeId, top: usize, left: usize },
    Mean(NodeId),
    Charbonnier { target: NodeId, output: NodeId, eps: f64 },
    GradientLoss { target: NodeId, output: NodeId, op: GradientOp },
    L1(NodeId, NodeId),
    WeightedSum(Vec<(NodeId, f64)>),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward pass for differentiation.
///
/// Parameters from the store registered with [`Tape::train`] become
/// differentiable leaves; parameters from any other store are constants, which
/// is how a frozen network is threaded through a loss.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    trainable: Option<StoreId>,
    param_nodes: HashMap<(StoreId, ParamId), NodeId>,
    node_params: HashMap<NodeId, ParamId>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    params: HashMap<ParamId, Tensor<T>>,
    leaves: HashMap<NodeId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a trainable parameter; `None` if it did not influence the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient of an input created with `requires_grad`.
    pub fn input(&self, node: NodeId) -> Option<&Tensor<T>> {
        self.leaves.get(&node)
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor<T>> {
        self.params
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), trainable: None, param_nodes: HashMap::new(), node_params: HashMap::new() }
    }

    /// Tape whose gradients flow into `store`.
    pub fn train(store: &ParamStore<T>) -> Self {
        let mut t = Self::new();
        t.trainable = Some(store.id());
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        self.nodes.len() - 1
    }

    /// Leaf node; `requires_grad` makes its gradient available from [`Gradients::input`].
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value: Arc::new(t), op: Op::Leaf, requires_grad });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> T {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "node {id} is not a scalar");
        v.data()[0]
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).mean());
        self.push(v, Op::Mean(x), &[x])
    }

    pub fn charbonnier(&mut self, target: NodeId, output: NodeId, eps: f64) -> NodeId {
        let v = losses::charbonnier_value(self.value(target), self.value(output), T::lit(eps));
        self.push(Tensor::scalar(v), Op::Charbonnier { target, output, eps }, &[target, output])
    }

    pub fn gradient_loss(&mut self, target: NodeId, output: NodeId, op: GradientOp) -> NodeId {
        let v = losses::gradient_loss_value(self.value(target), self.value(output), op);
        self.push(Tensor::scalar(v), Op::GradientLoss { target, output, op }, &[target, output])
    }

    pub fn l1(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = losses::l1_value(self.value(a), self.value(b));
        self.push(Tensor::scalar(v), Op::L1(a, b), &[a, b])
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let mut acc = T::zero();
        for &(id, w) in terms {
            acc += self.scalar(id) * T::lit(w);
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(acc), Op::WeightedSum(terms.to_vec()), &ids)
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss + 1];
        grads[loss] = Some(Tensor::scalar(T::one()));
        let mut out = Gradients { params: HashMap::new(), leaves: HashMap::new() };

        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let wants = |i: NodeId| self.nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => {
                    if let Some(p) = self.node_params.get(&id) {
                        out.params.insert(*p, g);
                    } else {
                        out.leaves.insert(id, g);
                    }
                }
                &Op::Conv { x, w, b, stride, pad, transpose } => {
                    let (xv, wv) = (self.value(x), self.value(w));
                    let cg = if transpose {
                        kernels::conv_transpose2d_backward(xv, wv, &g, stride, pad, wants(x), wants(w))
                    } else {
                        kernels::conv2d_backward(xv, wv, &g, stride, pad, wants(x), wants(w))
                    };
                    if let Some(dx) = cg.dx {
                        accumulate(&mut grads, x, dx);
                    }
                    if let Some(dw) = cg.dw {
                        accumulate(&mut grads, w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, cg.db) {
                        if wants(b) {
                            accumulate(&mut grads, b, db);
                        }
                    }
                }
                &Op::LeakyRelu { x, slope } => {
                    let dx = kernels::leaky_relu_backward(self.value(x), &g, T::lit(slope));
                    accumulate(&mut grads, x, dx);
                }
                &Op::Add(a, b) => {
                    if wants(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if wants(b) {
                        accumulate(&mut grads, b, g);
                    }
                }
                &Op::Mul(a, b) => {
                    if wants(a) {
                        accumulate(&mut grads, a, g.zip_map(self.value(b), |d, v| d * v));
                    }
                    if wants(b) {
                        accumulate(&mut grads, b, g.zip_map(self.value(a), |d, v| d * v));
                    }
                }
                Op::Concat(parts) => {
                    let channels: Vec<usize> = parts.iter().map(|&p| self.value(p).shape().c).collect();
                    for (&p, dp) in parts.iter().zip(kernels::concat_backward(&g, &channels)) {
                        if wants(p) {
                            accumulate(&mut grads, p, dp);
                        }
                    }
                }
                &Op::AvgPool { x, k } => accumulate(&mut grads, x, kernels::avg_pool_backward(&g, k)),
                &Op::PadReflect { x, pads } => {
                    let dx = kernels::pad_reflect_backward(&g, self.value(x).shape(), pads);
                    accumulate(&mut grads, x, dx);
                }
                &Op::Crop { x, top, left } => {
                    let dx = kernels::crop_backward(&g, self.value(x).shape(), top, left);
                    accumulate(&mut grads, x, dx);
                }
                &Op::Mean(x) => {
                    let shape = self.value(x).shape();
                    let v = g.data()[0] / T::from_usize(shape.len()).unwrap();
                    accumulate(&mut grads, x, Tensor::full(shape, v));
                }
                &Op::Charbonnier { target, output, eps } => {
                    let d = losses::charbonnier_backward(self.value(target), self.value(output), T::lit(eps), g.data()[0]);
                    if wants(target) {
                        accumulate(&mut grads, target, d.map(|v| -v));
                    }
                    if wants(output) {
                        accumulate(&mut grads, output, d);
                    }
                }
                &Op::GradientLoss { target, output, op } => {
                    let d = losses::gradient_loss_backward(self.value(target), self.value(output), op, g.data()[0]);
                    if wants(target) {
                        accumulate(&mut grads, target, d.map(|v| -v));
                    }
                    if wants(output) {
                        accumulate(&mut grads, output, d);
                    }
                }
                &Op::L1(a, b) => {
                    let d = losses::l1_backward(self.value(a), self.value(b), g.data()[0]);
                    if wants(b) {
                        accumulate(&mut grads, b, d.map(|v| -v));
                    }
                    if wants(a) {
                        accumulate(&mut grads, a, d);
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(t, w) in terms {
                        if wants(t) {
                            accumulate(&mut grads, t, Tensor::scalar(g.data()[0] * T::lit(w)));
                        }
                    }
                }
            }
        }
        out
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Real> Exec<T> for Tape<T> {
    type V = NodeId;

    fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.input(t, false)
    }

    fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let key = (store.id(), id);
        if let Some(&n) = self.param_nodes.get(&key) {
            return n;
        }
        let trainable = self.trainable == Some(store.id());
        self.nodes.push(Node { value: store.get(id).clone(), op: Op::Leaf, requires_grad: trainable });
        let n = self.nodes.len() - 1;
        self.param_nodes.insert(key, n);
        if trainable {
            self.node_params.insert(n, id);
        }
        n
    }

    fn shape(&self, v: &NodeId) -> Shape {
        self.value(*v).shape()
    }

    fn conv2d(&mut self, x: &NodeId, w: &NodeId, b: Option<&NodeId>, stride: usize, pad: usize) -> NodeId {
        let v = kernels::conv2d(self.value(*x), self.value(*w), b.map(|b| self.value(*b)), stride, pad);
        let mut inputs = vec![*x, *w];
        inputs.extend(b.copied());
        self.push(v, Op::Conv { x: *x, w: *w, b: b.copied(), stride, pad, transpose: false }, &inputs)
    }

    fn conv_transpose2d(&mut self, x: &NodeId, w: &NodeId, b: Option<&NodeId>, stride: usize, pad: usize) -> NodeId {
        let v = kernels::conv_transpose2d(self.value(*x), self.value(*w), b.map(|b| self.value(*b)), stride, pad);
        let mut inputs = vec![*x, *w];
        inputs.extend(b.copied());
        self.push(v, Op::Conv { x: *x, w: *w, b: b.copied(), stride, pad, transpose: true }, &inputs)
    }

    fn leaky_relu(&mut self, x: &NodeId, slope: f64) -> NodeId {
        let v = kernels::leaky_relu(self.value(*x), T::lit(slope));
        self.push(v, Op::LeakyRelu { x: *x, slope }, &[*x])
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = self.value(*a).zip_map(self.value(*b), |x, y| x + y);
        self.push(v, Op::Add(*a, *b), &[*a, *b])
    }

    fn mul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = self.value(*a).zip_map(self.value(*b), |x, y| x * y);
        self.push(v, Op::Mul(*a, *b), &[*a, *b])
    }

    fn concat(&mut self, xs: &[&NodeId]) -> NodeId {
        let ids: Vec<NodeId> = xs.iter().map(|&&x| x).collect();
        let v = {
            let refs: Vec<&Tensor<T>> = ids.iter().map(|&i| self.value(i)).collect();
            kernels::concat(&refs)
        };
        self.push(v, Op::Concat(ids.clone()), &ids)
    }

    fn avg_pool(&mut self, x: &NodeId, k: usize) -> NodeId {
        let v = kernels::avg_pool(self.value(*x), k);
        self.push(v, Op::AvgPool { x: *x, k }, &[*x])
    }

    fn pad_reflect(&mut self, x: &NodeId, pads: [usize; 4]) -> NodeId {
        let v = kernels::pad_reflect(self.value(*x), pads);
        self.push(v, Op::PadReflect { x: *x, pads }, &[*x])
    }

    fn crop(&mut self, x: &NodeId, top: usize, left: usize, h: usize, w: usize) -> NodeId {
        let v = self.value(*x).crop(top, left, h, w);
        self.push(v, Op::Crop { x: *x, top, left }, &[*x])
    }
}
