//! Reverse-mode differentiation over an append-only operation record.
//!
//! Every method on [`Graph`] evaluates its operation eagerly and appends a
//! node holding the forward value plus whatever the adjoint needs. Inputs of a
//! node always precede it, so [`Graph::backward`] is a single reverse sweep in
//! node order. Gradient accumulation order is fixed by that sweep, which makes
//! repeated backward passes bitwise reproducible.

use std::collections::HashMap;
use std::sync::Arc;

use super::param::{ParamId, ParamStore};
use super::tensor::{self as k, ConvSpec, ReduceKind, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A user-defined differentiable operation.
///
/// `backward` returns one gradient per input, each shaped like that input.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>>;
}

#[derive(Clone)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d(Var, Var, ConvSpec),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Relu(Var),
    Sigmoid(Var),
    BroadcastAdd(Var, Var, usize),
    BroadcastMul(Var, Var, usize),
    Softmax(Var, usize),
    Reduce(Var, Vec<usize>, ReduceKind),
    Concat(Vec<Var>, usize),
    ResizeNearest(Var),
    PairwiseSqDist(Var, Var),
    GatherRows(Var, Arc<Vec<usize>>),
    ResidualAggregate(Var, Var, Var),
    L2Normalize(Var, T),
    CrossEntropy(Var, usize),
    Custom(Arc<dyn CustomOp<T>>, Vec<Var>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (an input whose gradient is wanted).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.input(store.get(id).value.clone());
        self.bound.insert(id, v);
        self.params.push((id, v));
        v
    }

    /// Makes later [`Graph::param`] calls for `id` resolve to `var`.
    ///
    /// Used to substitute a perturbed value for a parameter when checking
    /// gradients against finite differences.
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        self.bound.insert(id, var);
    }

    /// Parameter leaves created through [`Graph::param`], in creation order.
    pub fn param_vars(&self) -> &[(ParamId, Var)] {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = k::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = k::transpose(self.value(a))?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let v = k::conv2d(self.value(x), self.value(w), &spec)?;
        Ok(self.push(v, Op::Conv2d(x, w, spec), &[x, w]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "add", |p, q| p + q)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |p, q| p - q)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |p, q| p * q)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|p| p * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|p| p.max(T::zero()));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(k::sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// `x + v` with the vector `v` broadcast along `axis` of `x`.
    pub fn add_along(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let out = k::broadcast_along(self.value(x), self.value(v), axis, |p, q| p + q, "add_along")?;
        Ok(self.push(out, Op::BroadcastAdd(x, v, axis), &[x, v]))
    }

    /// `x ⊙ v` with the vector `v` broadcast along `axis` of `x`.
    pub fn mul_along(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let out = k::broadcast_along(self.value(x), self.value(v), axis, |p, q| p * q, "mul_along")?;
        Ok(self.push(out, Op::BroadcastMul(x, v, axis), &[x, v]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = k::softmax(self.value(x), axis)?;
        Ok(self.push(v, Op::Softmax(x, axis), &[x]))
    }

    pub fn reduce(&mut self, x: Var, axes: &[usize], kind: ReduceKind) -> Result<Var> {
        let v = k::reduce(self.value(x), axes, kind)?;
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        Ok(self.push(v, Op::Reduce(x, axes, kind), &[x]))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, ReduceKind::Sum)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, ReduceKind::Mean)
    }

    /// Sum over every element, yielding a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(x, &axes, ReduceKind::Sum)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let v = {
            let vals: Vec<&Tensor<T>> = xs.iter().map(|&x| self.value(x)).collect();
            k::concat(&vals, axis)?
        };
        Ok(self.push(v, Op::Concat(xs.to_vec(), axis), xs))
    }

    pub fn resize_nearest(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        if self.value(x).shape()[..2] == [h, w] {
            return Ok(x);
        }
        let v = k::resize_nearest(self.value(x), h, w)?;
        Ok(self.push(v, Op::ResizeNearest(x), &[x]))
    }

    /// Per-channel spatial mean of an `H×W×C` map.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.value(x).hwc("global_avg_pool")?;
        self.mean(x, &[0, 1])
    }

    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = k::pairwise_sq_dist(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::PairwiseSqDist(a, b), &[a, b]))
    }

    /// Rows of a matrix selected by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let v = k::gather_rows(self.value(x), &rows)?;
        Ok(self.push(v, Op::GatherRows(x, Arc::new(rows)), &[x]))
    }

    /// `H[k] = Σ_i a[i,k]·(v[i] − c[k])` for assignment `a` (N×K),
    /// descriptors `v` (N×D) and centres `c` (K×D).
    pub fn residual_aggregate(&mut self, a: Var, v: Var, c: Var) -> Result<Var> {
        let out = k::residual_aggregate(self.value(a), self.value(v), self.value(c))?;
        Ok(self.push(out, Op::ResidualAggregate(a, v, c), &[a, v, c]))
    }

    /// Scales a tensor to unit Euclidean norm: `x / sqrt(Σx² + eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let norm = (xv.data().iter().map(|&p| p * p).sum::<T>() + eps).sqrt();
        let v = xv.map(|p| p / norm);
        self.push(v, Op::L2Normalize(x, eps), &[x])
    }

    /// `−log softmax(logits)[label]` via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 1 {
            return Err(Error::shape("cross_entropy", lv.shape(), "expected a logit vector"));
        }
        if label >= lv.len() {
            return Err(Error::contract(
                "cross_entropy",
                format!("label {label} out of range for {} classes", lv.len()),
            ));
        }
        let loss = k::log_sum_exp(lv.data()) - lv.data()[label];
        let v = Tensor::scalar(loss.max(T::zero()));
        Ok(self.push(v, Op::CrossEntropy(logits, label), &[logits]))
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var> {
        let v = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|&x| self.value(x)).collect();
            op.forward(&vals)?
        };
        Ok(self.push(v, Op::Custom(op, inputs.to_vec()), inputs))
    }

    /// Reverse sweep from a scalar `loss` node.
    ///
    /// The graph is left untouched, so calling this twice yields identical
    /// gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                for (input, gi) in self.input_grads(node, &g)? {
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&gi)?,
                        slot @ None => *slot = Some(gi),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let mut r = Vec::new();
                if need(*a) {
                    r.push((*a, k::matmul(g, &k::transpose(val(*b))?)?));
                }
                if need(*b) {
                    r.push((*b, k::matmul(&k::transpose(val(*a))?, g)?));
                }
                r
            }
            Op::Transpose(a) => vec![(*a, k::transpose(g)?)],
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
            Op::Conv2d(x, w, spec) => {
                let (gx, gw) = k::conv2d_backward(val(*x), val(*w), spec, g, need(*x), need(*w))?;
                let mut r = Vec::new();
                if let Some(gx) = gx {
                    r.push((*x, gx));
                }
                if let Some(gw) = gw {
                    r.push((*w, gw));
                }
                r
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|p| -p))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), "mul", |p, q| p * q)?),
                (*b, g.zip_map(val(*a), "mul", |p, q| p * q)?),
            ],
            Op::Scale(a, s) => vec![(*a, g.map(|p| p * *s))],
            Op::Exp(a) => vec![(*a, g.zip_map(out, "exp", |p, y| p * y)?)],
            Op::Relu(a) => vec![(
                *a,
                g.zip_map(val(*a), "relu", |p, x| if x > T::zero() { p } else { T::zero() })?,
            )],
            Op::Sigmoid(a) => vec![(*a, g.zip_map(out, "sigmoid", |p, y| p * y * (T::one() - y))?)],
            Op::BroadcastAdd(x, v, axis) => vec![(*x, g.clone()), (*v, k::sum_except(g, *axis))],
            Op::BroadcastMul(x, v, axis) => {
                let gx = k::broadcast_along(g, val(*v), *axis, |p, q| p * q, "mul_along")?;
                let gv = k::sum_except(&g.zip_map(val(*x), "mul_along", |p, q| p * q)?, *axis);
                vec![(*x, gx), (*v, gv)]
            }
            Op::Softmax(x, axis) => vec![(*x, k::softmax_backward(out, g, *axis))],
            Op::Reduce(x, axes, kind) => {
                let xs = val(*x).shape();
                let (_, map) = k::reduce_index_map(xs, axes);
                let scale = match kind {
                    ReduceKind::Sum => T::one(),
                    ReduceKind::Mean => T::one() / T::lit((val(*x).len() / out.len()) as f64),
                };
                let data = map.iter().map(|&o| g.data()[o] * scale).collect();
                vec![(*x, Tensor::new(xs, data)?)]
            }
            Op::Concat(xs, axis) => {
                let (outer, _, inner) = k::axis_split(out.shape(), *axis);
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                let mut r = Vec::with_capacity(xs.len());
                for &x in xs {
                    let chunk = val(x).shape()[*axis] * inner;
                    let mut data = Vec::with_capacity(val(x).len());
                    for o in 0..outer {
                        data.extend_from_slice(&g.data()[o * total + offset..][..chunk]);
                    }
                    offset += chunk;
                    r.push((x, Tensor::new(val(x).shape(), data)?));
                }
                r
            }
            Op::ResizeNearest(x) => {
                let (h, w, c) = val(*x).hwc("resize_nearest")?;
                let (oh, ow, _) = out.hwc("resize_nearest")?;
                let mut gx = Tensor::zeros(val(*x).shape());
                let gd = gx.data_mut();
                for y in 0..oh {
                    let sy = k::nearest_source(y, h, oh);
                    for xo in 0..ow {
                        let sx = k::nearest_source(xo, w, ow);
                        let src = &g.data()[(y * ow + xo) * c..][..c];
                        for (d, &s) in gd[(sy * w + sx) * c..][..c].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::PairwiseSqDist(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (na, d) = (av.shape()[0], av.shape()[1]);
                let nb = bv.shape()[0];
                let mut ga = Tensor::zeros(av.shape());
                let mut gb = Tensor::zeros(bv.shape());
                for i in 0..na {
                    for j in 0..nb {
                        let gij = g.data()[i * nb + j];
                        if gij == T::zero() {
                            continue;
                        }
                        let two_g = gij + gij;
                        for t in 0..d {
                            let diff = two_g * (av.data()[i * d + t] - bv.data()[j * d + t]);
                            ga.data_mut()[i * d + t] = ga.data()[i * d + t] + diff;
                            gb.data_mut()[j * d + t] = gb.data()[j * d + t] - diff;
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::GatherRows(x, rows) => {
                let d = val(*x).shape()[1];
                let mut gx = Tensor::zeros(val(*x).shape());
                let gd = gx.data_mut();
                for (i, &r) in rows.iter().enumerate() {
                    for t in 0..d {
                        gd[r * d + t] = gd[r * d + t] + g.data()[i * d + t];
                    }
                }
                vec![(*x, gx)]
            }
            Op::ResidualAggregate(a, v, c) => {
                let (av, vv, cv) = (val(*a), val(*v), val(*c));
                let (n, kk) = (av.shape()[0], av.shape()[1]);
                let d = vv.shape()[1];
                let mut ga = Tensor::zeros(av.shape());
                let mut gv = Tensor::zeros(vv.shape());
                let mut gc = Tensor::zeros(cv.shape());
                for i in 0..n {
                    for q in 0..kk {
                        let aik = av.data()[i * kk + q];
                        let mut acc = T::zero();
                        for t in 0..d {
                            let gh = g.data()[q * d + t];
                            acc = acc + gh * (vv.data()[i * d + t] - cv.data()[q * d + t]);
                            gv.data_mut()[i * d + t] = gv.data()[i * d + t] + gh * aik;
                            gc.data_mut()[q * d + t] = gc.data()[q * d + t] - gh * aik;
                        }
                        ga.data_mut()[i * kk + q] = acc;
                    }
                }
                vec![(*a, ga), (*v, gv), (*c, gc)]
            }
            Op::L2Normalize(x, eps) => {
                let xv = val(*x);
                let norm = (xv.data().iter().map(|&p| p * p).sum::<T>() + *eps).sqrt();
                let dot: T = out.data().iter().zip(g.data()).map(|(&y, &p)| y * p).sum();
                let gx = g.zip_map(out, "l2_normalize", |p, y| (p - y * dot) / norm)?;
                vec![(*x, gx)]
            }
            Op::CrossEntropy(logits, label) => {
                let lv = val(*logits);
                let p = k::softmax(lv, 0)?;
                let scale = g.data()[0];
                let gx = Tensor::from_fn(lv.shape(), |i| {
                    let t = if i == *label { T::one() } else { T::zero() };
                    (p.data()[i] - t) * scale
                });
                vec![(*logits, gx)]
            }
            Op::Custom(op, inputs) => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&x| val(x)).collect();
                let gs = op.backward(&vals, out, g)?;
                if gs.len() != inputs.len() {
                    return Err(Error::contract(
                        "custom",
                        format!("{} returned wrong gradient count", op.name()),
                    ));
                }
                for (gi, x) in gs.iter().zip(&vals) {
                    if gi.shape() != x.shape() {
                        return Err(Error::dim("custom", gi.shape(), x.shape()));
                    }
                }
                inputs.iter().copied().zip(gs).collect()
            }
        })
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like it when `v` did not influence the loss.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }

    /// Adds every parameter leaf's gradient into `store`.
    pub fn accumulate_into(&self, graph: &Graph<T>, store: &mut ParamStore<T>) -> Result<()> {
        for &(id, v) in graph.param_vars() {
            if let Some(g) = self.get(v) {
                store.get_mut(id).grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}
