//! Recorded compute graph with eager forward evaluation, replay and
//! reverse-mode differentiation.
//!
//! Every builder method computes its value immediately and appends a node, so
//! node indices are a topological order. [`Graph::evaluate`] replays the
//! recorded ops after rebinding named leaves; [`Graph::backward`] walks the
//! nodes in reverse index order, which fixes the gradient accumulation order.

use std::sync::Arc;

use indexmap::IndexMap;

use super::tensor::{axis_extents, broadcast_offsets, broadcast_shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var, S),
    Tanh(Var),
    Sigmoid(Var),
    Softmax { x: Var, axis: usize, mask: Option<Arc<Vec<bool>>> },
    LayerNorm { x: Var, eps: S },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize, len: usize },
    Transpose(Var),
    Reshape { x: Var, shape: Vec<usize> },
    Broadcast { x: Var, shape: Vec<usize> },
    Sum(Var),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose(_) => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Broadcast { .. } => "broadcast",
            Op::Sum(_) => "sum",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    leaves: IndexMap<String, Var>,
    outputs: IndexMap<String, Var>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), leaves: IndexMap::new(), outputs: IndexMap::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, name: Option<String>, value: Tensor<S>, requires_grad: bool) -> Var {
        let var = Var(self.nodes.len());
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad });
        if let Some(name) = name {
            self.leaves.insert(name, var);
        }
        var
    }

    /// Named leaf that does not receive gradients.
    pub fn input(&mut self, name: impl Into<String>, value: Tensor<S>) -> Var {
        self.leaf(Some(name.into()), value, false)
    }

    /// Named trainable leaf. Registering the same name twice returns the first node.
    pub fn param(&mut self, name: impl Into<String>, value: &Tensor<S>) -> Var {
        let name = name.into();
        if let Some(&v) = self.leaves.get(&name) {
            return v;
        }
        self.leaf(Some(name), value.clone(), true)
    }

    /// Anonymous leaf without gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(None, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.leaves.get(name).copied()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaves in registration order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.leaves.iter().filter(|(_, v)| self.nodes[v.0].requires_grad).map(|(k, v)| (k.as_str(), *v))
    }

    pub fn mark_output(&mut self, name: impl Into<String>, v: Var) {
        self.outputs.insert(name.into(), v);
    }

    /// Overwrites the value of a leaf; the caller must [`Graph::recompute`] afterwards.
    pub fn set_leaf(&mut self, v: Var, value: Tensor<S>) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::InvalidArgument(format!("node {} is not a leaf", v.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_leaf",
                format!("leaf has shape {:?}, new value {:?}", node.value.shape(), value.shape()),
            ));
        }
        node.value = value;
        Ok(())
    }

    /// Rebinds named leaves and replays every recorded op. Returns the marked outputs.
    pub fn evaluate(&mut self, inputs: &[(&str, Tensor<S>)]) -> Result<IndexMap<String, Tensor<S>>> {
        for (name, value) in inputs {
            let v = self.var(name).ok_or_else(|| Error::UnknownInput((*name).to_string()))?;
            self.set_leaf(v, value.clone())?;
        }
        self.recompute()?;
        Ok(self.outputs.iter().map(|(k, v)| (k.clone(), self.nodes[v.0].value.clone())).collect())
    }

    /// Recomputes every non-leaf node from the current leaf values.
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = self.compute(&self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    fn push(&mut self, op: Op<S>) -> Result<Var> {
        let value = self.compute(&op)?;
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        let var = Var(self.nodes.len());
        self.nodes.push(Node { op, value, requires_grad });
        Ok(var)
    }

    fn inputs_of(&self, op: &Op<S>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x, _)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Softmax { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::Slice { x, .. }
            | Op::Transpose(x)
            | Op::Reshape { x, .. }
            | Op::Broadcast { x, .. }
            | Op::Sum(x) => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
        }
    }

    // ---- builders -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Result<Var> {
        self.push(Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: S) -> Result<Var> {
        self.push(Op::AddScalar(x, s))
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let neg = self.scale(x, -S::one())?;
        self.add_scalar(neg, S::one())
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.push(Op::Softmax { x, axis, mask: None })
    }

    /// Softmax restricted to entries where `mask` is true; masked entries are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, mask: Arc<Vec<bool>>) -> Result<Var> {
        self.push(Op::Softmax { x, axis, mask: Some(mask) })
    }

    /// Normalizes over the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: S) -> Result<Var> {
        self.push(Op::LayerNorm { x, eps })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.push(Op::Concat { xs: xs.to_vec(), axis })
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.push(Op::Slice { x, axis, start, len })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape { x, shape: shape.to_vec() })
    }

    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Broadcast { x, shape: shape.to_vec() })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    // ---- forward kernels --------------------------------------------------

    fn compute(&self, op: &Op<S>) -> Result<Tensor<S>> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let out = match op {
            Op::Leaf => unreachable!("leaves are never recomputed"),
            Op::MatMul(a, b) => matmul_forward(val(a), val(b))?,
            Op::Add(a, b) => zip_broadcast("add", val(a), val(b), |x, y| x + y)?,
            Op::Sub(a, b) => zip_broadcast("sub", val(a), val(b), |x, y| x - y)?,
            Op::Mul(a, b) => zip_broadcast("mul", val(a), val(b), |x, y| x * y)?,
            Op::Scale(x, s) => val(x).map(|v| v * *s),
            Op::AddScalar(x, s) => val(x).map(|v| v + *s),
            Op::Tanh(x) => val(x).map(|v| v.tanh()),
            Op::Sigmoid(x) => val(x).map(sigmoid),
            Op::Softmax { x, axis, mask } => softmax_forward(val(x), *axis, mask.as_deref())?,
            Op::LayerNorm { x, eps } => layer_norm_forward(val(x), *eps)?.0,
            Op::Concat { xs, axis } => {
                let parts: Vec<&Tensor<S>> = xs.iter().map(val).collect();
                concat_forward(&parts, *axis)?
            }
            Op::Slice { x, axis, start, len } => slice_forward(val(x), *axis, *start, *len)?,
            Op::Transpose(x) => transpose_forward(val(x))?,
            Op::Reshape { x, shape } => val(x).clone().reshape(shape.clone())?,
            Op::Broadcast { x, shape } => {
                let src = val(x);
                match broadcast_shape(src.shape(), shape) {
                    Some(s) if s == *shape => {}
                    _ => {
                        return Err(Error::shape(
                            "broadcast",
                            format!("{:?} cannot broadcast to {shape:?}", src.shape()),
                        ))
                    }
                }
                let offs = broadcast_offsets(src.shape(), shape);
                Tensor::from_vec(shape.clone(), offs.iter().map(|&o| src.data()[o]).collect())?
            }
            Op::Sum(x) => Tensor::scalar(val(x).sum()),
        };
        if !out.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        Ok(out)
    }

    // ---- reverse mode -------------------------------------------------------

    /// Populates gradients of `loss` with respect to every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(shape));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: &Var| &self.nodes[v.0].value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                if needs(a) {
                    accumulate(grads, *a, matmul_nt(g, bv)?);
                }
                if needs(b) {
                    accumulate(grads, *b, matmul_tn(av, g)?);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -S::one() } else { S::one() };
                if needs(a) {
                    accumulate(grads, *a, reduce_broadcast(g, val(a).shape(), |x, _| x, None));
                }
                if needs(b) {
                    accumulate(grads, *b, reduce_broadcast(g, val(b).shape(), |x, _| x * sign, None));
                }
            }
            Op::Mul(a, b) => {
                let out = g.shape();
                if needs(a) {
                    let other = (val(b), out);
                    accumulate(grads, *a, reduce_broadcast(g, val(a).shape(), |x, o| x * o, Some(other)));
                }
                if needs(b) {
                    let other = (val(a), out);
                    accumulate(grads, *b, reduce_broadcast(g, val(b).shape(), |x, o| x * o, Some(other)));
                }
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.map(|v| v * *s)),
            Op::AddScalar(x, _) => accumulate(grads, *x, g.clone()),
            Op::Tanh(x) => {
                let y = &node.value;
                let data = g.data().iter().zip(y.data()).map(|(&g, &y)| g * (S::one() - y * y)).collect();
                accumulate(grads, *x, Tensor::from_vec(y.shape().to_vec(), data)?);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let data = g.data().iter().zip(y.data()).map(|(&g, &y)| g * y * (S::one() - y)).collect();
                accumulate(grads, *x, Tensor::from_vec(y.shape().to_vec(), data)?);
            }
            Op::Softmax { x, axis, .. } => {
                let y = &node.value;
                let (outer, n, inner) = axis_extents(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![S::zero(); yd.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let base = o * n * inner + k;
                        let mut dot = S::zero();
                        for j in 0..n {
                            let idx = base + j * inner;
                            dot += gd[idx] * yd[idx];
                        }
                        for j in 0..n {
                            let idx = base + j * inner;
                            dx[idx] = yd[idx] * (gd[idx] - dot);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(y.shape().to_vec(), dx)?);
            }
            Op::LayerNorm { x, eps } => {
                let (xhat, inv_std) = layer_norm_forward(val(x), *eps)?;
                let n = *xhat.shape().last().unwrap_or(&1);
                let nf = S::from_usize(n).unwrap();
                let mut dx = vec![S::zero(); xhat.len()];
                for (r, inv) in inv_std.iter().enumerate() {
                    let xs = &xhat.data()[r * n..(r + 1) * n];
                    let gs = &g.data()[r * n..(r + 1) * n];
                    let mean_g = gs.iter().copied().sum::<S>() / nf;
                    let mean_gx = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum::<S>() / nf;
                    for j in 0..n {
                        dx[r * n + j] = *inv * (gs[j] - mean_g - xs[j] * mean_gx);
                    }
                }
                accumulate(grads, *x, Tensor::from_vec(xhat.shape().to_vec(), dx)?);
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                for x in xs {
                    let len = val(x).shape()[*axis];
                    if needs(x) {
                        accumulate(grads, *x, slice_forward(g, *axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start, len } => {
                let shape = val(x).shape();
                let (outer, n, inner) = axis_extents(shape, *axis);
                let mut dx = vec![S::zero(); shape.iter().product()];
                let gd = g.data();
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = o * n * inner + start * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                accumulate(grads, *x, Tensor::from_vec(shape.to_vec(), dx)?);
            }
            Op::Transpose(x) => accumulate(grads, *x, transpose_forward(g)?),
            Op::Reshape { x, .. } => {
                accumulate(grads, *x, g.clone().reshape(val(x).shape().to_vec())?);
            }
            Op::Broadcast { x, .. } => {
                accumulate(grads, *x, reduce_broadcast(g, val(x).shape(), |v, _| v, None));
            }
            Op::Sum(x) => {
                let s = g.item();
                accumulate(grads, *x, Tensor::full(val(x).shape().to_vec(), s));
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, contrib: Tensor<S>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(contrib.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn zip_broadcast<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(a.shape().to_vec(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| Error::shape(op, format!("{:?} and {:?} do not broadcast", a.shape(), b.shape())))?;
    let oa = broadcast_offsets(a.shape(), &out);
    let ob = broadcast_offsets(b.shape(), &out);
    let data = oa.iter().zip(&ob).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect();
    Tensor::from_vec(out, data)
}

/// Sums `g` (shaped like the broadcast output) back down to `shape`.
/// With `other`, each element is first combined with the matching element of
/// the other operand (for the product rule).
fn reduce_broadcast<S: Scalar>(
    g: &Tensor<S>,
    shape: &[usize],
    f: impl Fn(S, S) -> S,
    other: Option<(&Tensor<S>, &[usize])>,
) -> Tensor<S> {
    let out = g.shape();
    let other_at: Box<dyn Fn(usize) -> S> = match other {
        None => Box::new(|_| S::one()),
        Some((t, _)) if t.shape() == out => Box::new(move |i| t.data()[i]),
        Some((t, out)) => {
            let offs = broadcast_offsets(t.shape(), out);
            Box::new(move |i| t.data()[offs[i]])
        }
    };
    if shape == out {
        let data = g.data().iter().enumerate().map(|(i, &x)| f(x, other_at(i))).collect();
        return Tensor::from_vec(shape.to_vec(), data).expect("same shape");
    }
    let offs = broadcast_offsets(shape, out);
    let mut acc = vec![S::zero(); shape.iter().product()];
    for (i, (&x, &o)) in g.data().iter().zip(&offs).enumerate() {
        acc[o] += f(x, other_at(i));
    }
    Tensor::from_vec(shape.to_vec(), acc).expect("reduced shape")
}

fn matmul_forward<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    Tensor::from_vec(vec![m, n], c)
}

/// `g · bᵀ` for g: m×n, b: k×n.
fn matmul_nt<S: Scalar>(g: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, n) = g.dims2()?;
    let (k, _) = b.dims2()?;
    let mut out = vec![S::zero(); m * k];
    for i in 0..m {
        let grow = g.row(i);
        for p in 0..k {
            out[i * k + p] = grow.iter().zip(b.row(p)).map(|(&x, &y)| x * y).sum();
        }
    }
    debug_assert_eq!(g.len(), m * n);
    Tensor::from_vec(vec![m, k], out)
}

/// `aᵀ · g` for a: m×k, g: m×n.
fn matmul_tn<S: Scalar>(a: &Tensor<S>, g: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2()?;
    let (_, n) = g.dims2()?;
    let mut out = vec![S::zero(); k * n];
    for i in 0..m {
        let grow = g.row(i);
        for p in 0..k {
            let aip = a.data()[i * k + p];
            for (o, &gj) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += aip * gj;
            }
        }
    }
    Tensor::from_vec(vec![k, n], out)
}

fn softmax_forward<S: Scalar>(x: &Tensor<S>, axis: usize, mask: Option<&Vec<bool>>) -> Result<Tensor<S>> {
    if axis >= x.ndim() {
        return Err(Error::shape("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
    }
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(Error::shape("softmax", format!("mask of {} for {:?}", m.len(), x.shape())));
        }
    }
    let allowed = |i: usize| mask.is_none_or(|m| m[i]);
    let (outer, n, inner) = axis_extents(x.shape(), axis);
    let xd = x.data();
    let mut y = vec![S::zero(); xd.len()];
    for o in 0..outer {
        for k in 0..inner {
            let base = o * n * inner + k;
            let mut max = S::neg_infinity();
            for j in 0..n {
                let idx = base + j * inner;
                if allowed(idx) && xd[idx] > max {
                    max = xd[idx];
                }
            }
            if max == S::neg_infinity() {
                return Err(Error::InvalidArgument("softmax row is fully masked".into()));
            }
            let mut total = S::zero();
            for j in 0..n {
                let idx = base + j * inner;
                if allowed(idx) {
                    let e = (xd[idx] - max).exp();
                    y[idx] = e;
                    total += e;
                }
            }
            for j in 0..n {
                y[base + j * inner] /= total;
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), y)
}

/// Returns the normalized tensor and the per-row inverse standard deviations.
fn layer_norm_forward<S: Scalar>(x: &Tensor<S>, eps: S) -> Result<(Tensor<S>, Vec<S>)> {
    let n = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
    let nf = S::from_usize(n).unwrap();
    let rows = x.len() / n.max(1);
    let mut out = vec![S::zero(); x.len()];
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let xs = &x.data()[r * n..(r + 1) * n];
        let mean = xs.iter().copied().sum::<S>() / nf;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / nf;
        let inv_std = S::one() / (var + eps).sqrt();
        for j in 0..n {
            out[r * n + j] = (xs[j] - mean) * inv_std;
        }
        inv.push(inv_std);
    }
    Ok((Tensor::from_vec(x.shape().to_vec(), out)?, inv))
}

fn concat_forward<S: Scalar>(parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
    if axis >= first.ndim() {
        return Err(Error::shape("concat", format!("axis {axis} out of range for {:?}", first.shape())));
    }
    let mut shape = first.shape().to_vec();
    let mut total = 0;
    for p in parts {
        let ok = p.ndim() == shape.len() && p.shape().iter().enumerate().all(|(i, &d)| i == axis || d == shape[i]);
        if !ok {
            return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {axis}", first.shape(), p.shape())));
        }
        total += p.shape()[axis];
    }
    shape[axis] = total;
    let (outer, _, inner) = axis_extents(&shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * block..(o + 1) * block]);
        }
    }
    Tensor::from_vec(shape, data)
}

fn slice_forward<S: Scalar>(x: &Tensor<S>, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
    if axis >= x.ndim() || start + len > x.shape()[axis] {
        return Err(Error::shape("slice", format!("[{start}, {}) on axis {axis} of {:?}", start + len, x.shape())));
    }
    let (outer, n, inner) = axis_extents(x.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let s = o * n * inner + start * inner;
        data.extend_from_slice(&x.data()[s..s + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::from_vec(shape, data)
}

fn transpose_forward<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (r, c) = x.dims2()?;
    let mut data = vec![S::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = x.data()[i * c + j];
        }
    }
    Tensor::from_vec(vec![c, r], data)
}
