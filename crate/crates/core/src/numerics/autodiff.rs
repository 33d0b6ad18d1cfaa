//! Tape-based reverse-mode differentiation.
//!
//! Every [`Var`] is a node carrying its forward value. Nodes that depend on a
//! trainable parameter keep a link to the operation that produced them; the
//! rest drop their inputs immediately, so inference through the same code
//! path holds no tape at all. Node ids grow monotonically with creation, which
//! makes id order a topological order of the recorded graph.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{ensure, Error, Result};
use crate::numerics::kernels::{self, non_finite};
use crate::numerics::tensor::Tensor;

static NEXT_NODE: AtomicUsize = AtomicUsize::new(1);
static NEXT_GRAPH: AtomicUsize = AtomicUsize::new(1);

fn next_node_id() -> usize {
    NEXT_NODE.fetch_add(1, Ordering::Relaxed)
}

enum Op {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddChannel(Var, Var),
    AddBatchChannel(Var, Var),
    AddLeading(Var, Var),
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Softmax(Var),
    Silu(Var),
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, means: Vec<f64>, rstds: Vec<f64> },
    Upsample(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    IndexSelect0(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
}

struct Node {
    id: usize,
    graph: Option<usize>,
    value: Tensor,
    requires_grad: bool,
    op: Option<Op>,
}

/// Handle to a value in a (possibly empty) differentiation graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.0.id, self.0.value.shape())
    }
}

fn graph_of(parents: &[&Var]) -> Option<usize> {
    parents.iter().find_map(|p| p.0.graph)
}

impl Var {
    /// A value that never receives gradients.
    pub fn constant(value: Tensor) -> Self {
        Var(Rc::new(Node {
            id: next_node_id(),
            graph: None,
            value,
            requires_grad: false,
            op: None,
        }))
    }

    fn derived(value: Tensor, parents: &[&Var], op: impl FnOnce() -> Op) -> Self {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        Var(Rc::new(Node {
            id: next_node_id(),
            graph: graph_of(parents),
            value,
            requires_grad,
            op: requires_grad.then(op),
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let v = self.value().add(other.value())?;
        Ok(Self::derived(v, &[self, other], || Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let v = self.value().sub(other.value())?;
        Ok(Self::derived(v, &[self, other], || Op::Sub(self.clone(), other.clone())))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        let v = self.value().mul(other.value())?;
        Ok(Self::derived(v, &[self, other], || Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, s: f32) -> Result<Var> {
        let v = self.value().scale(s).check_finite("scale")?;
        Ok(Self::derived(v, &[self], || Op::Scale(self.clone(), s)))
    }

    /// `x[b, c, ...] + bias[c]`.
    pub fn add_channel(&self, bias: &Var) -> Result<Var> {
        let s = self.shape();
        ensure!(
            s.len() >= 2 && bias.shape() == [s[1]],
            Argument,
            "channel bias {:?} for input {:?}",
            bias.shape(),
            s
        );
        let inner = self.value().len() / (s[0] * s[1]);
        let c = s[1];
        let mut out = self.value().data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let b = bias.value().data()[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let v = Tensor::from_parts(s.to_vec(), out);
        Ok(Self::derived(v, &[self, bias], || Op::AddChannel(self.clone(), bias.clone())))
    }

    /// `x[b, c, ...] + e[b, c]`.
    pub fn add_batch_channel(&self, e: &Var) -> Result<Var> {
        let s = self.shape();
        ensure!(
            s.len() >= 2 && e.shape() == [s[0], s[1]],
            Argument,
            "per-sample channel term {:?} for input {:?}",
            e.shape(),
            s
        );
        let inner = self.value().len() / (s[0] * s[1]);
        let mut out = self.value().data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let b = e.value().data()[i];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let v = Tensor::from_parts(s.to_vec(), out);
        Ok(Self::derived(v, &[self, e], || Op::AddBatchChannel(self.clone(), e.clone())))
    }

    /// Adds `y` broadcast over the leading axes of `self`; `y`'s shape must be
    /// a suffix of `self`'s.
    pub fn add_leading(&self, y: &Var) -> Result<Var> {
        let (s, ys) = (self.shape(), y.shape());
        ensure!(
            ys.len() <= s.len() && &s[s.len() - ys.len()..] == ys,
            Argument,
            "cannot broadcast {ys:?} onto {s:?}"
        );
        let n = y.value().len();
        let mut out = self.value().data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(y.value().data()) {
                *o += b;
            }
        }
        let v = Tensor::from_parts(s.to_vec(), out);
        Ok(Self::derived(v, &[self, y], || Op::AddLeading(self.clone(), y.clone())))
    }

    /// Batched matrix product with optional operand transposes.
    pub fn matmul(&self, b: &Var, ta: bool, tb: bool) -> Result<Var> {
        let v = kernels::bmm(self.value(), b.value(), ta, tb)?;
        Ok(Self::derived(v, &[self, b], || Op::Matmul { a: self.clone(), b: b.clone(), ta, tb }))
    }

    /// `x · wᵀ + b` over the last axis, `w: [out, in]`.
    pub fn linear(&self, w: &Var, b: Option<&Var>) -> Result<Var> {
        let s = self.shape().to_vec();
        let k = *s.last().unwrap();
        ensure!(
            w.shape().len() == 2 && w.shape()[1] == k,
            Argument,
            "linear weight {:?} for input width {k}",
            w.shape()
        );
        let rows = self.value().len() / k;
        let x3 = self.reshape(&[1, rows, k])?;
        let w3 = w.reshape(&[1, w.shape()[0], k])?;
        let mut y = x3.matmul(&w3, false, true)?;
        let mut out_shape = s.clone();
        *out_shape.last_mut().unwrap() = w.shape()[0];
        y = y.reshape(&out_shape)?;
        match b {
            Some(b) => y.add_leading(b),
            None => Ok(y),
        }
    }

    pub fn softmax_last(&self) -> Result<Var> {
        let v = kernels::softmax_last(self.value());
        ensure!(v.is_finite(), Numeric, "softmax produced a non-finite value");
        Ok(Self::derived(v, &[self], || Op::Softmax(self.clone())))
    }

    pub fn silu(&self) -> Result<Var> {
        let v = self.value().map(kernels::silu);
        Ok(Self::derived(v, &[self], || Op::Silu(self.clone())))
    }

    pub fn conv2d(&self, w: &Var, b: Option<&Var>, stride: usize, pad: usize) -> Result<Var> {
        let v = kernels::conv2d_batched(self.value(), w.value(), b.map(|b| b.value()), stride, pad)?;
        if !v.is_finite() {
            return Err(non_finite("conv2d"));
        }
        let mut parents = vec![self, w];
        if let Some(b) = b {
            parents.push(b);
        }
        Ok(Self::derived(v, &parents, || Op::Conv {
            x: self.clone(),
            w: w.clone(),
            b: b.cloned(),
            stride,
            pad,
        }))
    }

    pub fn group_norm(&self, groups: usize, gamma: &Var, beta: &Var) -> Result<Var> {
        let (v, means, rstds) = kernels::group_norm(self.value(), groups, gamma.value(), beta.value(), 1e-5)?;
        Ok(Self::derived(v, &[self, gamma, beta], || Op::GroupNorm {
            x: self.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            groups,
            means,
            rstds,
        }))
    }

    pub fn upsample2x(&self) -> Result<Var> {
        let v = kernels::upsample2x(self.value())?;
        Ok(Self::derived(v, &[self], || Op::Upsample(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value().reshape(shape)?;
        Ok(Self::derived(v, &[self], || Op::Reshape(self.clone())))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var> {
        let v = kernels::permute(self.value(), perm)?;
        Ok(Self::derived(v, &[self], || Op::Permute(self.clone(), perm.to_vec())))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        ensure!(!parts.is_empty(), Argument, "nothing to concatenate");
        let first = parts[0].shape().to_vec();
        ensure!(axis < first.len(), Argument, "concat axis {axis} for rank {}", first.len());
        for p in parts {
            let s = p.shape();
            ensure!(
                s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(a, (x, y))| a == axis || x == y),
                Argument,
                "concat shapes {:?} vs {:?}",
                s,
                first
            );
        }
        let outer: usize = first[..axis].iter().product();
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.value().len()).sum());
        for o in 0..outer {
            for p in parts {
                let chunk = p.value().len() / outer;
                data.extend_from_slice(&p.value().data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::from_parts(shape, data);
        let refs: Vec<&Var> = parts.iter().collect();
        Ok(Self::derived(v, &refs, || Op::Concat(parts.to_vec(), axis)))
    }

    pub fn index_select0(&self, indices: &[usize]) -> Result<Var> {
        let v = self.value().index_select0(indices)?;
        Ok(Self::derived(v, &[self], || Op::IndexSelect0(self.clone(), indices.to_vec())))
    }

    pub fn narrow0(&self, start: usize, count: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + count).collect();
        self.index_select0(&idx)
    }

    pub fn sum(&self) -> Result<Var> {
        let v = Tensor::scalar(self.value().sum_f64() as f32);
        Ok(Self::derived(v, &[self], || Op::Sum(self.clone())))
    }

    pub fn mean(&self) -> Result<Var> {
        let v = Tensor::scalar(self.value().mean_f64() as f32);
        Ok(Self::derived(v, &[self], || Op::Mean(self.clone())))
    }

    /// Mean squared difference to `target`.
    pub fn mse(&self, target: &Var) -> Result<Var> {
        let d = self.sub(target)?;
        d.mul(&d)?.mean()
    }

    /// `softmax(Q Kᵀ / √d) V` over `[B, L, d]` operands.
    pub fn attention(q: &Var, k: &Var, v: &Var) -> Result<Var> {
        ensure!(
            q.shape().len() == 3 && k.shape().len() == 3 && v.shape().len() == 3,
            Argument,
            "attention expects [B, L, d] operands"
        );
        ensure!(q.shape()[2] == k.shape()[2], Argument, "query/key widths differ");
        ensure!(k.shape()[1] == v.shape()[1], Argument, "key/value lengths differ");
        let d = q.shape()[2] as f32;
        let scores = q.matmul(k, false, true)?.scale(1.0 / d.sqrt())?;
        scores.softmax_last()?.matmul(v, false, false)
    }
}

/// Gradient of a scalar loss with respect to each trainable parameter.
pub type Gradients = BTreeMap<String, Tensor>;

/// Parameter registry for one differentiation pass.
pub struct Graph {
    id: usize,
    params: Vec<(String, Var)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    /// Registers a named leaf. Frozen leaves take part in the forward pass but
    /// are omitted from [`Graph::backward`]'s result.
    pub fn param(&mut self, name: &str, value: Tensor, trainable: bool) -> Var {
        let v = Var(Rc::new(Node {
            id: next_node_id(),
            graph: Some(self.id),
            value,
            requires_grad: trainable,
            op: None,
        }));
        self.params.push((name.to_string(), v.clone()));
        v
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(n, v)| (n.as_str(), v))
    }

    /// Reverse-mode pass from a scalar `loss` recorded against this graph.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        ensure!(
            loss.value().len() == 1,
            Argument,
            "loss must be scalar, got shape {:?}",
            loss.shape()
        );
        if loss.0.graph != Some(self.id) {
            return Err(Error::Lookup(format!("node #{} is not part of this graph", loss.id())));
        }
        let mut grads: Gradients = BTreeMap::new();
        if !loss.requires_grad() {
            return Ok(grads);
        }

        // Collect every node on a path to a trainable leaf.
        let mut nodes: HashMap<usize, Var> = HashMap::new();
        let mut stack = vec![loss.clone()];
        while let Some(v) = stack.pop() {
            if !v.requires_grad() || nodes.contains_key(&v.id()) {
                continue;
            }
            if let Some(op) = &v.0.op {
                for p in op.parents() {
                    stack.push(p.clone());
                }
            }
            nodes.insert(v.id(), v);
        }
        let mut order: Vec<Var> = nodes.into_values().collect();
        order.sort_by(|a, b| b.id().cmp(&a.id()));

        let mut acc: HashMap<usize, Tensor> = HashMap::new();
        acc.insert(loss.id(), Tensor::ones(loss.shape()));
        for node in &order {
            let Some(g) = acc.remove(&node.id()) else { continue };
            match &node.0.op {
                Some(op) => {
                    for (parent, pg) in op.backward(node, &g)? {
                        if !parent.requires_grad() {
                            continue;
                        }
                        match acc.get_mut(&parent.id()) {
                            Some(existing) => {
                                let d = existing.data_mut();
                                for (a, b) in d.iter_mut().zip(pg.data()) {
                                    *a += b;
                                }
                            }
                            None => {
                                acc.insert(parent.id(), pg);
                            }
                        }
                    }
                }
                None => {
                    acc.insert(node.id(), g);
                }
            }
        }
        for (name, v) in &self.params {
            if v.requires_grad() {
                let g = acc.get(&v.id()).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()));
                ensure!(g.is_finite(), Numeric, "gradient of {name} is not finite");
                grads.insert(name.clone(), g);
            }
        }
        Ok(grads)
    }
}

fn sum_to_channel(g: &Tensor, c: usize) -> Tensor {
    let s = g.shape();
    let inner = g.len() / (s[0] * c);
    let mut acc = vec![0.0f64; c];
    for (i, chunk) in g.data().chunks(inner).enumerate() {
        acc[i % c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
    }
    Tensor::from_parts(vec![c], acc.into_iter().map(|v| v as f32).collect())
}

impl Op {
    fn parents(&self) -> Vec<&Var> {
        match self {
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddChannel(a, b)
            | Op::AddBatchChannel(a, b)
            | Op::AddLeading(a, b)
            | Op::Matmul { a, b, .. } => vec![a, b],
            Op::Scale(x, _)
            | Op::Softmax(x)
            | Op::Silu(x)
            | Op::Upsample(x)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::IndexSelect0(x, _)
            | Op::Sum(x)
            | Op::Mean(x) => vec![x],
            Op::Conv { x, w, b, .. } => {
                let mut v = vec![x, w];
                if let Some(b) = b {
                    v.push(b);
                }
                v
            }
            Op::GroupNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Concat(parts, _) => parts.iter().collect(),
        }
    }

    fn backward<'a>(&'a self, out: &Var, g: &Tensor) -> Result<Vec<(&'a Var, Tensor)>> {
        Ok(match self {
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![(a, g.mul(b.value())?), (b, g.mul(a.value())?)],
            Op::Scale(x, s) => vec![(x, g.scale(*s))],
            Op::AddChannel(x, bias) => {
                let c = bias.shape()[0];
                vec![(x, g.clone()), (bias, sum_to_channel(g, c))]
            }
            Op::AddBatchChannel(x, e) => {
                let s = x.shape();
                let inner = g.len() / (s[0] * s[1]);
                let sums: Vec<f32> = g
                    .data()
                    .chunks(inner)
                    .map(|c| c.iter().map(|&v| v as f64).sum::<f64>() as f32)
                    .collect();
                vec![(x, g.clone()), (e, Tensor::from_parts(e.shape().to_vec(), sums))]
            }
            Op::AddLeading(x, y) => {
                let n = y.value().len();
                let gy = kernels::sum_rows(&g.reshape(&[g.len() / n, n])?).reshape(y.shape())?;
                vec![(x, g.clone()), (y, gy)]
            }
            Op::Matmul { a, b, ta, tb } => {
                let (av, bv) = (a.value(), b.value());
                let ga = if *ta {
                    kernels::bmm(bv, g, *tb, true)?
                } else {
                    kernels::bmm(g, bv, false, !*tb)?
                };
                let gb = if *tb {
                    kernels::bmm(g, av, true, *ta)?
                } else {
                    kernels::bmm(av, g, !*ta, false)?
                };
                vec![(a, ga), (b, gb)]
            }
            Op::Softmax(x) => {
                let y = out.value();
                let row = *y.shape().last().unwrap();
                let mut dx = vec![0.0f32; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(row).zip(y.data().chunks(row)).zip(g.data().chunks(row)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a as f64 * b as f64).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = (yv as f64 * (gv as f64 - dot)) as f32;
                    }
                }
                vec![(x, Tensor::from_parts(y.shape().to_vec(), dx))]
            }
            Op::Silu(x) => {
                let gx = x.value().zip_map(g, |v, gv| kernels::silu_grad(v) * gv)?;
                vec![(x, gx)]
            }
            Op::Conv { x, w, b, stride, pad } => {
                let (dx, dw, db) = kernels::conv2d_backward(x.value(), w.value(), g, *stride, *pad)?;
                let mut v = vec![(x, dx), (w, dw)];
                if let Some(b) = b {
                    v.push((b, db));
                }
                v
            }
            Op::GroupNorm { x, gamma, beta, groups, means, rstds } => {
                let (dx, dg, db) = kernels::group_norm_backward(x.value(), g, *groups, gamma.value(), means, rstds);
                vec![(x, dx), (gamma, dg), (beta, db)]
            }
            Op::Upsample(x) => vec![(x, kernels::upsample2x_backward(g))],
            Op::Reshape(x) => vec![(x, g.reshape(x.shape())?)],
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                vec![(x, kernels::permute(g, &inverse)?)]
            }
            Op::Concat(parts, axis) => {
                let outer: usize = out.shape()[..*axis].iter().product();
                let mut bufs: Vec<Vec<f32>> = parts.iter().map(|p| Vec::with_capacity(p.value().len())).collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (p, buf) in parts.iter().zip(bufs.iter_mut()) {
                        let chunk = p.value().len() / outer;
                        buf.extend_from_slice(&g.data()[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                parts
                    .iter()
                    .zip(bufs)
                    .map(|(p, buf)| (p, Tensor::from_parts(p.shape().to_vec(), buf)))
                    .collect()
            }
            Op::IndexSelect0(x, idx) => {
                let inner = x.value().len() / x.shape()[0];
                let mut dx = vec![0.0f32; x.value().len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (d, &s) in dx[i * inner..(i + 1) * inner].iter_mut().zip(&g.data()[r * inner..(r + 1) * inner]) {
                        *d += s;
                    }
                }
                vec![(x, Tensor::from_parts(x.shape().to_vec(), dx))]
            }
            Op::Sum(x) => vec![(x, Tensor::full(x.shape(), g.data()[0]))],
            Op::Mean(x) => {
                let n = x.value().len() as f32;
                vec![(x, Tensor::full(x.shape(), g.data()[0] / n))]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::from_fn(&[2, 3], |i| i as f32), true);
        let grads = g.backward(&x.sum().unwrap()).unwrap();
        assert_eq!(grads["x"], Tensor::ones(&[2, 3]));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(3.0), true);
        let loss = x.mul(&x).unwrap().sum().unwrap();
        assert_eq!(g.backward(&loss).unwrap()["x"].data(), &[6.0]);
    }

    #[test]
    fn frozen_params_are_omitted() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::scalar(2.0), true);
        let b = g.param("b", Tensor::scalar(5.0), false);
        let loss = a.mul(&b).unwrap().sum().unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads["a"].data(), &[5.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::ones(&[2]), true);
        assert!(matches!(g.backward(&x), Err(Error::Argument(_))));
        let other = Graph::new();
        let loss = x.sum().unwrap();
        assert!(matches!(other.backward(&loss), Err(Error::Lookup(_))));
    }

    #[test]
    fn constants_keep_no_tape() {
        let c = Var::constant(Tensor::ones(&[2]));
        let y = c.add(&c).unwrap().silu().unwrap();
        assert!(!y.requires_grad());
        assert!(y.0.op.is_none());
    }
}
