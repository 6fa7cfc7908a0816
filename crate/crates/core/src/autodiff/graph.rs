use std::collections::BTreeMap;
use std::sync::Arc;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Reshape(NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
    },
    Gather {
        input: NodeId,
        indices: Vec<usize>,
    },
    Softmax(NodeId),
    LayerNorm {
        input: NodeId,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    Relu(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    MeanAxis {
        input: NodeId,
        axis: usize,
    },
    MaxAxis {
        input: NodeId,
        axis: usize,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Chamfer {
        pred: NodeId,
        truth: NodeId,
        nn_pred: Vec<usize>,
        nn_truth: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::MeanAxis { .. } => "mean_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Chamfer { .. } => "chamfer",
        }
    }
}

struct Node<T> {
    op: Op,
    value: Arc<Tensor<T>>,
    requires_grad: bool,
}

/// Define-by-run tape. Every op is evaluated when recorded and its value is
/// cached for [`Graph::backward`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, NodeId)>,
    released: bool,
}

/// Parameter gradients keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.grads
    }

    pub fn from_map(grads: BTreeMap<String, Tensor<T>>) -> Self {
        Self { grads }
    }

    /// Elementwise `self += other`; names missing from `self` are adopted.
    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<()> {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
                Some(acc) if acc.shape() == g.shape() => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                Some(acc) => {
                    return Err(Error::shape(format!(
                        "gradient {name}: {:?} vs {:?}",
                        acc.shape(),
                        g.shape()
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        let s = T::from_f64(s);
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            released: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Registered parameter names with their nodes, in registration order.
    pub fn params(&self) -> &[(String, NodeId)] {
        &self.params
    }

    fn push(&mut self, op: Op, value: Tensor<T>) -> Result<NodeId> {
        self.push_shared(op, Arc::new(value), true)
    }

    fn push_shared(&mut self, op: Op, value: Arc<Tensor<T>>, check_finite: bool) -> Result<NodeId> {
        let id = self.nodes.len();
        if check_finite && !value.is_finite() {
            return Err(Error::Numeric {
                node: id,
                op: op.name(),
            });
        }
        let requires_grad = match &op {
            Op::Input => false,
            Op::Param => true,
            op => self.inputs_of(op).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    fn inputs_of(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Input | Op::Param => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::SumAll(a)
            | Op::MeanAll(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { input, .. }
            | Op::Gather { input, .. }
            | Op::LayerNorm { input, .. }
            | Op::MeanAxis { input, .. }
            | Op::MaxAxis { input, .. } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Chamfer { pred, truth, .. } => vec![*pred, *truth],
        }
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::State(format!(
                "node {} does not belong to this graph",
                id.0
            )));
        }
        Ok(())
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: impl Into<Arc<Tensor<T>>>) -> Result<NodeId> {
        self.push_shared(Op::Input, value.into(), true)
    }

    /// Constant shared with a parameter store; not re-checked for finiteness.
    pub(crate) fn input_trusted(&mut self, value: Arc<Tensor<T>>) -> Result<NodeId> {
        self.push_shared(Op::Input, value, false)
    }

    /// Named trainable leaf. Names must be unique within a graph.
    pub fn param(&mut self, name: &str, value: impl Into<Arc<Tensor<T>>>) -> Result<NodeId> {
        self.param_shared(name, value.into(), true)
    }

    pub(crate) fn param_shared(&mut self, name: &str, value: Arc<Tensor<T>>, check: bool) -> Result<NodeId> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::param(format!("duplicate parameter `{name}`")));
        }
        let id = self.push_shared(Op::Param, value, check)?;
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose of rank-{} tensor", s.len())));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Op::Transpose(a), Tensor::new(vec![c, r], out)?)
    }

    fn broadcast_binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        what: &str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if !is_suffix(va.shape(), vb.shape()) {
            return Err(Error::shape(format!(
                "{what}: {:?} does not broadcast onto {:?}",
                vb.shape(),
                va.shape()
            )));
        }
        let db = vb.data();
        let mut out = Vec::with_capacity(va.numel());
        if !db.is_empty() {
            for row in va.data().chunks_exact(db.len()) {
                out.extend(row.iter().zip(db).map(|(&x, &y)| f(x, y)));
            }
        }
        Tensor::new(va.shape().to_vec(), out)
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a` (bias).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), v)
    }

    /// Elementwise product; `b` may broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.check(a)?;
        let st = T::from_f64(s);
        let v = self.value(a);
        let out = v.data().iter().map(|&x| x * st).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(Op::Scale(a, s), t)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let t = (*self.nodes[a.0].value).clone().reshaped(shape)?;
        self.push(Op::Reshape(a), t)
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        for &i in inputs {
            self.check(i)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} on {base:?}")));
        }
        let mut total = 0;
        for &i in inputs {
            let s = self.shape(i);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape(format!("concat {s:?} with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in inputs {
                let v = self.value(i);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            t,
        )
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.check(a)?;
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(format!(
                "slice [{start}, {}) on axis {axis} of {s:?}",
                start + len
            )));
        }
        let (outer, alen, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(shape, out)?;
        self.push(Op::Slice { input: a, axis, start }, t)
    }

    /// Select rows (axis 0) by index; indices may repeat.
    pub fn gather(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.check(a)?;
        let s = self.shape(a).to_vec();
        if s.is_empty() {
            return Err(Error::shape("gather on rank-0 tensor"));
        }
        let row: usize = s[1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= s[0] {
                return Err(Error::shape(format!("gather index {i} out of {}", s[0])));
            }
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let t = Tensor::new(shape, out)?;
        self.push(
            Op::Gather {
                input: a,
                indices: indices.to_vec(),
            },
            t,
        )
    }

    /// Softmax over the last axis, computed after subtracting the row max.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a);
        let width = *v.shape().last().ok_or_else(|| Error::shape("softmax of scalar"))?;
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(width) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x = *x / sum;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(Op::Softmax(a), t)
    }

    /// Normalize the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a);
        let width = *v.shape().last().ok_or_else(|| Error::shape("layer_norm of scalar"))?;
        let mut out = Vec::with_capacity(v.numel());
        let mut inv_std = Vec::with_capacity(v.numel() / width.max(1));
        for row in v.data().chunks(width) {
            let mean = row.iter().map(|x| x.as_f64()).sum::<f64>() / width as f64;
            let var = row
                .iter()
                .map(|x| (x.as_f64() - mean).powi(2))
                .sum::<f64>()
                / width as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|x| T::from_f64((x.as_f64() - mean) * is)));
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(Op::LayerNorm { input: a, inv_std }, t)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a);
        let out = v.data().iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(Op::Gelu(a), t)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a);
        let out = v.data().iter().map(|&x| x.max(T::zero())).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push(Op::Relu(a), t)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(Error::shape("mean of empty tensor"));
        }
        let s: T = v.data().iter().copied().sum();
        let m = s / T::from_f64(v.numel() as f64);
        self.push(Op::MeanAll(a), Tensor::scalar(m))
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check(a)?;
        let s = self.shape(a).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::shape(format!("mean over axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let inv = T::from_f64(1.0 / len as f64);
        out.iter_mut().for_each(|x| *x *= inv);
        let t = Tensor::new(reduced_shape(&s, axis), out)?;
        self.push(Op::MeanAxis { input: a, axis }, t)
    }

    /// Max over one axis, removing it. Ties route the gradient to the
    /// lowest index.
    pub fn max_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.check(a)?;
        let s = self.shape(a).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::shape(format!("max over axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut out = vec![T::neg_infinity(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    let x = src[base + i];
                    if x > out[o * inner + i] {
                        out[o * inner + i] = x;
                        argmax[o * inner + i] = l;
                    }
                }
            }
        }
        let t = Tensor::new(reduced_shape(&s, axis), out)?;
        self.push(
            Op::MaxAxis {
                input: a,
                axis,
                argmax,
            },
            t,
        )
    }

    /// Mean softmax cross-entropy of `logits (N x C)` against class labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check(logits)?;
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(Error::shape(format!(
                "cross_entropy logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::shape(format!("label {bad} out of {c} classes")));
        }
        let mut probs = Vec::with_capacity(labels.len() * c);
        let mut loss = 0.0;
        for (row, &label) in self.value(logits).data().chunks(c).zip(labels) {
            let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[label].as_f64();
            probs.extend(row.iter().map(|x| (x.as_f64() - lse).exp()));
        }
        let value = Tensor::scalar(T::from_f64(loss / labels.len() as f64));
        self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
        )
    }

    /// Mean squared-distance Chamfer distance between matching point sets.
    ///
    /// Accepts `(A x 3, B x 3)` for a single pair or `(P x A x 3, P x B x 3)`
    /// for a batch of `P` pairs, in which case the per-pair distances are
    /// averaged. Nearest-neighbour ties resolve to the lowest index.
    pub fn chamfer(&mut self, pred: NodeId, truth: NodeId) -> Result<NodeId> {
        self.check(pred)?;
        self.check(truth)?;
        let (p, a, b) = chamfer_dims(self.shape(pred), self.shape(truth))?;
        let (vp, vt) = (self.value(pred).data(), self.value(truth).data());
        let mut nn_pred = vec![0usize; p * a];
        let mut nn_truth = vec![0usize; p * b];
        let mut total = 0.0;
        for k in 0..p {
            let pa = &vp[k * a * 3..(k + 1) * a * 3];
            let tb = &vt[k * b * 3..(k + 1) * b * 3];
            let (fwd, nn_ab) = nearest_sum(pa, tb);
            let (bwd, nn_ba) = nearest_sum(tb, pa);
            nn_pred[k * a..(k + 1) * a].copy_from_slice(&nn_ab);
            nn_truth[k * b..(k + 1) * b].copy_from_slice(&nn_ba);
            total += fwd / a as f64 + bwd / b as f64;
        }
        let value = Tensor::scalar(T::from_f64(total / p as f64));
        self.push(
            Op::Chamfer {
                pred,
                truth,
                nn_pred,
                nn_truth,
            },
            value,
        )
    }

    /// Multi-head scaled dot-product attention over token rows.
    ///
    /// `q`, `k`, `v` are `T x c`; the feature axis is split into `heads`
    /// contiguous groups and the per-head outputs are concatenated.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let c = *self.shape(q).last().ok_or_else(|| Error::shape("attention of scalar"))?;
        if heads == 0 || c % heads != 0 {
            return Err(Error::shape(format!("{heads} heads over width {c}")));
        }
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.slice(q, 1, h * d, d)?;
            let kh = self.slice(k, 1, h * d, d)?;
            let vh = self.slice(v, 1, h * d, d)?;
            let kt = self.transpose(kh)?;
            let scores = self.matmul(qh, kt)?;
            let scores = self.scale(scores, scale)?;
            let weights = self.softmax(scores)?;
            outs.push(self.matmul(weights, vh)?);
        }
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        self.concat(&outs, 1)
    }

    /// Drop cached forward values. A later [`Graph::backward`] is a state
    /// error.
    pub fn release(&mut self) {
        let empty = Arc::new(Tensor::zeros(&[0]));
        for node in &mut self.nodes {
            node.value = empty.clone();
        }
        self.released = true;
    }

    /// Reverse pass from a scalar node. Parameters with no path to `loss`
    /// receive zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.released {
            return Err(Error::State(
                "backward requires cached forward values; they were released".into(),
            ));
        }
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::State(format!(
                "backward from non-scalar node of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut param_grads: BTreeMap<usize, Vec<T>> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Param) {
                param_grads.insert(idx, g);
            }
        }

        let grads = self
            .params
            .iter()
            .map(|(name, id)| {
                let shape = self.shape(*id).to_vec();
                let t = match param_grads.remove(&id.0) {
                    Some(g) => Tensor::new(shape, g).expect("gradient matches parameter shape"),
                    None => Tensor::zeros(&shape),
                };
                (name.clone(), t)
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], id: NodeId) -> &'g mut Vec<T> {
        grads[id.0].get_or_insert_with(|| vec![T::zero(); self.nodes[id.0].value.numel()])
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    T::gemm(m, n, k, g, false, bv, true, T::one(), self.slot(grads, *a));
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    T::gemm(k, m, n, av, true, g, false, T::one(), self.slot(grads, *b));
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let s = self.shape(*a);
                    let (r, c) = (s[0], s[1]);
                    let ga = self.slot(grads, *a);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    let ga = self.slot(grads, *a);
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if self.wants(*b) {
                    let gb = self.slot(grads, *b);
                    for row in g.chunks_exact(gb.len()) {
                        for (x, &y) in gb.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let bl = vb.len();
                if self.wants(*a) {
                    let ga = self.slot(grads, *a);
                    for (gar, gr) in ga.chunks_exact_mut(bl).zip(g.chunks_exact(bl)) {
                        for ((x, &y), &w) in gar.iter_mut().zip(gr).zip(vb) {
                            *x += y * w;
                        }
                    }
                }
                if self.wants(*b) {
                    let gb = self.slot(grads, *b);
                    for (gr, ar) in g.chunks_exact(bl).zip(va.chunks_exact(bl)) {
                        for ((x, &y), &w) in gb.iter_mut().zip(gr).zip(ar) {
                            *x += y * w;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    let st = T::from_f64(*s);
                    let ga = self.slot(grads, *a);
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += st * y;
                    }
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    let ga = self.slot(grads, *a);
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &i in inputs {
                    let len = self.shape(i)[*axis];
                    if self.wants(i) {
                        let gi = self.slot(grads, i);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for (x, &y) in gi[dst..dst + len * inner]
                                .iter_mut()
                                .zip(&g[src..src + len * inner])
                            {
                                *x += y;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                if self.wants(*input) {
                    let (outer, alen, inner) = split_axis(self.shape(*input), *axis);
                    let len = node.value.shape()[*axis];
                    let gi = self.slot(grads, *input);
                    for o in 0..outer {
                        let dst = (o * alen + start) * inner;
                        let src = o * len * inner;
                        for (x, &y) in gi[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                        {
                            *x += y;
                        }
                    }
                }
            }
            Op::Gather { input, indices } => {
                if self.wants(*input) {
                    let row = self.shape(*input)[1..].iter().product::<usize>();
                    let gi = self.slot(grads, *input);
                    for (r, &i) in indices.iter().enumerate() {
                        for (x, &y) in gi[i * row..(i + 1) * row]
                            .iter_mut()
                            .zip(&g[r * row..(r + 1) * row])
                        {
                            *x += y;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let y = node.value.data();
                    let width = *node.value.shape().last().unwrap();
                    let ga = self.slot(grads, *a);
                    for ((gr, yr), gar) in g
                        .chunks(width)
                        .zip(y.chunks(width))
                        .zip(ga.chunks_mut(width))
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&u, &v)| u * v).sum();
                        for ((x, &u), &v) in gar.iter_mut().zip(gr).zip(yr) {
                            *x += v * (u - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { input, inv_std } => {
                if self.wants(*input) {
                    let xhat = node.value.data();
                    let width = *node.value.shape().last().unwrap();
                    let w = T::from_f64(width as f64);
                    let ga = self.slot(grads, *input);
                    for (((gr, xr), gar), &is) in g
                        .chunks(width)
                        .zip(xhat.chunks(width))
                        .zip(ga.chunks_mut(width))
                        .zip(inv_std)
                    {
                        let mean_g: T = gr.iter().copied().sum::<T>() / w;
                        let mean_gx: T = gr.iter().zip(xr).map(|(&u, &v)| u * v).sum::<T>() / w;
                        let is = T::from_f64(is);
                        for ((x, &u), &v) in gar.iter_mut().zip(gr).zip(xr) {
                            *x += is * (u - mean_g - v * mean_gx);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let xs = self.value(*a).data();
                    let ga = self.slot(grads, *a);
                    for ((x, &u), &v) in ga.iter_mut().zip(g).zip(xs) {
                        *x += u * gelu_grad(v);
                    }
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let xs = self.value(*a).data();
                    let ga = self.slot(grads, *a);
                    for ((x, &u), &v) in ga.iter_mut().zip(g).zip(xs) {
                        if v > T::zero() {
                            *x += u;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if self.wants(*a) {
                    let ga = self.slot(grads, *a);
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::MeanAll(a) => {
                if self.wants(*a) {
                    let ga = self.slot(grads, *a);
                    let d = g[0] / T::from_f64(ga.len() as f64);
                    ga.iter_mut().for_each(|x| *x += d);
                }
            }
            Op::MeanAxis { input, axis } => {
                if self.wants(*input) {
                    let (outer, len, inner) = split_axis(self.shape(*input), *axis);
                    let inv = T::from_f64(1.0 / len as f64);
                    let gi = self.slot(grads, *input);
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                gi[base + i] += g[o * inner + i] * inv;
                            }
                        }
                    }
                }
            }
            Op::MaxAxis {
                input,
                axis,
                argmax,
            } => {
                if self.wants(*input) {
                    let (_, len, inner) = split_axis(self.shape(*input), *axis);
                    let gi = self.slot(grads, *input);
                    for (j, (&u, &l)) in g.iter().zip(argmax).enumerate() {
                        let (o, i) = (j / inner, j % inner);
                        gi[(o * len + l) * inner + i] += u;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.wants(*logits) {
                    let c = self.shape(*logits)[1];
                    let scale = g[0].as_f64() / labels.len() as f64;
                    let gl = self.slot(grads, *logits);
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gl[r * c + j] += T::from_f64(scale * (probs[r * c + j] - onehot));
                        }
                    }
                }
            }
            Op::Chamfer {
                pred,
                truth,
                nn_pred,
                nn_truth,
            } => {
                let (p, a, b) = chamfer_dims(self.shape(*pred), self.shape(*truth))
                    .expect("validated in forward");
                let (vp, vt) = (self.value(*pred).data(), self.value(*truth).data());
                let up = g[0].as_f64() / p as f64;
                // d/dx of |x - y|^2 averaged over the source set
                let mut dp = vec![0.0f64; p * a * 3];
                let mut dt = vec![0.0f64; p * b * 3];
                for k in 0..p {
                    let ca = up * 2.0 / a as f64;
                    for i in 0..a {
                        let pi = k * a + i;
                        let tj = k * b + nn_pred[pi];
                        for d in 0..3 {
                            let diff = vp[pi * 3 + d].as_f64() - vt[tj * 3 + d].as_f64();
                            dp[pi * 3 + d] += ca * diff;
                            dt[tj * 3 + d] -= ca * diff;
                        }
                    }
                    let cb = up * 2.0 / b as f64;
                    for j in 0..b {
                        let tj = k * b + j;
                        let pi = k * a + nn_truth[tj];
                        for d in 0..3 {
                            let diff = vt[tj * 3 + d].as_f64() - vp[pi * 3 + d].as_f64();
                            dt[tj * 3 + d] += cb * diff;
                            dp[pi * 3 + d] -= cb * diff;
                        }
                    }
                }
                if self.wants(*pred) {
                    let gp = self.slot(grads, *pred);
                    for (x, &y) in gp.iter_mut().zip(&dp) {
                        *x += T::from_f64(y);
                    }
                }
                if self.wants(*truth) {
                    let gt = self.slot(grads, *truth);
                    for (x, &y) in gt.iter_mut().zip(&dt) {
                        *x += T::from_f64(y);
                    }
                }
            }
        }
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(d, _)| d != axis)
        .map(|(_, &x)| x)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn chamfer_dims(sp: &[usize], st: &[usize]) -> Result<(usize, usize, usize)> {
    match (sp, st) {
        ([a, 3], [b, 3]) if *a > 0 && *b > 0 => Ok((1, *a, *b)),
        ([p, a, 3], [q, b, 3]) if p == q && *p > 0 && *a > 0 && *b > 0 => Ok((*p, *a, *b)),
        _ => Err(Error::shape(format!("chamfer between {sp:?} and {st:?}"))),
    }
}

/// For each point of `from`, the squared distance to and index of its
/// nearest point in `to`. Returns the distance sum.
fn nearest_sum<T: Real>(from: &[T], to: &[T]) -> (f64, Vec<usize>) {
    let mut total = 0.0;
    let mut nn = Vec::with_capacity(from.len() / 3);
    for p in from.chunks_exact(3) {
        let mut best = f64::INFINITY;
        let mut best_j = 0;
        for (j, q) in to.chunks_exact(3).enumerate() {
            let d: f64 = (0..3).map(|k| (p[k].as_f64() - q[k].as_f64()).powi(2)).sum();
            if d < best {
                best = d;
                best_j = j;
            }
        }
        total += best;
        nn.push(best_j);
    }
    (total, nn)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let (half, one) = (T::from_f64(0.5), T::one());
    let (k, c) = (T::from_f64(SQRT_2_OVER_PI), T::from_f64(GELU_C));
    half * x * (one + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (half, one) = (T::from_f64(0.5), T::one());
    let (k, c) = (T::from_f64(SQRT_2_OVER_PI), T::from_f64(GELU_C));
    let t = (k * (x + c * x * x * x)).tanh();
    half * (one + t) + half * x * (one - t * t) * k * (one + T::from_f64(3.0) * c * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[3], &[0.0, 0.0, 0.0])).unwrap();
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 4], &[3.0, 3.0, 3.0, 3.0, -1.0, -1.0, -1.0, -1.0])).unwrap();
        let y = g.layer_norm(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_by_identity() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let i = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let p = g.param("p", t(&[3], &[0.5, -2.0, 7.0])).unwrap();
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut g = Graph::<f64>::new();
        let p = g.param("p", t(&[2], &[1.0, 2.0])).unwrap();
        let sq = g.mul(p, p).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreached_parameter_gets_zeros() {
        let mut g = Graph::<f64>::new();
        let p = g.param("p", t(&[2], &[1.0, 2.0])).unwrap();
        g.param("q", t(&[2, 2], &[1.0; 4])).unwrap();
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("q").unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn backward_after_release_is_state_error() {
        let mut g = Graph::<f64>::new();
        let p = g.param("p", t(&[2], &[1.0, 2.0])).unwrap();
        let l = g.sum(p).unwrap();
        g.release();
        assert!(matches!(g.backward(l), Err(Error::State(_))));
    }

    #[test]
    fn backward_from_foreign_node_is_state_error() {
        let g = Graph::<f64>::new();
        assert!(matches!(g.backward(NodeId(3)), Err(Error::State(_))));
    }

    #[test]
    fn backward_from_vector_is_state_error() {
        let mut g = Graph::<f64>::new();
        let p = g.param("p", t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(p), Err(Error::State(_))));
    }

    #[test]
    fn duplicate_param_rejected() {
        let mut g = Graph::<f64>::new();
        g.param("p", t(&[1], &[1.0])).unwrap();
        assert!(g.param("p", t(&[1], &[1.0])).is_err());
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2, 3], &[0.0; 6])).unwrap();
        let b = g.input(t(&[2, 3], &[0.0; 6])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
        let c = g.input(t(&[2], &[0.0; 2])).unwrap();
        assert!(matches!(g.add(a, c), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_reports_node() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[1], &[1e300])).unwrap();
        let err = g.mul(a, a).unwrap_err();
        assert!(matches!(err, Error::Numeric { node: 1, op: "mul" }));
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut g = Graph::<f64>::new();
        let q = g.input(t(&[3, 4], &[0.1, 0.2, -0.3, 0.4, 1.0, 0.0, 0.5, -0.5, 0.0, 0.3, 0.3, 0.3])).unwrap();
        let v = g.input(t(&[3, 4], &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0])).unwrap();
        let y = g.attention(q, q, v, 2).unwrap();
        for row in g.value(y).data().chunks(4) {
            for (a, b) in row.iter().zip([1.0, 1.0, 2.0, 2.0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chamfer_single_points() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[1, 3], &[0.0, 0.0, 0.0])).unwrap();
        let b = g.input(t(&[1, 3], &[1.0, 0.0, 0.0])).unwrap();
        let d = g.chamfer(a, b).unwrap();
        assert_eq!(g.value(d).item(), 2.0);
    }

    #[test]
    fn max_axis_tie_routes_to_first() {
        let mut g = Graph::<f64>::new();
        let p = g.param("p", t(&[2, 2], &[1.0, 0.0, 1.0, 0.0])).unwrap();
        let m = g.max_axis(p, 0).unwrap();
        let l = g.sum(m).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
    }
}
