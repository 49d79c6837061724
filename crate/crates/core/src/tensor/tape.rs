//! Recorded computation with reverse-mode differentiation.
//!
//! Every op on a [`Var`] evaluates eagerly and appends a node to its
//! [`Tape`]. [`Tape::backward`] walks the nodes once in reverse creation
//! order, which is a valid topological order because inputs always precede
//! their consumers.

use std::cell::RefCell;
use std::sync::Arc;

use super::array::{matmul_nt_into, matmul_tn_into};
use super::param::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf { param: Option<ParamId> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { input: usize, axis: usize, start: usize },
    IndexSelect { input: usize, indices: Vec<usize> },
    SumAxis { input: usize, axis: usize },
    SumAll(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Gelu(usize),
    LayerNorm { input: usize, rstd: Vec<f64> },
    Softmax(usize),
    MaskedSoftmax(usize),
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Tensor },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var<'_>> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite(format!("op output {:?}", value.shape())));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Arc::new(value), op: Op::Leaf { param: None }, requires_grad: false });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// A free leaf that receives a gradient (useful for input sensitivities).
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Arc::new(value), op: Op::Leaf { param: None }, requires_grad: true });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: store.shared(id),
            op: Op::Leaf { param: Some(id) },
            requires_grad: true,
        });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                grads[id] = Some(g);
                continue;
            }
            propagate(&nodes, id, &g, &mut grads)?;
            // interior gradients are not retained
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(p) } => Some((i, p)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Result of a reverse pass: gradients of leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Per-parameter gradients, zero where the loss does not reach.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value().shape())).collect();
        for &(node, pid) in &self.params {
            if let Some(g) = &self.grads[node] {
                out[pid.index()].add_assign(g).expect("parameter gradient shape");
            }
        }
        out
    }

    /// Adds parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(node, pid) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.accumulate_grad(pid, g).expect("parameter gradient shape");
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g).expect("gradient shape"),
        slot => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let req = |i: usize| nodes[i].requires_grad;
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf { .. } => {}
        Op::Add(a, b) => {
            if req(*a) {
                accumulate(grads, *a, reduce_to(g, val(*a).shape()));
            }
            if req(*b) {
                accumulate(grads, *b, reduce_to(g, val(*b).shape()));
            }
        }
        Op::Sub(a, b) => {
            if req(*a) {
                accumulate(grads, *a, reduce_to(g, val(*a).shape()));
            }
            if req(*b) {
                accumulate(grads, *b, reduce_to(&g.map(|x| -x), val(*b).shape()));
            }
        }
        Op::Mul(a, b) => {
            if req(*a) {
                let ga = broadcast_zip(g, val(*b), |x, y| x * y)?;
                accumulate(grads, *a, reduce_to(&ga, val(*a).shape()));
            }
            if req(*b) {
                let gb = broadcast_zip(g, val(*a), |x, y| x * y)?;
                accumulate(grads, *b, reduce_to(&gb, val(*b).shape()));
            }
        }
        Op::Div(a, b) => {
            if req(*a) {
                let ga = broadcast_zip(g, val(*b), |x, y| x / y)?;
                accumulate(grads, *a, reduce_to(&ga, val(*a).shape()));
            }
            if req(*b) {
                // d(a/b)/db = -out / b
                let t = broadcast_zip(out, val(*b), |o, y| -o / y)?;
                let gb = t.zip_map(g, |x, y| x * y)?;
                accumulate(grads, *b, reduce_to(&gb, val(*b).shape()));
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2()?;
            let (_, n) = val(*b).dims2()?;
            if req(*a) {
                let mut ga = vec![0.0; m * k];
                matmul_nt_into(g.data(), val(*b).data(), &mut ga, m, n, k);
                accumulate(grads, *a, Tensor::new(vec![m, k], ga)?);
            }
            if req(*b) {
                let mut gb = vec![0.0; k * n];
                matmul_tn_into(val(*a).data(), g.data(), &mut gb, m, k, n);
                accumulate(grads, *b, Tensor::new(vec![k, n], gb)?);
            }
        }
        Op::Transpose(a) => {
            if req(*a) {
                accumulate(grads, *a, g.transpose2()?);
            }
        }
        Op::Reshape(a) => {
            if req(*a) {
                accumulate(grads, *a, g.reshape(val(*a).shape())?);
            }
        }
        Op::Concat { inputs, axis } => {
            let mut offset = 0;
            for &i in inputs {
                let len = val(i).shape()[*axis];
                if req(i) {
                    accumulate(grads, i, narrow_tensor(g, *axis, offset, len));
                }
                offset += len;
            }
        }
        Op::Narrow { input, axis, start } => {
            if req(*input) {
                let shape = val(*input).shape();
                let (outer, dim, inner) = split_axis(shape, *axis);
                let len = g.shape()[*axis];
                let mut full = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    let dst = o * dim * inner + start * inner;
                    full[dst..dst + len * inner].copy_from_slice(src);
                }
                accumulate(grads, *input, Tensor::new(shape.to_vec(), full)?);
            }
        }
        Op::IndexSelect { input, indices } => {
            if req(*input) {
                let shape = val(*input).shape();
                let row: usize = shape[1..].iter().product();
                let mut full = vec![0.0; shape.iter().product()];
                for (k, &r) in indices.iter().enumerate() {
                    for (d, s) in full[r * row..(r + 1) * row].iter_mut().zip(&g.data()[k * row..(k + 1) * row]) {
                        *d += s;
                    }
                }
                accumulate(grads, *input, Tensor::new(shape.to_vec(), full)?);
            }
        }
        Op::SumAxis { input, axis } => {
            if req(*input) {
                let shape = val(*input).shape();
                let (outer, dim, inner) = split_axis(shape, *axis);
                let mut full = vec![0.0; shape.iter().product()];
                for o in 0..outer {
                    for d in 0..dim {
                        let dst = &mut full[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                        dst.copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(grads, *input, Tensor::new(shape.to_vec(), full)?);
            }
        }
        Op::SumAll(a) => {
            if req(*a) {
                accumulate(grads, *a, Tensor::full(val(*a).shape(), g.data()[0]));
            }
        }
        Op::Scale(a, c) => {
            if req(*a) {
                accumulate(grads, *a, g.map(|x| x * c));
            }
        }
        Op::AddScalar(a) => {
            if req(*a) {
                accumulate(grads, *a, g.clone());
            }
        }
        Op::Exp(a) => {
            if req(*a) {
                accumulate(grads, *a, g.zip_map(out, |x, y| x * y)?);
            }
        }
        Op::Log(a) => {
            if req(*a) {
                accumulate(grads, *a, g.zip_map(val(*a), |x, y| x / y)?);
            }
        }
        Op::Gelu(a) => {
            if req(*a) {
                accumulate(grads, *a, g.zip_map(val(*a), |x, y| x * gelu_grad(y))?);
            }
        }
        Op::LayerNorm { input, rstd } => {
            if req(*input) {
                let c = *out.shape().last().expect("layer norm has a last axis");
                let mut dx = vec![0.0; out.len()];
                for (r, &s) in rstd.iter().enumerate() {
                    let y = &out.data()[r * c..(r + 1) * c];
                    let dy = &g.data()[r * c..(r + 1) * c];
                    let mean_dy = dy.iter().sum::<f64>() / c as f64;
                    let mean_dyy = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for k in 0..c {
                        dx[r * c + k] = s * (dy[k] - mean_dy - y[k] * mean_dyy);
                    }
                }
                accumulate(grads, *input, Tensor::new(out.shape().to_vec(), dx)?);
            }
        }
        Op::Softmax(a) | Op::MaskedSoftmax(a) => {
            if req(*a) {
                let c = *out.shape().last().expect("softmax has a last axis");
                let mut dx = vec![0.0; out.len()];
                for r in 0..out.len() / c.max(1) {
                    let y = &out.data()[r * c..(r + 1) * c];
                    let dy = &g.data()[r * c..(r + 1) * c];
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        dx[r * c + k] = y[k] * (dy[k] - dot);
                    }
                }
                accumulate(grads, *a, Tensor::new(out.shape().to_vec(), dx)?);
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            if req(*logits) {
                let (r, c) = probs.dims2()?;
                let scale = g.data()[0] / r as f64;
                let mut dx = probs.data().to_vec();
                for (row, &t) in targets.iter().enumerate() {
                    dx[row * c + t] -= 1.0;
                }
                dx.iter_mut().for_each(|x| *x *= scale);
                accumulate(grads, *logits, Tensor::new(vec![r, c], dx)?);
            }
        }
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(self, value: Tensor, op: Op) -> Result<Var<'t>> {
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Result<Var<'t>> {
        let rg = self.tape.requires(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = broadcast_zip(&self.value(), &other.value(), |a, b| a + b)?;
        self.binary(other, v, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = broadcast_zip(&self.value(), &other.value(), |a, b| a - b)?;
        self.binary(other, v, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = broadcast_zip(&self.value(), &other.value(), |a, b| a * b)?;
        self.binary(other, v, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = broadcast_zip(&self.value(), &other.value(), |a, b| a / b)?;
        self.binary(other, v, Op::Div(self.id, other.id))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        self.binary(other, v, Op::MatMul(self.id, other.id))
    }

    /// `self @ w + b` for a 2-D input and 1-D bias.
    pub fn linear(self, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
        let y = self.matmul(w)?;
        match b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value().transpose2()?;
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        self.unary(v, Op::Reshape(self.id))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let tape = first.tape;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} on shape {base:?}")));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape(format!("concat {base:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        tape.push(Tensor::new(shape, data)?, Op::Concat { inputs: ids, axis }, rg)
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.ndim() || start + len > v.shape()[axis] {
            return Err(Error::shape(format!(
                "narrow axis {axis} [{start}, {}) of {:?}",
                start + len,
                v.shape()
            )));
        }
        let out = narrow_tensor(&v, axis, start, len);
        self.unary(out, Op::Narrow { input: self.id, axis, start })
    }

    /// Gathers rows (first-axis slices) by index.
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let rows = *v.shape().first().ok_or_else(|| Error::shape("index_select on a scalar"))?;
        let row: usize = v.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &r in indices {
            if r >= rows {
                return Err(Error::shape(format!("row {r} out of {rows}")));
            }
            data.extend_from_slice(&v.data()[r * row..(r + 1) * row]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = indices.len();
        self.unary(Tensor::new(shape, data)?, Op::IndexSelect { input: self.id, indices: indices.to_vec() })
    }

    /// Sums out `axis` (the axis is removed).
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.ndim() {
            return Err(Error::shape(format!("sum axis {axis} of {:?}", v.shape())));
        }
        let (outer, dim, inner) = split_axis(v.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &v.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (a, b) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *a += b;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        self.unary(Tensor::new(shape, data)?, Op::SumAxis { input: self.id, axis })
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let dim = self.shape().get(axis).copied().unwrap_or(0);
        if dim == 0 {
            return Err(Error::shape(format!("mean over empty or missing axis {axis}")));
        }
        self.sum_axis(axis)?.scale(1.0 / dim as f64)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::SumAll(self.id))
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Result<Var<'t>> {
        let v = self.value().map(f64::ln);
        self.unary(v, Op::Log(self.id))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(self) -> Result<Var<'t>> {
        let v = self.value().map(gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    /// Normalizes over the last axis (no affine).
    pub fn layer_norm(self) -> Result<Var<'t>> {
        let v = self.value();
        let c = *v.shape().last().ok_or_else(|| Error::shape("layer norm of a scalar"))?;
        if c == 0 {
            return Err(Error::shape("layer norm over an empty axis"));
        }
        let rows = v.len() / c;
        let mut data = vec![0.0; v.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &v.data()[r * c..(r + 1) * c];
            let mean = x.iter().sum::<f64>() / c as f64;
            let var = x.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            for k in 0..c {
                data[r * c + k] = (x[k] - mean) * s;
            }
            rstd.push(s);
        }
        self.unary(Tensor::new(v.shape().to_vec(), data)?, Op::LayerNorm { input: self.id, rstd })
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let v = self.value();
        let out = softmax_rows(&v, None)?;
        self.unary(out, Op::Softmax(self.id))
    }

    /// Softmax over the last axis restricted to entries where `mask` is true;
    /// masked entries come out exactly zero.
    pub fn masked_softmax(self, mask: &[bool]) -> Result<Var<'t>> {
        let v = self.value();
        if mask.len() != v.len() {
            return Err(Error::shape(format!(
                "mask has {} entries for shape {:?}",
                mask.len(),
                v.shape()
            )));
        }
        let out = softmax_rows(&v, Some(mask))?;
        self.unary(out, Op::MaskedSoftmax(self.id))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let (r, c) = v.dims2()?;
        if targets.len() != r || r == 0 {
            return Err(Error::shape(format!("{} targets for {r} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape(format!("target class {t} out of {c}")));
        }
        let probs = softmax_rows(&v, None)?;
        let loss = targets
            .iter()
            .enumerate()
            .map(|(row, &t)| log_softmax_at(v.row(row), t))
            .sum::<f64>()
            / -(r as f64);
        self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: self.id, targets: targets.to_vec(), probs },
        )
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn log_softmax_at(row: &[f64], k: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row[k] - lse
}

pub(crate) fn softmax_rows(v: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let c = *v.shape().last().ok_or_else(|| Error::shape("softmax of a scalar"))?;
    let mut out = vec![0.0; v.len()];
    if c == 0 {
        return Tensor::new(v.shape().to_vec(), out);
    }
    for r in 0..v.len() / c {
        let x = &v.data()[r * c..(r + 1) * c];
        let keep = |k: usize| mask.is_none_or(|m| m[r * c + k]);
        let max = (0..c).filter(|&k| keep(k)).map(|k| x[k]).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateMask { row: r });
        }
        let mut z = 0.0;
        for k in 0..c {
            if keep(k) {
                let e = (x[k] - max).exp();
                out[r * c + k] = e;
                z += e;
            }
        }
        for o in &mut out[r * c..(r + 1) * c] {
            *o /= z;
        }
    }
    Tensor::new(v.shape().to_vec(), out)
}

/// `(outer, dim, inner)` sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn narrow_tensor(v: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let (outer, dim, inner) = split_axis(v.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * dim * inner + start * inner;
        data.extend_from_slice(&v.data()[base..base + len * inner]);
    }
    let mut shape = v.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, data).expect("narrow shape")
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for k in 0..n {
        let da = if k + a.len() >= n { a[k + a.len() - n] } else { 1 };
        let db = if k + b.len() >= n { b[k + b.len() - n] } else { 1 };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// For each flat index of `out_shape`, the flat index into a tensor of
/// `in_shape` broadcast against it.
fn broadcast_index(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let off = n - in_shape.len();
    let mut strides = vec![0usize; n];
    let mut s = 1;
    for k in (0..in_shape.len()).rev() {
        if in_shape[k] != 1 {
            strides[k + off] = s;
        }
        s *= in_shape[k];
    }
    let total: usize = out_shape.iter().product();
    let mut idx = vec![0usize; n];
    let mut flat = 0usize;
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        out.push(flat);
        for k in (0..n).rev() {
            idx[k] += 1;
            flat += strides[k];
            if idx[k] < out_shape[k] {
                break;
            }
            flat -= strides[k] * idx[k];
            idx[k] = 0;
        }
    }
    out
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let ad = a.data();
    let bd = b.data();
    // Row-vector broadcast is the common case in the layers.
    if shape == a.shape() && b.ndim() == 1 && b.len() == *shape.last().unwrap_or(&0) && b.len() > 0 {
        let c = b.len();
        let data = ad.iter().enumerate().map(|(i, &x)| f(x, bd[i % c])).collect();
        return Tensor::new(shape, data);
    }
    let ia = broadcast_index(&shape, a.shape());
    let ib = broadcast_index(&shape, b.shape());
    let data = ia.iter().zip(&ib).map(|(&i, &j)| f(ad[i], bd[j])).collect();
    Tensor::new(shape, data)
}

fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let idx = broadcast_index(g.shape(), shape);
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for (&i, &x) in idx.iter().zip(g.data()) {
        od[i] += x;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcasting_shapes() {
        assert_eq!(broadcast_shape(&[3, 4], &[4]).unwrap(), vec![3, 4]);
        assert_eq!(broadcast_shape(&[3, 1], &[1, 4]).unwrap(), vec![3, 4]);
        assert!(broadcast_shape(&[3, 4], &[3]).is_err());
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let col = Tensor::matrix(2, 1, vec![10., 20.]).unwrap();
        let s = broadcast_zip(&a, &col, |x, y| x + y).unwrap();
        assert_eq!(s.data(), &[11., 12., 13., 24., 25., 26.]);
        assert_eq!(reduce_to(&s, &[2, 1]).data(), &[36., 75.]);
        assert_eq!(reduce_to(&s, &[3]).data(), &[35., 37., 39.]);
    }

    #[test]
    fn softmax_uniform() {
        let t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0; 3]));
        let y = x.softmax().unwrap().value();
        for &p in y.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_softmax_zeros_and_degenerate() {
        let t = Tape::new();
        let x = t.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let y = x.masked_softmax(&[true, false, true, false, true, false]).unwrap().value();
        assert_eq!(y.data()[1], 0.0);
        assert_eq!(y.data()[3], 0.0);
        assert_eq!(y.data()[4], 1.0);
        assert!((y.data()[0] + y.data()[2] - 1.0).abs() < 1e-12);
        assert!(matches!(
            x.masked_softmax(&[true, true, true, false, false, false]),
            Err(Error::DegenerateMask { row: 1 })
        ));
    }

    #[test]
    fn layer_norm_constant_is_zero() {
        let t = Tape::new();
        let x = t.constant(Tensor::vector(vec![3.5; 6]));
        assert!(x.layer_norm().unwrap().value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let t = Tape::new();
        let p = t.variable(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let loss = p.mul(p).unwrap().sum().unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(p).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn detached_gradient_is_absent() {
        let t = Tape::new();
        let p = t.variable(Tensor::vector(vec![1.0]));
        let q = t.variable(Tensor::vector(vec![2.0]));
        let loss = q.mul(q).unwrap().sum().unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.wrt(p).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tape::new();
        let p = t.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(p), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_classes() {
        let t = Tape::new();
        let x = t.constant(Tensor::zeros(&[4, 5]));
        let l = x.cross_entropy(&[0, 1, 2, 4]).unwrap().value().item().unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn shape_errors() {
        let t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(a.matmul(b), Err(Error::InvalidShape(_))));
        assert!(a.add(t.constant(Tensor::zeros(&[2]))).is_err());
        assert!(Var::concat(&[a, t.constant(Tensor::zeros(&[3, 3]))], 1).is_err());
    }
}
