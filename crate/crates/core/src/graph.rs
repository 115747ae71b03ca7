//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A [`Graph`] records every operation of one forward pass in insertion
//! order, which is already a topological order, so [`Graph::backward`] is a
//! single reverse sweep. Parameters are reference-counted leaves shared
//! between the model and the tape; their gradients accumulate additively
//! across every use inside one trace.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{matmul_data, matmul_nt_data, matmul_tn_data, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {a:?} vs {b:?}")]
    ShapeMismatch {
        op: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("{op}: bad operand shape {shape:?} ({why})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        why: String,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    OutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("gradcheck: function is non-deterministic ({a} vs {b})")]
    NonDeterministic { a: f64, b: f64 },
}

/// A learnable tensor plus its accumulated gradient.
#[derive(Clone)]
pub struct Parameter<T: Scalar>(Rc<RefCell<ParamInner<T>>>);

struct ParamInner<T: Scalar> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Parameter(Rc::new(RefCell::new(ParamInner {
            name: name.into(),
            value,
            grad,
        })))
    }

    pub fn name(&self) -> String {
        self.0.borrow().name.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Ref<'_, Tensor<T>> {
        Ref::map(self.0.borrow(), |p| &p.value)
    }

    pub fn grad(&self) -> Ref<'_, Tensor<T>> {
        Ref::map(self.0.borrow(), |p| &p.grad)
    }

    pub fn set_value(&self, t: Tensor<T>) {
        let mut inner = self.0.borrow_mut();
        assert_eq!(inner.value.shape(), t.shape(), "parameter shape is fixed");
        inner.value = t;
    }

    pub fn zero_grad(&self) {
        let mut inner = self.0.borrow_mut();
        inner.grad.data_mut().fill(T::zero());
    }

    /// Mutate the value with read access to the gradient (optimizer step).
    pub fn apply(&self, f: impl FnOnce(&mut Tensor<T>, &Tensor<T>)) {
        let inner = &mut *self.0.borrow_mut();
        f(&mut inner.value, &inner.grad);
    }

    /// Accumulate into the gradient directly, e.g. from a custom loss.
    pub fn add_grad(&self, delta: &[T]) {
        self.add_to_grad(0, delta);
    }

    fn add_to_grad(&self, offset: usize, delta: &[T]) {
        let mut inner = self.0.borrow_mut();
        for (g, &d) in inner.grad.data_mut()[offset..offset + delta.len()]
            .iter_mut()
            .zip(delta)
        {
            *g += d;
        }
    }

    /// Identity for caching; stable for the lifetime of the parameter.
    pub fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
    Silu,
}

impl Activation {
    /// Value and derivative in one pass; the transcendental is computed
    /// once and shared.
    fn eval_with_deriv<T: Scalar>(self, x: T) -> (T, T) {
        match self {
            Activation::Gelu => {
                let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
                let k = T::from_f64(0.044715);
                let three = T::from_f64(3.0);
                let half = T::from_f64(0.5);
                let u = c * (x + k * x * x * x);
                let t = u.tanh();
                let du = c * (T::one() + three * k * x * x);
                let y = half * x * (T::one() + t);
                let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
                (y, dy)
            }
            Activation::Relu => {
                if x > T::zero() {
                    (x, T::one())
                } else {
                    (T::zero(), T::zero())
                }
            }
            Activation::Silu => {
                let sig = T::one() / (T::one() + (-x).exp());
                (x * sig, sig * (T::one() + x * (T::one() - sig)))
            }
        }
    }
}

enum Op<T: Scalar> {
    Input,
    Param(Parameter<T>),
    Lookup { param: Parameter<T>, row: usize },
    Matmul(NodeId, NodeId),
    MatmulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows { src: NodeId, start: usize },
    MeanAxis { src: NodeId, axis: usize },
    PermuteRows { src: NodeId, perm: Vec<usize> },
    Softmax(NodeId),
    LayerNorm { src: NodeId, gain: NodeId, bias: NodeId, eps: T },
    Act { src: NodeId, deriv: Tensor<T> },
    Dropout { src: NodeId, mask: Tensor<T> },
    StackScalars(Vec<NodeId>),
    L1Loss { pred: NodeId, target: Tensor<T> },
    Reshape(NodeId),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// One forward trace. Parameter and lookup leaves are cached so repeated
/// uses inside a batch share a single node.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_cache: HashMap<usize, NodeId>,
    lookup_cache: HashMap<(usize, usize), NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_cache: HashMap::new(),
            lookup_cache: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
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

    pub fn input(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, p: &Parameter<T>) -> NodeId {
        if let Some(&id) = self.param_cache.get(&p.id()) {
            return id;
        }
        let id = self.push(p.value().clone(), Op::Param(p.clone()));
        self.param_cache.insert(p.id(), id);
        id
    }

    /// Embedding-table row fetch; gradient flows only into that row.
    pub fn lookup(&mut self, table: &Parameter<T>, row: usize) -> Result<NodeId, NumericsError> {
        let key = (table.id(), row);
        if let Some(&id) = self.lookup_cache.get(&key) {
            return Ok(id);
        }
        let value = {
            let t = table.value();
            let (rows, _) = t.dims2();
            if row >= rows {
                return Err(NumericsError::OutOfRange {
                    op: "lookup",
                    index: row,
                    bound: rows,
                });
            }
            Tensor::vector(t.row(row).to_vec())
        };
        let id = self.push(
            value,
            Op::Lookup {
                param: table.clone(),
                row,
            },
        );
        self.lookup_cache.insert(key, id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (m, ka) = self.value(a).dims2();
        let (kb, n) = self.value(b).dims2();
        if ka != kb {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                a: self.value(a).shape().to_vec(),
                b: self.value(b).shape().to_vec(),
            });
        }
        let data = matmul_data(self.value(a).data(), self.value(b).data(), m, ka, n);
        Ok(self.push(Tensor::matrix(m, n, data), Op::Matmul(a, b)))
    }

    /// a @ b^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (m, ka) = self.value(a).dims2();
        let (n, kb) = self.value(b).dims2();
        if ka != kb {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_nt",
                a: self.value(a).shape().to_vec(),
                b: self.value(b).shape().to_vec(),
            });
        }
        let data = matmul_nt_data(self.value(a).data(), self.value(b).data(), m, ka, n);
        Ok(self.push(Tensor::matrix(m, n, data), Op::MatmulNt(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                a: self.value(a).shape().to_vec(),
                b: self.value(b).shape().to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data), Op::Add(a, b)))
    }

    /// Broadcast-add a length-n row vector to every row of an m x n tensor.
    pub fn add_row(&mut self, mat: NodeId, row: NodeId) -> Result<NodeId, NumericsError> {
        let (m, n) = self.value(mat).dims2();
        if self.value(row).len() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                a: self.value(mat).shape().to_vec(),
                b: self.value(row).shape().to_vec(),
            });
        }
        let mut data = self.value(mat).data().to_vec();
        let r = self.value(row).data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += r[j];
            }
        }
        let shape = self.value(mat).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data), Op::AddRow(mat, row)))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    /// Stack parts as rows; a rank-1 part contributes a single row.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::BadShape {
                op: "concat_rows",
                shape: vec![],
                why: "no parts".into(),
            });
        }
        let (_, cols) = self.value(parts[0]).dims2();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if c != cols {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    a: vec![rows, cols],
                    b: self.value(p).shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            Tensor::matrix(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    /// Stack parts side by side; every part must have the same row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::BadShape {
                op: "concat_cols",
                shape: vec![],
                why: "no parts".into(),
            });
        }
        let (rows, _) = self.value(parts[0]).dims2();
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if r != rows {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    a: self.value(parts[0]).shape().to_vec(),
                    b: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
            total += c;
        }
        let mut data = vec![T::zero(); rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..rows {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(
            Tensor::matrix(rows, total, data),
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn slice_rows(
        &mut self,
        src: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, NumericsError> {
        let (rows, cols) = self.value(src).dims2();
        if start + len > rows || len == 0 {
            return Err(NumericsError::OutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: rows,
            });
        }
        let data = self.value(src).data()[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(Tensor::matrix(len, cols, data), Op::SliceRows { src, start }))
    }

    /// Mean over one axis, dropping it: [m,n] -> [n] (axis 0) or [m] (axis 1);
    /// a rank-1 input reduces over its elements to a scalar.
    pub fn mean_axis(&mut self, src: NodeId, axis: usize) -> Result<NodeId, NumericsError> {
        let (m, n) = self.value(src).dims2();
        if axis > 1 {
            return Err(NumericsError::BadShape {
                op: "mean_axis",
                shape: self.value(src).shape().to_vec(),
                why: format!("axis {axis} out of range"),
            });
        }
        // A rank-1 tensor is a single row under dims2; its one real axis is
        // the column axis.
        let axis = if self.value(src).shape().len() == 1 { 1 } else { axis };
        let data = self.value(src).data();
        let out = if axis == 0 {
            let inv = T::one() / T::from_f64(m as f64);
            let mut acc = vec![T::zero(); n];
            for i in 0..m {
                for j in 0..n {
                    acc[j] += data[i * n + j];
                }
            }
            for v in acc.iter_mut() {
                *v = *v * inv;
            }
            Tensor::vector(acc)
        } else {
            let inv = T::one() / T::from_f64(n as f64);
            let mut acc = vec![T::zero(); m];
            for i in 0..m {
                let mut s = T::zero();
                for j in 0..n {
                    s += data[i * n + j];
                }
                acc[i] = s * inv;
            }
            Tensor::vector(acc)
        };
        Ok(self.push(out, Op::MeanAxis { src, axis }))
    }

    pub fn permute_rows(&mut self, src: NodeId, perm: Vec<usize>) -> Result<NodeId, NumericsError> {
        let (rows, cols) = self.value(src).dims2();
        if perm.len() != rows {
            return Err(NumericsError::BadShape {
                op: "permute_rows",
                shape: self.value(src).shape().to_vec(),
                why: format!("permutation has length {}", perm.len()),
            });
        }
        let mut data = vec![T::zero(); rows * cols];
        let src_data = self.value(src).data();
        for (i, &p) in perm.iter().enumerate() {
            if p >= rows {
                return Err(NumericsError::OutOfRange {
                    op: "permute_rows",
                    index: p,
                    bound: rows,
                });
            }
            data[i * cols..(i + 1) * cols].copy_from_slice(&src_data[p * cols..(p + 1) * cols]);
        }
        Ok(self.push(
            Tensor::matrix(rows, cols, data),
            Op::PermuteRows { src, perm },
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, src: NodeId) -> NodeId {
        let (m, n) = self.value(src).dims2();
        let data = self.value(src).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &data[i * n..(i + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            softmax_row(row, orow);
        }
        let shape = self.value(src).shape().to_vec();
        self.push(Tensor::new(shape, out), Op::Softmax(src))
    }

    /// Row-wise layer normalization: per row, (x - mean) / sqrt(var + eps)
    /// scaled by gain and shifted by bias. Variance is the population variance.
    pub fn layer_norm(
        &mut self,
        src: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: T,
    ) -> Result<NodeId, NumericsError> {
        let (m, n) = self.value(src).dims2();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                a: self.value(src).shape().to_vec(),
                b: self.value(gain).shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        {
            let data = self.value(src).data();
            let g = self.value(gain).data();
            let b = self.value(bias).data();
            for i in 0..m {
                let row = &data[i * n..(i + 1) * n];
                let (mean, var) = mean_var(row);
                let inv = T::one() / (var + eps).sqrt();
                for j in 0..n {
                    out[i * n + j] = (row[j] - mean) * inv * g[j] + b[j];
                }
            }
        }
        let shape = self.value(src).shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out),
            Op::LayerNorm { src, gain, bias, eps },
        ))
    }

    pub fn activation(&mut self, src: NodeId, kind: Activation) -> NodeId {
        let n = self.value(src).len();
        let shape = self.value(src).shape().to_vec();
        let mut out = Vec::with_capacity(n);
        let mut deriv = Vec::with_capacity(n);
        for &x in self.value(src).data() {
            let (y, dy) = kind.eval_with_deriv(x);
            out.push(y);
            deriv.push(dy);
        }
        self.push(
            Tensor::new(shape.clone(), out),
            Op::Act {
                src,
                deriv: Tensor::new(shape, deriv),
            },
        )
    }

    /// Inverted dropout; a no-op is the caller's job when p == 0.
    pub fn dropout(&mut self, src: NodeId, p: T, rng: &mut ChaCha8Rng) -> NodeId {
        let keep = T::one() - p;
        let scale = T::one() / keep;
        let mask = self.value(src).map(|_| {
            if T::from_f64(rng.random::<f64>()) < p {
                T::zero()
            } else {
                scale
            }
        });
        let out = Tensor::new(
            self.value(src).shape().to_vec(),
            self.value(src)
                .data()
                .iter()
                .zip(mask.data())
                .map(|(&x, &m)| x * m)
                .collect(),
        );
        self.push(out, Op::Dropout { src, mask })
    }

    /// Collect scalar nodes into one vector.
    pub fn stack_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            if !self.value(p).is_scalar() {
                return Err(NumericsError::BadShape {
                    op: "stack_scalars",
                    shape: self.value(p).shape().to_vec(),
                    why: "part is not a scalar".into(),
                });
            }
            data.push(self.value(p).item());
        }
        Ok(self.push(Tensor::vector(data), Op::StackScalars(parts.to_vec())))
    }

    /// Mean absolute error against a constant target vector.
    pub fn l1_loss(&mut self, pred: NodeId, target: &Tensor<T>) -> Result<NodeId, NumericsError> {
        if self.value(pred).len() != target.len() || target.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "l1_loss",
                a: self.value(pred).shape().to_vec(),
                b: target.shape().to_vec(),
            });
        }
        let n = T::from_f64(target.len() as f64);
        let mut acc = T::zero();
        for (&p, &t) in self.value(pred).data().iter().zip(target.data()) {
            acc += (p - t).abs();
        }
        Ok(self.push(
            Tensor::scalar(acc / n),
            Op::L1Loss {
                pred,
                target: target.clone(),
            },
        ))
    }

    pub fn reshape(&mut self, src: NodeId, shape: Vec<usize>) -> Result<NodeId, NumericsError> {
        if shape.iter().product::<usize>() != self.value(src).len() {
            return Err(NumericsError::BadShape {
                op: "reshape",
                shape,
                why: format!("element count {} differs", self.value(src).len()),
            });
        }
        let out = Tensor::new(shape, self.value(src).data().to_vec());
        Ok(self.push(out, Op::Reshape(src)))
    }

    /// Reverse sweep from a scalar loss; gradients of all parameters on the
    /// trace are accumulated into the parameters themselves.
    pub fn backward(&self, loss: NodeId) -> Result<(), NumericsError> {
        if !self.value(loss).is_scalar() {
            return Err(NumericsError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![T::one()],
        ));

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => p.add_to_grad(0, g.data()),
                Op::Lookup { param, row } => {
                    let cols = g.len();
                    param.add_to_grad(row * cols, g.data());
                }
                Op::Matmul(a, b) => {
                    let (m, k) = self.value(*a).dims2();
                    let (_, n) = self.value(*b).dims2();
                    let da = matmul_nt_data(g.data(), self.value(*b).data(), m, n, k);
                    let db = matmul_tn_data(self.value(*a).data(), g.data(), k, m, n);
                    accumulate_owned(&mut grads, *a, da);
                    accumulate_owned(&mut grads, *b, db);
                }
                Op::MatmulNt(a, b) => {
                    let (m, k) = self.value(*a).dims2();
                    let (n, _) = self.value(*b).dims2();
                    let da = matmul_data(g.data(), self.value(*b).data(), m, n, k);
                    let db = matmul_tn_data(g.data(), self.value(*a).data(), n, m, k);
                    accumulate_owned(&mut grads, *a, da);
                    accumulate_owned(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.data());
                    accumulate(&mut grads, *b, g.data());
                }
                Op::AddRow(mat, row) => {
                    accumulate(&mut grads, *mat, g.data());
                    let (m, n) = node.value.dims2();
                    let mut dr = vec![T::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            dr[j] += g.data()[i * n + j];
                        }
                    }
                    accumulate_owned(&mut grads, *row, dr);
                }
                Op::Scale(a, c) => {
                    let da: Vec<T> = g.data().iter().map(|&x| x * *c).collect();
                    accumulate_owned(&mut grads, *a, da);
                }
                Op::ConcatRows(parts) => {
                    let (_, cols) = node.value.dims2();
                    let mut off = 0;
                    for &p in parts {
                        let (r, _) = self.value(p).dims2();
                        accumulate(&mut grads, p, &g.data()[off..off + r * cols]);
                        off += r * cols;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = node.value.dims2();
                    let mut off = 0;
                    for &p in parts {
                        let (_, w) = self.value(p).dims2();
                        let mut dp = vec![T::zero(); rows * w];
                        for i in 0..rows {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g.data()[i * total + off..i * total + off + w]);
                        }
                        accumulate_owned(&mut grads, p, dp);
                        off += w;
                    }
                }
                Op::SliceRows { src, start } => {
                    let (rows, cols) = self.value(*src).dims2();
                    let (glen, _) = node.value.dims2();
                    let mut ds = vec![T::zero(); rows * cols];
                    ds[start * cols..(start + glen) * cols].copy_from_slice(g.data());
                    accumulate_owned(&mut grads, *src, ds);
                }
                Op::MeanAxis { src, axis } => {
                    let (m, n) = self.value(*src).dims2();
                    let mut ds = vec![T::zero(); m * n];
                    if *axis == 0 {
                        let inv = T::one() / T::from_f64(m as f64);
                        for i in 0..m {
                            for j in 0..n {
                                ds[i * n + j] = g.data()[j] * inv;
                            }
                        }
                    } else {
                        let inv = T::one() / T::from_f64(n as f64);
                        for i in 0..m {
                            for j in 0..n {
                                ds[i * n + j] = g.data()[i] * inv;
                            }
                        }
                    }
                    accumulate_owned(&mut grads, *src, ds);
                }
                Op::PermuteRows { src, perm } => {
                    let (rows, cols) = self.value(*src).dims2();
                    let mut ds = vec![T::zero(); rows * cols];
                    for (i, &p) in perm.iter().enumerate() {
                        for j in 0..cols {
                            ds[p * cols + j] += g.data()[i * cols + j];
                        }
                    }
                    accumulate_owned(&mut grads, *src, ds);
                }
                Op::Softmax(src) => {
                    let (m, n) = node.value.dims2();
                    let y = node.value.data();
                    let mut ds = vec![T::zero(); m * n];
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g.data()[i * n..(i + 1) * n];
                        let mut inner = T::zero();
                        for j in 0..n {
                            inner += gr[j] * yr[j];
                        }
                        for j in 0..n {
                            ds[i * n + j] = yr[j] * (gr[j] - inner);
                        }
                    }
                    accumulate_owned(&mut grads, *src, ds);
                }
                Op::LayerNorm { src, gain, bias, eps } => {
                    let (m, n) = self.value(*src).dims2();
                    let x = self.value(*src).data();
                    let gn = self.value(*gain).data();
                    let mut ds = vec![T::zero(); m * n];
                    let mut dgain = vec![T::zero(); n];
                    let mut dbias = vec![T::zero(); n];
                    let inv_n = T::one() / T::from_f64(n as f64);
                    for i in 0..m {
                        let row = &x[i * n..(i + 1) * n];
                        let gr = &g.data()[i * n..(i + 1) * n];
                        let (mean, var) = mean_var(row);
                        let inv = T::one() / (var + *eps).sqrt();
                        // ghat = g * gain; dx = inv * (ghat - mean(ghat) - xhat * mean(ghat*xhat))
                        let mut mean_gh = T::zero();
                        let mut mean_ghx = T::zero();
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv;
                            let gh = gr[j] * gn[j];
                            mean_gh += gh;
                            mean_ghx += gh * xhat;
                            dgain[j] += gr[j] * xhat;
                            dbias[j] += gr[j];
                        }
                        mean_gh = mean_gh * inv_n;
                        mean_ghx = mean_ghx * inv_n;
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv;
                            let gh = gr[j] * gn[j];
                            ds[i * n + j] = inv * (gh - mean_gh - xhat * mean_ghx);
                        }
                    }
                    accumulate_owned(&mut grads, *src, ds);
                    accumulate_owned(&mut grads, *gain, dgain);
                    accumulate_owned(&mut grads, *bias, dbias);
                }
                Op::Act { src, deriv } => {
                    let ds: Vec<T> = deriv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&d, &gv)| gv * d)
                        .collect();
                    accumulate_owned(&mut grads, *src, ds);
                }
                Op::Dropout { src, mask } => {
                    let ds: Vec<T> = g
                        .data()
                        .iter()
                        .zip(mask.data())
                        .map(|(&gv, &m)| gv * m)
                        .collect();
                    accumulate_owned(&mut grads, *src, ds);
                }
                Op::StackScalars(parts) => {
                    for (i, &p) in parts.iter().enumerate() {
                        accumulate(&mut grads, p, &[g.data()[i]]);
                    }
                }
                Op::L1Loss { pred, target } => {
                    let n = T::from_f64(target.len() as f64);
                    let gv = g.item();
                    let dp: Vec<T> = self
                        .value(*pred)
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| gv * (p - t).signum0() / n)
                        .collect();
                    accumulate_owned(&mut grads, *pred, dp);
                }
                Op::Reshape(src) => {
                    accumulate(&mut grads, *src, g.data());
                }
            }
        }
        Ok(())
    }
}

// Shape bookkeeping is only needed at the node itself; gradients are
// accumulated flat.
fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, delta: &[T]) {
    match &mut grads[id.0] {
        Some(t) => {
            for (g, &d) in t.data_mut().iter_mut().zip(delta) {
                *g += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(vec![delta.len()], delta.to_vec()));
        }
    }
}

// Moves the buffer into an empty slot instead of copying it.
fn accumulate_owned<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Vec<T>) {
    match &mut grads[id.0] {
        Some(t) => {
            for (g, d) in t.data_mut().iter_mut().zip(delta) {
                *g += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(vec![delta.len()], delta));
        }
    }
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut max = row[0];
    for &x in row {
        max = max.max_val(x);
    }
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

fn mean_var<T: Scalar>(row: &[T]) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mut mean = T::zero();
    for &x in row {
        mean += x;
    }
    mean = mean / n;
    let mut var = T::zero();
    for &x in row {
        let d = x - mean;
        var += d * d;
    }
    (mean, var / n)
}
