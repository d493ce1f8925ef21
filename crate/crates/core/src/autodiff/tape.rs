//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value; [`Tape::backward`]
//! replays the nodes in reverse and accumulates vector-Jacobian products into
//! per-node gradient buffers. Parameter leaves borrow their storage from a
//! [`ParamSet`], which therefore stays immutable while the tape is alive.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::tensor::{numel, rows_cols};
use crate::{Error, ParamId, ParamSet, Result, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &str;

    /// Returns `(output shape, output data)`.
    fn forward(&self, inputs: &[(&[usize], &[T])]) -> Result<(Vec<usize>, Vec<T>)>;

    /// Returns one gradient buffer per input.
    fn backward(&self, inputs: &[(&[usize], &[T])], output: &[T], grad_out: &[T]) -> Vec<Vec<T>>;
}

/// The closed set of operation kinds accepted by [`Tape::forward_op`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Concat,
    Add,
    Mul,
    Tanh,
    Sigmoid,
    Relu,
    Softmax,
    /// Row lookup into the single input table.
    Embedding(Vec<usize>),
    /// Dot product along the last axis.
    Dot,
    /// Mean cross-entropy of logit rows against integer targets.
    CrossEntropy(Vec<usize>),
}

enum Op<T: Scalar> {
    Leaf,
    Param,
    MatMul { trans_b: bool },
    Concat,
    Add,
    AddRow,
    Sub,
    Mul,
    MulCol,
    MulScalar,
    Scale(T),
    Tanh,
    Sigmoid,
    Relu,
    Softmax,
    Gather(Rc<[usize]>),
    SegmentSum(Rc<[usize]>),
    SegmentSoftmax(Rc<[usize]>, usize),
    RowDot,
    Sum,
    Mean,
    CrossEntropy {
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    Custom(Rc<dyn CustomOp<T>>),
}

struct Node<'p, T: Scalar> {
    op: Op<T>,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    value: Cow<'p, [T]>,
    requires_grad: bool,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Ordered record of executed operations.
pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    params: HashMap<ParamId, Var>,
    kinks: u64,
}

impl<T: Scalar> fmt::Debug for Tape<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("params", &self.params.len())
            .finish()
    }
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut z = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    out
}

fn add_into<T: Scalar>(acc: &mut Option<Vec<T>>, g: &[T]) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        None => *acc = Some(g.to_vec()),
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            kinks: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op: Op<T>,
        inputs: Vec<usize>,
        shape: Vec<usize>,
        value: Cow<'p, [T]>,
    ) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = match op {
            Op::Leaf | Op::Param => false,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- leaves ------------------------------------------------------------

    /// Records an owned tensor; differentiable iff the tensor requires grad.
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        let trainable = tensor.is_trainable();
        let shape = tensor.shape().to_vec();
        let v = self.push(Op::Leaf, vec![], shape, Cow::Owned(tensor.into_data()));
        self.nodes[v.0].requires_grad = trainable;
        v
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.input(tensor.requires_grad(false))
    }

    /// Records a borrowed, non-differentiable constant without copying.
    pub fn borrowed(&mut self, tensor: &'p Tensor<T>) -> Var {
        self.push(
            Op::Leaf,
            vec![],
            tensor.shape().to_vec(),
            Cow::Borrowed(tensor.data()),
        )
    }

    /// Records a parameter leaf. Repeated calls for the same id return the
    /// same variable so gradients accumulate in one place.
    pub fn param(&mut self, set: &'p ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = set.get(id);
        let v = self.push(
            Op::Param,
            vec![],
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
        );
        self.nodes[v.0].requires_grad = t.is_trainable();
        self.params.insert(id, v);
        v
    }

    // ---- accessors -----------------------------------------------------------

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("recorded shape")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.nodes[v.0].shape)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    // ---- the closed op set ----------------------------------------------------

    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::Concat => inputs.len().max(1),
            OpKind::MatMul | OpKind::Add | OpKind::Mul | OpKind::Dot => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::contract(format!(
                "{kind:?} expects {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match kind {
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Concat => self.concat(inputs),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Mul => self.mul(inputs[0], inputs[1]),
            OpKind::Tanh => Ok(self.tanh(inputs[0])),
            OpKind::Sigmoid => Ok(self.sigmoid(inputs[0])),
            OpKind::Relu => Ok(self.relu(inputs[0])),
            OpKind::Softmax => Ok(self.softmax(inputs[0])),
            OpKind::Embedding(idx) => self.gather(inputs[0], &idx),
            OpKind::Dot => self.dot(inputs[0], inputs[1]),
            OpKind::CrossEntropy(t) => self.cross_entropy(inputs[0], &t, None),
        }
    }

    /// `a @ b` with `a: [.., k]` and `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` with `a: [.., k]` and `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.rc(a);
        if self.shape(b).len() != 2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let (br, bc) = (self.shape(b)[0], self.shape(b)[1]);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), false, self.value(b), trans_b, &mut out, false);
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Op::MatMul { trans_b }, vec![a.0, b.0], shape, Cow::Owned(out)))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat of zero inputs"));
        };
        let rank = self.shape(first).len();
        let (rows, _) = self.rc(first);
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.rc(p);
            if r != rows || self.shape(p).len() != rank {
                return Err(self.mismatch("concat", first, p));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.rc(p).1;
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let mut shape = self.shape(first).to_vec();
        *shape.last_mut().unwrap() = total;
        Ok(self.push(
            Op::Concat,
            parts.iter().map(|p| p.0).collect(),
            shape,
            Cow::Owned(out),
        ))
    }

    /// Elementwise sum; `b` may also be a `[n]` row broadcast over `a: [m, n]`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            let out = self
                .value(a)
                .iter()
                .zip(self.value(b))
                .map(|(&x, &y)| x + y)
                .collect();
            let shape = self.shape(a).to_vec();
            return Ok(self.push(Op::Add, vec![a.0, b.0], shape, Cow::Owned(out)));
        }
        let (_, n) = self.rc(a);
        if self.shape(b).len() == 1 && self.shape(b)[0] == n {
            let bv = self.value(b);
            let out = self
                .value(a)
                .chunks(n)
                .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
                .collect();
            let shape = self.shape(a).to_vec();
            return Ok(self.push(Op::AddRow, vec![a.0, b.0], shape, Cow::Owned(out)));
        }
        Err(self.mismatch("add", a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("sub", a, b));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Sub, vec![a.0, b.0], shape, Cow::Owned(out)))
    }

    /// Elementwise product. `b` may be the same shape as `a`, a `[m, 1]`
    /// column broadcast across the last axis of `a: [m, n]`, or a single
    /// scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if self.shape(a) == self.shape(b) {
            let out = self
                .value(a)
                .iter()
                .zip(self.value(b))
                .map(|(&x, &y)| x * y)
                .collect();
            return Ok(self.push(Op::Mul, vec![a.0, b.0], shape, Cow::Owned(out)));
        }
        let (m, n) = self.rc(a);
        if numel(self.shape(b)) == 1 {
            let s = self.value(b)[0];
            let out = self.value(a).iter().map(|&x| x * s).collect();
            return Ok(self.push(Op::MulScalar, vec![a.0, b.0], shape, Cow::Owned(out)));
        }
        if self.rc(b) == (m, 1) {
            let bv = self.value(b);
            let out = self
                .value(a)
                .chunks(n)
                .zip(bv)
                .flat_map(|(row, &s)| row.iter().map(move |&x| x * s))
                .collect();
            return Ok(self.push(Op::MulCol, vec![a.0, b.0], shape, Cow::Owned(out)));
        }
        Err(self.mismatch("mul", a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(c), vec![a.0], shape, Cow::Owned(out))
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, vec![a.0], shape, Cow::Owned(out))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh, T::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid, |x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut h = self.kinks;
        for &x in self.value(a) {
            h = (h ^ u64::from(x > T::zero())).wrapping_mul(FNV_PRIME);
        }
        self.kinks = h;
        self.unary(a, Op::Relu, |x| if x > T::zero() { x } else { T::zero() })
    }

    /// Hash of every rectifier's active set so far. Two evaluations with
    /// equal signatures ran on the same linear piece.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, n) = self.rc(a);
        let out = softmax_rows(self.value(a), n);
        let shape = self.shape(a).to_vec();
        self.push(Op::Softmax, vec![a.0], shape, Cow::Owned(out))
    }

    /// Row lookup: `table: [V, d]`, result `[indices.len(), d]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (v, d) = self.rc(table);
        if self.shape(table).len() != 2 || indices.is_empty() {
            return Err(Error::Shape {
                op: "embedding",
                left: self.shape(table).to_vec(),
                right: vec![indices.len()],
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!(
                "embedding index {bad} out of range for table of {v} rows"
            )));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Op::Gather(indices.into()),
            vec![table.0],
            vec![indices.len(), d],
            Cow::Owned(out),
        ))
    }

    /// Sums rows of `x: [E, d]` into `n` buckets given by `segments`.
    pub fn segment_sum(&mut self, x: Var, segments: &[usize], n: usize) -> Result<Var> {
        let (e, d) = self.rc(x);
        if segments.len() != e || segments.iter().any(|&s| s >= n) {
            return Err(Error::Shape {
                op: "segment_sum",
                left: self.shape(x).to_vec(),
                right: vec![segments.len(), n],
            });
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); n * d];
        for (r, &s) in segments.iter().enumerate() {
            for c in 0..d {
                out[s * d + c] += xv[r * d + c];
            }
        }
        Ok(self.push(
            Op::SegmentSum(segments.into()),
            vec![x.0],
            vec![n, d],
            Cow::Owned(out),
        ))
    }

    /// Softmax of a score column `[E, 1]` (or `[E]`) within each segment.
    pub fn segment_softmax(&mut self, x: Var, segments: &[usize], n: usize) -> Result<Var> {
        let (e, d) = self.rc(x);
        let e = if self.shape(x).len() == 1 { d } else { e };
        if (self.shape(x).len() == 2 && d != 1) || segments.len() != e || segments.iter().any(|&s| s >= n)
        {
            return Err(Error::Shape {
                op: "segment_softmax",
                left: self.shape(x).to_vec(),
                right: vec![segments.len(), n],
            });
        }
        let xv = self.value(x);
        let mut max = vec![T::neg_infinity(); n];
        for (&s, &v) in segments.iter().zip(xv.iter()) {
            max[s] = max[s].max(v);
        }
        let mut out: Vec<T> = segments
            .iter()
            .zip(xv.iter())
            .map(|(&s, &v)| (v - max[s]).exp())
            .collect();
        let mut z = vec![T::zero(); n];
        for (&s, &v) in segments.iter().zip(&out) {
            z[s] += v;
        }
        for (o, &s) in out.iter_mut().zip(segments) {
            *o /= z[s];
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Op::SegmentSoftmax(segments.into(), n),
            vec![x.0],
            shape,
            Cow::Owned(out),
        ))
    }

    /// Dot product along the last axis: `[m, n] . [m, n] -> [m, 1]`
    /// (`[n] . [n] -> [1]`).
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("dot", a, b));
        }
        let (m, n) = self.rc(a);
        let out: Vec<T> = self
            .value(a)
            .chunks(n)
            .zip(self.value(b).chunks(n))
            .map(|(x, y)| x.iter().zip(y).fold(T::zero(), |s, (&p, &q)| s + p * q))
            .collect();
        let shape = if self.shape(a).len() == 1 {
            vec![1]
        } else {
            vec![m, 1]
        };
        Ok(self.push(Op::RowDot, vec![a.0, b.0], shape, Cow::Owned(out)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(Op::Sum, vec![a.0], vec![1], Cow::Owned(vec![s]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s = self.value(a).iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(Op::Mean, vec![a.0], vec![1], Cow::Owned(vec![s / n]))
    }

    /// Weighted cross-entropy of logit rows `[m, V]` against `targets`.
    /// `weights` defaults to `1/m` per row (the mean).
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: Option<&[T]>,
    ) -> Result<Var> {
        let (m, v) = self.rc(logits);
        if targets.len() != m || weights.is_some_and(|w| w.len() != m) {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::contract(format!(
                "cross_entropy target {bad} outside {v} classes"
            )));
        }
        let weights = match weights {
            Some(w) => w.to_vec(),
            None => vec![T::one() / T::from_usize(m).unwrap(); m],
        };
        let lv = self.value(logits);
        let probs = softmax_rows(lv, v);
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().fold(T::neg_infinity(), |a, &x| a.max(x));
            let lse = max + row.iter().fold(T::zero(), |a, &x| a + (x - max).exp()).ln();
            loss += weights[r] * (lse - row[t]);
        }
        Ok(self.push(
            Op::CrossEntropy {
                targets: targets.to_vec(),
                weights,
                probs,
            },
            vec![logits.0],
            vec![1],
            Cow::Owned(vec![loss]),
        ))
    }

    pub fn custom(&mut self, op: Rc<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var> {
        let views: Vec<(&[usize], &[T])> = inputs
            .iter()
            .map(|&v| (self.shape(v), self.value(v)))
            .collect();
        let (shape, data) = op.forward(&views)?;
        if numel(&shape) != data.len() {
            return Err(Error::Shape {
                op: "custom",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(self.push(
            Op::Custom(op),
            inputs.iter().map(|v| v.0).collect(),
            shape,
            Cow::Owned(data),
        ))
    }

    // ---- reverse pass ---------------------------------------------------------

    /// Propagates `d loss / d node` for every recorded node. `loss` must hold
    /// exactly one element.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(&id, &v)| (id, v.0))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, node: &Node<'p, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let inp = |k: usize| &self.nodes[node.inputs[k]];
        let wants = |k: usize| self.nodes[node.inputs[k]].requires_grad;
        let y = &node.value;
        let mut emit = |k: usize, gi: Vec<T>| {
            add_into(&mut grads[node.inputs[k]], &gi);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { trans_b } => {
                let (a, b) = (inp(0), inp(1));
                let (m, k) = rows_cols(&a.shape);
                let n = rows_cols(&node.shape).1;
                if wants(0) {
                    // dA = dC @ op(B)^T
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, &b.value, !*trans_b, &mut ga, false);
                    emit(0, ga);
                }
                if wants(1) {
                    if *trans_b {
                        // B: [n, k], dB = dC^T @ A
                        let mut gb = vec![T::zero(); n * k];
                        T::gemm(n, m, k, g, true, &a.value, false, &mut gb, false);
                        emit(1, gb);
                    } else {
                        // B: [k, n], dB = A^T @ dC
                        let mut gb = vec![T::zero(); k * n];
                        T::gemm(k, m, n, &a.value, true, g, false, &mut gb, false);
                        emit(1, gb);
                    }
                }
            }
            Op::Concat => {
                let rows = rows_cols(&node.shape).0;
                let total = rows_cols(&node.shape).1;
                let mut offset = 0;
                for k in 0..node.inputs.len() {
                    let c = rows_cols(&inp(k).shape).1;
                    if wants(k) {
                        let mut gi = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gi.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        emit(k, gi);
                    }
                    offset += c;
                }
            }
            Op::Add => {
                if wants(0) {
                    emit(0, g.to_vec());
                }
                if wants(1) {
                    emit(1, g.to_vec());
                }
            }
            Op::AddRow => {
                if wants(0) {
                    emit(0, g.to_vec());
                }
                if wants(1) {
                    let n = inp(1).value.len();
                    let mut gb = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    emit(1, gb);
                }
            }
            Op::Sub => {
                if wants(0) {
                    emit(0, g.to_vec());
                }
                if wants(1) {
                    emit(1, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul => {
                let (a, b) = (inp(0), inp(1));
                if wants(0) {
                    emit(0, g.iter().zip(b.value.iter()).map(|(&x, &y)| x * y).collect());
                }
                if wants(1) {
                    emit(1, g.iter().zip(a.value.iter()).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::MulCol => {
                let (a, b) = (inp(0), inp(1));
                let n = rows_cols(&a.shape).1;
                if wants(0) {
                    let ga = g
                        .chunks(n)
                        .zip(b.value.iter())
                        .flat_map(|(row, &s)| row.iter().map(move |&x| x * s))
                        .collect();
                    emit(0, ga);
                }
                if wants(1) {
                    let gb = g
                        .chunks(n)
                        .zip(a.value.chunks(n))
                        .map(|(gr, ar)| gr.iter().zip(ar).fold(T::zero(), |s, (&p, &q)| s + p * q))
                        .collect();
                    emit(1, gb);
                }
            }
            Op::MulScalar => {
                let (a, b) = (inp(0), inp(1));
                let s = b.value[0];
                if wants(0) {
                    emit(0, g.iter().map(|&x| x * s).collect());
                }
                if wants(1) {
                    let gs = g.iter().zip(a.value.iter()).fold(T::zero(), |acc, (&p, &q)| acc + p * q);
                    emit(1, vec![gs]);
                }
            }
            Op::Scale(c) => emit(0, g.iter().map(|&x| x * *c).collect()),
            Op::Tanh => emit(
                0,
                g.iter().zip(y.iter()).map(|(&d, &t)| d * (T::one() - t * t)).collect(),
            ),
            Op::Sigmoid => emit(
                0,
                g.iter().zip(y.iter()).map(|(&d, &s)| d * s * (T::one() - s)).collect(),
            ),
            Op::Relu => emit(
                0,
                g.iter()
                    .zip(inp(0).value.iter())
                    .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
                    .collect(),
            ),
            Op::Softmax => {
                let n = rows_cols(&node.shape).1;
                let mut gi = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(n).zip(y.chunks(n)) {
                    let s = gr.iter().zip(yr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    gi.extend(gr.iter().zip(yr).map(|(&d, &p)| p * (d - s)));
                }
                emit(0, gi);
            }
            Op::Gather(idx) => {
                let table = inp(0);
                let d = rows_cols(&table.shape).1;
                let mut gt = vec![T::zero(); table.value.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        gt[i * d + c] += g[r * d + c];
                    }
                }
                emit(0, gt);
            }
            Op::SegmentSum(seg) => {
                let d = rows_cols(&node.shape).1;
                let mut gi = Vec::with_capacity(seg.len() * d);
                for &s in seg.iter() {
                    gi.extend_from_slice(&g[s * d..(s + 1) * d]);
                }
                emit(0, gi);
            }
            Op::SegmentSoftmax(seg, n) => {
                let mut dots = vec![T::zero(); *n];
                for ((&s, &d), &p) in seg.iter().zip(g).zip(y.iter()) {
                    dots[s] += d * p;
                }
                let gi = seg
                    .iter()
                    .zip(g)
                    .zip(y.iter())
                    .map(|((&s, &d), &p)| p * (d - dots[s]))
                    .collect();
                emit(0, gi);
            }
            Op::RowDot => {
                let (a, b) = (inp(0), inp(1));
                let n = rows_cols(&a.shape).1;
                let scale_rows = |other: &[T]| -> Vec<T> {
                    other
                        .chunks(n)
                        .zip(g)
                        .flat_map(|(row, &s)| row.iter().map(move |&x| x * s))
                        .collect()
                };
                if wants(0) {
                    emit(0, scale_rows(&b.value));
                }
                if wants(1) {
                    emit(1, scale_rows(&a.value));
                }
            }
            Op::Sum => emit(0, vec![g[0]; inp(0).value.len()]),
            Op::Mean => {
                let n = inp(0).value.len();
                emit(0, vec![g[0] / T::from_usize(n).unwrap(); n]);
            }
            Op::CrossEntropy {
                targets,
                weights,
                probs,
            } => {
                let v = rows_cols(&inp(0).shape).1;
                let mut gi = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let w = weights[r] * g[0];
                    gi[r * v + t] -= T::one();
                    gi[r * v..(r + 1) * v].iter_mut().for_each(|x| *x *= w);
                }
                emit(0, gi);
            }
            Op::Custom(op) => {
                let views: Vec<(&[usize], &[T])> = node
                    .inputs
                    .iter()
                    .map(|&i| (self.nodes[i].shape.as_slice(), &*self.nodes[i].value))
                    .collect();
                let gs = op.backward(&views, y, g);
                for (k, gi) in gs.into_iter().enumerate() {
                    if wants(k) {
                        emit(k, gi);
                    }
                }
            }
        }
    }
}

/// Result of a reverse pass: a gradient for every node that depends on a
/// differentiable leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; `None` when `v` does not reach the loss
    /// or is not differentiable.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, n)| self.grads[n].as_deref())
    }

    /// Adds the parameter gradients into `set`. Trainable tensors the loss
    /// did not reach receive an explicit zero gradient.
    pub fn apply_to(&self, set: &mut ParamSet<T>) {
        let ids: Vec<ParamId> = set.ids().collect();
        for id in ids {
            let t = set.get_mut(id);
            if !t.is_trainable() {
                continue;
            }
            match self.param(id) {
                Some(g) => t.accumulate_grad(g),
                None => {
                    if t.grad().is_none() {
                        let n = t.len();
                        t.accumulate_grad(&vec![T::zero(); n]);
                    }
                }
            }
        }
    }
}
