use std::sync::Arc;

use super::{NumericsError, Scalar, Tensor};
use crate::lin_attn::kernel::{self, CellGeometry, SavedStates};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemFn {
    Elu,
    /// `elu(x) + 1`, strictly positive.
    EluPlusOne,
    Exp,
    Tanh,
    Relu,
}

impl ElemFn {
    #[inline]
    pub fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            ElemFn::Elu => {
                if x > F::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            ElemFn::EluPlusOne => {
                if x >= F::zero() {
                    x + F::one()
                } else {
                    x.exp()
                }
            }
            ElemFn::Exp => x.exp(),
            ElemFn::Tanh => x.tanh(),
            ElemFn::Relu => {
                if x > F::zero() {
                    x
                } else {
                    F::zero()
                }
            }
        }
    }

    /// Derivative given the input `x` and the output `y = f(x)`.
    #[inline]
    pub fn derivative<F: Scalar>(self, x: F, y: F) -> F {
        match self {
            ElemFn::Elu => {
                if x > F::zero() {
                    F::one()
                } else {
                    y + F::one()
                }
            }
            ElemFn::EluPlusOne => {
                if x >= F::zero() {
                    F::one()
                } else {
                    y
                }
            }
            ElemFn::Exp => y,
            ElemFn::Tanh => F::one() - y * y,
            ElemFn::Relu => {
                if x > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            ElemFn::Elu => "elu",
            ElemFn::EluPlusOne => "elu_plus_one",
            ElemFn::Exp => "exp",
            ElemFn::Tanh => "tanh",
            ElemFn::Relu => "relu",
        }
    }
}

/// Which carried tensor a [`Op::CellState`] node exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatePart {
    Memory,
    Normalizer,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Map(Var, ElemFn),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Embedding {
        table: Var,
        ids: Arc<[usize]>,
    },
    SoftmaxRows(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        eps: f64,
    },
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    MaskedNll {
        logits: Var,
        targets: Arc<[usize]>,
        mask: Arc<[bool]>,
    },
    LinearAttention {
        q: Var,
        k: Var,
        v: Var,
        decay: Option<Var>,
        memory: Var,
        normalizer: Option<Var>,
        geometry: CellGeometry,
    },
    CellState(Var, StatePart),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Map(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SoftmaxRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Scale(a, _)
            | Op::CellState(a, _) => vec![*a],
            Op::Concat(xs, _) => xs.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::MaskedNll { logits, .. } => vec![*logits],
            Op::LinearAttention {
                q,
                k,
                v,
                decay,
                memory,
                normalizer,
                ..
            } => {
                let mut xs = vec![*q, *k, *v, *memory];
                xs.extend(decay.iter().copied());
                xs.extend(normalizer.iter().copied());
                xs
            }
        }
    }
}

struct Node<F> {
    op: Op,
    value: Tensor<F>,
    requires_grad: bool,
    saved: Option<Box<SavedStates<F>>>,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is already a topological order.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
    detached: Vec<Tensor<F>>,
    replay: Option<std::vec::IntoIter<Tensor<F>>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> NumericsError {
    NumericsError::Shape {
        op,
        detail: format!("incompatible shapes {shapes:?}"),
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            detached: Vec::new(),
            replay: None,
        }
    }

    /// A graph that records values only; nothing on it can be differentiated.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
            detached: Vec::new(),
            replay: None,
        }
    }

    /// An inference graph whose `detach` calls return, in order, the values
    /// detached on another graph instead of their own inputs. Used to hold
    /// detached paths constant while probing a function numerically.
    pub fn replaying(detached: Vec<Tensor<F>>) -> Self {
        let mut g = Self::inference();
        g.replay = Some(detached.into_iter());
        g
    }

    /// Values produced by every `detach` call so far, in call order.
    pub fn detached_values(&self) -> &[Tensor<F>] {
        &self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input node ids of `v`, in operand order.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Insert a leaf. Its `requires_grad` flag decides whether gradients
    /// are collected for it.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let rg = t.requires_grad && self.grad_enabled;
        self.push_raw(Op::Leaf, t, rg, None)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t.with_grad(false))
    }

    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t.with_grad(true))
    }

    /// Same values as `x`, as a fresh leaf that never receives gradient.
    pub fn detach(&mut self, x: Var) -> Var {
        let replayed = self.replay.as_mut().and_then(|r| r.next());
        let t = match replayed {
            Some(t) if t.shape() == self.shape(x) => t,
            _ => self.nodes[x.0].value.clone(),
        }
        .with_grad(false);
        if self.replay.is_none() && self.grad_enabled {
            self.detached.push(t.clone());
        }
        self.push_raw(Op::Leaf, t, false, None)
    }

    fn push_raw(
        &mut self,
        op: Op,
        value: Tensor<F>,
        requires_grad: bool,
        saved: Option<Box<SavedStates<F>>>,
    ) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor<F>) -> Result<Var, NumericsError> {
        self.push_saved(name, op, value, None)
    }

    fn push_saved(
        &mut self,
        name: &'static str,
        op: Op,
        mut value: Tensor<F>,
        saved: Option<Box<SavedStates<F>>>,
    ) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite {
                op: name.to_string(),
            });
        }
        let rg = self.grad_enabled && op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        value.requires_grad = rg;
        Ok(self.push_raw(op, value, rg, saved))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            F::zero(),
            &mut out,
        );
        let t = Tensor::new(&[m, n], out)?;
        self.push("matmul", Op::MatMul(a, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("add", &[sa, sb]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(sa, data)?;
        self.push("add", Op::Add(a, b), t)
    }

    /// Elementwise product; either operand may also be a single-element
    /// tensor, which multiplies every entry of the other.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
            Tensor::new(ta.shape(), data)?
        } else if tb.numel() == 1 {
            let s = tb.item();
            Tensor::new(ta.shape(), ta.data().iter().map(|&x| x * s).collect())?
        } else if ta.numel() == 1 {
            let s = ta.item();
            Tensor::new(tb.shape(), tb.data().iter().map(|&x| x * s).collect())?
        } else {
            return Err(shape_err("mul", &[ta.shape(), tb.shape()]));
        };
        self.push("mul", Op::Mul(a, b), out)
    }

    pub fn map(&mut self, x: Var, f: ElemFn) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape(), tx.data().iter().map(|&v| f.apply(v)).collect())?;
        self.push(f.name(), Op::Map(x, f), t)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.map(x, ElemFn::Relu)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("transpose", &[s]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(&[c, r], out)?;
        self.push("transpose", Op::Transpose(x), t)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", Op::Reshape(x), t)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, NumericsError> {
        if xs.is_empty() {
            return Err(NumericsError::Contract("concat of zero tensors".into()));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &[&first]));
        }
        let mut axis_total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &[&first, s]));
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.value(x).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = axis_total;
        let t = Tensor::new(&shape, out)?;
        self.push("concat", Op::Concat(xs.to_vec(), axis), t)
    }

    /// Rows of `table` selected by `ids`: `[V, d]` → `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let s = self.shape(table);
        if s.len() != 2 || ids.is_empty() {
            return Err(shape_err("embedding", &[s]));
        }
        let (vocab, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(NumericsError::Vocabulary { id: bad, vocab });
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        self.push(
            "embedding_lookup",
            Op::Embedding {
                table,
                ids: ids.into(),
            },
            t,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("softmax_rows", &[s]));
        }
        let (r, c) = (s[0], s[1]);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(&[r, c], out)?;
        self.push("softmax_rows", Op::SoftmaxRows(x), t)
    }

    /// Row-wise `x / rms(x) * gain` with `rms = sqrt(mean(x²) + eps)`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var, NumericsError> {
        let (sx, sg) = (self.shape(x), self.shape(gain));
        if sx.len() != 2 || sg.len() != 1 || sg[0] != sx[1] {
            return Err(shape_err("rms_norm", &[sx, sg]));
        }
        let (r, c) = (sx[0], sx[1]);
        let g = self.value(gain).data();
        let src = self.value(x).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let inv = rms_inv(row, eps);
            for j in 0..c {
                out[i * c + j] = row[j] * inv * g[j];
            }
        }
        let t = Tensor::new(&[r, c], out)?;
        self.push("rms_norm", Op::RmsNorm { x, gain, eps }, t)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s: F = self.value(x).data().iter().copied().sum();
        self.push("sum", Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let s: F = t.data().iter().copied().sum::<F>() / F::of(t.numel() as f64);
        self.push("mean", Op::Mean(x), Tensor::scalar(s))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let cf = F::of(c);
        let t = Tensor::new(tx.shape(), tx.data().iter().map(|&v| v * cf).collect())?;
        self.push("scale", Op::Scale(x, c), t)
    }

    /// Mean over unmasked rows of `-log softmax(logits)[target]`.
    pub fn masked_nll(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var, NumericsError> {
        let s = self.shape(logits);
        if s.len() != 2 || targets.len() != s[0] || mask.len() != s[0] {
            return Err(NumericsError::Shape {
                op: "masked_nll",
                detail: format!(
                    "logits {s:?}, {} targets, {} mask entries",
                    targets.len(),
                    mask.len()
                ),
            });
        }
        let (r, c) = (s[0], s[1]);
        let active = mask.iter().filter(|&&m| m).count();
        if active == 0 {
            return Err(NumericsError::Contract("nll over an all-masked batch".into()));
        }
        if let Some(&bad) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&t| t >= c) {
            return Err(NumericsError::Vocabulary { id: bad, vocab: c });
        }
        let src = self.value(logits).data();
        let mut total = 0.0f64;
        for i in 0..r {
            if !mask[i] {
                continue;
            }
            let row = &src[i * c..(i + 1) * c];
            total -= log_softmax_at(row, targets[i]).as_f64();
        }
        let t = Tensor::scalar(F::of(total / active as f64));
        self.push(
            "masked_nll",
            Op::MaskedNll {
                logits,
                targets: targets.into(),
                mask: mask.into(),
            },
            t,
        )
    }

    /// Kernelized linear-attention recurrence over a time-major sequence.
    ///
    /// `q`, `k` are `[T*B, H*dk]`, `v` is `[T*B, H*dv]`, rows ordered
    /// `t * B + b`. `memory` is `[B, H, dk, dv]`, `normalizer` is `[B, H, dk]`
    /// and `decay` holds `[H, dk]` logits. Returns the `[T*B, H*dv]` outputs;
    /// the final carried state is read with [`Graph::cell_state`].
    #[allow(clippy::too_many_arguments)]
    pub fn linear_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        decay: Option<Var>,
        memory: Var,
        normalizer: Option<Var>,
        geometry: CellGeometry,
    ) -> Result<Var, NumericsError> {
        let CellGeometry {
            batch: b,
            heads: h,
            d_key: dk,
            d_value: dv,
            ..
        } = geometry;
        let sq = self.shape(q);
        if sq.len() != 2 || sq[1] != h * dk || !sq[0].is_multiple_of(b) || sq[0] == 0 {
            return Err(shape_err("linear_attention.q", &[sq]));
        }
        let rows = sq[0];
        if self.shape(k) != [rows, h * dk] {
            return Err(shape_err("linear_attention.k", &[sq, self.shape(k)]));
        }
        if self.shape(v) != [rows, h * dv] {
            return Err(shape_err("linear_attention.v", &[sq, self.shape(v)]));
        }
        if self.shape(memory) != [b, h, dk, dv] {
            return Err(shape_err("linear_attention.memory", &[self.shape(memory)]));
        }
        if let Some(d) = decay {
            if self.shape(d) != [h, dk] {
                return Err(shape_err("linear_attention.decay", &[self.shape(d)]));
            }
        }
        match (geometry.normalized, normalizer) {
            (true, Some(z)) if self.shape(z) == [b, h, dk] => {}
            (false, None) => {}
            _ => {
                return Err(NumericsError::Contract(
                    "normalizer state must be present exactly in normalized mode".into(),
                ))
            }
        }
        let steps = rows / b;
        let decay_vals = decay.map(|d| kernel::decay_factors(self.value(d).data()));
        let keep_history = self.grad_enabled;
        let (out, saved) = kernel::forward(
            &geometry,
            steps,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            decay_vals.as_deref(),
            self.value(memory).data(),
            normalizer.map(|z| self.value(z).data()),
            keep_history,
        );
        if let Some((slot, head, step)) = kernel::first_non_finite(&out, &geometry) {
            return Err(NumericsError::NonFinite {
                op: format!("linear_attention (slot {slot}, head {head}, step {step})"),
            });
        }
        let t = Tensor::new(&[rows, h * dv], out)?;
        self.push_saved(
            "linear_attention",
            Op::LinearAttention {
                q,
                k,
                v,
                decay,
                memory,
                normalizer,
                geometry,
            },
            t,
            Some(Box::new(saved)),
        )
    }

    /// Final carried state of a [`Graph::linear_attention`] node.
    pub fn cell_state(&mut self, cell: Var, part: StatePart) -> Result<Var, NumericsError> {
        let (geometry, saved) = match (&self.nodes[cell.0].op, &self.nodes[cell.0].saved) {
            (Op::LinearAttention { geometry, .. }, Some(saved)) => (*geometry, saved),
            _ => {
                return Err(NumericsError::Contract(
                    "cell_state requires a linear_attention node".into(),
                ))
            }
        };
        let CellGeometry {
            batch: b,
            heads: h,
            d_key: dk,
            d_value: dv,
            ..
        } = geometry;
        let t = match part {
            StatePart::Memory => Tensor::new(&[b, h, dk, dv], saved.final_memory.clone())?,
            StatePart::Normalizer => match &saved.final_normalizer {
                Some(z) => Tensor::new(&[b, h, dk], z.clone())?,
                None => {
                    return Err(NumericsError::Contract(
                        "unnormalized cell has no normalizer state".into(),
                    ))
                }
            },
        };
        self.push("cell_state", Op::CellState(cell, part), t)
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, NumericsError> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; n];
        // Gradients reaching a cell's carried state, keyed by the cell node.
        let mut state_grads: Vec<Option<(Option<Vec<F>>, Option<Vec<F>>)>> = vec![None; n];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));

        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let state_grad = state_grads[id].take();
            let upstream = match (&grads[id], &node.op) {
                (Some(g), _) => Some(g.clone()),
                (None, Op::LinearAttention { .. }) if state_grad.is_some() => None,
                (None, _) => continue,
            };
            self.backprop_node(id, upstream.as_ref(), state_grad, &mut grads, &mut state_grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], target: Var, g: Tensor<F>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    #[allow(clippy::type_complexity)]
    fn backprop_node(
        &self,
        id: usize,
        upstream: Option<&Tensor<F>>,
        state_grad: Option<(Option<Vec<F>>, Option<Vec<F>>)>,
        grads: &mut [Option<Tensor<F>>],
        state_grads: &mut [Option<(Option<Vec<F>>, Option<Vec<F>>)>],
    ) -> Result<(), NumericsError> {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let g = upstream.expect("matmul upstream");
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.requires_grad(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![F::zero(); m * k];
                    F::gemm(m, n, k, g.data(), n as isize, 1, tb.data(), 1, n as isize, F::zero(), &mut da);
                    self.accumulate(grads, *a, Tensor::new(&[m, k], da)?);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![F::zero(); k * n];
                    F::gemm(k, m, n, ta.data(), 1, k as isize, g.data(), n as isize, 1, F::zero(), &mut db);
                    self.accumulate(grads, *b, Tensor::new(&[k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                let g = upstream.expect("add upstream");
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let g = upstream.expect("mul upstream");
                let (ta, tb) = (self.value(*a), self.value(*b));
                let grad_for = |this: &Tensor<F>, other: &Tensor<F>| -> Result<Tensor<F>, NumericsError> {
                    if this.shape() == other.shape() {
                        let d = g.data().iter().zip(other.data()).map(|(&x, &y)| x * y).collect();
                        Tensor::new(this.shape(), d)
                    } else if other.numel() == 1 {
                        let s = other.item();
                        Tensor::new(this.shape(), g.data().iter().map(|&x| x * s).collect())
                    } else {
                        // `this` is the broadcast scalar.
                        let s: F = g.data().iter().zip(other.data()).map(|(&x, &y)| x * y).sum();
                        Tensor::new(this.shape(), vec![s])
                    }
                };
                if self.requires_grad(*a) {
                    let da = grad_for(ta, tb)?;
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = grad_for(tb, ta)?;
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Map(x, f) => {
                let g = upstream.expect("map upstream");
                let tx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .zip(out.data())
                    .map(|((&gi, &xi), &yi)| gi * f.derivative(xi, yi))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(tx.shape(), d)?);
            }
            Op::Transpose(x) => {
                let g = upstream.expect("transpose upstream");
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut d = vec![F::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[c, r], d)?);
            }
            Op::Reshape(x) => {
                let g = upstream.expect("reshape upstream");
                self.accumulate(grads, *x, g.clone().reshaped(self.shape(*x))?);
            }
            Op::Concat(xs, axis) => {
                let g = upstream.expect("concat upstream");
                let first = self.shape(xs[0]);
                let outer: usize = first[..*axis].iter().product();
                let inner: usize = first[axis + 1..].iter().product();
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis] * inner;
                    if self.requires_grad(x) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let start = o * total + offset;
                            d.extend_from_slice(&g.data()[start..start + len]);
                        }
                        self.accumulate(grads, x, Tensor::new(self.shape(x), d)?);
                    }
                    offset += len;
                }
            }
            Op::Embedding { table, ids } => {
                let g = upstream.expect("embedding upstream");
                let s = self.shape(*table);
                let d = s[1];
                let mut dt = Tensor::zeros(s);
                let buf = dt.data_mut();
                for (row, &i) in ids.iter().enumerate() {
                    let src = &g.data()[row * d..(row + 1) * d];
                    for (acc, &x) in buf[i * d..(i + 1) * d].iter_mut().zip(src) {
                        *acc = *acc + x;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::SoftmaxRows(x) => {
                let g = upstream.expect("softmax upstream");
                let c = out.shape()[1];
                let mut d = vec![F::zero(); out.numel()];
                for ((drow, yrow), grow) in d.chunks_mut(c).zip(out.data().chunks(c)).zip(g.data().chunks(c)) {
                    let dot: F = yrow.iter().zip(grow).map(|(&y, &gg)| y * gg).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape(), d)?);
            }
            Op::RmsNorm { x, gain, eps } => {
                let g = upstream.expect("rms_norm upstream");
                let tx = self.value(*x);
                let tg = self.value(*gain);
                let (r, c) = (tx.shape()[0], tx.shape()[1]);
                let mut dx = vec![F::zero(); r * c];
                let mut dg = vec![F::zero(); c];
                let cf = F::of(c as f64);
                for i in 0..r {
                    let row = &tx.data()[i * c..(i + 1) * c];
                    let grow = &g.data()[i * c..(i + 1) * c];
                    let inv = rms_inv(row, *eps);
                    // y_j = x_j * inv * g_j, inv = (mean(x²) + eps)^(-1/2)
                    let mut dot = F::zero();
                    for j in 0..c {
                        dg[j] = dg[j] + grow[j] * row[j] * inv;
                        dot = dot + grow[j] * tg.data()[j] * row[j];
                    }
                    let coef = dot * inv * inv * inv / cf;
                    for j in 0..c {
                        dx[i * c + j] = grow[j] * tg.data()[j] * inv - row[j] * coef;
                    }
                }
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, Tensor::new(&[r, c], dx)?);
                }
                if self.requires_grad(*gain) {
                    self.accumulate(grads, *gain, Tensor::new(&[c], dg)?);
                }
            }
            Op::Sum(x) => {
                let g = upstream.expect("sum upstream").item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let g = upstream.expect("mean upstream").item() / F::of(n as f64);
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::Scale(x, c) => {
                let g = upstream.expect("scale upstream");
                let cf = F::of(*c);
                let d = g.data().iter().map(|&v| v * cf).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::MaskedNll {
                logits,
                targets,
                mask,
            } => {
                let g = upstream.expect("nll upstream").item();
                let tl = self.value(*logits);
                let c = tl.shape()[1];
                let active = mask.iter().filter(|&&m| m).count();
                let w = g / F::of(active as f64);
                let mut d = vec![F::zero(); tl.numel()];
                for (i, (drow, row)) in d.chunks_mut(c).zip(tl.data().chunks(c)).enumerate() {
                    if !mask[i] {
                        continue;
                    }
                    drow.copy_from_slice(row);
                    softmax_in_place(drow);
                    drow[targets[i]] = drow[targets[i]] - F::one();
                    for x in drow.iter_mut() {
                        *x = *x * w;
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(tl.shape(), d)?);
            }
            Op::LinearAttention {
                q,
                k,
                v,
                decay,
                memory,
                normalizer,
                geometry,
            } => {
                let saved = node.saved.as_ref().expect("linear attention saved states");
                let steps = out.shape()[0] / geometry.batch;
                let (dm_final, dz_final) = state_grad.unwrap_or((None, None));
                let decay_vals = decay.map(|d| kernel::decay_factors(self.value(d).data()));
                let cg = kernel::backward(
                    geometry,
                    steps,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    decay_vals.as_deref(),
                    saved,
                    upstream.map(|g| g.data()),
                    dm_final.as_deref(),
                    dz_final.as_deref(),
                );
                self.accumulate(grads, *q, Tensor::new(self.shape(*q), cg.dq)?);
                self.accumulate(grads, *k, Tensor::new(self.shape(*k), cg.dk)?);
                self.accumulate(grads, *v, Tensor::new(self.shape(*v), cg.dv)?);
                self.accumulate(grads, *memory, Tensor::new(self.shape(*memory), cg.dmemory)?);
                if let (Some(d), Some(dl)) = (decay, cg.ddecay_logits) {
                    self.accumulate(grads, *d, Tensor::new(self.shape(*d), dl)?);
                }
                if let (Some(z), Some(dz)) = (normalizer, cg.dnormalizer) {
                    self.accumulate(grads, *z, Tensor::new(self.shape(*z), dz)?);
                }
            }
            Op::CellState(cell, part) => {
                let g = upstream.expect("cell state upstream");
                let slot = state_grads[cell.0].get_or_insert((None, None));
                let target = match part {
                    StatePart::Memory => &mut slot.0,
                    StatePart::Normalizer => &mut slot.1,
                };
                match target {
                    Some(acc) => {
                        for (a, &b) in acc.iter_mut().zip(g.data()) {
                            *a = *a + b;
                        }
                    }
                    None => *target = Some(g.data().to_vec()),
                }
            }
        }
        Ok(())
    }
}

fn rms_inv<F: Scalar>(row: &[F], eps: f64) -> F {
    let ms: F = row.iter().map(|&v| v * v).sum::<F>() / F::of(row.len() as f64);
    (ms + F::of(eps)).sqrt().recip()
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

pub(crate) fn log_softmax_at<F: Scalar>(row: &[F], index: usize) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
    row[index] - lse
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// `None` when no gradient reached `v` (detached, constant, or unused).
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient of `v`, with an absent gradient read as zeros of `shape`.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<F> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
