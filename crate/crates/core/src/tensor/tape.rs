use std::cell::{Ref, RefCell};

use rand::Rng;

use super::broadcast::{broadcast_offsets, broadcast_shape, broadcast_to, reduce_to};
use super::gemm::{gemm, MatLayout};
use super::{numel, strides, Element, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of the differentiable ops a tape can record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    Linear,
    Permute,
    Reshape,
    BroadcastTo,
    Concat,
    Narrow,
    Softmax,
    LayerNorm,
    AddLayerNorm,
    Relu,
    Gelu,
    Abs,
    Embedding,
    Sum,
    Mean,
    Attention,
    Dropout,
}

impl OpKind {
    /// Every kind except [`OpKind::Leaf`].
    pub const DIFFERENTIABLE: [OpKind; 22] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::MatMul,
        OpKind::Linear,
        OpKind::Permute,
        OpKind::Reshape,
        OpKind::BroadcastTo,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::AddLayerNorm,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Abs,
        OpKind::Embedding,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Attention,
        OpKind::Dropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::MatMul => "matmul",
            OpKind::Linear => "linear",
            OpKind::Permute => "permute",
            OpKind::Reshape => "reshape",
            OpKind::BroadcastTo => "broadcast_to",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::AddLayerNorm => "add_layer_norm",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Abs => "abs",
            OpKind::Embedding => "embedding",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Attention => "attention",
            OpKind::Dropout => "dropout",
        }
    }
}

struct AttentionSaved<F> {
    heads: usize,
    seq_axis: usize,
    scale: F,
    /// Softmax weights laid out as `[batch][head][query][key]`.
    probs: Vec<F>,
    batches: usize,
    lq: usize,
    lk: usize,
}

enum Op<F> {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(F),
    MatMul,
    Linear { relu: bool },
    Permute(Vec<usize>),
    Reshape,
    BroadcastTo,
    Concat { axis: usize, sizes: Vec<usize> },
    Narrow { axis: usize, start: usize },
    Softmax { axis: usize },
    LayerNorm { mean: Vec<F>, rstd: Vec<F> },
    AddLayerNorm { xhat: Vec<F>, rstd: Vec<F> },
    Relu,
    Gelu,
    Abs,
    Embedding { indices: Vec<usize> },
    Sum,
    Mean,
    Attention(Box<AttentionSaved<F>>),
    Dropout { mask: Vec<F> },
}

impl<F> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::MatMul => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Permute(_) => OpKind::Permute,
            Op::Reshape => OpKind::Reshape,
            Op::BroadcastTo => OpKind::BroadcastTo,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::AddLayerNorm { .. } => OpKind::AddLayerNorm,
            Op::Relu => OpKind::Relu,
            Op::Gelu => OpKind::Gelu,
            Op::Abs => OpKind::Abs,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::Attention(_) => OpKind::Attention,
            Op::Dropout { .. } => OpKind::Dropout,
        }
    }
}

struct Record<F> {
    value: Option<Tensor<F>>,
    op: Op<F>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Reverse-mode differentiation record.
///
/// Records are appended in execution order, so every record's inputs precede
/// it. [`Tape::backward`] consumes the tape and visits each record once, from
/// the loss back to the leaves, releasing intermediate values as it goes.
pub struct Tape<F: Element = f32> {
    records: RefCell<Vec<Record<F>>>,
    check_finite: bool,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Element> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Takes the gradient out, or zeros of `shape` when the leaf was unused.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor<F> {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn add_into<F: Element>(dst: &mut Tensor<F>, src: &Tensor<F>) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn zip_with<F: Element>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn broadcast_binary<F: Element>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
    if a.shape() == b.shape() {
        return Ok(zip_with(a, b, f));
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    if shape == a.shape() && a.shape().ends_with(b.shape()) {
        let n = b.len();
        let data = a
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        return Tensor::new(shape, data);
    }
    let a = broadcast_to(a, &shape)?;
    let b = broadcast_to(b, &shape)?;
    Ok(zip_with(&a, &b, f))
}

/// Offsets of every batch slice when `seq_axis` and the last axis are the
/// matrix axes.
fn batch_offsets(shape: &[usize], seq_axis: usize) -> Vec<usize> {
    let st = strides(shape);
    let last = shape.len() - 1;
    let dims: Vec<(usize, usize)> = (0..last)
        .filter(|&a| a != seq_axis)
        .map(|a| (shape[a], st[a]))
        .collect();
    let mut offs = vec![0usize];
    for &(len, stride) in &dims {
        offs = offs
            .iter()
            .flat_map(|&o| (0..len).map(move |i| o + i * stride))
            .collect();
    }
    offs
}

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_f64(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Self {
            records: RefCell::new(Vec::new()),
            check_finite: true,
        }
    }

    /// Turns the per-record finiteness check in [`Tape::backward`] on or off.
    ///
    /// The check names the first op that produced a non-finite gradient but
    /// costs a full pass over every intermediate gradient; callers that
    /// validate the leaf gradients themselves can skip it.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<F>, inputs: Vec<usize>, op: Op<F>) -> Var {
        let mut records = self.records.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| records[i].requires_grad);
        records.push(Record {
            value: Some(value),
            op,
            inputs,
            requires_grad,
        });
        Var(records.len() - 1)
    }

    fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var {
        let mut records = self.records.borrow_mut();
        records.push(Record {
            value: Some(value),
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
        });
        Var(records.len() - 1)
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<F>> {
        Ref::map(self.records.borrow(), |r| {
            r[v.0].value.as_ref().expect("tape values live until backward")
        })
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.records.borrow()[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.records.borrow()[v.0].requires_grad
    }

    /// Softmax weights saved by an [`Tape::attention`] record, shaped
    /// `(batch, heads, queries, keys)`.
    pub fn attention_weights(&self, v: Var) -> Option<Tensor<F>> {
        let records = self.records.borrow();
        match &records[v.0].op {
            Op::Attention(s) => Some(
                Tensor::new(vec![s.batches, s.heads, s.lq, s.lk], s.probs.clone()).expect("saved attention layout"),
            ),
            _ => None,
        }
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(&self.value(a), &self.value(b), |x, y| x + y)?;
        Ok(self.push(out, vec![a.0, b.0], Op::Add))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(&self.value(a), &self.value(b), |x, y| x - y)?;
        Ok(self.push(out, vec![a.0, b.0], Op::Sub))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(&self.value(a), &self.value(b), |x, y| x * y)?;
        Ok(self.push(out, vec![a.0, b.0], Op::Mul))
    }

    pub fn scale(&self, a: Var, factor: F) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, vec![a.0], Op::Scale(factor))
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        self.push(out, vec![a.0], Op::Relu)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| F::of(gelu_f64(x.as_f64())));
        self.push(out, vec![a.0], Op::Gelu)
    }

    pub fn abs(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        self.push(out, vec![a.0], Op::Abs)
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        let keep = F::of(1.0 / (1.0 - p));
        let x = self.value(a);
        let mask: Vec<F> = (0..x.len())
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        drop(x);
        Ok(self.push(out, vec![a.0], Op::Dropout { mask }))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum_f64();
        self.push(Tensor::scalar(F::of(s)), vec![a.0], Op::Sum)
    }

    pub fn mean(&self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.sum_f64() / x.len() as f64;
        drop(x);
        self.push(Tensor::scalar(F::of(s)), vec![a.0], Op::Mean)
    }

    // ---- shape ops ------------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, vec![a.0], Op::Reshape))
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(perm)?;
        Ok(self.push(out, vec![a.0], Op::Permute(perm.to_vec())))
    }

    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = broadcast_to(&self.value(a), shape)?;
        Ok(self.push(out, vec![a.0], Op::BroadcastTo))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let records = self.records.borrow();
        let values: Vec<&Tensor<F>> = parts
            .iter()
            .map(|v| records[v.0].value.as_ref().expect("live value"))
            .collect();
        let out = Tensor::concat(&values, axis)?;
        let sizes = values.iter().map(|t| t.shape()[axis]).collect();
        drop(records);
        Ok(self.push(out, parts.iter().map(|v| v.0).collect(), Op::Concat { axis, sizes }))
    }

    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).narrow(axis, start, len)?;
        Ok(self.push(out, vec![a.0], Op::Narrow { axis, start }))
    }

    pub fn split(&self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total = self.value(a).shape().get(axis).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != total {
            return Err(Error::shape(format!(
                "split sizes {sizes:?} do not cover axis {axis} of length {total}"
            )));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let v = self.narrow(a, axis, start, len);
                start += len;
                v
            })
            .collect()
    }

    // ---- linear algebra -------------------------------------------------

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let plan = MatMulPlan::new(av.shape(), bv.shape())?;
        let mut out = vec![F::zero(); plan.batch * plan.m * plan.n];
        for i in 0..plan.batch {
            gemm(
                F::one(),
                av.data(),
                MatLayout::row_major(plan.a_off[i] * plan.m * plan.k, plan.m, plan.k),
                bv.data(),
                MatLayout::row_major(plan.b_off[i] * plan.k * plan.n, plan.k, plan.n),
                F::zero(),
                &mut out,
                MatLayout::row_major(i * plan.m * plan.n, plan.m, plan.n),
            );
        }
        let out = Tensor::new(plan.out_shape, out)?;
        drop((av, bv));
        Ok(self.push(out, vec![a.0, b.0], Op::MatMul))
    }

    /// `x·w + b` over the last axis of `x`, optionally followed by ReLU.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>, relu: bool) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 || xv.shape().last() != Some(&wv.shape()[0]) {
            return Err(Error::shape(format!(
                "linear: input {:?} against weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        let rows = xv.len() / din;
        let mut out = vec![F::zero(); rows * dout];
        let mut beta = F::zero();
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(Error::shape(format!(
                    "linear bias {:?} for output width {dout}",
                    bv.shape()
                )));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
            beta = F::one();
        }
        gemm(
            F::one(),
            xv.data(),
            MatLayout::row_major(0, rows, din),
            wv.data(),
            MatLayout::row_major(0, din, dout),
            beta,
            &mut out,
            MatLayout::row_major(0, rows, dout),
        );
        if relu {
            for v in &mut out {
                if *v < F::zero() {
                    *v = F::zero();
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(shape, out)?;
        drop((xv, wv));
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        Ok(self.push(out, inputs, Op::Linear { relu }))
    }

    /// Softmax along `axis`, computed on max-shifted logits.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax_forward(&self.value(a), axis)?;
        Ok(self.push(out, vec![a.0], Op::Softmax { axis }))
    }

    /// Normalizes each last-axis slice to zero mean and unit variance
    /// (biased, with `1e-5` added to the variance) and applies `gain`/`bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm of a scalar"))?;
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape(format!(
                "layer_norm gain {:?} / bias {:?} for width {d}",
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.len() / d;
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let mu = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for ((&v, &g), &b) in row.iter().zip(gv.data()).zip(bv.data()) {
                out.push(F::of((v.as_f64() - mu) * r) * g + b);
            }
            mean.push(F::of(mu));
            rstd.push(F::of(r));
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        drop((xv, gv, bv));
        Ok(self.push(out, vec![x.0, gain.0, bias.0], Op::LayerNorm { mean, rstd }))
    }

    /// `layer_norm(x + r)` without materializing the sum; `x` and `r` share a shape.
    pub fn add_layer_norm(&self, x: Var, r: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, rv, gv, bv) = (self.value(x), self.value(r), self.value(gain), self.value(bias));
        if xv.shape() != rv.shape() {
            return Err(Error::shape(format!(
                "add_layer_norm of {:?} and {:?}",
                xv.shape(),
                rv.shape()
            )));
        }
        let d = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm of a scalar"))?;
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape(format!(
                "layer_norm gain {:?} / bias {:?} for width {d}",
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.len() / d;
        let mut xhat = vec![F::zero(); xv.len()];
        let mut out = vec![F::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        let chunks = xv.data().chunks(d).zip(rv.data().chunks(d));
        for ((xrow, rrow), (hrow, orow)) in chunks.zip(xhat.chunks_mut(d).zip(out.chunks_mut(d))) {
            for ((h, &a), &b) in hrow.iter_mut().zip(xrow).zip(rrow) {
                *h = a + b;
            }
            let (rs, mu) = row_moments(hrow);
            for ((h, o), (&g, &b)) in hrow
                .iter_mut()
                .zip(orow.iter_mut())
                .zip(gv.data().iter().zip(bv.data()))
            {
                *h = (*h - mu) * rs;
                *o = *h * g + b;
            }
            rstd.push(rs);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        drop((xv, rv, gv, bv));
        Ok(self.push(out, vec![x.0, r.0, gain.0, bias.0], Op::AddLayerNorm { xhat, rstd }))
    }

    /// Row lookup: `indices` has shape `index_shape`; the output appends the
    /// table width.
    pub fn embedding(&self, table: Var, indices: &[usize], index_shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 || numel(index_shape) != indices.len() {
            return Err(Error::shape(format!(
                "embedding table {:?} with {} indices shaped {index_shape:?}",
                tv.shape(),
                indices.len()
            )));
        }
        let (rows, width) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(Error::IndexOutOfRange { index: i, len: rows });
            }
            out.extend_from_slice(&tv.data()[i * width..(i + 1) * width]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(width);
        let out = Tensor::new(shape, out)?;
        drop(tv);
        Ok(self.push(
            out,
            vec![table.0],
            Op::Embedding {
                indices: indices.to_vec(),
            },
        ))
    }

    /// Multi-head scaled dot-product attention along `seq_axis`.
    ///
    /// `q`, `k`, `v` carry features on their last axis and share every axis
    /// other than `seq_axis` (where keys may differ in length from queries)
    /// and the feature axis. Features split evenly into `heads`; scores are
    /// scaled by `1/sqrt(head_width)`. The output has the query shape with
    /// the value feature width.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize, seq_axis: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let plan = AttentionPlan::new(qv.shape(), kv.shape(), vv.shape(), heads, seq_axis)?;
        let scale = F::of(1.0 / (plan.dh as f64).sqrt());
        let block = plan.lq * plan.lk;
        let mut probs = vec![F::zero(); plan.batches * heads * block];
        let mut out = vec![F::zero(); numel(&plan.out_shape)];
        for bi in 0..plan.batches {
            for h in 0..heads {
                let p_off = (bi * heads + h) * block;
                let p = &mut probs[p_off..p_off + block];
                gemm(
                    scale,
                    qv.data(),
                    plan.q_view(bi, h),
                    kv.data(),
                    plan.k_view(bi, h).transposed(),
                    F::zero(),
                    p,
                    MatLayout::row_major(0, plan.lq, plan.lk),
                );
                for row in p.chunks_mut(plan.lk) {
                    softmax_row(row)?;
                }
                gemm(
                    F::one(),
                    &probs[p_off..p_off + block],
                    MatLayout::row_major(0, plan.lq, plan.lk),
                    vv.data(),
                    plan.v_view(bi, h),
                    F::zero(),
                    &mut out,
                    plan.o_view(bi, h),
                );
            }
        }
        let out = Tensor::new(plan.out_shape.clone(), out)?;
        drop((qv, kv, vv));
        let saved = AttentionSaved {
            heads,
            seq_axis,
            scale,
            probs,
            batches: plan.batches,
            lq: plan.lq,
            lk: plan.lk,
        };
        Ok(self.push(out, vec![q.0, k.0, v.0], Op::Attention(Box::new(saved))))
    }

    // ---- backward -------------------------------------------------------

    /// Propagates gradients from the scalar `loss` to every leaf created with
    /// [`Tape::param`].
    ///
    /// Fails with [`Error::NonFiniteGradient`] naming the producing record
    /// unless finite checks were turned off.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        let mut records = self.records.into_inner();
        let n = loss.0 + 1;
        records.truncate(n);
        let loss_value = records[loss.0].value.as_ref().expect("live value");
        if loss_value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), F::one()));

        for i in (0..n).rev() {
            let is_leaf = matches!(records[i].op, Op::Leaf);
            if is_leaf {
                if !records[i].requires_grad {
                    grads[i] = None;
                }
                continue;
            }
            let Some(g) = grads[i].take() else {
                records[i].value = None;
                continue;
            };
            if !records[i].requires_grad {
                records[i].value = None;
                continue;
            }
            let input_grads = {
                let rec = &records[i];
                let inputs: Vec<&Tensor<F>> = rec
                    .inputs
                    .iter()
                    .map(|&j| records[j].value.as_ref().expect("input value live"))
                    .collect();
                let needs: Vec<bool> = rec.inputs.iter().map(|&j| records[j].requires_grad).collect();
                let output = rec.value.as_ref().expect("output value live");
                backward_rule(&rec.op, &inputs, output, &g, &needs)?
            };
            let op_name = records[i].op.kind().name();
            for (&j, gj) in records[i].inputs.iter().zip(input_grads) {
                let Some(gj) = gj else { continue };
                if !records[j].requires_grad {
                    continue;
                }
                if self.check_finite && !gj.all_finite() {
                    return Err(Error::NonFiniteGradient { record: i, op: op_name });
                }
                match &mut grads[j] {
                    Some(acc) => add_into(acc, &gj),
                    slot => *slot = Some(gj),
                }
            }
            records[i].value = None;
        }
        Ok(Gradients { grads })
    }
}

struct MatMulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_off: Vec<usize>,
    b_off: Vec<usize>,
    out_shape: Vec<usize>,
}

impl MatMulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 || a[a.len() - 1] != b[b.len() - 2] {
            return Err(Error::shape(format!("matmul of {a:?} and {b:?}")));
        }
        let (a_batch, b_batch) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let batch_shape = broadcast_shape(a_batch, b_batch)?;
        let a_off = broadcast_offsets(a_batch, &batch_shape)?;
        let b_off = broadcast_offsets(b_batch, &batch_shape)?;
        let (m, k, n) = (a[a.len() - 2], a[a.len() - 1], b[b.len() - 1]);
        let mut out_shape = batch_shape.clone();
        out_shape.extend([m, n]);
        Ok(Self {
            batch: numel(&batch_shape),
            m,
            k,
            n,
            a_off,
            b_off,
            out_shape,
        })
    }
}

struct AttentionPlan {
    batches: usize,
    heads: usize,
    lq: usize,
    lk: usize,
    dh: usize,
    dvh: usize,
    q_offs: Vec<usize>,
    k_offs: Vec<usize>,
    v_offs: Vec<usize>,
    o_offs: Vec<usize>,
    q_row: usize,
    k_row: usize,
    v_row: usize,
    o_row: usize,
    out_shape: Vec<usize>,
}

impl AttentionPlan {
    fn new(q: &[usize], k: &[usize], v: &[usize], heads: usize, seq_axis: usize) -> Result<Self> {
        let rank = q.len();
        let bad = || Error::shape(format!("attention over axis {seq_axis} of q {q:?}, k {k:?}, v {v:?}"));
        if rank < 2 || seq_axis >= rank - 1 || k.len() != rank || v.len() != rank {
            return Err(bad());
        }
        for axis in 0..rank - 1 {
            if axis != seq_axis && (q[axis] != k[axis] || q[axis] != v[axis]) {
                return Err(bad());
            }
        }
        if k[seq_axis] != v[seq_axis] || q[rank - 1] != k[rank - 1] {
            return Err(bad());
        }
        let (dq, dv) = (q[rank - 1], v[rank - 1]);
        if heads == 0 || dq % heads != 0 || dv % heads != 0 {
            return Err(Error::Config(format!(
                "feature widths {dq}/{dv} not divisible by {heads} heads"
            )));
        }
        let mut out_shape = q.to_vec();
        out_shape[rank - 1] = dv;
        let q_offs = batch_offsets(q, seq_axis);
        Ok(Self {
            batches: q_offs.len(),
            heads,
            lq: q[seq_axis],
            lk: k[seq_axis],
            dh: dq / heads,
            dvh: dv / heads,
            k_offs: batch_offsets(k, seq_axis),
            v_offs: batch_offsets(v, seq_axis),
            o_offs: batch_offsets(&out_shape, seq_axis),
            q_offs,
            q_row: strides(q)[seq_axis],
            k_row: strides(k)[seq_axis],
            v_row: strides(v)[seq_axis],
            o_row: strides(&out_shape)[seq_axis],
            out_shape,
        })
    }

    fn view(offset: usize, rows: usize, cols: usize, row_stride: usize) -> MatLayout {
        MatLayout {
            offset,
            rows,
            cols,
            row_stride,
            col_stride: 1,
        }
    }

    fn q_view(&self, bi: usize, h: usize) -> MatLayout {
        Self::view(self.q_offs[bi] + h * self.dh, self.lq, self.dh, self.q_row)
    }

    fn k_view(&self, bi: usize, h: usize) -> MatLayout {
        Self::view(self.k_offs[bi] + h * self.dh, self.lk, self.dh, self.k_row)
    }

    fn v_view(&self, bi: usize, h: usize) -> MatLayout {
        Self::view(self.v_offs[bi] + h * self.dvh, self.lk, self.dvh, self.v_row)
    }

    fn o_view(&self, bi: usize, h: usize) -> MatLayout {
        Self::view(self.o_offs[bi] + h * self.dvh, self.lq, self.dvh, self.o_row)
    }
}

/// `(1/sqrt(var + eps), mean)` of a row, accumulated in 64-bit.
fn row_moments<F: Element>(row: &[F]) -> (F, F) {
    let d = row.len() as f64;
    let mu = row.iter().map(|v| v.as_f64()).sum::<f64>() / d;
    let var = row.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>() / d;
    (F::of(1.0 / (var + LAYER_NORM_EPS).sqrt()), F::of(mu))
}

/// Input gradient of a normalized row plus gain/bias accumulation.
fn layer_norm_row_backward<F: Element>(
    xhat: &[F],
    g: &[F],
    gain: &[F],
    rs: F,
    ggain: &mut [F],
    gbias: &mut [F],
    dst: &mut [F],
) {
    let d = F::of(xhat.len() as f64);
    let (mut m1, mut m2) = (F::zero(), F::zero());
    for j in 0..xhat.len() {
        let dx = g[j] * gain[j];
        ggain[j] += g[j] * xhat[j];
        gbias[j] += g[j];
        m1 += dx;
        m2 += dx * xhat[j];
        dst[j] = dx;
    }
    let (m1, m2) = (m1 / d, m2 / d);
    for j in 0..xhat.len() {
        dst[j] = rs * (dst[j] - m1 - xhat[j] * m2);
    }
}

fn softmax_row<F: Element>(row: &mut [F]) -> Result<()> {
    let bound = F::max_value();
    if !row.iter().fold(true, |ok, &v| ok & (v.abs() <= bound)) {
        return Err(Error::NonFiniteLogits);
    }
    let mut lanes = [F::neg_infinity(); 8];
    for c in row.chunks(8) {
        for (m, &v) in lanes.iter_mut().zip(c) {
            *m = if v > *m { v } else { *m };
        }
    }
    let max = lanes.iter().fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
    let sum = F::exp_shifted(row, max);
    let inv = F::of(1.0 / sum);
    for v in row.iter_mut() {
        *v = *v * inv;
    }
    Ok(())
}

fn softmax_forward<F: Element>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    if axis >= x.rank() {
        return Err(Error::shape(format!("softmax axis {axis} on {:?}", x.shape())));
    }
    let len = x.shape()[axis];
    let inner = numel(&x.shape()[axis + 1..]);
    let mut out = x.clone();
    if inner == 1 {
        for row in out.data_mut().chunks_mut(len) {
            softmax_row(row)?;
        }
        return Ok(out);
    }
    let mut buf = vec![F::zero(); len];
    for chunk in out.data_mut().chunks_mut(len * inner) {
        for i in 0..inner {
            for j in 0..len {
                buf[j] = chunk[j * inner + i];
            }
            softmax_row(&mut buf)?;
            for j in 0..len {
                chunk[j * inner + i] = buf[j];
            }
        }
    }
    Ok(out)
}

fn backward_rule<F: Element>(
    op: &Op<F>,
    inputs: &[&Tensor<F>],
    output: &Tensor<F>,
    g: &Tensor<F>,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<F>>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    Ok(match op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![
            Some(reduce_to(g, inputs[0].shape())?),
            Some(reduce_to(g, inputs[1].shape())?),
        ],
        Op::Sub => vec![
            Some(reduce_to(g, inputs[0].shape())?),
            Some(reduce_to(&g.map(|v| -v), inputs[1].shape())?),
        ],
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let ga = if want(0) {
                Some(reduce_to(&broadcast_binary(g, b, |x, y| x * y)?, a.shape())?)
            } else {
                None
            };
            let gb = if want(1) {
                Some(reduce_to(&broadcast_binary(g, a, |x, y| x * y)?, b.shape())?)
            } else {
                None
            };
            vec![ga, gb]
        }
        Op::Scale(c) => vec![Some(g.map(|v| v * *c))],
        Op::Relu => vec![Some(zip_with(
            g,
            output,
            |gv, y| {
                if y > F::zero() {
                    gv
                } else {
                    F::zero()
                }
            },
        ))],
        Op::Gelu => vec![Some(zip_with(g, inputs[0], |gv, x| {
            gv * F::of(gelu_grad_f64(x.as_f64()))
        }))],
        Op::Abs => vec![Some(zip_with(g, inputs[0], |gv, x| {
            if x > F::zero() {
                gv
            } else if x < F::zero() {
                -gv
            } else {
                F::zero()
            }
        }))],
        Op::Dropout { mask } => {
            let data = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
            vec![Some(Tensor::new(g.shape().to_vec(), data)?)]
        }
        Op::Sum => vec![Some(Tensor::full(inputs[0].shape(), g.item()))],
        Op::Mean => {
            let n = F::of(inputs[0].len() as f64);
            vec![Some(Tensor::full(inputs[0].shape(), g.item() / n))]
        }
        Op::Reshape => vec![Some(g.reshape(inputs[0].shape())?)],
        Op::Permute(perm) => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            vec![Some(g.permute(&inverse)?)]
        }
        Op::BroadcastTo => vec![Some(reduce_to(g, inputs[0].shape())?)],
        Op::Concat { axis, sizes } => g.split(*axis, sizes)?.into_iter().map(Some).collect(),
        Op::Narrow { axis, start } => {
            let shape = inputs[0].shape();
            let inner = numel(&shape[axis + 1..]);
            let full = shape[*axis] * inner;
            let part = g.shape()[*axis] * inner;
            let mut out = Tensor::zeros(shape);
            for (o, chunk) in g.data().chunks(part).enumerate() {
                let base = o * full + start * inner;
                out.data_mut()[base..base + part].copy_from_slice(chunk);
            }
            vec![Some(out)]
        }
        Op::Softmax { axis } => {
            let len = output.shape()[*axis];
            let inner = numel(&output.shape()[axis + 1..]);
            let mut out = Tensor::zeros(output.shape());
            let (y, gd) = (output.data(), g.data());
            let dst = out.data_mut();
            for base in (0..y.len()).step_by(len * inner) {
                for i in 0..inner {
                    let idx = |j: usize| base + j * inner + i;
                    let dot: f64 = (0..len).map(|j| (gd[idx(j)] * y[idx(j)]).as_f64()).sum();
                    let dot = F::of(dot);
                    for j in 0..len {
                        dst[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                    }
                }
            }
            vec![Some(out)]
        }
        Op::LayerNorm { mean, rstd } => {
            let (x, gain) = (inputs[0], inputs[1]);
            let d = gain.len();
            let mut gx = Tensor::zeros(x.shape());
            let mut ggain = vec![0.0f64; d];
            let mut gbias = vec![0.0f64; d];
            let mut xhat = vec![0.0f64; d];
            let mut dxhat = vec![0.0f64; d];
            for (r, (row, grow)) in x.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
                let (mu, rs) = (mean[r].as_f64(), rstd[r].as_f64());
                let (mut m1, mut m2) = (0.0, 0.0);
                for j in 0..d {
                    xhat[j] = (row[j].as_f64() - mu) * rs;
                    let gj = grow[j].as_f64();
                    ggain[j] += gj * xhat[j];
                    gbias[j] += gj;
                    dxhat[j] = gj * gain.data()[j].as_f64();
                    m1 += dxhat[j];
                    m2 += dxhat[j] * xhat[j];
                }
                m1 /= d as f64;
                m2 /= d as f64;
                let dst = &mut gx.data_mut()[r * d..(r + 1) * d];
                for j in 0..d {
                    dst[j] = F::of(rs * (dxhat[j] - m1 - xhat[j] * m2));
                }
            }
            vec![
                Some(gx),
                Some(Tensor::from_f64(&[d], &ggain)?),
                Some(Tensor::from_f64(&[d], &gbias)?),
            ]
        }
        Op::AddLayerNorm { xhat, rstd } => {
            let gain = inputs[2];
            let d = gain.len();
            let mut gx = Tensor::zeros(inputs[0].shape());
            let mut ggain = vec![F::zero(); d];
            let mut gbias = vec![F::zero(); d];
            let rows = xhat.chunks(d).zip(g.data().chunks(d)).zip(gx.data_mut().chunks_mut(d));
            for (r, ((h, grow), dst)) in rows.enumerate() {
                layer_norm_row_backward(h, grow, gain.data(), rstd[r], &mut ggain, &mut gbias, dst);
            }
            let gr = (want(0) && want(1)).then(|| gx.clone());
            let (gx, gr) = if want(0) { (Some(gx), gr) } else { (None, Some(gx)) };
            vec![
                gx,
                gr,
                Some(Tensor::new(vec![d], ggain)?),
                Some(Tensor::new(vec![d], gbias)?),
            ]
        }
        Op::Embedding { indices } => {
            let table = inputs[0];
            let width = table.shape()[1];
            let mut gt = Tensor::zeros(table.shape());
            for (&i, grow) in indices.iter().zip(g.data().chunks(width)) {
                for (d, &v) in gt.data_mut()[i * width..(i + 1) * width].iter_mut().zip(grow) {
                    *d += v;
                }
            }
            vec![Some(gt)]
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let plan = MatMulPlan::new(a.shape(), b.shape())?;
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let mut ga = want(0).then(|| Tensor::zeros(a.shape()));
            let mut gb = want(1).then(|| Tensor::zeros(b.shape()));
            for i in 0..plan.batch {
                let gview = MatLayout::row_major(i * m * n, m, n);
                let aview = MatLayout::row_major(plan.a_off[i] * m * k, m, k);
                let bview = MatLayout::row_major(plan.b_off[i] * k * n, k, n);
                if let Some(ga) = ga.as_mut() {
                    gemm(
                        F::one(),
                        g.data(),
                        gview,
                        b.data(),
                        bview.transposed(),
                        F::one(),
                        ga.data_mut(),
                        aview,
                    );
                }
                if let Some(gb) = gb.as_mut() {
                    gemm(
                        F::one(),
                        a.data(),
                        aview.transposed(),
                        g.data(),
                        gview,
                        F::one(),
                        gb.data_mut(),
                        bview,
                    );
                }
            }
            vec![ga, gb]
        }
        Op::Linear { relu } => {
            let (x, w) = (inputs[0], inputs[1]);
            let (din, dout) = (w.shape()[0], w.shape()[1]);
            let rows = x.len() / din;
            let masked;
            let g = if *relu {
                masked = zip_with(g, output, |gv, y| if y > F::zero() { gv } else { F::zero() });
                &masked
            } else {
                g
            };
            let gview = MatLayout::row_major(0, rows, dout);
            let xview = MatLayout::row_major(0, rows, din);
            let wview = MatLayout::row_major(0, din, dout);
            let gx = want(0).then(|| {
                let mut gx = Tensor::zeros(x.shape());
                gemm(
                    F::one(),
                    g.data(),
                    gview,
                    w.data(),
                    wview.transposed(),
                    F::zero(),
                    gx.data_mut(),
                    xview,
                );
                gx
            });
            let gw = want(1).then(|| {
                let mut gw = Tensor::zeros(w.shape());
                gemm(
                    F::one(),
                    x.data(),
                    xview.transposed(),
                    g.data(),
                    gview,
                    F::zero(),
                    gw.data_mut(),
                    wview,
                );
                gw
            });
            let mut grads = vec![gx, gw];
            if inputs.len() == 3 {
                let mut gb = vec![0.0f64; dout];
                for row in g.data().chunks(dout) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v.as_f64();
                    }
                }
                grads.push(Some(Tensor::from_f64(&[dout], &gb)?));
            }
            grads
        }
        Op::Attention(saved) => attention_backward(saved, inputs, g, needs)?,
    })
}

fn attention_backward<F: Element>(
    saved: &AttentionSaved<F>,
    inputs: &[&Tensor<F>],
    g: &Tensor<F>,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<F>>>> {
    let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
    let plan = AttentionPlan::new(q.shape(), k.shape(), v.shape(), saved.heads, saved.seq_axis)?;
    let (lq, lk) = (plan.lq, plan.lk);
    let block = lq * lk;
    let mut gq = Tensor::zeros(q.shape());
    let mut gk = Tensor::zeros(k.shape());
    let mut gv = Tensor::zeros(v.shape());
    let mut dp = vec![F::zero(); block];
    let square = MatLayout::row_major(0, lq, lk);
    for bi in 0..plan.batches {
        for h in 0..plan.heads {
            let p_off = (bi * plan.heads + h) * block;
            let p = &saved.probs[p_off..p_off + block];
            let gview = plan.o_view(bi, h);
            if needs[2] {
                gemm(
                    F::one(),
                    p,
                    square.transposed(),
                    g.data(),
                    gview,
                    F::one(),
                    gv.data_mut(),
                    plan.v_view(bi, h),
                );
            }
            if !(needs[0] || needs[1]) {
                continue;
            }
            gemm(
                F::one(),
                g.data(),
                gview,
                v.data(),
                plan.v_view(bi, h).transposed(),
                F::zero(),
                &mut dp,
                square,
            );
            for (prow, drow) in p.chunks(lk).zip(dp.chunks_mut(lk)) {
                let dot: F = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot) * saved.scale;
                }
            }
            if needs[0] {
                gemm(
                    F::one(),
                    &dp,
                    square,
                    k.data(),
                    plan.k_view(bi, h),
                    F::one(),
                    gq.data_mut(),
                    plan.q_view(bi, h),
                );
            }
            if needs[1] {
                gemm(
                    F::one(),
                    &dp,
                    square.transposed(),
                    q.data(),
                    plan.q_view(bi, h),
                    F::one(),
                    gk.data_mut(),
                    plan.k_view(bi, h),
                );
            }
        }
    }
    Ok(vec![Some(gq), Some(gk), Some(gv)])
}
