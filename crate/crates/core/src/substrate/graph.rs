//! Tape of differentiable array operations.
//!
//! Every builder method evaluates its forward pass immediately and records
//! the operation; [`Graph::backward`] replays the tape in reverse. Parameters
//! enter through [`Graph::param`] and their gradients are pushed back into the
//! owning [`ParamStore`] with [`Graph::accumulate_into`].

use std::collections::HashMap;

use log::warn;
use rand::Rng;

use super::tensor::axis_split;
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Additive bias applied to masked softmax logits before normalisation.
pub const MASK_BIAS: f64 = -1e30;

/// Floor applied to probabilities inside [`Graph::nll`].
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    Softmax {
        src: Var,
        axis: usize,
    },
    Tanh(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    Dropout {
        src: Var,
        keep: Vec<f64>,
    },
    MeanPool {
        src: Var,
        axis: usize,
        weights: Vec<f64>,
    },
    RowDistance {
        point: Var,
        rows: Var,
    },
    NormalizeSum(Var),
    Reciprocal(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        gold: Vec<usize>,
        active: Vec<bool>,
    },
    Nll {
        probs: Var,
        gold: Vec<usize>,
        active: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Expands a {0,1} mask whose shape equals `shape` or a suffix of it.
fn expand_mask(op: &'static str, mask: &Tensor, shape: &[usize]) -> Result<Vec<bool>> {
    let ms = mask.shape();
    if ms.len() > shape.len() || shape[shape.len() - ms.len()..] != *ms {
        return Err(Error::shape(op, format!("mask {ms:?} does not broadcast to {shape:?}")));
    }
    let total: usize = shape.iter().product();
    let m = mask.len().max(1);
    Ok((0..total).map(|i| mask.data()[i % m] != 0.0).collect())
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op, &value)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op: kind,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is tracked and readable from [`Gradients`].
    pub fn input_with_grad(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node,
    /// so a parameter used in several places accumulates one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param,
            needs_grad: p.requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        Ok(self.param(store, store.id(name)?))
    }

    /// `a[..., k] x b[k, n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.shape().is_empty() || ta.cols() != tb.shape()[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (ta.data(), tb.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = t.data()[i * c + j];
            }
        }
        self.push("transpose", Tensor::new(vec![c, r], out)?, Op::Transpose(a), &[a])
    }

    /// Elementwise sum; `b` may have the shape of a trailing suffix of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", format!("{sa:?} + {sb:?}")));
        }
        let m = tb.len();
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % m])
            .collect();
        let shape = sa.to_vec();
        self.push("add", Tensor::new(shape, out)?, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product of equal-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", format!("{:?} * {:?}", ta.shape(), tb.shape())));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        self.push("mul", Tensor::new(shape, out)?, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|x| x * c).collect();
        let shape = t.shape().to_vec();
        self.push("scale", Tensor::new(shape, out)?, Op::Scale(a, c), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", format!("{base:?} with {s:?}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, src: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(src);
        let s = t.shape();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(Error::shape("slice", format!("{start}..{end} on axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = axis_split(s, axis);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = end - start;
        self.push(
            "slice",
            Tensor::new(shape, out)?,
            Op::Slice { src, axis, start },
            &[src],
        )
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(src).clone().reshaped(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(src), &[src])
    }

    /// Selects rows of `table` along its first axis; rows may repeat.
    pub fn embedding_lookup(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let s = t.shape();
        if s.is_empty() {
            return Err(Error::shape("embedding_lookup", "scalar table"));
        }
        let width: usize = s[1..].iter().product();
        if let Some(bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(Error::shape(
                "embedding_lookup",
                format!("row {bad} out of range for {s:?}"),
            ));
        }
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
        }
        let mut shape = s.to_vec();
        shape[0] = rows.len();
        self.push(
            "embedding_lookup",
            Tensor::new(shape, out)?,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            &[table],
        )
    }

    /// Softmax along `axis`. Masked positions (mask value 0) get exactly 0.
    /// The mask must have the source shape or a trailing suffix of it.
    pub fn softmax(&mut self, src: Var, axis: usize, mask: Option<&Tensor>) -> Result<Var> {
        let t = self.value(src);
        let s = t.shape().to_vec();
        if axis >= s.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for {s:?}")));
        }
        let active = match mask {
            Some(m) => Some(expand_mask("softmax", m, &s)?),
            None => None,
        };
        let (outer, len, inner) = axis_split(&s, axis);
        let mut out = vec![0.0; t.len()];
        let data = t.data();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let on = |k: usize| active.as_ref().is_none_or(|a| a[idx(k)]);
                let logit = |k: usize| {
                    if on(k) {
                        data[idx(k)]
                    } else {
                        data[idx(k)] + MASK_BIAS
                    }
                };
                let max = (0..len).map(logit).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (logit(k) - max).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] = if on(k) { out[idx(k)] / z } else { 0.0 };
                }
            }
        }
        self.push("softmax", Tensor::new(s, out)?, Op::Softmax { src, axis }, &[src])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|x| x.tanh()).collect();
        let shape = t.shape().to_vec();
        self.push("tanh", Tensor::new(shape, out)?, Op::Tanh(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|&x| gelu(x)).collect();
        let shape = t.shape().to_vec();
        self.push("gelu", Tensor::new(shape, out)?, Op::Gelu(a), &[a])
    }

    /// Normalises over the last axis, then applies `gain` and `bias` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "{:?} with gain {:?}, bias {:?}",
                    t.shape(),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row(r);
            let (mean, rstd) = moments(row, eps);
            out.extend(row.iter().enumerate().map(|(j, &v)| (v - mean) * rstd * g[j] + b[j]));
        }
        let shape = t.shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gain, bias, eps },
            &[x, gain, bias],
        )
    }

    /// Inverted dropout. Identity (no node) when not training or `p == 0`.
    pub fn dropout<R: Rng>(&mut self, src: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !train || p == 0.0 {
            return Ok(src);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid(format!("dropout probability {p}")));
        }
        let t = self.value(src);
        let keep: Vec<f64> = (0..t.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
            .collect();
        let out: Vec<f64> = t.data().iter().zip(&keep).map(|(x, k)| x * k).collect();
        let shape = t.shape().to_vec();
        self.push("dropout", Tensor::new(shape, out)?, Op::Dropout { src, keep }, &[src])
    }

    /// Mean over `axis`, counting only unmasked positions. The mask covers
    /// the axes up to and including `axis` and broadcasts over the rest.
    pub fn mean_pool(&mut self, src: Var, axis: usize, mask: Option<&Tensor>) -> Result<Var> {
        let t = self.value(src);
        let s = t.shape().to_vec();
        if axis >= s.len() {
            return Err(Error::shape("mean_pool", format!("axis {axis} for {s:?}")));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let mask_flags: Vec<bool> = match mask {
            Some(m) => {
                if m.shape() != &s[..=axis] {
                    return Err(Error::shape(
                        "mean_pool",
                        format!("mask {:?} for {s:?} axis {axis}", m.shape()),
                    ));
                }
                m.data().iter().map(|&v| v != 0.0).collect()
            }
            None => vec![true; outer * len],
        };
        let mut weights = vec![0.0; outer * len];
        for o in 0..outer {
            let count = (0..len).filter(|&k| mask_flags[o * len + k]).count();
            if count == 0 {
                return Err(Error::Invalid(format!("mean_pool: slice {o} is fully masked")));
            }
            for k in 0..len {
                if mask_flags[o * len + k] {
                    weights[o * len + k] = 1.0 / count as f64;
                }
            }
        }
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let w = weights[o * len + k];
                if w == 0.0 {
                    continue;
                }
                for i in 0..inner {
                    out[o * inner + i] += w * t.data()[(o * len + k) * inner + i];
                }
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        self.push(
            "mean_pool",
            Tensor::new(shape, out)?,
            Op::MeanPool { src, axis, weights },
            &[src],
        )
    }

    /// Euclidean distance from `point` (`d` elements) to each row of `rows` (`[m, d]`).
    pub fn euclidean_distance_rows(&mut self, point: Var, rows: Var) -> Result<Var> {
        let (p, r) = (self.value(point), self.value(rows));
        if r.shape().len() != 2 || p.len() != r.cols() {
            return Err(Error::shape(
                "euclidean_distance_rows",
                format!("{:?} vs {:?}", p.shape(), r.shape()),
            ));
        }
        let out: Vec<f64> = (0..r.rows())
            .map(|i| {
                r.row(i)
                    .iter()
                    .zip(p.data())
                    .map(|(a, b)| (b - a) * (b - a))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let m = out.len();
        self.push(
            "euclidean_distance_rows",
            Tensor::new(vec![m], out)?,
            Op::RowDistance { point, rows },
            &[point, rows],
        )
    }

    /// Divides each last-axis row by its sum. A row summing to exactly zero
    /// becomes uniform, with zero gradient.
    pub fn normalize_sum(&mut self, src: Var) -> Result<Var> {
        let t = self.value(src);
        let c = t.cols();
        let mut out = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row(r);
            let s: f64 = row.iter().sum();
            if s == 0.0 {
                out.extend(std::iter::repeat_n(1.0 / c as f64, c));
            } else {
                out.extend(row.iter().map(|v| v / s));
            }
        }
        let shape = t.shape().to_vec();
        self.push("normalize_sum", Tensor::new(shape, out)?, Op::NormalizeSum(src), &[src])
    }

    /// `1 / (x + eps)` elementwise.
    pub fn reciprocal(&mut self, src: Var, eps: f64) -> Result<Var> {
        let t = self.value(src);
        let out: Vec<f64> = t.data().iter().map(|x| 1.0 / (x + eps)).collect();
        let shape = t.shape().to_vec();
        self.push("reciprocal", Tensor::new(shape, out)?, Op::Reciprocal(src), &[src])
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, src: Var) -> Result<Var> {
        let s: f64 = self.value(src).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(src), &[src])
    }

    /// Mean negative log-softmax of the gold class over active rows of `logits[n, L]`.
    pub fn cross_entropy(&mut self, logits: Var, gold: &[usize], active: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        check_rows("cross_entropy", t, gold, active)?;
        let n_eff = active.iter().filter(|&&a| a).count() as f64;
        let mut loss = 0.0;
        for (r, (&g, &on)) in gold.iter().zip(active).enumerate() {
            if !on {
                continue;
            }
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[g];
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(loss / n_eff),
            Op::CrossEntropy {
                logits,
                gold: gold.to_vec(),
                active: active.to_vec(),
            },
            &[logits],
        )
    }

    /// Mean negative log-probability of the gold class over active rows of a
    /// probability matrix. Probabilities below [`PROB_FLOOR`] are clamped.
    pub fn nll(&mut self, probs: Var, gold: &[usize], active: &[bool]) -> Result<Var> {
        let t = self.value(probs);
        check_rows("nll", t, gold, active)?;
        let n_eff = active.iter().filter(|&&a| a).count() as f64;
        let mut loss = 0.0;
        for (r, (&g, &on)) in gold.iter().zip(active).enumerate() {
            if !on {
                continue;
            }
            let p = t.row(r)[g];
            if p < PROB_FLOOR {
                warn!("nll: gold probability {p:e} at row {r} clamped to {PROB_FLOOR:e}");
            }
            loss -= p.max(PROB_FLOOR).ln();
        }
        self.push(
            "nll",
            Tensor::scalar(loss / n_eff),
            Op::Nll {
                probs,
                gold: gold.to_vec(),
                active: active.to_vec(),
            },
            &[probs],
        )
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(self.shape(root), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].needs_grad {
                self.backprop_node(idx, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Adds parameter gradients into the store (frozen parameters are skipped).
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(id, g)?;
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            da[i * k + p] = brow.iter().zip(&gd[i * n..(i + 1) * n]).map(|(x, y)| x * y).sum();
                        }
                    }
                    add_grad(grads, *a, ta.shape(), da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    add_grad(grads, *b, tb.shape(), db);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = gd[j * r + i];
                    }
                }
                add_grad(grads, *a, s, da);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_grad(grads, *a, self.shape(*a), gd.to_vec());
                }
                if self.wants(*b) {
                    let m = self.value(*b).len();
                    let mut db = vec![0.0; m];
                    for (i, &v) in gd.iter().enumerate() {
                        db[i % m] += v;
                    }
                    add_grad(grads, *b, self.shape(*b), db);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let da = gd.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    add_grad(grads, *a, ta.shape(), da);
                }
                if self.wants(*b) {
                    let db = gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    add_grad(grads, *b, tb.shape(), db);
                }
            }
            Op::Scale(a, c) => {
                add_grad(grads, *a, self.shape(*a), gd.iter().map(|v| v * c).collect());
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if self.wants(*p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        add_grad(grads, *p, self.shape(*p), dp);
                    }
                    offset += len;
                }
            }
            Op::Slice { src, axis, start } => {
                let s = self.shape(*src);
                let (outer, len, inner) = axis_split(s, *axis);
                let width = node.value.shape()[*axis];
                let mut ds = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let from = o * width * inner;
                    ds[dst..dst + width * inner].copy_from_slice(&gd[from..from + width * inner]);
                }
                add_grad(grads, *src, s, ds);
            }
            Op::Reshape(src) => {
                add_grad(grads, *src, self.shape(*src), gd.to_vec());
            }
            Op::Gather { table, rows } => {
                let s = self.shape(*table);
                let width: usize = s[1..].iter().product();
                let mut dt = vec![0.0; self.value(*table).len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..width {
                        dt[r * width + j] += gd[i * width + j];
                    }
                }
                add_grad(grads, *table, s, dt);
            }
            Op::Softmax { src, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] = y[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                add_grad(grads, *src, self.shape(*src), dx);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                add_grad(grads, *a, self.shape(*a), dx);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let dx = gd.iter().zip(x).map(|(g, &v)| g * gelu_grad(v)).collect();
                add_grad(grads, *a, self.shape(*a), dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let tx = self.value(*x);
                let gv = self.value(*gain).data();
                let d = tx.cols();
                let mut dx = vec![0.0; tx.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..tx.rows() {
                    let row = tx.row(r);
                    let (mean, rstd) = moments(row, *eps);
                    let grow = &gd[r * d..(r + 1) * d];
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                }
                if self.wants(*x) {
                    add_grad(grads, *x, tx.shape(), dx);
                }
                if self.wants(*gain) {
                    add_grad(grads, *gain, self.shape(*gain), dgain);
                }
                if self.wants(*bias) {
                    add_grad(grads, *bias, self.shape(*bias), dbias);
                }
            }
            Op::Dropout { src, keep } => {
                let dx = gd.iter().zip(keep).map(|(g, k)| g * k).collect();
                add_grad(grads, *src, self.shape(*src), dx);
            }
            Op::MeanPool { src, axis, weights } => {
                let s = self.shape(*src);
                let (outer, len, inner) = axis_split(s, *axis);
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        let w = weights[o * len + k];
                        for i in 0..inner {
                            dx[(o * len + k) * inner + i] = w * gd[o * inner + i];
                        }
                    }
                }
                add_grad(grads, *src, s, dx);
            }
            Op::RowDistance { point, rows } => {
                let (p, r) = (self.value(*point), self.value(*rows));
                let dist = node.value.data();
                let d = r.cols();
                let mut dp = vec![0.0; d];
                let mut dr = vec![0.0; r.len()];
                for i in 0..r.rows() {
                    // Subgradient 0 at zero distance.
                    if dist[i] == 0.0 {
                        continue;
                    }
                    let coef = gd[i] / dist[i];
                    for j in 0..d {
                        let diff = p.data()[j] - r.data()[i * d + j];
                        dp[j] += coef * diff;
                        dr[i * d + j] -= coef * diff;
                    }
                }
                if self.wants(*point) {
                    add_grad(grads, *point, p.shape(), dp);
                }
                if self.wants(*rows) {
                    add_grad(grads, *rows, r.shape(), dr);
                }
            }
            Op::NormalizeSum(src) => {
                let x = self.value(*src);
                let c = x.cols();
                let mut dx = vec![0.0; x.len()];
                for r in 0..x.rows() {
                    let row = x.row(r);
                    let s: f64 = row.iter().sum();
                    if s == 0.0 {
                        continue;
                    }
                    let grow = &gd[r * c..(r + 1) * c];
                    let dot: f64 = grow.iter().zip(row).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = grow[j] / s - dot / (s * s);
                    }
                }
                add_grad(grads, *src, x.shape(), dx);
            }
            Op::Reciprocal(src) => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(g, v)| -g * v * v).collect();
                add_grad(grads, *src, self.shape(*src), dx);
            }
            Op::Sum(src) => {
                let n = self.value(*src).len();
                add_grad(grads, *src, self.shape(*src), vec![gd[0]; n]);
            }
            Op::CrossEntropy { logits, gold, active } => {
                let t = self.value(*logits);
                let c = t.cols();
                let n_eff = active.iter().filter(|&&a| a).count() as f64;
                let mut dx = vec![0.0; t.len()];
                for (r, (&gl, &on)) in gold.iter().zip(active).enumerate() {
                    if !on {
                        continue;
                    }
                    let row = t.row(r);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] - max).exp() / z;
                        let target = if j == gl { 1.0 } else { 0.0 };
                        dx[r * c + j] = gd[0] * (p - target) / n_eff;
                    }
                }
                add_grad(grads, *logits, t.shape(), dx);
            }
            Op::Nll { probs, gold, active } => {
                let t = self.value(*probs);
                let c = t.cols();
                let n_eff = active.iter().filter(|&&a| a).count() as f64;
                let mut dx = vec![0.0; t.len()];
                for (r, (&gl, &on)) in gold.iter().zip(active).enumerate() {
                    let p = t.row(r)[gl];
                    if on && p >= PROB_FLOOR {
                        dx[r * c + gl] = -gd[0] / (n_eff * p);
                    }
                }
                add_grad(grads, *probs, t.shape(), dx);
            }
        }
        Ok(())
    }
}

fn check_rows(op: &'static str, t: &Tensor, gold: &[usize], active: &[bool]) -> Result<()> {
    if t.shape().len() != 2 || gold.len() != t.rows() || active.len() != t.rows() {
        return Err(Error::shape(
            op,
            format!(
                "{:?} with {} gold labels and {} mask entries",
                t.shape(),
                gold.len(),
                active.len()
            ),
        ));
    }
    if let Some(g) = gold.iter().find(|&&g| g >= t.cols()) {
        return Err(Error::shape(op, format!("gold index {g} >= {}", t.cols())));
    }
    if !active.iter().any(|&a| a) {
        return Err(Error::Invalid(format!("{op}: no active rows")));
    }
    Ok(())
}

fn add_grad(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(&data) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape"));
        }
    }
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
