//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! Node ids are assigned in creation order, which is a topological order,
//! so the backward sweep is a single reverse pass over the ids.

use std::cell::RefCell;
use std::sync::Arc;

use crate::attention::{attention_backward, attention_forward, AttnLayout, AttnSaved};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{gelu_grad_scalar, split_axis, Tensor};

enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    Sum(usize),
    MatMul(usize, usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    SelectRows {
        x: usize,
        rows: Vec<usize>,
    },
    Reshape(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        rows: Vec<usize>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        layout: Arc<AttnLayout>,
        saved: AttnSaved<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Record of one forward pass. Owned by a single training step.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
    check_finite: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Scalar> {
    tape: &'t Tape<F>,
    id: usize,
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var<'_, F>) -> Option<&Tensor<F>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, F>) -> Option<Tensor<F>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    /// Non-finite checks follow the build profile: on in debug, off in release.
    pub fn new() -> Self {
        Self::with_finite_checks(cfg!(debug_assertions))
    }

    pub fn with_finite_checks(check_finite: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            check_finite,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[usize]) -> Result<Var<'_, F>> {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let needs_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].needs_grad)
        };
        Ok(self.push(value, op, needs_grad))
    }

    fn value(&self, id: usize) -> Tensor<F> {
        self.nodes.borrow()[id].value.clone()
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
        let values: Vec<Tensor<F>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<F>> = values.iter().collect();
        let out = Tensor::concat(&refs, axis)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.record("concat", out, Op::Concat { parts: ids.clone(), axis }, &ids)
    }

    pub fn embedding<'t>(&'t self, table: Var<'t, F>, ids: &[usize]) -> Result<Var<'t, F>> {
        let out = Tensor::embedding(&table.value(), ids)?;
        self.record(
            "embedding",
            out,
            Op::Embedding {
                table: table.id,
                ids: ids.to_vec(),
            },
            &[table.id],
        )
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward needs a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.value.is_finite() {
            return Err(TensorError::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(if root.value.rank() == 0 {
            Tensor::scalar(F::one())
        } else {
            Tensor::full(root.value.shape().to_vec(), F::one())
        });

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Tensor<F>>], nodes: &[Node<F>], id: usize, delta: Vec<F>) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                *e = *e + d;
            }
        }
        slot @ None => {
            let shape = nodes[id].value.shape().to_vec();
            let t = if shape.is_empty() {
                Tensor::scalar(delta[0])
            } else {
                Tensor::new(shape, delta).expect("gradient shaped like its value")
            };
            *slot = Some(t);
        }
    }
}

/// Sums `g` over leading-batch chunks of length `period`.
fn reduce_expansion<F: Scalar>(g: &[F], period: usize, f: impl Fn(usize, F) -> F) -> Vec<F> {
    let mut out = vec![F::zero(); period];
    for (chunk_idx, chunk) in g.chunks(period).enumerate() {
        for (j, (&gv, o)) in chunk.iter().zip(out.iter_mut()).enumerate() {
            *o = *o + f(chunk_idx * period + j, gv);
        }
    }
    out
}

fn backprop_node<F: Scalar>(nodes: &[Node<F>], node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let negate = matches!(node.op, Op::Sub(..));
            accumulate(grads, nodes, *a, gd.to_vec());
            let period = nodes[*b].value.numel();
            let gb = reduce_expansion(gd, period, |_, x| if negate { -x } else { x });
            accumulate(grads, nodes, *b, gb);
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let period = bv.len();
            let ga = gd.iter().enumerate().map(|(i, &x)| x * bv[i % period]).collect();
            accumulate(grads, nodes, *a, ga);
            let gb = reduce_expansion(gd, period, |i, x| x * av[i]);
            accumulate(grads, nodes, *b, gb);
        }
        Op::Scale(a, s) => {
            accumulate(grads, nodes, *a, gd.iter().map(|&x| x * *s).collect());
        }
        Op::Sum(a) => {
            let n = nodes[*a].value.numel();
            accumulate(grads, nodes, *a, vec![g.item(); n]);
        }
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = av.as_matrix_dims();
            let n = bv.shape()[1];
            if nodes[*a].needs_grad {
                let mut ga = vec![F::zero(); m * k];
                F::gemm(m, n, k, gd, (n, 1), bv.data(), (1, n), &mut ga, false);
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[*b].needs_grad {
                let mut gb = vec![F::zero(); k * n];
                F::gemm(k, m, n, av.data(), (1, k), gd, (n, 1), &mut gb, false);
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Gelu(a) => {
            let xv = nodes[*a].value.data();
            let ga = gd.iter().zip(xv).map(|(&gi, &x)| gi * gelu_grad_scalar(x)).collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        } => {
            let xv = nodes[*x].value.data();
            let gamma = nodes[*gain].value.data();
            let d = gamma.len();
            let inv_d = F::of(1.0 / d as f64);
            let mut dx = vec![F::zero(); xv.len()];
            let mut dgain = vec![F::zero(); d];
            let mut dbias = vec![F::zero(); d];
            let mut xhat = vec![F::zero(); d];
            let mut dxhat = vec![F::zero(); d];
            for (r, ((xr, gr), dxr)) in xv.chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                let (mu, rs) = (mean[r], rstd[r]);
                let mut mean_dxhat = F::zero();
                let mut mean_dxhat_xhat = F::zero();
                for j in 0..d {
                    xhat[j] = (xr[j] - mu) * rs;
                    dxhat[j] = gr[j] * gamma[j];
                    dgain[j] = dgain[j] + gr[j] * xhat[j];
                    dbias[j] = dbias[j] + gr[j];
                    mean_dxhat = mean_dxhat + dxhat[j];
                    mean_dxhat_xhat = mean_dxhat_xhat + dxhat[j] * xhat[j];
                }
                mean_dxhat = mean_dxhat * inv_d;
                mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                for j in 0..d {
                    dxr[j] = rs * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                }
            }
            accumulate(grads, nodes, *x, dx);
            accumulate(grads, nodes, *gain, dgain);
            accumulate(grads, nodes, *bias, dbias);
        }
        Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
            let log = matches!(node.op, Op::LogSoftmax(..));
            let y = node.value.data();
            let (outer, n, inner) = split_axis(node.value.shape(), *axis).expect("valid at record time");
            let mut ga = vec![F::zero(); y.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + j;
                    if log {
                        let total: F = (0..n).map(|i| gd[idx(i)]).sum();
                        for i in 0..n {
                            ga[idx(i)] = gd[idx(i)] - y[idx(i)].exp() * total;
                        }
                    } else {
                        let dot: F = (0..n).map(|i| gd[idx(i)] * y[idx(i)]).sum();
                        for i in 0..n {
                            ga[idx(i)] = y[idx(i)] * (gd[idx(i)] - dot);
                        }
                    }
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Embedding { table, ids } => {
            let tv = &nodes[*table].value;
            let width = tv.shape()[1];
            let mut gt = vec![F::zero(); tv.numel()];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..width {
                    gt[id * width + j] = gt[id * width + j] + gd[r * width + j];
                }
            }
            accumulate(grads, nodes, *table, gt);
        }
        Op::SelectRows { x, rows } => {
            let xv = &nodes[*x].value;
            let width = xv.numel() / xv.shape()[0];
            let mut gx = vec![F::zero(); xv.numel()];
            for (r, &src) in rows.iter().enumerate() {
                for j in 0..width {
                    gx[src * width + j] = gx[src * width + j] + gd[r * width + j];
                }
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::Concat { parts, axis } => {
            let mut start = 0;
            for &p in parts {
                let extent = nodes[p].value.shape()[*axis];
                let piece = g.slice(*axis, start, start + extent).expect("concat extents");
                accumulate(grads, nodes, p, piece.into_vec());
                start += extent;
            }
        }
        Op::Slice { x, axis, start } => {
            let xv = &nodes[*x].value;
            let (outer, n, inner) = split_axis(xv.shape(), *axis).expect("valid at record time");
            let len = node.value.shape()[*axis];
            let mut gx = vec![F::zero(); xv.numel()];
            for o in 0..outer {
                let dst = (o * n + start) * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::Reshape(a) => accumulate(grads, nodes, *a, gd.to_vec()),
        Op::CrossEntropy { logits, targets, rows } => {
            let lv = &nodes[*logits].value;
            let (_, k) = lv.as_matrix_dims();
            let scale = g.item();
            let mut gl = vec![F::zero(); lv.numel()];
            let mut buf = vec![F::zero(); k];
            for (&r, &t) in rows.iter().zip(targets) {
                buf.copy_from_slice(&lv.data()[r * k..(r + 1) * k]);
                crate::tensor::softmax_in_place(&mut buf);
                buf[t] = buf[t] - F::one();
                for j in 0..k {
                    gl[r * k + j] = gl[r * k + j] + scale * buf[j];
                }
            }
            accumulate(grads, nodes, *logits, gl);
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            layout,
            saved,
        } => {
            let (dq, dk, dv) = attention_backward(g, &nodes[*v].value, *heads, layout, saved);
            accumulate(grads, nodes, *q, dq);
            accumulate(grads, nodes, *k, dk);
            accumulate(grads, nodes, *v, dv);
        }
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<F> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'t, F>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn add(self, rhs: Var<'t, F>) -> Result<Self> {
        self.same_tape(&rhs);
        let out = self.value().add(&rhs.value())?;
        self.tape.record("add", out, Op::Add(self.id, rhs.id), &[self.id, rhs.id])
    }

    pub fn sub(self, rhs: Var<'t, F>) -> Result<Self> {
        self.same_tape(&rhs);
        let out = self.value().sub(&rhs.value())?;
        self.tape.record("sub", out, Op::Sub(self.id, rhs.id), &[self.id, rhs.id])
    }

    pub fn mul(self, rhs: Var<'t, F>) -> Result<Self> {
        self.same_tape(&rhs);
        let out = self.value().mul(&rhs.value())?;
        self.tape.record("mul", out, Op::Mul(self.id, rhs.id), &[self.id, rhs.id])
    }

    pub fn scale(self, s: F) -> Result<Self> {
        let out = self.value().scale(s);
        self.tape.record("scale", out, Op::Scale(self.id, s), &[self.id])
    }

    pub fn sum(self) -> Result<Self> {
        let out = Tensor::scalar(self.value().sum());
        self.tape.record("sum", out, Op::Sum(self.id), &[self.id])
    }

    pub fn matmul(self, rhs: Var<'t, F>) -> Result<Self> {
        self.same_tape(&rhs);
        let out = self.value().matmul(&rhs.value())?;
        self.tape.record("matmul", out, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id])
    }

    pub fn gelu(self) -> Result<Self> {
        let out = self.value().gelu();
        self.tape.record("gelu", out, Op::Gelu(self.id), &[self.id])
    }

    pub fn layer_norm(self, gain: Var<'t, F>, bias: Var<'t, F>, eps: F) -> Result<Self> {
        let (out, mean, rstd) = self.value().layer_norm_parts(&gain.value(), &bias.value(), eps)?;
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            mean,
            rstd,
        };
        self.tape.record("layer_norm", out, op, &[self.id, gain.id, bias.id])
    }

    pub fn softmax(self, axis: usize) -> Result<Self> {
        let out = self.value().softmax(axis)?;
        self.tape.record("softmax", out, Op::Softmax(self.id, axis), &[self.id])
    }

    pub fn log_softmax(self, axis: usize) -> Result<Self> {
        let out = self.value().log_softmax(axis)?;
        self.tape.record("log_softmax", out, Op::LogSoftmax(self.id, axis), &[self.id])
    }

    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Self> {
        let out = self.value().slice(axis, start, end)?;
        let op = Op::Slice {
            x: self.id,
            axis,
            start,
        };
        self.tape.record("slice", out, op, &[self.id])
    }

    pub fn select_rows(self, rows: &[usize]) -> Result<Self> {
        let out = self.value().select_rows(rows)?;
        let op = Op::SelectRows {
            x: self.id,
            rows: rows.to_vec(),
        };
        self.tape.record("select_rows", out, op, &[self.id])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let out = self.value().reshape(shape)?;
        self.tape.record("reshape", out, Op::Reshape(self.id), &[self.id])
    }

    /// `−Σ log softmax(logits[row])[target]` over the selected rows of a
    /// logits tensor viewed as `[rows, vocab]`. Unselected rows receive no
    /// gradient.
    pub fn cross_entropy_masked(self, targets: &[usize], rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(TensorError::EmptyMask);
        }
        if rows.len() != targets.len() {
            return Err(TensorError::Invalid(format!(
                "cross entropy: {} rows but {} targets",
                rows.len(),
                targets.len()
            )));
        }
        let lv = self.value();
        let (n, k) = lv.as_matrix_dims();
        let mut buf = vec![F::zero(); k];
        let mut total = F::zero();
        for (&r, &t) in rows.iter().zip(targets) {
            if r >= n {
                return Err(TensorError::Index {
                    op: "cross_entropy_masked",
                    index: r,
                    bound: n,
                });
            }
            if t >= k {
                return Err(TensorError::Index {
                    op: "cross_entropy_masked",
                    index: t,
                    bound: k,
                });
            }
            buf.copy_from_slice(&lv.data()[r * k..(r + 1) * k]);
            crate::tensor::log_softmax_in_place(&mut buf);
            total = total - buf[t];
        }
        let op = Op::CrossEntropy {
            logits: self.id,
            targets: targets.to_vec(),
            rows: rows.to_vec(),
        };
        self.tape.record("cross_entropy_masked", Tensor::scalar(total), op, &[self.id])
    }

    /// Rotary multi-head attention of `self` (queries) over `keys`/`values`,
    /// each `[rows, width]`, within the segments of `layout`.
    pub fn attention(self, keys: Var<'t, F>, values: Var<'t, F>, heads: usize, layout: Arc<AttnLayout>) -> Result<Self> {
        let (out, saved) = attention_forward(&self.value(), &keys.value(), &values.value(), heads, &layout)?;
        let op = Op::Attention {
            q: self.id,
            k: keys.id,
            v: values.id,
            heads,
            layout,
            saved,
        };
        self.tape.record("attention", out, op, &[self.id, keys.id, values.id])
    }
}
