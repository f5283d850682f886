use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Row-major dense tensor. Clones share storage; mutation copies on write.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

/// `(outer, extent, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`, which is markedly cheaper than libm's `tanh`.
fn tanh<F: Scalar>(u: F) -> F {
    let e = (u + u).exp();
    F::one() - F::of(2.0) / (e + F::one())
}

pub(crate) fn gelu_scalar<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + tanh(c * (x + a * x * x * x)))
}

pub(crate) fn gelu_grad_scalar<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let three = F::of(3.0);
    let u = c * (x + a * x * x * x);
    let t = tanh(u);
    let du = c * (F::one() + three * a * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| F::of(x)).collect())
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let numel = shape.iter().product();
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Self {
            shape,
            data: Arc::new(vec![value; numel]),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![],
            data: Arc::new(vec![value]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Mutable view; copies the storage first if it is shared.
    pub fn data_mut(&mut self) -> &mut [F] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<F> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|x| G::of(x.as_f64())).collect()),
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Leading extents flattened: `(rows, last)`.
    pub fn as_matrix_dims(&self) -> (usize, usize) {
        let last = *self.shape.last().unwrap_or(&1);
        (self.numel() / last, last)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    /// Checks that `rhs` equals `self` or a trailing suffix of it
    /// (leading-batch expansion).
    fn expansion(&self, rhs: &Self, op: &'static str) -> Result<usize> {
        let (ls, rs) = (&self.shape, &rhs.shape);
        if rs.len() <= ls.len() && ls[ls.len() - rs.len()..] == rs[..] {
            Ok(rhs.numel())
        } else {
            Err(TensorError::Shape {
                op,
                lhs: ls.clone(),
                rhs: rs.clone(),
            })
        }
    }

    fn zip_expand(&self, rhs: &Self, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Self> {
        let period = self.expansion(rhs, op)?;
        let mut data = Vec::with_capacity(self.data.len());
        for chunk in self.data.chunks(period) {
            data.extend(chunk.iter().zip(rhs.data.iter()).map(|(&a, &b)| f(a, b)));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_expand(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_expand(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.zip_expand(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    /// `[.., k] × [k, n] → [.., n]`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rank() < 2 || rhs.rank() != 2 || self.shape[self.rank() - 1] != rhs.shape[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, k) = self.as_matrix_dims();
        let n = rhs.shape[1];
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, &self.data, (k, 1), &rhs.data, (n, 1), &mut out, false);
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = n;
        Ok(Self {
            shape,
            data: Arc::new(out),
        })
    }

    pub fn transpose2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(TensorError::Invalid(format!(
                "transpose2 needs rank 2, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: Arc::new(out),
        })
    }

    pub fn gelu(&self) -> Self {
        self.map(gelu_scalar)
    }

    /// Normalizes over the last axis, returning the output with the per-row
    /// mean and reciprocal standard deviation.
    pub(crate) fn layer_norm_parts(
        &self,
        gain: &Self,
        bias: &Self,
        eps: F,
    ) -> Result<(Self, Vec<F>, Vec<F>)> {
        let (rows, d) = self.as_matrix_dims();
        if gain.shape != [d] || bias.shape != [d] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gain.shape.clone(),
            });
        }
        let inv_d = F::of(1.0 / d as f64);
        let mut out = vec![F::zero(); self.numel()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (row, dst) in self.data.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() * inv_d;
            let rstd = F::one() / (var + eps).sqrt();
            for (j, (o, &x)) in dst.iter_mut().zip(row).enumerate() {
                *o = (x - mean) * rstd * gain.data[j] + bias.data[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        Ok((
            Self {
                shape: self.shape.clone(),
                data: Arc::new(out),
            },
            means,
            rstds,
        ))
    }

    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: F) -> Result<Self> {
        self.layer_norm_parts(gain, bias, eps).map(|(out, _, _)| out)
    }

    fn along_axis(&self, axis: usize, f: impl Fn(&mut [F])) -> Result<Self> {
        let (outer, n, inner) = split_axis(&self.shape, axis)?;
        let mut out = self.data.as_ref().clone();
        if inner == 1 {
            out.chunks_mut(n).for_each(f);
        } else {
            let mut buf = vec![F::zero(); n];
            for o in 0..outer {
                for j in 0..inner {
                    for i in 0..n {
                        buf[i] = out[(o * n + i) * inner + j];
                    }
                    f(&mut buf);
                    for i in 0..n {
                        out[(o * n + i) * inner + j] = buf[i];
                    }
                }
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(out),
        })
    }

    /// Numerically stable softmax along `axis` (max subtracted first).
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        self.along_axis(axis, softmax_in_place)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Self> {
        self.along_axis(axis, log_softmax_in_place)
    }

    /// Index of the maximum along `axis`; ties resolve to the lowest index.
    /// The result has the shape of `self` with `axis` removed, flattened.
    pub fn argmax_along_axis(&self, axis: usize) -> Result<Vec<usize>> {
        let (outer, n, inner) = split_axis(&self.shape, axis)?;
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let mut best = 0;
                let mut best_val = self.data[o * n * inner + j];
                for i in 1..n {
                    let v = self.data[(o * n + i) * inner + j];
                    if v > best_val {
                        best = i;
                        best_val = v;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let rank = first.rank();
        let mut extent = 0;
        for p in parts {
            let compatible = p.rank() == rank
                && axis < rank
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            extent += p.shape[axis];
        }
        let (outer, _, inner) = split_axis(&first.shape, axis)?;
        let mut data = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = extent;
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Self> {
        let (outer, n, inner) = split_axis(&self.shape, axis)?;
        if start >= end || end > n {
            return Err(TensorError::Index {
                op: "slice",
                index: end,
                bound: n,
            });
        }
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&self.data[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = end - start;
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Gathers rows along axis 0.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if self.rank() == 0 || rows.is_empty() {
            return Err(TensorError::Invalid("select_rows needs rank >= 1 and rows".into()));
        }
        let n = self.shape[0];
        let width = self.numel() / n;
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= n {
                return Err(TensorError::Index {
                    op: "select_rows",
                    index: r,
                    bound: n,
                });
            }
            data.extend_from_slice(&self.data[r * width..(r + 1) * width]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// `table[ids[i], :]` for a `[vocab, dim]` table.
    pub fn embedding(table: &Self, ids: &[usize]) -> Result<Self> {
        if table.rank() != 2 {
            return Err(TensorError::Invalid(format!(
                "embedding table must be rank 2, got {:?}",
                table.shape
            )));
        }
        table.select_rows(ids).map_err(|e| match e {
            TensorError::Index { index, bound, .. } => TensorError::Index {
                op: "embedding",
                index,
                bound,
            },
            other => other,
        })
    }
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    let inv = F::one() / total;
    row.iter_mut().for_each(|x| *x = *x * inv);
}

pub(crate) fn log_softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let total: F = row.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + total.ln();
    row.iter_mut().for_each(|x| *x = *x - lse);
}
