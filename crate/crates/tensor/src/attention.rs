//! Multi-head scaled dot-product attention with rotary position encoding,
//! restricted to independent row segments (block-diagonal attention).

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const ROPE_BASE: f64 = 10_000.0;

/// Which rows may attend to which. Each segment lists its rows in sequence
/// order; rows in different segments never interact.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnLayout {
    segments: Vec<Vec<usize>>,
    positions: Vec<usize>,
    causal: bool,
}

impl AttnLayout {
    /// `positions[row]` is the rotary position id of that row. Every row must
    /// belong to exactly one segment.
    pub fn new(segments: Vec<Vec<usize>>, positions: Vec<usize>, causal: bool) -> Result<Self> {
        let mut seen = vec![false; positions.len()];
        for &row in segments.iter().flatten() {
            match seen.get_mut(row) {
                Some(s) if !*s => *s = true,
                _ => {
                    return Err(TensorError::Invalid(format!(
                        "attention layout: row {row} missing from positions or listed twice"
                    )))
                }
            }
        }
        if let Some(row) = seen.iter().position(|s| !s) {
            return Err(TensorError::Invalid(format!(
                "attention layout: row {row} belongs to no segment"
            )));
        }
        Ok(Self {
            segments,
            positions,
            causal,
        })
    }

    /// One segment of `n` rows with positions `0..n`.
    pub fn single(n: usize, causal: bool) -> Self {
        Self {
            segments: vec![(0..n).collect()],
            positions: (0..n).collect(),
            causal,
        }
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }

    pub fn segments(&self) -> &[Vec<usize>] {
        &self.segments
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn is_causal(&self) -> bool {
        self.causal
    }
}

struct Rope<F> {
    half: usize,
    cos: Vec<F>,
    sin: Vec<F>,
}

impl<F: Scalar> Rope<F> {
    fn new(head_dim: usize, max_pos: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity((max_pos + 1) * half);
        let mut sin = Vec::with_capacity((max_pos + 1) * half);
        for p in 0..=max_pos {
            for i in 0..half {
                let inv_freq = ROPE_BASE.powf(-(2.0 * i as f64) / head_dim as f64);
                let angle = p as f64 * inv_freq;
                cos.push(F::of(angle.cos()));
                sin.push(F::of(angle.sin()));
            }
        }
        Self { half, cos, sin }
    }

    fn rotate(&self, x: &mut [F], pos: usize) {
        let (c, s) = self.table(pos);
        for i in 0..self.half {
            let (a, b) = (x[i], x[i + self.half]);
            x[i] = a * c[i] - b * s[i];
            x[i + self.half] = a * s[i] + b * c[i];
        }
    }

    fn rotate_back(&self, x: &mut [F], pos: usize) {
        let (c, s) = self.table(pos);
        for i in 0..self.half {
            let (a, b) = (x[i], x[i + self.half]);
            x[i] = a * c[i] + b * s[i];
            x[i + self.half] = b * c[i] - a * s[i];
        }
    }

    fn table(&self, pos: usize) -> (&[F], &[F]) {
        let r = pos * self.half..(pos + 1) * self.half;
        (&self.cos[r.clone()], &self.sin[r])
    }
}

/// Per segment and head: rotated queries, rotated keys, probabilities.
#[derive(Debug)]
pub(crate) struct AttnSaved<F> {
    blocks: Vec<(Vec<F>, Vec<F>, Vec<F>)>,
}

fn check_inputs<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
    layout: &AttnLayout,
) -> Result<usize> {
    let shape = q.shape();
    if shape.len() != 2 || k.shape() != shape || v.shape() != shape {
        return Err(TensorError::Shape {
            op: "attention",
            lhs: shape.to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if shape[0] != layout.rows() {
        return Err(TensorError::Shape {
            op: "attention layout",
            lhs: shape.to_vec(),
            rhs: vec![layout.rows()],
        });
    }
    if heads == 0 || shape[1] % heads != 0 || (shape[1] / heads) % 2 != 0 {
        return Err(TensorError::Invalid(format!(
            "attention: width {} not divisible into {heads} even-sized heads",
            shape[1]
        )));
    }
    Ok(shape[1] / heads)
}

#[inline]
fn allowed(causal: bool, a: usize, b: usize) -> usize {
    if causal {
        a + 1
    } else {
        b
    }
}

/// Copies head columns `col..col + dh` of `rows` into a dense `n × dh` block.
fn gather<F: Scalar>(src: &[F], width: usize, rows: &[usize], col: usize, dh: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(rows.len() * dh);
    for &row in rows {
        out.extend_from_slice(&src[row * width + col..row * width + col + dh]);
    }
    out
}

fn scatter<F: Scalar>(dst: &mut [F], width: usize, rows: &[usize], col: usize, dh: usize, block: &[F]) {
    for (a, &row) in rows.iter().enumerate() {
        dst[row * width + col..row * width + col + dh].copy_from_slice(&block[a * dh..(a + 1) * dh]);
    }
}

pub(crate) fn attention_forward<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
    layout: &AttnLayout,
) -> Result<(Tensor<F>, AttnSaved<F>)> {
    let dh = check_inputs(q, k, v, heads, layout)?;
    let width = q.shape()[1];
    let max_pos = layout.positions.iter().copied().max().unwrap_or(0);
    let rope = Rope::<F>::new(dh, max_pos);
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut out = vec![F::zero(); q.numel()];
    let mut blocks = Vec::with_capacity(layout.segments.len() * heads);

    for seg in &layout.segments {
        let n = seg.len();
        for h in 0..heads {
            let col = h * dh;
            let mut qr = gather(q.data(), width, seg, col, dh);
            let mut kr = gather(k.data(), width, seg, col, dh);
            let vr = gather(v.data(), width, seg, col, dh);
            for (a, &row) in seg.iter().enumerate() {
                rope.rotate(&mut qr[a * dh..(a + 1) * dh], layout.positions[row]);
                rope.rotate(&mut kr[a * dh..(a + 1) * dh], layout.positions[row]);
            }
            let mut probs = vec![F::zero(); n * n];
            F::gemm(n, dh, n, &qr, (dh, 1), &kr, (1, dh), &mut probs, false);
            for a in 0..n {
                let row = &mut probs[a * n..(a + 1) * n];
                let limit = allowed(layout.causal, a, n);
                for x in &mut row[..limit] {
                    *x = *x * scale;
                }
                crate::tensor::softmax_in_place(&mut row[..limit]);
                row[limit..].fill(F::zero());
            }
            let mut o = vec![F::zero(); n * dh];
            F::gemm(n, n, dh, &probs, (n, 1), &vr, (dh, 1), &mut o, false);
            scatter(&mut out, width, seg, col, dh, &o);
            blocks.push((qr, kr, probs));
        }
    }
    let out = Tensor::new(q.shape().to_vec(), out)?;
    Ok((out, AttnSaved { blocks }))
}

pub(crate) fn attention_backward<F: Scalar>(
    grad: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
    layout: &AttnLayout,
    saved: &AttnSaved<F>,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let width = v.shape()[1];
    let dh = width / heads;
    let max_pos = layout.positions.iter().copied().max().unwrap_or(0);
    let rope = Rope::<F>::new(dh, max_pos);
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut dq = vec![F::zero(); v.numel()];
    let mut dk = vec![F::zero(); v.numel()];
    let mut dv = vec![F::zero(); v.numel()];

    let mut blocks = saved.blocks.iter();
    for seg in &layout.segments {
        let n = seg.len();
        for h in 0..heads {
            let (qr, kr, probs) = blocks.next().expect("attention cache matches layout");
            let col = h * dh;
            let g = gather(grad.data(), width, seg, col, dh);
            let vr = gather(v.data(), width, seg, col, dh);

            let mut dvr = vec![F::zero(); n * dh];
            F::gemm(n, n, dh, probs, (1, n), &g, (dh, 1), &mut dvr, false);
            scatter(&mut dv, width, seg, col, dh, &dvr);

            // Softmax backward: ds_ab = p_ab (dp_ab − Σ_b p_ab dp_ab).
            let mut ds = vec![F::zero(); n * n];
            F::gemm(n, dh, n, &g, (dh, 1), &vr, (1, dh), &mut ds, false);
            for a in 0..n {
                let p = &probs[a * n..(a + 1) * n];
                let row = &mut ds[a * n..(a + 1) * n];
                let dot = p.iter().zip(row.iter()).map(|(&pb, &d)| pb * d).sum::<F>();
                for (x, &pb) in row.iter_mut().zip(p) {
                    *x = pb * (*x - dot) * scale;
                }
            }

            let mut dqr = vec![F::zero(); n * dh];
            let mut dkr = vec![F::zero(); n * dh];
            F::gemm(n, n, dh, &ds, (n, 1), kr, (dh, 1), &mut dqr, false);
            F::gemm(n, n, dh, &ds, (1, n), qr, (dh, 1), &mut dkr, false);
            for (a, &row) in seg.iter().enumerate() {
                let pos = layout.positions[row];
                rope.rotate_back(&mut dqr[a * dh..(a + 1) * dh], pos);
                rope.rotate_back(&mut dkr[a * dh..(a + 1) * dh], pos);
            }
            scatter(&mut dq, width, seg, col, dh, &dqr);
            scatter(&mut dk, width, seg, col, dh, &dkr);
        }
    }
    (dq, dk, dv)
}
