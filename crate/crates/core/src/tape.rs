//! Reverse-mode autodiff over a linear operation tape.
//!
//! Forward computation happens eagerly as ops are recorded; `backward`
//! replays the tape in reverse accumulating vector-Jacobian products.
//! The op set is exactly what the prompted dual-encoder pipeline needs:
//! matmuls, layer norm, softmax rows, GELU, concat/slice (prompt injection
//! and discard), cosine similarity, the antonym pair score, and scalar
//! loss reductions.
//!
//! Gradients accumulate for every buffer; callers read them back only for
//! the buffers they registered as trainable. Inference paths record a tape
//! and simply never call `backward`.

use crate::mat::Mat;
use crate::scoring;

/// Index of a buffer in the tape arena.
pub type BufId = usize;

struct Buf {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

#[derive(Clone)]
enum Op {
    /// out(m×n) = A(m×k) @ B(k×n)
    Matmul { a: BufId, b: BufId, out: BufId, m: usize, k: usize, n: usize },
    /// out(m×n) = A(m×k) @ B(n×k)ᵀ
    MatmulTransB { a: BufId, b: BufId, out: BufId, m: usize, k: usize, n: usize },
    /// out = A + B, same shape
    Add { a: BufId, b: BufId, out: BufId },
    /// out = A + bias, bias(1×cols) broadcast over rows
    AddBias { a: BufId, bias: BufId, out: BufId, rows: usize, cols: usize },
    /// out = factor · A
    Scale { a: BufId, factor: f64, out: BufId },
    /// Row-wise layer norm with gain/bias; saves per-row mean and 1/std.
    LayerNorm {
        input: BufId,
        gain: BufId,
        bias: BufId,
        out: BufId,
        rows: usize,
        cols: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Row-wise softmax; backward reads the saved output.
    SoftmaxRows { input: BufId, out: BufId, rows: usize, cols: usize },
    /// Elementwise tanh-approximation GELU.
    Gelu { input: BufId, out: BufId },
    /// Stack inputs vertically (shared column count).
    ConcatRows { inputs: Vec<BufId>, out: BufId, cols: usize },
    /// [A | B] along the feature axis.
    ConcatCols { a: BufId, b: BufId, out: BufId, rows: usize, a_cols: usize, b_cols: usize },
    /// Rows start..start+rows of the input.
    SliceRows { input: BufId, out: BufId, start: usize, rows: usize, cols: usize },
    /// Cosine similarity of two 1×d vectors → scalar.
    CosineSim { x: BufId, z: BufId, out: BufId },
    /// q = softmax over (pos, neg) similarities, taken at the positive slot.
    PairScore { pos: BufId, neg: BufId, out: BufId },
    /// out = (pred − target)², pred scalar, target constant.
    SquaredError { pred: BufId, target: f64, out: BufId },
    /// Scalar out = Σ wᵢ·inᵢ over scalar inputs.
    WeightedSum { inputs: Vec<BufId>, weights: Vec<f64>, out: BufId },
    /// Scalar out = Σ input ⊙ weights (fixed weights), any shape.
    Project { input: BufId, weights: Vec<f64>, out: BufId },
}

pub struct Tape {
    bufs: Vec<Buf>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_C1: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { bufs: Vec::new(), ops: Vec::new(), grads: Vec::new() }
    }

    // ── buffers ──────────────────────────────────────────────────────

    fn alloc(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> BufId {
        assert_eq!(data.len(), rows * cols, "tape buffer size mismatch");
        let id = self.bufs.len();
        self.bufs.push(Buf { data, rows, cols });
        self.grads.push(None);
        id
    }

    /// Register a matrix on the tape (snapshot copy).
    pub fn push(&mut self, m: &Mat) -> BufId {
        self.alloc(m.data.clone(), m.rows, m.cols)
    }

    pub fn push_raw(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> BufId {
        self.alloc(data, rows, cols)
    }

    pub fn data(&self, id: BufId) -> &[f64] {
        &self.bufs[id].data
    }

    pub fn shape(&self, id: BufId) -> (usize, usize) {
        (self.bufs[id].rows, self.bufs[id].cols)
    }

    pub fn scalar(&self, id: BufId) -> f64 {
        assert_eq!(self.bufs[id].data.len(), 1, "buffer {id} is not a scalar");
        self.bufs[id].data[0]
    }

    // ── op recording (forward happens here) ──────────────────────────

    pub fn matmul(&mut self, a: BufId, b: BufId) -> BufId {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
        let mut out = vec![0.0; m * n];
        matmul_into(&self.bufs[a].data, &self.bufs[b].data, &mut out, m, ka, n);
        let id = self.alloc(out, m, n);
        self.ops.push(Op::Matmul { a, b, out: id, m, k: ka, n });
        id
    }

    pub fn matmul_trans_b(&mut self, a: BufId, b: BufId) -> BufId {
        let (m, ka) = self.shape(a);
        let (n, kb) = self.shape(b);
        assert_eq!(ka, kb, "matmul_trans_b inner dims {ka} vs {kb}");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..ka {
                    acc += self.bufs[a].data[i * ka + t] * self.bufs[b].data[j * kb + t];
                }
                out[i * n + j] = acc;
            }
        }
        let id = self.alloc(out, m, n);
        self.ops.push(Op::MatmulTransB { a, b, out: id, m, k: ka, n });
        id
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> BufId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, c), "add shape mismatch");
        let out: Vec<f64> = self.bufs[a]
            .data
            .iter()
            .zip(&self.bufs[b].data)
            .map(|(x, y)| x + y)
            .collect();
        let id = self.alloc(out, r, c);
        self.ops.push(Op::Add { a, b, out: id });
        id
    }

    pub fn add_bias(&mut self, a: BufId, bias: BufId) -> BufId {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(bias), (1, cols), "bias must be 1×cols");
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = self.bufs[a].data[r * cols + c] + self.bufs[bias].data[c];
            }
        }
        let id = self.alloc(out, rows, cols);
        self.ops.push(Op::AddBias { a, bias, out: id, rows, cols });
        id
    }

    pub fn scale(&mut self, a: BufId, factor: f64) -> BufId {
        let (r, c) = self.shape(a);
        let out: Vec<f64> = self.bufs[a].data.iter().map(|x| factor * x).collect();
        let id = self.alloc(out, r, c);
        self.ops.push(Op::Scale { a, factor, out: id });
        id
    }

    pub fn layer_norm(&mut self, input: BufId, gain: BufId, bias: BufId) -> BufId {
        let (rows, cols) = self.shape(input);
        assert_eq!(self.shape(gain), (1, cols), "layer norm gain must be 1×cols");
        assert_eq!(self.shape(bias), (1, cols), "layer norm bias must be 1×cols");
        let mut out = vec![0.0; rows * cols];
        let mut means = vec![0.0; rows];
        let mut inv_stds = vec![0.0; rows];
        for r in 0..rows {
            let row = &self.bufs[input].data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            means[r] = mean;
            inv_stds[r] = inv;
            for c in 0..cols {
                let norm = (row[c] - mean) * inv;
                out[r * cols + c] = norm * self.bufs[gain].data[c] + self.bufs[bias].data[c];
            }
        }
        let id = self.alloc(out, rows, cols);
        self.ops.push(Op::LayerNorm {
            input,
            gain,
            bias,
            out: id,
            rows,
            cols,
            mean: means,
            inv_std: inv_stds,
        });
        id
    }

    pub fn softmax_rows(&mut self, input: BufId) -> BufId {
        let (rows, cols) = self.shape(input);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.bufs[input].data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                out[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                out[r * cols + c] /= sum;
            }
        }
        let id = self.alloc(out, rows, cols);
        self.ops.push(Op::SoftmaxRows { input, out: id, rows, cols });
        id
    }

    pub fn gelu(&mut self, input: BufId) -> BufId {
        let (r, c) = self.shape(input);
        let out: Vec<f64> = self.bufs[input].data.iter().map(|x| gelu(*x)).collect();
        let id = self.alloc(out, r, c);
        self.ops.push(Op::Gelu { input, out: id });
        id
    }

    pub fn concat_rows(&mut self, inputs: &[BufId]) -> BufId {
        assert!(!inputs.is_empty(), "concat_rows needs at least one input");
        let cols = self.shape(inputs[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &id in inputs {
            let (r, c) = self.shape(id);
            assert_eq!(c, cols, "concat_rows column mismatch");
            out.extend_from_slice(&self.bufs[id].data);
            rows += r;
        }
        let id = self.alloc(out, rows, cols);
        self.ops.push(Op::ConcatRows { inputs: inputs.to_vec(), out: id, cols });
        id
    }

    pub fn concat_cols(&mut self, a: BufId, b: BufId) -> BufId {
        let (rows, a_cols) = self.shape(a);
        let (rb, b_cols) = self.shape(b);
        assert_eq!(rows, rb, "concat_cols row mismatch");
        let cols = a_cols + b_cols;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            out[r * cols..r * cols + a_cols]
                .copy_from_slice(&self.bufs[a].data[r * a_cols..(r + 1) * a_cols]);
            out[r * cols + a_cols..(r + 1) * cols]
                .copy_from_slice(&self.bufs[b].data[r * b_cols..(r + 1) * b_cols]);
        }
        let id = self.alloc(out, rows, cols);
        self.ops.push(Op::ConcatCols { a, b, out: id, rows, a_cols, b_cols });
        id
    }

    pub fn slice_rows(&mut self, input: BufId, start: usize, rows: usize) -> BufId {
        let (total, cols) = self.shape(input);
        assert!(start + rows <= total, "slice_rows out of range");
        let out = self.bufs[input].data[start * cols..(start + rows) * cols].to_vec();
        let id = self.alloc(out, rows, cols);
        self.ops.push(Op::SliceRows { input, out: id, start, rows, cols });
        id
    }

    pub fn cosine_sim(&mut self, x: BufId, z: BufId) -> BufId {
        let (rx, d) = self.shape(x);
        assert_eq!(rx, 1, "cosine_sim expects 1×d vectors");
        assert_eq!(self.shape(z), (1, d), "cosine_sim shape mismatch");
        let c = scoring::cosine_raw(&self.bufs[x].data, &self.bufs[z].data);
        let id = self.alloc(vec![c], 1, 1);
        self.ops.push(Op::CosineSim { x, z, out: id });
        id
    }

    pub fn pair_score(&mut self, pos: BufId, neg: BufId) -> BufId {
        let q = scoring::pair_score_raw(self.scalar(pos), self.scalar(neg));
        let id = self.alloc(vec![q], 1, 1);
        self.ops.push(Op::PairScore { pos, neg, out: id });
        id
    }

    pub fn squared_error(&mut self, pred: BufId, target: f64) -> BufId {
        let p = self.scalar(pred);
        let id = self.alloc(vec![(p - target) * (p - target)], 1, 1);
        self.ops.push(Op::SquaredError { pred, target, out: id });
        id
    }

    pub fn weighted_sum(&mut self, inputs: &[BufId], weights: &[f64]) -> BufId {
        assert_eq!(inputs.len(), weights.len(), "weighted_sum arity mismatch");
        let mut acc = 0.0;
        for (&id, &w) in inputs.iter().zip(weights) {
            acc += w * self.scalar(id);
        }
        let id = self.alloc(vec![acc], 1, 1);
        self.ops.push(Op::WeightedSum { inputs: inputs.to_vec(), weights: weights.to_vec(), out: id });
        id
    }

    pub fn project(&mut self, input: BufId, weights: &[f64]) -> BufId {
        let (r, c) = self.shape(input);
        assert_eq!(weights.len(), r * c, "project weight size mismatch");
        let acc: f64 = self.bufs[input].data.iter().zip(weights).map(|(x, w)| x * w).sum();
        let id = self.alloc(vec![acc], 1, 1);
        self.ops.push(Op::Project { input, weights: weights.to_vec(), out: id });
        id
    }

    // ── backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, id: BufId, grad: &[f64]) {
        match &mut self.grads[id] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => self.grads[id] = Some(grad.to_vec()),
        }
    }

    /// Replay the tape in reverse, seeding the scalar `loss` with 1.
    pub fn backward(&mut self, loss: BufId) {
        assert_eq!(self.bufs[loss].data.len(), 1, "loss must be scalar");
        if self.grads[loss].is_none() {
            self.grads[loss] = Some(vec![1.0]);
        }
        for idx in (0..self.ops.len()).rev() {
            let op = self.ops[idx].clone();
            self.backward_op(&op);
        }
    }

    /// Gradient accumulated for a buffer, zeros if nothing flowed to it.
    pub fn grad(&self, id: BufId) -> Vec<f64> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => vec![0.0; self.bufs[id].data.len()],
        }
    }

    fn backward_op(&mut self, op: &Op) {
        match op {
            Op::Matmul { a, b, out, m, k, n } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let (m, k, n) = (*m, *k, *n);
                let a_data = self.bufs[*a].data.clone();
                let b_data = self.bufs[*b].data.clone();
                // dA = dOut @ Bᵀ
                let mut d_a = vec![0.0; m * k];
                for i in 0..m {
                    for t in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += d_out[i * n + j] * b_data[t * n + j];
                        }
                        d_a[i * k + t] = acc;
                    }
                }
                // dB = Aᵀ @ dOut
                let mut d_b = vec![0.0; k * n];
                for t in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += a_data[i * k + t] * d_out[i * n + j];
                        }
                        d_b[t * n + j] = acc;
                    }
                }
                self.accumulate(*a, &d_a);
                self.accumulate(*b, &d_b);
            }
            Op::MatmulTransB { a, b, out, m, k, n } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let (m, k, n) = (*m, *k, *n);
                let a_data = self.bufs[*a].data.clone();
                let b_data = self.bufs[*b].data.clone();
                // out = A @ Bᵀ ⇒ dA = dOut @ B, dB = dOutᵀ @ A
                let mut d_a = vec![0.0; m * k];
                for i in 0..m {
                    for t in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += d_out[i * n + j] * b_data[j * k + t];
                        }
                        d_a[i * k + t] = acc;
                    }
                }
                let mut d_b = vec![0.0; n * k];
                for j in 0..n {
                    for t in 0..k {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += d_out[i * n + j] * a_data[i * k + t];
                        }
                        d_b[j * k + t] = acc;
                    }
                }
                self.accumulate(*a, &d_a);
                self.accumulate(*b, &d_b);
            }
            Op::Add { a, b, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                self.accumulate(*a, &d_out);
                self.accumulate(*b, &d_out);
            }
            Op::AddBias { a, bias, out, rows, cols } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                self.accumulate(*a, &d_out);
                let mut d_bias = vec![0.0; *cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        d_bias[c] += d_out[r * cols + c];
                    }
                }
                self.accumulate(*bias, &d_bias);
            }
            Op::Scale { a, factor, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let d_a: Vec<f64> = d_out.iter().map(|g| factor * g).collect();
                self.accumulate(*a, &d_a);
            }
            Op::LayerNorm { input, gain, bias, out, rows, cols, mean, inv_std } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let (rows, cols) = (*rows, *cols);
                let x = self.bufs[*input].data.clone();
                let g = self.bufs[*gain].data.clone();
                let mut d_x = vec![0.0; rows * cols];
                let mut d_gain = vec![0.0; cols];
                let mut d_bias = vec![0.0; cols];
                for r in 0..rows {
                    let inv = inv_std[r];
                    let mu = mean[r];
                    // x̂ = (x − μ)·inv;  dx = inv·(dx̂ − mean(dx̂) − x̂·mean(dx̂⊙x̂))
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for c in 0..cols {
                        let xh = (x[r * cols + c] - mu) * inv;
                        let dxh = d_out[r * cols + c] * g[c];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh;
                        d_gain[c] += d_out[r * cols + c] * xh;
                        d_bias[c] += d_out[r * cols + c];
                    }
                    mean_dxh /= cols as f64;
                    mean_dxh_xh /= cols as f64;
                    for c in 0..cols {
                        let xh = (x[r * cols + c] - mu) * inv;
                        let dxh = d_out[r * cols + c] * g[c];
                        d_x[r * cols + c] = inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                    }
                }
                self.accumulate(*input, &d_x);
                self.accumulate(*gain, &d_gain);
                self.accumulate(*bias, &d_bias);
            }
            Op::SoftmaxRows { input, out, rows, cols } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let y = self.bufs[*out].data.clone();
                let mut d_in = vec![0.0; rows * cols];
                for r in 0..*rows {
                    let mut dot = 0.0;
                    for c in 0..*cols {
                        dot += d_out[r * cols + c] * y[r * cols + c];
                    }
                    for c in 0..*cols {
                        d_in[r * cols + c] = y[r * cols + c] * (d_out[r * cols + c] - dot);
                    }
                }
                self.accumulate(*input, &d_in);
            }
            Op::Gelu { input, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let x = self.bufs[*input].data.clone();
                let d_in: Vec<f64> =
                    x.iter().zip(&d_out).map(|(xi, g)| gelu_grad(*xi) * g).collect();
                self.accumulate(*input, &d_in);
            }
            Op::ConcatRows { inputs, out, cols } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let mut offset = 0;
                for &id in inputs {
                    let rows = self.bufs[id].rows;
                    let chunk = &d_out[offset * cols..(offset + rows) * cols];
                    self.accumulate(id, chunk);
                    offset += rows;
                }
            }
            Op::ConcatCols { a, b, out, rows, a_cols, b_cols } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let cols = a_cols + b_cols;
                let mut d_a = vec![0.0; rows * a_cols];
                let mut d_b = vec![0.0; rows * b_cols];
                for r in 0..*rows {
                    d_a[r * a_cols..(r + 1) * a_cols]
                        .copy_from_slice(&d_out[r * cols..r * cols + a_cols]);
                    d_b[r * b_cols..(r + 1) * b_cols]
                        .copy_from_slice(&d_out[r * cols + a_cols..(r + 1) * cols]);
                }
                self.accumulate(*a, &d_a);
                self.accumulate(*b, &d_b);
            }
            Op::SliceRows { input, out, start, rows, cols } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let total = self.bufs[*input].rows;
                let mut d_in = vec![0.0; total * cols];
                d_in[start * cols..(start + rows) * cols].copy_from_slice(&d_out);
                self.accumulate(*input, &d_in);
            }
            Op::CosineSim { x, z, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let dc = d_out[0];
                let xv = self.bufs[*x].data.clone();
                let zv = self.bufs[*z].data.clone();
                let dot: f64 = xv.iter().zip(&zv).map(|(a, b)| a * b).sum();
                let nx = xv.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nz = zv.iter().map(|a| a * a).sum::<f64>().sqrt();
                let c = dot / (nx * nz);
                let d_x: Vec<f64> = xv
                    .iter()
                    .zip(&zv)
                    .map(|(xi, zi)| dc * (zi / (nx * nz) - c * xi / (nx * nx)))
                    .collect();
                let d_z: Vec<f64> = xv
                    .iter()
                    .zip(&zv)
                    .map(|(xi, zi)| dc * (xi / (nx * nz) - c * zi / (nz * nz)))
                    .collect();
                self.accumulate(*x, &d_x);
                self.accumulate(*z, &d_z);
            }
            Op::PairScore { pos, neg, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let q = self.bufs[*out].data[0];
                let dq = d_out[0] * q * (1.0 - q);
                self.accumulate(*pos, &[dq]);
                self.accumulate(*neg, &[-dq]);
            }
            Op::SquaredError { pred, target, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let p = self.bufs[*pred].data[0];
                self.accumulate(*pred, &[2.0 * (p - target) * d_out[0]]);
            }
            Op::WeightedSum { inputs, weights, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                for (&id, &w) in inputs.iter().zip(weights) {
                    self.accumulate(id, &[w * d_out[0]]);
                }
            }
            Op::Project { input, weights, out } => {
                let Some(d_out) = self.grads[*out].clone() else { return };
                let d_in: Vec<f64> = weights.iter().map(|w| w * d_out[0]).collect();
                self.accumulate(*input, &d_in);
            }
        }
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[t * n + j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::seeded_rng;
    use rand::Rng;

    /// Finite-difference check: perturb every input coordinate of `build`'s
    /// designated buffers and compare against the tape gradient.
    fn fd_check(build: impl Fn(&mut Tape, &[Vec<f64>]) -> (Vec<BufId>, BufId), inputs: Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let (ids, loss) = build(&mut tape, &inputs);
        tape.backward(loss);
        let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad(id)).collect();

        let h = 1e-6;
        for (which, input) in inputs.iter().enumerate() {
            for coord in 0..input.len() {
                let mut plus = inputs.clone();
                plus[which][coord] += h;
                let mut minus = inputs.clone();
                minus[which][coord] -= h;
                let mut tp = Tape::new();
                let (_, lp) = build(&mut tp, &plus);
                let mut tm = Tape::new();
                let (_, lm) = build(&mut tm, &minus);
                let fd = (tp.scalar(lp) - tm.scalar(lm)) / (2.0 * h);
                let an = analytic[which][coord];
                let err = (fd - an).abs();
                let tol = 1e-7 + 1e-6 * fd.abs().max(an.abs());
                assert!(
                    err <= tol,
                    "input {which} coord {coord}: analytic {an} vs fd {fd} (err {err})"
                );
            }
        }
    }

    fn randv(n: usize, tag: &str) -> Vec<f64> {
        let mut rng = seeded_rng(42, tag);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_gradients() {
        fd_check(
            |t, inp| {
                let a = t.push_raw(inp[0].clone(), 2, 3);
                let b = t.push_raw(inp[1].clone(), 3, 2);
                let c = t.matmul(a, b);
                let loss = t.project(c, &[0.3, -0.7, 1.1, 0.2]);
                (vec![a, b], loss)
            },
            vec![randv(6, "mm-a"), randv(6, "mm-b")],
        );
    }

    #[test]
    fn matmul_trans_b_gradients() {
        fd_check(
            |t, inp| {
                let a = t.push_raw(inp[0].clone(), 2, 3);
                let b = t.push_raw(inp[1].clone(), 4, 3);
                let c = t.matmul_trans_b(a, b);
                let loss = t.project(c, &randv(8, "mtb-w"));
                (vec![a, b], loss)
            },
            vec![randv(6, "mtb-a"), randv(12, "mtb-b")],
        );
    }

    #[test]
    fn layer_norm_gradients() {
        fd_check(
            |t, inp| {
                let x = t.push_raw(inp[0].clone(), 3, 4);
                let g = t.push_raw(inp[1].clone(), 1, 4);
                let b = t.push_raw(inp[2].clone(), 1, 4);
                let y = t.layer_norm(x, g, b);
                let loss = t.project(y, &randv(12, "ln-w"));
                (vec![x, g, b], loss)
            },
            vec![randv(12, "ln-x"), randv(4, "ln-g"), randv(4, "ln-b")],
        );
    }

    #[test]
    fn softmax_gelu_gradients() {
        fd_check(
            |t, inp| {
                let x = t.push_raw(inp[0].clone(), 2, 4);
                let s = t.softmax_rows(x);
                let g = t.gelu(s);
                let loss = t.project(g, &randv(8, "sg-w"));
                (vec![x], loss)
            },
            vec![randv(8, "sg-x")],
        );
    }

    #[test]
    fn concat_slice_gradients() {
        fd_check(
            |t, inp| {
                let a = t.push_raw(inp[0].clone(), 2, 3);
                let b = t.push_raw(inp[1].clone(), 2, 3);
                let cat = t.concat_rows(&[a, b]);
                let sl = t.slice_rows(cat, 1, 2);
                let cc = t.concat_cols(sl, sl);
                let loss = t.project(cc, &randv(12, "cs-w"));
                (vec![a, b], loss)
            },
            vec![randv(6, "cs-a"), randv(6, "cs-b")],
        );
    }

    #[test]
    fn cosine_pair_score_gradients() {
        fd_check(
            |t, inp| {
                let x = t.push_raw(inp[0].clone(), 1, 5);
                let z1 = t.push_raw(inp[1].clone(), 1, 5);
                let z2 = t.push_raw(inp[2].clone(), 1, 5);
                let s1 = t.cosine_sim(x, z1);
                let s2 = t.cosine_sim(x, z2);
                let q = t.pair_score(s1, s2);
                let loss = t.squared_error(q, 0.8);
                (vec![x, z1, z2], loss)
            },
            vec![randv(5, "cp-x"), randv(5, "cp-z1"), randv(5, "cp-z2")],
        );
    }

    #[test]
    fn shared_buffer_accumulates_gradient() {
        // Same buffer used twice: gradients must add.
        let mut tape = Tape::new();
        let x = tape.push_raw(vec![1.0, 2.0], 1, 2);
        let a = tape.scale(x, 2.0);
        let b = tape.scale(x, 3.0);
        let s = tape.add(a, b);
        let loss = tape.project(s, &[1.0, 1.0]);
        tape.backward(loss);
        assert_eq!(tape.grad(x), vec![5.0, 5.0]);
    }

    #[test]
    fn weighted_sum_gradients() {
        fd_check(
            |t, inp| {
                let a = t.push_raw(inp[0].clone(), 1, 1);
                let b = t.push_raw(inp[1].clone(), 1, 1);
                let e1 = t.squared_error(a, 0.25);
                let e2 = t.squared_error(b, 0.75);
                let loss = t.weighted_sum(&[e1, e2], &[1.0, 0.1]);
                (vec![a, b], loss)
            },
            vec![vec![0.4], vec![0.6]],
        );
    }
}
