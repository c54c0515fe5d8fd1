//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! append a node holding the result tensor plus whatever the backward rule
//! needs, and [`Tape::backward`] replays the nodes in reverse, accumulating
//! vector-Jacobian products. Gradients add across fan-out, and every named
//! parameter gets an entry in the result, exactly zero if the loss never
//! touched it.
//!
//! The tape also tallies multiply-accumulate work per recorded op (matmul
//! `m*k*n`, softmax and layer norm one per element, loss one per class,
//! everything else free). [`Tape::mac_count`] is the instrumented side of
//! the closed-form cost model in `accounting`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to a node on a tape. Only meaningful for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    Relu { x: Var },
    Sigmoid { x: Var },
    ConcatCols { xs: Vec<Var> },
    SoftmaxMasked { logits: Var, mask: Vec<bool> },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Dropout { x: Var, scaled_mask: Vec<f64> },
    Embed { table: Var, ids: Vec<usize> },
    MaskRows { x: Var, mask: Vec<bool> },
    BceMean { logits: Var, targets: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one backward pass, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Wrap an externally assembled map, e.g. a batch-mean of per-sample
    /// gradients.
    pub fn from_named(by_name: BTreeMap<String, Tensor>) -> Gradients {
        Gradients { by_name }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, String)>,
    macs: u64,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let id = Var(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Value computed for `v` during the forward pass.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Multiply-accumulate count of all ops recorded so far.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    /// Record an input or constant; no gradient is reported for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Record a named parameter leaf. Every registered parameter appears in
    /// the output of [`Tape::backward`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.params.push((v, name.into()));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = matmul_kernel(ta.data(), tb.data(), m, k, n);
        self.macs += (m * k * n) as u64;
        let value = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: t.shape().to_vec(),
                reason: "expected rank 2".into(),
            });
        }
        let (m, n) = (t.rows(), t.cols());
        let value = Tensor::from_vec(&[n, m], transpose_kernel(t.data(), m, n))?;
        Ok(self.push(value, Op::Transpose { x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_vec(ta.shape(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Add a rank-1 bias to every row of a rank-2 tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() != 2 || tb.rank() != 1 || tx.cols() != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let n = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor::from_vec(tx.shape(), data)?;
        Ok(self.push(value, Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data: Vec<f64> = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::from_vec(t.shape(), data).expect("scale preserves shape");
        self.push(value, Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data: Vec<f64> = t.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::from_vec(t.shape(), data).expect("relu preserves shape");
        self.push(value, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data: Vec<f64> = t.data().iter().map(|v| sigmoid_scalar(*v)).collect();
        let value = Tensor::from_vec(t.shape(), data).expect("sigmoid preserves shape");
        self.push(value, Op::Sigmoid { x })
    }

    /// Concatenate rank-2 tensors along the last (column) dimension.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidShape {
                op: "concat_cols",
                shape: vec![],
                reason: "nothing to concatenate".into(),
            });
        }
        let m = self.value(xs[0]).rows();
        let mut total_cols = 0;
        for &x in xs {
            let t = self.value(x);
            if t.rank() != 2 || t.rows() != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(xs[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            total_cols += t.cols();
        }
        let mut data = Vec::with_capacity(m * total_cols);
        for i in 0..m {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(i));
            }
        }
        let value = Tensor::from_vec(&[m, total_cols], data)?;
        Ok(self.push(value, Op::ConcatCols { xs: xs.to_vec() }))
    }

    /// Row-wise softmax with a shared column validity mask. Masked columns
    /// are excluded before exponentiation and come out exactly zero; each
    /// row sums to one over the valid columns.
    pub fn softmax_masked(&mut self, logits: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.cols() != mask.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_masked",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&v| v) {
            return Err(Error::DegenerateMask { row: 0 });
        }
        let (m, n) = (t.rows(), t.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = t.row(i);
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &v)| v)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                if mask[j] {
                    let e = (row[j] - max).exp();
                    data[i * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        self.macs += (m * n) as u64;
        let value = Tensor::from_vec(&[m, n], data)?;
        Ok(self.push(
            value,
            Op::SoftmaxMasked {
                logits,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Per-row normalization: `gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tx.rank() != 2 || tg.rank() != 1 || tg.shape()[0] != tx.cols() {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        if tb.shape() != tg.shape() {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: tg.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, d) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; m * d];
        let mut means = vec![0.0; m];
        let mut inv_stds = vec![0.0; m];
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            means[i] = mean;
            inv_stds[i] = inv_std;
            for j in 0..d {
                data[i * d + j] = tg.data()[j] * (row[j] - mean) * inv_std + tb.data()[j];
            }
        }
        self.macs += (m * d) as u64;
        let value = Tensor::from_vec(&[m, d], data)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                inv_std: inv_stds,
            },
        ))
    }

    /// Inverted dropout: in training, zero each element with probability
    /// `rate` and scale survivors by `1/(1-rate)`; in eval (or at rate 0)
    /// the input passes through untouched.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidRate { rate });
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let t = self.value(x);
        let keep_scale = 1.0 / (1.0 - rate);
        let scaled_mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep_scale })
            .collect();
        let data: Vec<f64> = t.data().iter().zip(&scaled_mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_vec(t.shape(), data)?;
        Ok(self.push(value, Op::Dropout { x, scaled_mask }))
    }

    /// Gather rows of an embedding table; gradient scatter-adds back.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "embed",
                shape: t.shape().to_vec(),
                reason: "embedding table must be rank 2".into(),
            });
        }
        let vocab = t.rows();
        let d = t.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::UnknownToken { id, vocab });
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::from_vec(&[ids.len(), d], data)?;
        Ok(self.push(value, Op::Embed { table, ids: ids.to_vec() }))
    }

    /// Zero whole rows where the mask is false; valid rows pass unchanged.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.rows() != mask.len() {
            return Err(Error::ShapeMismatch {
                op: "mask_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let d = t.cols();
        let mut data = t.data().to_vec();
        for (i, &keep) in mask.iter().enumerate() {
            if !keep {
                data[i * d..(i + 1) * d].fill(0.0);
            }
        }
        let value = Tensor::from_vec(t.shape(), data)?;
        Ok(self.push(value, Op::MaskRows { x, mask: mask.to_vec() }))
    }

    /// Mean binary cross-entropy over classes, on logits, in the stable
    /// `max(s,0) - s*t + ln(1 + exp(-|s|))` form. Targets must lie in [0,1].
    pub fn bce_loss(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        if t.numel() != targets.numel() {
            return Err(Error::ShapeMismatch {
                op: "bce_loss",
                lhs: t.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        for &v in targets.data() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidTarget { value: v });
            }
        }
        let n = t.numel();
        let mut total = 0.0;
        for (&s, &tgt) in t.data().iter().zip(targets.data()) {
            total += s.max(0.0) - s * tgt + (-s.abs()).exp().ln_1p();
        }
        self.macs += n as u64;
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(
            value,
            Op::BceMean {
                logits,
                targets: targets.data().to_vec(),
            },
        ))
    }

    /// Replay the tape backwards from a scalar loss. Returns a gradient for
    /// every registered parameter; parameters the loss does not reach get
    /// exact zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Matmul { a, b } => {
                    let ta = self.value(*a);
                    let tb = self.value(*b);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    // dA = dC * B^T, dB = A^T * dC
                    let bt = transpose_kernel(tb.data(), k, n);
                    let da = matmul_kernel(&g, &bt, m, n, k);
                    let at = transpose_kernel(ta.data(), m, k);
                    let db = matmul_kernel(&at, &g, k, m, n);
                    accumulate(&mut grads, a.0, &da);
                    accumulate(&mut grads, b.0, &db);
                }
                Op::Transpose { x } => {
                    let t = self.value(idx_var(idx));
                    let (m, n) = (t.rows(), t.cols());
                    let gx = transpose_kernel(&g, m, n);
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, a.0, &g);
                    accumulate(&mut grads, b.0, &g);
                }
                Op::AddBias { x, bias } => {
                    accumulate(&mut grads, x.0, &g);
                    let n = self.value(*bias).numel();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, bias.0, &gb);
                }
                Op::Scale { x, factor } => {
                    let gx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::Relu { x } => {
                    let input = self.value(*x);
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(input.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::Sigmoid { x } => {
                    let out = &self.nodes[idx].value;
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(out.data())
                        .map(|(gv, ov)| gv * ov * (1.0 - ov))
                        .collect();
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::ConcatCols { xs } => {
                    let m = self.value(xs[0]).rows();
                    let total: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
                    let mut offset = 0;
                    for &x in xs {
                        let c = self.value(x).cols();
                        let mut gx = vec![0.0; m * c];
                        for i in 0..m {
                            gx[i * c..(i + 1) * c]
                                .copy_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        accumulate(&mut grads, x.0, &gx);
                        offset += c;
                    }
                }
                Op::SoftmaxMasked { logits, mask } => {
                    let out = &node.value;
                    let (m, n) = (out.rows(), out.cols());
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        let orow = out.row(i);
                        let grow = &g[i * n..(i + 1) * n];
                        let dot: f64 = orow
                            .iter()
                            .zip(grow)
                            .zip(mask)
                            .filter(|(_, &v)| v)
                            .map(|((o, gv), _)| o * gv)
                            .sum();
                        for j in 0..n {
                            if mask[j] {
                                gx[i * n + j] = orow[j] * (grow[j] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, logits.0, &gx);
                }
                Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
                    let tx = self.value(*x);
                    let tg = self.value(*gamma);
                    let (m, d) = (tx.rows(), tx.cols());
                    let mut gx = vec![0.0; m * d];
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for i in 0..m {
                        let row = tx.row(i);
                        let grow = &g[i * d..(i + 1) * d];
                        // xhat_j = (x_j - mean) * inv_std
                        let mut sum_gy = 0.0; // sum of gamma*grad
                        let mut sum_gy_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (row[j] - mean[i]) * inv_std[i];
                            let gyj = tg.data()[j] * grow[j];
                            sum_gy += gyj;
                            sum_gy_xhat += gyj * xhat;
                            gg[j] += grow[j] * xhat;
                            gb[j] += grow[j];
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let xhat = (row[j] - mean[i]) * inv_std[i];
                            let gyj = tg.data()[j] * grow[j];
                            gx[i * d + j] =
                                inv_std[i] * (gyj - inv_d * sum_gy - xhat * inv_d * sum_gy_xhat);
                        }
                    }
                    accumulate(&mut grads, x.0, &gx);
                    accumulate(&mut grads, gamma.0, &gg);
                    accumulate(&mut grads, beta.0, &gb);
                }
                Op::Dropout { x, scaled_mask } => {
                    let gx: Vec<f64> = g.iter().zip(scaled_mask).map(|(gv, m)| gv * m).collect();
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::Embed { table, ids } => {
                    let t = self.value(*table);
                    let d = t.cols();
                    let mut gt = vec![0.0; t.numel()];
                    for (pos, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[pos * d + j];
                        }
                    }
                    accumulate(&mut grads, table.0, &gt);
                }
                Op::MaskRows { x, mask } => {
                    let d = self.value(*x).cols();
                    let mut gx = g.clone();
                    for (i, &keep) in mask.iter().enumerate() {
                        if !keep {
                            gx[i * d..(i + 1) * d].fill(0.0);
                        }
                    }
                    accumulate(&mut grads, x.0, &gx);
                }
                Op::BceMean { logits, targets } => {
                    let s = self.value(*logits);
                    let n = s.numel() as f64;
                    let scale = g[0] / n;
                    let gx: Vec<f64> = s
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(sv, tv)| scale * (sigmoid_scalar(*sv) - tv))
                        .collect();
                    accumulate(&mut grads, logits.0, &gx);
                }
            }
        }

        let mut by_name = BTreeMap::new();
        for (var, name) in &self.params {
            let shape = self.value(*var).shape().to_vec();
            let grad = match &grads[var.0] {
                Some(g) => Tensor::from_vec(&shape, g.clone())?,
                None => Tensor::zeros(&shape),
            };
            by_name.insert(name.clone(), grad);
        }
        Ok(Gradients { by_name })
    }
}

fn idx_var(idx: usize) -> Var {
    Var(idx)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => grads[idx] = Some(g.to_vec()),
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_kernel(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}
