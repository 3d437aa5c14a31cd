//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] owns every value produced during one forward pass. Operations are
//! appended in execution order, so the record is topological by construction and
//! [`Graph::backward`] is a single reverse sweep. Each training step builds a fresh
//! graph; gradients accumulate additively within a graph and start from zero in
//! the next one.

use crate::attention::{slice_sort_backward, PermutationRecord};
use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `sqrt(2/pi)` in the tanh form of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient in the tanh form of GELU.
pub const GELU_CUBIC: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var, f64),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    PermuteRows(Var, Vec<usize>),
    PermuteColumns(Var, PermutationRecord),
    Embedding(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Row(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: receives a gradient on [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Every [`PermutationRecord`] captured by column permutations, in execution order.
    pub fn permutation_records(&self) -> impl Iterator<Item = &PermutationRecord> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::PermuteColumns(_, rec) => Some(rec),
            _ => None,
        })
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).require_matrix(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix(a, "matmul")?;
        let (k2, m) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; n * m];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_nt_scaled(a, b, 1.0)
    }

    /// `alpha · a · bᵀ` as one node, so attention scores need a single `N×N` buffer.
    pub fn matmul_nt_scaled(&mut self, a: Var, b: Var, alpha: f64) -> Result<Var> {
        let (n, k) = self.matrix(a, "matmul_nt")?;
        let (m, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; n * m];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        if alpha != 1.0 {
            out.iter_mut().for_each(|v| *v *= alpha);
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMulNt(a, b, alpha), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`m` vector to every row of an `n×m` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, m) = self.matrix(x, "add_row")?;
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.numel() != m {
            return Err(Error::dim("add_row", vx.shape(), vb.shape()));
        }
        let data = vx
            .data()
            .chunks(m)
            .flat_map(|row| row.iter().zip(vb.data()).map(|(a, b)| a + b))
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Row-wise softmax with the row maximum subtracted before exponentiation.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.matrix(x, "softmax_rows")?;
        let vx = self.value(x);
        if !vx.all_finite() {
            return Err(Error::Numeric("softmax_rows received a non-finite input".into()));
        }
        let mut out = vec![0.0; n * m];
        for (src, dst) in vx.data().chunks(m).zip(out.chunks_mut(m)) {
            softmax_into(src, dst);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::SoftmaxRows(x), rg))
    }

    /// Per-row normalization with population variance; `eps` is added before the square root.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (n, m) = self.matrix(x, "layer_norm")?;
        if m == 0 || eps <= 0.0 {
            return Err(Error::Contract(format!(
                "layer_norm needs m >= 1 and eps > 0 (m = {m}, eps = {eps})"
            )));
        }
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        if vg.numel() != m || vb.numel() != m {
            return Err(Error::dim("layer_norm", vx.shape(), vg.shape()));
        }
        let mut xhat = vec![0.0; n * m];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..m {
                let h = (row[j] - mean) * r;
                xhat[i * m + j] = h;
                out[i * m + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::new(vec![n, m], out)?, op, rg))
    }

    /// GELU in its tanh form:
    /// `0.5 · x · (1 + tanh(GELU_SQRT_2_OVER_PI · (x + GELU_CUBIC · x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu_scalar(v)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Row gather: output row `r` is input row `perm[r]`.
    pub fn permute_rows(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let (n, m) = self.matrix(x, "permute_rows")?;
        if perm.len() != n {
            return Err(Error::Index(format!(
                "permutation of length {} applied to {n} rows",
                perm.len()
            )));
        }
        check_bijection(perm)?;
        let vx = self.value(x);
        let mut out = Vec::with_capacity(n * m);
        for &src in perm {
            out.extend_from_slice(vx.row(src));
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, m], out)?,
            Op::PermuteRows(x, perm.to_vec()),
            rg,
        ))
    }

    /// Per-column gather: output `[r, c]` is input `[record.perms[c][r], c]`.
    pub fn permute_columns(&mut self, x: Var, record: PermutationRecord) -> Result<Var> {
        let (n, m) = self.matrix(x, "permute_columns")?;
        if record.len() != n || record.channels() != m {
            return Err(Error::dim(
                "permute_columns",
                self.value(x).shape(),
                &[record.len(), record.channels()],
            ));
        }
        let out = record.apply(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::PermuteColumns(x, record), rg))
    }

    /// Output row `r` is table row `ids[r]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix(table, "embedding")?;
        let vt = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index(format!("token id {id} outside vocabulary of {v}")));
            }
            out.extend_from_slice(vt.row(id));
        }
        let rg = self.needs(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding(table, ids.to_vec()),
            rg,
        ))
    }

    /// Mean negative log-likelihood over the batch, computed through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != b {
            return Err(Error::dim("cross_entropy", &[b, c], &[targets.len()]));
        }
        if b == 0 {
            return Err(Error::Contract("cross_entropy over an empty batch".into()));
        }
        let vl = self.value(logits);
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Index(format!("target {t} outside {c} classes")));
            }
            let row = vl.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.needs(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss / b as f64), op, rg))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.matrix(x, "slice_cols")?;
        if start + len > m {
            return Err(Error::dim("slice_cols", &[n, m], &[start, len]));
        }
        let vx = self.value(x);
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&vx.row(i)[start..start + len]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![n, len], out)?, Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_cols of nothing".into()));
        };
        let (n, _) = self.matrix(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pm) = self.matrix(p, "concat_cols")?;
            if pn != n {
                return Err(Error::dim("concat_cols", self.value(first).shape(), &[pn, pm]));
            }
            widths.push(pm);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::new(vec![n, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let (_, m) = self.matrix(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (pn, pm) = self.matrix(p, "concat_rows")?;
            if pm != m {
                return Err(Error::dim("concat_rows", self.value(first).shape(), &[pn, pm]));
            }
            rows += pn;
        }
        let mut out = Vec::with_capacity(rows * m);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::new(vec![rows, m], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Row `index` as a `1×m` matrix.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let (n, m) = self.matrix(x, "row")?;
        if index >= n {
            return Err(Error::Index(format!("row {index} of a {n}-row matrix")));
        }
        let out = Tensor::new(vec![1, m], self.value(x).row(index).to_vec())?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Row(x, index), rg))
    }

    /// Reverse sweep from a scalar `loss`. Populates gradients on every trainable
    /// leaf reachable from it; leaves used more than once receive the sum.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k) = (va.rows(), va.cols());
                let m = vb.cols();
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; n * k];
                    gemm_nt(g.data(), vb.data(), &mut da, n, m, k);
                    self.accumulate(grads, *a, Tensor::new(vec![n, k], da)?);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * m];
                    gemm_tn(va.data(), g.data(), &mut db, k, n, m);
                    self.accumulate(grads, *b, Tensor::new(vec![k, m], db)?);
                }
            }
            Op::MatMulNt(a, b, alpha) => {
                // C = α·A·Bᵀ: dA = α·dC·B, dB = α·dCᵀ·A
                let scaled;
                let g = if *alpha == 1.0 {
                    g
                } else {
                    scaled = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().map(|v| v * alpha).collect(),
                    )?;
                    &scaled
                };
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k) = (va.rows(), va.cols());
                let m = vb.rows();
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; n * k];
                    gemm_nn(g.data(), vb.data(), &mut da, n, m, k);
                    self.accumulate(grads, *a, Tensor::new(vec![n, k], da)?);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; m * k];
                    gemm_tn(g.data(), va.data(), &mut db, m, n, k);
                    self.accumulate(grads, *b, Tensor::new(vec![m, k], db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[bias.0].requires_grad {
                    let m = g.cols();
                    let mut db = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, db)?);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                let db = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), da)?);
                self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), db)?);
            }
            Op::Scale(a, factor) => {
                let da = g.data().iter().map(|x| x * factor).collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), da)?);
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), s));
            }
            Op::SoftmaxRows(x) => {
                let m = out.cols();
                let mut dx = vec![0.0; out.numel()];
                for ((y, dy), d) in out
                    .data()
                    .chunks(m)
                    .zip(g.data().chunks(m))
                    .zip(dx.chunks_mut(m))
                {
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        d[j] = y[j] * (dy[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let m = out.cols();
                let n = out.rows();
                let vg = self.value(*gamma).data();
                let mut dx = vec![0.0; n * m];
                let mut dgamma = vec![0.0; m];
                let mut dbeta = vec![0.0; m];
                let mut dxhat = vec![0.0; m];
                for i in 0..n {
                    let dy = &g.data()[i * m..(i + 1) * m];
                    let h = &xhat[i * m..(i + 1) * m];
                    for j in 0..m {
                        dxhat[j] = dy[j] * vg[j];
                        dgamma[j] += dy[j] * h[j];
                        dbeta[j] += dy[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / m as f64;
                    let mean_dh = dxhat.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                    for j in 0..m {
                        dx[i * m + j] = rstd[i] * (dxhat[j] - mean_d - h[j] * mean_dh);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, m], dx)?);
                let gshape = self.value(*gamma).shape().to_vec();
                let bshape = self.value(*beta).shape().to_vec();
                self.accumulate(grads, *gamma, Tensor::new(gshape, dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(bshape, dbeta)?);
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let dx = vx
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &d)| d * gelu_derivative(v))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(vx.shape().to_vec(), dx)?);
            }
            Op::PermuteRows(x, perm) => {
                let m = g.cols();
                let mut dx = vec![0.0; g.numel()];
                for (r, &src) in perm.iter().enumerate() {
                    for j in 0..m {
                        dx[src * m + j] += g.data()[r * m + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::PermuteColumns(x, record) => {
                let dx = slice_sort_backward(g, record)?;
                self.accumulate(grads, *x, dx);
            }
            Op::Embedding(table, ids) => {
                if self.nodes[table.0].requires_grad {
                    let vt = self.value(*table);
                    let d = vt.cols();
                    let mut dt = vec![0.0; vt.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g.data()[r * d + j];
                        }
                    }
                    self.accumulate(grads, *table, Tensor::new(vt.shape().to_vec(), dt)?);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let b = targets.len();
                let scale = g.data()[0] / b as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * c + t] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(vec![b, c], dl)?);
            }
            Op::SliceCols(x, start) => {
                let vx = self.value(*x);
                let (n, m) = (vx.rows(), vx.cols());
                let len = g.cols();
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    dx[i * m + start..i * m + start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, m], dx)?);
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.nodes[p.0].requires_grad {
                        let mut dp = Vec::with_capacity(n * w);
                        for i in 0..n {
                            dp.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![n, w], dp)?);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let m = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.nodes[p.0].requires_grad {
                        let dp = g.data()[offset * m..(offset + rows) * m].to_vec();
                        self.accumulate(grads, p, Tensor::new(vec![rows, m], dp)?);
                    }
                    offset += rows;
                }
            }
            Op::Row(x, index) => {
                let vx = self.value(*x);
                let m = vx.cols();
                let mut dx = Tensor::zeros(vx.shape());
                dx.data_mut()[index * m..(index + 1) * m].copy_from_slice(g.data());
                self.accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn check_bijection(perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return Err(Error::Index(format!("{perm:?} is not a bijection on 0..{}", perm.len())));
        }
        seen[p] = true;
    }
    Ok(())
}
