//! Operation tape and reverse-mode gradient propagation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: S },
    Relu { a: Var },
    SoftmaxRows { a: Var },
    LayerNormRows { x: Var, gamma: Var, beta: Var, eps: S },
    ConcatRows { a: Var, b: Var },
    ConcatCols { a: Var, b: Var },
    SliceCols { a: Var, start: usize, len: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Sum { a: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, pad_id: Option<usize>, mean: bool },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    data: Vec<S>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
    op: Op<S>,
}

/// Tape of recorded operations. Nodes are appended in execution order and
/// visited exactly once, in reverse, during [`Graph::backward`].
#[derive(Debug)]
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Inserts a tensor as a leaf; its `requires_grad` flag decides whether
    /// backward fills a gradient for it.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(t.data, t.shape, t.requires_grad, Op::Leaf)
    }

    /// Inserts a non-differentiable constant (masks, positional encodings).
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t.data, t.shape, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Copies a node out of the tape as a standalone tensor (with its
    /// gradient, if backward has produced one).
    pub fn detach(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: n.requires_grad,
            grad: n.grad.clone(),
        }
    }

    pub fn scalar_value(&self, v: Var) -> Result<S> {
        let n = &self.nodes[v.0];
        if n.data.len() != 1 {
            return Err(Error::contract(format!(
                "expected scalar node, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.data[0])
    }

    fn push(&mut self, data: Vec<S>, shape: Vec<usize>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::Dimension {
                op,
                lhs: s.clone(),
                rhs: vec![],
            }),
        }
    }

    // ---- forward operations ------------------------------------------------

    /// Matrix product `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, vec![m, n], rg, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.requires(a);
        Ok(self.push(data, vec![n, m], rg, Op::Transpose { a }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, shape, rg, Op::Add { a, b }))
    }

    /// Adds a `[n]` row vector to every row of a `[m×n]` matrix (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        if self.nodes[row.0].shape != [n] {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[row.0].shape.clone(),
            });
        }
        let src = &self.nodes[a.0].data;
        let r = &self.nodes[row.0].data;
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(src[i * n + j] + r[j]);
            }
        }
        let rg = self.requires(a) || self.requires(row);
        Ok(self.push(data, vec![m, n], rg, Op::AddRow { a, row }))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dimension {
                op: "mul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, shape, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let data: Vec<S> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a);
        self.push(data, shape, rg, Op::Scale { a, c })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| if x > S::zero() { x } else { S::zero() })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.requires(a);
        self.push(data, shape, rg, Op::Relu { a })
    }

    /// Row-wise softmax with per-row max subtraction, so huge logits do not
    /// overflow. Every output row is non-negative and sums to 1.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "softmax_rows")?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            softmax_row(&src[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n]);
        }
        let rg = self.requires(a);
        Ok(self.push(data, vec![m, n], rg, Op::SoftmaxRows { a }))
    }

    /// Per-row layer normalization: `(x - mean) / sqrt(var + eps) * gamma + beta`.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm_rows")?;
        if self.nodes[gamma.0].shape != [n] || self.nodes[beta.0].shape != [n] {
            return Err(Error::Dimension {
                op: "layer_norm_rows",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let inv_n = S::one() / S::from_real(n as f64);
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mut mean = S::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_n;
            let mut var = S::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var *= inv_n;
            let inv_std = S::one() / (var + eps).sqrt();
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(data, vec![m, n], rg, Op::LayerNormRows { x, gamma, beta, eps }))
    }

    /// Stacks `a` on top of `b`; both must have the same column count.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, n) = self.dims2(a, "concat_rows")?;
        let (mb, nb) = self.dims2(b, "concat_rows")?;
        if n != nb {
            return Err(Error::Dimension {
                op: "concat_rows",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut data = Vec::with_capacity((ma + mb) * n);
        data.extend_from_slice(&self.nodes[a.0].data);
        data.extend_from_slice(&self.nodes[b.0].data);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, vec![ma + mb, n], rg, Op::ConcatRows { a, b }))
    }

    /// Places `b`'s columns to the right of `a`'s; same row count required.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, na) = self.dims2(a, "concat_cols")?;
        let (mb, nb) = self.dims2(b, "concat_cols")?;
        if m != mb {
            return Err(Error::Dimension {
                op: "concat_cols",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let mut data = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            data.extend_from_slice(&da[i * na..(i + 1) * na]);
            data.extend_from_slice(&db[i * nb..(i + 1) * nb]);
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(data, vec![m, na + nb], rg, Op::ConcatCols { a, b }))
    }

    /// Extracts columns `[start, start+len)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start + len > n {
            return Err(Error::Index(format!(
                "slice_cols [{start}, {}) out of {n} columns",
                start + len
            )));
        }
        let src = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.requires(a);
        Ok(self.push(data, vec![m, len], rg, Op::SliceCols { a, start, len }))
    }

    /// Row lookup `table[ids]`, e.g. token embedding. Gradients scatter-add
    /// back into the table rows.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.dims2(table, "gather_rows")?;
        let src = &self.nodes[table.0].data;
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index(format!(
                    "gather_rows id {id} out of {rows} rows"
                )));
            }
            data.extend_from_slice(&src[id * n..(id + 1) * n]);
        }
        let rg = self.requires(table);
        Ok(self.push(
            data,
            vec![ids.len(), n],
            rg,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Sum of all elements, as a `[1]` scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let mut total = S::zero();
        for &v in &self.nodes[a.0].data {
            total += v;
        }
        let rg = self.requires(a);
        self.push(vec![total], vec![1], rg, Op::Sum { a })
    }

    /// Token-level negative log-likelihood of `targets` under `logits [t×V]`.
    ///
    /// Positions whose target equals `pad_id` are excluded. Returns the mean
    /// over included positions when `mean` is true, otherwise their sum.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        pad_id: Option<usize>,
        mean: bool,
    ) -> Result<Var> {
        let (t, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: vec![t, vocab],
                rhs: vec![targets.len()],
            });
        }
        if t == 0 {
            return Err(Error::contract("cross_entropy needs at least one position"));
        }
        for &y in targets {
            if y >= vocab {
                return Err(Error::Index(format!(
                    "cross_entropy target id {y} out of vocab {vocab}"
                )));
            }
        }
        let included = targets
            .iter()
            .filter(|&&y| Some(y) != pad_id)
            .count();
        if included == 0 {
            return Err(Error::contract(
                "cross_entropy: every position is padding",
            ));
        }
        let src = &self.nodes[logits.0].data;
        let mut total = S::zero();
        for (i, &y) in targets.iter().enumerate() {
            if Some(y) == pad_id {
                continue;
            }
            let row = &src[i * vocab..(i + 1) * vocab];
            total += -log_softmax_at(row, y);
        }
        if mean {
            total /= S::from_real(included as f64);
        }
        let rg = self.requires(logits);
        Ok(self.push(
            vec![total],
            vec![1],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad_id,
                mean,
            },
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Back-propagates from a scalar `loss`, filling gradients of every node
    /// that requires them. A tape can be run backwards only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::state(
                "backward already ran on this tape; record a fresh graph",
            ));
        }
        let n = &self.nodes[loss.0];
        if n.data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                n.shape
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let grad = self.nodes[idx].grad.clone().unwrap();
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let nn = self.nodes[b.0].shape[1];
                    if self.requires(a) {
                        // dA = G · Bᵀ
                        let bt = transpose_raw(&self.nodes[b.0].data, k, nn);
                        let da = matmul_raw(&grad, &bt, m, nn, k);
                        self.accumulate(a, &da);
                    }
                    if self.requires(b) {
                        // dB = Aᵀ · G
                        let at = transpose_raw(&self.nodes[a.0].data, m, k);
                        let db = matmul_raw(&at, &grad, k, m, nn);
                        self.accumulate(b, &db);
                    }
                }
                Op::Transpose { a } => {
                    if self.requires(a) {
                        let (m, nn) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                        let da = transpose_raw(&grad, m, nn);
                        self.accumulate(a, &da);
                    }
                }
                Op::Add { a, b } => {
                    if self.requires(a) {
                        self.accumulate(a, &grad);
                    }
                    if self.requires(b) {
                        self.accumulate(b, &grad);
                    }
                }
                Op::AddRow { a, row } => {
                    if self.requires(a) {
                        self.accumulate(a, &grad);
                    }
                    if self.requires(row) {
                        let (m, nn) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                        let mut dr = vec![S::zero(); nn];
                        for i in 0..m {
                            for j in 0..nn {
                                dr[j] += grad[i * nn + j];
                            }
                        }
                        self.accumulate(row, &dr);
                    }
                }
                Op::Mul { a, b } => {
                    if self.requires(a) {
                        let da: Vec<S> = grad
                            .iter()
                            .zip(&self.nodes[b.0].data)
                            .map(|(&g, &v)| g * v)
                            .collect();
                        self.accumulate(a, &da);
                    }
                    if self.requires(b) {
                        let db: Vec<S> = grad
                            .iter()
                            .zip(&self.nodes[a.0].data)
                            .map(|(&g, &v)| g * v)
                            .collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::Scale { a, c } => {
                    if self.requires(a) {
                        let da: Vec<S> = grad.iter().map(|&g| g * c).collect();
                        self.accumulate(a, &da);
                    }
                }
                Op::Relu { a } => {
                    if self.requires(a) {
                        let da: Vec<S> = grad
                            .iter()
                            .zip(&self.nodes[a.0].data)
                            .map(|(&g, &x)| if x > S::zero() { g } else { S::zero() })
                            .collect();
                        self.accumulate(a, &da);
                    }
                }
                Op::SoftmaxRows { a } => {
                    if self.requires(a) {
                        let (m, nn) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                        let y = &self.nodes[idx].data;
                        let mut da = vec![S::zero(); m * nn];
                        for i in 0..m {
                            let yr = &y[i * nn..(i + 1) * nn];
                            let gr = &grad[i * nn..(i + 1) * nn];
                            let mut dot = S::zero();
                            for j in 0..nn {
                                dot += yr[j] * gr[j];
                            }
                            for j in 0..nn {
                                da[i * nn + j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        self.accumulate(a, &da);
                    }
                }
                Op::LayerNormRows { x, gamma, beta, eps } => {
                    let (m, nn) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                    let src = self.nodes[x.0].data.clone();
                    let g = self.nodes[gamma.0].data.clone();
                    let inv_n = S::one() / S::from_real(nn as f64);
                    let mut dx = vec![S::zero(); m * nn];
                    let mut dgamma = vec![S::zero(); nn];
                    let mut dbeta = vec![S::zero(); nn];
                    for i in 0..m {
                        let row = &src[i * nn..(i + 1) * nn];
                        let gr = &grad[i * nn..(i + 1) * nn];
                        let mut mean = S::zero();
                        for &v in row {
                            mean += v;
                        }
                        mean *= inv_n;
                        let mut var = S::zero();
                        for &v in row {
                            var += (v - mean) * (v - mean);
                        }
                        var *= inv_n;
                        let inv_std = S::one() / (var + eps).sqrt();
                        // dy = g∘gamma; dx = (dy - mean(dy) - x̂·mean(dy∘x̂)) / std
                        let mut mean_dy = S::zero();
                        let mut mean_dyx = S::zero();
                        for j in 0..nn {
                            let xh = (row[j] - mean) * inv_std;
                            let dy = gr[j] * g[j];
                            mean_dy += dy;
                            mean_dyx += dy * xh;
                            dgamma[j] += gr[j] * xh;
                            dbeta[j] += gr[j];
                        }
                        mean_dy *= inv_n;
                        mean_dyx *= inv_n;
                        for j in 0..nn {
                            let xh = (row[j] - mean) * inv_std;
                            let dy = gr[j] * g[j];
                            dx[i * nn + j] = (dy - mean_dy - xh * mean_dyx) * inv_std;
                        }
                    }
                    if self.requires(x) {
                        self.accumulate(x, &dx);
                    }
                    if self.requires(gamma) {
                        self.accumulate(gamma, &dgamma);
                    }
                    if self.requires(beta) {
                        self.accumulate(beta, &dbeta);
                    }
                }
                Op::ConcatRows { a, b } => {
                    let na = self.nodes[a.0].data.len();
                    if self.requires(a) {
                        self.accumulate(a, &grad[..na]);
                    }
                    if self.requires(b) {
                        self.accumulate(b, &grad[na..]);
                    }
                }
                Op::ConcatCols { a, b } => {
                    let (m, na) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let nb = self.nodes[b.0].shape[1];
                    let total = na + nb;
                    if self.requires(a) {
                        let mut da = vec![S::zero(); m * na];
                        for i in 0..m {
                            da[i * na..(i + 1) * na]
                                .copy_from_slice(&grad[i * total..i * total + na]);
                        }
                        self.accumulate(a, &da);
                    }
                    if self.requires(b) {
                        let mut db = vec![S::zero(); m * nb];
                        for i in 0..m {
                            db[i * nb..(i + 1) * nb]
                                .copy_from_slice(&grad[i * total + na..(i + 1) * total]);
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::SliceCols { a, start, len } => {
                    if self.requires(a) {
                        let (m, n_full) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                        let mut da = vec![S::zero(); m * n_full];
                        for i in 0..m {
                            for j in 0..len {
                                da[i * n_full + start + j] = grad[i * len + j];
                            }
                        }
                        self.accumulate(a, &da);
                    }
                }
                Op::GatherRows { table, ids } => {
                    if self.requires(table) {
                        let n_cols = self.nodes[table.0].shape[1];
                        let mut dt = vec![S::zero(); self.nodes[table.0].data.len()];
                        for (i, &id) in ids.iter().enumerate() {
                            for j in 0..n_cols {
                                dt[id * n_cols + j] += grad[i * n_cols + j];
                            }
                        }
                        self.accumulate(table, &dt);
                    }
                }
                Op::Sum { a } => {
                    if self.requires(a) {
                        let da = vec![grad[0]; self.nodes[a.0].data.len()];
                        self.accumulate(a, &da);
                    }
                }
                Op::CrossEntropy { logits, targets, pad_id, mean } => {
                    if self.requires(logits) {
                        let (t, vocab) =
                            (self.nodes[logits.0].shape[0], self.nodes[logits.0].shape[1]);
                        let src = &self.nodes[logits.0].data;
                        let included = targets
                            .iter()
                            .filter(|&&y| Some(y) != pad_id)
                            .count();
                        let factor = if mean {
                            grad[0] / S::from_real(included as f64)
                        } else {
                            grad[0]
                        };
                        let mut dl = vec![S::zero(); t * vocab];
                        let mut probs = vec![S::zero(); vocab];
                        for (i, &y) in targets.iter().enumerate() {
                            if Some(y) == pad_id {
                                continue;
                            }
                            let row = &src[i * vocab..(i + 1) * vocab];
                            softmax_row(row, &mut probs);
                            for j in 0..vocab {
                                let indicator = if j == y { S::one() } else { S::zero() };
                                dl[i * vocab + j] = (probs[j] - indicator) * factor;
                            }
                        }
                        self.accumulate(logits, &dl);
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[S]) {
        let node = &mut self.nodes[v.0];
        let grad = node
            .grad
            .get_or_insert_with(|| vec![S::zero(); node.data.len()]);
        debug_assert_eq!(grad.len(), delta.len());
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }
}

/// Row-major `[m×k] · [k×n]` kernel. The i-k-j loop order keeps memory
/// access sequential while summing each output element in ascending-k order,
/// so results are bit-identical to the textbook triple loop.
pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
    out
}

pub(crate) fn transpose_raw<S: Scalar>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let mut max = row[0];
    for &v in &row[1..] {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_at<S: Scalar>(row: &[S], idx: usize) -> S {
    let mut max = row[0];
    for &v in &row[1..] {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for &v in row {
        sum += (v - max).exp();
    }
    row[idx] - max - sum.ln()
}
