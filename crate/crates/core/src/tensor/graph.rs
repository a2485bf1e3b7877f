use super::kernels::{self, axpy, dot, sigmoid};
use super::{Float, Tensor};
use crate::error::{shape_err, Error, Result};

/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Head layout and sequence packing for [`Graph::causal_attention`].
///
/// Rows of the packed input are split into independent sequences by
/// `segments` (start row, length); attention never crosses a segment.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub segments: Vec<(usize, usize)>,
}

enum Op<T> {
    Leaf,
    Consumed,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterAddRows {
        base: Var,
        src: Var,
        rows: Vec<usize>,
    },
    SelectCols {
        x: Var,
        cols: Vec<usize>,
        k: usize,
    },
    GatherElems {
        x: Var,
        idx: Vec<usize>,
    },
    MulRows {
        x: Var,
        w: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Consumed => "consumed",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Silu(..) => "silu",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::SelectCols { .. } => "select_cols",
            Op::GatherElems { .. } => "gather_elems",
            Op::MulRows { .. } => "mul_rows",
            Op::Attention { .. } => "causal_attention",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of tensor operations recorded in execution order.
///
/// Nodes are appended as operations run, so insertion order is a topological
/// order and [`Graph::backward`] replays it in reverse exactly once.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a leaf; it receives a gradient iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Constant subgraphs keep their value but drop saved activations.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mat_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let shape = self.shape(v);
        if shape.len() != 2 {
            return Err(shape_err(op, format!("expected a matrix, got shape {shape:?}")));
        }
        Ok((shape[0], shape[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    // ---- kernels -------------------------------------------------------

    /// `a[m x k] . b[k x n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims("matmul", a)?;
        let (k2, n) = self.mat_dims("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] . [{k2}x{n}]")));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a[m x k] . b[n x k]^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims("matmul_nt", a)?;
        let (n, k2) = self.mat_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("[{m}x{k}] . [{n}x{k2}]^T")));
        }
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `[n]` bias to every row of an `[m x n]` matrix. The only
    /// broadcasting operation in the engine.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.mat_dims("add_bias", x)?;
        if self.shape(bias) != [n] {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} for rows of width {n}", self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out)?, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Scale(x, c), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Silu(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.value(x).dims2();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            kernels::softmax_row(row);
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis with learnable scale and
    /// shift. A zero-variance row normalizes to all zeros.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, n) = self.value(x).dims2();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "scale {:?} / shift {:?} for width {n}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let eps = T::lit(LN_EPS);
        let inv_n = T::lit(1.0 / n as f64);
        let mut xhat = vec![T::zero(); rows * n];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Row lookup into a `[vocab x d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.mat_dims("embedding", table)?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Weighted token-level cross-entropy: `sum_r w_r * -log softmax(z_r)[t_r]`.
    ///
    /// Rows with weight zero are masked out. Passing `w_r = 1 / count` over
    /// the unmasked rows gives the masked mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let (rows, vocab) = self.mat_dims("cross_entropy", logits)?;
        if targets.len() != rows || weights.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{rows} rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * vocab];
        let mut loss = T::zero();
        for r in 0..rows {
            if weights[r] == T::zero() {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: t,
                    size: vocab,
                });
            }
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            p.copy_from_slice(&z[r * vocab..(r + 1) * vocab]);
            let max = p.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in p.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let lse = max + sum.ln();
            loss += weights[r] * (lse - z[r * vocab + t]);
            let inv = T::one() / sum;
            for v in p.iter_mut() {
                *v *= inv;
            }
        }
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s = self.value(x).data().iter().copied().sum::<T>() / T::lit(n as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Column means of an `[m x n]` matrix, giving `[n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat_dims("mean_rows", x)?;
        if m == 0 {
            return Err(shape_err("mean_rows", "no rows"));
        }
        let mut out = vec![T::zero(); n];
        for row in self.value(x).data().chunks(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::lit(1.0 / m as f64);
        for o in &mut out {
            *o *= inv;
        }
        self.push(Tensor::new(vec![n], out)?, Op::MeanRows(x), &[x])
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.mat_dims("gather_rows", x)?;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Index {
                    what: "rows",
                    index: r,
                    size: m,
                });
            }
            out.extend_from_slice(&xs[r * n..(r + 1) * n]);
        }
        self.push(
            Tensor::new(vec![rows.len(), n], out)?,
            Op::GatherRows { x, rows: rows.to_vec() },
            &[x],
        )
    }

    /// `out = base; out[rows[i]] += src[i]`
    pub fn scatter_add_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.mat_dims("scatter_add_rows", base)?;
        let (s, n2) = self.mat_dims("scatter_add_rows", src)?;
        if n != n2 || s != rows.len() {
            return Err(shape_err(
                "scatter_add_rows",
                format!("base [{m}x{n}], src [{s}x{n2}], {} rows", rows.len()),
            ));
        }
        let mut out = self.value(base).data().to_vec();
        let sv = self.value(src).data();
        for (i, &r) in rows.iter().enumerate() {
            if r >= m {
                return Err(Error::Index {
                    what: "rows",
                    index: r,
                    size: m,
                });
            }
            for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(&sv[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::ScatterAddRows {
                base,
                src,
                rows: rows.to_vec(),
            },
            &[base, src],
        )
    }

    /// Picks `k` columns per row: `out[r, s] = x[r, cols[r * k + s]]`.
    pub fn select_cols(&mut self, x: Var, cols: &[usize], k: usize) -> Result<Var> {
        let (m, n) = self.mat_dims("select_cols", x)?;
        if cols.len() != m * k {
            return Err(shape_err(
                "select_cols",
                format!("{} indices for {m} rows x {k}", cols.len()),
            ));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(m * k);
        for r in 0..m {
            for s in 0..k {
                let c = cols[r * k + s];
                if c >= n {
                    return Err(Error::Index {
                        what: "columns",
                        index: c,
                        size: n,
                    });
                }
                out.push(xs[r * n + c]);
            }
        }
        self.push(
            Tensor::new(vec![m, k], out)?,
            Op::SelectCols {
                x,
                cols: cols.to_vec(),
                k,
            },
            &[x],
        )
    }

    /// Flat element gather, giving a 1-D tensor.
    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= xs.len() {
                return Err(Error::Index {
                    what: "elements",
                    index: i,
                    size: xs.len(),
                });
            }
            out.push(xs[i]);
        }
        self.push(
            Tensor::new(vec![idx.len()], out)?,
            Op::GatherElems { x, idx: idx.to_vec() },
            &[x],
        )
    }

    /// Scales row `r` of an `[m x n]` matrix by `w[r]`.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, n) = self.mat_dims("mul_rows", x)?;
        if self.shape(w) != [m] {
            return Err(shape_err(
                "mul_rows",
                format!("weights {:?} for {m} rows", self.shape(w)),
            ));
        }
        let ws = self.value(w).data();
        let mut out = self.value(x).data().to_vec();
        for (row, &wv) in out.chunks_mut(n).zip(ws) {
            for v in row.iter_mut() {
                *v *= wv;
            }
        }
        self.push(Tensor::new(vec![m, n], out)?, Op::MulRows { x, w }, &[x, w])
    }

    /// Causal scaled dot-product attention over packed sequences.
    ///
    /// `q` is `[T x n_heads*head_dim]`, `k` and `v` are
    /// `[T x n_kv_heads*head_dim]`; query head `h` reads key/value head
    /// `h / (n_heads / n_kv_heads)`. Scores are scaled by `1/sqrt(head_dim)`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (t, qd) = self.mat_dims("causal_attention", q)?;
        let (tk, kd) = self.mat_dims("causal_attention", k)?;
        let AttentionLayout {
            n_heads,
            n_kv_heads,
            head_dim,
            ..
        } = layout;
        if n_heads == 0 || n_kv_heads == 0 || n_heads % n_kv_heads != 0 {
            return Err(shape_err(
                "causal_attention",
                format!("{n_heads} heads over {n_kv_heads} kv heads"),
            ));
        }
        if qd != n_heads * head_dim || kd != n_kv_heads * head_dim || tk != t || self.shape(v) != self.shape(k) {
            return Err(shape_err(
                "causal_attention",
                format!(
                    "q {:?}, k {:?}, v {:?} for {n_heads}x{head_dim} heads",
                    self.shape(q),
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        let covered: usize = layout.segments.iter().map(|s| s.1).sum();
        if covered != t || layout.segments.iter().any(|&(s, n)| s + n > t) {
            return Err(shape_err(
                "causal_attention",
                format!("segments cover {covered} of {t} rows"),
            ));
        }
        let group = n_heads / n_kv_heads;
        let scale = T::lit(1.0 / (head_dim as f64).sqrt());
        let qs = self.value(q).data();
        let ks = self.value(k).data();
        let vs = self.value(v).data();
        let prob_len: usize = layout.segments.iter().map(|s| s.1 * s.1).sum::<usize>() * n_heads;
        let mut probs = vec![T::zero(); prob_len];
        let mut out = vec![T::zero(); t * qd];
        let mut off = 0;
        for &(start, n) in &layout.segments {
            for h in 0..n_heads {
                let g = h / group;
                let p = &mut probs[off..off + n * n];
                off += n * n;
                for i in 0..n {
                    let qi = &qs[(start + i) * qd + h * head_dim..][..head_dim];
                    let row = &mut p[i * n..i * n + i + 1];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &ks[(start + j) * kd + g * head_dim..][..head_dim];
                        *s = dot(qi, kj) * scale;
                    }
                    kernels::softmax_row(row);
                    let oi = &mut out[(start + i) * qd + h * head_dim..][..head_dim];
                    for (j, &pij) in row.iter().enumerate() {
                        let vj = &vs[(start + j) * kd + g * head_dim..][..head_dim];
                        axpy(pij, vj, oi);
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![t, qd], out)?,
            Op::Attention { q, k, v, layout, probs },
            &[q, k, v],
        )
    }

    // ---- backward ------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Leaves that require gradients
    /// receive them (readable through [`Graph::grad`]); saved activations are
    /// released and a second call fails with [`Error::GraphConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Consumed);
            if let Op::Leaf = op {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
                let value = &mut self.nodes[i].value;
                match value.take_grad() {
                    Some(mut existing) => {
                        for (e, v) in existing.iter_mut().zip(&g) {
                            *e += *v;
                        }
                        value.set_grad(existing)?;
                    }
                    None => value.set_grad(g)?,
                }
                self.nodes[i].op = Op::Leaf;
                continue;
            }
            self.backward_op(i, op, g, &mut grads)?;
        }
        // Release whatever was not reached from the loss.
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.op = Op::Consumed;
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(&g) {
                    *e += *x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_op(&self, i: usize, op: Op<T>, g: Vec<T>, grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match op {
            Op::Leaf => unreachable!(),
            Op::Consumed => return Err(Error::GraphConsumed),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2();
                let n = self.value(b).dims2().1;
                if self.needs(a) {
                    let da = kernels::matmul_nt(&g, self.value(b).data(), m, n, k);
                    self.accumulate(grads, a, da);
                }
                if self.needs(b) {
                    let db = kernels::matmul_tn(self.value(a).data(), &g, m, k, n);
                    self.accumulate(grads, b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(a).dims2();
                let n = self.value(b).dims2().0;
                if self.needs(a) {
                    let da = kernels::matmul(&g, self.value(b).data(), m, n, k);
                    self.accumulate(grads, a, da);
                }
                if self.needs(b) {
                    let db = kernels::matmul_tn(&g, self.value(a).data(), m, n, k);
                    self.accumulate(grads, b, db);
                }
            }
            Op::Add(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.clone());
                }
                self.accumulate(grads, b, g);
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let da = g.iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, a, da);
                }
                if self.needs(b) {
                    let db = g.iter().zip(self.value(a).data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, b, db);
                }
            }
            Op::AddBias(x, bias) => {
                if self.needs(bias) {
                    let n = self.value(bias).numel();
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, bias, db);
                }
                self.accumulate(grads, x, g);
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, x, g.iter().map(|&v| v * c).collect());
            }
            Op::Silu(x) => {
                let dx = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&gv, &xv)| {
                        let s = sigmoid(xv);
                        gv * s * (T::one() + xv * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            Op::Softmax(x) => {
                let (_, n) = out.dims2();
                let mut dx = vec![T::zero(); g.len()];
                for ((d, gr), y) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let s = dot(gr, y);
                    for j in 0..n {
                        d[j] = y[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(gamma).numel();
                let gam = self.value(gamma).data();
                if self.needs(gamma) || self.needs(beta) {
                    let mut dg = vec![T::zero(); n];
                    let mut db = vec![T::zero(); n];
                    for (gr, h) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * h[j];
                            db[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, gamma, dg);
                    self.accumulate(grads, beta, db);
                }
                if self.needs(x) {
                    let inv_n = T::lit(1.0 / n as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    let mut dh = vec![T::zero(); n];
                    for (r, ((d, gr), h)) in dx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        for j in 0..n {
                            dh[j] = gr[j] * gam[j];
                        }
                        let mean_dh = dh.iter().copied().sum::<T>() * inv_n;
                        let mean_dh_h = dot(&dh, h) * inv_n;
                        for j in 0..n {
                            d[j] = rstd[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, x, dx);
                }
            }
            Op::Embedding { table, ids } => {
                let (vocab, d) = self.value(table).dims2();
                let mut dt = vec![T::zero(); vocab * d];
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                self.accumulate(grads, table, dt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                mut probs,
            } => {
                let vocab = self.value(logits).dims2().1;
                let upstream = g[0];
                for (r, row) in probs.chunks_mut(vocab).enumerate() {
                    let w = weights[r] * upstream;
                    if weights[r] == T::zero() {
                        continue;
                    }
                    row[targets[r]] -= T::one();
                    for v in row.iter_mut() {
                        *v *= w;
                    }
                }
                self.accumulate(grads, logits, probs);
            }
            Op::Sum(x) => {
                let n = self.value(x).numel();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(x).numel();
                self.accumulate(grads, x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::MeanRows(x) => {
                let (m, n) = self.value(x).dims2();
                let inv = T::lit(1.0 / m as f64);
                let mut dx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    dx.extend(g.iter().map(|&v| v * inv));
                }
                self.accumulate(grads, x, dx);
            }
            Op::GatherRows { x, rows } => {
                let (m, n) = self.value(x).dims2();
                let mut dx = vec![T::zero(); m * n];
                for (i, &r) in rows.iter().enumerate() {
                    for (o, &v) in dx[r * n..(r + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                        *o += v;
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::ScatterAddRows { base, src, rows } => {
                if self.needs(src) {
                    let n = self.value(base).dims2().1;
                    let mut ds = Vec::with_capacity(rows.len() * n);
                    for &r in &rows {
                        ds.extend_from_slice(&g[r * n..(r + 1) * n]);
                    }
                    self.accumulate(grads, src, ds);
                }
                self.accumulate(grads, base, g);
            }
            Op::SelectCols { x, cols, k } => {
                let (m, n) = self.value(x).dims2();
                let mut dx = vec![T::zero(); m * n];
                for r in 0..m {
                    for s in 0..k {
                        dx[r * n + cols[r * k + s]] += g[r * k + s];
                    }
                }
                self.accumulate(grads, x, dx);
            }
            Op::GatherElems { x, idx } => {
                let mut dx = vec![T::zero(); self.value(x).numel()];
                for (&i, &v) in idx.iter().zip(&g) {
                    dx[i] += v;
                }
                self.accumulate(grads, x, dx);
            }
            Op::MulRows { x, w } => {
                let n = self.value(x).dims2().1;
                let ws = self.value(w).data();
                if self.needs(w) {
                    let dw = g
                        .chunks(n)
                        .zip(self.value(x).data().chunks(n))
                        .map(|(gr, xr)| dot(gr, xr))
                        .collect();
                    self.accumulate(grads, w, dw);
                }
                if self.needs(x) {
                    let mut dx = g;
                    for (row, &wv) in dx.chunks_mut(n).zip(ws) {
                        for v in row.iter_mut() {
                            *v *= wv;
                        }
                    }
                    self.accumulate(grads, x, dx);
                }
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (dq, dk, dv) = self.attention_backward(q, k, v, &layout, &probs, &g);
                self.accumulate(grads, q, dq);
                self.accumulate(grads, k, dk);
                self.accumulate(grads, v, dv);
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[T],
        g: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let head_dim = layout.head_dim;
        let group = layout.n_heads / layout.n_kv_heads;
        let scale = T::lit(1.0 / (head_dim as f64).sqrt());
        let qs = self.value(q).data();
        let ks = self.value(k).data();
        let vs = self.value(v).data();
        let qd = layout.n_heads * head_dim;
        let kd = layout.n_kv_heads * head_dim;
        let mut dq = vec![T::zero(); qs.len()];
        let mut dk = vec![T::zero(); ks.len()];
        let mut dv = vec![T::zero(); vs.len()];
        let mut dp = Vec::new();
        let mut off = 0;
        for &(start, n) in &layout.segments {
            for h in 0..layout.n_heads {
                let gh = h / group;
                let p = &probs[off..off + n * n];
                off += n * n;
                for i in 0..n {
                    let gi = &g[(start + i) * qd + h * head_dim..][..head_dim];
                    let prow = &p[i * n..i * n + i + 1];
                    dp.clear();
                    for j in 0..=i {
                        let vj = &vs[(start + j) * kd + gh * head_dim..][..head_dim];
                        dp.push(dot(gi, vj));
                        axpy(prow[j], gi, &mut dv[(start + j) * kd + gh * head_dim..][..head_dim]);
                    }
                    let row_dot = dot(prow, &dp);
                    let qi = &qs[(start + i) * qd + h * head_dim..][..head_dim];
                    for j in 0..=i {
                        let ds = prow[j] * (dp[j] - row_dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kj = &ks[(start + j) * kd + gh * head_dim..][..head_dim];
                        axpy(ds, kj, &mut dq[(start + i) * qd + h * head_dim..][..head_dim]);
                        axpy(ds, qi, &mut dk[(start + j) * kd + gh * head_dim..][..head_dim]);
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff_check, sample_coords};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Reduces any output to a scalar through a fixed random projection.
    fn project(g: &mut Graph<f64>, out: Var) -> Result<Var> {
        let w = g.constant(random(g.shape(out), 99));
        let p = g.mul(out, w)?;
        g.sum(p)
    }

    /// Normwise relative error of analytic against finite-difference
    /// gradients over every coordinate. Coordinates with a zero gradient
    /// only carry rounding noise, so a per-coordinate ratio is not used.
    fn check<F>(params: Vec<Tensor<f64>>, f: F) -> f64
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let mut params = params;
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars).unwrap();
        let loss = project(&mut g, out).unwrap();
        g.backward(loss).unwrap();
        for (p, v) in params.iter_mut().zip(&vars) {
            let grad = g.grad(*v).map(|x| x.to_vec()).unwrap_or(vec![0.0; p.numel()]);
            p.set_grad(grad).unwrap();
        }
        let coords = sample_coords(&params, usize::MAX, 0);
        let report = finite_diff_check(&mut params, &coords, 1e-4, |ps| {
            let mut g = Graph::new();
            let vs: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
            let out = f(&mut g, &vs)?;
            let loss = project(&mut g, out)?;
            Ok(Some(g.value(loss).item()?))
        })
        .unwrap();
        assert_eq!(report.checked, coords.len());
        report.max_tensor_rel_error()
    }

    const TOL: f64 = 1e-6;

    #[test]
    fn matmul_family_gradients() {
        assert!(
            check(vec![random(&[3, 4], 1), random(&[4, 5], 2)], |g, v| g
                .matmul(v[0], v[1]))
                < TOL
        );
        assert!(
            check(vec![random(&[3, 4], 1), random(&[5, 4], 2)], |g, v| g
                .matmul_nt(v[0], v[1]))
                < TOL
        );
    }

    #[test]
    fn elementwise_gradients() {
        let ab = || vec![random(&[3, 4], 3), random(&[3, 4], 4)];
        assert!(check(ab(), |g, v| g.add(v[0], v[1])) < TOL);
        assert!(check(ab(), |g, v| g.mul(v[0], v[1])) < TOL);
        assert!(check(vec![random(&[3, 4], 5), random(&[4], 6)], |g, v| g.add_bias(v[0], v[1])) < TOL);
        assert!(check(vec![random(&[3, 4], 5)], |g, v| g.scale(v[0], -1.7)) < TOL);
        assert!(check(vec![random(&[3, 4], 7)], |g, v| g.silu(v[0])) < TOL);
        assert!(check(vec![random(&[3, 4], 8)], |g, v| g.softmax(v[0])) < TOL);
    }

    #[test]
    fn layer_norm_gradient() {
        let params = vec![random(&[4, 6], 9), random(&[6], 10), random(&[6], 11)];
        assert!(check(params, |g, v| g.layer_norm(v[0], v[1], v[2])) < TOL);
    }

    #[test]
    fn reductions_and_indexing_gradients() {
        assert!(check(vec![random(&[3, 4], 12)], |g, v| g.sum(v[0])) < TOL);
        assert!(check(vec![random(&[3, 4], 12)], |g, v| g.mean(v[0])) < TOL);
        assert!(check(vec![random(&[3, 4], 12)], |g, v| g.mean_rows(v[0])) < TOL);
        assert!(check(vec![random(&[5, 3], 13)], |g, v| g.embedding(v[0], &[4, 0, 4, 2])) < TOL);
        assert!(check(vec![random(&[5, 3], 14)], |g, v| g.gather_rows(v[0], &[1, 1, 3])) < TOL);
        let params = vec![random(&[4, 3], 15), random(&[3, 3], 16)];
        assert!(check(params, |g, v| g.scatter_add_rows(v[0], v[1], &[2, 0, 2])) < TOL);
        assert!(
            check(vec![random(&[3, 4], 17)], |g, v| g.select_cols(
                v[0],
                &[3, 1, 0, 2, 2, 1],
                2
            )) < TOL
        );
        assert!(check(vec![random(&[3, 4], 18)], |g, v| g.gather_elems(v[0], &[0, 11, 5, 5])) < TOL);
        let params = vec![random(&[3, 4], 19), random(&[3], 20)];
        assert!(check(params, |g, v| g.mul_rows(v[0], v[1])) < TOL);
    }

    #[test]
    fn cross_entropy_gradient() {
        let err = check(vec![random(&[4, 5], 21)], |g, v| {
            g.cross_entropy(v[0], &[1, 4, 0, 2], &[0.5, 0.0, 0.25, 1.0])
        });
        assert!(err < TOL);
    }

    fn layout(n_heads: usize, n_kv_heads: usize, head_dim: usize, segments: Vec<(usize, usize)>) -> AttentionLayout {
        AttentionLayout {
            n_heads,
            n_kv_heads,
            head_dim,
            segments,
        }
    }

    #[test]
    fn attention_gradient_grouped_and_packed() {
        let params = vec![random(&[5, 8], 22), random(&[5, 4], 23), random(&[5, 4], 24)];
        let err = check(params, |g, v| {
            g.causal_attention(v[0], v[1], v[2], layout(4, 2, 2, vec![(0, 3), (3, 2)]))
        });
        assert!(err < TOL);
    }

    #[test]
    fn single_token_attention_returns_value() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(random(&[1, 2], 25));
        let k = g.constant(random(&[1, 2], 26));
        let v = g.constant(random(&[1, 2], 27));
        let o = g.causal_attention(q, k, v, layout(1, 1, 2, vec![(0, 1)])).unwrap();
        assert_eq!(g.value(o).data(), g.value(v).data());
    }

    #[test]
    fn attention_is_causal_and_segments_are_isolated() {
        let run = |vs: Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let q = g.constant(random(&[6, 4], 28));
            let k = g.constant(random(&[6, 4], 29));
            let v = g.constant(vs);
            let o = g
                .causal_attention(q, k, v, layout(2, 2, 2, vec![(0, 4), (4, 2)]))
                .unwrap();
            g.value(o).clone()
        };
        let base = random(&[6, 4], 30);
        let mut changed = base.clone();
        // Alter row 2 (inside the first segment) and row 5 (second segment).
        changed.data_mut()[2 * 4] += 1.0;
        changed.data_mut()[5 * 4 + 1] -= 1.0;
        let (a, b) = (run(base), run(changed));
        for row in [0, 1, 4] {
            assert_eq!(a.row(row), b.row(row));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn backward_contract() {
        let mut g = Graph::<f64>::new();
        let x = g.param(random(&[2, 2], 31));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
        assert!(matches!(g.backward(s), Err(Error::GraphConsumed)));
    }

    #[test]
    fn non_finite_outputs_are_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(vec![1], &[f64::MAX]).unwrap());
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(random(&[2, 3], 32));
        let b = g.constant(random(&[2, 3], 33));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
        let c = g.constant(random(&[3, 2], 34));
        assert!(matches!(g.add(a, c), Err(Error::Shape { .. })));
    }
}
