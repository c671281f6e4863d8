//! Tape-based reverse-mode automatic differentiation over 2-D tensors.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward rule needs. Nodes are only ever appended, so inputs always precede
//! their consumers and the backward sweep is a single reverse pass.
//!
//! ```
//! use pmech_core::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How [`Tape::topk`] ranks entries within a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum TopkMode {
    /// Keep the `k` entries with the largest absolute value.
    #[default]
    Magnitude,
    /// Keep the `k` largest signed values.
    Signed,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f32>,
        sigmas: Vec<f32>,
        frozen: bool,
    },
    /// Elementwise product with a constant (TopK selection, dropout, ablation).
    Mask(Var, Tensor),
    Gather(Var, Vec<usize>),
    ScatterAddRow {
        base: Var,
        src: Var,
        row: usize,
    },
    MeanRows(Var),
    SumAll(Var),
    SumSq(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<f32>,
    },
    Unfold(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for a single forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node on a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the output or
    /// does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when absent.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf node; `trainable` leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Matrix product `a * b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), rg))
    }

    /// Matrix product with the second operand transposed, `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (n, k2) = dims(self.value(b));
        if k != k2 {
            return Err(Error::shape(
                "matmul_bt",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let out = kernels::matmul_bt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMulBt(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = dims(self.value(a));
        let rv = self.value(row);
        if rv.len() != c {
            return Err(Error::shape("add_row", self.value(a).shape(), rv.shape()));
        }
        let bias = rv.data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(bias) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::matrix(r, c, out), Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::gelu);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = dims(self.value(a));
        let out = kernels::softmax_rows(self.value(a).data(), r, c);
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(r, c, out), Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization with gain and bias.
    ///
    /// Returns the output and the per-row denominators `sqrt(var + eps)`.
    pub fn layernorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, Vec<f32>)> {
        let (r, c) = dims(self.value(x));
        let (_, sigmas) = kernels::row_stats(self.value(x).data(), r, c, eps);
        let out = self.layernorm_with(x, gamma, beta, sigmas.clone(), false)?;
        Ok((out, sigmas))
    }

    /// Layer normalization with the denominators fixed to `sigmas`; only the
    /// mean subtraction depends on `x`.
    pub fn layernorm_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        sigmas: &[f32],
    ) -> Result<Var> {
        if sigmas.len() != self.value(x).rows() {
            return Err(Error::shape(
                "layernorm_frozen",
                self.value(x).shape(),
                &[sigmas.len()],
            ));
        }
        self.layernorm_with(x, gamma, beta, sigmas.to_vec(), true)
    }

    fn layernorm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        sigmas: Vec<f32>,
        frozen: bool,
    ) -> Result<Var> {
        let (r, c) = dims(self.value(x));
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                "layernorm",
                self.value(x).shape(),
                self.value(gamma).shape(),
            ));
        }
        let means = kernels::row_means(self.value(x).data(), r, c);
        let normalized = kernels::normalize_rows(self.value(x).data(), &means, &sigmas, c);
        let out = kernels::affine_rows(
            &normalized,
            self.value(gamma).data(),
            self.value(beta).data(),
            c,
        );
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::matrix(r, c, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                sigmas,
                frozen,
            },
            rg,
        ))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mask(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        if mask.shape() != self.value(a).shape() {
            return Err(Error::shape("mask", self.value(a).shape(), mask.shape()));
        }
        let out = self.value(a).zip_map(&mask, |x, m| x * m)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Mask(a, mask), rg))
    }

    /// Keeps the `k` top-ranked entries of every row and zeroes the rest.
    ///
    /// Ties are broken towards the lower index. The backward pass routes
    /// gradient through the retained entries only.
    pub fn topk(&mut self, a: Var, k: usize, mode: TopkMode) -> Result<Var> {
        let mask = topk_mask_matrix(self.value(a), k, mode);
        self.mask(a, mask)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = dims(self.value(table));
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::InvalidInput(format!(
                    "gather index {id} out of range for {r} rows"
                )));
            }
            out.extend_from_slice(self.value(table).row_slice(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::matrix(ids.len(), c, out),
            Op::Gather(table, ids.to_vec()),
            rg,
        ))
    }

    /// Adds the `1 x cols` tensor `src` to row `row` of `base`.
    pub fn scatter_add_row(&mut self, base: Var, src: Var, row: usize) -> Result<Var> {
        let (r, c) = dims(self.value(base));
        if self.value(src).len() != c || row >= r {
            return Err(Error::shape(
                "scatter_add_row",
                self.value(base).shape(),
                self.value(src).shape(),
            ));
        }
        let mut out = self.value(base).data().to_vec();
        for (o, &s) in out[row * c..(row + 1) * c]
            .iter_mut()
            .zip(self.value(src).data())
        {
            *o += s;
        }
        let rg = self.rg(&[base, src]);
        Ok(self.push(
            Tensor::matrix(r, c, out),
            Op::ScatterAddRow { base, src, row },
            rg,
        ))
    }

    /// Mean over rows, giving a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).mean_rows();
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanRows(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum() as f32);
        let rg = self.rg(&[a]);
        self.push(out, Op::SumAll(a), rg)
    }

    /// Sum of squares of all entries.
    pub fn sum_sq(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum_sq() as f32);
        let rg = self.rg(&[a]);
        self.push(out, Op::SumSq(a), rg)
    }

    /// Mean squared error between `a` and `b` over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f32;
        let d = self.sub(a, b)?;
        let s = self.sum_sq(d);
        Ok(self.scale(s, 1.0 / n))
    }

    /// Mean cross-entropy of `logits` rows against `(row, class)` targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = dims(self.value(logits));
        if targets.is_empty() {
            return Err(Error::InvalidInput("cross_entropy with no targets".into()));
        }
        let probs = kernels::softmax_rows(self.value(logits).data(), r, c);
        let mut loss = 0.0f64;
        for &(row, class) in targets {
            if row >= r || class >= c {
                return Err(Error::InvalidInput(format!(
                    "cross_entropy target ({row}, {class}) outside {r}x{c}"
                )));
            }
            let p = probs[row * c + class].max(f32::MIN_POSITIVE);
            loss -= (p as f64).ln();
        }
        let value = Tensor::scalar((loss / targets.len() as f64) as f32);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Zero-padded sliding windows of `kernel` rows, for 1-D convolution.
    pub fn unfold(&mut self, a: Var, kernel: usize) -> Var {
        let (r, c) = dims(self.value(a));
        let out = kernels::unfold_rows(self.value(a).data(), r, c, kernel);
        let rg = self.rg(&[a]);
        self.push(
            Tensor::matrix(r, kernel * c, out),
            Op::Unfold(a, kernel),
            rg,
        )
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_value = self.value(output);
        if out_value.len() != 1 {
            return Err(Error::NonScalarOutput(out_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out_value.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].clone() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot => *slot = Some(g),
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = dims(av);
                let n = bv.cols();
                if self.requires_grad(*a) {
                    let da = kernels::matmul_bt(g.data(), bv.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da))?;
                }
                if self.requires_grad(*b) {
                    let db = kernels::matmul_at(av.data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, db))?;
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = dims(av);
                let n = bv.rows();
                if self.requires_grad(*a) {
                    let da = kernels::matmul(g.data(), bv.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da))?;
                }
                if self.requires_grad(*b) {
                    let db = kernels::matmul_at(g.data(), av.data(), m, n, k);
                    self.accumulate(grads, *b, Tensor::matrix(n, k, db))?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.reshape(self.value(*a).shape().to_vec())?)?;
                self.accumulate(grads, *b, g.reshape(self.value(*b).shape().to_vec())?)?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.requires_grad(*row) {
                    let summed = column_sums(g);
                    let shape = self.value(*row).shape().to_vec();
                    self.accumulate(grads, *row, Tensor::new(shape, summed)?)?;
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c))?,
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Gelu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| gv * kernels::gelu_grad(x))?;
                self.accumulate(grads, *a, d)?;
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = dims(&node.value);
                let d = kernels::softmax_rows_backward(node.value.data(), g.data(), r, c);
                self.accumulate(grads, *a, Tensor::matrix(r, c, d))?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                sigmas,
                frozen,
            } => {
                let (r, c) = dims(&node.value);
                let gam = self.value(*gamma).data();
                if self.requires_grad(*x) {
                    let dn: Vec<f32> = g
                        .data()
                        .chunks(c)
                        .flat_map(|row| row.iter().zip(gam).map(|(&a, &b)| a * b))
                        .collect();
                    let dx = kernels::layernorm_backward_input(&dn, normalized, sigmas, c, *frozen);
                    self.accumulate(grads, *x, Tensor::matrix(r, c, dx))?;
                }
                if self.requires_grad(*gamma) {
                    let mut dg = vec![0.0f32; c];
                    for (row_g, row_n) in g.data().chunks(c).zip(normalized.chunks(c)) {
                        for ((d, &a), &b) in dg.iter_mut().zip(row_g).zip(row_n) {
                            *d += a * b;
                        }
                    }
                    let shape = self.value(*gamma).shape().to_vec();
                    self.accumulate(grads, *gamma, Tensor::new(shape, dg)?)?;
                }
                if self.requires_grad(*beta) {
                    let shape = self.value(*beta).shape().to_vec();
                    self.accumulate(grads, *beta, Tensor::new(shape, column_sums(g))?)?;
                }
            }
            Op::Mask(a, mask) => {
                self.accumulate(grads, *a, g.zip_map(mask, |x, m| x * m)?)?;
            }
            Op::Gather(table, ids) => {
                if self.requires_grad(*table) {
                    let tv = self.value(*table);
                    let c = tv.cols();
                    let mut d = vec![0.0f32; tv.len()];
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, &gv) in d[id * c..(id + 1) * c].iter_mut().zip(g.row_slice(i)) {
                            *o += gv;
                        }
                    }
                    self.accumulate(grads, *table, Tensor::new(tv.shape().to_vec(), d)?)?;
                }
            }
            Op::ScatterAddRow { base, src, row } => {
                self.accumulate(grads, *base, g.clone())?;
                if self.requires_grad(*src) {
                    let shape = self.value(*src).shape().to_vec();
                    self.accumulate(grads, *src, Tensor::new(shape, g.row_slice(*row).to_vec())?)?;
                }
            }
            Op::MeanRows(a) => {
                let (r, c) = dims(self.value(*a));
                let inv = 1.0 / r.max(1) as f32;
                let row: Vec<f32> = g.data().iter().map(|&v| v * inv).collect();
                let d: Vec<f32> = (0..r).flat_map(|_| row.iter().copied()).collect();
                self.accumulate(grads, *a, Tensor::matrix(r, c, d))?;
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gv))?;
            }
            Op::SumSq(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, self.value(*a).scale(2.0 * gv))?;
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (r, c) = dims(self.value(*logits));
                let scale = g.data()[0] / targets.len() as f32;
                let mut d = vec![0.0f32; r * c];
                for &(row, class) in targets {
                    for j in 0..c {
                        d[row * c + j] += scale * probs[row * c + j];
                    }
                    d[row * c + class] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::matrix(r, c, d))?;
            }
            Op::Unfold(a, kernel) => {
                let (r, c) = dims(self.value(*a));
                let d = kernels::unfold_rows_backward(g.data(), r, c, *kernel);
                self.accumulate(grads, *a, Tensor::matrix(r, c, d))?;
            }
        }
        Ok(())
    }
}

fn column_sums(g: &Tensor) -> Vec<f32> {
    let c = g.cols();
    let mut acc = vec![0.0f64; c];
    for row in g.data().chunks(c) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Indices of the `k` top-ranked entries of `v`, ties towards lower index.
pub fn topk_indices(v: &[f32], k: usize, mode: TopkMode) -> Vec<usize> {
    let key = |x: f32| match mode {
        TopkMode::Magnitude => x.abs(),
        TopkMode::Signed => x,
    };
    let mut idx: Vec<usize> = (0..v.len()).collect();
    if k >= v.len() {
        return idx;
    }
    let cmp = |&a: &usize, &b: &usize| key(v[b]).total_cmp(&key(v[a])).then_with(|| a.cmp(&b));
    if k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
    }
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// The 0/1 selection mask of [`topk_indices`] applied to every row.
pub fn topk_mask_matrix(t: &Tensor, k: usize, mode: TopkMode) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut mask = vec![0.0f32; r * c];
    for row in 0..r {
        for j in topk_indices(t.row_slice(row), k, mode) {
            mask[row * c + j] = 1.0;
        }
    }
    Tensor::new(t.shape().to_vec(), mask).expect("mask shape matches input")
}

/// `v` with everything outside the top `k` zeroed.
pub fn topk_mask(v: &[f32], k: usize, mode: TopkMode) -> Vec<f32> {
    let mut out = vec![0.0f32; v.len()];
    for i in topk_indices(v, k, mode) {
        out[i] = v[i];
    }
    out
}
