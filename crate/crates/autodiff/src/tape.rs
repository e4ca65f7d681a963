//! Define-by-run reverse-mode tape.
//!
//! Every operation appends one node holding its forward value and enough
//! context to run its backward rule. Nodes are only ever appended, so an
//! operation's inputs always precede it and a single reverse sweep visits
//! each node once.

use crate::error::{Result, TensorError};
use crate::kernels::{self, gemm};
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Binary elementwise operations accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale,
    Gelu,
}

/// Right-hand operand of [`Tape::elementwise`].
#[derive(Debug, Clone, Copy)]
pub enum Operand {
    Tensor(Var),
    Scalar(f64),
    None,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    AddRow(Var, Var),
    Softmax(Var),
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        rows: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when no path reaches it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, materialising zeros when it is unreachable.
    pub fn get_or_zeros(&self, var: Var, shape: &Shape) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::from_parts(shape.clone(), vec![0.0; shape.numel()]))
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Dimension {
        op,
        left: a.shape().clone(),
        right: b.shape().clone(),
    }
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().map_err(|_| TensorError::Rank {
        op,
        expected: "rank 2",
        shape: t.shape().clone(),
    })
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records an input tensor. Only leaves with `requires_grad` receive
    /// gradients; constants cut the backward sweep short.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = rank2("matmul", ta)?;
        let (k2, n) = rank2("matmul", tb)?;
        if k != k2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let value = Tensor::from_parts(Shape::new(&[m, n])?, out);
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = rank2("transpose", ta)?;
        let src = ta.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::from_parts(Shape::new(&[c, r])?, out);
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(op, ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().clone(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let value = self.value(a).map(|x| x + offset);
        self.push(value, Op::AddScalar(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Dispatches one of the elementwise operations. Tensor-scalar is the
    /// only broadcasting form: `Add`/`Sub`/`Scale` accept a scalar operand,
    /// `Gelu` takes none.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, rhs: Operand) -> Result<Var> {
        let bad = |reason: &str| TensorError::Argument {
            op: "elementwise",
            reason: reason.to_string(),
        };
        match (op, rhs) {
            (ElementwiseOp::Add, Operand::Tensor(b)) => self.add(a, b),
            (ElementwiseOp::Sub, Operand::Tensor(b)) => self.sub(a, b),
            (ElementwiseOp::Mul, Operand::Tensor(b)) => self.mul(a, b),
            (ElementwiseOp::Add, Operand::Scalar(s)) => Ok(self.add_scalar(a, s)),
            (ElementwiseOp::Sub, Operand::Scalar(s)) => Ok(self.add_scalar(a, -s)),
            (ElementwiseOp::Mul | ElementwiseOp::Scale, Operand::Scalar(s)) => Ok(self.scale(a, s)),
            (ElementwiseOp::Gelu, Operand::None) => Ok(self.gelu(a)),
            (ElementwiseOp::Gelu, _) => Err(bad("gelu is unary")),
            (ElementwiseOp::Scale, _) => Err(bad("scale needs a scalar operand")),
            (_, Operand::None) => Err(bad("binary op needs an operand")),
        }
    }

    /// Adds the vector `row` (shape `[n]`) to every row of `x` (shape `[.., n]`).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let n = tx.shape().last();
        if tr.dims() != [n] {
            return Err(dim_err("add_row", tx, tr));
        }
        let bias = tr.data();
        let mut out = tx.to_vec();
        for chunk in out.chunks_mut(n.max(1)) {
            kernels::add_into(chunk, bias);
        }
        let value = Tensor::from_parts(tx.shape().clone(), out);
        Ok(self.push(value, Op::AddRow(x, row), &[x, row]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = tx.shape().last();
        let mut out = vec![0.0; tx.numel()];
        if n > 0 {
            for (src, dst) in tx.data().chunks(n).zip(out.chunks_mut(n)) {
                kernels::softmax_row(src, dst);
            }
        }
        let value = Tensor::from_parts(tx.shape().clone(), out);
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = rank2("causal_softmax", tx)?;
        if r != c {
            return Err(TensorError::Rank {
                op: "causal_softmax",
                expected: "a square matrix",
                shape: tx.shape().clone(),
            });
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let src = &tx.data()[i * c..i * c + i + 1];
            kernels::softmax_row(src, &mut out[i * c..i * c + i + 1]);
        }
        let value = Tensor::from_parts(tx.shape().clone(), out);
        Ok(self.push(value, Op::CausalSoftmax(x), &[x]))
    }

    /// Normalises each row over the last axis (biased variance) then applies
    /// `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(TensorError::Argument {
                op: "layer_norm",
                reason: format!("eps must be positive, got {eps}"),
            });
        }
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.shape().last();
        if tg.dims() != [d] {
            return Err(dim_err("layer_norm", tx, tg));
        }
        if tb.dims() != [d] {
            return Err(dim_err("layer_norm", tx, tb));
        }
        let rows = tx.numel().checked_div(d).unwrap_or(0);
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let src = &tx.data()[r * d..(r + 1) * d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for j in 0..d {
                let h = (src[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let value = Tensor::from_parts(tx.shape().clone(), out);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Gathers rows of `table` (shape `[V, d]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, d) = rank2("embedding", tt)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Vocabulary {
                    op: "embedding",
                    id,
                    vocab,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let value = Tensor::from_parts(Shape::new(&[ids.len(), d])?, out);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`,
    /// taken over the positions where `mask` is set. Masked-out positions
    /// are never read, so their targets cannot influence the result.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        let (len, vocab) = rank2("masked_cross_entropy", tl)?;
        if targets.len() != len || mask.len() != len {
            return Err(TensorError::Argument {
                op: "masked_cross_entropy",
                reason: format!(
                    "{len} logit rows but {} targets and {} mask bits",
                    targets.len(),
                    mask.len()
                ),
            });
        }
        if let Some(&id) = targets.iter().find(|&&t| t >= vocab) {
            return Err(TensorError::Vocabulary {
                op: "masked_cross_entropy",
                id,
                vocab,
            });
        }
        let rows: Vec<usize> = (0..len).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(TensorError::DegenerateBatch);
        }
        let mut probs = vec![0.0; rows.len() * vocab];
        let mut total = 0.0;
        for (k, &i) in rows.iter().enumerate() {
            let row = tl.row(i);
            total += kernels::log_sum_exp(row) - row[targets[i]];
            kernels::softmax_row(row, &mut probs[k * vocab..(k + 1) * vocab]);
        }
        let value = Tensor::scalar(total / rows.len() as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                rows,
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Columns `start..start + width` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = rank2("slice_cols", tx)?;
        if start + width > c {
            return Err(TensorError::Argument {
                op: "slice_cols",
                reason: format!("columns {start}..{} out of {c}", start + width),
            });
        }
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&tx.data()[i * c + start..i * c + start + width]);
        }
        let value = Tensor::from_parts(Shape::new(&[r, width])?, out);
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Argument {
            op: "concat_cols",
            reason: "no inputs".into(),
        })?;
        let (r, _) = rank2("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = rank2("concat_cols", self.value(p))?;
            if pr != r {
                return Err(dim_err("concat_cols", self.value(*first), self.value(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::from_parts(Shape::new(&[r, total])?, out);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Argument {
            op: "concat_rows",
            reason: "no inputs".into(),
        })?;
        let (_, c) = rank2("concat_rows", self.value(*first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            let (pr, pc) = rank2("concat_rows", tp)?;
            if pc != c {
                return Err(dim_err("concat_rows", self.value(*first), tp));
            }
            rows += pr;
            out.extend_from_slice(tp.data());
        }
        let value = Tensor::from_parts(Shape::new(&[rows, c])?, out);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Reverse sweep from a scalar `loss`, seeded with d(loss)/d(loss) = 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let seed = self.value(loss);
        if seed.numel() != 1 {
            return Err(TensorError::Rank {
                op: "backward",
                expected: "a scalar loss",
                shape: seed.shape().clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                leaf_grads[idx] = Some(Tensor::from_parts(node.value.shape().clone(), g));
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().expect("rank 2");
                let n = tb.dims()[1];
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    gemm(m, n, k, g, false, tb.data(), true, slot(&self.nodes, grads, *a), true);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    gemm(k, m, n, ta.data(), true, g, false, slot(&self.nodes, grads, *b), true);
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let (r, c) = self.value(*a).dims2().expect("rank 2");
                    let dst = slot(&self.nodes, grads, *a);
                    for i in 0..r {
                        for j in 0..c {
                            dst[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    kernels::add_into(slot(&self.nodes, grads, *a), g);
                }
                if self.wants(*b) {
                    kernels::add_into(slot(&self.nodes, grads, *b), g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    kernels::add_into(slot(&self.nodes, grads, *a), g);
                }
                if self.wants(*b) {
                    for (d, s) in slot(&self.nodes, grads, *b).iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let other = self.value(*b).data();
                    for ((d, s), o) in slot(&self.nodes, grads, *a).iter_mut().zip(g).zip(other) {
                        *d += s * o;
                    }
                }
                if self.wants(*b) {
                    let other = self.value(*a).data();
                    for ((d, s), o) in slot(&self.nodes, grads, *b).iter_mut().zip(g).zip(other) {
                        *d += s * o;
                    }
                }
            }
            Op::Scale(a, factor) => {
                for (d, s) in slot(&self.nodes, grads, *a).iter_mut().zip(g) {
                    *d += s * factor;
                }
            }
            Op::AddScalar(a) => kernels::add_into(slot(&self.nodes, grads, *a), g),
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                for ((d, s), &xv) in slot(&self.nodes, grads, *a).iter_mut().zip(g).zip(x) {
                    *d += s * kernels::gelu_grad(xv);
                }
            }
            Op::AddRow(x, row) => {
                if self.wants(*x) {
                    kernels::add_into(slot(&self.nodes, grads, *x), g);
                }
                if self.wants(*row) {
                    let n = self.value(*row).numel();
                    let dst = slot(&self.nodes, grads, *row);
                    for chunk in g.chunks(n.max(1)) {
                        kernels::add_into(dst, chunk);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.shape().last();
                if n > 0 {
                    softmax_backward(y, g, n, n, slot(&self.nodes, grads, *x));
                }
            }
            Op::CausalSoftmax(x) => {
                let y = node.value.data();
                let n = node.value.shape().last();
                let dst = slot(&self.nodes, grads, *x);
                for i in 0..n {
                    let row = i * n..i * n + i + 1;
                    let (yr, gr) = (&y[row.clone()], &g[row.clone()]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dst[row].iter_mut().zip(yr).zip(gr) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.shape().last();
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let dst = slot(&self.nodes, grads, *gamma);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dst[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.wants(*beta) {
                    let dst = slot(&self.nodes, grads, *beta);
                    for gr in g.chunks(d) {
                        kernels::add_into(dst, gr);
                    }
                }
                if self.wants(*x) {
                    let dst = slot(&self.nodes, grads, *x);
                    let mut dxhat = vec![0.0; d];
                    for (r, &inv) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dst[r * d + j] += inv * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape().last();
                let dst = slot(&self.nodes, grads, *table);
                for (k, &id) in ids.iter().enumerate() {
                    kernels::add_into(&mut dst[id * d..(id + 1) * d], &g[k * d..(k + 1) * d]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                rows,
                probs,
            } => {
                let vocab = self.value(*logits).shape().last();
                let scale = g[0] / rows.len() as f64;
                let dst = slot(&self.nodes, grads, *logits);
                for (k, &i) in rows.iter().enumerate() {
                    let p = &probs[k * vocab..(k + 1) * vocab];
                    let out = &mut dst[i * vocab..(i + 1) * vocab];
                    for (o, &pv) in out.iter_mut().zip(p) {
                        *o += scale * pv;
                    }
                    out[targets[i]] -= scale;
                }
            }
            Op::Sum(x) => {
                for d in slot(&self.nodes, grads, *x).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(x) => {
                let dst = slot(&self.nodes, grads, *x);
                let share = g[0] / dst.len() as f64;
                for d in dst.iter_mut() {
                    *d += share;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).shape().last();
                let w = node.value.shape().last();
                let dst = slot(&self.nodes, grads, *x);
                for (i, gr) in g.chunks(w.max(1)).enumerate() {
                    kernels::add_into(&mut dst[i * c + start..i * c + start + w], gr);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape().last();
                let rows = node.value.dims()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape().last();
                    if self.wants(p) {
                        let dst = slot(&self.nodes, grads, p);
                        for i in 0..rows {
                            kernels::add_into(
                                &mut dst[i * w..(i + 1) * w],
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.wants(p) {
                        kernels::add_into(slot(&self.nodes, grads, p), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
        }
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
    let n = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn softmax_backward(y: &[f64], g: &[f64], width: usize, stride: usize, dst: &mut [f64]) {
    for ((yr, gr), dr) in y.chunks(stride).zip(g.chunks(stride)).zip(dst.chunks_mut(stride)) {
        let (yr, gr) = (&yr[..width], &gr[..width]);
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d += yv * (gv - dot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let a = tape.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let b = tape.constant(Tensor::matrix(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap());
        let ia = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(ia).data(), &[1.0, 2.0, 3.0, 4.0]);
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let m = tape.constant(Tensor::new(&[3, 4], (0..12).map(f64::from).collect()).unwrap());
        let out = tape.matmul(z, m).unwrap();
        assert_eq!(tape.value(out).dims(), &[2, 4]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(&[1.0, 2.0]));
        let b = tape.constant(Tensor::vector(&[3.0, 4.0]));
        let s = tape.elementwise(ElementwiseOp::Add, a, Operand::Tensor(b)).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
        let z = tape.constant(Tensor::vector(&[0.0, 3.0]));
        let g = tape.elementwise(ElementwiseOp::Gelu, z, Operand::None).unwrap();
        assert_eq!(tape.value(g).data()[0], 0.0);
        assert!(close(tape.value(g).data()[1], 2.9964, 1e-3));
        let c = tape.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
        assert!(tape.add(a, c).is_err());
        assert!(tape.elementwise(ElementwiseOp::Gelu, a, Operand::Scalar(1.0)).is_err());
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::vector(&[0.0, 0.0, 0.0]));
        let su = tape.softmax(u);
        for &v in tape.value(su).data() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
        let big = tape.constant(Tensor::vector(&[1000.0, 0.0]));
        let sb = tape.softmax(big);
        let d = tape.value(sb).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!(close(d[0], 1.0, 1e-12) && d[1] >= 0.0 && d[1] < 1e-300);
        let logs = tape.constant(Tensor::vector(&[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let sl = tape.softmax(logs);
        let d = tape.value(sl).data();
        for (k, &v) in d.iter().enumerate() {
            assert!(close(v, (k + 1) as f64 / 6.0, 1e-12));
        }
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 3], vec![0.1, 5.0, 9.0, 0.2, 0.3, 7.0, 1.0, 1.0, 1.0]).unwrap());
        let y = tape.causal_softmax(x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[0], 1.0);
        assert_eq!(&d[1..3], &[0.0, 0.0]);
        assert_eq!(d[5], 0.0);
        assert!(close(d[6], 1.0 / 3.0, 1e-15));
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let one = tape.constant(Tensor::ones(&[2]).unwrap());
        let zero = tape.constant(Tensor::zeros(&[2]).unwrap());
        let c = tape.constant(Tensor::vector(&[5.0, 5.0]));
        let y = tape.layer_norm(c, one, zero, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
        let x = tape.constant(Tensor::vector(&[1.0, 3.0]));
        let y = tape.layer_norm(x, one, zero, 1e-14).unwrap();
        let d = tape.value(y).data();
        assert!(close(d[0], -1.0, 1e-12) && close(d[1], 1.0, 1e-12));
        let beta = tape.constant(Tensor::vector(&[0.5, -2.0]));
        let y = tape.layer_norm(x, zero, beta, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -2.0]);
        assert!(tape.layer_norm(x, one, zero, 0.0).is_err());
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let mut tape = Tape::new();
        let table = tape.param(Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let first = tape.embedding(table, &[0]).unwrap();
        assert_eq!(tape.value(first).data(), &[1.0, 2.0]);
        let empty = tape.embedding(table, &[]).unwrap();
        assert_eq!(tape.value(empty).dims(), &[0, 2]);
        let twice = tape.embedding(table, &[2, 2]).unwrap();
        let loss = tape.sum(twice);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(table).unwrap().data(), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
        let err = tape.embedding(table, &[3]).unwrap_err();
        assert_eq!(
            err,
            TensorError::Vocabulary {
                op: "embedding",
                id: 3,
                vocab: 3
            }
        );
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let mut row = vec![0.0; 4];
        row[2] = 1e6;
        let confident = tape.constant(Tensor::new(&[1, 4], row).unwrap());
        let l = tape.masked_cross_entropy(confident, &[2], &[true]).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-12);

        let uniform = tape.constant(Tensor::zeros(&[3, 4]).unwrap());
        let l = tape.masked_cross_entropy(uniform, &[0, 1, 3], &[true; 3]).unwrap();
        assert!(close(tape.value(l).item().unwrap(), 4f64.ln(), 1e-15));

        let err = tape.masked_cross_entropy(uniform, &[0, 1, 3], &[false; 3]).unwrap_err();
        assert_eq!(err, TensorError::DegenerateBatch);
    }

    #[test]
    fn cross_entropy_ignores_masked_targets_bitwise() {
        let logits = Tensor::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(logits);
        let a = tape.masked_cross_entropy(x, &[1, 2, 3], &[true, false, true]).unwrap();
        let b = tape.masked_cross_entropy(x, &[1, 0, 3], &[true, false, true]).unwrap();
        assert_eq!(
            tape.value(a).item().unwrap().to_bits(),
            tape.value(b).item().unwrap().to_bits()
        );
    }

    #[test]
    fn backward_sum_and_product() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0, -2.0, 3.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.param(Tensor::scalar(-4.0));
        let p = tape.mul(x, y).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), -4.0);
        assert_eq!(g.get(y).unwrap().item().unwrap(), 3.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::Rank { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(&[1.0, 2.0]));
        let c = tape.constant(Tensor::vector(&[3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn slicing_and_concatenation_round_trip() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[2, 4], (0..8).map(f64::from).collect()).unwrap());
        let left = tape.slice_cols(x, 0, 1).unwrap();
        let right = tape.slice_cols(x, 1, 3).unwrap();
        let joined = tape.concat_cols(&[left, right]).unwrap();
        assert_eq!(tape.value(joined).data(), tape.value(x).data());
        let stacked = tape.concat_rows(&[left, left]).unwrap();
        assert_eq!(tape.value(stacked).data(), &[0.0, 4.0, 0.0, 4.0]);
        assert!(tape.slice_cols(x, 3, 2).is_err());
    }
}
