//! Reverse-mode differentiation over a flat tape.
//!
//! Ops append nodes to the tape in execution order, so node indices are a
//! topological order and the backward pass is a single reverse sweep.
//! Each node stores its forward value plus whatever the backward rule needs
//! (softmax keeps its output, layer norm its row statistics, cross entropy
//! its probabilities). The triangular solve uses an analytic rule rather
//! than taping substitution steps: with upstream gradient G on Y,
//! dC = solve(Bᵀ, G) and dB = -dC·Yᵀ restricted to the lower triangle.

use super::tensor::{self, NumError, Real, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<R: Real> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBroadcast(Var, Var),
    Scale(Var, R),
    AddScaledIdentity { x: Var, scale: R },
    ZeroDiagonal(Var),
    Transpose(Var),
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<R>, inv_std: Vec<R> },
    Gelu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Tensor<R> },
    SolveLowerTriangular { b: Var, c: Var },
    SumAll(Var),
}

struct Node<R: Real> {
    value: Tensor<R>,
    grad: Option<Tensor<R>>,
    requires_grad: bool,
    op: Op<R>,
}

/// Single-use computation tape. Build the forward graph, call
/// [`Tape::backward`] once, read gradients off the leaves.
pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, requires_grad: bool, op: Op<R>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input (parameter or data requiring gradients).
    pub fn leaf(&mut self, value: Tensor<R>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, false, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a node (populated after `backward`).
    pub fn grad(&self, v: Var) -> Option<&Tensor<R>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Move the gradient out of the tape (avoids a clone when harvesting).
    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<R>> {
        self.nodes[v.0].grad.take()
    }

    // ── forward ops ───────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = tensor::add(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = tensor::sub(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = tensor::mul(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    /// x[n×d] + bias[d].
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var, NumError> {
        let value = tensor::add_row_broadcast(self.value(x), self.value(bias))?;
        let rg = self.needs(x) || self.needs(bias);
        Ok(self.push(value, rg, Op::AddRowBroadcast(x, bias)))
    }

    pub fn scale(&mut self, x: Var, alpha: R) -> Var {
        let value = tensor::scale(self.value(x), alpha);
        let rg = self.needs(x);
        self.push(value, rg, Op::Scale(x, alpha))
    }

    /// diag·I + scale·x (square x).
    pub fn add_scaled_identity(&mut self, x: Var, diag: R, scale: R) -> Result<Var, NumError> {
        let value = tensor::add_scaled_identity(self.value(x), diag, scale)?;
        let rg = self.needs(x);
        Ok(self.push(value, rg, Op::AddScaledIdentity { x, scale }))
    }

    pub fn zero_diagonal(&mut self, x: Var) -> Result<Var, NumError> {
        let value = tensor::zero_diagonal(self.value(x))?;
        let rg = self.needs(x);
        Ok(self.push(value, rg, Op::ZeroDiagonal(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumError> {
        let value = tensor::transpose(self.value(x))?;
        let rg = self.needs(x);
        Ok(self.push(value, rg, Op::Transpose(x)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Matmul(a, b)))
    }

    /// a · bᵀ without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = tensor::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::MatmulNT(a, b)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let tensors: Vec<&Tensor<R>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = tensor::concat_cols(&tensors)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let value = tensor::slice_cols(self.value(x), start, len)?;
        let rg = self.needs(x);
        Ok(self.push(value, rg, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let value = tensor::slice_rows(self.value(x), start, len)?;
        let rg = self.needs(x);
        Ok(self.push(value, rg, Op::SliceRows { x, start }))
    }

    /// Row softmax of x + mask; the mask is a plain constant.
    pub fn softmax_rows(&mut self, x: Var, mask: &Tensor<R>) -> Result<Var, NumError> {
        let value = tensor::softmax_rows(self.value(x), mask)?;
        let rg = self.needs(x);
        Ok(self.push(value, rg, Op::SoftmaxRows(x)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumError> {
        let (value, mean, inv_std) =
            tensor::layer_norm_full(self.value(x), self.value(gain), self.value(bias))?;
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(value, rg, Op::LayerNorm { x, gain, bias, mean, inv_std }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = tensor::gelu(self.value(x));
        let rg = self.needs(x);
        self.push(value, rg, Op::Gelu(x))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        let value = tensor::embedding(self.value(table), ids)?;
        let rg = self.needs(table);
        Ok(self.push(value, rg, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Masked mean NLL; returns a scalar node.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var, NumError> {
        let (loss, probs, _) =
            tensor::cross_entropy_full(self.value(logits), targets, mask)?;
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
        ))
    }

    pub fn solve_lower_triangular(&mut self, b: Var, c: Var) -> Result<Var, NumError> {
        let value = tensor::solve_lower_triangular(self.value(b), self.value(c))?;
        let rg = self.needs(b) || self.needs(c);
        Ok(self.push(value, rg, Op::SolveLowerTriangular { b, c }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = tensor::sum_all(self.value(x));
        let rg = self.needs(x);
        self.push(value, rg, Op::SumAll(x))
    }

    /// matmul + bias row.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var, NumError> {
        let h = self.matmul(x, w)?;
        self.add_row_broadcast(h, bias)
    }

    // ── backward ──────────────────────────────────────────────────────

    /// Reverse sweep from a scalar node. Every node is visited exactly once
    /// in reverse execution order; leaf gradients accumulate across all
    /// paths before being read.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumError> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(NumError::InvalidShape {
                op: "backward",
                detail: format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            });
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(R::ONE));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[id].grad.take() else {
                continue;
            };
            // split so the current node is readable while earlier nodes
            // (all inputs have smaller ids) take gradient contributions
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &mut rest[0];
            if matches!(node.op, Op::Leaf | Op::Constant) {
                node.grad = Some(grad);
                continue;
            }
            // phase 1: compute every input contribution (reads only)
            let mut contribs: Vec<(Var, Tensor<R>)> = Vec::with_capacity(2);
            {
                let needs = |v: Var| before[v.0].requires_grad;
                match &node.op {
                    Op::Leaf | Op::Constant => unreachable!(),
                    Op::Add(a, b) => {
                        if needs(*a) {
                            contribs.push((*a, grad.clone()));
                        }
                        if needs(*b) {
                            contribs.push((*b, grad.clone()));
                        }
                    }
                    Op::Sub(a, b) => {
                        if needs(*a) {
                            contribs.push((*a, grad.clone()));
                        }
                        if needs(*b) {
                            contribs.push((*b, tensor::scale(&grad, -R::ONE)));
                        }
                    }
                    Op::Mul(a, b) => {
                        let (av, bv) = (&before[a.0].value, &before[b.0].value);
                        if needs(*a) {
                            contribs.push((*a, tensor::mul(&grad, bv)?));
                        }
                        if needs(*b) {
                            contribs.push((*b, tensor::mul(&grad, av)?));
                        }
                    }
                    Op::AddRowBroadcast(x, bias) => {
                        if needs(*x) {
                            contribs.push((*x, grad.clone()));
                        }
                        if needs(*bias) {
                            let d = grad.cols();
                            let mut g = Tensor::zeros(vec![d]);
                            for row in grad.data().chunks(d) {
                                for (o, &v) in g.data_mut().iter_mut().zip(row) {
                                    *o += v;
                                }
                            }
                            contribs.push((*bias, g));
                        }
                    }
                    Op::Scale(x, alpha) => {
                        if needs(*x) {
                            contribs.push((*x, tensor::scale(&grad, *alpha)));
                        }
                    }
                    Op::AddScaledIdentity { x, scale } => {
                        if needs(*x) {
                            contribs.push((*x, tensor::scale(&grad, *scale)));
                        }
                    }
                    Op::ZeroDiagonal(x) => {
                        if needs(*x) {
                            contribs.push((*x, tensor::zero_diagonal(&grad)?));
                        }
                    }
                    Op::Transpose(x) => {
                        if needs(*x) {
                            contribs.push((*x, tensor::transpose(&grad)?));
                        }
                    }
                    Op::Matmul(a, b) => {
                        let (av, bv) = (&before[a.0].value, &before[b.0].value);
                        if needs(*a) {
                            contribs.push((*a, matmul_backward_lhs(&grad, bv, av.shape())?));
                        }
                        if needs(*b) {
                            contribs.push((*b, matmul_backward_rhs(av, &grad, bv.shape())?));
                        }
                    }
                    Op::MatmulNT(a, b) => {
                        // value = A·Bᵀ with A[m×k], B[n×k], G[m×n]
                        let (av, bv) = (&before[a.0].value, &before[b.0].value);
                        if needs(*a) {
                            contribs.push((*a, tensor::matmul(&grad, bv)?));
                        }
                        if needs(*b) {
                            let gt = tensor::transpose(&grad)?;
                            contribs.push((*b, tensor::matmul(&gt, av)?));
                        }
                    }
                    Op::ConcatCols(parts) => {
                        let mut offset = 0;
                        for p in parts {
                            let d = before[p.0].value.cols();
                            if needs(*p) {
                                contribs.push((*p, tensor::slice_cols(&grad, offset, d)?));
                            }
                            offset += d;
                        }
                    }
                    Op::SliceCols { x, start } => {
                        if needs(*x) {
                            let mut g = Tensor::zeros(before[x.0].value.shape().to_vec());
                            let (d, sd) = (g.cols(), grad.cols());
                            for i in 0..grad.rows() {
                                g.data_mut()[i * d + start..i * d + start + sd]
                                    .copy_from_slice(grad.row(i));
                            }
                            contribs.push((*x, g));
                        }
                    }
                    Op::SliceRows { x, start } => {
                        if needs(*x) {
                            let mut g = Tensor::zeros(before[x.0].value.shape().to_vec());
                            let d = g.cols();
                            g.data_mut()[start * d..start * d + grad.numel()]
                                .copy_from_slice(grad.data());
                            contribs.push((*x, g));
                        }
                    }
                    Op::SoftmaxRows(x) => {
                        // dx = s ∘ (g - <g, s>_row)
                        if needs(*x) {
                            let s = &node.value;
                            let d = s.cols();
                            let mut out = Tensor::zeros(s.shape().to_vec());
                            for ((orow, srow), grow) in out
                                .data_mut()
                                .chunks_mut(d)
                                .zip(s.data().chunks(d))
                                .zip(grad.data().chunks(d))
                            {
                                let mut dot = R::ZERO;
                                for (&sv, &gv) in srow.iter().zip(grow) {
                                    dot += sv * gv;
                                }
                                for ((o, &sv), &gv) in orow.iter_mut().zip(srow).zip(grow) {
                                    *o = sv * (gv - dot);
                                }
                            }
                            contribs.push((*x, out));
                        }
                    }
                    Op::LayerNorm { x, gain, bias, mean, inv_std } => {
                        let xv = &before[x.0].value;
                        let gv = &before[gain.0].value;
                        let d = xv.cols();
                        let rows = xv.numel() / d;
                        let inv_d = R::ONE / R::from_f64(d as f64);

                        let mut dx = Tensor::zeros(xv.shape().to_vec());
                        let mut dgain = Tensor::zeros(vec![d]);
                        let mut dbias = Tensor::zeros(vec![d]);
                        for r in 0..rows {
                            let xr = &xv.data()[r * d..(r + 1) * d];
                            let gr = &grad.data()[r * d..(r + 1) * d];
                            let (m, istd) = (mean[r], inv_std[r]);
                            // dxhat = g ∘ gain;
                            // dx = istd(dxhat - mean(dxhat) - xhat·mean(dxhat∘xhat))
                            let mut sum_dxh = R::ZERO;
                            let mut sum_dxh_xh = R::ZERO;
                            for i in 0..d {
                                let xh = (xr[i] - m) * istd;
                                let dxh = gr[i] * gv.data()[i];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                                dgain.data_mut()[i] += gr[i] * xh;
                                dbias.data_mut()[i] += gr[i];
                            }
                            sum_dxh *= inv_d;
                            sum_dxh_xh *= inv_d;
                            let dxr = &mut dx.data_mut()[r * d..(r + 1) * d];
                            for i in 0..d {
                                let xh = (xr[i] - m) * istd;
                                let dxh = gr[i] * gv.data()[i];
                                dxr[i] = istd * (dxh - sum_dxh - xh * sum_dxh_xh);
                            }
                        }
                        if needs(*x) {
                            contribs.push((*x, dx));
                        }
                        if needs(*gain) {
                            contribs.push((*gain, dgain));
                        }
                        if needs(*bias) {
                            contribs.push((*bias, dbias));
                        }
                    }
                    Op::Gelu(x) => {
                        if needs(*x) {
                            let xv = &before[x.0].value;
                            contribs.push((*x, tensor::mul(&grad, &tensor::gelu_derivative(xv))?));
                        }
                    }
                    Op::Embedding { table, ids } => {
                        if needs(*table) {
                            // scatter-add rows of the upstream gradient
                            let mut g = Tensor::zeros(before[table.0].value.shape().to_vec());
                            let d = g.cols();
                            for (i, &id) in ids.iter().enumerate() {
                                let src = grad.row(i);
                                let dst = &mut g.data_mut()[id * d..(id + 1) * d];
                                for (o, &v) in dst.iter_mut().zip(src) {
                                    *o += v;
                                }
                            }
                            contribs.push((*table, g));
                        }
                    }
                    Op::CrossEntropy { logits, targets, mask, probs } => {
                        if needs(*logits) {
                            let count = mask.iter().filter(|&&m| m).count();
                            let inv = grad.item() * (R::ONE / R::from_f64(count as f64));
                            let v = probs.cols();
                            let mut dl = Tensor::zeros(probs.shape().to_vec());
                            for i in 0..probs.rows() {
                                if !mask[i] {
                                    continue;
                                }
                                let prow = probs.row(i);
                                let drow = &mut dl.data_mut()[i * v..(i + 1) * v];
                                for (o, &p) in drow.iter_mut().zip(prow) {
                                    *o = p * inv;
                                }
                                drow[targets[i]] -= inv;
                            }
                            contribs.push((*logits, dl));
                        }
                    }
                    Op::SolveLowerTriangular { b, c } => {
                        let bv = &before[b.0].value;
                        let y = &node.value;
                        // dC = solve(Bᵀ, G); dB = -dC·Yᵀ on the lower triangle
                        let dc = tensor::solve_upper_from_transpose(bv, &grad)?;
                        if needs(*b) {
                            let n = bv.rows();
                            let d = y.cols();
                            let mut db = Tensor::zeros(vec![n, n]);
                            for i in 0..n {
                                let dci = dc.row(i);
                                for j in 0..=i {
                                    let yj = y.row(j);
                                    let mut acc = R::ZERO;
                                    for p in 0..d {
                                        acc += dci[p] * yj[p];
                                    }
                                    db.data_mut()[i * n + j] = -acc;
                                }
                            }
                            contribs.push((*b, db));
                        }
                        if needs(*c) {
                            contribs.push((*c, dc));
                        }
                    }
                    Op::SumAll(x) => {
                        if needs(*x) {
                            let g = grad.item();
                            contribs.push((*x, Tensor::full(before[x.0].value.shape().to_vec(), g)));
                        }
                    }
                }
            }
            // phase 2: accumulate into the inputs
            for (v, c) in contribs {
                add_grad(before, v, c);
            }
        }
        Ok(())
    }
}

fn add_grad<R: Real>(nodes: &mut [Node<R>], target: Var, contribution: Tensor<R>) {
    match &mut nodes[target.0].grad {
        Some(g) => {
            debug_assert_eq!(g.shape(), contribution.shape());
            for (o, &v) in g.data_mut().iter_mut().zip(contribution.data()) {
                *o += v;
            }
        }
        slot => *slot = Some(contribution),
    }
}

/// dA for value = A·B with upstream G: per batch slice G·Bᵀ, summed over the
/// batch when A was broadcast.
fn matmul_backward_lhs<R: Real>(
    g: &Tensor<R>,
    b: &Tensor<R>,
    a_shape: &[usize],
) -> Result<Tensor<R>, NumError> {
    let gr = g.shape().len();
    let g_batch: usize = g.shape()[..gr - 2].iter().product::<usize>().max(1);
    let br = b.shape().len();
    let b_batch: usize = b.shape()[..br - 2].iter().product::<usize>().max(1);
    let ar = a_shape.len();
    let a_batch: usize = a_shape[..ar - 2].iter().product::<usize>().max(1);
    let (m, n) = (g.shape()[gr - 2], g.shape()[gr - 1]);
    let k = b.shape()[br - 1 - 1];

    let mut out = Tensor::zeros(a_shape.to_vec());
    for idx in 0..g_batch {
        let bi = if b_batch == 1 { 0 } else { idx };
        let ai = if a_batch == 1 { 0 } else { idx };
        let g_slice = &g.data()[idx * m * n..(idx + 1) * m * n];
        let b_slice = &b.data()[bi * k * n..(bi + 1) * k * n];
        let dst = &mut out.data_mut()[ai * m * k..(ai + 1) * m * k];
        // dst += G[m×n] · (B[k×n] rows as columns)
        for i in 0..m {
            let grow = &g_slice[i * n..(i + 1) * n];
            for j in 0..k {
                let brow = &b_slice[j * n..(j + 1) * n];
                let mut acc = R::ZERO;
                for (&gv, &bv) in grow.iter().zip(brow) {
                    acc += gv * bv;
                }
                dst[i * k + j] += acc;
            }
        }
    }
    Ok(out)
}

/// dB for value = A·B with upstream G: per batch slice Aᵀ·G, summed over the
/// batch when B was broadcast.
fn matmul_backward_rhs<R: Real>(
    a: &Tensor<R>,
    g: &Tensor<R>,
    b_shape: &[usize],
) -> Result<Tensor<R>, NumError> {
    let gr = g.shape().len();
    let g_batch: usize = g.shape()[..gr - 2].iter().product::<usize>().max(1);
    let ar = a.shape().len();
    let a_batch: usize = a.shape()[..ar - 2].iter().product::<usize>().max(1);
    let br = b_shape.len();
    let b_batch: usize = b_shape[..br - 2].iter().product::<usize>().max(1);
    let (m, n) = (g.shape()[gr - 2], g.shape()[gr - 1]);
    let k = a.shape()[ar - 1];

    let mut out = Tensor::zeros(b_shape.to_vec());
    for idx in 0..g_batch {
        let ai = if a_batch == 1 { 0 } else { idx };
        let bi = if b_batch == 1 { 0 } else { idx };
        let a_slice = &a.data()[ai * m * k..(ai + 1) * m * k];
        let g_slice = &g.data()[idx * m * n..(idx + 1) * m * n];
        let dst = &mut out.data_mut()[bi * k * n..(bi + 1) * k * n];
        tensor::matmul2_tn_acc(m, k, n, a_slice, g_slice, dst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::{finite_difference_gradient, max_relative_error};
    use crate::numcore::tensor::MASK_SENTINEL;
    use crate::rng::Rng;

    type T = Tensor<f64>;

    #[test]
    fn add_mul_gradients() {
        // loss = sum(x*x + x) => d/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(T::from_f64_slice(vec![3], &[1.0, 2.0, 3.0]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.add(sq, x).unwrap();
        let loss = tape.sum_all(s);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g.data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn matmul_then_sum_matches_finite_differences() {
        let mut rng = Rng::new(7);
        let a0: T = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let b0: T = Tensor::uniform(vec![4, 2], -1.0, 1.0, &mut rng);

        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.constant(b0.clone());
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(a).unwrap().clone();

        let numeric = finite_difference_gradient(
            |x| {
                tensor::sum_all(&tensor::matmul(x, &b0).unwrap()).item()
            },
            &a0,
            1e-5,
        );
        assert!(max_relative_error(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn solve_then_sum_matches_finite_differences() {
        let mut rng = Rng::new(13);
        let n = 5;
        let mut b0: T = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            for j in 0..i {
                b0.data_mut()[i * n + j] = rng.uniform(-0.5, 0.5);
            }
            b0.data_mut()[i * n + i] = 1.0 + rng.uniform(0.0, 0.5);
        }
        let c0: T = Tensor::uniform(vec![n, 3], -1.0, 1.0, &mut rng);

        let mut tape = Tape::new();
        let b = tape.leaf(b0.clone());
        let c = tape.leaf(c0.clone());
        let y = tape.solve_lower_triangular(b, c).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();

        let db = tape.grad(b).unwrap().clone();
        let dc = tape.grad(c).unwrap().clone();

        let num_db = finite_difference_gradient(
            |x| tensor::sum_all(&tensor::solve_lower_triangular(x, &c0).unwrap()).item(),
            &b0,
            1e-6,
        );
        let num_dc = finite_difference_gradient(
            |x| tensor::sum_all(&tensor::solve_lower_triangular(&b0, x).unwrap()).item(),
            &c0,
            1e-6,
        );
        assert!(max_relative_error(&db, &num_db) < 1e-5);
        assert!(max_relative_error(&dc, &num_dc) < 1e-5);
    }

    #[test]
    fn softmax_masked_gradient_matches_finite_differences() {
        let mut rng = Rng::new(19);
        let x0: T = Tensor::uniform(vec![3, 4], -2.0, 2.0, &mut rng);
        let mut mask = Tensor::zeros(vec![3, 4]);
        mask.data_mut()[1] = MASK_SENTINEL; // hide one entry of row 0
        mask.data_mut()[2 * 4 + 3] = MASK_SENTINEL;
        // weight the output so every coordinate matters differently
        let w: T = Tensor::uniform(vec![3, 4], -1.0, 1.0, &mut rng);

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let wv = tape.constant(w.clone());
        let s = tape.softmax_rows(x, &mask).unwrap();
        let weighted = tape.mul(s, wv).unwrap();
        let loss = tape.sum_all(weighted);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(x).unwrap().clone();

        let numeric = finite_difference_gradient(
            |v| {
                let s = tensor::softmax_rows(v, &mask).unwrap();
                tensor::sum_all(&tensor::mul(&s, &w).unwrap()).item()
            },
            &x0,
            1e-6,
        );
        assert!(max_relative_error(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = Rng::new(29);
        let logits0: T = Tensor::uniform(vec![4, 5], -1.0, 1.0, &mut rng);
        let targets = [2usize, 0, 3, 1];
        let mask = [true, false, true, true];

        let mut tape = Tape::new();
        let logits = tape.leaf(logits0.clone());
        let loss = tape.cross_entropy(logits, &targets, &mask).unwrap();
        tape.backward(loss).unwrap();
        let analytic = tape.grad(logits).unwrap().clone();

        let numeric = finite_difference_gradient(
            |v| tensor::cross_entropy(v, &targets, &mask).unwrap(),
            &logits0,
            1e-6,
        );
        assert!(max_relative_error(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = Rng::new(31);
        let x0: T = Tensor::uniform(vec![3, 6], -1.5, 1.5, &mut rng);
        let g0: T = Tensor::uniform(vec![6], 0.5, 1.5, &mut rng);
        let b0: T = Tensor::uniform(vec![6], -0.2, 0.2, &mut rng);
        let w: T = Tensor::uniform(vec![3, 6], -1.0, 1.0, &mut rng);

        let run = |x: &T, g: &T, b: &T| {
            let y = tensor::layer_norm(x, g, b).unwrap();
            tensor::sum_all(&tensor::mul(&y, &w).unwrap()).item()
        };

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let g = tape.leaf(g0.clone());
        let b = tape.leaf(b0.clone());
        let wv = tape.constant(w.clone());
        let y = tape.layer_norm(x, g, b).unwrap();
        let weighted = tape.mul(y, wv).unwrap();
        let loss = tape.sum_all(weighted);
        tape.backward(loss).unwrap();

        let num_x = finite_difference_gradient(|v| run(v, &g0, &b0), &x0, 1e-6);
        let num_g = finite_difference_gradient(|v| run(&x0, v, &b0), &g0, 1e-6);
        let num_b = finite_difference_gradient(|v| run(&x0, &g0, v), &b0, 1e-6);
        assert!(max_relative_error(tape.grad(x).unwrap(), &num_x) < 1e-5);
        assert!(max_relative_error(tape.grad(g).unwrap(), &num_g) < 1e-5);
        assert!(max_relative_error(tape.grad(b).unwrap(), &num_b) < 1e-5);
    }

    #[test]
    fn embedding_scatter_add_accumulates_repeats() {
        let table0 = T::from_f64_slice(vec![3, 2], &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let table = tape.leaf(table0);
        let e = tape.embedding(table, &[1, 1, 0]).unwrap();
        let loss = tape.sum_all(e);
        tape.backward(loss).unwrap();
        let g = tape.grad(table).unwrap();
        // row 1 hit twice, row 0 once, row 2 never
        assert_eq!(g.data(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn gradient_reaches_all_leaves_through_shared_subgraphs() {
        // x used by two branches; both contributions must accumulate
        let mut tape = Tape::new();
        let x = tape.leaf(T::from_f64_slice(vec![2], &[1.0, 4.0]).unwrap());
        let a = tape.scale(x, 2.0);
        let b = tape.mul(x, x).unwrap();
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum_all(s);
        tape.backward(loss).unwrap();
        // d/dx (2x + x^2) = 2 + 2x
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 10.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(T::zeros(vec![2, 2]));
        assert!(tape.backward(x).is_err());
    }
}
