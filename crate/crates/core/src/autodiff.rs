//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended
//! after their inputs, so the tape order is already a topological order and
//! [`Graph::backward`] visits each node exactly once by walking it in
//! reverse. Parameters enter the tape through [`Graph::param`]; their
//! `requires_grad` flag decides whether gradients flow into them.

use std::collections::HashMap;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Silu(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Softmax(Var),
    AttentionFactor { x: Var, cols: Vec<(usize, T)> },
    SelectRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    Column { x: Var, col: usize },
    SelectCols { x: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    MaskColumns { x: Var, cols: Vec<usize> },
    MulCol(Var, Var),
    NormalizeRows { x: Var, norms: Vec<T> },
    MulScalar(Var, Var),
    Norm(Var),
    MeanRows(Var),
    Sum(Var),
    Mse { x: Var, target: Vec<T> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The tape: node values, the op that produced each, and gradients after
/// [`Graph::backward`].
pub struct Graph<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<usize, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(
            matches!(op, Op::Leaf) || value.is_finite(),
            "non-finite value produced by {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradient regardless of its `requires_grad` flag.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a parameter tensor. Registering the same tensor twice in
    /// one graph returns the same node. Gradient flows only when the tensor
    /// has `requires_grad` set.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let key = t as *const Tensor<T> as usize;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let mut value = t.clone();
        value.grad = None;
        let v = self.push(value, Op::Leaf, t.requires_grad);
        self.params.insert(key, v);
        v
    }

    /// Node registered for `t` by [`Graph::param`], if any.
    pub fn param_var(&self, t: &Tensor<T>) -> Option<Var> {
        self.params.get(&(t as *const Tensor<T> as usize)).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&self, v: Var) -> Tensor<T> {
        self.nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn two_d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.two_d("matmul_t", a)?;
        let (n, k2) = self.two_d("matmul_t", b)?;
        if k != k2 {
            return Err(mismatch("matmul_t", self.value(a), self.value(b)));
        }
        let bt = kernels::transpose(self.value(b).data(), n, k);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_acc(self.value(a).data(), &bt, &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_vec(&[m, n], out)?, Op::MatMulT(a, b), ng))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&self, name: &'static str, a: Var, row: Var) -> Result<usize> {
        let (_, n) = self.two_d(name, a)?;
        let rs = self.shape(row);
        if rs.len() != 2 || rs[0] != 1 || rs[1] != n {
            return Err(mismatch(name, self.value(a), self.value(row)));
        }
        Ok(n)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.row_broadcast("add_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            chunk.iter_mut().zip(&r).for_each(|(x, &y)| *x += y);
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.row_broadcast("mul_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            chunk.iter_mut().zip(&r).for_each(|(x, &y)| *x *= y);
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::MulRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x *= c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = *x * sigmoid(*x));
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    /// Per-row standardization (zero mean, unit variance), no affine part.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.two_d("layer_norm", a)?;
        let eps = T::lit(1e-5);
        let nf = T::lit(n as f64);
        let mut out = self.value(a).clone();
        let mut rstds = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * rstd);
            rstds.push(rstd);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::LayerNorm { x: a, rstd: rstds }, ng))
    }

    /// Row-wise softmax (no extra scaling; callers fold scaling into the logits).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.two_d("softmax_rows", a)?;
        if n == 0 {
            return invalid("softmax over an empty row");
        }
        let mut out = self.value(a).clone();
        kernels::softmax_rows_in_place(out.data_mut(), n);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    /// Replaces column `c` by `max(x, λx)` for every `(c, λ)` listed.
    pub fn attention_factor(&mut self, a: Var, cols: &[(usize, T)]) -> Result<Var> {
        let (_, n) = self.two_d("attention_factor", a)?;
        for &(c, lambda) in cols {
            if c >= n {
                return invalid(format!("subject column {c} out of range for {n} tokens"));
            }
            if lambda < T::one() {
                return invalid(format!("attention factor {lambda} < 1"));
            }
        }
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(n) {
            for &(c, lambda) in cols {
                row[c] = row[c].max(lambda * row[c]);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            out,
            Op::AttentionFactor {
                x: a,
                cols: cols.to_vec(),
            },
            ng,
        ))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(a).select_rows(idx)?;
        let ng = self.ng(a);
        Ok(self.push(
            out,
            Op::SelectRows {
                x: a,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Column `col` of `a` as an `m×1` tensor.
    pub fn column(&mut self, a: Var, col: usize) -> Result<Var> {
        let (m, n) = self.two_d("column", a)?;
        if col >= n {
            return invalid(format!("column {col} out of range for width {n}"));
        }
        let src = self.value(a);
        let data = (0..m).map(|i| src.data()[i * n + col]).collect();
        let out = Tensor::from_vec(&[m, 1], data)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Column { x: a, col }, ng))
    }

    /// Gathers columns of `a` in the given order; indices may repeat.
    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.two_d("select_cols", a)?;
        if let Some(&c) = idx.iter().find(|&&c| c >= n) {
            return invalid(format!("column {c} out of range for width {n}"));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * idx.len());
        for row in src.chunks(n.max(1)).take(m) {
            data.extend(idx.iter().map(|&c| row[c]));
        }
        let out = Tensor::from_vec(&[m, idx.len()], data)?;
        let ng = self.ng(a);
        Ok(self.push(
            out,
            Op::SelectCols {
                x: a,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return invalid("concat_cols of nothing");
        }
        let (m, _) = self.two_d("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.two_d("concat_cols", p)?;
            if pm != m {
                return Err(mismatch("concat_cols", self.value(parts[0]), self.value(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::from_vec(&[m, total], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Copy of `a` with the listed columns set to zero.
    pub fn mask_columns(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let (_, n) = self.two_d("mask_columns", a)?;
        if let Some(&c) = cols.iter().find(|&&c| c >= n) {
            return invalid(format!("column {c} out of range for width {n}"));
        }
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(n) {
            for &c in cols {
                row[c] = T::zero();
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            out,
            Op::MaskColumns {
                x: a,
                cols: cols.to_vec(),
            },
            ng,
        ))
    }

    /// Scales row `i` of `a` (`m×n`) by `c[i]` (`c: m×1`).
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (m, n) = self.two_d("mul_col", a)?;
        if self.shape(c) != [m, 1] {
            return Err(mismatch("mul_col", self.value(a), self.value(c)));
        }
        let cv = self.value(c).data().to_vec();
        let mut out = self.value(a).clone();
        for (row, &s) in out.data_mut().chunks_mut(n).zip(&cv) {
            row.iter_mut().for_each(|x| *x *= s);
        }
        let ng = self.ng(a) || self.ng(c);
        Ok(self.push(out, Op::MulCol(a, c), ng))
    }

    /// Divides every row by its Euclidean norm. A zero row is an error
    /// carrying the row index.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.two_d("normalize_rows", a)?;
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for (i, row) in out.data_mut().chunks_mut(n).enumerate() {
            let norm = kernels::norm(row);
            if norm == T::zero() {
                return Err(Error::ZeroNormValue { layer: 0, row: i });
            }
            let inv = T::one() / norm;
            row.iter_mut().for_each(|x| *x *= inv);
            norms.push(norm);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::NormalizeRows { x: a, norms }, ng))
    }

    /// Multiplies `a` by the single entry of the `1×1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(mismatch("mul_scalar", self.value(a), self.value(s)));
        }
        let sv = self.value(s).data()[0];
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x *= sv);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(out, Op::MulScalar(a, s), ng))
    }

    /// Euclidean norm of all entries, as a `1×1` node.
    pub fn norm(&mut self, a: Var) -> Var {
        let n = kernels::norm(self.value(a).data());
        let ng = self.ng(a);
        self.push(Tensor::filled(&[1, 1], n), Op::Norm(a), ng)
    }

    /// Mean over rows: `m×n → 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.two_d("mean_rows", a)?;
        let mut acc = vec![T::zero(); n];
        for row in self.value(a).data().chunks(n) {
            acc.iter_mut().zip(row).for_each(|(s, &x)| *s += x);
        }
        let inv = T::one() / T::lit(m as f64);
        acc.iter_mut().for_each(|s| *s *= inv);
        let ng = self.ng(a);
        Ok(self.push(Tensor::from_vec(&[1, n], acc)?, Op::MeanRows(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let ng = self.ng(a);
        self.push(Tensor::filled(&[1, 1], s), Op::Sum(a), ng)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: Var, target: &Tensor<T>) -> Result<Var> {
        let x = self.value(a);
        if x.len() != target.len() {
            return Err(mismatch("mse", x, target));
        }
        let n = T::lit(x.len() as f64);
        let l = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum::<T>()
            / n;
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::filled(&[1, 1], l),
            Op::Mse {
                x: a,
                target: target.data().to_vec(),
            },
            ng,
        ))
    }

    /// Back-propagates from the scalar node `root` (seed gradient 1).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return invalid("backward needs a scalar root");
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, g: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.ng(a) {
                    let bt = kernels::transpose(self.value(b).data(), k, n);
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_acc(g, &bt, &mut da, m, n, k);
                    self.acc(a, da);
                }
                if self.ng(b) {
                    let at = kernels::transpose(self.value(a).data(), m, k);
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm_acc(&at, g, &mut db, k, m, n);
                    self.acc(b, db);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[0];
                if self.ng(a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_acc(g, self.value(b).data(), &mut da, m, n, k);
                    self.acc(a, da);
                }
                if self.ng(b) {
                    let gt = kernels::transpose(g, m, n);
                    let mut db = vec![T::zero(); n * k];
                    kernels::gemm_acc(&gt, self.value(a).data(), &mut db, n, m, k);
                    self.acc(b, db);
                }
            }
            Op::Add(a, b) => {
                self.acc(a, g.to_vec());
                self.acc(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(a, g.to_vec());
                self.acc(b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                if self.ng(a) {
                    let d = mul_elem(g, self.value(b).data());
                    self.acc(a, d);
                }
                if self.ng(b) {
                    let d = mul_elem(g, self.value(a).data());
                    self.acc(b, d);
                }
            }
            Op::AddRow(a, row) => {
                self.acc(a, g.to_vec());
                if self.ng(row) {
                    let n = self.shape(row)[1];
                    let mut d = vec![T::zero(); n];
                    for chunk in g.chunks(n) {
                        d.iter_mut().zip(chunk).for_each(|(s, &x)| *s += x);
                    }
                    self.acc(row, d);
                }
            }
            Op::MulRow(a, row) => {
                let n = self.shape(row)[1];
                if self.ng(a) {
                    let r = self.value(row).data();
                    let d = g
                        .chunks(n)
                        .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| x * y))
                        .collect();
                    self.acc(a, d);
                }
                if self.ng(row) {
                    let mut d = vec![T::zero(); n];
                    for (gc, ac) in g.chunks(n).zip(self.value(a).data().chunks(n)) {
                        for j in 0..n {
                            d[j] += gc[j] * ac[j];
                        }
                    }
                    self.acc(row, d);
                }
            }
            Op::Scale(a, c) => self.acc(a, g.iter().map(|&x| x * c).collect()),
            Op::Silu(a) => {
                let d = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(&gy, &x)| {
                        let s = sigmoid(x);
                        gy * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                self.acc(a, d);
            }
            Op::LayerNorm { x, rstd } => {
                let n = self.shape(x)[1];
                let nf = T::lit(n as f64);
                let xhat = self.nodes[i].value.data();
                let mut d = Vec::with_capacity(g.len());
                for ((gr, hr), &r) in g.chunks(n).zip(xhat.chunks(n)).zip(&rstd) {
                    let mean_g = gr.iter().copied().sum::<T>() / nf;
                    let mean_gh = kernels::dot(gr, hr) / nf;
                    d.extend(
                        gr.iter()
                            .zip(hr)
                            .map(|(&gy, &h)| r * (gy - mean_g - h * mean_gh)),
                    );
                }
                self.acc(x, d);
            }
            Op::Softmax(a) => {
                let n = self.shape(a)[1];
                let y = self.nodes[i].value.data();
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(n).zip(y.chunks(n)) {
                    let s = kernels::dot(gr, yr);
                    d.extend(gr.iter().zip(yr).map(|(&gy, &p)| p * (gy - s)));
                }
                self.acc(a, d);
            }
            Op::AttentionFactor { x, cols } => {
                let n = self.shape(x)[1];
                let xv = self.value(x).data();
                let mut d = g.to_vec();
                for (dr, xr) in d.chunks_mut(n).zip(xv.chunks(n)) {
                    for &(c, lambda) in &cols {
                        if xr[c] > T::zero() {
                            dr[c] *= lambda;
                        }
                    }
                }
                self.acc(x, d);
            }
            Op::SelectRows { x, idx } => {
                let n = self.value(x).cols();
                let mut d = vec![T::zero(); self.value(x).len()];
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..n {
                        d[r * n + j] += g[k * n + j];
                    }
                }
                self.acc(x, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(p).len();
                    self.acc(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::Column { x, col } => {
                let n = self.shape(x)[1];
                let mut d = vec![T::zero(); self.value(x).len()];
                for (r, &gv) in g.iter().enumerate() {
                    d[r * n + col] = gv;
                }
                self.acc(x, d);
            }
            Op::SelectCols { x, idx } => {
                let n = self.shape(x)[1];
                let k = idx.len();
                let mut d = vec![T::zero(); self.value(x).len()];
                for (r, grow) in g.chunks(k.max(1)).enumerate().take(self.shape(x)[0]) {
                    for (j, &c) in idx.iter().enumerate() {
                        d[r * n + c] += grow[j];
                    }
                }
                self.acc(x, d);
            }
            Op::ConcatCols(parts) => {
                let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                let mut offset = 0;
                for p in parts {
                    let (m, w) = (self.shape(p)[0], self.shape(p)[1]);
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.acc(p, d);
                    }
                    offset += w;
                }
            }
            Op::MaskColumns { x, cols } => {
                let n = self.shape(x)[1];
                let mut d = g.to_vec();
                for row in d.chunks_mut(n) {
                    for &c in &cols {
                        row[c] = T::zero();
                    }
                }
                self.acc(x, d);
            }
            Op::MulCol(a, c) => {
                let n = self.shape(a)[1];
                if self.ng(a) {
                    let cv = self.value(c).data();
                    let d = g
                        .chunks(n)
                        .zip(cv)
                        .flat_map(|(row, &s)| row.iter().map(move |&x| x * s))
                        .collect();
                    self.acc(a, d);
                }
                if self.ng(c) {
                    let d = g
                        .chunks(n)
                        .zip(self.value(a).data().chunks(n))
                        .map(|(gr, ar)| kernels::dot(gr, ar))
                        .collect();
                    self.acc(c, d);
                }
            }
            Op::NormalizeRows { x, norms } => {
                let n = self.shape(x)[1];
                let u = self.nodes[i].value.data();
                let mut d = Vec::with_capacity(g.len());
                for ((gr, ur), &norm) in g.chunks(n).zip(u.chunks(n)).zip(&norms) {
                    let proj = kernels::dot(gr, ur);
                    d.extend(gr.iter().zip(ur).map(|(&gy, &uv)| (gy - uv * proj) / norm));
                }
                self.acc(x, d);
            }
            Op::MulScalar(a, s) => {
                if self.ng(a) {
                    let sv = self.value(s).data()[0];
                    self.acc(a, g.iter().map(|&x| x * sv).collect());
                }
                if self.ng(s) {
                    let d = kernels::dot(g, self.value(a).data());
                    self.acc(s, vec![d]);
                }
            }
            Op::Norm(a) => {
                let n = self.nodes[i].value.data()[0];
                let d = if n == T::zero() {
                    vec![T::zero(); self.value(a).len()]
                } else {
                    self.value(a).data().iter().map(|&x| g[0] * x / n).collect()
                };
                self.acc(a, d);
            }
            Op::MeanRows(a) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                let inv = T::one() / T::lit(m as f64);
                let d = (0..m * n).map(|k| g[k % n] * inv).collect();
                self.acc(a, d);
            }
            Op::Sum(a) => {
                let len = self.value(a).len();
                self.acc(a, vec![g[0]; len]);
            }
            Op::Mse { x, target } => {
                let n = T::lit(target.len() as f64);
                let two = T::lit(2.0);
                let d = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(&target)
                    .map(|(&p, &q)| g[0] * two * (p - q) / n)
                    .collect();
                self.acc(x, d);
            }
        }
    }
}

fn mul_elem<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
