//! Dense row-major tensors and the eager kernels shared with the autodiff graph.

use crate::error::{invalid, Error, Result};
use crate::rng::RandomSource;
use crate::scalar::Scalar;

/// Dense row-major array with an optional gradient buffer.
///
/// Most math in this crate is two dimensional (`rows × cols`); higher ranks
/// only appear for images and checkpoint payloads.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) && !data.is_empty() {
            return invalid(format!("shape {shape:?} has a zero extent"));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if m == 0 || n == 0 {
            return invalid("from_rows needs at least one non-empty row");
        }
        if rows.iter().any(|r| r.len() != n) {
            return invalid("ragged rows");
        }
        Self::from_vec(&[m, n], rows.concat())
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut RandomSource) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| T::lit(rng.normal() * std)).collect();
        Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a trainable parameter.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Product of all trailing extents; the row width of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.cols();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }

    pub fn transpose(&self) -> Self {
        let (m, n) = (self.rows(), self.cols());
        Self {
            shape: vec![n, m],
            data: kernels::transpose(&self.data, m, n),
            requires_grad: false,
            grad: None,
        }
    }

    /// Stacks tensors with equal row width on top of each other.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return invalid("concat_rows of nothing");
        };
        let n = first.cols();
        let mut data = Vec::new();
        let mut m = 0;
        for p in parts {
            if p.cols() != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            data.extend_from_slice(&p.data);
            m += p.rows();
        }
        Self::from_vec(&[m, n], data)
    }

    /// Copies the listed rows, in order, into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let n = self.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= self.rows() {
                return invalid(format!("row {i} out of range for {:?}", self.shape));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::from_vec(&[idx.len(), n], data)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

fn check_2d<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: t.shape.clone(),
            rhs: vec![],
        });
    }
    Ok(())
}

/// Matrix product `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_2d("matmul", a)?;
    check_2d("matmul", b)?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    kernels::gemm_acc(&a.data, &b.data, &mut out, m, k, n);
    Tensor::from_vec(&[m, n], out)
}

/// Row-wise softmax of `x / scale`, stabilized by subtracting each row's max.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    check_2d("softmax_rows", x)?;
    if x.cols() == 0 {
        return invalid("softmax over an empty row");
    }
    if !(scale > T::zero()) {
        return invalid("softmax scale must be positive");
    }
    let mut data = x.data.clone();
    let inv = T::one() / scale;
    if inv != T::one() {
        data.iter_mut().for_each(|v| *v *= inv);
    }
    kernels::softmax_rows_in_place(&mut data, x.cols());
    Tensor::from_vec(&x.shape, data)
}

/// Euclidean norm of all entries (a `1×d` vector in practice).
pub fn l2_norm<T: Scalar>(v: &Tensor<T>) -> T {
    kernels::norm(&v.data)
}

/// Rescales `v` so its norm equals `target`, preserving direction.
pub fn scale_to_norm<T: Scalar>(v: &Tensor<T>, target: T) -> Result<Tensor<T>> {
    if v.is_empty() {
        return invalid("scale_to_norm of an empty vector");
    }
    let norm = l2_norm(v);
    if norm == T::zero() {
        if target == T::zero() {
            return Ok(v.clone());
        }
        return invalid("cannot rescale a zero vector to a positive norm");
    }
    let f = target / norm;
    let data = v.data.iter().map(|&x| x * f).collect();
    Tensor::from_vec(&v.shape, data)
}

pub(crate) mod kernels {
    use crate::scalar::Scalar;

    /// `c += a · b` with `a: m×k`, `b: k×n`, all row-major.
    pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            let arow = &a[i * k..(i + 1) * k];
            for (p, &aip) in arow.iter().enumerate() {
                if aip == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cj, &bj) in crow.iter_mut().zip(brow) {
                    *cj += aip * bj;
                }
            }
        }
    }

    pub fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        out
    }

    pub fn softmax_rows_in_place<T: Scalar>(data: &mut [T], n: usize) {
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = T::one() / sum;
            row.iter_mut().for_each(|v| *v *= inv);
        }
    }

    pub fn norm<T: Scalar>(v: &[T]) -> T {
        v.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
        a.iter().zip(b).map(|(&x, &y)| x * y).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_column() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t(&[&[0.0], &[1.0]]);
        assert_eq!(a.matmul(&b).unwrap(), t(&[&[2.0], &[4.0]]));
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut rng = RandomSource::new(3, 0);
        let b = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        let z = Tensor::<f64>::zeros(&[3, 3]);
        assert_eq!(z.matmul(&b).unwrap(), z);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_uniform_row() {
        let s = softmax_rows(&t(&[&[0.0, 0.0, 0.0]]), 1.0).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_single_column_is_one() {
        let s = softmax_rows(&t(&[&[-7.0], &[3.5], &[1e3]]), 2.0).unwrap();
        assert!(s.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn softmax_two_entries_closed_form() {
        let s = softmax_rows(&t(&[&[1.0, 2.0]]), 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((s.at(0, 0) - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((s.at(0, 1) - e / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_bad_arguments() {
        assert!(softmax_rows(&t(&[&[1.0]]), 0.0).is_err());
        assert!(softmax_rows(&t(&[&[1.0]]), -1.0).is_err());
    }

    #[test]
    fn scale_to_norm_cases() {
        let v = t(&[&[3.0, 4.0]]);
        assert_eq!(scale_to_norm(&v, 10.0).unwrap(), t(&[&[6.0, 8.0]]));
        let u = t(&[&[1.0, 1.0, 1.0, 1.0]]);
        let s = scale_to_norm(&u, 1.0).unwrap();
        assert!(s.data().iter().all(|&x| (x - 0.5).abs() < 1e-15));
        let mut rng = RandomSource::new(9, 0);
        let w = Tensor::<f64>::randn(&[1, 7], 1.0, &mut rng);
        let same = scale_to_norm(&w, l2_norm(&w)).unwrap();
        assert!(same.max_abs_diff(&w) <= 1e-12);
        assert!(scale_to_norm(&Tensor::<f64>::zeros(&[1, 3]), 1.0).is_err());
    }

    #[test]
    fn generic_over_f32() {
        let a = Tensor::<f32>::from_f64(&[1, 2], &[3.0, 4.0]).unwrap();
        assert_eq!(l2_norm(&a), 5.0f32);
    }
}
