//! Dense row-major `f64` tensors and the handful of kernels the rest of the
//! crate is built on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from caller data, rejecting length mismatches and
    /// non-finite values.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "tensor construction",
                format!("non-finite value {} at flat index {}", data[pos], pos),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for kernel outputs; only checks the length.
    pub(crate) fn from_raw(shape: &[usize], data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_raw(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_raw(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_raw(&[1], vec![value])
    }

    /// `rows × cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(&[rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix. Rank-1 tensors are a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// The value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor::from_raw(
            &self.shape,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.data.len(), other.data.len(), "add_assign length mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Selects rows of a matrix by index.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(self.row(i));
        }
        Tensor::from_raw(&[idx.len(), c], out)
    }

    /// Stacks equally wide matrices (or flat rows) on top of each other.
    pub fn stack_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts
            .first()
            .map(|t| t.cols())
            .ok_or_else(|| Error::Shape("stack of zero tensors".into()))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            if p.cols() != cols {
                return Err(Error::Shape(format!("stack width {} vs {}", p.cols(), cols)));
            }
            rows += p.rows();
            out.extend_from_slice(&p.data);
        }
        Ok(Tensor::from_raw(&[rows, cols], out))
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_raw(&[c, r], out)
    }
}

/// Layout flags for [`gemm`]: whether each operand is read transposed.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Trans {
    pub a: bool,
    pub b: bool,
}

/// `C = op(A) · op(B)` for row-major matrices, with `beta` scaling the
/// existing contents of `out`.
pub(crate) fn gemm(a: &Tensor, b: &Tensor, trans: Trans, beta: f64, out: &mut Tensor) {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k) = if trans.a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans.b { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "gemm inner dimension mismatch: {k} vs {k2}");
    assert_eq!(out.len(), m * n, "gemm output size mismatch");
    // Row-major strides; transposition just swaps them.
    let (rsa, csa) = if trans.a { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if trans.b { (1, bc as isize) } else { (bc as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.data_mut().iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the pointers come from live slices whose lengths were checked
    // against m, k, n above, and the strides describe those same buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            beta,
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(&[a.rows(), b.cols()]);
    gemm(a, b, Trans { a: false, b: false }, 0.0, &mut out);
    out
}
