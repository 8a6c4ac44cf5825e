//! Dense row-major matrices, the only array shape the network code needs.
//!
//! Token sequences, point sets and weight matrices are all `rows x cols`;
//! vectors are `1 x cols`.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Panics when `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length does not match {rows}x{cols}"
        );
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self::from_vec(1, cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let mut out = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            out.extend_from_slice(self.row(i));
        }
        Tensor::from_vec(indices.len(), self.cols, out)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        Tensor::from_vec(
            len,
            self.cols,
            self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        )
    }

    pub fn transpose(&self) -> Tensor {
        Tensor::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), other.shape());
        Tensor::from_vec(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let mut out = Tensor::zeros(self.rows, other.cols);
        gemm(
            MatRef::normal(self),
            MatRef::normal(other),
            0.0,
            MatMut::whole(&mut out),
        );
        out
    }
}

/// Strided read-only view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn normal(t: &'a Tensor) -> Self {
        Self {
            data: &t.data,
            offset: 0,
            rows: t.rows,
            cols: t.cols,
            rs: t.cols as isize,
            cs: 1,
        }
    }

    pub fn transposed(t: &'a Tensor) -> Self {
        Self {
            data: &t.data,
            offset: 0,
            rows: t.cols,
            cols: t.rows,
            rs: 1,
            cs: t.cols as isize,
        }
    }

    /// Column block `[start, start + width)` of a row-major matrix.
    pub fn col_block(data: &'a [f64], rows: usize, stride: usize, start: usize, width: usize) -> Self {
        Self {
            data,
            offset: start,
            rows,
            cols: width,
            rs: stride as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset as isize
                + (self.rows as isize - 1) * self.rs
                + (self.cols as isize - 1) * self.cs;
            assert!(last >= 0 && (last as usize) < self.data.len());
        }
    }
}

pub(crate) struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatMut<'a> {
    pub fn whole(t: &'a mut Tensor) -> Self {
        let (rows, cols) = t.shape();
        Self {
            data: &mut t.data,
            offset: 0,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn col_block(
        data: &'a mut [f64],
        rows: usize,
        stride: usize,
        start: usize,
        width: usize,
    ) -> Self {
        Self {
            data,
            offset: start,
            rows,
            cols: width,
            rs: stride as isize,
            cs: 1,
        }
    }

    pub fn slice(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols);
        Self {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }
}

/// `c <- a · b + beta · c` on strided views.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output shape mismatch");
    a.check();
    b.check();
    if c.rows > 0 && c.cols > 0 {
        let last = c.offset as isize + (c.rows as isize - 1) * c.rs + (c.cols as isize - 1) * c.cs;
        assert!(last >= 0 && (last as usize) < c.data.len());
    }
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // matrixmultiply leaves c untouched for k == 0; apply beta by hand.
        for r in 0..c.rows {
            for col in 0..c.cols {
                let idx = (c.offset as isize + r as isize * c.rs + col as isize * c.cs) as usize;
                c.data[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked above against its backing slice,
    // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr().add(a.offset),
            a.rs,
            a.cs,
            b.data.as_ptr().add(b.offset),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs,
            c.cs,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        Tensor::from_fn(a.rows(), b.cols(), |r, c| {
            (0..a.cols()).map(|k| a.get(r, k) * b.get(k, c)).sum()
        })
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::from_fn(5, 7, |r, c| (r * 7 + c) as f64 * 0.1 - 1.0);
        let b = Tensor::from_fn(7, 3, |r, c| ((r + 2 * c) % 5) as f64 - 2.0);
        let got = a.matmul(&b);
        let want = naive(&a, &b);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_views_multiply_correctly() {
        let a = Tensor::from_fn(4, 6, |r, c| (r as f64 + 1.0) * (c as f64 - 2.5));
        let b = Tensor::from_fn(4, 3, |r, c| (r * c) as f64 + 0.5);
        let mut out = Tensor::zeros(6, 3);
        gemm(MatRef::transposed(&a), MatRef::normal(&b), 0.0, MatMut::whole(&mut out));
        let want = naive(&a.transpose(), &b);
        assert_eq!(out, want);
    }

    #[test]
    fn empty_inner_dimension_scales_output() {
        let a = Tensor::zeros(2, 0);
        let b = Tensor::zeros(0, 2);
        let mut c = Tensor::filled(2, 2, 3.0);
        gemm(MatRef::normal(&a), MatRef::normal(&b), 0.5, MatMut::whole(&mut c));
        assert_eq!(c, Tensor::filled(2, 2, 1.5));
    }
}
