use super::Tensor;
use crate::error::{Error, Result};

/// Strided read-only view of an `m x n` matrix inside a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatView<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_index(&self) -> usize {
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `out = a * b + beta * out`, with `out` row-major `a.rows x b.cols`.
///
/// Single-threaded; the summation order depends only on the shapes, so the
/// result is reproducible bit for bit.
pub(crate) fn gemm_into(a: MatView<'_>, b: MatView<'_>, beta: f64, out: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.max_index() < a.data.len(), "gemm lhs view out of bounds");
    assert!(b.max_index() < b.data.len(), "gemm rhs view out of bounds");
    // SAFETY: all strided accesses were bounds-checked above and `out` is a
    // distinct, exclusively borrowed m*n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain 2-D matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_ndim(2, "matmul")?;
    b.expect_ndim(2, "matmul")?;
    if a.dim(1) != b.dim(0) {
        return Err(Error::dim(
            "matmul",
            format!("lhs {:?} and rhs {:?} do not chain", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = vec![0.0; m * n];
    gemm_into(
        MatView::row_major(a.data(), m, k),
        MatView::row_major(b.data(), k, n),
        0.0,
        &mut out,
    );
    Tensor::new(&[m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_triple_loop_with_transposed_views() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect(); // 3x4
        let b: Vec<f64> = (0..20).map(|i| (i as f64 * 0.11).cos()).collect(); // 5x4
        let mut out = vec![0.0; 15];
        // a (3x4) * b^T (4x5)
        gemm_into(
            MatView::row_major(&a, 3, 4),
            MatView::row_major(&b, 5, 4).t(),
            0.0,
            &mut out,
        );
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|p| a[i * 4 + p] * b[j * 4 + p]).sum();
                assert!((out[i * 5 + j] - want).abs() < 1e-14);
            }
        }
    }
}
