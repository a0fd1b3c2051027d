//! Four-direction 2-D ⇄ 1-D traversals and sequence-level fusion.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    RowMajor,
    RowMajorReverse,
    ColMajor,
    ColMajorReverse,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::RowMajor,
        ScanDirection::RowMajorReverse,
        ScanDirection::ColMajor,
        ScanDirection::ColMajorReverse,
    ];

    /// Sequence position of grid cell `(row, col)` on an `h x w` grid.
    pub fn position(self, row: usize, col: usize, h: usize, w: usize) -> usize {
        let last = h * w - 1;
        match self {
            ScanDirection::RowMajor => row * w + col,
            ScanDirection::RowMajorReverse => last - (row * w + col),
            ScanDirection::ColMajor => col * h + row,
            ScanDirection::ColMajorReverse => last - (col * h + row),
        }
    }

    /// Grid cell `(row, col)` visited at sequence position `t`.
    pub fn cell(self, t: usize, h: usize, w: usize) -> (usize, usize) {
        let last = h * w - 1;
        match self {
            ScanDirection::RowMajor => (t / w, t % w),
            ScanDirection::RowMajorReverse => ((last - t) / w, (last - t) % w),
            ScanDirection::ColMajor => (t % h, t / h),
            ScanDirection::ColMajorReverse => ((last - t) % h, (last - t) / h),
        }
    }

    /// `order[t]` = row-major index of the cell visited at step `t`.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        (0..h * w)
            .map(|t| {
                let (r, c) = self.cell(t, h, w);
                r * w + c
            })
            .collect()
    }
}

/// `[C,H,W]` map to the `[H*W, C]` token sequence visited in direction `dir`.
pub fn flatten(fm: &Tensor, dir: ScanDirection) -> Result<Tensor> {
    fm.expect_ndim(3, "flatten")?;
    let (c, h, w) = (fm.dim(0), fm.dim(1), fm.dim(2));
    let hw = h * w;
    let mut out = vec![0.0; hw * c];
    for (t, cell) in dir.order(h, w).into_iter().enumerate() {
        for ch in 0..c {
            out[t * c + ch] = fm.data()[ch * hw + cell];
        }
    }
    Tensor::new(&[hw, c], out)
}

/// Inverse of [`flatten`] for the same direction and grid.
pub fn unflatten(seq: &Tensor, dir: ScanDirection, h: usize, w: usize) -> Result<Tensor> {
    seq.expect_ndim(2, "unflatten")?;
    let hw = h * w;
    if seq.dim(0) != hw {
        return Err(Error::dim(
            "unflatten",
            format!("sequence {:?} cannot fill a {h}x{w} grid", seq.shape()),
        ));
    }
    let c = seq.dim(1);
    let mut out = vec![0.0; c * hw];
    for (t, cell) in dir.order(h, w).into_iter().enumerate() {
        for ch in 0..c {
            out[ch * hw + cell] = seq.data()[t * c + ch];
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Patch-level fusion of two modality sequences by element-wise addition.
pub fn fuse_sequences(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_ndim(2, "fuse_sequences")?;
    a.zip_map(b, "fuse_sequences", |x, y| x + y)
}
