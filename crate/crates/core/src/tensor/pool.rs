use super::Tensor;
use crate::error::{Error, Result};

/// Stride-1 max pooling with `k x k` window and `(k-1)/2` implicit `-inf` padding.
///
/// Returns the pooled map and, for each output cell, the flat index of the
/// winning input cell (first maximum in scan order on ties).
pub fn max_pool2d(input: &Tensor, k: usize) -> Result<(Tensor, Vec<usize>)> {
    input.expect_ndim(3, "max_pool2d")?;
    if k % 2 == 0 {
        return Err(Error::dim("max_pool2d", format!("window {k} must be odd")));
    }
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let r = (k / 2) as isize;
    let x = input.data();
    let mut out = vec![0.0; c * h * w];
    let mut arg = vec![0usize; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for di in -r..=r {
                    let y = i + di;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for dj in -r..=r {
                        let xx = j + dj;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let idx = base + (y as usize) * w + xx as usize;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = base + i as usize * w + j as usize;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    Ok((Tensor::new(input.shape(), out)?, arg))
}

pub fn max_pool2d_backward(argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(grad_out.shape());
    let g = gx.data_mut();
    for (o, &src) in argmax.iter().enumerate() {
        g[src] += grad_out.data()[o];
    }
    gx
}

/// Nearest-neighbour 2x upsampling of a `[C,H,W]` map.
pub fn upsample_nearest2x(input: &Tensor) -> Result<Tensor> {
    input.expect_ndim(3, "upsample_nearest2x")?;
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                out[(ch * h2 + i) * w2 + j] = input.data()[(ch * h + i / 2) * w + j / 2];
            }
        }
    }
    Tensor::new(&[c, h2, w2], out)
}

pub fn upsample_nearest2x_backward(grad_out: &Tensor) -> Result<Tensor> {
    grad_out.expect_ndim(3, "upsample_nearest2x_backward")?;
    let (c, h2, w2) = (grad_out.dim(0), grad_out.dim(1), grad_out.dim(2));
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::dim("upsample_nearest2x_backward", format!("odd grid {:?}", grad_out.shape())));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h2 {
            for j in 0..w2 {
                gx[(ch * h + i / 2) * w + j / 2] += grad_out.data()[(ch * h2 + i) * w2 + j];
            }
        }
    }
    Tensor::new(&[c, h, w], gx)
}

/// Stacks `[C_i,H,W]` maps along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::dim("concat_channels", "nothing to concatenate"))?;
    first.expect_ndim(3, "concat_channels")?;
    let (h, w) = (first.dim(1), first.dim(2));
    let mut c = 0;
    let mut data = Vec::new();
    for p in parts {
        p.expect_ndim(3, "concat_channels")?;
        if p.dim(1) != h || p.dim(2) != w {
            return Err(Error::dim(
                "concat_channels",
                format!("grid {:?} differs from {:?}", p.shape(), first.shape()),
            ));
        }
        c += p.dim(0);
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[c, h, w], data)
}

/// Inverse of [`concat_channels`] given the channel count of each part.
pub fn split_channels(input: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    input.expect_ndim(3, "split_channels")?;
    let (h, w) = (input.dim(1), input.dim(2));
    if sizes.iter().sum::<usize>() != input.dim(0) {
        return Err(Error::dim(
            "split_channels",
            format!("sizes {sizes:?} do not cover {:?}", input.shape()),
        ));
    }
    let mut out = Vec::with_capacity(sizes.len());
    let mut off = 0;
    for &s in sizes {
        out.push(Tensor::new(&[s, h, w], input.data()[off * h * w..(off + s) * h * w].to_vec())?);
        off += s;
    }
    Ok(out)
}
