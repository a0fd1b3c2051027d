use super::gemm::{gemm_into, MatView};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn geometry(input: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<ConvGeom> {
    input.expect_ndim(3, "conv2d")?;
    weight.expect_ndim(4, "conv2d")?;
    let (c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (kh, kw) = (weight.dim(2), weight.dim(3));
    if weight.dim(1) != c_in {
        return Err(Error::dim(
            "conv2d",
            format!(
                "input {:?} has {c_in} channels but weight {:?} expects {}",
                input.shape(),
                weight.shape(),
                weight.dim(1)
            ),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::dim("conv2d", format!("kernel {kh}x{kw} must have odd sides")));
    }
    if stride == 0 {
        return Err(Error::dim("conv2d", "stride must be at least 1"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::dim(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {:?}", input.shape()),
        ));
    }
    Ok(ConvGeom {
        c_in,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
        out_h: (h + 2 * padding - kh) / stride + 1,
        out_w: (w + 2 * padding - kw) / stride + 1,
    })
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.out_len();
    let mut cols = vec![0.0; g.patch_len() * p];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.out_len();
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D cross-correlation of a `[C_in,H,W]` map with `[C_out,C_in,kH,kW]` weights.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = geometry(input, weight, stride, padding)?;
    let c_out = weight.dim(0);
    bias.expect_shape(&[c_out], "conv2d", "bias")?;
    let p = g.out_len();
    let mut out = vec![0.0; c_out * p];
    for (o, row) in out.chunks_exact_mut(p).enumerate() {
        row.fill(bias.data()[o]);
    }
    let w = MatView::row_major(weight.data(), c_out, g.patch_len());
    if g.is_pointwise() {
        gemm_into(w, MatView::row_major(input.data(), g.c_in, p), 1.0, &mut out);
    } else {
        let cols = im2col(input.data(), &g);
        gemm_into(w, MatView::row_major(&cols, g.patch_len(), p), 1.0, &mut out);
    }
    Tensor::new(&[c_out, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d`]: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = geometry(input, weight, stride, padding)?;
    let c_out = weight.dim(0);
    grad_out.expect_shape(&[c_out, g.out_h, g.out_w], "conv2d_backward", "grad_out")?;
    let p = g.out_len();
    let k = g.patch_len();
    let gy = MatView::row_major(grad_out.data(), c_out, p);

    let gb: Vec<f64> = grad_out.data().chunks_exact(p).map(|r| r.iter().sum()).collect();

    let mut gw = vec![0.0; c_out * k];
    let mut gcols = vec![0.0; k * p];
    let w = MatView::row_major(weight.data(), c_out, k);
    if g.is_pointwise() {
        gemm_into(gy, MatView::row_major(input.data(), k, p).t(), 0.0, &mut gw);
        gemm_into(w.t(), gy, 0.0, &mut gcols);
        return Ok((
            Tensor::new(input.shape(), gcols)?,
            Tensor::new(weight.shape(), gw)?,
            Tensor::new(&[c_out], gb)?,
        ));
    }
    let cols = im2col(input.data(), &g);
    gemm_into(gy, MatView::row_major(&cols, k, p).t(), 0.0, &mut gw);
    gemm_into(w.t(), gy, 0.0, &mut gcols);
    let gx = col2im(&gcols, &g);
    Ok((
        Tensor::new(input.shape(), gx)?,
        Tensor::new(weight.shape(), gw)?,
        Tensor::new(&[c_out], gb)?,
    ))
}

fn depthwise_check(input: &Tensor, weight: &Tensor, bias: &Tensor, padding: usize) -> Result<(usize, usize, usize, usize)> {
    input.expect_ndim(3, "depthwise_conv2d")?;
    weight.expect_ndim(3, "depthwise_conv2d")?;
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    if weight.dim(0) != c || bias.shape() != [c] {
        return Err(Error::dim(
            "depthwise_conv2d",
            format!(
                "input {:?}, weight {:?} and bias {:?} disagree on channel count",
                input.shape(),
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    let k = weight.dim(1);
    if weight.dim(2) != k || k % 2 == 0 || padding != (k - 1) / 2 {
        return Err(Error::dim(
            "depthwise_conv2d",
            format!("kernel {:?} with padding {padding} does not preserve spatial size", weight.shape()),
        ));
    }
    Ok((c, h, w, k))
}

/// Per-channel "same" convolution: weight `[C,k,k]`, padding `(k-1)/2`.
pub fn depthwise_conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, padding: usize) -> Result<Tensor> {
    let (c, h, w, k) = depthwise_check(input, weight, bias, padding)?;
    let pad = padding as isize;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let x = &input.data()[ch * h * w..(ch + 1) * h * w];
        let ker = &weight.data()[ch * k * k..(ch + 1) * k * k];
        let y = &mut out[ch * h * w..(ch + 1) * h * w];
        y.fill(bias.data()[ch]);
        for ki in 0..k {
            for kj in 0..k {
                let wv = ker[ki * k + kj];
                let dy = ki as isize - pad;
                let dx = kj as isize - pad;
                for i in 0..h as isize {
                    let iy = i + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for j in 0..w as isize {
                        let ix = j + dx;
                        if ix >= 0 && ix < w as isize {
                            y[(i * w as isize + j) as usize] += wv * x[(iy * w as isize + ix) as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Gradients of [`depthwise_conv2d`]: `(d_input, d_weight, d_bias)`.
pub fn depthwise_conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let bias_shape = Tensor::zeros(&[weight.dim(0)]);
    let (c, h, w, k) = depthwise_check(input, weight, &bias_shape, padding)?;
    grad_out.expect_shape(input.shape(), "depthwise_conv2d_backward", "grad_out")?;
    let pad = padding as isize;
    let mut gx = vec![0.0; c * h * w];
    let mut gw = vec![0.0; c * k * k];
    let mut gb = vec![0.0; c];
    for ch in 0..c {
        let x = &input.data()[ch * h * w..(ch + 1) * h * w];
        let gy = &grad_out.data()[ch * h * w..(ch + 1) * h * w];
        let ker = &weight.data()[ch * k * k..(ch + 1) * k * k];
        let gxc = &mut gx[ch * h * w..(ch + 1) * h * w];
        gb[ch] = gy.iter().sum();
        for ki in 0..k {
            for kj in 0..k {
                let wv = ker[ki * k + kj];
                let dy = ki as isize - pad;
                let dx = kj as isize - pad;
                let mut acc = 0.0;
                for i in 0..h as isize {
                    let iy = i + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for j in 0..w as isize {
                        let ix = j + dx;
                        if ix >= 0 && ix < w as isize {
                            let o = (i * w as isize + j) as usize;
                            let s = (iy * w as isize + ix) as usize;
                            acc += gy[o] * x[s];
                            gxc[s] += wv * gy[o];
                        }
                    }
                }
                gw[ch * k * k + ki * k + kj] = acc;
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), gx)?,
        Tensor::new(weight.shape(), gw)?,
        Tensor::new(&[c], gb)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_weight_scales_input() {
        let x = Tensor::ones(&[1, 3, 3]);
        let w = Tensor::full(&[1, 1, 1, 1], 2.0);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y, Tensor::full(&[1, 3, 3], 2.0));
    }

    #[test]
    fn identity_center_kernel_with_padding() {
        let x = Tensor::new(&[1, 1, 1], vec![5.0]).unwrap();
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap();
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let msg = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap_err().to_string();
        assert!(msg.contains("[2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn strided_output_size() {
        let x = Tensor::zeros(&[3, 64, 64]);
        let w = Tensor::zeros(&[16, 3, 3, 3]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[16]), 2, 1).unwrap();
        assert_eq!(y.shape(), &[16, 32, 32]);
    }

    #[test]
    fn depthwise_identity_and_zero_channel() {
        let x = Tensor::from_fn(&[2, 4, 5], |i| (i as f64).sin());
        let mut w = Tensor::zeros(&[2, 3, 3]);
        w.data_mut()[4] = 1.0;
        w.data_mut()[9 + 4] = 1.0;
        let y = depthwise_conv2d(&x, &w, &Tensor::zeros(&[2]), 1).unwrap();
        assert_eq!(y, x);

        let mut x0 = x.clone();
        x0.data_mut()[..20].fill(0.0);
        let w = Tensor::from_fn(&[2, 3, 3], |i| i as f64 * 0.1);
        let b = Tensor::new(&[2], vec![0.7, -0.2]).unwrap();
        let y = depthwise_conv2d(&x0, &w, &b, 1).unwrap();
        assert!(y.data()[..20].iter().all(|&v| v == 0.7));
    }

    #[test]
    fn depthwise_rejects_bad_padding_and_channels() {
        let x = Tensor::zeros(&[2, 4, 4]);
        assert!(depthwise_conv2d(&x, &Tensor::zeros(&[2, 3, 3]), &Tensor::zeros(&[2]), 0).is_err());
        assert!(depthwise_conv2d(&x, &Tensor::zeros(&[3, 3, 3]), &Tensor::zeros(&[3]), 1).is_err());
    }
}
