use super::gemm::{gemm_into, MatView};
use super::Tensor;
use crate::error::{Error, Result};

fn check(input: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    weight.expect_ndim(2, "linear")?;
    let d_in = weight.dim(0);
    if input.last_dim() != d_in {
        return Err(Error::dim(
            "linear",
            format!(
                "input {:?} ends in {} but weight {:?} expects {d_in}",
                input.shape(),
                input.last_dim(),
                weight.shape()
            ),
        ));
    }
    Ok((input.rows(), d_in, weight.dim(1)))
}

/// Affine map along the last axis: `x W + b` with `W: [D_in, D_out]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, d_in, d_out) = check(input, weight)?;
    bias.expect_shape(&[d_out], "linear", "bias")?;
    let mut out = Vec::with_capacity(rows * d_out);
    for _ in 0..rows {
        out.extend_from_slice(bias.data());
    }
    gemm_into(
        MatView::row_major(input.data(), rows, d_in),
        MatView::row_major(weight.data(), d_in, d_out),
        1.0,
        &mut out,
    );
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    Tensor::new(&shape, out)
}

/// Gradients of [`linear`]: `(d_input, d_weight, d_bias)`.
pub fn linear_backward(input: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (rows, d_in, d_out) = check(input, weight)?;
    if grad_out.last_dim() != d_out || grad_out.rows() != rows {
        return Err(Error::dim(
            "linear_backward",
            format!("grad_out {:?} does not match output of {:?}", grad_out.shape(), input.shape()),
        ));
    }
    let x = MatView::row_major(input.data(), rows, d_in);
    let gy = MatView::row_major(grad_out.data(), rows, d_out);
    let mut gx = vec![0.0; rows * d_in];
    gemm_into(gy, MatView::row_major(weight.data(), d_in, d_out).t(), 0.0, &mut gx);
    let mut gw = vec![0.0; d_in * d_out];
    gemm_into(x.t(), gy, 0.0, &mut gw);
    let mut gb = vec![0.0; d_out];
    for row in grad_out.data().chunks_exact(d_out) {
        for (b, g) in gb.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok((
        Tensor::new(input.shape(), gx)?,
        Tensor::new(weight.shape(), gw)?,
        Tensor::new(&[d_out], gb)?,
    ))
}
