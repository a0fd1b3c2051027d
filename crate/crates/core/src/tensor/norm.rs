use super::Tensor;
use crate::error::Result;

/// Default variance floor for [`layer_norm`].
pub const LN_EPS: f64 = 1e-5;

fn check(input: &Tensor, gamma: &Tensor, beta: Option<&Tensor>) -> Result<usize> {
    let d = input.last_dim();
    gamma.expect_shape(&[d], "layer_norm", "gamma")?;
    if let Some(beta) = beta {
        beta.expect_shape(&[d], "layer_norm", "beta")?;
    }
    Ok(d)
}

/// Mean and reciprocal standard deviation (population variance) of one slice.
fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Normalizes every slice along the last axis, then applies `gamma`/`beta`.
pub fn layer_norm(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let d = check(input, gamma, Some(beta))?;
    let mut out = Vec::with_capacity(input.len());
    for row in input.data().chunks_exact(d) {
        let (mean, rstd) = moments(row, eps);
        for ((v, g), b) in row.iter().zip(gamma.data()).zip(beta.data()) {
            out.push((v - mean) * rstd * g + b);
        }
    }
    Tensor::new(input.shape(), out)
}

/// Gradients of [`layer_norm`]: `(d_input, d_gamma, d_beta)`.
pub fn layer_norm_backward(
    input: &Tensor,
    gamma: &Tensor,
    eps: f64,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = check(input, gamma, None)?;
    grad_out.expect_shape(input.shape(), "layer_norm_backward", "grad_out")?;
    let mut gx = Vec::with_capacity(input.len());
    let mut gg = vec![0.0; d];
    let mut gb = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut gxhat = vec![0.0; d];
    for (row, gy) in input.data().chunks_exact(d).zip(grad_out.data().chunks_exact(d)) {
        let (mean, rstd) = moments(row, eps);
        for j in 0..d {
            xhat[j] = (row[j] - mean) * rstd;
            gxhat[j] = gy[j] * gamma.data()[j];
            gg[j] += gy[j] * xhat[j];
            gb[j] += gy[j];
        }
        let m1 = gxhat.iter().sum::<f64>() / d as f64;
        let m2 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            gx.push(rstd * (gxhat[j] - m1 - xhat[j] * m2));
        }
    }
    Ok((
        Tensor::new(input.shape(), gx)?,
        Tensor::new(&[d], gg)?,
        Tensor::new(&[d], gb)?,
    ))
}
