//! Selective state-space (S6) sequence transform.
//!
//! For a token sequence `x: [L, D]` the step parameters are computed from the
//! token itself:
//!
//! ```text
//! delta_t = softplus(x_t W_delta + delta_bias)            [D]
//! B_t     = x_t W_B,   C_t = x_t W_C                     [N]
//! h_t     = exp(delta_t * A) . h_{t-1} + (delta_t * x_t) B_t^T   [D, N]
//! y_t     = h_t C_t + d_skip * x_t                       [D]
//! ```
//!
//! `A = -exp(log_a)` keeps every continuous-time pole strictly negative.
//! Discretization is zero-order hold for `A` and the Euler rule for `B`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::impl_parameters;
use crate::tensor::{linear, linear_backward, sigmoid_scalar, softplus, Tensor};

/// Default state size.
pub const DEFAULT_STATE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct S6Params {
    /// `[D, N]`, continuous `A = -exp(log_a)`.
    pub log_a: Tensor,
    /// `[D, N]`
    pub w_b: Tensor,
    /// `[D, N]`
    pub w_c: Tensor,
    /// `[D, D]`
    pub w_delta: Tensor,
    /// `[D]`
    pub delta_bias: Tensor,
    /// `[D]`
    pub d_skip: Tensor,
}

impl_parameters!(S6Params { log_a, w_b, w_c, w_delta, delta_bias, d_skip });

impl S6Params {
    /// Real S4D-style init: `A[d, n] = -(n + 1)`, step sizes log-uniform in
    /// `[1e-3, 0.1]`, input projections uniform in `±1/sqrt(D)`.
    pub fn init(d: usize, n: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let uniform = |rng: &mut dyn rand::RngCore, shape: &[usize], b: f64| {
            Tensor::from_fn(shape, |_| rng.gen_range(-b..b))
        };
        let log_a = Tensor::from_fn(&[d, n], |i| ((i % n) as f64 + 1.0).ln());
        let w_b = uniform(rng, &[d, n], bound);
        let w_c = uniform(rng, &[d, n], bound);
        let w_delta = uniform(rng, &[d, d], 0.1 * bound);
        let (lo, hi) = (1e-3f64.ln(), 0.1f64.ln());
        let delta_bias = Tensor::from_fn(&[d], |_| {
            let dt: f64 = rng.gen_range(lo..hi).exp();
            // inverse softplus
            dt + (-(-dt).exp_m1()).ln()
        });
        Self {
            log_a,
            w_b,
            w_c,
            w_delta,
            delta_bias,
            d_skip: Tensor::ones(&[d]),
        }
    }

    pub fn channels(&self) -> usize {
        self.log_a.dim(0)
    }

    pub fn state_size(&self) -> usize {
        self.log_a.dim(1)
    }

    /// Makes the block output identically zero (`C_t = 0`, no feedthrough).
    pub fn silence(&mut self) {
        self.w_c.fill(0.0);
        self.d_skip.fill(0.0);
    }

    pub fn a(&self) -> Tensor {
        self.log_a.map(|v| -v.exp())
    }

    pub fn validate(&self) -> Result<()> {
        let (d, n) = (self.channels(), self.state_size());
        let shapes: [(&Tensor, &[usize], &str); 6] = [
            (&self.log_a, &[d, n], "log_a"),
            (&self.w_b, &[d, n], "w_b"),
            (&self.w_c, &[d, n], "w_c"),
            (&self.w_delta, &[d, d], "w_delta"),
            (&self.delta_bias, &[d], "delta_bias"),
            (&self.d_skip, &[d], "d_skip"),
        ];
        for (t, shape, name) in shapes {
            t.expect_shape(shape, "s6", name)?;
            if !t.all_finite() {
                return Err(Error::Validation(format!("S6 parameter `{name}` has non-finite entries")));
            }
        }
        if !self.a().all_finite() || self.a().data().iter().any(|&v| v >= 0.0) {
            return Err(Error::Validation("S6 state matrix must be finite and strictly negative".into()));
        }
        Ok(())
    }
}

/// Per-token quantities shared by both forward paths and the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct Projections {
    /// pre-softplus step, `[L, D]`
    pub z: Tensor,
    pub delta: Tensor,
    /// `[L, N]`
    pub b: Tensor,
    pub c: Tensor,
    /// continuous `A`, `[D, N]`
    pub a: Tensor,
}

fn project(x: &Tensor, p: &S6Params) -> Result<Projections> {
    p.validate()?;
    x.expect_ndim(2, "s6")?;
    if x.dim(1) != p.channels() {
        return Err(Error::dim(
            "s6",
            format!("input {:?} does not have {} channels", x.shape(), p.channels()),
        ));
    }
    let n = p.state_size();
    let z = linear(x, &p.w_delta, &p.delta_bias)?;
    let delta = z.map(softplus);
    let zeros = Tensor::zeros(&[n]);
    let b = linear(x, &p.w_b, &zeros)?;
    let c = linear(x, &p.w_c, &zeros)?;
    Ok(Projections { z, delta, b, c, a: p.a() })
}

/// `y_t = h_t C_t + d_skip * x_t` for all `t`, given all states `[L, D*N]`.
fn readout(x: &Tensor, pr: &Projections, states: &[f64], d_skip: &Tensor) -> Tensor {
    let (l, d) = (x.dim(0), x.dim(1));
    let n = pr.a.dim(1);
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        let ct = &pr.c.data()[t * n..(t + 1) * n];
        let h = &states[t * d * n..(t + 1) * d * n];
        for ch in 0..d {
            let hrow = &h[ch * n..(ch + 1) * n];
            let acc: f64 = hrow.iter().zip(ct).map(|(a, b)| a * b).sum();
            y[t * d + ch] = acc + d_skip.data()[ch] * x.data()[t * d + ch];
        }
    }
    Tensor::new(&[l, d], y).expect("readout shape")
}

/// Transition factor and input term of step `t`, written into `a_out`/`b_out` (`[D*N]`).
fn step_terms(x: &Tensor, pr: &Projections, t: usize, a_out: &mut [f64], b_out: &mut [f64]) {
    let d = x.dim(1);
    let n = pr.a.dim(1);
    let bt = &pr.b.data()[t * n..(t + 1) * n];
    for ch in 0..d {
        let dt = pr.delta.data()[t * d + ch];
        let u = dt * x.data()[t * d + ch];
        let arow = &pr.a.data()[ch * n..(ch + 1) * n];
        for s in 0..n {
            a_out[ch * n + s] = (dt * arow[s]).exp();
            b_out[ch * n + s] = u * bt[s];
        }
    }
}

/// All hidden states by running the recurrence one step at a time.
fn states_sequential(x: &Tensor, pr: &Projections) -> Vec<f64> {
    let (l, d) = (x.dim(0), x.dim(1));
    let dn = d * pr.a.dim(1);
    let mut states = vec![0.0; l * dn];
    let mut a = vec![0.0; dn];
    let mut b = vec![0.0; dn];
    for t in 0..l {
        step_terms(x, pr, t, &mut a, &mut b);
        let (prev, cur) = states.split_at_mut(t * dn);
        let cur = &mut cur[..dn];
        if t == 0 {
            cur.copy_from_slice(&b);
        } else {
            let hp = &prev[(t - 1) * dn..];
            for j in 0..dn {
                cur[j] = a[j] * hp[j] + b[j];
            }
        }
    }
    states
}

/// Composes element `i` with its left neighbour `i - stride`:
/// `(a_l, b_l) then (a_r, b_r)  =  (a_l a_r, a_r b_l + b_r)`.
fn compose(a: &mut [f64], b: &mut [f64], dn: usize, left: usize, right: usize) {
    let (al, ar) = a.split_at_mut(right * dn);
    let (bl, br) = b.split_at_mut(right * dn);
    let al = &al[left * dn..(left + 1) * dn];
    let bl = &bl[left * dn..(left + 1) * dn];
    let ar = &mut ar[..dn];
    let br = &mut br[..dn];
    for j in 0..dn {
        br[j] += ar[j] * bl[j];
        ar[j] *= al[j];
    }
}

/// All hidden states by a work-efficient (Blelloch) inclusive scan over the
/// affine step maps. Starting from `h_0 = 0`, the prefix's offset is the state.
fn states_scan(x: &Tensor, pr: &Projections) -> Vec<f64> {
    let (l, d) = (x.dim(0), x.dim(1));
    let dn = d * pr.a.dim(1);
    let mut a = vec![0.0; l * dn];
    let mut b = vec![0.0; l * dn];
    for t in 0..l {
        let (at, bt) = (&mut a[t * dn..(t + 1) * dn], &mut b[t * dn..(t + 1) * dn]);
        step_terms(x, pr, t, at, bt);
    }
    let mut stride = 1;
    while stride < l {
        let mut i = 2 * stride - 1;
        while i < l {
            compose(&mut a, &mut b, dn, i - stride, i);
            i += 2 * stride;
        }
        stride *= 2;
    }
    stride /= 2;
    while stride >= 1 {
        let mut i = 3 * stride - 1;
        while i < l {
            compose(&mut a, &mut b, dn, i - stride, i);
            i += 2 * stride;
        }
        stride /= 2;
    }
    b
}

/// Reference forward: the recurrence evaluated step by step.
pub fn s6_forward_sequential(x: &Tensor, params: &S6Params) -> Result<Tensor> {
    let pr = project(x, params)?;
    let states = states_sequential(x, &pr);
    Ok(readout(x, &pr, &states, &params.d_skip))
}

/// Same result as [`s6_forward_sequential`], computed with an associative scan.
pub fn s6_forward_scan(x: &Tensor, params: &S6Params) -> Result<Tensor> {
    Ok(s6_forward_cached(x, params)?.0)
}

/// Forward intermediates needed by the backward sweep.
#[derive(Clone, Debug)]
pub struct S6Cache {
    pub(crate) proj: Projections,
    /// `[L, D*N]`
    pub(crate) states: Vec<f64>,
}

pub(crate) fn s6_forward_cached(x: &Tensor, params: &S6Params) -> Result<(Tensor, S6Cache)> {
    let proj = project(x, params)?;
    let states = states_scan(x, &proj);
    let y = readout(x, &proj, &states, &params.d_skip);
    Ok((y, S6Cache { proj, states }))
}

/// Gradients of `sum(grad_out * y)` w.r.t. the input and every parameter.
pub fn s6_backward(x: &Tensor, params: &S6Params, grad_out: &Tensor) -> Result<(Tensor, S6Params)> {
    let (_, cache) = s6_forward_cached(x, params)?;
    s6_backward_cached(x, params, &cache, grad_out)
}

/// Reverse sweep of the recurrence (adjoint method).
pub(crate) fn s6_backward_cached(
    x: &Tensor,
    params: &S6Params,
    cache: &S6Cache,
    grad_out: &Tensor,
) -> Result<(Tensor, S6Params)> {
    grad_out.expect_shape(x.shape(), "s6_backward", "grad_out")?;
    let (l, d) = (x.dim(0), x.dim(1));
    let n = params.state_size();
    let dn = d * n;
    let pr = &cache.proj;
    let (xs, gy) = (x.data(), grad_out.data());

    let mut gx = vec![0.0; l * d];
    let mut g_delta = vec![0.0; l * d];
    let mut g_b = vec![0.0; l * n];
    let mut g_c = vec![0.0; l * n];
    let mut g_a = vec![0.0; dn];
    let mut g_dskip = vec![0.0; d];
    let mut lambda = vec![0.0; dn];

    for t in (0..l).rev() {
        let h = &cache.states[t * dn..(t + 1) * dn];
        let ct = &pr.c.data()[t * n..(t + 1) * n];
        let bt = &pr.b.data()[t * n..(t + 1) * n];
        for ch in 0..d {
            let g = gy[t * d + ch];
            g_dskip[ch] += g * xs[t * d + ch];
            gx[t * d + ch] += g * params.d_skip.data()[ch];
            for s in 0..n {
                lambda[ch * n + s] += g * ct[s];
                g_c[t * n + s] += g * h[ch * n + s];
            }
        }
        for ch in 0..d {
            let dt = pr.delta.data()[t * d + ch];
            let xv = xs[t * d + ch];
            let arow = &pr.a.data()[ch * n..(ch + 1) * n];
            let mut gd = 0.0;
            let mut gxv = 0.0;
            for s in 0..n {
                let j = ch * n + s;
                let lam = lambda[j];
                let abar = (dt * arow[s]).exp();
                let hprev = if t > 0 { cache.states[(t - 1) * dn + j] } else { 0.0 };
                let g_abar = lam * hprev * abar;
                gd += g_abar * arow[s] + lam * bt[s] * xv;
                g_a[j] += g_abar * dt;
                g_b[t * n + s] += lam * dt * xv;
                gxv += lam * dt * bt[s];
                lambda[j] = lam * abar;
            }
            g_delta[t * d + ch] = gd;
            gx[t * d + ch] += gxv;
        }
    }

    let g_z = Tensor::new(
        &[l, d],
        g_delta
            .iter()
            .zip(pr.z.data())
            .map(|(g, z)| g * sigmoid_scalar(*z))
            .collect(),
    )?;
    let mut gx = Tensor::new(&[l, d], gx)?;
    let (gx_delta, g_wdelta, g_dbias) = linear_backward(x, &params.w_delta, &g_z)?;
    let (gx_b, g_wb, _) = linear_backward(x, &params.w_b, &Tensor::new(&[l, n], g_b)?)?;
    let (gx_c, g_wc, _) = linear_backward(x, &params.w_c, &Tensor::new(&[l, n], g_c)?)?;
    gx.add_assign(&gx_delta)?;
    gx.add_assign(&gx_b)?;
    gx.add_assign(&gx_c)?;

    let g_log_a = Tensor::new(
        &[d, n],
        g_a.iter().zip(pr.a.data()).map(|(g, a)| g * a).collect(),
    )?;
    Ok((
        gx,
        S6Params {
            log_a: g_log_a,
            w_b: g_wb,
            w_c: g_wc,
            w_delta: g_wdelta,
            delta_bias: g_dbias,
            d_skip: Tensor::new(&[d], g_dskip)?,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(l: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(&[l, d], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = S6Params::init(4, 8, &mut rng);
        let x = Tensor::zeros(&[10, 4]);
        assert_eq!(s6_forward_sequential(&x, &p).unwrap(), x);
        assert_eq!(s6_forward_scan(&x, &p).unwrap(), x);
    }

    #[test]
    fn scan_matches_sequential_on_awkward_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for l in [1, 2, 3, 5, 7, 8, 13, 33] {
            let p = S6Params::init(3, 4, &mut rng);
            let x = random_input(l, 3, &mut rng);
            let a = s6_forward_sequential(&x, &p).unwrap();
            let b = s6_forward_scan(&x, &p).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12, "L = {l}");
        }
    }

    #[test]
    fn rejects_non_finite_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = S6Params::init(2, 2, &mut rng);
        p.w_b.data_mut()[0] = f64::NAN;
        let x = Tensor::zeros(&[3, 2]);
        assert!(matches!(s6_forward_sequential(&x, &p), Err(Error::Validation(_))));
        assert!(matches!(s6_forward_scan(&x, &p), Err(Error::Validation(_))));
    }

    #[test]
    fn init_step_sizes_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = S6Params::init(64, 8, &mut rng);
        for &b in p.delta_bias.data() {
            let dt = softplus(b);
            assert!((1e-3 - 1e-12..=0.1 + 1e-12).contains(&dt), "{dt}");
        }
        for (i, a) in p.a().data()[..8].iter().enumerate() {
            assert!((a + (i as f64 + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn silenced_block_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = S6Params::init(3, 4, &mut rng);
        p.silence();
        let x = random_input(9, 3, &mut rng);
        assert_eq!(s6_forward_scan(&x, &p).unwrap().max_abs(), 0.0);
    }
}
