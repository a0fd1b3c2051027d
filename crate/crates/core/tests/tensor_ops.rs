use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use remotedet::tensor::*;
use remotedet::Error;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Six nested loops over output channel, rows, cols, input channel and kernel.
fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let (co, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[co, oh, ow]);
    for o in 0..co {
        for r in 0..oh {
            for c in 0..ow {
                let mut acc = b.data()[o];
                for i in 0..ci {
                    for u in 0..kh {
                        for v in 0..kw {
                            let y = (r * stride + u) as isize - pad as isize;
                            let xx = (c * stride + v) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                acc += x.data()[(i * h + y as usize) * wd + xx as usize]
                                    * w.data()[((o * ci + i) * kh + u) * kw + v];
                            }
                        }
                    }
                }
                out.data_mut()[(o * oh + r) * ow + c] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_scalar_kernel_scales() {
    let x = Tensor::ones(&[1, 3, 3]);
    let y = conv2d(&x, &Tensor::full(&[1, 1, 1, 1], 2.0), &Tensor::zeros(&[1]), 1, 0).unwrap();
    assert_eq!(y, Tensor::full(&[1, 3, 3], 2.0));
}

#[test]
fn conv_identity_center_kernel() {
    let x = Tensor::full(&[1, 1, 1], 5.0);
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let y = conv2d(&x, &k, &Tensor::zeros(&[1]), 1, 1).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1]);
    assert_eq!(y.data(), &[5.0]);
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_t(&mut rng, &[2, 5, 5]);
    let w = rand_t(&mut rng, &[3, 2, 3, 3]);
    let b = rand_t(&mut rng, &[3]);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let y = conv2d(&x, &w, &b, stride, pad).unwrap();
        let r = naive_conv(&x, &w, &b, stride, pad);
        assert_eq!(y.shape(), r.shape());
        assert!(y.max_abs_diff(&r).unwrap() < 1e-12);
    }
}

#[test]
fn conv_channel_mismatch_names_shapes() {
    let err = conv2d(&Tensor::zeros(&[2, 4, 4]), &Tensor::zeros(&[1, 3, 3, 3]), &Tensor::zeros(&[1]), 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension { .. }));
    assert!(msg.contains("[2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
}

#[test]
fn conv_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_t(&mut rng, &[2, 5, 4]);
    let w = rand_t(&mut rng, &[3, 2, 3, 3]);
    let b = rand_t(&mut rng, &[3]);
    let probe = rand_t(&mut rng, &[3, 3, 2]);
    let f = |x: &Tensor, w: &Tensor, b: &Tensor| conv2d(x, w, b, 2, 1).unwrap().dot(&probe).unwrap();
    let (gx, gw, gb) = conv2d_backward(&x, &w, 2, 1, &probe).unwrap();
    let fx = finite_diff_grad(|t| f(t, &w, &b), &x, 1e-5).unwrap();
    let fw = finite_diff_grad(|t| f(&x, t, &b), &w, 1e-5).unwrap();
    let fb = finite_diff_grad(|t| f(&x, &w, t), &b, 1e-5).unwrap();
    assert!(gx.max_abs_diff(&fx).unwrap() < 1e-8);
    assert!(gw.max_abs_diff(&fw).unwrap() < 1e-8);
    assert!(gb.max_abs_diff(&fb).unwrap() < 1e-8);
}

#[test]
fn depthwise_identity_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_t(&mut rng, &[3, 4, 5]);
    let k = Tensor::from_fn(&[3, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
    assert_eq!(depthwise_conv2d(&x, &k, &Tensor::zeros(&[3]), 1).unwrap(), x);
}

#[test]
fn depthwise_zero_channel_gives_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut x = rand_t(&mut rng, &[2, 4, 4]);
    x.data_mut()[..16].fill(0.0);
    let k = rand_t(&mut rng, &[2, 3, 3]);
    let b = Tensor::new(&[2], vec![0.7, -0.2]).unwrap();
    let y = depthwise_conv2d(&x, &k, &b, 1).unwrap();
    assert!(y.data()[..16].iter().all(|&v| v == 0.7));
}

#[test]
fn depthwise_matches_block_diagonal_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_t(&mut rng, &[4, 6, 6]);
    let k = rand_t(&mut rng, &[4, 3, 3]);
    let b = rand_t(&mut rng, &[4]);
    let full = Tensor::from_fn(&[4, 4, 3, 3], |i| {
        let (o, c, uv) = (i / 36, (i / 9) % 4, i % 9);
        if o == c {
            k.data()[o * 9 + uv]
        } else {
            0.0
        }
    });
    let y = depthwise_conv2d(&x, &k, &b, 1).unwrap();
    let r = conv2d(&x, &full, &b, 1, 1).unwrap();
    assert!(y.max_abs_diff(&r).unwrap() < 1e-12);
}

#[test]
fn depthwise_channel_mismatch() {
    let err = depthwise_conv2d(&Tensor::zeros(&[3, 4, 4]), &Tensor::zeros(&[2, 3, 3]), &Tensor::zeros(&[2]), 1);
    assert!(matches!(err, Err(Error::Dimension { .. })));
}

#[test]
fn linear_identity_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = rand_t(&mut rng, &[5, 3]);
    let eye = Tensor::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    assert_eq!(linear(&x, &eye, &Tensor::zeros(&[3])).unwrap(), x);
    let b = rand_t(&mut rng, &[4]);
    let y = linear(&Tensor::zeros(&[2, 3]), &rand_t(&mut rng, &[3, 4]), &b).unwrap();
    for row in y.data().chunks(4) {
        assert_eq!(row, b.data());
    }
}

#[test]
fn linear_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_t(&mut rng, &[2, 3]);
    let w = rand_t(&mut rng, &[3, 4]);
    let b = rand_t(&mut rng, &[4]);
    let y = linear(&x, &w, &b).unwrap();
    for i in 0..2 {
        for j in 0..4 {
            let mut acc = b.data()[j];
            for k in 0..3 {
                acc += x.data()[i * 3 + k] * w.data()[k * 4 + j];
            }
            assert!((y.data()[i * 4 + j] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_keeps_leading_shape_and_checks_width() {
    let y = linear(&Tensor::zeros(&[2, 3, 5]), &Tensor::zeros(&[5, 7]), &Tensor::zeros(&[7])).unwrap();
    assert_eq!(y.shape(), &[2, 3, 7]);
    assert!(matches!(
        linear(&Tensor::zeros(&[2, 4]), &Tensor::zeros(&[5, 7]), &Tensor::zeros(&[7])),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn layer_norm_constant_vector_is_zero() {
    let y = layer_norm(&Tensor::full(&[3], 4.2), &Tensor::ones(&[3]), &Tensor::zeros(&[3]), LN_EPS).unwrap();
    assert!(y.data().iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn layer_norm_normalized_input_unchanged() {
    let x = Tensor::new(&[2], vec![1.0, -1.0]).unwrap();
    let y = layer_norm(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-14).unwrap();
    assert!(y.max_abs_diff(&x).unwrap() < 1e-12);
}

#[test]
fn layer_norm_row_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = rand_t(&mut rng, &[4, 8]);
    let y = layer_norm(&x, &Tensor::ones(&[8]), &Tensor::zeros(&[8]), LN_EPS).unwrap();
    for (row, src) in y.data().chunks(8).zip(x.data().chunks(8)) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        let src_mean = src.iter().sum::<f64>() / 8.0;
        let src_var = src.iter().map(|v| (v - src_mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - src_var / (src_var + LN_EPS)).abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn layer_norm_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = rand_t(&mut rng, &[3, 5]);
    let g = rand_t(&mut rng, &[5]);
    let b = rand_t(&mut rng, &[5]);
    let probe = rand_t(&mut rng, &[3, 5]);
    let f = |x: &Tensor, g: &Tensor, b: &Tensor| layer_norm(x, g, b, LN_EPS).unwrap().dot(&probe).unwrap();
    let (gx, gg, gb) = layer_norm_backward(&x, &g, LN_EPS, &probe).unwrap();
    assert!(gx.max_abs_diff(&finite_diff_grad(|t| f(t, &g, &b), &x, 1e-5).unwrap()).unwrap() < 1e-8);
    assert!(gg.max_abs_diff(&finite_diff_grad(|t| f(&x, t, &b), &g, 1e-5).unwrap()).unwrap() < 1e-8);
    assert!(gb.max_abs_diff(&finite_diff_grad(|t| f(&x, &g, t), &b, 1e-5).unwrap()).unwrap() < 1e-8);
}

#[test]
fn activation_fixed_points() {
    let z = Tensor::zeros(&[1]);
    assert_eq!(silu(&z).data(), &[0.0]);
    assert_eq!(gelu(&z).data(), &[0.0]);
    assert_eq!(sigmoid(&z).data(), &[0.5]);
    assert!((silu_scalar(20.0) - 20.0).abs() < 1e-7);
}

#[test]
fn gelu_matches_normal_cdf() {
    // Phi(1) to 16 digits
    let y = gelu(&Tensor::ones(&[1])).data()[0];
    assert!((y - 0.841_344_746_068_542_9).abs() < 1e-10);
    let y = gelu(&Tensor::full(&[1], -2.0)).data()[0];
    assert!((y - (-2.0 * 0.022_750_131_948_179_2)).abs() < 1e-10);
}

#[test]
fn activation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = Tensor::from_fn(&[12], |_| rng.gen_range(-4.0..4.0));
    let ones = Tensor::ones(&[12]);
    let fs = finite_diff_grad(|t| silu(t).sum(), &x, 1e-5).unwrap();
    let fg = finite_diff_grad(|t| gelu(t).sum(), &x, 1e-5).unwrap();
    for (fd, an) in [(fs, silu_grad(&x, &ones).unwrap()), (fg, gelu_grad(&x, &ones).unwrap())] {
        for (a, b) in fd.data().iter().zip(an.data()) {
            assert!((a - b).abs() / a.abs().max(b.abs()).max(1e-12) < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn finite_diff_simple_functions() {
    let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
    let g = finite_diff_grad(|t| t.sum(), &x, 1e-5).unwrap();
    assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    let g = finite_diff_grad(|t| 0.5 * t.dot(t).unwrap(), &x, 1e-5).unwrap();
    assert!(g.max_abs_diff(&x).unwrap() < 1e-8);
}

#[test]
fn finite_diff_rejects_non_finite_objective() {
    let x = Tensor::ones(&[2]);
    assert!(matches!(finite_diff_grad(|_| f64::NAN, &x, 1e-5), Err(Error::Evaluation(_))));
}

#[test]
fn ops_are_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = rand_t(&mut rng, &[3, 7, 7]);
    let w = rand_t(&mut rng, &[4, 3, 3, 3]);
    let b = rand_t(&mut rng, &[4]);
    let a = conv2d(&x, &w, &b, 1, 1).unwrap();
    let c = conv2d(&x, &w, &b, 1, 1).unwrap();
    assert!(a.data().iter().zip(c.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

fn small_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear(x in small_vec(2 * 5 * 5), y in small_vec(2 * 5 * 5), w in small_vec(3 * 2 * 9), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let x = Tensor::new(&[2, 5, 5], x).unwrap();
        let y = Tensor::new(&[2, 5, 5], y).unwrap();
        let w = Tensor::new(&[3, 2, 3, 3], w).unwrap();
        let z = Tensor::zeros(&[3]);
        let mix = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = conv2d(&mix, &w, &z, 1, 1).unwrap();
        let rhs = conv2d(&x, &w, &z, 1, 1).unwrap().scale(a).add(&conv2d(&y, &w, &z, 1, 1).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
    }

    #[test]
    fn depthwise_is_linear(x in small_vec(3 * 4 * 4), y in small_vec(3 * 4 * 4), k in small_vec(27), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let x = Tensor::new(&[3, 4, 4], x).unwrap();
        let y = Tensor::new(&[3, 4, 4], y).unwrap();
        let k = Tensor::new(&[3, 3, 3], k).unwrap();
        let z = Tensor::zeros(&[3]);
        let mix = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = depthwise_conv2d(&mix, &k, &z, 1).unwrap();
        let rhs = depthwise_conv2d(&x, &k, &z, 1).unwrap().scale(a).add(&depthwise_conv2d(&y, &k, &z, 1).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
    }

    #[test]
    fn linear_is_linear(x in small_vec(8), y in small_vec(8), w in small_vec(12), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let x = Tensor::new(&[2, 4], x).unwrap();
        let y = Tensor::new(&[2, 4], y).unwrap();
        let w = Tensor::new(&[4, 3], w).unwrap();
        let z = Tensor::zeros(&[3]);
        let mix = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = linear(&mix, &w, &z).unwrap();
        let rhs = linear(&x, &w, &z).unwrap().scale(a).add(&linear(&y, &w, &z).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
    }

    #[test]
    fn layer_norm_shift_scale_invariant(x in small_vec(6), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let mean = x.iter().sum::<f64>() / 6.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        prop_assume!(var > 1e-3);
        let x = Tensor::new(&[6], x).unwrap();
        let (g, be) = (Tensor::ones(&[6]), Tensor::zeros(&[6]));
        let y0 = layer_norm(&x, &g, &be, 1e-12).unwrap();
        let y1 = layer_norm(&x.map(|v| a * v + b), &g, &be, 1e-12).unwrap();
        prop_assert!(y0.max_abs_diff(&y1).unwrap() < 1e-6);
    }

    #[test]
    fn ops_stay_finite(x in small_vec(2 * 6 * 6)) {
        let x = Tensor::new(&[2, 6, 6], x).unwrap().scale(100.0);
        prop_assert!(silu(&x).all_finite() && gelu(&x).all_finite() && sigmoid(&x).all_finite());
        let k = Tensor::ones(&[2, 3, 3]);
        prop_assert!(depthwise_conv2d(&x, &k, &Tensor::zeros(&[2]), 1).unwrap().all_finite());
    }
}
