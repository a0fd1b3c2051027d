use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use remotedet::params::Parameters;
use remotedet::s6::*;
use remotedet::tensor::{finite_diff_grad, softplus, Tensor};
use remotedet::Error;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], r: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-r..r))
}

fn scalar_params(log_a: f64, w_b: f64, w_c: f64, w_delta: f64, bias: f64, skip: f64) -> S6Params {
    S6Params {
        log_a: Tensor::full(&[1, 1], log_a),
        w_b: Tensor::full(&[1, 1], w_b),
        w_c: Tensor::full(&[1, 1], w_c),
        w_delta: Tensor::full(&[1, 1], w_delta),
        delta_bias: Tensor::full(&[1], bias),
        d_skip: Tensor::full(&[1], skip),
    }
}

/// Independent per-channel recurrence written directly from the definition.
fn reference(x: &Tensor, p: &S6Params) -> Tensor {
    let (l, d, n) = (x.dim(0), x.dim(1), p.state_size());
    let xs = x.data();
    let mut h = vec![0.0; d * n];
    let mut y = vec![0.0; l * d];
    for t in 0..l {
        let tok = &xs[t * d..(t + 1) * d];
        let b: Vec<f64> = (0..n).map(|j| (0..d).map(|i| tok[i] * p.w_b.data()[i * n + j]).sum()).collect();
        let c: Vec<f64> = (0..n).map(|j| (0..d).map(|i| tok[i] * p.w_c.data()[i * n + j]).sum()).collect();
        for ch in 0..d {
            let pre: f64 = (0..d).map(|i| tok[i] * p.w_delta.data()[i * d + ch]).sum::<f64>() + p.delta_bias.data()[ch];
            let delta = softplus(pre);
            let mut acc = p.d_skip.data()[ch] * tok[ch];
            for j in 0..n {
                let a = -p.log_a.data()[ch * n + j].exp();
                let k = ch * n + j;
                h[k] = (delta * a).exp() * h[k] + delta * b[j] * tok[ch];
                acc += c[j] * h[k];
            }
            y[t * d + ch] = acc;
        }
    }
    Tensor::new(&[l, d], y).unwrap()
}

fn random_instance(rng: &mut ChaCha8Rng, l: usize, d: usize, n: usize) -> (Tensor, S6Params) {
    let mut p = S6Params::init(d, n, rng);
    p.w_delta = rand_t(rng, &[d, d], 0.5);
    p.d_skip = rand_t(rng, &[d], 1.0);
    (rand_t(rng, &[l, d], 1.0), p)
}

#[test]
fn init_respects_documented_ranges() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = S6Params::init(6, 4, &mut rng);
    let a = p.a();
    for ch in 0..6 {
        for j in 0..4 {
            assert!((a.data()[ch * 4 + j] + (j as f64 + 1.0)).abs() < 1e-12);
        }
    }
    for &b in p.delta_bias.data() {
        let dt = softplus(b);
        assert!((1e-3 - 1e-12..=0.1 + 1e-12).contains(&dt), "{dt}");
    }
    let bound = 1.0 / 6f64.sqrt();
    assert!(p.w_b.data().iter().chain(p.w_c.data()).all(|v| v.abs() <= bound));
}

#[test]
fn zero_input_gives_zero_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = S6Params::init(3, 4, &mut rng);
    let x = Tensor::zeros(&[7, 3]);
    assert_eq!(s6_forward_sequential(&x, &p).unwrap(), x);
    assert_eq!(s6_forward_scan(&x, &p).unwrap(), x);
}

#[test]
fn single_step_closed_form() {
    let p = scalar_params(0.3f64.ln(), 0.8, -1.5, 0.4, 0.1, 0.25);
    let x = 1.7;
    let delta = (1.0 + (0.4 * x + 0.1f64).exp()).ln();
    let expected = (-1.5 * x) * (delta * 0.8 * x * x) + 0.25 * x;
    let y = s6_forward_sequential(&Tensor::full(&[1, 1], x), &p).unwrap();
    assert!((y.data()[0] - expected).abs() < 1e-12);
    let ys = s6_forward_scan(&Tensor::full(&[1, 1], x), &p).unwrap();
    assert!((ys.data()[0] - y.data()[0]).abs() < 1e-12);
}

#[test]
fn vanishing_pole_accumulates_running_sum() {
    let p = scalar_params(-30.0, 1.0, 1.0, 0.3, -0.2, 0.0);
    let xs = [0.5, -1.2, 0.9, 2.0, -0.3, 1.1];
    let x = Tensor::new(&[6, 1], xs.to_vec()).unwrap();
    let y = s6_forward_scan(&x, &p).unwrap();
    let mut running = 0.0;
    for (t, &v) in xs.iter().enumerate() {
        running += softplus(0.3 * v - 0.2) * v * v;
        let expected = v * running;
        assert!((y.data()[t] - expected).abs() <= 1e-6 * expected.abs().max(1e-12), "t={t}");
    }
}

#[test]
fn scan_matches_sequential_and_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, p) = random_instance(&mut rng, 64, 4, 8);
    let seq = s6_forward_sequential(&x, &p).unwrap();
    assert!(s6_forward_scan(&x, &p).unwrap().max_abs_diff(&seq).unwrap() < 1e-10);
    assert!(reference(&x, &p).max_abs_diff(&seq).unwrap() < 1e-10);
}

#[test]
fn memoryless_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (d, n) = (3, 4);
    let mut p = S6Params::init(d, n, &mut rng);
    p.log_a.fill(0.0);
    p.w_delta.fill(0.0);
    p.delta_bias.fill(60.0);
    p.d_skip = rand_t(&mut rng, &[d], 1.0);
    let x = rand_t(&mut rng, &[5, d], 1.0);
    let y = s6_forward_scan(&x, &p).unwrap();
    for t in 0..5 {
        let tok = &x.data()[t * d..(t + 1) * d];
        let b: Vec<f64> = (0..n).map(|j| (0..d).map(|i| tok[i] * p.w_b.data()[i * n + j]).sum()).collect();
        let c: Vec<f64> = (0..n).map(|j| (0..d).map(|i| tok[i] * p.w_c.data()[i * n + j]).sum()).collect();
        let cb: f64 = b.iter().zip(&c).map(|(u, v)| u * v).sum();
        for ch in 0..d {
            let expected = cb * 60.0 * tok[ch] + p.d_skip.data()[ch] * tok[ch];
            assert!((y.data()[t * d + ch] - expected).abs() < 1e-9);
        }
    }
}

#[test]
fn non_finite_parameter_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = S6Params::init(2, 2, &mut rng);
    p.w_b.data_mut()[1] = f64::NAN;
    let x = Tensor::ones(&[3, 2]);
    assert!(matches!(s6_forward_sequential(&x, &p), Err(Error::Validation(_))));
    assert!(matches!(s6_forward_scan(&x, &p), Err(Error::Validation(_))));
}

#[test]
fn zero_output_gradient_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (x, p) = random_instance(&mut rng, 5, 3, 2);
    let (gx, gp) = s6_backward(&x, &p, &Tensor::zeros(&[5, 3])).unwrap();
    assert!(gx.data().iter().all(|&v| v == 0.0));
    assert_eq!(gp.sum_squares(), 0.0);
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (x, p) = random_instance(&mut rng, 3, 2, 2);
    let g = rand_t(&mut rng, &[3, 2], 1.0);
    let (gx, gp) = s6_backward(&x, &p, &g).unwrap();
    let fx = finite_diff_grad(|t| s6_forward_sequential(t, &p).unwrap().dot(&g).unwrap(), &x, 1e-5).unwrap();
    for (a, b) in fx.data().iter().zip(gx.data()) {
        assert!(rel(*a, *b) < 1e-4, "input: {a} vs {b}");
    }
    let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Tensor> = gp.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    for (i, name) in names.iter().enumerate() {
        let base = p.named_tensors()[i].1.clone();
        let fd = finite_diff_grad(
            |t| {
                let mut q = p.clone();
                *q.tensors_mut()[i] = t.clone();
                s6_forward_sequential(&x, &q).unwrap().dot(&g).unwrap()
            },
            &base,
            1e-5,
        )
        .unwrap();
        for (a, b) in fd.data().iter().zip(analytic[i].data()) {
            assert!(rel(*a, *b) < 1e-4, "{name}: {a} vs {b}");
        }
    }
}

#[test]
fn skip_gradient_is_exact_feedthrough() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (x, p) = random_instance(&mut rng, 6, 3, 2);
    let g = rand_t(&mut rng, &[6, 3], 1.0);
    let (_, gp) = s6_backward(&x, &p, &g).unwrap();
    for ch in 0..3 {
        let expected: f64 = (0..6).map(|t| g.data()[t * 3 + ch] * x.data()[t * 3 + ch]).sum();
        assert!((gp.d_skip.data()[ch] - expected).abs() < 1e-12);
    }
}

#[test]
fn causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (x, p) = random_instance(&mut rng, 20, 3, 4);
    let y = s6_forward_scan(&x, &p).unwrap();
    for t in [0, 7, 19] {
        let mut x2 = x.clone();
        x2.data_mut()[t * 3 + 1] += 0.5;
        let y2 = s6_forward_scan(&x2, &p).unwrap();
        for s in 0..20 {
            let changed = (0..3).any(|c| y.data()[s * 3 + c] != y2.data()[s * 3 + c]);
            assert_eq!(changed, s >= t, "perturb {t}, observe {s}");
        }
    }
}

#[test]
fn long_sequences_stay_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (l, d, n) = (100_000, 2, 4);
    let p = S6Params::init(d, n, &mut rng);
    let x = rand_t(&mut rng, &[l, d], 1.0);
    let y = s6_forward_scan(&x, &p).unwrap();
    assert!(y.all_finite());
    // bounds over |x| <= 1: delta, |B|, |C| and the slowest decay per step
    let row_abs = |w: &Tensor, cols: usize, j: usize| (0..d).map(|i| w.data()[i * cols + j].abs()).sum::<f64>();
    let max_b = (0..n).map(|j| row_abs(&p.w_b, n, j)).fold(0.0, f64::max);
    let max_c = (0..n).map(|j| row_abs(&p.w_c, n, j)).fold(0.0, f64::max);
    let (mut min_decay, mut max_delta) = (f64::INFINITY, 0.0f64);
    for ch in 0..d {
        let w = row_abs(&p.w_delta, d, ch);
        let b = p.delta_bias.data()[ch];
        let (lo, hi) = (softplus(b - w), softplus(b + w));
        max_delta = max_delta.max(hi);
        let min_a = (0..n).map(|j| p.log_a.data()[ch * n + j].exp()).fold(f64::INFINITY, f64::min);
        min_decay = min_decay.min(lo * min_a);
    }
    let h_bound = max_delta * max_b / (1.0 - (-min_decay).exp());
    let y_bound = n as f64 * max_c * h_bound + p.d_skip.max_abs();
    assert!(y.max_abs() <= y_bound, "{} > {y_bound}", y.max_abs());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn scan_equals_sequential(seed in any::<u64>(), l in 1usize..=256, d in 1usize..=16, n in 1usize..=16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, p) = random_instance(&mut rng, l, d, n);
        let err = s6_forward_scan(&x, &p).unwrap().max_abs_diff(&s6_forward_sequential(&x, &p).unwrap()).unwrap();
        prop_assert!(err < 1e-9);
    }

    #[test]
    fn positive_step_sizes(seed in any::<u64>(), bias in -40.0f64..40.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, mut p) = random_instance(&mut rng, 8, 3, 2);
        p.delta_bias.fill(bias);
        let y = s6_forward_scan(&x, &p).unwrap();
        prop_assert!(y.all_finite());
        prop_assert!(p.a().data().iter().all(|&a| a < 0.0));
    }
}
