//! Wall-clock scaling of the scan. Kept in its own binary so that no other
//! test competes for the CPU while it measures.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use remotedet::s6::{s6_forward_scan, S6Params};
use remotedet::tensor::Tensor;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], r: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-r..r))
}

/// Least-squares fit of `t = c * L` and its coefficient of determination.
fn through_origin_r2(ls: &[f64], ts: &[f64]) -> f64 {
    let c = ls.iter().zip(ts).map(|(l, t)| l * t).sum::<f64>() / ls.iter().map(|l| l * l).sum::<f64>();
    let mean = ts.iter().sum::<f64>() / ts.len() as f64;
    let ss_res: f64 = ls.iter().zip(ts).map(|(l, t)| (t - c * l).powi(2)).sum();
    let ss_tot: f64 = ts.iter().map(|t| (t - mean).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

#[test]
fn scan_runtime_is_linear_in_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (d, n) = (16, 8);
    let p = S6Params::init(d, n, &mut rng);
    let lens = [1024usize, 2048, 4096, 8192];
    let inputs: Vec<Tensor> = lens.iter().map(|&l| rand_t(&mut rng, &[l, d], 1.0)).collect();
    for x in &inputs {
        s6_forward_scan(x, &p).unwrap();
    }
    let mut best = [f64::INFINITY; 4];
    for _ in 0..7 {
        for (i, x) in inputs.iter().enumerate() {
            let t = Instant::now();
            std::hint::black_box(s6_forward_scan(x, &p).unwrap());
            best[i] = best[i].min(t.elapsed().as_secs_f64());
        }
    }
    let ls: Vec<f64> = lens.iter().map(|&l| l as f64).collect();
    let r2 = through_origin_r2(&ls, &best);
    assert!(r2 > 0.98, "R^2 = {r2}, times {best:?}");
}
