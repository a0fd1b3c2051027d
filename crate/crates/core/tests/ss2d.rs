use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use remotedet::ss2d::*;
use remotedet::tensor::Tensor;
use remotedet::Error;

use ScanDirection::*;

fn grid() -> Tensor {
    Tensor::new(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap()
}

#[test]
fn two_by_two_orders() {
    let cases = [
        (RowMajor, [1., 2., 3., 4.]),
        (RowMajorReverse, [4., 3., 2., 1.]),
        (ColMajor, [1., 3., 2., 4.]),
        (ColMajorReverse, [4., 2., 3., 1.]),
    ];
    for (dir, want) in cases {
        let seq = flatten(&grid(), dir).unwrap();
        assert_eq!(seq.shape(), &[4, 1]);
        assert_eq!(seq.data(), &want, "{dir:?}");
    }
}

#[test]
fn single_cell_is_direction_free() {
    let fm = Tensor::new(&[3, 1, 1], vec![7., 8., 9.]).unwrap();
    for dir in ScanDirection::ALL {
        assert_eq!(flatten(&fm, dir).unwrap().data(), &[7., 8., 9.]);
    }
}

#[test]
fn col_major_unflatten() {
    let seq = Tensor::new(&[4, 1], vec![1., 2., 3., 4.]).unwrap();
    assert_eq!(unflatten(&seq, ColMajor, 2, 2).unwrap().data(), &[1., 3., 2., 4.]);
}

#[test]
fn random_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let fm = Tensor::from_fn(&[3, 4, 5], |_| rng.gen_range(-1.0..1.0));
    for dir in ScanDirection::ALL {
        assert_eq!(unflatten(&flatten(&fm, dir).unwrap(), dir, 4, 5).unwrap(), fm);
    }
}

#[test]
fn sum_over_directions_is_four_times_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fm = Tensor::from_fn(&[2, 3, 6], |_| rng.gen_range(-1.0..1.0));
    let mut acc = Tensor::zeros(fm.shape());
    for dir in ScanDirection::ALL {
        acc.add_assign(&unflatten(&flatten(&fm, dir).unwrap(), dir, 3, 6).unwrap()).unwrap();
    }
    assert!(acc.max_abs_diff(&fm.scale(4.0)).unwrap() < 1e-15);
}

#[test]
fn unflatten_length_mismatch() {
    let seq = Tensor::zeros(&[5, 2]);
    assert!(matches!(unflatten(&seq, RowMajor, 2, 2), Err(Error::Dimension { .. })));
}

#[test]
fn fuse_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::from_fn(&[6, 3], |_| rng.gen_range(-1.0..1.0));
    let b = Tensor::from_fn(&[6, 3], |_| rng.gen_range(-1.0..1.0));
    assert_eq!(fuse_sequences(&a, &Tensor::zeros(&[6, 3])).unwrap(), a);
    assert_eq!(fuse_sequences(&a, &b).unwrap(), fuse_sequences(&b, &a).unwrap());
    assert!(matches!(fuse_sequences(&a, &Tensor::zeros(&[6, 2])), Err(Error::Dimension { .. })));
}

#[test]
fn fuse_commutes_with_flatten() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::from_fn(&[3, 4, 2], |_| rng.gen_range(-1.0..1.0));
    let y = Tensor::from_fn(&[3, 4, 2], |_| rng.gen_range(-1.0..1.0));
    for dir in ScanDirection::ALL {
        let lhs = fuse_sequences(&flatten(&x, dir).unwrap(), &flatten(&y, dir).unwrap()).unwrap();
        assert_eq!(lhs, flatten(&x.add(&y).unwrap(), dir).unwrap());
    }
}

#[test]
fn reverse_directions_mirror_forward() {
    for (h, w) in [(1, 1), (2, 3), (5, 4), (16, 16)] {
        let last = h * w - 1;
        let (rm, rr) = (RowMajor.order(h, w), RowMajorReverse.order(h, w));
        let (cm, cr) = (ColMajor.order(h, w), ColMajorReverse.order(h, w));
        for t in 0..h * w {
            assert_eq!(rr[t], rm[last - t]);
            assert_eq!(cr[t], cm[last - t]);
        }
    }
}

#[test]
fn every_grid_up_to_sixteen_is_a_bijection() {
    for h in 1..=16 {
        for w in 1..=16 {
            for dir in ScanDirection::ALL {
                let mut seen = vec![false; h * w];
                for t in 0..h * w {
                    let (r, c) = dir.cell(t, h, w);
                    assert_eq!(dir.position(r, c, h, w), t);
                    assert!(!seen[r * w + c]);
                    seen[r * w + c] = true;
                }
                let fm = Tensor::from_fn(&[2, h, w], |i| i as f64);
                assert_eq!(unflatten(&flatten(&fm, dir).unwrap(), dir, h, w).unwrap(), fm);
            }
        }
    }
}

fn non_adjacent_steps(dir: ScanDirection, h: usize, w: usize) -> usize {
    (0..h * w - 1)
        .filter(|&t| {
            let (a, b) = (dir.cell(t, h, w), dir.cell(t + 1, h, w));
            a.0.abs_diff(b.0) + a.1.abs_diff(b.1) != 1
        })
        .count()
}

proptest! {
    #[test]
    fn consecutive_tokens_are_neighbours(h in 1usize..=16, w in 1usize..=16) {
        // a single column (row) makes every step of the row (column) scan vertical (horizontal)
        let row_breaks = if w == 1 { 0 } else { h - 1 };
        let col_breaks = if h == 1 { 0 } else { w - 1 };
        prop_assert_eq!(non_adjacent_steps(RowMajor, h, w), row_breaks);
        prop_assert_eq!(non_adjacent_steps(RowMajorReverse, h, w), row_breaks);
        prop_assert_eq!(non_adjacent_steps(ColMajor, h, w), col_breaks);
        prop_assert_eq!(non_adjacent_steps(ColMajorReverse, h, w), col_breaks);
    }

    #[test]
    fn round_trip_is_exact(c in 1usize..4, h in 1usize..=16, w in 1usize..=16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fm = Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-1e6..1e6));
        for dir in ScanDirection::ALL {
            prop_assert_eq!(&unflatten(&flatten(&fm, dir).unwrap(), dir, h, w).unwrap(), &fm);
        }
    }
}
