//! Randomized invariants of the numeric kernels and the relation-map
//! algebra: properties that must hold for any input, not just the worked
//! examples in the unit tests.

use irdfusion::oracle::{differential_via_relation, refined_prenorm_reference, relation_coeffs};
use irdfusion::pe::{flatten_pe, reshape_map, PeKind};
use irdfusion::tensor::{layer_norm, softmax_rows};
use irdfusion::{harness, irdt, Tensor};
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..6, 1usize..6)
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic((m, n) in dims(), seed in any::<u64>()) {
        let t = mat_from_seed(m, n, -50.0, 50.0, seed);
        let s = softmax_rows(&t).unwrap();
        prop_assert_eq!(s.shape(), t.shape());
        for i in 0..m {
            let row = &s.data()[i * n..(i + 1) * n];
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row {} sums to {}", i, sum);
        }
    }

    #[test]
    fn softmax_ignores_per_row_shifts((m, n) in dims(), seed in any::<u64>(), c in -100.0..100.0f64) {
        let t = mat_from_seed(m, n, -20.0, 20.0, seed);
        let mut shifted = t.clone();
        for x in shifted.data_mut() {
            *x += c;
        }
        let a = softmax_rows(&t).unwrap();
        let b = softmax_rows(&shifted).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_centers_every_row((m, n) in dims(), seed in any::<u64>()) {
        let t = mat_from_seed(m, n, -30.0, 30.0, seed);
        let gamma = Tensor::full(&[n], 1.0);
        let beta = Tensor::zeros(&[n]);
        let out = layer_norm(&t, &gamma, &beta, 1e-5).unwrap();
        for i in 0..m {
            let row = &out.data()[i * n..(i + 1) * n];
            let mean: f64 = row.iter().sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-9, "row {} mean {}", i, mean);
        }
    }

    #[test]
    fn layer_norm_ignores_per_row_shifts((m, n) in dims(), seed in any::<u64>(), c in -50.0..50.0f64) {
        let t = mat_from_seed(m, n, -10.0, 10.0, seed);
        let mut shifted = t.clone();
        for x in shifted.data_mut() {
            *x += c;
        }
        let gamma = Tensor::full(&[n], 1.0);
        let beta = Tensor::zeros(&[n]);
        let a = layer_norm(&t, &gamma, &beta, 1e-5).unwrap();
        let b = layer_norm(&shifted, &gamma, &beta, 1e-5).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn flatten_then_reshape_is_identity(c in 1usize..5, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let map = tensor_from_seed(&[c, h, w], -1e6, 1e6, seed);
        let seq = flatten_pe(&map, PeKind::None, c).unwrap();
        let back = reshape_map(&seq, h, w).unwrap();
        prop_assert_eq!(back.shape(), map.shape());
        for (x, y) in back.data().iter().zip(map.data()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn tensor_files_round_trip_bit_exact(c in 1usize..4, h in 1usize..4, w in 1usize..4, seed in any::<u64>()) {
        let t = tensor_from_seed(&[c, h, w], -1e12, 1e12, seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.irdt");
        irdt::write_tensor(&path, &t).unwrap();
        let back = irdt::read_tensor(&path).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        for (x, y) in back.data().iter().zip(t.data()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn relation_coefficients_reproduce_the_differential(
        n in 1usize..5,
        d in 1usize..5,
        seed in any::<u64>(),
        lambda_v in -2.0..2.0f64,
        lambda_t in -2.0..2.0f64,
        beta in 0.1..3.0f64,
    ) {
        let a_v = softmax_rows(&mat_from_seed(n, n, -2.0, 2.0, seed)).unwrap();
        let a_t = softmax_rows(&mat_from_seed(n, n, -2.0, 2.0, seed ^ 0x9e37)).unwrap();
        let v_v = mat_from_seed(n, d, -1.0, 1.0, seed ^ 0x79b9);
        let v_t = mat_from_seed(n, d, -1.0, 1.0, seed ^ 0xf1ea);

        let fp_v = refined_prenorm_reference(&a_v, &v_v, &v_t, lambda_v).unwrap();
        let fp_t = refined_prenorm_reference(&a_t, &v_t, &v_v, lambda_t).unwrap();
        let mut direct = fp_v;
        for (x, y) in direct.data_mut().iter_mut().zip(fp_t.data()) {
            *x -= beta * y;
        }

        let coeffs = relation_coeffs(&a_v, &a_t, lambda_v, lambda_t, beta).unwrap();
        let via = differential_via_relation(&coeffs, &v_v, &v_t).unwrap();
        for (x, y) in direct.data().iter().zip(via.data()) {
            prop_assert!((x - y).abs() < 1e-12, "direct {} vs relation {}", x, y);
        }
    }

    #[test]
    fn soft_iou_stays_in_range_and_is_reflexive((m, n) in dims(), seed in any::<u64>()) {
        let p = tensor_from_seed(&[m, n], 0.0, 1.0, seed);
        let y = tensor_from_seed(&[m, n], 0.0, 1.0, seed ^ 0x5bd1);
        let v = harness::soft_iou(&p, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&v), "soft-iou {}", v);
        prop_assert_eq!(harness::soft_iou(&p, &p).unwrap(), 1.0);
    }
}

/// Deterministic pseudo-random tensor so shrinking stays meaningful: the
/// strategy only carries shape and seed, never the raw float vectors.
fn tensor_from_seed(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

fn mat_from_seed(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
    tensor_from_seed(&[rows, cols], lo, hi, seed)
}
