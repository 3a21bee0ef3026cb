use dualpath_tensor::kernels::{adaptive_avg_pool_time, adaptive_bins, batch_norm, conv2d, matmul, softmax};
use dualpath_tensor::{NormMode, RunningStats, Tape, Tensor, TensorError};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn matmul_identity() {
    let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(matmul(&eye, &m).unwrap(), m);
}

#[test]
fn matmul_row_by_column() {
    let out = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
    assert_eq!(out.shape(), &[1, 1]);
    assert_eq!(out.data(), &[11.0]);
}

#[test]
fn matmul_zero_annihilates() {
    let b = Tensor::from_fn(&[3, 4], |i| i as f64 - 5.5);
    let out = matmul(&Tensor::zeros(&[2, 3]), &b).unwrap();
    assert_eq!(out, Tensor::zeros(&[2, 4]));
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
    assert!(matches!(err, TensorError::Shape { .. }));
}

#[test]
fn matmul_broadcasts_batch_dims() {
    let a = Tensor::from_fn(&[2, 1, 2, 3], |i| i as f64);
    let b = Tensor::from_fn(&[3, 3, 2], |i| (i % 5) as f64 - 2.0);
    let out = matmul(&a, &b).unwrap();
    assert_eq!(out.shape(), &[2, 3, 2, 2]);
    // spot check batch (1, 2) against a plain 2-D product
    let a1 = t(&[2, 3], &a.data()[6..12]);
    let b2 = t(&[3, 2], &b.data()[12..18]);
    let want = matmul(&a1, &b2).unwrap();
    let got: Vec<f64> = out.data()[(3 + 2) * 4..(3 + 2) * 4 + 4].to_vec();
    assert_eq!(got, want.data());
}

#[test]
fn conv2d_scaling_kernel() {
    let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let k = t(&[1, 1, 1, 1], &[2.0]);
    let out = conv2d(&x, &k, (1, 1), (0, 0)).unwrap();
    assert_eq!(out.data(), &[2.0, 4.0, 6.0, 8.0]);
}

#[test]
fn conv2d_valid_ones_kernel() {
    let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let k = Tensor::ones(&[1, 1, 2, 2]);
    let out = conv2d(&x, &k, (1, 1), (0, 0)).unwrap();
    assert_eq!(out.shape(), &[1, 1, 1]);
    assert_eq!(out.data(), &[10.0]);
}

#[test]
fn conv2d_zero_kernel() {
    let x = Tensor::from_fn(&[2, 5, 7], |i| (i as f64).sin());
    let out = conv2d(&x, &Tensor::zeros(&[3, 2, 3, 3]), (1, 1), (1, 1)).unwrap();
    assert_eq!(out, Tensor::zeros(&[3, 5, 7]));
}

#[test]
fn conv2d_output_extent_and_cross_correlation() {
    // asymmetric kernel distinguishes correlation from convolution
    let x = t(&[1, 1, 3], &[1.0, 2.0, 3.0]);
    let k = t(&[1, 1, 1, 2], &[1.0, 10.0]);
    let out = conv2d(&x, &k, (1, 1), (0, 0)).unwrap();
    assert_eq!(out.data(), &[21.0, 32.0]);

    let x = Tensor::zeros(&[1, 9, 11]);
    let out = conv2d(&x, &Tensor::zeros(&[1, 1, 3, 4]), (2, 3), (1, 2)).unwrap();
    assert_eq!(out.shape(), &[1, (9 + 2 - 3) / 2 + 1, (11 + 4 - 4) / 3 + 1]);
}

#[test]
fn conv2d_rejects_oversized_kernel() {
    let err = conv2d(&Tensor::zeros(&[1, 2, 2]), &Tensor::zeros(&[1, 1, 3, 3]), (1, 1), (0, 0))
        .unwrap_err();
    assert!(matches!(err, TensorError::Invalid { .. }), "{err}");
}

#[test]
fn softmax_examples() {
    let u = softmax(&Tensor::zeros(&[3]), 0).unwrap();
    for v in u.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let p = softmax(&t(&[2], &[0.0, 3f64.ln()]), 0).unwrap();
    assert!((p.data()[0] - 0.25).abs() < 1e-15);
    assert!((p.data()[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_rejects_bad_axis() {
    assert!(softmax(&Tensor::zeros(&[2, 2]), 2).is_err());
}

#[test]
fn adaptive_pool_examples() {
    let out = adaptive_avg_pool_time(&t(&[4], &[1.0, 2.0, 3.0, 4.0]), 2).unwrap();
    assert_eq!(out.data(), &[1.5, 3.5]);
    let out = adaptive_avg_pool_time(&t(&[5], &[1.0, 2.0, 3.0, 4.0, 5.0]), 2).unwrap();
    assert_eq!(out.data(), &[2.0, 4.0]);
    assert_eq!(adaptive_bins(5, 2), vec![(0, 3), (2, 5)]);
    let x = Tensor::from_fn(&[3, 7], |i| i as f64 * 0.3);
    assert_eq!(adaptive_avg_pool_time(&x, 7).unwrap(), x);
}

#[test]
fn batch_norm_constant_input_is_zero() {
    let x = Tensor::full(&[2, 3, 4], 7.5);
    let f = batch_norm(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[3]), None, 1e-5).unwrap();
    assert!(f.output.data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_standardized_input_passes_through() {
    // each channel already has mean 0 and (biased) variance 1
    let x = t(&[2, 1, 2], &[1.0, -1.0, -1.0, 1.0]);
    let f = batch_norm(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), None, 1e-5).unwrap();
    let shrink = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (o, v) in f.output.data().iter().zip(x.data()) {
        assert!((o - v * shrink).abs() < 1e-15);
        assert!((o - v).abs() < 1e-5);
    }
}

#[test]
fn batch_norm_output_statistics() {
    // Large input variance keeps eps/(var + eps) well under 1e-6.
    let x = Tensor::from_fn(&[3, 2, 4, 5], |i| 40.0 * ((i * 7919 % 97) as f64 / 97.0 - 0.5) + i as f64 % 3.0);
    let f = batch_norm(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), None, 1e-5).unwrap();
    for c in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|b| (0..20).map(move |r| (b, r)))
            .map(|(b, r)| f.output.data()[(b * 2 + c) * 20 + r])
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }
}

#[test]
fn batch_norm_train_needs_two_elements() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[1, 2, 1]));
    let g = tape.leaf(Tensor::ones(&[2]));
    let b = tape.leaf(Tensor::zeros(&[2]));
    let err = x
        .batch_norm(g, b, &RunningStats::new(2), NormMode::Train, 0.1, 1e-5)
        .unwrap_err();
    assert_eq!(err, TensorError::SingleElementBatch(1));
    // eval mode has no such restriction
    assert!(x
        .batch_norm(g, b, &RunningStats::new(2), NormMode::Eval, 0.1, 1e-5)
        .is_ok());
}

#[test]
fn batch_norm_updates_running_stats_with_momentum() {
    let tape = Tape::new();
    let x = tape.constant(t(&[2, 1, 2], &[1.0, 3.0, 5.0, 7.0]));
    let g = tape.constant(Tensor::ones(&[1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let (_, stats) = x
        .batch_norm(g, b, &RunningStats::new(1), NormMode::Train, 0.1, 1e-5)
        .unwrap();
    let stats = stats.unwrap();
    // batch mean 4, unbiased var 20/3
    assert!((stats.mean.data()[0] - 0.4).abs() < 1e-15);
    assert!((stats.var.data()[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-15);
}

#[test]
fn forward_rejects_non_finite() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2], 1e300));
    assert!(matches!(x.mul(x).unwrap_err(), TensorError::NonFinite { .. }));
}

#[test]
fn backward_of_sum_of_squares() {
    let tape = Tape::new();
    let x0 = t(&[3], &[1.0, -2.0, 0.5]);
    let x = tape.leaf(x0.clone());
    let loss = x.square().unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x), x0.map(|v| 2.0 * v));
}

#[test]
fn backward_of_elementwise_product() {
    let tape = Tape::new();
    let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b0 = t(&[2, 2], &[-1.0, 0.5, 2.0, 7.0]);
    let b = tape.leaf(b0.clone());
    let loss = a.mul(b).unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(a), b0);
}

#[test]
fn backward_errors() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[2]));
    assert!(matches!(tape.backward(x).unwrap_err(), TensorError::NonScalarLoss(_)));
    let c = tape.constant(Tensor::ones(&[2])).sum().unwrap();
    assert_eq!(tape.backward(c).unwrap_err(), TensorError::DetachedLoss);
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 1, 6, 5], |i| (i as f64 * 0.37).sin()));
        let k = tape.leaf(Tensor::from_fn(&[3, 1, 3, 3], |i| (i as f64 * 0.11).cos()));
        let y = x.conv2d(k, (1, 1), (1, 1)).unwrap().softmax(3).unwrap();
        let loss = y.square().unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        (g.wrt(x), g.wrt(k))
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert!(a1.bit_eq(&a2) && b1.bit_eq(&b2));
}

#[test]
fn gradients_accumulate_over_shared_inputs() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[2], &[3.0, -1.0]));
    // x used three times: d/dx (x*x + x) = 2x + 1
    let loss = x.mul(x).unwrap().add(x).unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(x).data(), &[7.0, -1.0]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
        let x = Tensor::new(&[3, 4], vals).unwrap();
        for axis in 0..2 {
            let y = softmax(&x, axis).unwrap();
            let sums = y.sum_axis(axis);
            for s in sums.data() {
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
            prop_assert!(y.data().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softmax_shift_invariant(vals in prop::collection::vec(-10.0f64..10.0, 5), c in -100.0f64..100.0) {
        let x = Tensor::new(&[5], vals).unwrap();
        let a = softmax(&x, 0).unwrap();
        let b = softmax(&x.map(|v| v + c), 0).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn conv2d_identity_kernel(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
        let x = Tensor::from_fn(&[c, h, w], |i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 100.0 - 5.0);
        let k = Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 });
        let out = conv2d(&x, &k, (1, 1), (0, 0)).unwrap();
        prop_assert_eq!(out, x);
    }
}
