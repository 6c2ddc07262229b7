mod common;

use common::{conv_oracle, random_tensor, rng};
use pathonet::tensor::{add, conv2d, dup_channels, max_pool2, mse, relu, upsample2, ConvSpec, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
    }
}

#[test]
fn conv_matches_direct_sum() {
    let mut r = rng(11);
    for _ in 0..200 {
        let k: usize = [1, 3, 5][r.random_range(0..3)];
        let d: usize = r.random_range(1..=4);
        let spec = ConvSpec {
            kernel_size: k,
            dilation: d,
            stride: r.random_range(1..=2),
            padding: r.random_range(0..=d * (k - 1)),
            in_channels: r.random_range(1..=4),
            out_channels: r.random_range(1..=4),
            has_bias: r.random_bool(0.5),
        };
        let span = spec.receptive_span();
        let lo = span.saturating_sub(2 * spec.padding).max(1);
        let (h, w) = (r.random_range(lo..lo + 8), r.random_range(lo..lo + 8));
        let x = random_tensor(&mut r, &[2, spec.in_channels, h, w]);
        let w = random_tensor(&mut r, &spec.weight_shape());
        let b = spec.has_bias.then(|| random_tensor(&mut r, &[spec.out_channels]));
        let got = conv2d(&x, &spec, &w, b.as_ref()).unwrap();
        assert_close(&got, &conv_oracle(&x, &spec, &w, b.as_ref()), 1e-12);
    }
}

#[test]
fn dilated_same_conv_keeps_size() {
    let spec = ConvSpec::same(2, 3, 3, 4);
    let mut r = rng(3);
    let x = random_tensor(&mut r, &[1, 2, 8, 8]);
    let w = random_tensor(&mut r, &spec.weight_shape());
    let b = random_tensor(&mut r, &[3]);
    let y = conv2d(&x, &spec, &w, Some(&b)).unwrap();
    assert_eq!(y.shape(), &[1, 3, 8, 8]);
    assert_close(&y, &conv_oracle(&x, &spec, &w, Some(&b)), 1e-12);
}

#[test]
fn bad_geometry_is_rejected() {
    let spec = ConvSpec::same(2, 3, 3, 1);
    let x = Tensor::<f64>::zeros(&[1, 3, 8, 8]);
    assert!(conv2d(&x, &spec, &Tensor::zeros(&spec.weight_shape()), None).is_err());
    let x = Tensor::<f64>::zeros(&[1, 2, 8, 8]);
    assert!(conv2d(&x, &spec, &Tensor::zeros(&[3, 2, 5, 5]), None).is_err());
    assert!(max_pool2(&Tensor::<f64>::zeros(&[1, 1, 5, 4])).is_err());
}

#[test]
fn pool_and_upsample_match_loops() {
    let mut r = rng(5);
    let x = random_tensor(&mut r, &[2, 3, 6, 4]);
    let p = max_pool2(&x).unwrap();
    assert_eq!(p.shape(), &[2, 3, 3, 2]);
    for n in 0..2 {
        for c in 0..3 {
            for y in 0..3 {
                for xx in 0..2 {
                    let at = |u: usize, v: usize| x.data()[((n * 3 + c) * 6 + 2 * y + u) * 4 + 2 * xx + v];
                    let m = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                    assert_eq!(p.data()[((n * 3 + c) * 3 + y) * 2 + xx], m);
                }
            }
        }
    }

    let x = random_tensor(&mut r, &[1, 2, 3, 3]);
    let w = random_tensor(&mut r, &[2, 3, 2, 2]);
    let b = random_tensor(&mut r, &[3]);
    let up = upsample2(&x, &w, Some(&b)).unwrap();
    assert_eq!(up.shape(), &[1, 3, 6, 6]);
    for o in 0..3 {
        for y in 0..6 {
            for xx in 0..6 {
                let mut acc = b.data()[o];
                for c in 0..2 {
                    acc += x.data()[(c * 3 + y / 2) * 3 + xx / 2] * w.data()[((c * 3 + o) * 2 + y % 2) * 2 + xx % 2];
                }
                assert!((up.data()[(o * 6 + y) * 6 + xx] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn dup_and_mse_values() {
    let x = Tensor::<f64>::new(vec![1, 2, 1, 1], vec![1.0, -2.0]).unwrap();
    assert_eq!(dup_channels(&x).unwrap().data(), &[1.0, -2.0, 1.0, -2.0]);
    let y = Tensor::<f64>::new(vec![1, 2, 1, 1], vec![0.0, 2.0]).unwrap();
    assert_eq!(mse(&x, &y).unwrap(), (1.0 + 16.0) / 2.0);
}

proptest! {
    #[test]
    fn add_commutes(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
        let mut r = rng(seed);
        let a = random_tensor(&mut r, &[1, 2, h, w]);
        let b = random_tensor(&mut r, &[1, 2, h, w]);
        prop_assert_eq!(add(&a, &b).unwrap(), add(&b, &a).unwrap());
    }

    #[test]
    fn output_size_formula(k in 1usize..6, d in 1usize..5, s in 1usize..3, p in 0usize..6, n in 1usize..40) {
        let spec = ConvSpec { kernel_size: k, dilation: d, stride: s, padding: p, in_channels: 1, out_channels: 1, has_bias: false };
        let padded = n + 2 * p;
        let span = d * (k - 1) + 1;
        let expected = (padded >= span).then(|| (padded - span) / s + 1);
        prop_assert_eq!(spec.output_size(n), expected);
    }

    #[test]
    fn relu_idempotent_and_nonnegative(seed in any::<u64>()) {
        let x = random_tensor(&mut rng(seed), &[1, 3, 4, 4]);
        let once = relu(&x);
        prop_assert!(once.data().iter().all(|v| *v >= 0.0));
        prop_assert_eq!(relu(&once), once);
    }

    #[test]
    fn mse_nonnegative_and_symmetric(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_tensor(&mut r, &[1, 1, 3, 5]);
        let b = random_tensor(&mut r, &[1, 1, 3, 5]);
        let l = mse(&a, &b).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l, mse(&b, &a).unwrap());
        prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
    }
}
