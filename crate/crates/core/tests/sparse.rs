use std::sync::Arc;

use lift_core::oracle::*;
use lift_core::quant::{range_params, QuantParams};
use lift_core::sparse::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_err(got: &[f32], want: &[f64]) -> f64 {
    let norm = want.iter().fold(0f64, |m, v| m.max(v.abs())).max(1e-30);
    got.iter().zip(want).fold(0f64, |m, (&g, &w)| m.max((g as f64 - w).abs())) / norm
}

/// (kernel, stride, padding, rulebook) for each convolution flavor.
fn flavors(x: &Arc<ActiveSet>) -> Vec<(&'static str, usize, u32, u32, Rulebook)> {
    vec![
        ("submanifold", 3, 1, 1, Rulebook::submanifold(x, 3).unwrap()),
        ("regular", 3, 1, 1, Rulebook::regular(x, 3).unwrap()),
        ("downsample", 3, 2, 1, Rulebook::downsample(x).unwrap()),
    ]
}

#[test]
fn real_conv_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..60 {
        let (w, h) = (rng.gen_range(1..=20), rng.gen_range(1..=20));
        let (cin, cout) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let occ = rng.gen_range(0.05..0.95);
        let x = random_tensor(&mut rng, w, h, occ, cin);
        let kernel = random_kernel(&mut rng, 3, cin, cout);
        let bias: Vec<f32> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let relu = rng.gen_bool(0.5);
        for (name, k, s, p, rb) in flavors(x.active()) {
            let got = conv_real(&x, &rb, &kernel, &bias, relu).unwrap();
            let want = dense_conv_real(&x, &kernel, &bias, s, p, relu, rb.output());
            assert!(rel_err(got.data(), &want) <= 1e-5, "{name}");
            let law = if name == "submanifold" { (**x.active()).clone() } else { active_set_law(x.active(), k, s, p) };
            assert_eq!(**rb.output(), law, "{name} active set");
        }
    }
}

#[test]
fn int8_conv_matches_dense_oracle_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..60 {
        let (w, h) = (rng.gen_range(1..=20), rng.gen_range(1..=20));
        let (cin, cout) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let occ = rng.gen_range(0.05..0.95);
        let x = random_tensor(&mut rng, w, h, occ, cin);
        let in_qp = range_params(rng.gen_range(-1.5..-0.5), rng.gen_range(0.5..1.5)).unwrap();
        let xq = QuantTensor::quantize(&x, in_qp);
        let kernel = random_kernel(&mut rng, 3, cin, cout);
        let bias: Vec<f32> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out_qp = range_params(-4.0, rng.gen_range(1.0..6.0)).unwrap();
        let conv = QuantConv::new(&kernel, &bias, in_qp, out_qp, rng.gen_bool(0.5)).unwrap();
        for (name, _, s, p, rb) in flavors(x.active()) {
            let got = conv_int8(&xq, &rb, &conv).unwrap();
            assert_eq!(got.values.data(), &dense_conv_int8(&xq, &conv, s, p, rb.output())[..], "{name}");
            assert_eq!(got.qparams, out_qp);
        }
    }
}

#[test]
fn int8_conv_approximates_real_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_tensor(&mut rng, 16, 16, 0.4, 8);
    let kernel = random_kernel(&mut rng, 3, 8, 4);
    let bias = vec![0.1, -0.2, 0.3, 0.0];
    let rb = Rulebook::submanifold(x.active(), 3).unwrap();
    let real = conv_real(&x, &rb, &kernel, &bias, false).unwrap();
    let lim = real.data().iter().fold(0f32, |m, v| m.max(v.abs()));
    let out_qp = range_params(-lim, lim).unwrap();
    let in_qp = QuantParams::new(1.0 / 127.0, 0).unwrap();
    let conv = QuantConv::new(&kernel, &bias, in_qp, out_qp, false).unwrap();
    let q = conv_int8(&QuantTensor::quantize(&x, in_qp), &rb, &conv).unwrap().dequantize();
    let mean: f32 = q.data().iter().zip(real.data()).map(|(a, b)| (a - b).abs()).sum::<f32>() / q.data().len() as f32;
    assert!(mean <= 2.0 * out_qp.scale, "mean deviation {mean} vs step {}", out_qp.scale);
}

#[test]
fn max_pool_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..40 {
        let (w, h, occ) = (rng.gen_range(1..=16), rng.gen_range(1..=16), rng.gen_range(0.05..0.95));
        let x = random_tensor(&mut rng, w, h, occ, 3);
        let got = sparse_max_pool(&x, 3).unwrap();
        assert_eq!(got.data(), &brute_max_pool(&x, 3)[..]);
        assert_eq!(got.active(), x.active());
    }
}

#[test]
fn tap_counts_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..40 {
        let (w, h, occ) = (rng.gen_range(1..=32), rng.gen_range(1..=32), rng.gen_range(0.05..0.95));
        let set = Arc::new(random_active_set(&mut rng, w, h, occ));
        for (name, k, s, p, rb) in flavors(&set) {
            assert_eq!(rb.num_pairs(), brute_tap_count(&set, rb.output(), k, s, p), "{name}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn submanifold_preserves_sites(seed in any::<u64>(), w in 1u32..24, h in 1u32..24, occ in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, w, h, occ, 2);
        let y = submanifold_conv(&x, &random_kernel(&mut rng, 3, 2, 3), &[0.0; 3]).unwrap();
        prop_assert_eq!(y.active(), x.active());
    }

    #[test]
    fn downsample_follows_set_law(seed in any::<u64>(), w in 1u32..24, h in 1u32..24, occ in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = Arc::new(random_active_set(&mut rng, w, h, occ));
        let rb = Rulebook::downsample(&set).unwrap();
        prop_assert_eq!((rb.output().width(), rb.output().height()), (w.div_ceil(2), h.div_ceil(2)));
        prop_assert_eq!(&**rb.output(), &active_set_law(&set, 3, 2, 1));
    }

    #[test]
    fn conv_is_linear_in_input(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, 10, 10, 0.5, 3);
        let k = random_kernel(&mut rng, 3, 3, 2);
        let y1 = submanifold_conv(&x, &k, &[0.0; 2]).unwrap();
        let y2 = submanifold_conv(&x.map(|v| 2.0 * v), &k, &[0.0; 2]).unwrap();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            prop_assert!((2.0 * a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }
}
