use ndarray::{Array2, Array3, ArrayD, IxDyn};
use proptest::prelude::*;

use pae_core::generator::time_shift;
use pae_core::harness::config::{RunConfig, SpectrumMode};
use pae_core::harness::container::{read_tensor, write_tensor, StoredTensor};
use pae_core::harness::fid::fid;
use pae_core::harness::sweep::pearson;
use pae_core::metrics::{erank, nmi};
use pae_core::tokenizer::rms_normalize;

fn matrix(rows: std::ops::Range<usize>, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    rows.prop_flat_map(move |n| {
        prop::collection::vec(-5.0f64..5.0, n * cols)
            .prop_map(move |v| Array2::from_shape_vec((n, cols), v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rms_normalize_lands_on_shell(v in prop::collection::vec(-1e3f64..1e3, 4 * 9), scale in 1e-3f64..1e3) {
        let z = Array3::from_shape_vec((4, 3, 3), v.iter().map(|x| x * scale).collect()).unwrap();
        let (code, zero) = rms_normalize(&z, 1e-6).unwrap();
        prop_assert!(code.on_shell(1e-3));
        for (r, c) in zero {
            prop_assert!((0..4).all(|k| code.z[[k, r, c]] == 0.0));
        }
    }

    #[test]
    fn container_round_trips(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let vals: Vec<f64> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 / 7.0 - 50.0).collect();
        let a = ArrayD::from_shape_vec(IxDyn(&dims), vals).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("t.paet");
        write_tensor(&path, &StoredTensor::from_array(&a)).unwrap();
        prop_assert_eq!(read_tensor(&path).unwrap().to_array().unwrap(), a);
    }

    #[test]
    fn fid_is_symmetric_and_non_negative(a in matrix(3..12, 3), b in matrix(3..12, 3)) {
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        prop_assert!(ab >= -1e-9);
        prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab.abs()));
        prop_assert!(fid(&a, &a).unwrap().abs() < 1e-6);
    }

    #[test]
    fn nmi_is_bounded_and_symmetric(pairs in prop::collection::vec((0usize..4, 0usize..4), 2..40)) {
        let (y, z): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let a = nmi(&y, &z).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - nmi(&z, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pearson_is_bounded(pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..30)) {
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        if let Some(r) = pearson(&x, &y) {
            prop_assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn erank_is_bounded(x in matrix(2..20, 5)) {
        let e = erank(&x, SpectrumMode::Singular).unwrap().value;
        prop_assert!(e >= 1.0 / 5.0 - 1e-12 && e <= 1.0 + 1e-12);
    }

    #[test]
    fn time_warp_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0, s in 0.05f64..5.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(time_shift(lo, s) <= time_shift(hi, s));
        prop_assert_eq!(time_shift(0.0, s), 0.0);
        prop_assert_eq!(time_shift(1.0, s), 1.0);
    }

    #[test]
    fn config_round_trips(seed in 0..=i64::MAX as u64, steps in 1usize..1000, sigma in 0.01f64..2.0) {
        let mut c = RunConfig::toy();
        c.seed = seed;
        c.tokenizer.optim.steps = steps;
        c.metrics.sigma = sigma;
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        prop_assert_eq!(back, c);
    }
}
