use artemis_core::gan::{bce, diversity_loss, smooth_labels};
use artemis_core::io::quantize;
use candle_core::{Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scalar(t: Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn diversity_loss_is_never_positive(k in 2usize..5, seed in any::<u64>()) {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = artemis_core::params::gaussian_tensor(&mut rng, (k, 6), candle_core::DType::F64, &dev).unwrap();
        let x = (artemis_core::params::gaussian_tensor(&mut rng, (k, 3, 4, 4), candle_core::DType::F64, &dev).unwrap() * 10.0).unwrap();
        let l = scalar(diversity_loss(&z, &x).unwrap());
        prop_assert!(l <= 0.0 && l.is_finite());
    }

    #[test]
    fn bce_is_non_negative(p in proptest::collection::vec(0.0f64..=1.0, 1..16), hot in any::<bool>()) {
        let dev = Device::Cpu;
        let t = vec![if hot { 1.0 } else { 0.0 }; p.len()];
        let l = scalar(bce(&Tensor::new(p.as_slice(), &dev).unwrap(), &Tensor::new(t.as_slice(), &dev).unwrap()).unwrap());
        prop_assert!(l >= 0.0 && l.is_finite());
    }

    #[test]
    fn smoothed_labels_stay_in_unit_interval(n in 1usize..64, ones in any::<bool>(), sigma in 0.0f64..2.0, seed in any::<u64>()) {
        let labels = vec![if ones { 1.0f32 } else { 0.0 }; n];
        let out = smooth_labels(&labels, sigma, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.len(), n);
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn quantize_is_monotone_and_clamped(a in -1e3f32..1e3, b in -1e3f32..1e3) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quantize(lo) <= quantize(hi));
        if (0.0..=255.0).contains(&a) {
            prop_assert!((quantize(a) as f32 - a).abs() <= 0.5);
        }
    }
}
