mod common;

use common::{adjoint_error, rand_mc, rand_operator};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::Rng;
use sigmanet::domain::{seeded_rng, SamplingMask, Variant};
use sigmanet::operators::{fft2c, ifft2c, rss, ForwardOperator};

#[test]
fn adjoint_dot_product_on_random_instances() {
    let mut rng = seeded_rng(100);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let variant = if i % 2 == 0 { Variant::Sn } else { Variant::Pcn };
        let q = [1, 2, 4][rng.gen_range(0..3)];
        let n_maps = rng.gen_range(1..=2);
        let h = rng.gen_range(8..=32);
        let w = rng.gen_range(8..=32);
        let op = rand_operator(&mut rng, variant, q, n_maps, h, w);
        worst = worst.max(adjoint_error(&op, &mut rng));
    }
    assert!(worst <= 1e-10, "{worst}");
}

#[test]
fn fft_round_trip_and_parseval() {
    let mut rng = seeded_rng(101);
    for (h, w) in [(8, 8), (9, 12), (15, 7)] {
        let x = rand_mc(&mut rng, 1, h, w).channel(0).clone();
        let k = fft2c(&x);
        assert!((k.norm_sqr() - x.norm_sqr()).abs() <= 1e-12 * x.norm_sqr());
        let back = ifft2c(&k);
        let err: f64 = back.data().iter().zip(x.data()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err <= 1e-13, "{h}x{w}: {err}");
    }
}

#[test]
fn full_mask_pcn_is_unitary() {
    let mut rng = seeded_rng(102);
    let op = ForwardOperator::pcn(3, (10, 12), SamplingMask::full(10)).unwrap();
    let x = rand_mc(&mut rng, 3, 10, 12);
    let back = op.adjoint(&op.forward(&x).unwrap()).unwrap();
    assert!(back.sub(&x).norm() <= 1e-12 * x.norm());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn forward_is_linear(seed in any::<u64>(), a_re in -2.0..2.0f64, a_im in -2.0..2.0f64, sn in any::<bool>()) {
        let mut rng = seeded_rng(seed);
        let variant = if sn { Variant::Sn } else { Variant::Pcn };
        let op = rand_operator(&mut rng, variant, 2, 2, 8, 10);
        let c = op.image_channels();
        let x = rand_mc(&mut rng, c, 8, 10);
        let z = rand_mc(&mut rng, c, 8, 10);
        let a = Complex64::new(a_re, a_im);
        let mut comb = z.clone();
        comb.axpy(a, &x);
        let lhs = op.forward(&comb).unwrap();
        let mut rhs = op.forward(&z).unwrap();
        rhs.axpy(a, &op.forward(&x).unwrap());
        prop_assert!(lhs.sub(&rhs).norm() <= 1e-12 * (1.0 + rhs.norm()));
    }

    #[test]
    fn rss_ignores_a_global_phase(seed in any::<u64>(), phi in 0.0..std::f64::consts::TAU, c in 1usize..5) {
        let mut rng = seeded_rng(seed);
        let x = rand_mc(&mut rng, c, 6, 7);
        let rot = Complex64::from_polar(1.0, phi);
        let a = rss(&x);
        let b = rss(&x.map(move |z| z * rot));
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u));
        }
    }

    #[test]
    fn rss_is_nonnegative_and_homogeneous(seed in any::<u64>(), s in 0.0..10.0f64) {
        let mut rng = seeded_rng(seed);
        let x = rand_mc(&mut rng, 3, 5, 5);
        let a = rss(&x);
        let b = rss(&x.scale(s));
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!(*u >= 0.0);
            prop_assert!((s * u - v).abs() <= 1e-12 * (1.0 + v));
        }
    }
}
