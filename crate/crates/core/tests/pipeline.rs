mod common;

use common::rand_mc;
use sigmanet::datasim::{make_mask, make_phantom_volume, PhantomSpec};
use sigmanet::dc::DcConfig;
use sigmanet::domain::{seeded_rng, DcKind, MultiChannelImage, RunConfig, SamplingMask, Variant};
use sigmanet::learn::{epoch_means, examples_from_volume, fe_patch, stl_init, stl_score, stl_train, train};
use sigmanet::net::{ChannelPlan, DenoiserParams};
use sigmanet::operators::{fft_fe, ifft_fe, ForwardOperator};
use sigmanet::unrolled::{reconstruct, reconstruct_image, UnrolledModel};

fn zero_model(variant: Variant, kind: DcKind, channels: usize, steps: usize) -> UnrolledModel {
    let plan = ChannelPlan::complex(channels, 3, 8).unwrap();
    UnrolledModel::new(variant, DcConfig::new(kind), steps, vec![DenoiserParams::zeros(&plan); steps], false).unwrap()
}

fn band(k: &MultiChannelImage, start: usize, len: usize) -> MultiChannelImage {
    MultiChannelImage::new(k.channels().iter().map(|c| fft_fe(&ifft_fe(c).crop_cols(start, len))).collect()).unwrap()
}

#[test]
fn fe_patch_commutes_with_the_forward_model() {
    let mut rng = seeded_rng(300);
    let spec = PhantomSpec::shepp_logan(24, 40, 4);
    let ph = make_phantom_volume(&spec, 1, 1).unwrap();
    let mask = make_mask(24, 4.0, 4, &mut rng).unwrap();
    let (start, len) = (7, 16);
    for variant in [Variant::Sn, Variant::Pcn] {
        let full = match variant {
            Variant::Sn => ForwardOperator::sn(ph.sens.clone(), mask.clone()).unwrap(),
            Variant::Pcn => ForwardOperator::pcn(4, (24, 40), mask.clone()).unwrap(),
        };
        let patched = match variant {
            Variant::Sn => ForwardOperator::sn(ph.sens.crop_cols(start, len), mask.clone()).unwrap(),
            Variant::Pcn => ForwardOperator::pcn(4, (24, len), mask.clone()).unwrap(),
        };
        let x = rand_mc(&mut rng, full.image_channels(), 24, 40);
        let lhs = patched.forward(&x.crop_cols(start, len)).unwrap();
        let rhs = band(&full.forward(&x).unwrap(), start, len);
        let err = lhs.sub(&rhs).norm() / rhs.norm();
        assert!(err <= 1e-10, "{variant:?}: {err}");
    }
}

#[test]
fn patched_reconstruction_reproduces_the_crop() {
    let spec = PhantomSpec {
        noise_sigma: 0.0,
        ..PhantomSpec::shepp_logan(32, 48, 4)
    };
    let ph = make_phantom_volume(&spec, 2, 2).unwrap();
    let full = SamplingMask::full(32);
    for variant in [Variant::Sn, Variant::Pcn] {
        let sens = (variant == Variant::Sn).then_some(&ph.sens);
        let examples = examples_from_volume(&ph.kspace, &full, sens, 0.1).unwrap();
        let model = zero_model(variant, DcKind::Pm, if variant == Variant::Sn { 1 } else { 4 }, 3);
        for (ex, truth) in examples.iter().zip(ph.references()) {
            let p = fe_patch(ex, 20, 11).unwrap();
            let img = reconstruct_image(&model, &p.y, &p.operator(&model).unwrap()).unwrap();
            let want = truth.crop_cols(11, 20);
            let err = img.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-10 * want.max(), "{variant:?}: {err}");
        }
    }
}

#[test]
fn pm_unrolling_improves_on_zero_filled() {
    let spec = PhantomSpec {
        noise_sigma: 0.0,
        ..PhantomSpec::shepp_logan(48, 48, 4)
    };
    let ph = make_phantom_volume(&spec, 1, 3).unwrap();
    let mask = make_mask(48, 4.0, 10, &mut seeded_rng(4)).unwrap();
    let y = ph.kspace.undersample(&mask).unwrap();
    let op = ForwardOperator::sn(ph.sens.clone(), mask).unwrap();
    let model = zero_model(Variant::Sn, DcKind::Pm, 1, 9);
    let (x, tape) = reconstruct(&model, y.slice(0), &op).unwrap();
    let truth = MultiChannelImage::new(vec![ph.objects[0].clone()]).unwrap();
    let nmse = |v: &MultiChannelImage| v.sub(&truth).norm_sqr() / truth.norm_sqr();
    assert!(nmse(&x) <= nmse(tape.zero_filled()), "{} > {}", nmse(&x), nmse(tape.zero_filled()));
}

#[test]
fn tape_memory_is_linear_in_steps_and_bounded() {
    let spec = PhantomSpec::shepp_logan(64, 64, 4);
    let ph = make_phantom_volume(&spec, 1, 5).unwrap();
    let op = ForwardOperator::pcn(4, (64, 64), SamplingMask::full(64)).unwrap();
    let cfg = RunConfig {
        variant: Variant::Pcn,
        dc_kind: DcKind::Gd,
        ..RunConfig::default()
    };
    let bytes = |steps: usize| {
        let model = UnrolledModel::init(&RunConfig { steps, ..cfg.clone() }, 4, &mut seeded_rng(1)).unwrap();
        reconstruct(&model, ph.kspace.slice(0), &op).unwrap().1.stored_bytes()
    };
    let (one, nine) = (bytes(1), bytes(9));
    assert_eq!(nine, 9 * one);
    assert!(nine < 1 << 30, "{nine} bytes");
}

#[test]
fn desk_training_lowers_the_loss() {
    let spec = PhantomSpec::shepp_logan(32, 32, 4);
    let ph = make_phantom_volume(&spec, 8, 6).unwrap();
    let mask = make_mask(32, 4.0, 8, &mut seeded_rng(7)).unwrap();
    let examples = examples_from_volume(&ph.kspace, &mask, Some(&ph.sens), 0.1).unwrap();
    let cfg = RunConfig {
        steps: 3,
        epochs: 30,
        lr: 1e-3,
        n_maps: 1,
        net_features: 8,
        patch_fe: None,
        ..RunConfig::default()
    };
    let model = UnrolledModel::init(&cfg, 1, &mut seeded_rng(8)).unwrap();
    let (_, log) = train(&model, &examples, &cfg).unwrap();
    let means = epoch_means(&log);
    assert_eq!(means.len(), 30);
    assert!(means[29] < means[0], "{} >= {}", means[29], means[0]);
}

#[test]
fn stl_training_does_not_lose_ssim() {
    let spec = PhantomSpec::shepp_logan(24, 24, 2);
    let ph = make_phantom_volume(&spec, 3, 9).unwrap();
    let pairs: Vec<_> = ph.references().into_iter().map(|r| (r.clone(), r)).collect();
    let cfg = RunConfig {
        stl_features: 8,
        stl_lr: 1e-3,
        ..RunConfig::default()
    };
    let untrained = stl_init(&cfg, &mut seeded_rng(10)).unwrap();
    let (trained, log) = stl_train(&pairs, &cfg, &mut seeded_rng(10)).unwrap();
    assert_eq!(log.len(), cfg.stl_epochs * pairs.len());
    let (before, after) = (stl_score(&untrained, &pairs).unwrap(), stl_score(&trained, &pairs).unwrap());
    assert!(after >= before, "{after} < {before}");
}
