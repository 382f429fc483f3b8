use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;

fn sample(h: usize, w: usize, seed: u64) -> Sample {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::from_fn([1, 3, h, w], |_| r.random());
    let mask = Tensor::from_fn([1, 1, h, w], |i| ((i / w) > h / 3 && (i % w) < 2 * w / 3) as u8 as f32);
    let depth = Tensor::from_fn([1, 1, h, w], |i| (i % w) as f32 / w as f32);
    Sample::new(format!("s{seed}"), image, mask, Some(depth), Condition::Clean).unwrap()
}

#[test]
fn disabled_pipeline_is_identity() {
    let s = sample(32, 32, 1);
    for i in 0..20 {
        let (out, ops) = apply_pipeline(&DegradationSpec::disabled(), &s, 7, i).unwrap();
        assert!(ops.is_empty());
        assert_eq!((&out.image, &out.mask, &out.depth), (&s.image, &s.mask, &s.depth));
        assert_eq!(out.condition, Condition::Noisy);
    }
}

#[test]
fn firing_rates_match_probabilities() {
    let spec = DegradationSpec::default();
    let n = 10_000u64;
    for (op, &p) in spec.probs.iter().enumerate() {
        let hits = (0..n).filter(|&i| fires(&spec, 3, i, op)).count() as f64;
        let rate = hits / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((rate - p).abs() <= 3.0 * se, "{} rate {rate} vs {p}", OPERATORS[op]);
        if p == 1.0 {
            assert_eq!(hits, n as f64);
        }
    }
    // the plan agrees with the firing draw
    for i in 0..50 {
        let ops = plan(&spec, 3, i, 64, 64).unwrap();
        let names: Vec<&str> = ops.iter().map(Applied::name).collect();
        let expect: Vec<&str> = (0..8)
            .filter(|&op| fires(&spec, 3, i, op))
            .map(|op| OPERATORS[op])
            .collect();
        assert_eq!(names, expect);
    }
}

#[test]
fn drawn_parameters_stay_in_range() {
    let spec = DegradationSpec {
        probs: [1.0; 8],
        ..DegradationSpec::default()
    };
    for i in 0..300 {
        for a in plan(&spec, 9, i, 224, 224).unwrap() {
            match a {
                Applied::MotionBlur { kernel, angle } => {
                    assert!((3..=29).contains(&kernel) && kernel % 2 == 1);
                    assert!((0.0..180.0).contains(&angle));
                }
                Applied::GaussianBlur { kernel, .. } => assert!([3, 5, 7].contains(&kernel)),
                Applied::Brightness { alpha } => assert!((-0.1..=0.2).contains(&alpha)),
                Applied::Contrast { beta } => assert!((-0.2..=0.2).contains(&beta)),
                Applied::Jpeg { quality } => assert!((30..=70).contains(&quality)),
                Applied::LightSpots { spots, intensity } => {
                    assert!((1..=3).contains(&spots.len()));
                    assert!(spots.iter().all(|s| (5.0..=40.0).contains(&s.radius)));
                    assert_eq!(intensity, 0.85);
                }
                Applied::Fog { coef } => assert!((0.5..=0.8).contains(&coef)),
                Applied::OpticalDistortion { k, shift_y, shift_x } => {
                    assert!(k.abs() <= 0.05 && shift_y.abs() <= 0.05 && shift_x.abs() <= 0.05)
                }
            }
        }
    }
    // at 64 px the pixel ranges shrink with the image
    for i in 0..300 {
        for a in plan(&spec, 9, i, 64, 64).unwrap() {
            if let Applied::MotionBlur { kernel, .. } = a {
                assert!((3..=9).contains(&kernel) && kernel % 2 == 1);
            }
            if let Applied::LightSpots { spots, .. } = a {
                assert!(spots.iter().all(|s| s.radius <= 40.0 * 64.0 / 224.0 + 1e-9));
            }
        }
    }
}

#[test]
fn literal_sigma_toggle() {
    let spec = DegradationSpec {
        probs: [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        gaussian_literal_sigma: true,
        reference_size: 0,
        ..DegradationSpec::default()
    };
    for i in 0..20 {
        let ops = plan(&spec, 1, i, 64, 64).unwrap();
        let Applied::GaussianBlur { kernel, sigma } = ops[0] else {
            panic!()
        };
        assert!([3.0, 5.0, 7.0].contains(&sigma));
        assert_eq!(kernel, gaussian_size_for_sigma(sigma));
    }
}

#[test]
fn outputs_respect_ranges() {
    let spec = DegradationSpec {
        probs: [1.0; 8],
        ..DegradationSpec::default()
    };
    let s = sample(64, 64, 2);
    for i in 0..6 {
        let (out, _) = apply_pipeline(&spec, &s, 4, i).unwrap();
        out.validate().unwrap();
        assert_ne!(out.image, s.image);
    }
}

#[test]
fn corpus_is_identical_across_runs_and_thread_counts() {
    let spec = DegradationSpec::default();
    let clean: Vec<Sample> = (0..12).map(|i| sample(32, 32, i)).collect();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| degrade_corpus(&spec, &clean, 99).unwrap())
    };
    let a = run(1);
    assert_eq!(a, run(4));
    assert_eq!(a, run(1));
    // each item depends only on its own key
    let (one, ops) = apply_pipeline(&spec, &clean[5], 99, 5).unwrap();
    assert_eq!(one, a[5].0);
    assert_eq!(ops, a[5].1.ops);
}

#[test]
fn manifest_round_trip_and_replay() {
    let spec = DegradationSpec::default();
    let clean: Vec<Sample> = (0..6).map(|i| sample(32, 32, i)).collect();
    for (i, (noisy, entry)) in degrade_corpus(&spec, &clean, 5).unwrap().into_iter().enumerate() {
        let back = ManifestEntry::from_line(&entry.to_line()).unwrap();
        assert_eq!(back, entry);
        assert!(back.matches_spec(&spec, 32, 32).unwrap());
        assert_eq!(back.replay(&clean[i]).unwrap(), noisy);
    }
    assert!(matches!(ManifestEntry::from_line("{"), Err(Error::Format(_))));
}

#[test]
fn config_keys() {
    let mut spec = DegradationSpec::default();
    let text = "degrade.fog.p = 0.5\ndegrade.motion_blur.kernel = 3, 9\ndegrade.gaussian_blur.literal_sigma = true\n\
                degrade.reference_size = 64\nother = 1\n";
    let mut unhandled = 0;
    for e in kv::parse(text).unwrap() {
        if !spec.apply(&e).unwrap() {
            unhandled += 1;
        }
    }
    assert_eq!(unhandled, 1);
    assert_eq!(spec.probs[6], 0.5);
    assert_eq!(spec.motion_kernel, (3, 9));
    assert!(spec.gaussian_literal_sigma);
    assert_eq!(spec.reference_size, 64);
    let bad = kv::parse("degrade.nope.p = 1").unwrap();
    assert!(matches!(spec.apply(&bad[0]), Err(Error::Config(_))));
    let bad = DegradationSpec {
        motion_kernel: (4, 10),
        ..DegradationSpec::default()
    };
    assert!(bad.validate().is_err());
    let bad = DegradationSpec {
        probs: [1.5; 8],
        ..DegradationSpec::default()
    };
    assert!(matches!(plan(&bad, 0, 0, 8, 8), Err(Error::Config(_))));
}

#[test]
fn odd_rounding() {
    assert_eq!(odd_at_least3(0.3), 3);
    assert_eq!(odd_at_least3(4.9), 5);
    assert_eq!(odd_at_least3(8.3), 9);
    assert_eq!(odd_at_least3(29.0), 29);
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn blur_kernels_sum_to_one(half in 1usize..12, angle in -180.0f64..180.0, sigma in 0.3f64..8.0) {
            let k = 2 * half + 1;
            let m: f64 = motion_kernel(k, angle).unwrap().iter().sum();
            prop_assert!((m - 1.0).abs() < 1e-6);
            let g: f64 = gaussian_kernel1d(k, sigma).unwrap().iter().sum();
            prop_assert!((g - 1.0).abs() < 1e-6);
        }

        #[test]
        fn constants_are_fixed_by_blurs_and_contrast(v in 0.0f32..=1.0, half in 1usize..5, angle in 0.0f64..360.0, beta in -0.2f64..0.2) {
            let img = Tensor::full([1, 3, 12, 10], v);
            let k = 2 * half + 1;
            for out in [
                motion_blur(&img, k, angle).unwrap(),
                gaussian_blur(&img, k, gaussian_sigma(k)).unwrap(),
                contrast(&img, beta),
            ] {
                prop_assert!(out.max_abs_diff(&img) < 1e-6);
            }
        }

        #[test]
        fn pipeline_is_pure_and_in_range(seed in any::<u64>(), index in any::<u64>(), all in any::<bool>()) {
            let spec = if all {
                DegradationSpec { probs: [1.0; 8], ..DegradationSpec::default() }
            } else {
                DegradationSpec::default()
            };
            let s = sample(24, 32, seed % 97);
            let a = apply_pipeline(&spec, &s, seed, index).unwrap();
            prop_assert_eq!(&a, &apply_pipeline(&spec, &s, seed, index).unwrap());
            a.0.validate().unwrap();
            prop_assert!(a.0.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
