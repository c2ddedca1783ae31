use proptest::prelude::*;

use lungseg::evaluation::{confusion, metrics, F1Formula};
use lungseg::preprocess::{make_split, normalize_hu, resize_nearest, volume_samples};
use lungseg::reconstruct3d::{volume_to_points, PointSource};
use lungseg::unet::{build_unet, forward};
use lungseg::volume_io::{load_bundle, synth_volume, write_bundle};
use lungseg::{ConfusionCounts, PhantomSpec, UNetConfig};

fn small_spec(seed: u64, slides: usize, fraction: f64) -> PhantomSpec {
    PhantomSpec {
        slide_count: slides,
        height: 48,
        width: 40,
        lesion_radius_range: (1.5, 3.5),
        covid_slide_fraction: fraction,
        vessel_count: 3,
        seed,
        ..PhantomSpec::default()
    }
}

fn binary_pair(len: usize) -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (prop::collection::vec(0u8..2, len), prop::collection::vec(0u8..2, len))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalization_is_monotone_and_reclamp_stable(a in -5000.0f64..5000.0, b in -5000.0f64..5000.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(normalize_hu(lo) <= normalize_hu(hi));
        let n = normalize_hu(a);
        prop_assert!((0.0..=1.0).contains(&n));
        prop_assert_eq!(n.clamp(0.0, 1.0), n);
    }

    #[test]
    fn resize_introduces_no_new_values(
        h in 1usize..20, w in 1usize..20, oh in 1usize..40, ow in 1usize..40, seed in any::<u64>()
    ) {
        let src: Vec<u32> = (0..h * w).map(|i| (i as u64 ^ seed) as u32 % 7).collect();
        let out = resize_nearest(&src, h, w, oh, ow).unwrap();
        prop_assert_eq!(out.len(), oh * ow);
        prop_assert!(out.iter().all(|v| src.contains(v)));
        prop_assert_eq!(resize_nearest(&src, h, w, h, w).unwrap(), src);
    }

    #[test]
    fn counts_partition_the_pixels((pred, truth) in binary_pair(100)) {
        let c = confusion(&pred, &truth).unwrap();
        prop_assert_eq!(c.total(), 100);
        prop_assert_eq!(c.tp + c.fn_, truth.iter().filter(|&&t| t == 1).count() as u64);
        prop_assert_eq!(c.tp + c.fp, pred.iter().filter(|&&p| p == 1).count() as u64);
    }

    #[test]
    fn metric_bounds_symmetry_and_half_rule(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 0u64..50) {
        prop_assume!(tp + fp + fn_ + tn > 0);
        let c = ConfusionCounts { tp, fp, fn_, tn };
        let s = metrics(&c, F1Formula::Standard);
        for v in [s.accuracy, s.precision, s.recall, s.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let swapped = metrics(&ConfusionCounts { fp: fn_, fn_: fp, ..c }, F1Formula::Standard);
        prop_assert_eq!(swapped.f1, s.f1);
        prop_assert_eq!(metrics(&c, F1Formula::Paper).f1, s.f1 / 2.0);
        prop_assert!(s.f1 <= s.precision.max(s.recall) + 1e-15);
        prop_assert!(s.f1 + 1e-15 >= s.precision.min(s.recall));
    }

    #[test]
    fn forward_stays_in_open_unit_interval(
        values in prop::collection::vec(-1e4f32..1e4, 8 * 8 * 2), seed in 0u64..1000
    ) {
        let m = build_unet(&UNetConfig::new(1, 2, 8), seed).unwrap();
        let out = forward(&m, &values).unwrap();
        prop_assert!(out.iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn phantom_samples_meet_their_invariants(seed in any::<u64>(), slides in 1usize..6, fraction in 0.0f64..=1.0) {
        let v = synth_volume(&small_spec(seed, slides, fraction)).unwrap();
        let covid = v.covid_masks().as_slice();
        let lung = v.lung_masks().as_slice();
        prop_assert!(covid.iter().zip(lung).all(|(&c, &l)| c == 0 || l == 1));
        let positive_slides = (0..slides).filter(|&i| v.covid_masks().slice(i).contains(&1)).count();
        prop_assert_eq!(positive_slides, (fraction * slides as f64).floor() as usize);

        for s in volume_samples(&v, 32).unwrap() {
            prop_assert!(s.input.chunks_exact(2).all(|px| (0.0..=1.0).contains(&px[0]) && (px[1] == 0.0 || px[1] == 1.0)));
            prop_assert!(s.target.iter().all(|&t| t <= 1));
            prop_assert_eq!(s.has_covid, s.target.contains(&1));
        }
    }

    #[test]
    fn bundles_round_trip(seed in any::<u64>(), slides in 1usize..4) {
        let v = synth_volume(&small_spec(seed, slides, 0.5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&v, dir.path()).unwrap();
        prop_assert_eq!(load_bundle(dir.path()).unwrap(), v);
    }

    #[test]
    fn point_rows_match_mask_counts(seed in any::<u64>()) {
        let v = synth_volume(&small_spec(seed, 3, 0.7)).unwrap();
        let count = |m: &[u8]| m.iter().filter(|&&x| x == 1).count();
        prop_assert_eq!(volume_to_points(&v, PointSource::Ct, 1.0).unwrap().rows.len(), count(v.lung_masks().as_slice()));
        prop_assert_eq!(
            volume_to_points(&v, PointSource::GroundTruth, 1.0).unwrap().rows.len(),
            count(v.covid_masks().as_slice())
        );
    }

    #[test]
    fn splits_tile_the_sample_set(seed in any::<u64>(), n_train in 0usize..9, n_val in 0usize..5) {
        let samples = volume_samples(&synth_volume(&small_spec(seed, 16, 0.5)).unwrap(), 16).unwrap();
        let split = make_split(samples.clone(), n_train, n_val, seed).unwrap();
        prop_assert_eq!(split.train.len() + split.validation.len() + split.test.len(), samples.len());
        let mut got: Vec<_> = split.assignments().into_iter().map(|(_, i, _)| i).collect();
        got.sort();
        prop_assert_eq!(got, (0..16).collect::<Vec<_>>());
    }
}
