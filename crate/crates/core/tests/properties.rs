//! Property tests over the core invariants.

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use sslseg::augment::{apply_dropout, sample_dropout_mask, AugmentConfig};
use sslseg::datasets::make_split_plan;
use sslseg::losses::{tversky_index, tversky_loss, TverskyParams};
use sslseg::metrics::{compute_metrics, ConfusionCounts};
use sslseg::rng::seeded_rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_plan_invariants_hold_or_error(
        n in 8usize..200,
        fraction in 0.05f64..0.5,
        n_folds in 2usize..8,
        seed in 0u64..1000,
    ) {
        let ids: Vec<String> = (0..n).map(|i| format!("id{i:04}")).collect();
        match make_split_plan(&ids, fraction, n_folds, seed) {
            Ok(plan) => {
                plan.validate(Some(&ids)).expect("invariants");
                let expected_test = (fraction * n as f64 + 0.5).floor() as usize;
                prop_assert_eq!(plan.test_ids.len(), expected_test);
                let max = plan.folds.iter().map(Vec::len).max().unwrap();
                let min = plan.folds.iter().map(Vec::len).min().unwrap();
                prop_assert!(max - min <= 1);
                // Determinism across calls.
                let again = make_split_plan(&ids, fraction, n_folds, seed).unwrap();
                prop_assert_eq!(plan, again);
            }
            Err(_) => {
                // Only legitimate when the remainder cannot fill the folds.
                let test = (fraction * n as f64 + 0.5).floor() as usize;
                prop_assert!(test == 0 || n - test < n_folds || n < n_folds + 1);
            }
        }
    }

    #[test]
    fn dropout_mask_equals_union_of_boxes(
        h in 4usize..48,
        w in 4usize..48,
        lo in 0usize..3,
        extra in 0usize..4,
        max_side in 1usize..40,
        seed in 0u64..1000,
    ) {
        let cfg = AugmentConfig {
            dropout_patch_count_range: (lo, lo + extra),
            max_patch_side: max_side,
            ..AugmentConfig::default()
        };
        let mut rng = seeded_rng(seed);
        let m = sample_dropout_mask(h, w, &cfg, &mut rng);
        let mut union = vec![false; h * w];
        prop_assert!(m.patch_boxes.len() >= lo && m.patch_boxes.len() <= lo + extra);
        for b in &m.patch_boxes {
            prop_assert!(b.top + b.height <= h);
            prop_assert!(b.left + b.width <= w);
            prop_assert!(b.height >= 1 && b.height <= max_side.min(h));
            prop_assert!(b.width >= 1 && b.width <= max_side.min(w));
            for y in b.top..b.top + b.height {
                for x in b.left..b.left + b.width {
                    union[y * w + x] = true;
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                prop_assert_eq!(m.mask[[y, x]] == 1.0, union[y * w + x]);
            }
        }
    }

    #[test]
    fn dropout_application_is_idempotent_and_local(
        h in 4usize..32,
        w in 4usize..32,
        seed in 0u64..1000,
    ) {
        let cfg = AugmentConfig {
            dropout_patch_count_range: (1, 4),
            max_patch_side: 10,
            ..AugmentConfig::default()
        };
        let mut rng = seeded_rng(seed);
        let m = sample_dropout_mask(h, w, &cfg, &mut rng);
        let image = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            ((c + 31 * y + 17 * x) % 97) as f64 / 97.0
        });
        let once = apply_dropout(&image, &m).unwrap();
        let twice = apply_dropout(&once, &m).unwrap();
        prop_assert_eq!(&once, &twice);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    if m.mask[[y, x]] == 0.0 {
                        prop_assert_eq!(once[[c, y, x]], image[[c, y, x]]);
                    } else {
                        prop_assert_eq!(once[[c, y, x]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn tversky_stays_in_unit_interval(
        seed in 0u64..2000,
        alpha in 0.05f64..2.0,
        beta in 0.05f64..2.0,
    ) {
        use rand::RngExt;
        let mut rng = seeded_rng(seed);
        let pred = Array2::from_shape_fn((6, 6), |_| rng.random::<f64>());
        let gt = Array2::from_shape_fn((6, 6), |_| f64::from(rng.random::<f64>() > 0.5));
        let p = TverskyParams { alpha, beta, smooth: 1.0 };
        let ti = tversky_index(pred.view(), gt.view(), &p).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ti), "ti = {}", ti);

        let pred3 = Array3::from_shape_fn((2, 6, 6), |_| rng.random::<f64>());
        let gt3 = Array3::from_shape_fn((2, 6, 6), |_| f64::from(rng.random::<f64>() > 0.5));
        let loss = tversky_loss(&pred3, &gt3, &p).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&loss), "loss = {}", loss);
    }

    #[test]
    fn metric_values_stay_in_unit_interval(
        tp in 0u64..500,
        fp in 0u64..500,
        fng in 0u64..500,
        tn in 0u64..500,
    ) {
        let m = compute_metrics(&ConfusionCounts {
            true_pos: tp,
            false_pos: fp,
            false_neg: fng,
            true_neg: tn,
        });
        for v in [m.dsc, m.miou, m.precision, m.recall] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.miou <= m.dsc + 1e-15);
    }
}
