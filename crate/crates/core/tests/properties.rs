//! Property-based invariants.

use fuse_ate_core::csv_io::{ingest_csv_reader, write_sample_csv, ColumnMapping};
use fuse_ate_core::dgp::{expit, Observation, Sample};
use fuse_ate_core::link::CovariateFn;
use fuse_ate_core::sensitivity::{scale_link_from_thresholds, SeverityThresholds};
use proptest::prelude::*;

fn observation_strategy(p: usize) -> impl Strategy<Value = Observation> {
    (
        prop::collection::vec(-1e6f64..1e6, p),
        0u8..2,
        0u8..2,
        -1e9f64..1e9,
    )
        .prop_map(|(x, s, t, v)| Observation { x, s, t, v })
}

fn sample_strategy() -> impl Strategy<Value = Sample> {
    prop::collection::vec(observation_strategy(4), 2..40).prop_filter_map(
        "both strata present",
        |mut obs| {
            obs[0].s = 0;
            let last = obs.len() - 1;
            obs[last].s = 1;
            Sample::from_observations(obs).ok()
        },
    )
}

proptest! {
    #[test]
    fn expit_complement_and_monotonicity(x in -600.0f64..600.0, dx in 0.001f64..50.0) {
        let e = expit(x);
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert!((e + expit(-x) - 1.0).abs() < 1e-12);
        prop_assert!(expit(x + dx) >= e);
    }

    #[test]
    fn csv_round_trip_identity(sample in sample_strategy()) {
        let mut buf = Vec::new();
        write_sample_csv(&sample, &mut buf).unwrap();
        let back = ingest_csv_reader(buf.as_slice(), &ColumnMapping::canonical(sample.p())).unwrap();
        prop_assert_eq!(sample, back);
    }

    #[test]
    fn through_origin_links_are_inverse_consistent(
        scale in 0.05f64..20.0,
        lows in prop::collection::vec(0.5f64..100.0, 2..6),
    ) {
        // Build strictly increasing ranges from positive gaps, then a second
        // scale that is an exact multiple; the two fitted slopes must be
        // reciprocal.
        let mut ranges = Vec::new();
        let mut cursor = 0.0;
        for gap in &lows {
            let low = cursor + 0.25;
            let high = low + gap;
            ranges.push((low, Some(high)));
            cursor = high;
        }
        let a = SeverityThresholds { category_ranges: ranges.clone(), anchored_at_zero: true };
        let b = SeverityThresholds {
            category_ranges: ranges
                .iter()
                .map(|&(l, h)| (scale * l, h.map(|h| scale * h)))
                .collect(),
            anchored_at_zero: true,
        };
        let (ab, _) = scale_link_from_thresholds(&a, &b, true).unwrap();
        let (ba, _) = scale_link_from_thresholds(&b, &a, true).unwrap();
        prop_assert!((ab * ba - 1.0).abs() < 1e-10, "ab {} ba {}", ab, ba);
        prop_assert!((ab * scale - 1.0).abs() < 1e-9);
    }

    #[test]
    fn covariate_fn_scaling_is_pointwise(
        k in -5.0f64..5.0,
        intercept in -10.0f64..10.0,
        slope in -10.0f64..10.0,
        x1 in -20.0f64..20.0,
    ) {
        let f = CovariateFn::LinearX1 { intercept, slope };
        let x = [x1, 0.0, 0.0];
        prop_assert!((f.scaled(k).eval(&x) - k * f.eval(&x)).abs() <= 1e-9 * (1.0 + f.eval(&x).abs() * k.abs()));
    }
}
