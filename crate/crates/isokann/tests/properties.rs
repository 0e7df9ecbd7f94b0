//! Randomized invariants over the numeric kernels. These pin structural
//! facts (ranges, order, idempotence, exact recovery) rather than values.

use proptest::prelude::*;

use isokann::koopman::{affine_fit, shift_scale, ScaleMode};
use isokann::learn::gauge_align;
use isokann::rng::{domain, SplitRng};
use isokann::sampling::{ess_from_log_weights, ess_from_weights};

fn spread_of(values: &[f64]) -> f64 {
    let mn = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx - mn
}

proptest! {
    #[test]
    fn shift_scale_maps_onto_unit_interval_preserving_order(
        values in prop::collection::vec(-1e6f64..1e6, 2..64),
    ) {
        prop_assume!(spread_of(&values) > 1e-9);
        let (scaled, params) = shift_scale(&values, ScaleMode::MinMax, 1.0).unwrap();

        let mn = scaled.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(mn, 0.0);
        prop_assert_eq!(mx, 1.0);
        prop_assert!(scaled.iter().all(|&s| (0.0..=1.0).contains(&s)));

        for (i, &vi) in values.iter().enumerate() {
            for (j, &vj) in values.iter().enumerate() {
                if vi <= vj {
                    prop_assert!(scaled[i] <= scaled[j]);
                }
            }
        }

        // a is the spread, b the minimum
        prop_assert!((params.a - spread_of(&values)).abs() <= 1e-9 * params.a.abs());
        prop_assert!((params.b - values.iter().cloned().fold(f64::INFINITY, f64::min)).abs() <= 1e-9 * (1.0 + params.b.abs()));
    }

    #[test]
    fn shift_scale_is_idempotent(
        values in prop::collection::vec(-1e3f64..1e3, 2..64),
    ) {
        prop_assume!(spread_of(&values) > 1e-9);
        let (scaled, _) = shift_scale(&values, ScaleMode::MinMax, 1.0).unwrap();
        let (rescaled, params) = shift_scale(&scaled, ScaleMode::MinMax, 1.0).unwrap();
        // already normalized input: S is the identity with a=1, b=0
        prop_assert_eq!(params.a, 1.0);
        prop_assert_eq!(params.b, 0.0);
        prop_assert_eq!(rescaled, scaled);
    }

    #[test]
    fn ess_stays_between_one_and_m(
        weights in prop::collection::vec(1e-12f64..1e6, 1..256),
    ) {
        let m = weights.len() as f64;
        let ess = ess_from_weights(&weights);
        prop_assert!(ess >= 1.0 - 1e-9, "ess {ess}");
        prop_assert!(ess <= m * (1.0 + 1e-12), "ess {ess} > m {m}");
    }

    #[test]
    fn ess_is_invariant_under_log_weight_shifts(
        log_weights in prop::collection::vec(-30.0f64..30.0, 1..256),
        shift in -200.0f64..200.0,
    ) {
        let base = ess_from_log_weights(&log_weights);
        let shifted: Vec<f64> = log_weights.iter().map(|lw| lw + shift).collect();
        let moved = ess_from_log_weights(&shifted);
        prop_assert!((base - moved).abs() <= 1e-6 * base, "{base} vs {moved}");
    }

    #[test]
    fn affine_fit_recovers_noiseless_constants(
        seed in 0u64..1_000_000,
        a in 0.05f64..0.95,
        b in -1.0f64..1.0,
        n in 3usize..64,
    ) {
        let mut rng = SplitRng::from_key(seed, domain::SIMULATION, 0, 0);
        let chi: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        prop_assume!(spread_of(&chi) > 1e-6);
        let y: Vec<f64> = chi.iter().map(|c| a * c + b).collect();
        let fit = affine_fit(&chi, &y, 1.0).unwrap();
        prop_assert!((fit.params.a - a).abs() <= 1e-8, "a {} vs {a}", fit.params.a);
        prop_assert!((fit.params.b - b).abs() <= 1e-8, "b {} vs {b}", fit.params.b);
        prop_assert!(fit.residual_rms <= 1e-8);
    }

    #[test]
    fn gauge_align_is_stable_after_one_pass(
        chi_a in prop::collection::vec(0.0f64..1.0, 1..64),
        flip_mask in any::<bool>(),
    ) {
        let chi_b: Vec<f64> = if flip_mask {
            chi_a.iter().map(|v| 1.0 - v).collect()
        } else {
            chi_a.clone()
        };
        let aligned = gauge_align(&chi_a, &chi_b);
        // aligning an already-aligned vector changes nothing
        let twice = gauge_align(&chi_a, &aligned);
        prop_assert_eq!(&twice, &aligned);
        // and the aligned vector is no farther from chi_a than chi_b was
        let dist = |u: &[f64], v: &[f64]| -> f64 {
            u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum()
        };
        prop_assert!(dist(&chi_a, &aligned) <= dist(&chi_a, &chi_b) + 1e-12);
    }
}
