mod common;

use common::*;
use formation_core::formation::{follower_reference, leader_reference};
use formation_core::gesture::{GestureDetection, GestureFilter, GestureFilterConfig};
use formation_core::model::{FormationParams, HumanState};
use nalgebra::Vector3;
use proptest::prelude::*;
use std::f64::consts::PI;

#[test]
fn estimator_matches_textbook_filter() {
    for seed in 0..3 {
        let t = kf_oracle_trace(seed, 1000);
        assert!(t.updates > 500, "{t:?}");
        assert!(t.max_mean_diff < 1e-9, "{t:?}");
        assert!(t.max_cov_diff < 1e-9, "{t:?}");
        assert!(t.min_gain_eig >= -1e-9, "{t:?}");
    }
}

#[test]
fn range_priority_truth_table() {
    let table = priority_table();
    assert_eq!(table.len(), 7);
    for c in table {
        assert_eq!(c.selected, Some(c.expected), "uwb={} stereo={} apparent={}", c.uwb, c.stereo, c.apparent);
        assert!(c.distance_ok);
        assert!(c.cov_err < 1e-12, "{}", c.cov_err);
    }
}

#[test]
fn formation_matches_rotation_oracle() {
    let c = formation_draws(1, 2000);
    assert!(c.max_distance_err < 1e-12, "{c:?}");
    assert!(c.max_pointing_err < 1e-9, "{c:?}");
    assert!(c.max_oracle_err < 1e-12, "{c:?}");
}

#[test]
fn gesture_filter_stream_properties() {
    let p = gesture_filter_properties(3, 3000);
    assert!(p.confirmations > 100, "{p:?}");
    assert_eq!(p.debounce_violations, 0);
    assert_eq!(p.ratio_violations, 0);
    assert_eq!(p.stale_prefix_mismatches, 0);
    assert_eq!(p.replay_mismatches, 0);
}

proptest! {
    #[test]
    fn leader_reference_looks_at_the_worker(
        x in -40.0..40.0f64, y in -40.0..40.0f64, z in 0.0..3.0f64,
        phi in -PI..PI, beta in -PI..PI, gamma in -1.2..1.2f64, d in 0.5..30.0f64,
    ) {
        let p = Vector3::new(x, y, z);
        let l = leader_reference(&HumanState::stationary(p, phi), &FormationParams::new(beta, gamma, d));
        let (o, h, pitch) = oracle_leader(&p, phi, beta, gamma, d);
        prop_assert!((l.position - o).amax() < 1e-12);
        prop_assert!((wrap_deg((l.heading - h).to_degrees())).abs() < 1e-10);
        prop_assert!((l.pitch - pitch).abs() < 1e-15);
        let look = look_direction(l.heading, l.pitch);
        prop_assert!(((p - l.position) - look * d).norm() < 1e-9);
    }

    #[test]
    fn follower_reference_looks_at_the_worker(
        phi in -PI..PI, lb in -PI..PI, lg in -0.5..0.5f64,
        beta in -PI..PI, gamma in -0.5..0.5f64, d in 0.5..30.0f64,
    ) {
        let p = Vector3::new(3.0, -2.0, 0.9);
        let h = HumanState::stationary(p, phi);
        let l = leader_reference(&h, &FormationParams::new(lb, lg, 10.0));
        let f = follower_reference(&h, &l, &FormationParams::new(beta, gamma, d));
        let (o, _, _) = oracle_follower(&p, l.heading, l.pitch, beta, gamma, d);
        prop_assert!((f.position - o).amax() < 1e-12);
        let look = look_direction(f.heading, f.pitch);
        prop_assert!(((p - f.position) - look * d).norm() < 1e-9);
    }

    #[test]
    fn confirmations_respect_debounce_and_ratio(
        ids in proptest::collection::vec(0u32..5, 1..200),
        gaps in proptest::collection::vec(0.0..1.0f64, 200),
    ) {
        let cfg = GestureFilterConfig::default();
        let mut f = GestureFilter::new(cfg);
        let mut t = 0.0;
        let mut last: Option<f64> = None;
        for (id, gap) in ids.iter().zip(&gaps) {
            t += gap;
            let window: Vec<u32> = f.window().filter(|d| d.t >= t - cfg.staleness).map(|d| d.id).chain((*id != 0).then_some(*id)).collect();
            let out = f.update(Some(GestureDetection { id: *id, t }), t).unwrap();
            if let Some(c) = out.confirmed {
                prop_assert!(last.is_none_or(|l| t - l >= cfg.debounce));
                let tail = &window[window.len().saturating_sub(cfg.window)..];
                let share = tail.iter().filter(|i| **i == c).count() as f64 / tail.len() as f64;
                prop_assert!(share >= cfg.ratio_threshold);
                last = Some(t);
            }
        }
    }
}
