use dms_core::train::EvictionTiming;
use dms_core::verify::{h2o_oracle, mask_decode_random, mask_decode_sweep, quest_soundness, tova_oracle};

#[test]
fn delayed_mask_matches_paged_decode() {
    let r = mask_decode_sweep(10, 32, 20, &[1, 2, 4], 11);
    assert!(r.max_abs_diff <= 1e-12, "{r:?}");
    assert_eq!(r.cases, 3 * ((1 << 11) - 2 + 22 * 20));
}

#[test]
fn long_random_streams_match() {
    let r = mask_decode_random(128, 16, 40, EvictionTiming::Delayed, 12);
    assert!(r.max_abs_diff <= 1e-12, "{r:?}");
}

#[test]
fn immediate_mask_matches_immediate_policy() {
    for w in [1, 3, 8] {
        let r = mask_decode_random(48, w, 40, EvictionTiming::Immediate, 13 + w as u64);
        assert!(r.max_abs_diff <= 1e-12, "w={w} {r:?}");
    }
}

#[test]
fn tova_matches_brute_force() {
    let r = tova_oracle(500, 21);
    assert_eq!(r.mismatches, 0, "{r:?}");
    assert_eq!(r.budget_violations, 0, "{r:?}");
    assert!(r.evictions > 1000, "{r:?}");
}

#[test]
fn h2o_matches_brute_force() {
    let r = h2o_oracle(500, 22);
    assert_eq!(r.mismatches, 0, "{r:?}");
    assert_eq!(r.budget_violations, 0, "{r:?}");
    assert!(r.evictions > 1000, "{r:?}");
}

#[test]
fn quest_bound_is_sound() {
    let r = quest_soundness(20_000, 23);
    assert_eq!(r.violations, 0);
    assert_eq!(r.checks, 9usize.pow(5) + 20_000);
}
