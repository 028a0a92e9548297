mod support;

use support::checks::{decoder_check, equation_checks, metric_checks, precision_check};

#[test]
fn equations_match_scalar_loops() {
    for c in equation_checks::<f64>(100, 42) {
        assert!(c.passed(), "{c:?}");
    }
}

#[test]
fn single_precision_equations_stay_near_rounding() {
    for c in equation_checks::<f32>(100, 42) {
        let attention = c.name.contains("attention") || c.name.contains("refining");
        let bound = if attention { 1e-4 } else { c.tolerance };
        assert!(c.max_error < bound, "{c:?}");
    }
}

#[test]
fn decoder_matches_scalar_loop() {
    let c = decoder_check(100, 7);
    assert!(c.passed(), "{c:?}");
}

#[test]
fn single_precision_tracks_double() {
    let c = precision_check(20, 11);
    assert!(c.passed(), "{c:?}");
}

#[test]
fn metrics_match_brute_force() {
    for c in metric_checks(50, 1000) {
        assert!(c.passed(), "{c:?}");
    }
}
