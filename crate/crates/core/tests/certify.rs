use bcq_core::certify::*;
use bcq_core::QuadraticMap;
use proptest::prelude::*;
use std::f64::consts::LN_2;

/// f_a³(0) = 1 − a(1 − a)², bisected on (1.7, 1.8) independently of the crate.
fn a3_star() -> f64 {
    let g = |a: f64| 1.0 - a * (1.0 - a) * (1.0 - a);
    let (mut lo, mut hi) = (1.7, 1.8);
    assert!(g(lo) * g(hi) < 0.0);
    while hi - lo > 1e-15 {
        let mid = 0.5 * (lo + hi);
        if g(lo) * g(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

fn config(horizon: usize) -> CertificationConfig {
    CertificationConfig { horizon, ..Default::default() }
}

#[test]
fn exact_margins_at_two() {
    let m = QuadraticMap::new(2.0).unwrap();
    let r = certify(&m, &config(1000));
    assert!((r.a2_margin - (4f64.ln() - 0.9 * LN_2)).abs() < 1e-12);
    assert_eq!(r.a2_argmin, 1);
    assert!((r.a3_margin - 0.01).abs() < 1e-12);
    assert_eq!(r.a3_argmin, 1);
    assert_eq!(r.a4_heuristic.status, A4Status::Pass);
    assert!(r.passed);
    assert!(r.statement.contains("not falsified up to horizon 1000"));
}

#[test]
fn large_lambda_fails_a2() {
    let m = QuadraticMap::new(2.0).unwrap();
    let c = CertificationConfig { lambda: 1.5, horizon: 10, ..Default::default() };
    let (margin, _) = check_a2(&m, &c);
    assert!((margin - (4f64.ln() - 1.5)).abs() < 1e-12);
    assert!(!certify(&m, &c).passed);
}

#[test]
fn superstable_period_three() {
    let a = a3_star();
    assert!((a - 1.754877666246693).abs() < 1e-12);
    let found = superstable_parameter(3, 1.7, 1.8).unwrap();
    assert!((found - a).abs() < 1e-12);

    let m = QuadraticMap::new(a).unwrap();
    let r = certify(&m, &config(1000));
    assert_eq!(r.a2_margin, f64::NEG_INFINITY);
    assert_eq!(r.a3_margin, f64::NEG_INFINITY);
    assert!(!r.passed);

    let c = CertificationConfig { horizon: 1000, mixing_period_bound: 3, ..Default::default() };
    let a4 = check_a4_heuristic(&m, &c);
    assert_eq!(a4.status, A4Status::Fail);
    let w = a4.witness.unwrap();
    assert_eq!(w.period, 3);
    assert!(w.multiplier.abs() < 1e-6);
}

#[test]
fn cli_example_parameter_fails() {
    let m = QuadraticMap::new(1.7549).unwrap();
    assert!(!certify(&m, &config(10)).passed);
}

#[test]
fn attracting_fixed_point_witness() {
    let m = QuadraticMap::new(0.5).unwrap();
    let c = CertificationConfig { mixing_period_bound: 1, ..Default::default() };
    let a4 = check_a4_heuristic(&m, &c);
    assert_eq!(a4.status, A4Status::Fail);
    let w = a4.witness.unwrap();
    assert_eq!(w.period, 1);
    assert!((w.points[0] - m.x_hat()).abs() < 1e-12);
}

#[test]
fn scans() {
    let s = scan_parameters(2.0, 2.0, 1, &config(1000)).unwrap();
    assert_eq!(s.reports.len(), 1);
    assert_eq!(s.passes, 1);

    // Inside the period-3 window every parameter has an attracting 3-cycle.
    let a = a3_star();
    let s = scan_parameters(a - 1e-4, a + 1e-4, 11, &config(1000)).unwrap();
    assert_eq!(s.reports.len(), 11);
    assert!(s.reports.windows(2).all(|w| w[0].a < w[1].a));
    assert_eq!(s.passes, 0);
    for r in &s.reports {
        assert!(r.a2_margin < 0.0 || r.a4_heuristic.status != A4Status::Pass, "a = {}", r.a);
    }
}

#[test]
fn precision_stability_at_two() {
    let m = QuadraticMap::new(2.0).unwrap();
    let lo = CertificationConfig { precision_bits: 128, ..config(1000) };
    let hi = CertificationConfig { precision_bits: 256, ..config(1000) };
    assert!((check_a2(&m, &lo).0 - check_a2(&m, &hi).0).abs() < 1e-10);
    assert!((check_a3(&m, &lo).0 - check_a3(&m, &hi).0).abs() < 1e-10);
}

#[test]
fn report_serializes_with_expected_fields() {
    let r = certify(&QuadraticMap::new(2.0).unwrap(), &config(50));
    let v: serde_json::Value = serde_json::to_value(&r).unwrap();
    for k in ["a", "a2_margin", "a3_margin", "a4_heuristic", "passed"] {
        assert!(v.get(k).is_some(), "{k}");
    }
    let back: ConditionReport = serde_json::from_value(v).unwrap();
    assert_eq!(back, r);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exact_at_two_for_every_horizon(h in 1usize..400) {
        let m = QuadraticMap::new(2.0).unwrap();
        let r = certify(&m, &config(h));
        prop_assert!((r.a2_margin - (4f64.ln() - 0.9 * LN_2)).abs() < 1e-12);
        prop_assert!((r.a3_margin - 0.01).abs() < 1e-12);
    }

    #[test]
    fn margins_nonincreasing_in_horizon(a in 1.9..2.0f64, h in 2usize..300) {
        let m = QuadraticMap::new(a).unwrap();
        let short = config(h / 2);
        let long = config(h);
        prop_assert!(check_a2(&m, &long).0 <= check_a2(&m, &short).0);
        prop_assert!(check_a3(&m, &long).0 <= check_a3(&m, &short).0);
    }

    #[test]
    fn passed_iff_all_three(a in 1.95..=2.0f64) {
        let r = certify(&QuadraticMap::new(a).unwrap(), &config(200));
        let all = r.a2_margin >= 0.0 && r.a3_margin >= 0.0 && r.a4_heuristic.status == A4Status::Pass;
        prop_assert_eq!(r.passed, all);
    }
}
