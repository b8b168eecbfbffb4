use bcq_core::binding::{build_critical_partition, AnchorPolicy, BindingConfig};
use bcq_core::inducing::*;
use bcq_core::{Error, QuadraticMap};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::LN_2;
use std::sync::OnceLock;

const EPS: f64 = 0.02;
const LAMBDA: f64 = 0.9 * LN_2;

fn system() -> &'static InducedSystem {
    static S: OnceLock<InducedSystem> = OnceLock::new();
    S.get_or_init(|| {
        let m = QuadraticMap::new(2.0).unwrap();
        let bc = BindingConfig { epsilon: EPS, big_n: 1, p_max: 30, anchor_policy: AnchorPolicy::MaximizeBase, ..Default::default() };
        let part = build_critical_partition(&m, &bc).unwrap();
        let ic = InducingConfig { t_max: 60, min_explicit_mass: 1e-4, snapshot_times: vec![10, 20, 30], ..Default::default() };
        build_induced_map(&m, &part, &ic).unwrap()
    })
}

#[test]
fn markov_property() {
    let s = system();
    assert!(!s.branches.is_empty());
    for b in &s.branches {
        let d = s.markov_defect(b);
        assert!(d <= 1e-9, "R = {}: {d:e}", b.return_time);
        assert!(b.monotone);
        assert!(b.return_time <= 60);
    }
}

#[test]
fn orientation_matches_sign_word() {
    // Df(y) = −4y, so f^R is increasing iff an even number of the points
    // f^k(ω), k < R, are positive.
    for b in &system().branches {
        let positives = (0..b.return_time).filter(|&k| b.sign_at(k)).count();
        assert_eq!(b.increasing, positives % 2 == 0);
        let m = b.mirrored();
        assert_eq!(m.increasing, !b.increasing);
        assert_eq!(m.domain, (-b.domain.1, -b.domain.0));
    }
}

#[test]
fn coverage_and_tail() {
    let s = system();
    assert!(s.coverage() >= 0.99, "{}", s.coverage());
    assert!(s.explicit_coverage() <= s.coverage());
    assert!(s.tail.windows(2).all(|w| w[1] <= w[0]));
    let fit = s.tail_fit.expect("tail fit");
    assert!(fit.zeta < 1.0 && fit.r2 >= 0.9, "{fit:?}");
    assert!(s.balance.relative_defect() < 1e-9);
}

#[test]
fn domains_are_disjoint() {
    let s = system();
    let mut total = 0.0;
    for w in s.branches.windows(2) {
        assert!(w[0].domain.1 <= w[1].domain.0);
    }
    for b in &s.branches {
        assert!(b.domain.0 >= s.geometry.lambda_plus.0 && b.domain.1 <= s.geometry.lambda_plus.1);
        total += 2.0 * b.length;
    }
    assert!(total <= s.base_length() * (1.0 + 1e-12));
}

#[test]
fn tower_steps() {
    let s = system();
    let tower = Tower::new(s);
    assert!((tower.level_mass[0] - s.explicit_coverage() * s.base_length()).abs() < 1e-9);
    assert!(tower.level_mass.windows(2).all(|w| w[1] <= w[0]));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for b in s.branches.iter().step_by(37) {
        let x = b.domain.0 + rng.gen::<f64>() * (b.domain.1 - b.domain.0);
        let mut pt = TowerPoint { x, level: 0 };
        for l in 1..b.return_time {
            pt = tower.step(pt).unwrap();
            assert_eq!(pt, TowerPoint { x, level: l });
        }
        let end = tower.step(pt).unwrap();
        assert_eq!(end.level, 0);
        let (lo, hi) = s.geometry.lambda(b.target_sign);
        assert!(end.x >= lo && end.x <= hi);
        let y = (0..b.return_time).fold(x, |y, _| s.map.f(y));
        assert!((end.x - y.clamp(lo, hi)).abs() < 1e-6);
        assert!(matches!(tower.step(TowerPoint { x, level: b.return_time }), Err(Error::Domain(_))));
    }
    assert!(matches!(tower.step(TowerPoint { x: 0.9, level: 0 }), Err(Error::NotInBase(_))));
}

#[test]
fn follow_point_agrees_with_branches() {
    let s = system();
    for b in s.branches.iter().step_by(11) {
        let x = 0.5 * (b.domain.0 + b.domain.1);
        if let Some(e) = follow_point(&s.map, &s.geometry, x, 60, &[]) {
            assert_eq!((e.return_time, e.target_sign), (b.return_time, b.target_sign), "x = {x}");
        }
    }
}

#[test]
fn quick_return_arithmetic() {
    let f = 1.0 + 19.0 * 0.01 / LAMBDA;
    assert!((100.0 * f - 130.45).abs() < 0.01);
    assert!(((-(0.01f64.sqrt()) * 100.0).exp() - 4.54e-5).abs() < 1e-7);
    let rep = quick_return_check(system(), 0.01, LAMBDA);
    assert!((rep.window_factor - f).abs() < 1e-15);
}

#[test]
fn quick_returns_at_two() {
    let rep = quick_return_check(system(), EPS, LAMBDA);
    assert!(!rep.rows.is_empty());
    for r in &rep.rows {
        assert!((r.threshold - (-(EPS.sqrt()) * r.k as f64).exp()).abs() < 1e-15);
        assert_eq!(r.violation, r.best_ratio < r.threshold);
    }
    // The bound is asymptotic in k; at k = 10 the window (10, 16] is shorter
    // than most bound periods, so only k ≥ 20 is held to it.
    let late: Vec<_> = rep.rows.iter().filter(|r| r.k >= 20).collect();
    assert!(!late.is_empty());
    assert!(late.iter().all(|r| !r.violation), "{:?}", late.iter().find(|r| r.violation));
    assert_eq!(rep.violations, rep.rows.iter().filter(|r| r.k < 20 && r.violation).count());
}

#[test]
fn distortion_within_koebe() {
    assert_eq!(koebe_bound(1.0), 4.0);
    let rep = distortion_check(system(), 50, 17);
    assert!(!rep.branches.is_empty());
    assert!(rep.max_ratio.is_finite() && rep.max_ratio >= 1.0);
    assert_eq!(rep.violations, 0);
    for b in &rep.branches {
        assert!(b.xi > 0.0);
    }
}

#[test]
fn tail_fits() {
    let tail: Vec<f64> = (0..40).map(|n| 0.5f64.powi(n)).collect();
    let f = return_time_tail(&tail).unwrap();
    assert!((f.zeta - 0.5).abs() < 1e-6 && (f.c1 - 1.0).abs() < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noisy: Vec<f64> = tail.iter().map(|t| t * (1.0 + 0.01 * (2.0 * rng.gen::<f64>() - 1.0))).collect();
    let f = return_time_tail(&noisy).unwrap();
    assert!((f.zeta - 0.5).abs() < 1e-2);

    assert!(matches!(return_time_tail(&tail[..5]), Err(Error::FitRejected { .. })));
    let flat: Vec<f64> = (0..30).map(|n| 1.0 + 0.5 * ((n * 7919) % 13) as f64).collect();
    assert!(matches!(return_time_tail(&flat), Err(Error::FitRejected { .. })));
}

#[test]
fn system_serializes() {
    let s = system();
    let v = serde_json::to_value(s).unwrap();
    assert!(v["branches"][0]["domain"].is_array());
    assert!(v["branches"][0]["return_time"].is_u64());
    assert!(v["branches"][0]["target_sign"].is_i64());
    assert_eq!(v["tail"].as_array().unwrap().len(), s.tail.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn locate_finds_containing_branch(u in 0.0..1.0f64, neg in any::<bool>()) {
        let s = system();
        let (lo, hi) = s.geometry.lambda_plus;
        let x = lo + u * (hi - lo);
        let x = if neg { -x } else { x };
        if let Some((b, minus)) = s.locate(x) {
            prop_assert_eq!(minus, neg);
            prop_assert!(b.domain.0 <= x.abs() && x.abs() <= b.domain.1);
        } else {
            prop_assert!(s.branches.iter().all(|b| x.abs() < b.domain.0 || x.abs() > b.domain.1));
        }
    }

    #[test]
    fn climbing_keeps_the_point(i in 0usize..10_000, level in 0usize..60) {
        let s = system();
        let b = &s.branches[i % s.branches.len()];
        prop_assume!(level + 1 < b.return_time);
        let x = 0.5 * (b.domain.0 + b.domain.1);
        let next = Tower::new(s).step(TowerPoint { x, level }).unwrap();
        prop_assert_eq!(next, TowerPoint { x, level: level + 1 });
    }
}
