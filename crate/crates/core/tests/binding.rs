use bcq_core::binding::*;
use bcq_core::{Big, QuadraticMap};
use proptest::prelude::*;
use std::f64::consts::LN_2;
use std::sync::OnceLock;

const LAMBDA: f64 = 0.9 * LN_2;

/// At a = 2, |Df^i(f0)| = 4^i and |f^{i+1}0| = 1, so the sum is (4^p − 1)/3.
fn closed_form(eps: f64, p: usize) -> f64 {
    (3.0 * (-eps * p as f64).exp() / (10.0 * (4f64.powi(p as i32) - 1.0))).sqrt()
}

fn two() -> QuadraticMap {
    QuadraticMap::new(2.0).unwrap()
}

fn table(p_max: usize) -> DeltaTable {
    let c = BindingConfig { epsilon: 0.01, big_n: 1, p_max, precision_bits: 128, ..Default::default() };
    compute_delta_table(&two(), &c).unwrap()
}

fn partition() -> &'static (BindingConfig, CriticalPartition) {
    static P: OnceLock<(BindingConfig, CriticalPartition)> = OnceLock::new();
    P.get_or_init(|| {
        let c = BindingConfig { epsilon: 0.01, big_n: 5, p_max: 30, anchor_horizon: 1000, ..Default::default() };
        let p = build_critical_partition(&two(), &c).unwrap();
        (c, p)
    })
}

#[test]
fn delta_closed_form() {
    let t = table(40);
    assert_eq!(t.p_max(), 40);
    for p in 1..=40 {
        let rel = (t.delta(p) / closed_form(0.01, p) - 1.0).abs();
        assert!(rel < 1e-10, "p = {p}: {rel:e}");
    }
    assert!((t.delta(1) - 0.31468).abs() < 1e-4);
    assert!((t.delta(2) - 0.14002).abs() < 1e-4);
}

#[test]
fn delta_monotonicity() {
    let t = table(40);
    for p in 1..40 {
        assert!(t.delta(p + 1) < t.delta(p));
        assert!(t.delta(p + 1) / t.delta(p) < (-0.005f64).exp());
    }
}

#[test]
fn five_power_bound_holds_from_p_six() {
    let t = table(40);
    for p in 1..=40 {
        let holds = t.delta(p).powi(2) >= 5f64.powi(-(p as i32));
        assert_eq!(holds, p >= 6, "p = {p}");
    }
}

#[test]
fn superstable_parameter_is_rejected() {
    let a = bcq_core::certify::superstable_parameter(3, 1.7, 1.8).unwrap();
    let m = QuadraticMap::new(a).unwrap();
    assert!(compute_delta_table(&m, &BindingConfig::default()).is_err());
}

#[test]
fn lemma_p_margins() {
    let t = table(30);
    let rep = verify_lemma_p(&two(), &t, 6..=30, 1000, LAMBDA, 11);
    assert_eq!(rep.rows.len(), 25);
    assert_eq!(rep.violations(), (0, 0, 0));
    for r in &rep.rows {
        assert_eq!(r.samples, 1000);
        assert!(r.expansion_margin >= 0.0);
    }
}

#[test]
fn lemma_p_lower_bound_example() {
    // x near δ_1: log|x|^{−2/log 5} ≈ 1.44 ≤ 2.
    let x = table(2).delta(1);
    let lhs = -2.0 * x.ln() / 5f64.ln();
    assert!((lhs - 1.44).abs() < 0.01 && lhs <= 2.0);
}

#[test]
fn outside_expansion() {
    let m = two();
    for n in 1..60 {
        assert!(outside_expansion_margin(&m, 0.5, n, 0.4, LAMBDA) >= 0.0);
        assert!(outside_expansion_margin(&m, -1.0, n, 0.9, LAMBDA) >= 0.0);
    }
    let m = QuadraticMap::new(1.99).unwrap();
    let t = compute_delta_table(&m, &BindingConfig::default()).unwrap();
    let rep = verify_outside_expansion(&m, t.delta(5), LAMBDA, 10_000, 60, 3);
    assert!(rep.pairs > 10_000);
    assert_eq!(rep.violations, 0);
    assert_eq!(rep.return_violations, 0);
}

fn slow_recurrence(x: f64, delta_n: f64, eps: f64, horizon: usize, bits: usize) -> bool {
    let a = Big::from_f64(2.0, bits);
    let mut y = Big::from_f64(x, bits);
    let start = (1.0 / eps).ceil() as usize;
    for n in 1..=horizon {
        y = QuadraticMap::f_big(&a, &y);
        if n >= start && y.ln_abs() < delta_n.ln() - eps * n as f64 {
            return false;
        }
    }
    true
}

#[test]
fn partition_structure() {
    let (c, part) = partition();
    let t = &part.table;
    // cells: ⌊e^{3εp}⌋ equal pieces per annulus, right to left
    for p in (c.big_n + 1)..=c.p_max {
        let cells: Vec<&Cell> = part.cells.iter().filter(|x| x.p == p).collect();
        assert_eq!(cells.len(), (3.0 * c.epsilon * p as f64).exp().floor() as usize, "p = {p}");
        let w = (t.delta(p - 1) - t.delta(p)) / cells.len() as f64;
        for (k, cell) in cells.iter().enumerate() {
            assert_eq!(cell.j, k + 1);
            assert!(((cell.hi - cell.lo) / w - 1.0).abs() < 1e-9);
            assert!(cell.lo < cell.anchor && cell.anchor < cell.hi);
        }
    }
    // each element contains exactly one cell and lies in three contiguous ones
    for e in &part.elements {
        let inside = part.cells.iter().filter(|x| x.lo >= e.lo && x.hi <= e.hi).count();
        assert_eq!(inside, 1, "{e:?}");
        let idx: Vec<usize> =
            part.cells.iter().enumerate().filter(|(_, x)| x.hi > e.lo && x.lo < e.hi).map(|(i, _)| i).collect();
        assert!(idx.len() <= 3 && idx.windows(2).all(|w| w[1] == w[0] + 1), "{e:?}");
    }
    // disjoint interiors, right to left, covering [core, δ]
    for w in part.elements.windows(2) {
        assert_eq!(w[1].hi, w[0].lo);
    }
    assert_eq!(part.elements[0].hi, part.delta);
    assert_eq!(part.elements.last().unwrap().lo, part.core);
    assert_eq!(part.lambda_plus, (part.elements[0].lo, part.elements[0].hi));
    assert_eq!(part.lambda_minus, (-part.lambda_plus.1, -part.lambda_plus.0));
    assert!(part.delta < t.delta(c.big_n));
}

#[test]
fn partition_mirror_symmetry() {
    let (_, part) = partition();
    let all = part.all_elements();
    assert_eq!(all.len(), 2 * part.elements.len());
    for (l, r) in all.iter().zip(all.iter().rev()) {
        assert_eq!((l.lo, l.hi, l.p, l.j), (-r.hi, -r.lo, r.p, -r.j));
    }
}

#[test]
fn anchors_pass_at_double_precision() {
    let (c, part) = partition();
    let dn = part.table.delta(c.big_n);
    let bits = 2 * anchor_precision(c);
    for cell in part.cells.iter().step_by(7) {
        assert!(slow_recurrence(cell.anchor, dn, c.epsilon, c.anchor_horizon, bits), "{cell:?}");
    }
}

#[test]
fn partition_serializes() {
    let (_, part) = partition();
    let text = serde_json::to_string(part).unwrap();
    let back: CriticalPartition = serde_json::from_str(&text).unwrap();
    assert_eq!(&back, part);
}

proptest! {
    #[test]
    fn bound_period_is_the_annulus(u in 0.0..1.0f64, neg in any::<bool>()) {
        let t = table(30);
        let (lo, hi) = (t.delta(30), t.delta(1));
        let x = lo + u * (hi - lo);
        let x = if neg { -x } else { x };
        match bound_period(x, &t) {
            Some(p) => prop_assert!(t.delta(p) <= x.abs() && x.abs() < t.delta(p - 1)),
            None => prop_assert!(x.abs() >= hi || x.abs() < lo),
        }
    }

    #[test]
    fn table_decreasing_for_good_parameters(a in 1.99..=2.0f64, eps in 0.005..0.05f64) {
        let m = QuadraticMap::new(a).unwrap();
        let c = BindingConfig { epsilon: eps, big_n: 1, p_max: 20, ..Default::default() };
        if let Ok(t) = compute_delta_table(&m, &c) {
            prop_assert!(t.deltas.windows(2).all(|w| w[1] < w[0]));
        }
    }
}
