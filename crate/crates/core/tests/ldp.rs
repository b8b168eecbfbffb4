use bcq_core::binding::{build_critical_partition, AnchorPolicy, BindingConfig};
use bcq_core::inducing::Geometry;
use bcq_core::ldp::*;
use bcq_core::thermo::{alpha_grid, build_family, Family, FamilyConfig, InducedFamilyData};
use bcq_core::{Observable, QuadraticMap};
use proptest::prelude::*;
use std::f64::consts::{LN_2, PI};
use std::sync::OnceLock;

fn two() -> QuadraticMap {
    QuadraticMap::new(2.0).unwrap()
}

fn family() -> &'static Family {
    static F: OnceLock<Family> = OnceLock::new();
    F.get_or_init(|| {
        let bc = BindingConfig { epsilon: 0.02, big_n: 1, p_max: 30, anchor_policy: AnchorPolicy::MaximizeBase, ..Default::default() };
        let g = Geometry::from_partition(&build_critical_partition(&two(), &bc).unwrap());
        let obs = vec![Observable::X];
        let data = InducedFamilyData::sample(&two(), &g, &obs, 20_000, 40);
        let config = FamilyConfig {
            sigma_sampled: vec![0.9, 1.0, 1.1],
            s_sweep: vec![-1.0, 1.0],
            periodic_max: 12,
            acip_steps: 200_000,
            acip_orbits: 4,
            min_effective_samples: 200.0,
            ..Default::default()
        };
        build_family(&two(), vec![data], &config).unwrap()
    })
}

/// Leading eigenvalue of the tent-map transfer operator
/// L g(u) = ½[e^{ψ(u/2)} g(u/2) + e^{ψ(1−u/2)} g(1−u/2)], ψ = φ∘h,
/// h(u) = −cos πu, by power iteration on Chebyshev collocation values.
/// Conjugating by h changes ∫e^{S_nφ}dx only by a bounded density factor,
/// so log of the eigenvalue is the Lebesgue pressure.
fn transfer_pressure(phi: impl Fn(f64) -> f64) -> f64 {
    let n = 80;
    let nodes: Vec<f64> = (0..n).map(|j| 0.5 - 0.5 * (PI * (j as f64 + 0.5) / n as f64).cos()).collect();
    let weights: Vec<f64> = (0..n).map(|j| (if j % 2 == 0 { 1.0 } else { -1.0 }) * (PI * (j as f64 + 0.5) / n as f64).sin()).collect();
    let interp = |vals: &[f64], u: f64| -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..n {
            let d = u - nodes[j];
            if d == 0.0 {
                return vals[j];
            }
            num += weights[j] * vals[j] / d;
            den += weights[j] / d;
        }
        num / den
    };
    let psi = |u: f64| phi(-(PI * u).cos());
    let mut g = vec![1.0; n];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let next: Vec<f64> = nodes
            .iter()
            .map(|&u| {
                let (a, b) = (0.5 * u, 1.0 - 0.5 * u);
                0.5 * (psi(a).exp() * interp(&g, a) + psi(b).exp() * interp(&g, b))
            })
            .collect();
        let norm = next.iter().cloned().fold(0.0, f64::max);
        g = next.iter().map(|v| v / norm).collect();
        lambda = norm;
    }
    lambda.ln()
}

#[test]
fn transfer_oracle_values() {
    assert!(transfer_pressure(|_| 0.0).abs() < 1e-12);
    assert!((transfer_pressure(|_| 0.7) - 0.7).abs() < 1e-12);
    assert!((transfer_pressure(|x| x) - 0.16438356).abs() < 1e-7);
    assert!((transfer_pressure(|x| x * x) - 0.58034715).abs() < 1e-7);
    assert!((transfer_pressure(|x| (PI * x).cos()) + 0.22504676).abs() < 1e-7);
}

#[test]
fn lebesgue_pressure_against_transfer_operator() {
    let cases = [(Observable::X, transfer_pressure(|x| x)), (Observable::X2, transfer_pressure(|x| x * x)), (Observable::CosPiX, transfer_pressure(|x| (PI * x).cos()))];
    for (phi, p) in cases {
        let q = PressureMethod::Quadrature { nodes: 4 };
        let full = free_energy_lebesgue(&two(), &phi, 20, q).unwrap();
        let half = free_energy_lebesgue(&two(), &phi, 10, q).unwrap();
        assert!((full.corrected - p).abs() < 0.03, "{}: {} vs {p}", phi.name(), full.corrected);
        let richardson = 2.0 * full.corrected - half.corrected;
        assert!((richardson - p).abs() < (full.corrected - p).abs().max(1e-3), "{}: {richardson} vs {p}", phi.name());
    }
}

#[test]
fn constant_pressure() {
    for (c, n) in [(0.0, 5), (0.3, 12), (-1.5, 20)] {
        let p = free_energy_lebesgue(&two(), &Observable::Constant(c), n, PressureMethod::Quadrature { nodes: 2 }).unwrap();
        assert!((p.raw - (c + LN_2 / n as f64)).abs() < 1e-12, "{p:?}");
        assert!((p.corrected - c).abs() < 1e-12);
    }
    let p = free_energy_lebesgue(&two(), &Observable::Constant(0.0), 40, PressureMethod::MonteCarlo { samples: 1000, seed: 1 }).unwrap();
    assert!((p.raw - LN_2 / 40.0).abs() < 1e-12);
    assert!(free_energy_lebesgue(&two(), &Observable::X, 30, PressureMethod::Quadrature { nodes: 2 }).is_err());
}

#[test]
fn full_and_empty_windows() {
    let m = two();
    let full = deviation_probability(&m, &Observable::X, (-1.0, 1.0), 25, 5000, 2, Method::Plain).unwrap();
    assert_eq!(full.log_measure_rate, LN_2 / 25.0);
    assert_eq!(full.hits, 5000);
    let empty = deviation_probability(&m, &Observable::X, (2.0, 3.0), 25, 5000, 2, Method::Plain).unwrap();
    assert_eq!(empty.log_measure_rate, f64::NEG_INFINITY);
    assert!(empty.needs_tilting);
    assert!(deviation_probability(&m, &Observable::X, (0.0, 1.0), 5, 10, 2, Method::Plain).is_err());

    let all = covering_estimate(&m, &Observable::X, (-1.0, 1.0), 12).unwrap();
    assert!((all.rate - LN_2 / 12.0).abs() < 1e-12);
    assert_eq!(all.matched, all.cylinders);
    assert_eq!(all.cylinders, 1 << 12);
    let none = covering_estimate(&m, &Observable::X, (2.0, 3.0), 12).unwrap();
    assert_eq!(none.rate, f64::NEG_INFINITY);
    assert!(covering_estimate(&m, &Observable::X, (0.0, 1.0), 23).is_err());
}

#[test]
fn typical_window_has_rate_near_zero() {
    let est = deviation_probability(&two(), &Observable::X, (-0.2, 0.2), 200, 4000, 8, Method::Plain).unwrap();
    assert!(est.normalized_rate.abs() < 0.01, "{est:?}");
}

#[test]
fn tilting_is_unbiased() {
    let m = two();
    let window = (0.1, 0.3);
    let plain = deviation_probability(&m, &Observable::X, window, 20, 200_000, 4, Method::Plain).unwrap();
    let tilted = deviation_probability(&m, &Observable::X, window, 20, 200_000, 4, Method::ImportanceSampled { s: 1.0, bins: 1024 }).unwrap();
    assert!(plain.hits >= 100 && tilted.hits >= 100);
    let joint = (plain.std_error.powi(2) + tilted.std_error.powi(2)).sqrt();
    assert!((plain.log_measure_rate - tilted.log_measure_rate).abs() <= 3.0 * joint, "{plain:?} {tilted:?}");
}

#[test]
fn covering_sandwich() {
    let m = two();
    for (phi, window) in [(Observable::X, (0.3, 0.5)), (Observable::X, (-0.1, 0.1)), (Observable::X2, (0.6, 0.8)), (Observable::CosPiX, (-0.5, -0.2))] {
        let n = 16;
        let cover = covering_estimate(&m, &phi, window, n).unwrap();
        let dev = deviation_probability(&m, &phi, window, n, 100_000, 5, Method::Plain).unwrap();
        if dev.hits > 0 {
            assert!(cover.rate >= dev.log_measure_rate - 2.0 * dev.std_error, "{}: {} vs {}", phi.name(), cover.rate, dev.log_measure_rate);
        }
    }
}

#[test]
fn seeded_determinism() {
    let m = two();
    let run = |method| deviation_probability(&m, &Observable::CosPiX, (0.0, 0.2), 15, 20_000, 77, method).unwrap();
    assert_eq!(run(Method::Plain), run(Method::Plain));
    let is = Method::ImportanceSampled { s: -0.5, bins: 256 };
    assert_eq!(run(is), run(is));
    let mc = |seed| free_energy_lebesgue(&m, &Observable::X, 30, PressureMethod::MonteCarlo { samples: 5000, seed }).unwrap();
    assert_eq!(mc(3), mc(3));
    assert_ne!(mc(3).raw, mc(4).raw);
}

#[test]
fn rate_function_on_small_family() {
    let fam = family();
    let grid = alpha_grid(-1.0, 0.5, 16);
    let rc = rate_function(fam, "x", &grid).unwrap();
    assert!(rc.points.iter().filter(|p| p.value.is_finite()).all(|p| p.value <= 1e-2));
    assert!((rc.points[0].value + 4f64.ln()).abs() < 0.01, "{}", rc.points[0].value);
    assert!(!rc.note.is_empty());
    let mean = fam.acip.means["x"];
    let at_mean = rate_function(fam, "x", &[mean]).unwrap();
    assert!(at_mean.points[0].value.abs() <= 0.01);
}

#[test]
fn legendre_constant_rows() {
    let fam = family();
    let (top, _) = family_max(fam, &Observable::Constant(0.0)).unwrap();
    assert!(top.abs() < 1e-2);
    let rep = legendre_check(&two(), &[Observable::Constant(0.0), Observable::Constant(0.5)], 10, fam, 0.02, 2).unwrap();
    for r in &rep.rows {
        assert!((r.delta_raw - (r.p_n - r.family_max).abs()).abs() < 1e-12);
        assert!(r.delta <= 1e-2 && r.pass, "{r:?}");
    }
    assert!((rep.rows[1].family_max - rep.rows[0].family_max - 0.5).abs() < 1e-12);
    assert!(legendre_check(&two(), &[Observable::X2], 10, fam, 0.02, 2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn rates_bounded_by_whole_space(lo in -1.0..0.9f64, w in 0.01..1.0f64, n in 2usize..14) {
        let window = (lo, (lo + w).min(1.0));
        let m = two();
        let dev = deviation_probability(&m, &Observable::X, window, n, 2000, 1, Method::Plain).unwrap();
        prop_assert!(dev.log_measure_rate <= LN_2 / n as f64 + 1e-12);
        let cover = covering_estimate(&m, &Observable::X, window, n).unwrap();
        prop_assert!(cover.rate <= LN_2 / n as f64 + 1e-12);
    }
}
