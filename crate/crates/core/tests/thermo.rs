use bcq_core::binding::{build_critical_partition, AnchorPolicy, BindingConfig};
use bcq_core::inducing::{build_induced_map, Geometry, InducedSystem, InducingConfig};
use bcq_core::thermo::*;
use bcq_core::{Big, Observable, QuadraticMap};
use proptest::prelude::*;
use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::sync::OnceLock;

fn two() -> QuadraticMap {
    QuadraticMap::new(2.0).unwrap()
}

fn partition_geometry() -> Geometry {
    let bc = BindingConfig { epsilon: 0.02, big_n: 1, p_max: 30, anchor_policy: AnchorPolicy::MaximizeBase, ..Default::default() };
    Geometry::from_partition(&build_critical_partition(&two(), &bc).unwrap())
}

fn system() -> &'static InducedSystem {
    static S: OnceLock<InducedSystem> = OnceLock::new();
    S.get_or_init(|| {
        let bc = BindingConfig { epsilon: 0.02, big_n: 1, p_max: 30, anchor_policy: AnchorPolicy::MaximizeBase, ..Default::default() };
        let part = build_critical_partition(&two(), &bc).unwrap();
        let ic = InducingConfig { t_max: 40, min_explicit_mass: 1e-4, ..Default::default() };
        build_induced_map(&two(), &part, &ic).unwrap()
    })
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

#[test]
fn gibbs_measure_on_linear_branches() {
    let sys = LinearFullBranch::new(&[2.0, 4.0]).unwrap();
    let eq = equilibrium_stats(&sys, 1.0, 0.0, &[Observable::X], 8).unwrap();
    let p = [2.0 / 3.0, 1.0 / 3.0];
    assert!((eq.first_symbol_weights[0] - p[0]).abs() < 1e-12);
    assert!((eq.first_symbol_weights[1] - p[1]).abs() < 1e-12);
    assert!((eq.stats.h - entropy(&p)).abs() < 1e-12);
    assert!((eq.stats.lambda - (p[0] * 2f64.ln() + p[1] * 4f64.ln())).abs() < 1e-12);

    let sym = LinearFullBranch::new(&[2.0, 2.0]).unwrap();
    let eq = equilibrium_stats(&sym, 1.0, 0.0, &[], 10).unwrap();
    assert!((eq.stats.h - LN_2).abs() < 1e-12 && (eq.stats.lambda - LN_2).abs() < 1e-12);
    assert!(eq.stats.free_energy.abs() < 1e-12);
}

#[test]
fn maximal_entropy_at_sigma_zero() {
    let sys = LinearFullBranch::new(&[2.0, 5.0, 7.0]).unwrap();
    let eq = equilibrium_stats(&sys, 0.0, 0.0, &[], 6).unwrap();
    assert!((eq.stats.h - 3f64.ln()).abs() < 1e-12);
    assert!((pressure_sum(&sys, 0.0, 6).unwrap().rate - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn linear_pressure_rate() {
    let sys = LinearFullBranch::new(&[3.0, 3.0]).unwrap();
    for sigma in [0.0, 0.3, 0.7, 1.0, 1.4] {
        let ps = pressure_sum(&sys, sigma, 8).unwrap();
        for (_, r) in &ps.trend {
            assert!((r - (LN_2 - sigma * 3f64.ln())).abs() < 1e-12);
        }
    }
    let d = bowen_dimension(&sys, 8).unwrap();
    assert!((d - LN_2 / 3f64.ln()).abs() < 1e-9);
    assert!(pressure_sum(&sys, 2.0, 3).is_err());
}

#[test]
fn spreading_is_identity_for_q_one() {
    let means = BTreeMap::from([("x".to_string(), 0.25)]);
    let st = MeasureStats::new(0.5, 0.7, means, "t");
    let sp = spread_to_f_invariant(&st, Spread::Fixed(1)).unwrap();
    assert_eq!((sp.h, sp.lambda, sp.mean("x")), (st.h, st.lambda, st.mean("x")));
    let st = MeasureStats::new(8f64.ln(), 1.0, BTreeMap::new(), "t");
    assert!((spread_to_f_invariant(&st, Spread::Fixed(3)).unwrap().h - LN_2).abs() < 1e-15);
    assert!(spread_to_f_invariant(&st, Spread::Fixed(0)).is_err());
}

fn bernoulli(p: f64) -> (LinearFullBranch, Vec<f64>) {
    (LinearFullBranch::new(&[2.0, 2.0]).unwrap(), vec![p, 1.0 - p])
}

#[test]
fn local_dimension_of_lebesgue_like_measure() {
    let (sys, probs) = bernoulli(0.5);
    let m = BernoulliMeasure { system: &sys, probs, max_depth: 24 };
    let radii = log_radii(1e-1, 1e-4, 10);
    for x in [0.1, 0.37, 0.5, 0.81] {
        let d = local_dimension(&m, x, &radii).unwrap();
        assert!((d.slope - 1.0).abs() < 0.05, "x = {x}: {}", d.slope);
    }
}

#[test]
fn local_dimension_of_bernoulli_measure() {
    let (sys, probs) = bernoulli(0.3);
    let m = BernoulliMeasure { system: &sys, probs, max_depth: 24 };
    let want = entropy(&[0.3, 0.7]) / LN_2;
    assert!((want - 0.8813).abs() < 1e-4);
    let d = typical_local_dimension(&m, &log_radii(1e-1, 1e-4, 10), 200, 3).unwrap();
    assert!((d.slope - want).abs() < 0.05, "{}", d.slope);
}

#[test]
fn local_dimension_of_point_mass() {
    // All mass on branch 0 puts ν on its fixed point 0.
    let (sys, _) = bernoulli(1.0);
    let m = BernoulliMeasure { system: &sys, probs: vec![1.0, 0.0], max_depth: 24 };
    let d = local_dimension(&m, 0.0, &log_radii(1e-1, 1e-4, 10)).unwrap();
    assert!(d.slope.abs() < 1e-9);
}

fn curve(values: &[f64]) -> SpectrumCurve {
    let alphas = alpha_grid(-1.0, 1.0, values.len());
    SpectrumCurve {
        observable: "x".into(),
        c_phi: -1.0,
        d_phi: 1.0,
        points: alphas.iter().zip(values).map(|(&alpha, &value)| SpectrumPoint { alpha, value, witness: None }).collect(),
        missing: vec![],
    }
}

#[test]
fn spectrum_check_synthetic() {
    let hat: Vec<f64> = alpha_grid(-1.0, 1.0, 41).iter().map(|a| 1.0 - a * a).collect();
    let ok = spectrum_property_check(&curve(&hat), 0.0, 1e-9, 0.1);
    assert!(ok.monotone_ok && ok.jump_ok, "{ok:?}");

    let mut dip = hat.clone();
    dip[10] = 0.5 * dip[9].min(dip[11]);
    let bad = spectrum_property_check(&curve(&dip), 0.0, 1e-3, 1.0);
    assert!(!bad.monotone_ok);
    assert_eq!(bad.monotone_violations, vec![9]);

    let jumpy = spectrum_property_check(&curve(&[0.0, 0.5, 1.0, 0.5, 0.0]), 0.0, 1e-9, 0.1);
    assert!(jumpy.monotone_ok && !jumpy.jump_ok);
    assert!((jumpy.max_jump - 0.5).abs() < 1e-15);
}

#[test]
fn horseshoe_at_two() {
    let h = extract_horseshoe(system(), &HorseshoeSelection::default()).unwrap();
    assert!(h.intervals.len() >= 2 && h.q <= 40);
    assert!(h.endpoint_error <= 1e-9, "{}", h.endpoint_error);
    assert!(h.min_gap > 0.0);
    let (lo, hi) = system().geometry.lambda_plus;
    assert!(h.intervals.iter().all(|&(a, b)| (lo <= a && b <= hi) || (-hi <= a && b <= -lo)));
    // Endpoints land on ±x̂, checked with an independent 192-bit iteration.
    let a = Big::from_f64(2.0, 192);
    for &(l, r) in &h.intervals {
        let ends: Vec<f64> = [l, r]
            .iter()
            .map(|&e| (0..h.q).fold(Big::from_f64(e, 192), |y, _| QuadraticMap::f_big(&a, &y)).to_f64())
            .collect();
        assert!((ends[0] + ends[1]).abs() < 1e-8 && (ends[0].abs() - h.x_hat).abs() < 1e-8);
    }

    let m = h.intervals.len() as f64;
    assert!((pressure_sum(&h, 0.0, 3).unwrap().rate - m.ln()).abs() < 1e-12);
    let d = bowen_dimension(&h, 3).unwrap();
    assert!(d > 0.0 && d <= 1.0, "{d}");

    let eq = equilibrium_stats(&h, 1.0, 0.0, &[Observable::X], 3).unwrap();
    let sp = spread_to_f_invariant(&eq.stats, Spread::Fixed(eq.q)).unwrap();
    assert!(sp.free_energy <= 1e-2 && sp.h <= LN_2 + 1e-3, "{sp:?}");
    assert!(sp.lambda > 0.0);
}

#[test]
fn small_family_at_two() {
    let obs = vec![Observable::X, Observable::LogDfProxy { a: 2.0 }];
    let data = InducedFamilyData::sample(&two(), &partition_geometry(), &obs, 20_000, 40);
    let config = FamilyConfig {
        sigma_sampled: vec![0.9, 1.0, 1.1],
        s_sweep: vec![-1.0, 1.0],
        periodic_max: 12,
        acip_steps: 200_000,
        acip_orbits: 4,
        min_effective_samples: 200.0,
        ..Default::default()
    };
    let fam = build_family(&two(), vec![data], &config).unwrap();
    for mem in &fam.members {
        assert!(mem.stats.free_energy <= 1e-2 && mem.stats.h <= LN_2 + 1e-3, "{:?}", mem.stats);
    }
    let x = fam.observable_index("x").unwrap();
    let (c, d) = fam.mean_range(x);
    assert_eq!(c, -1.0);
    assert!(d >= 0.5 - 1e-12);

    // only δ_{−1} has mean −1
    let w = fam.best_at(x, -1.0, Objective::DimensionRatio).unwrap();
    assert!(w.stats.ratio() <= 0.02);
    let f = fam.best_at(x, -1.0, Objective::FreeEnergy).unwrap();
    assert!((f.stats.free_energy + 4f64.ln()).abs() < 0.01);

    let mean = fam.acip.means["x"];
    assert!(mean.abs() < 0.02);
    let b = fam.best_at(x, mean, Objective::DimensionRatio).unwrap();
    assert!((b.stats.ratio() - 1.0).abs() <= 0.05);

    // Lyapunov proxy: mixtures of the acip with δ_{−1} give (2 log 2 − α)/α.
    let l = fam.observable_index("logdf:2").unwrap();
    let alpha = 1.2 * LN_2;
    let b = fam.best_at(l, alpha, Objective::DimensionRatio).unwrap();
    assert!((b.stats.ratio() - (2.0 * LN_2 - alpha) / alpha).abs() < 0.05, "{}", b.stats.ratio());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pressure_strictly_decreasing(s1 in 2.0..6.0f64, s2 in 2.0..6.0f64, a in 0.0..1.4f64, da in 0.01..0.1f64) {
        let sys = LinearFullBranch::new(&[s1, s2]).unwrap();
        let p = pressure_sum(&sys, a, 5).unwrap().rate;
        let q = pressure_sum(&sys, a + da, 5).unwrap().rate;
        prop_assert!(q < p);
    }

    #[test]
    fn abramov_round_trip(h in 0.0..5.0f64, lam in 0.01..5.0f64, m in -3.0..3.0f64, q in 1usize..60, r in 1.0..100.0f64) {
        let st = MeasureStats::new(h, lam, BTreeMap::from([("x".to_string(), m)]), "p");
        for (sp, d) in [(Spread::Fixed(q), q as f64), (Spread::Variable(r), r)] {
            let out = spread_to_f_invariant(&st, sp).unwrap();
            prop_assert!((out.h * d - h).abs() <= 1e-12 * (1.0 + h));
            prop_assert!((out.lambda * d - lam).abs() <= 1e-12 * (1.0 + lam));
            prop_assert!((out.mean("x").unwrap() * d - m).abs() <= 1e-12 * (1.0 + m.abs()));
        }
    }
}
