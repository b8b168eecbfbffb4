//! Finite-horizon checks of the Collet–Eckmann type growth condition (A2),
//! slow recurrence of the critical orbit (A3), and a heuristic for
//! topological mixing (A4).
//!
//! A passing report means "not falsified up to the horizon"; none of these
//! conditions is finitely provable.

use crate::error::Result;
use crate::laps::{periodic_orbits, Cycle};
use crate::map::QuadraticMap;
use crate::precision::Big;
use crate::serde_ext::ext_f64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Orbit values with |f^n 0| below this are treated as exact returns to 0.
pub const SUPERSTABLE_TOL: f64 = 1e-14;
/// Margins within this of the minimum count as ties (smallest n reported).
const ARGMIN_TIE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificationConfig {
    pub lambda: f64,
    pub horizon: usize,
    pub recurrence_constant: f64,
    pub mixing_period_bound: usize,
    pub precision_bits: usize,
}

impl Default for CertificationConfig {
    fn default() -> Self {
        CertificationConfig {
            lambda: 0.9 * std::f64::consts::LN_2,
            horizon: 1000,
            recurrence_constant: 0.01,
            mixing_period_bound: 8,
            precision_bits: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum A4Status {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleWitness {
    pub period: usize,
    pub points: Vec<f64>,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A4Report {
    pub status: A4Status,
    pub witness: Option<CycleWitness>,
    /// Fraction of ε-net cells of [f²0, f0] visited by a typical orbit.
    pub typical_orbit_coverage: f64,
    /// Same for the critical orbit (informational; at a = 2 it is eventually fixed).
    pub critical_orbit_coverage: f64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub a: f64,
    #[serde(with = "ext_f64")]
    pub a2_margin: f64,
    pub a2_argmin: usize,
    #[serde(with = "ext_f64")]
    pub a3_margin: f64,
    pub a3_argmin: usize,
    pub a4_heuristic: A4Report,
    pub passed: bool,
    pub config: CertificationConfig,
    pub statement: String,
}

/// Critical-value orbit f^i(1) = f^{i+1}(0), i = 0..n, at `bits` precision.
fn critical_value_orbit(map: &QuadraticMap, n: usize, bits: usize) -> Vec<Big> {
    map.iterate_big(&Big::one(bits), n)
}

fn argmin_with_ties(values: impl Iterator<Item = (usize, f64)>) -> (f64, usize) {
    let vals: Vec<(usize, f64)> = values.collect();
    let min = vals.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    let arg = vals
        .iter()
        .find(|v| v.1 <= min + ARGMIN_TIE || (min == f64::NEG_INFINITY && v.1 == min))
        .map(|v| v.0)
        .unwrap_or(1);
    (min, arg)
}

/// min over 1 ≤ n ≤ horizon of (1/n) Σ_{i<n} log|Df(f^i 1)| − λ.
pub fn check_a2(map: &QuadraticMap, config: &CertificationConfig) -> (f64, usize) {
    let orbit = critical_value_orbit(map, config.horizon, config.precision_bits);
    let mut sum = 0.0;
    let per_n = (1..=config.horizon).map(|n| {
        let x = &orbit[n - 1];
        if x.abs().cmp_f64(SUPERSTABLE_TOL).is_lt() {
            sum = f64::NEG_INFINITY;
        } else {
            sum += map.log_df_big(x);
        }
        (n, sum / n as f64 - config.lambda)
    });
    argmin_with_ties(per_n)
}

/// min over 1 ≤ n ≤ horizon of log|f^n 0| + c √n.
pub fn check_a3(map: &QuadraticMap, config: &CertificationConfig) -> (f64, usize) {
    let orbit = critical_value_orbit(map, config.horizon, config.precision_bits);
    let per_n = (1..=config.horizon).map(|n| {
        let x = &orbit[n - 1];
        let l = if x.abs().cmp_f64(SUPERSTABLE_TOL).is_lt() { f64::NEG_INFINITY } else { x.ln_abs() };
        (n, l + config.recurrence_constant * (n as f64).sqrt())
    });
    argmin_with_ties(per_n)
}

fn coverage(points: impl Iterator<Item = f64>, lo: f64, hi: f64, cells: usize) -> f64 {
    let mut hit = vec![false; cells];
    for x in points {
        if x >= lo && x <= hi {
            let i = (((x - lo) / (hi - lo)) * cells as f64) as usize;
            hit[i.min(cells - 1)] = true;
        }
    }
    hit.iter().filter(|&&h| h).count() as f64 / cells as f64
}

/// Heuristic mixing check: no attracting cycle of period ≤ the bound, and
/// a Lebesgue-typical orbit ε-nets the dynamical core [f²0, f0].
pub fn check_a4_heuristic(map: &QuadraticMap, config: &CertificationConfig) -> A4Report {
    const CELLS: usize = 100;
    const TYPICAL_STEPS: usize = 200_000;
    let note = "(A2)+(A3) imply topological mixing on [f^2 0, f 0] (Young); this check only \
                looks for low-period attractors and orbit density";
    let bound = config.mixing_period_bound.max(1);

    // a superstable cycle through 0 is invisible to sign-change root finding
    let crit = map.iterate_big(&Big::zero(config.precision_bits), bound);
    for p in 1..=bound {
        if crit[p].abs().cmp_f64(SUPERSTABLE_TOL).is_lt() {
            let points: Vec<f64> = crit[..p].iter().map(Big::to_f64).collect();
            return A4Report {
                status: A4Status::Fail,
                witness: Some(CycleWitness { period: p, points, multiplier: 0.0 }),
                typical_orbit_coverage: f64::NAN,
                critical_orbit_coverage: f64::NAN,
                note: note.into(),
            };
        }
    }

    let census = periodic_orbits(map, bound);
    let attracting = census.cycles.iter().find(|c| c.multiplier < 1.0);
    let (lo, hi) = (map.f(1.0), 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_a4);
    let mut x: f64 = rng.gen_range(-1.0..1.0);
    let typical = (0..TYPICAL_STEPS).map(|_| {
        x = map.f(x);
        x
    });
    let typical_cov = coverage(typical, lo, hi, CELLS);
    let crit_orbit = map.iterate(0.0, config.horizon).map(|o| o.points).unwrap_or_default();
    let crit_cov = coverage(crit_orbit.into_iter(), lo, hi, CELLS);

    let witness = attracting.map(|c: &Cycle| CycleWitness {
        period: c.period,
        points: c.points.clone(),
        multiplier: c.multiplier,
    });
    let status = if witness.is_some() || typical_cov < 1.0 {
        A4Status::Fail
    } else if census.unconverged > 0 {
        A4Status::Inconclusive
    } else {
        A4Status::Pass
    };
    A4Report {
        status,
        witness,
        typical_orbit_coverage: typical_cov,
        critical_orbit_coverage: crit_cov,
        note: note.into(),
    }
}

pub fn certify(map: &QuadraticMap, config: &CertificationConfig) -> ConditionReport {
    let (a2_margin, a2_argmin) = check_a2(map, config);
    let (a3_margin, a3_argmin) = check_a3(map, config);
    let a4 = check_a4_heuristic(map, config);
    let passed = a2_margin >= 0.0 && a3_margin >= 0.0 && a4.status == A4Status::Pass;
    let statement = if passed {
        format!("(A2)-(A4) not falsified up to horizon {}", config.horizon)
    } else {
        format!("falsified within horizon {}", config.horizon)
    };
    ConditionReport {
        a: map.a,
        a2_margin,
        a2_argmin,
        a3_margin,
        a3_argmin,
        a4_heuristic: a4,
        passed,
        config: *config,
        statement,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub reports: Vec<ConditionReport>,
    pub passes: usize,
}

/// Certifies an equispaced parameter grid (a single point if grid = 1).
pub fn scan_parameters(a_lo: f64, a_hi: f64, grid: usize, config: &CertificationConfig) -> Result<ScanResult> {
    let grid = grid.max(1);
    let params: Vec<f64> = (0..grid)
        .map(|i| if grid == 1 { a_lo } else { a_lo + (a_hi - a_lo) * i as f64 / (grid - 1) as f64 })
        .collect();
    let maps: Vec<QuadraticMap> = params.iter().map(|&a| QuadraticMap::new(a)).collect::<Result<_>>()?;
    let reports: Vec<ConditionReport> = maps.par_iter().map(|m| certify(m, config)).collect();
    let passes = reports.iter().filter(|r| r.passed).count();
    Ok(ScanResult { reports, passes })
}

/// Parameter in [lo, hi] where f_a^period(0) changes sign, bisected until the
/// bracket cannot shrink further in `f64`.
pub fn superstable_parameter(period: usize, lo: f64, hi: f64) -> Option<f64> {
    let g = |a: f64| {
        let prec = 256;
        let ab = Big::from_f64(a, prec);
        let mut x = Big::zero(prec);
        for _ in 0..period {
            x = QuadraticMap::f_big(&ab, &x);
        }
        x.signum()
    };
    let (mut lo, mut hi) = (lo, hi);
    let s_lo = g(lo);
    if s_lo == 0 {
        return Some(lo);
    }
    if s_lo == g(hi) {
        return None;
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Some(mid);
        }
        let s = g(mid);
        if s == 0 {
            return Some(mid);
        }
        if s == s_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a2_exact_at_two() {
        let m = QuadraticMap::new(2.0).unwrap();
        let cfg = CertificationConfig { horizon: 50, ..Default::default() };
        let (margin, n) = check_a2(&m, &cfg);
        assert!((margin - (4f64.ln() - cfg.lambda)).abs() < 1e-12);
        assert_eq!(n, 1);
        let strict = CertificationConfig { lambda: 1.5, horizon: 10, ..cfg };
        assert!(check_a2(&m, &strict).0 < 0.0);
    }

    #[test]
    fn a3_exact_at_two() {
        let m = QuadraticMap::new(2.0).unwrap();
        let (margin, n) = check_a3(&m, &CertificationConfig::default());
        assert!((margin - 0.01).abs() < 1e-12);
        assert_eq!(n, 1);
    }

    #[test]
    fn attracting_fixed_point_small_a() {
        let m = QuadraticMap::new(0.5).unwrap();
        let cfg = CertificationConfig { mixing_period_bound: 1, ..Default::default() };
        let r = check_a4_heuristic(&m, &cfg);
        assert_eq!(r.status, A4Status::Fail);
        let w = r.witness.unwrap();
        assert_eq!(w.period, 1);
        assert!((w.points[0] - (3f64.sqrt() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn chebyshev_mixing_heuristic_passes() {
        let m = QuadraticMap::new(2.0).unwrap();
        let r = check_a4_heuristic(&m, &CertificationConfig::default());
        assert_eq!(r.status, A4Status::Pass, "{r:?}");
    }
}
