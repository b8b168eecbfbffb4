//! Lebesgue large deviations: Monte-Carlo deviation rates, the Lebesgue
//! pressure (1/n) log ∫ e^{S_nφ} dx, rate functions F_φ on the equilibrium
//! family, the Legendre-pair check and a cylinder-covering estimate.
//!
//! I(ν) is represented by −F(ν) on the constructed family only; its lower
//! semicontinuous regularization cannot be enumerated, so every reported
//! rate is an upper bound for I.

use crate::error::{Error, Result};
use crate::laps::fold_laps;
use crate::map::{Observable, QuadraticMap};
use crate::serde_ext::ext_f64;
use crate::stats::{gauss_legendre, richardson};
use crate::thermo::{variational_curve, Family, FamilyMember, MeasureStats, Objective, SpectrumCurve};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;

/// Samples per independent RNG stream; sample i uses stream i / CHUNK.
const CHUNK: usize = 4096;
/// Largest n for lap quadrature and covering (2ⁿ laps).
pub const MAX_LAP_DEPTH: usize = 22;
pub const RATE_NOTE: &str = "I is evaluated as -F on the computed family; values are upper bounds for the regularized rate";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Method {
    Plain,
    /// Initial points drawn from a piecewise-constant approximation of the
    /// density ∝ e^{s S_nφ}, self-normalized.
    ImportanceSampled { s: f64, bins: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationEstimate {
    pub observable: String,
    pub n: usize,
    pub window: (f64, f64),
    /// (1/n) log of the estimated Lebesgue measure (−∞ without hits).
    #[serde(with = "ext_f64")]
    pub log_measure_rate: f64,
    /// log_measure_rate − (log 2)/n, the measure of [−1, 1] removed.
    #[serde(with = "ext_f64")]
    pub normalized_rate: f64,
    #[serde(with = "ext_f64")]
    pub std_error: f64,
    pub method: Method,
    pub samples: usize,
    pub hits: usize,
    pub seed: u64,
    pub needs_tilting: bool,
}

fn birkhoff_mean(map: &QuadraticMap, phi: &Observable, x: f64, n: usize) -> f64 {
    let mut y = x;
    let mut s = 0.0;
    for _ in 0..n {
        s += phi.eval(y);
        y = map.f(y);
    }
    s / n as f64
}

fn stream_rng(seed: u64, stream: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Piecewise-constant proposal on [−1, 1] with a defensive uniform share.
struct Proposal {
    cdf: Vec<f64>,
    density: Vec<f64>,
}

impl Proposal {
    const DEFENSIVE: f64 = 0.1;

    fn tilted(map: &QuadraticMap, phi: &Observable, n: usize, s: f64, bins: usize, seed: u64) -> Proposal {
        // pilot: mean of e^{s S_nφ} per bin from stratified points
        let per_bin = 8;
        let log_w: Vec<f64> = (0..bins)
            .into_par_iter()
            .map(|b| {
                let mut rng = stream_rng(seed ^ 0x9e37_79b9, b);
                let vals: Vec<f64> = (0..per_bin)
                    .map(|k| {
                        let u = (k as f64 + rng.gen::<f64>()) / per_bin as f64;
                        let x = -1.0 + 2.0 * (b as f64 + u) / bins as f64;
                        s * n as f64 * birkhoff_mean(map, phi, x, n)
                    })
                    .collect();
                crate::stats::log_sum_exp(vals)
            })
            .collect();
        let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = w.iter().sum();
        let mass: Vec<f64> = w.iter().map(|v| (1.0 - Self::DEFENSIVE) * v / total + Self::DEFENSIVE / bins as f64).collect();
        let mut cdf = Vec::with_capacity(bins);
        let mut acc = 0.0;
        for m in &mass {
            acc += m;
            cdf.push(acc);
        }
        let width = 2.0 / bins as f64;
        Proposal { cdf, density: mass.iter().map(|m| m / width).collect() }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let bins = self.cdf.len();
        let u = rng.gen::<f64>() * self.cdf[bins - 1];
        let b = self.cdf.partition_point(|&c| c < u).min(bins - 1);
        let x = -1.0 + 2.0 * (b as f64 + rng.gen::<f64>()) / bins as f64;
        (x, self.density[b])
    }
}

/// Monte-Carlo estimate of (1/n) log Leb{x ∈ [−1, 1] : S_nφ(x)/n ∈ [α, β]}.
pub fn deviation_probability(
    map: &QuadraticMap,
    phi: &Observable,
    window: (f64, f64),
    n: usize,
    samples: usize,
    seed: u64,
    method: Method,
) -> Result<DeviationEstimate> {
    if n == 0 || samples < 1000 {
        return Err(Error::Config("deviation_probability needs n ≥ 1 and ≥ 10³ samples".into()));
    }
    let (lo, hi) = window;
    let inside = |x: f64| {
        let m = birkhoff_mean(map, phi, x, n);
        m >= lo && m <= hi
    };
    let chunks = samples.div_ceil(CHUNK);
    let nf = n as f64;
    let (estimate, se, hits) = match method {
        Method::Plain => {
            let hits: usize = (0..chunks)
                .into_par_iter()
                .map(|c| {
                    let mut rng = stream_rng(seed, c);
                    let count = CHUNK.min(samples - c * CHUNK);
                    (0..count).filter(|_| inside(rng.gen_range(-1.0..1.0))).count()
                })
                .sum();
            let p = hits as f64 / samples as f64;
            let se = ((1.0 - p) / (samples as f64 * p)).sqrt() / nf;
            (2.0 * p, se, hits)
        }
        Method::ImportanceSampled { s, bins } => {
            let prop = Proposal::tilted(map, phi, n, s, bins.max(1), seed);
            // per chunk: Σw, Σw·1_A, Σw², Σw²·1_A
            let parts: Vec<[f64; 5]> = (0..chunks)
                .into_par_iter()
                .map(|c| {
                    let mut rng = stream_rng(seed, c);
                    let count = CHUNK.min(samples - c * CHUNK);
                    let mut acc = [0.0; 5];
                    for _ in 0..count {
                        let (x, q) = prop.draw(&mut rng);
                        let w = 0.5 / q;
                        let a = inside(x);
                        acc[0] += w;
                        acc[2] += w * w;
                        if a {
                            acc[1] += w;
                            acc[3] += w * w;
                            acc[4] += 1.0;
                        }
                    }
                    acc
                })
                .collect();
            let t = parts.iter().fold([0.0; 5], |mut a, p| {
                for k in 0..5 {
                    a[k] += p[k];
                }
                a
            });
            let p = t[1] / t[0];
            // delta-method variance of the self-normalized ratio
            let var = (t[3] * (1.0 - p) * (1.0 - p) + (t[2] - t[3]) * p * p) / (t[0] * t[0]);
            let se = if p > 0.0 { var.sqrt() / p / nf } else { f64::NAN };
            (2.0 * p, se, t[4] as usize)
        }
    };
    let rate = if hits == 0 { f64::NEG_INFINITY } else { estimate.ln() / nf };
    Ok(DeviationEstimate {
        observable: phi.name(),
        n,
        window,
        log_measure_rate: rate,
        normalized_rate: rate - LN_2 / nf,
        std_error: if hits == 0 { f64::INFINITY } else { se },
        method,
        samples,
        hits,
        seed,
        needs_tilting: hits == 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PressureMethod {
    /// Gauss–Legendre on every lap of f^n.
    Quadrature { nodes: usize },
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LebesguePressure {
    pub observable: String,
    pub n: usize,
    /// (1/n) log ∫_{[−1,1]} e^{S_nφ} dx.
    pub raw: f64,
    /// raw − (log 2)/n.
    pub corrected: f64,
    pub std_error: f64,
    pub method: PressureMethod,
}

/// sup φ on a grid, used to keep e^{S_nφ − n·shift} in range.
fn phi_shift(phi: &Observable) -> f64 {
    (0..=2000).map(|i| phi.eval(-1.0 + i as f64 / 1000.0)).fold(f64::NEG_INFINITY, f64::max)
}

/// (1/n) log ∫ e^{S_nφ(x)} dx over [−1, 1].
pub fn free_energy_lebesgue(map: &QuadraticMap, phi: &Observable, n: usize, method: PressureMethod) -> Result<LebesguePressure> {
    if n == 0 {
        return Err(Error::Config("n must be ≥ 1".into()));
    }
    let nf = n as f64;
    let shift = phi_shift(phi);
    let term = |x: f64| (nf * (birkhoff_mean(map, phi, x, n) - shift)).exp();
    let (integral, se) = match method {
        PressureMethod::Quadrature { nodes } => {
            if n > MAX_LAP_DEPTH {
                return Err(Error::Budget(format!("lap quadrature limited to n ≤ {MAX_LAP_DEPTH}")));
            }
            let (gx, gw) = gauss_legendre(nodes.max(1));
            let total = fold_laps(
                map,
                n,
                -1.0,
                1.0,
                0.0,
                |acc, lap| {
                    let (c, h) = (0.5 * (lap.lo + lap.hi), 0.5 * (lap.hi - lap.lo));
                    acc + h * gx.iter().zip(&gw).map(|(t, w)| w * term(c + h * t)).sum::<f64>()
                },
                |a, b| a + b,
            );
            (total, 0.0)
        }
        PressureMethod::MonteCarlo { samples, seed } => {
            let chunks = samples.max(2).div_ceil(CHUNK);
            let parts: Vec<(f64, f64)> = (0..chunks)
                .into_par_iter()
                .map(|c| {
                    let mut rng = stream_rng(seed, c);
                    let count = CHUNK.min(samples - c * CHUNK);
                    (0..count).fold((0.0, 0.0), |(s, s2), _| {
                        let v = term(rng.gen_range(-1.0..1.0));
                        (s + v, s2 + v * v)
                    })
                })
                .collect();
            let (s, s2) = parts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
            let m = samples as f64;
            let mean = s / m;
            let var = (s2 / m - mean * mean).max(0.0) / m;
            (2.0 * mean, var.sqrt() / mean / nf)
        }
    };
    if !(integral > 0.0) {
        return Err(Error::Domain(format!("non-positive integral {integral}")));
    }
    let raw = integral.ln() / nf + shift;
    Ok(LebesguePressure { observable: phi.name(), n, raw, corrected: raw - LN_2 / nf, std_error: se, method })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub alpha: f64,
    /// F_φ(α) ≤ 0; NaN without a witness.
    #[serde(with = "ext_f64")]
    pub value: f64,
    pub witness: Option<MeasureStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCurve {
    pub observable: String,
    pub points: Vec<RatePoint>,
    pub missing: Vec<usize>,
    pub note: String,
}

impl RateCurve {
    /// max F_φ over grid points inside [lo, hi].
    pub fn max_on(&self, lo: f64, hi: f64) -> Option<f64> {
        self.points
            .iter()
            .filter(|p| p.alpha >= lo && p.alpha <= hi && p.value.is_finite())
            .map(|p| p.value)
            .reduce(f64::max)
    }
}

impl From<SpectrumCurve> for RateCurve {
    /// From a curve computed with the free-energy objective.
    fn from(curve: SpectrumCurve) -> RateCurve {
        let points = curve
            .points
            .into_iter()
            .map(|p| RatePoint { alpha: p.alpha, value: p.value, witness: p.witness.map(|w| w.stats) })
            .collect();
        RateCurve { observable: curve.observable, points, missing: curve.missing, note: RATE_NOTE.into() }
    }
}

/// F_φ(α) = max{h − λ : ν in the family, ν(φ) = α}.
pub fn rate_function(family: &Family, observable: &str, alpha_grid: &[f64]) -> Result<RateCurve> {
    Ok(variational_curve(family, observable, alpha_grid, Objective::FreeEnergy)?.into())
}

/// max over the family of ν(φ) + F(ν), with the maximizing member.
pub fn family_max(family: &Family, phi: &Observable) -> Option<(f64, FamilyMember)> {
    let periodic: Vec<FamilyMember> = family.periodic.iter().map(|p| p.member(&family.observables)).collect();
    let value = |m: &FamilyMember| match phi {
        Observable::Constant(c) => Some(c + m.stats.free_energy),
        _ => m.stats.mean(&phi.name()).map(|v| v + m.stats.free_energy),
    };
    family
        .members
        .iter()
        .chain(&periodic)
        .filter_map(|m| value(m).map(|v| (v, m)))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(v, m)| (v, m.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegendreRow {
    pub observable: String,
    pub n: usize,
    pub p_n: f64,
    pub family_max: f64,
    /// |P_n − family max|.
    pub delta_raw: f64,
    /// |P_n − (log 2)/n − family max|.
    pub delta: f64,
    /// Corrected P extrapolated from n/2 and n.
    pub richardson: f64,
    pub witness: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegendreReport {
    pub rows: Vec<LegendreRow>,
    pub threshold: f64,
    pub note: String,
}

/// Compares the Lebesgue pressure P_n(φ) with max_family(ν(φ) + F(ν)).
pub fn legendre_check(map: &QuadraticMap, phis: &[Observable], n: usize, family: &Family, threshold: f64, nodes: usize) -> Result<LegendreReport> {
    let mut rows = Vec::new();
    for phi in phis {
        let (fmax, witness) = family_max(family, phi).ok_or_else(|| Error::Config(format!("observable {} not in family", phi.name())))?;
        let p = free_energy_lebesgue(map, phi, n, PressureMethod::Quadrature { nodes })?;
        let half = (n / 2).max(1);
        let ph = free_energy_lebesgue(map, phi, half, PressureMethod::Quadrature { nodes })?;
        let delta = (p.corrected - fmax).abs();
        rows.push(LegendreRow {
            observable: phi.name(),
            n,
            p_n: p.raw,
            family_max: fmax,
            delta_raw: (p.raw - fmax).abs(),
            delta,
            richardson: if half < n { richardson(half, ph.corrected, n, p.corrected) } else { p.corrected },
            witness: witness.stats.provenance,
            pass: delta <= threshold,
        });
    }
    Ok(LegendreReport { rows, threshold, note: RATE_NOTE.into() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoveringEstimate {
    pub observable: String,
    pub n: usize,
    pub window: (f64, f64),
    /// (1/n) log Σ|A| over laps A of f^n meeting the window.
    #[serde(with = "ext_f64")]
    pub rate: f64,
    pub cylinders: usize,
    pub matched: usize,
}

/// Laps of f^n whose sampled range of S_nφ/n meets [α, β]; the hull over a
/// few interior points over-counts relative to a midpoint test.
pub fn covering_estimate(map: &QuadraticMap, phi: &Observable, window: (f64, f64), n: usize) -> Result<CoveringEstimate> {
    if n == 0 || n > MAX_LAP_DEPTH {
        return Err(Error::Budget(format!("covering needs 1 ≤ n ≤ {MAX_LAP_DEPTH}")));
    }
    let (lo, hi) = window;
    let (len, count, matched) = fold_laps(
        map,
        n,
        -1.0,
        1.0,
        (0.0, 0usize, 0usize),
        |(len, c, m), lap| {
            let (mut a, mut b) = (f64::INFINITY, f64::NEG_INFINITY);
            for k in 0..=4 {
                let x = lap.lo + (lap.hi - lap.lo) * k as f64 / 4.0;
                let v = birkhoff_mean(map, phi, x, n);
                a = a.min(v);
                b = b.max(v);
            }
            if b >= lo && a <= hi {
                (len + (lap.hi - lap.lo), c + 1, m + 1)
            } else {
                (len, c + 1, m)
            }
        },
        |x, y| (x.0 + y.0, x.1 + y.1, x.2 + y.2),
    );
    let rate = if matched == 0 { f64::NEG_INFINITY } else { len.ln() / n as f64 };
    Ok(CoveringEstimate { observable: phi.name(), n, window, rate, cylinders: count, matched })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cheb() -> QuadraticMap {
        QuadraticMap::new(2.0).unwrap()
    }

    #[test]
    fn full_window_is_whole_space() {
        let e = deviation_probability(&cheb(), &Observable::X, (-1.0, 1.0), 7, 2000, 1, Method::Plain).unwrap();
        assert_eq!(e.hits, 2000);
        assert!((e.log_measure_rate - LN_2 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn empty_window_flags_tilting() {
        let e = deviation_probability(&cheb(), &Observable::X, (1.5, 2.0), 5, 1000, 1, Method::Plain).unwrap();
        assert!(e.needs_tilting && e.log_measure_rate == f64::NEG_INFINITY);
    }

    #[test]
    fn constant_pressure() {
        let c = 0.37;
        let p = free_energy_lebesgue(&cheb(), &Observable::Constant(c), 6, PressureMethod::Quadrature { nodes: 2 }).unwrap();
        assert!((p.raw - (c + LN_2 / 6.0)).abs() < 1e-12, "{p:?}");
        assert!((p.corrected - c).abs() < 1e-12);
    }

    #[test]
    fn covering_all_and_none() {
        let m = cheb();
        let all = covering_estimate(&m, &Observable::X, (-1.0, 1.0), 6).unwrap();
        assert!((all.rate - LN_2 / 6.0).abs() < 1e-12);
        assert_eq!(all.cylinders, 64);
        let none = covering_estimate(&m, &Observable::X, (2.0, 3.0), 6).unwrap();
        assert_eq!(none.rate, f64::NEG_INFINITY);
    }
}
