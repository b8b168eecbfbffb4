//! Thermodynamic side: horseshoes and their Gibbs measures, the induced
//! Markov family of equilibrium states, Birkhoff spectra and local
//! dimensions.
//!
//! Two measure constructions are provided.
//!
//! * Horseshoes (finitely many branches of f^q onto X̂ = [−x̂, x̂]) with
//!   cylinder sums Σ|K_w|^σ and periodic-orbit measures weighted by
//!   |K_w|^σ e^{s S φ}. Exact on piecewise-linear systems.
//! * The induced map as a two-state (Λ⁺/Λ⁻) countable Markov system. For a
//!   potential −σ log|DF| + s·S_Rφ − P·R the transfer matrix
//!   M[h][h'] = Σ_{ω: h→h'} |ω|^σ e^{s S_Rφ − P R} is solved for ρ(M) = 1,
//!   which yields an f-invariant equilibrium state via Abramov's formula.
//!   Branch data come either from explicit branches or from stratified
//!   point samples (each returned sample stands for 1/(M p) branches).

use crate::error::{Error, Result};
use crate::inducing::{follow_point, Geometry, InducedBranch, InducedSystem};
use crate::laps::{periodic_orbits, pullback, visit_laps};
use crate::map::{Observable, QuadraticMap};
use crate::precision::Big;
use crate::serde_ext::ext_f64;
use crate::stats::{linear_fit, log_sum_exp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::OnceLock;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureStats {
    pub h: f64,
    pub lambda: f64,
    pub means: BTreeMap<String, f64>,
    pub free_energy: f64,
    pub provenance: String,
}

impl MeasureStats {
    pub fn new(h: f64, lambda: f64, means: BTreeMap<String, f64>, provenance: impl Into<String>) -> MeasureStats {
        MeasureStats { h, lambda, means, free_energy: h - lambda, provenance: provenance.into() }
    }

    pub fn mean(&self, name: &str) -> Option<f64> {
        self.means.get(name).copied()
    }

    /// h/λ (0 for λ ≤ 0).
    pub fn ratio(&self) -> f64 {
        if self.lambda > 0.0 {
            self.h / self.lambda
        } else {
            0.0
        }
    }

    /// t·self + (1 − t)·other.
    pub fn mix(&self, other: &MeasureStats, t: f64, provenance: impl Into<String>) -> MeasureStats {
        let means = self
            .means
            .iter()
            .filter_map(|(k, v)| other.means.get(k).map(|w| (k.clone(), t * v + (1.0 - t) * w)))
            .collect();
        MeasureStats::new(t * self.h + (1.0 - t) * other.h, t * self.lambda + (1.0 - t) * other.lambda, means, provenance)
    }
}

/// Finitely many branches g_i: K_i → X̂, each a diffeomorphism onto X̂.
pub trait FullBranchSystem: Sync {
    fn branches(&self) -> usize;
    fn target(&self) -> (f64, f64);
    /// Iterate count q with g_i = f^q on K_i (1 for synthetic maps).
    fn iterate_count(&self) -> usize {
        1
    }
    /// g_i^{-1}(y).
    fn inverse(&self, i: usize, y: f64) -> f64;
    /// |Dg_i(x)|.
    fn derivative(&self, i: usize, x: f64) -> f64;
    /// S_q φ(x) for x ∈ K_i.
    fn birkhoff(&self, i: usize, x: f64, phi: &Observable) -> f64;
}

/// Piecewise-linear increasing branches with the given slopes, laid out
/// left to right in [0, 1] with equal gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFullBranch {
    pub slopes: Vec<f64>,
    pub starts: Vec<f64>,
}

impl LinearFullBranch {
    pub fn new(slopes: &[f64]) -> Result<LinearFullBranch> {
        let total: f64 = slopes.iter().map(|s| 1.0 / s).sum();
        if slopes.is_empty() || slopes.iter().any(|&s| s <= 1.0) || total > 1.0 + 1e-15 {
            return Err(Error::Config("slopes must exceed 1 with Σ 1/s ≤ 1".into()));
        }
        let gap = if slopes.len() > 1 { (1.0 - total).max(0.0) / (slopes.len() - 1) as f64 } else { 0.0 };
        let mut starts = Vec::with_capacity(slopes.len());
        let mut x = 0.0;
        for s in slopes {
            starts.push(x);
            x += 1.0 / s + gap;
        }
        Ok(LinearFullBranch { slopes: slopes.to_vec(), starts })
    }
}

impl FullBranchSystem for LinearFullBranch {
    fn branches(&self) -> usize {
        self.slopes.len()
    }
    fn target(&self) -> (f64, f64) {
        (0.0, 1.0)
    }
    fn inverse(&self, i: usize, y: f64) -> f64 {
        self.starts[i] + y / self.slopes[i]
    }
    fn derivative(&self, i: usize, _x: f64) -> f64 {
        self.slopes[i]
    }
    fn birkhoff(&self, _i: usize, x: f64, phi: &Observable) -> f64 {
        phi.eval(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Connector {
    pub interval: (f64, f64),
    pub u: usize,
    /// Λ⁺ contains the τ-scaled neighbourhood of the interval.
    pub tau: f64,
    pub signs: u64,
}

/// Branches of f^q mapping K_i ⊂ Λ onto X̂ = [−x̂, x̂].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Horseshoe {
    pub map: QuadraticMap,
    pub intervals: Vec<(f64, f64)>,
    pub q: usize,
    pub return_time: usize,
    pub connector: Connector,
    pub x_hat: f64,
    /// Sign words of length q (bit j: f^j(K_i) ⊂ (0, ∞)).
    pub signs: Vec<u64>,
    /// max over endpoints of |f^q(endpoint) ∓ x̂|.
    pub endpoint_error: f64,
    pub min_gap: f64,
}

impl FullBranchSystem for Horseshoe {
    fn branches(&self) -> usize {
        self.intervals.len()
    }
    fn target(&self) -> (f64, f64) {
        (-self.x_hat, self.x_hat)
    }
    fn iterate_count(&self) -> usize {
        self.q
    }
    fn inverse(&self, i: usize, y: f64) -> f64 {
        pullback(&self.map, self.signs[i], self.q, y)
    }
    fn derivative(&self, _i: usize, x: f64) -> f64 {
        let mut y = x;
        let mut d = 1.0;
        for _ in 0..self.q {
            d *= self.map.df(y).abs();
            y = self.map.f(y);
        }
        d
    }
    fn birkhoff(&self, _i: usize, x: f64, phi: &Observable) -> f64 {
        let mut y = x;
        let mut s = 0.0;
        for _ in 0..self.q {
            s += phi.eval(y);
            y = self.map.f(y);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorseshoeSelection {
    /// Use this return time instead of the most populated one.
    pub return_time: Option<usize>,
    pub max_branches: usize,
    /// Largest connector time u tried.
    pub connector_budget: usize,
}

impl Default for HorseshoeSelection {
    fn default() -> Self {
        HorseshoeSelection { return_time: None, max_branches: 4, connector_budget: 20 }
    }
}

fn verify_endpoint(map: &QuadraticMap, x: f64, q: usize, x_hat: f64) -> f64 {
    let bits = 128;
    let a = map.a_big(bits);
    let mut y = Big::from_f64(x, bits);
    for _ in 0..q {
        y = QuadraticMap::f_big(&a, &y);
    }
    let y = y.to_f64();
    (y.abs() - x_hat).abs()
}

/// Selects branches onto Λ⁺ with a common return time and closes them up
/// with a connector I⁺ ⊂ Λ⁺ that f^u maps onto X̂.
pub fn extract_horseshoe(system: &InducedSystem, selection: &HorseshoeSelection) -> Result<Horseshoe> {
    let map = system.map;
    let all = system.all_branches();
    let mut groups: BTreeMap<usize, Vec<&InducedBranch>> = BTreeMap::new();
    for b in all.iter().filter(|b| b.target_sign > 0) {
        groups.entry(b.return_time).or_default().push(b);
    }
    let chosen = match selection.return_time {
        Some(r) => groups.get(&r).filter(|g| g.len() >= 2).map(|g| (r, g.clone())),
        None => groups
            .iter()
            .filter(|(_, g)| g.len() >= 2)
            .max_by(|x, y| x.1.len().cmp(&y.1.len()).then(y.0.cmp(x.0)))
            .map(|(r, g)| (*r, g.clone())),
    };
    let (t0, mut branches) = chosen.ok_or(Error::NoCommonReturnTime)?;
    branches.sort_by(|x, y| y.length.total_cmp(&x.length));
    branches.truncate(selection.max_branches.max(2));
    branches.sort_by(|x, y| x.domain.0.total_cmp(&y.domain.0));

    let x_hat = map.x_hat();
    let (l_lo, l_hi) = system.geometry.lambda_plus;
    let mut connector = None;
    for u in 1..=selection.connector_budget.min(40) {
        let mut best: Option<Connector> = None;
        visit_laps(&map, u, l_lo, l_hi, |lap| {
            let (lo, hi) = (lap.img_lo.min(lap.img_hi), lap.img_lo.max(lap.img_hi));
            if lo <= -x_hat && hi >= x_hat {
                let p1 = pullback(&map, lap.signs, u, -x_hat);
                let p2 = pullback(&map, lap.signs, u, x_hat);
                let (a, b) = (p1.min(p2), p1.max(p2));
                let tau = (a - l_lo).min(l_hi - b) / (b - a);
                if tau > 0.0 && best.map_or(true, |c| tau > c.tau) {
                    best = Some(Connector { interval: (a, b), u, tau, signs: lap.signs });
                }
            }
        });
        if best.is_some() {
            connector = best;
            break;
        }
    }
    let connector = connector.ok_or(Error::ConnectorNotFound(selection.connector_budget))?;
    let q = t0 + connector.u;
    if q >= 64 {
        return Err(Error::Config(format!("horseshoe iterate q = {q} exceeds 63")));
    }
    let mut intervals = Vec::new();
    let mut signs = Vec::new();
    for b in &branches {
        let word = (b.signs[0] & ((1u64 << t0) - 1)) | (connector.signs << t0);
        let e1 = pullback(&map, word, t0, connector.interval.0);
        let e2 = pullback(&map, word, t0, connector.interval.1);
        intervals.push((e1.min(e2), e1.max(e2)));
        signs.push(word);
    }
    let endpoint_error = intervals
        .iter()
        .flat_map(|&(a, b)| [a, b])
        .map(|x| verify_endpoint(&map, x, q, x_hat))
        .fold(0.0, f64::max);
    let min_gap = intervals.windows(2).map(|w| w[1].0 - w[0].1).fold(f64::INFINITY, f64::min);
    if !(min_gap > 0.0) {
        return Err(Error::Breakdown { time: q, reason: "horseshoe intervals overlap".into() });
    }
    Ok(Horseshoe { map, intervals, q, return_time: t0, connector, x_hat, signs, endpoint_error, min_gap })
}

/// A cylinder K_{a₀…a_ℓ} with its log length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cylinder {
    pub word: usize,
    pub lo: f64,
    pub hi: f64,
    pub log_len: f64,
}

pub const CYLINDER_BUDGET: usize = 2_000_000;

/// Largest ℓ with m^{ℓ+1} ≤ budget.
pub fn default_depth(m: usize, budget: usize) -> usize {
    let mut l = 0;
    while m.pow(l as u32 + 2) <= budget {
        l += 1;
    }
    l
}

/// All cylinders of length ℓ + 1, word digits base m with a₀ most significant.
/// Lengths are propagated multiplicatively (|K_{aw}| = |K_w|/|Dg_a|) so they
/// stay accurate far below the spacing of `f64` endpoints.
pub fn cylinders<S: FullBranchSystem + ?Sized>(sys: &S, depth: usize) -> Result<Vec<Cylinder>> {
    let m = sys.branches();
    let count = (m as f64).powi(depth as i32 + 1);
    if count > CYLINDER_BUDGET as f64 {
        return Err(Error::Budget(format!("{count} cylinders exceed {CYLINDER_BUDGET}")));
    }
    let (t_lo, t_hi) = sys.target();
    let mut level = vec![Cylinder { word: 0, lo: t_lo, hi: t_hi, log_len: (t_hi - t_lo).ln() }];
    let mut stride = 1usize;
    for _ in 0..=depth {
        let next: Vec<Cylinder> = (0..m)
            .into_par_iter()
            .flat_map_iter(|a| {
                let level = &level;
                level.iter().map(move |c| {
                    let e1 = sys.inverse(a, c.lo);
                    let e2 = sys.inverse(a, c.hi);
                    let mid = sys.inverse(a, 0.5 * (c.lo + c.hi));
                    Cylinder {
                        word: a * stride + c.word,
                        lo: e1.min(e2),
                        hi: e1.max(e2),
                        log_len: c.log_len - sys.derivative(a, mid).ln(),
                    }
                })
            })
            .collect();
        level = next;
        stride *= m;
    }
    Ok(level)
}

fn digits(word: usize, m: usize, len: usize) -> Vec<usize> {
    let mut d = vec![0; len];
    let mut w = word;
    for i in (0..len).rev() {
        d[i] = w % m;
        w /= m;
    }
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressureSum {
    /// (1/(ℓ+1)) log Σ (|K_w|/|X̂|)^σ at the requested depth.
    pub rate: f64,
    /// (depth, rate) for depths 1..=ℓ.
    pub trend: Vec<(usize, f64)>,
}

/// Normalized cylinder sum. Lengths are taken relative to |X̂| and the sum
/// over words of length ℓ+1 is divided by ℓ+1, which makes the value exact
/// at every depth on linear systems.
pub fn pressure_sum<S: FullBranchSystem + ?Sized>(sys: &S, sigma: f64, depth: usize) -> Result<PressureSum> {
    if !(0.0..=1.5).contains(&sigma) {
        return Err(Error::Domain(format!("σ = {sigma} outside [0, 1.5]")));
    }
    let (t_lo, t_hi) = sys.target();
    let base = (t_hi - t_lo).ln();
    let mut trend = Vec::new();
    for l in 1..=depth.max(1) {
        let cyl = cylinders(sys, l)?;
        let r = log_sum_exp(cyl.iter().map(|c| sigma * (c.log_len - base))) / (l + 1) as f64;
        trend.push((l, r));
    }
    Ok(PressureSum { rate: trend.last().unwrap().1, trend })
}

/// σ* with pressure rate 0, by bisection on [0, 1.5].
pub fn bowen_dimension<S: FullBranchSystem + ?Sized>(sys: &S, depth: usize) -> Result<f64> {
    let cyl = cylinders(sys, depth)?;
    let (t_lo, t_hi) = sys.target();
    let base = (t_hi - t_lo).ln();
    let rate = |s: f64| log_sum_exp(cyl.iter().map(|c| s * (c.log_len - base)));
    let (mut lo, mut hi) = (0.0, 1.5);
    if rate(hi) > 0.0 {
        return Err(Error::Domain("pressure positive at σ = 1.5".into()));
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Induced-level statistics of the weighted periodic-orbit measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumStats {
    pub stats: MeasureStats,
    pub q: usize,
    pub sigma: f64,
    pub s: f64,
    pub depth: usize,
    /// ν(K_i) for each first symbol.
    pub first_symbol_weights: Vec<f64>,
}

/// ν_ℓ = Σ_w ρ_w · (uniform measure on the period-(ℓ+1) orbit in K_w),
/// ρ_w ∝ |K_w|^σ exp(s Σ_j S_qφ(x_j)). `obs[0]` carries the tilt; all
/// observables get means.
pub fn equilibrium_stats<S: FullBranchSystem + ?Sized>(
    sys: &S,
    sigma: f64,
    s: f64,
    obs: &[Observable],
    depth: usize,
) -> Result<EquilibriumStats> {
    let m = sys.branches();
    let len = depth + 1;
    let cyl = cylinders(sys, depth)?;
    let (t_lo, t_hi) = sys.target();
    let base = (t_hi - t_lo).ln();
    struct Row {
        log_w: f64,
        log_deriv: f64,
        sums: Vec<f64>,
        first: usize,
    }
    let rows: Vec<Row> = cyl
        .par_iter()
        .map(|c| {
            let d = digits(c.word, m, len);
            // fixed point of g_{a0}^{-1} ∘ … ∘ g_{aℓ}^{-1}
            let mut x = 0.5 * (c.lo + c.hi);
            for _ in 0..4 {
                let mut y = x;
                for &a in d.iter().rev() {
                    y = sys.inverse(a, y);
                }
                x = y;
            }
            // orbit points x_j = g_{aj}^{-1} ∘ … ∘ g_{aℓ}^{-1}(x_0)
            let mut pts = vec![0.0; len];
            let mut y = x;
            for j in (0..len).rev() {
                y = sys.inverse(d[j], y);
                pts[j] = y;
            }
            pts[0] = x;
            let mut sums = vec![0.0; obs.len()];
            let mut log_deriv = 0.0;
            for j in 0..len {
                log_deriv += sys.derivative(d[j], pts[j]).ln();
                for (k, o) in obs.iter().enumerate() {
                    sums[k] += sys.birkhoff(d[j], pts[j], o);
                }
            }
            let tilt = if obs.is_empty() { 0.0 } else { s * sums[0] };
            Row { log_w: sigma * (c.log_len - base) + tilt, log_deriv, sums, first: d[0] }
        })
        .collect();
    let z = log_sum_exp(rows.iter().map(|r| r.log_w));
    let mut entropy = 0.0;
    let mut lam = 0.0;
    let mut means = vec![0.0; obs.len()];
    let mut first = vec![0.0; m];
    for r in &rows {
        let lr = r.log_w - z;
        let rho = lr.exp();
        if rho > 0.0 {
            entropy -= rho * lr;
        }
        lam += rho * r.log_deriv;
        for (k, v) in r.sums.iter().enumerate() {
            means[k] += rho * v;
        }
        first[r.first] += rho;
    }
    let n = len as f64;
    let means = obs.iter().zip(&means).map(|(o, v)| (o.name(), v / n)).collect();
    let stats = MeasureStats::new(
        entropy / n,
        lam / n,
        means,
        format!("horseshoe Gibbs measure σ={sigma} s={s} depth {depth}"),
    );
    Ok(EquilibriumStats { stats, q: sys.iterate_count(), sigma, s, depth, first_symbol_weights: first })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Spread {
    /// Common iterate q.
    Fixed(usize),
    /// Mean return time ∫R dν.
    Variable(f64),
}

/// Abramov spreading: h, λ and ν(φ) divided by q (or by ∫R).
pub fn spread_to_f_invariant(stats: &MeasureStats, spread: Spread) -> Result<MeasureStats> {
    let d = match spread {
        Spread::Fixed(q) => q as f64,
        Spread::Variable(r) => r,
    };
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::DivisionGuard(format!("spreading by {d}")));
    }
    let means = stats.means.iter().map(|(k, v)| (k.clone(), v / d)).collect();
    Ok(MeasureStats::new(stats.h / d, stats.lambda / d, means, format!("{} (spread by {d})", stats.provenance)))
}

/// Return data of one induced branch (or one sampled point standing for
/// 1/(M p) branches).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducedSample {
    /// log(|ω|/|Λ^±|), i.e. −log|DF| up to distortion.
    pub log_p: f64,
    pub log_mult: f64,
    pub return_time: u32,
    pub target_sign: i8,
    /// S_Rφ on the Λ⁺ branch, per observable.
    pub phi_plus: Vec<f64>,
    /// S_Rφ on the mirrored Λ⁻ branch.
    pub phi_minus: Vec<f64>,
    /// The following excursion from f^R(x), when it returns in time.
    pub next: Option<NextReturn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextReturn {
    pub log_p: f64,
    pub return_time: u32,
    pub target_sign: i8,
    pub phi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducedFamilyData {
    pub observables: Vec<Observable>,
    pub samples: Vec<InducedSample>,
    pub sampled: bool,
    /// Fraction of Λ represented.
    pub coverage: f64,
    pub t_max: usize,
    /// Samples carry a second excursion and pressures are solved from the
    /// ratio of two- and one-step sums.
    pub two_step: bool,
    #[serde(skip)]
    cache: (OnceLock<Rows>, OnceLock<Rows>),
}

impl InducedFamilyData {
    /// One sample per explicit branch, Birkhoff sums taken along the
    /// preimage of the centre of Λ^s.
    pub fn from_branches(system: &InducedSystem, obs: &[Observable]) -> InducedFamilyData {
        let g = &system.geometry;
        let map = system.map;
        let samples = system
            .branches
            .par_iter()
            .map(|b| {
                let (lo, hi) = g.lambda(b.target_sign);
                let mut y = 0.5 * (lo + hi);
                let mut sums = vec![0.0; obs.len()];
                let mut x0 = y;
                for k in (0..b.return_time).rev() {
                    let r = ((1.0 - y) / map.a).max(0.0).sqrt();
                    y = if b.sign_at(k) { r } else { -r };
                    for (s, o) in sums.iter_mut().zip(obs) {
                        *s += o.eval(y);
                    }
                    x0 = y;
                }
                let minus: Vec<f64> = sums.iter().zip(obs).map(|(s, o)| s - o.eval(x0) + o.eval(-x0)).collect();
                InducedSample {
                    log_p: (b.length / g.base_len).ln(),
                    log_mult: 0.0,
                    return_time: b.return_time as u32,
                    target_sign: b.target_sign,
                    phi_plus: sums,
                    phi_minus: minus,
                    next: None,
                }
            })
            .collect();
        InducedFamilyData {
            observables: obs.to_vec(),
            samples,
            sampled: false,
            coverage: system.explicit_coverage(),
            t_max: system.config.t_max,
            two_step: false,
            cache: Default::default(),
        }
    }

    /// Stratified uniform points of Λ⁺ followed through the rules for two
    /// consecutive returns. Weighting a branch by a point value of e^{sS}
    /// instead of its transfer-operator weight biases one-step sums by a
    /// distortion term; the two-step/one-step ratio cancels it.
    pub fn sample(map: &QuadraticMap, g: &Geometry, obs: &[Observable], count: usize, t_max: usize) -> InducedFamilyData {
        let (lo, _) = g.lambda_plus;
        let m = count as f64;
        let samples: Vec<InducedSample> = (0..count)
            .into_par_iter()
            .filter_map(|i| {
                let x = lo + (i as f64 + 0.5) / m * g.base_len;
                let e = follow_point(map, g, x, t_max, obs)?;
                let y = e.end_point;
                let next = follow_point(map, g, y.abs(), t_max, obs).map(|f| NextReturn {
                    log_p: -f.log_deriv,
                    return_time: f.return_time as u32,
                    target_sign: f.target_sign,
                    phi: if y >= 0.0 { f.phi_plus } else { f.phi_minus },
                });
                Some(InducedSample {
                    log_p: -e.log_deriv,
                    log_mult: e.log_deriv - m.ln(),
                    return_time: e.return_time as u32,
                    target_sign: e.target_sign,
                    phi_plus: e.phi_plus,
                    phi_minus: e.phi_minus,
                    next,
                })
            })
            .collect();
        let coverage = samples.len() as f64 / m;
        InducedFamilyData { observables: obs.to_vec(), samples, sampled: true, coverage, t_max, two_step: true, cache: Default::default() }
    }

    pub fn observable_index(&self, name: &str) -> Option<usize> {
        self.observables.iter().position(|o| o.name() == name)
    }

    /// Rows per sample and half over one (`two = false`) or two excursions,
    /// flattened once and cached.
    fn rows(&self, two: bool) -> &Rows {
        let cell = if two { &self.cache.1 } else { &self.cache.0 };
        cell.get_or_init(|| {
            let nobs = self.observables.len();
            let mut rows = Rows { nobs, ..Default::default() };
            for s in &self.samples {
                let nx = match (two, &s.next) {
                    (false, _) => None,
                    (true, Some(n)) => Some(n),
                    (true, None) => continue,
                };
                for half in 0..2 {
                    let mut phi = if half == 0 { s.phi_plus.clone() } else { s.phi_minus.clone() };
                    let (mut lp, mut lm, mut r, mut t) = (s.log_p, s.log_mult, s.return_time as usize, s.target_sign);
                    if let Some(n) = nx {
                        lp += n.log_p;
                        lm -= n.log_p;
                        r += n.return_time as usize;
                        t = n.target_sign;
                        for (a, b) in phi.iter_mut().zip(&n.phi) {
                            *a += b;
                        }
                    }
                    rows.log_mult.push(lm);
                    rows.log_p.push(lp);
                    rows.group.push((half * 2 + (t < 0) as usize) as u8);
                    rows.r.push(r as u32);
                    rows.phi.extend(phi);
                }
            }
            rows
        })
    }

    fn groups(&self, sigma: f64, tilt: &[f64], two: bool) -> Groups {
        let rows = self.rows(two);
        let nobs = rows.nobs;
        let rmax = rows.r.iter().copied().max().unwrap_or(0) as usize;
        let log_w: Vec<f64> = (0..rows.r.len())
            .map(|i| {
                let phi = &rows.phi[i * nobs..][..nobs];
                rows.log_mult[i] + sigma * rows.log_p[i] + tilt.iter().zip(phi).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let shift = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = 2 + nobs;
        let mut acc = vec![vec![0.0; (rmax + 1) * width]; 4];
        for (i, lw) in log_w.iter().enumerate() {
            let w = (lw - shift).exp();
            let a = &mut acc[rows.group[i] as usize][rows.r[i] as usize * width..][..width];
            a[0] += w;
            a[1] -= w * rows.log_p[i];
            for (j, v) in rows.phi[i * nobs..][..nobs].iter().enumerate() {
                a[2 + j] += w * v;
            }
        }
        Groups { acc, width, shift, rmax }
    }

    fn effective_samples(&self, sigma: f64, tilt: &[f64], p: f64, two: bool) -> f64 {
        let rows = self.rows(two);
        let nobs = rows.nobs;
        let log_w: Vec<f64> = (0..rows.r.len())
            .map(|i| {
                let phi = &rows.phi[i * nobs..][..nobs];
                rows.log_mult[i] + sigma * rows.log_p[i] + tilt.iter().zip(phi).map(|(a, b)| a * b).sum::<f64>()
                    - p * rows.r[i] as f64
            })
            .collect();
        let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (s1, s2) = log_w.iter().fold((0.0, 0.0), |(a, b), l| {
            let w = (l - top).exp();
            (a + w, b + w * w)
        });
        s1 * s1 / s2
    }

    /// Equilibrium state of −σ log|DF| + Σ_j tilt_j S_Rφ_j − P·R with P
    /// chosen so the spectral radius of the transfer matrix is 1.
    pub fn solve(&self, sigma: f64, tilt: &[f64]) -> Result<MarkovSolution> {
        if self.two_step {
            return self.solve_two_step(sigma, tilt);
        }
        let groups = self.groups(sigma, tilt, false);
        let mut p = 0.0;
        let mut last = None;
        for _ in 0..200 {
            let m = groups.moments(p)?;
            let done = m.log_rho.abs() < 1e-12;
            let step = m.log_rho / m.expected_return;
            last = Some(m);
            if done {
                break;
            }
            p += step;
        }
        let m = last.unwrap();
        if m.log_rho.abs() > 1e-8 {
            return Err(Error::Breakdown { time: 0, reason: format!("pressure solve stalled at log ρ = {}", m.log_rho) });
        }
        let h_f = p * m.expected_return + sigma * m.lambda_induced
            - tilt.iter().zip(&m.phi_induced).map(|(a, b)| a * b).sum::<f64>();
        let er = m.expected_return;
        let means = self.observables.iter().zip(&m.phi_induced).map(|(o, v)| (o.name(), v / er)).collect();
        let kind = if self.sampled { "sampled" } else { "explicit" };
        let tilt_txt: Vec<String> = tilt.iter().map(|t| format!("{t}")).collect();
        let stats = MeasureStats::new(
            h_f / er,
            m.lambda_induced / er,
            means,
            format!("{kind} induced equilibrium σ={sigma} s=[{}]", tilt_txt.join(",")),
        );
        Ok(MarkovSolution {
            pressure: p,
            expected_return: er,
            effective_samples: self.effective_samples(sigma, tilt, p, false),
            lambda_induced: m.lambda_induced,
            h_induced: h_f,
            phi_induced: m.phi_induced,
            stats,
        })
    }
}

impl InducedFamilyData {
    fn solve_two_step(&self, sigma: f64, tilt: &[f64]) -> Result<MarkovSolution> {
        let g1 = self.groups(sigma, tilt, false);
        let g2 = self.groups(sigma, tilt, true);
        let eval = |p: f64| -> Result<(f64, f64, Moments, Moments)> {
            let m1 = g1.moments(p)?;
            let m2 = g2.moments(p)?;
            Ok((m2.log_rho - m1.log_rho, m2.expected_return - m1.expected_return, m1, m2))
        };
        // G(P) = log ρ₂ − log ρ₁ is decreasing with slope −(E₂R − E₁R)
        let mut p = 0.0;
        let mut sol = None;
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for _ in 0..200 {
            let (gv, dr, m1, m2) = eval(p)?;
            if gv > 0.0 {
                lo = p;
            } else {
                hi = p;
            }
            if gv.abs() < 1e-12 || hi - lo < 1e-15 {
                sol = Some((m1, m2));
                break;
            }
            let mut next = p + gv / dr.max(1e-12);
            if !(next > lo && next < hi) || !next.is_finite() {
                next = if lo.is_finite() && hi.is_finite() {
                    0.5 * (lo + hi)
                } else if lo.is_finite() {
                    lo + 1.0
                } else {
                    hi - 1.0
                };
            }
            p = next;
        }
        let (m1, m2) = sol.ok_or_else(|| Error::Breakdown { time: 0, reason: "two-step pressure solve stalled".into() })?;
        let dr = m2.expected_return - m1.expected_return;
        if !(dr > 0.0) {
            return Err(Error::DivisionGuard("non-positive return-time increment".into()));
        }
        let lambda = (m2.lambda_induced - m1.lambda_induced) / dr;
        let phi: Vec<f64> = m2.phi_induced.iter().zip(&m1.phi_induced).map(|(a, b)| (a - b) / dr).collect();
        let h = p + sigma * lambda - tilt.iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>();
        let means = self.observables.iter().zip(&phi).map(|(o, v)| (o.name(), *v)).collect();
        let tilt_txt: Vec<String> = tilt.iter().map(|t| format!("{t}")).collect();
        let stats = MeasureStats::new(h, lambda, means, format!("sampled induced equilibrium σ={sigma} s=[{}]", tilt_txt.join(",")));
        Ok(MarkovSolution {
            pressure: p,
            expected_return: dr,
            effective_samples: self.effective_samples(sigma, tilt, p, true),
            lambda_induced: lambda * dr,
            h_induced: h * dr,
            phi_induced: phi.iter().map(|v| v * dr).collect(),
            stats,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Rows {
    nobs: usize,
    log_mult: Vec<f64>,
    log_p: Vec<f64>,
    /// half · 2 + (target < 0)
    group: Vec<u8>,
    r: Vec<u32>,
    phi: Vec<f64>,
}

struct Groups {
    /// Per (half, target): rows of [Σw, Σw·L, Σw·S_j] indexed by R.
    acc: Vec<Vec<f64>>,
    width: usize,
    shift: f64,
    rmax: usize,
}

struct Moments {
    log_rho: f64,
    expected_return: f64,
    lambda_induced: f64,
    phi_induced: Vec<f64>,
}

impl Groups {
    fn moments(&self, p: f64) -> Result<Moments> {
        // log of each matrix entry relative to a common scale
        let mut log_entry = [f64::NEG_INFINITY; 4];
        for (g, le) in log_entry.iter_mut().enumerate() {
            *le = log_sum_exp((0..=self.rmax).filter_map(|r| {
                let w = self.acc[g][r * self.width];
                (w > 0.0).then(|| w.ln() - p * r as f64)
            }));
        }
        let scale = log_entry.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if scale == f64::NEG_INFINITY {
            return Err(Error::Domain("empty induced family".into()));
        }
        let e: Vec<f64> = log_entry.iter().map(|l| (l - scale).exp()).collect();
        let (a, b, c, d) = (e[0], e[1], e[2], e[3]);
        let rho = 0.5 * (a + d) + (0.25 * (a - d) * (a - d) + b * c).sqrt();
        let pick = |x: (f64, f64), y: (f64, f64)| {
            if x.0.abs() + x.1.abs() >= y.0.abs() + y.1.abs() {
                (x.0.abs(), x.1.abs())
            } else {
                (y.0.abs(), y.1.abs())
            }
        };
        let v = pick((b, rho - a), (rho - d, c));
        let u = pick((c, rho - a), (rho - d, b));
        let v = [v.0.max(1e-300), v.1.max(1e-300)];
        let pi = {
            let w = [u.0 * v[0], u.1 * v[1]];
            let s = w[0] + w[1];
            [w[0] / s, w[1] / s]
        };
        let nobs = self.width - 2;
        let (mut er, mut el) = (0.0, 0.0);
        let mut es = vec![0.0; nobs];
        for h in 0..2 {
            for t in 0..2 {
                let g = h * 2 + t;
                let factor = pi[h] * v[t] / (rho * v[h]);
                for r in 0..=self.rmax {
                    let row = &self.acc[g][r * self.width..][..self.width];
                    if row[0] <= 0.0 {
                        continue;
                    }
                    let q = (row[0].ln() - p * r as f64 - scale).exp() * factor;
                    er += q * r as f64;
                    el += q * row[1] / row[0];
                    for j in 0..nobs {
                        es[j] += q * row[2 + j] / row[0];
                    }
                }
            }
        }
        Ok(Moments { log_rho: scale + self.shift + rho.ln(), expected_return: er, lambda_induced: el, phi_induced: es })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovSolution {
    pub pressure: f64,
    pub expected_return: f64,
    pub lambda_induced: f64,
    pub h_induced: f64,
    pub phi_induced: Vec<f64>,
    /// (Σw)²/Σw² over the rows at the solution; small values mean the
    /// sums are carried by a few rare excursions.
    pub effective_samples: f64,
    /// f-invariant statistics (Abramov-spread).
    pub stats: MeasureStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberKind {
    SampledEquilibrium,
    ExplicitEquilibrium,
    /// The acip, with h = λ by Pesin's formula and Monte-Carlo λ and means.
    Pesin,
    Periodic,
    Combination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyMember {
    pub kind: MemberKind,
    pub sigma: Option<f64>,
    pub s: Option<f64>,
    pub tilt_observable: Option<String>,
    pub pressure: Option<f64>,
    pub stats: MeasureStats,
}

impl FamilyMember {
    fn key(&self) -> (f64, f64) {
        (self.sigma.unwrap_or(f64::NAN), self.s.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyConfig {
    pub sigma_sampled: Vec<f64>,
    pub sigma_explicit: Vec<f64>,
    /// σ values at which members are re-solved to hit a target mean.
    pub sigma_targeted: Vec<f64>,
    pub s_sweep: Vec<f64>,
    /// Tilts beyond this are not tried when targeting a mean.
    pub s_max: f64,
    pub periodic_max: usize,
    /// Periodic orbits with the lowest/highest means used in combinations.
    pub extremes: usize,
    /// |ν(φ) − α| accepted for untargeted members.
    pub tolerance: f64,
    pub acip_steps: usize,
    pub acip_orbits: usize,
    pub seed: u64,
    /// Solutions whose weight is carried by fewer effective samples are
    /// rejected, as are those violating Ruelle's inequality or h ≤ log 2.
    pub min_effective_samples: f64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig {
            sigma_sampled: vec![0.9, 0.95, 1.0, 1.05, 1.1],
            sigma_explicit: vec![0.25, 0.5, 0.75, 1.0, 1.25, 1.5],
            sigma_targeted: vec![1.0],
            s_sweep: vec![-4.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 4.0],
            s_max: 64.0,
            periodic_max: 20,
            extremes: 4,
            tolerance: 1e-6,
            acip_steps: 1_000_000,
            acip_orbits: 10,
            seed: 0x7e57,
            min_effective_samples: 1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcipEstimate {
    pub lyapunov: f64,
    pub lyapunov_se: f64,
    pub means: BTreeMap<String, f64>,
    pub reseeds: usize,
}

/// Lebesgue-typical orbit averages over independent seeded orbits. An
/// `f64` orbit can land exactly on the critical point and then on the
/// repelling fixed point −1; such orbits are restarted from a fresh point.
pub fn acip_estimate(map: &QuadraticMap, obs: &[Observable], steps: usize, orbits: usize, seed: u64) -> AcipEstimate {
    let runs: Vec<(f64, Vec<f64>, usize)> = (0..orbits.max(1))
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut x: f64 = rng.gen_range(-1.0..1.0);
            let mut lyap = 0.0;
            let mut sums = vec![0.0; obs.len()];
            let mut reseeds = 0;
            for _ in 0..steps {
                let y = map.f(x);
                if x == 0.0 || y == x {
                    x = rng.gen_range(-1.0..1.0);
                    reseeds += 1;
                }
                lyap += map.df(x).abs().ln();
                for (s, o) in sums.iter_mut().zip(obs) {
                    *s += o.eval(x);
                }
                x = map.f(x);
            }
            let n = steps as f64;
            (lyap / n, sums.into_iter().map(|s| s / n).collect(), reseeds)
        })
        .collect();
    let ls: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let (lyapunov, lyapunov_se) = crate::stats::mean_se(&ls);
    let k = runs.len() as f64;
    let means = obs
        .iter()
        .enumerate()
        .map(|(j, o)| (o.name(), runs.iter().map(|r| r.1[j]).sum::<f64>() / k))
        .collect();
    AcipEstimate { lyapunov, lyapunov_se, means, reseeds: runs.iter().map(|r| r.2).sum() }
}

/// A periodic orbit summarized for the family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicSummary {
    pub period: usize,
    pub exponent: f64,
    pub means: Vec<f64>,
}

impl PeriodicSummary {
    pub(crate) fn member(&self, obs: &[Observable]) -> FamilyMember {
        let means = obs.iter().zip(&self.means).map(|(o, v)| (o.name(), *v)).collect();
        FamilyMember {
            kind: MemberKind::Periodic,
            sigma: None,
            s: None,
            tilt_observable: None,
            pressure: None,
            stats: MeasureStats::new(0.0, self.exponent, means, format!("periodic orbit, period {}", self.period)),
        }
    }
}

/// Candidate measures for the variational formulas.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Family {
    pub observables: Vec<Observable>,
    pub members: Vec<FamilyMember>,
    /// Sweep solutions dropped as inadmissible.
    pub rejected: usize,
    pub periodic: Vec<PeriodicSummary>,
    pub acip: AcipEstimate,
    pub config: FamilyConfig,
    #[serde(skip)]
    pub data: Vec<InducedFamilyData>,
}

/// Slack for Ruelle's inequality F ≤ 0 and the entropy bound h ≤ log 2.
pub const RUELLE_SLACK: f64 = 1e-2;
pub const ENTROPY_SLACK: f64 = 1e-3;

fn admissible(sol: &MarkovSolution, config: &FamilyConfig) -> bool {
    sol.effective_samples >= config.min_effective_samples
        && sol.stats.free_energy <= RUELLE_SLACK
        && sol.stats.h <= std::f64::consts::LN_2 + ENTROPY_SLACK
        && sol.stats.h.is_finite()
}

fn member_from(sol: &MarkovSolution, sampled: bool, sigma: f64, s: f64, tilt: Option<&Observable>) -> FamilyMember {
    FamilyMember {
        kind: if sampled { MemberKind::SampledEquilibrium } else { MemberKind::ExplicitEquilibrium },
        sigma: Some(sigma),
        s: Some(s),
        tilt_observable: tilt.map(|o| o.name()),
        pressure: Some(sol.pressure),
        stats: sol.stats.clone(),
    }
}

/// Sweeps the equilibrium family over σ × tilt and adds the acip (Pesin)
/// member and all periodic orbits up to `periodic_max`.
pub fn build_family(map: &QuadraticMap, data: Vec<InducedFamilyData>, config: &FamilyConfig) -> Result<Family> {
    let obs = data.first().map(|d| d.observables.clone()).ok_or(Error::Config("no induced data".into()))?;
    if data.iter().any(|d| d.observables != obs) {
        return Err(Error::Config("induced data sets disagree on observables".into()));
    }
    let mut jobs = Vec::new();
    for (di, d) in data.iter().enumerate() {
        let sigmas = if d.sampled { &config.sigma_sampled } else { &config.sigma_explicit };
        for &sigma in sigmas {
            jobs.push((di, sigma, None, 0.0));
            for j in 0..obs.len() {
                for &s in config.s_sweep.iter().filter(|s| **s != 0.0) {
                    jobs.push((di, sigma, Some(j), s));
                }
            }
        }
    }
    let solved: Vec<Option<FamilyMember>> = jobs
        .par_iter()
        .map(|&(di, sigma, j, s)| {
            let d = &data[di];
            let mut tilt = vec![0.0; obs.len()];
            if let Some(j) = j {
                tilt[j] = s;
            }
            d.solve(sigma, &tilt)
                .ok()
                .filter(|sol| admissible(sol, config))
                .map(|sol| member_from(&sol, d.sampled, sigma, s, j.map(|j| &obs[j])))
        })
        .collect();
    let rejected = solved.iter().filter(|m| m.is_none()).count();
    let mut members: Vec<FamilyMember> = solved.into_iter().flatten().collect();

    let acip = acip_estimate(map, &obs, config.acip_steps, config.acip_orbits, config.seed);
    members.push(FamilyMember {
        kind: MemberKind::Pesin,
        sigma: Some(1.0),
        s: Some(0.0),
        tilt_observable: None,
        pressure: Some(0.0),
        stats: MeasureStats::new(acip.lyapunov, acip.lyapunov, acip.means.clone(), "acip (Pesin: h = λ)"),
    });

    let census = periodic_orbits(map, config.periodic_max);
    let periodic: Vec<PeriodicSummary> = census
        .cycles
        .iter()
        .map(|c| PeriodicSummary {
            period: c.period,
            exponent: c.exponent(),
            means: obs.iter().map(|o| c.mean(|x| o.eval(x))).collect(),
        })
        .collect();
    Ok(Family { observables: obs, members, rejected, periodic, acip, config: config.clone(), data })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// h/λ (Birkhoff spectrum).
    DimensionRatio,
    /// h − λ (rate function).
    FreeEnergy,
}

impl Objective {
    fn score(&self, m: &MeasureStats) -> f64 {
        match self {
            Objective::DimensionRatio => m.ratio(),
            Objective::FreeEnergy => m.free_energy,
        }
    }
}

impl Family {
    pub fn observable_index(&self, name: &str) -> Option<usize> {
        self.observables.iter().position(|o| o.name() == name)
    }

    /// (min, max) of ν(φ_j) over members and periodic orbits.
    pub fn mean_range(&self, j: usize) -> (f64, f64) {
        let name = self.observables[j].name();
        let vals = self
            .members
            .iter()
            .filter_map(|m| m.stats.mean(&name))
            .chain(self.periodic.iter().map(|p| p.means[j]));
        vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }

    fn extremes(&self, j: usize) -> Vec<FamilyMember> {
        let mut idx: Vec<usize> = (0..self.periodic.len()).collect();
        idx.sort_by(|&a, &b| self.periodic[a].means[j].total_cmp(&self.periodic[b].means[j]));
        let k = self.config.extremes.min(idx.len());
        let mut pick: Vec<usize> = idx[..k].to_vec();
        pick.extend(&idx[idx.len() - k..]);
        pick.sort_unstable();
        pick.dedup();
        pick.into_iter().map(|i| self.periodic[i].member(&self.observables)).collect()
    }

    /// Equilibrium members with ν(φ_j) = α, one per (data set, σ), found by
    /// regula falsi in the tilt on φ_j.
    pub fn targeted(&self, j: usize, alpha: f64) -> Vec<FamilyMember> {
        let name = self.observables[j].name();
        let mut out = Vec::new();
        for d in &self.data {
            for &sigma in &self.config.sigma_targeted {
                let eval = |s: f64| -> Option<MarkovSolution> {
                    let mut tilt = vec![0.0; self.observables.len()];
                    tilt[j] = s;
                    d.solve(sigma, &tilt).ok().filter(|sol| admissible(sol, &self.config))
                };
                let mean_of = |sol: &MarkovSolution| sol.stats.mean(&name).unwrap_or(f64::NAN);
                if let Some(sol) = target_mean(&eval, &mean_of, alpha, self.config.s_max) {
                    let s = sol.1;
                    out.push(member_from(&sol.0, d.sampled, sigma, s, Some(&self.observables[j])));
                }
            }
        }
        out
    }

    /// Members with ν(φ_j) = α: members within the tolerance, targeted
    /// equilibrium states, and exact-mean convex combinations with extreme
    /// periodic orbits.
    pub fn candidates(&self, j: usize, alpha: f64) -> Vec<FamilyMember> {
        let name = self.observables[j].name();
        let tol = self.config.tolerance;
        let mut pool: Vec<FamilyMember> = self
            .members
            .iter()
            .filter(|m| m.kind != MemberKind::Combination)
            .cloned()
            .collect();
        pool.extend(self.targeted(j, alpha));
        let extremes = self.extremes(j);
        let mut cands: Vec<FamilyMember> = pool
            .iter()
            .chain(&extremes)
            .filter(|m| m.stats.mean(&name).is_some_and(|v| (v - alpha).abs() <= tol))
            .cloned()
            .collect();
        for a in pool.iter().chain(&extremes) {
            for b in &extremes {
                let (ma, mb) = (a.stats.mean(&name).unwrap(), b.stats.mean(&name).unwrap());
                if (ma - alpha) * (mb - alpha) < 0.0 {
                    let t = (alpha - mb) / (ma - mb);
                    let stats = a.stats.mix(&b.stats, t, format!("{t:.6}·[{}] + rest·[{}]", a.stats.provenance, b.stats.provenance));
                    cands.push(FamilyMember {
                        kind: MemberKind::Combination,
                        sigma: a.sigma,
                        s: a.s,
                        tilt_observable: a.tilt_observable.clone(),
                        pressure: None,
                        stats,
                    });
                }
            }
        }
        cands
    }

    /// Best member at ν(φ_j) = α under the objective; ties break on (σ, s).
    pub fn best_at(&self, j: usize, alpha: f64, objective: Objective) -> Option<FamilyMember> {
        pick(self.candidates(j, alpha), objective)
    }
}

fn pick(cands: Vec<FamilyMember>, objective: Objective) -> Option<FamilyMember> {
    cands.into_iter().max_by(|x, y| {
        objective
            .score(&x.stats)
            .total_cmp(&objective.score(&y.stats))
            .then(x.key().0.total_cmp(&y.key().0))
            .then(x.key().1.total_cmp(&y.key().1))
    })
}

/// Finds s with mean(s) = α (mean is non-decreasing in s).
fn target_mean<E, M>(eval: &E, mean_of: &M, alpha: f64, s_max: f64) -> Option<(MarkovSolution, f64)>
where
    E: Fn(f64) -> Option<MarkovSolution>,
    M: Fn(&MarkovSolution) -> f64,
{
    let f0 = eval(0.0)?;
    let m0 = mean_of(&f0) - alpha;
    if m0 == 0.0 {
        return Some((f0, 0.0));
    }
    let dir = if m0 < 0.0 { 1.0 } else { -1.0 };
    let (mut a, mut fa) = (0.0, m0);
    let mut step = 0.5;
    // smallest |s| found inadmissible; the bracket is then grown by halving
    let mut wall: Option<f64> = None;
    let (mut b, mut fb, sol_b) = loop {
        let b = match wall {
            None => dir * step,
            Some(w) => 0.5 * (a + w),
        };
        match eval(b) {
            None => {
                if (b - a).abs() < 1e-3 {
                    return None;
                }
                wall = Some(b);
            }
            Some(sol) => {
                let fb = mean_of(&sol) - alpha;
                if !fb.is_finite() {
                    return None;
                }
                if fb.signum() != fa.signum() || fb == 0.0 {
                    break (b, fb, sol);
                }
                a = b;
                fa = fb;
                match wall {
                    None => {
                        step *= 2.0;
                        if step > s_max {
                            return None;
                        }
                    }
                    Some(w) if (w - a).abs() < 1e-3 => return None,
                    Some(_) => {}
                }
            }
        }
    };
    // Illinois regula falsi
    let mut best = (sol_b, b, fb);
    let mut side = 0;
    for _ in 0..60 {
        if best.2.abs() < 1e-11 {
            break;
        }
        let c = (a * fb - b * fa) / (fb - fa);
        let sol = eval(c)?;
        let fc = mean_of(&sol) - alpha;
        if fc.abs() < best.2.abs() {
            best = (sol, c, fc);
        }
        if fc.signum() == fb.signum() {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = b;
            fa = fb;
            b = c;
            fb = fc;
            side = 1;
        }
        if (a - b).abs() < 1e-14 * (1.0 + a.abs()) {
            break;
        }
    }
    (best.2.abs() < 1e-8).then_some((best.0, best.1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPoint {
    pub alpha: f64,
    /// NaN where no witness exists.
    #[serde(with = "ext_f64")]
    pub value: f64,
    pub witness: Option<FamilyMember>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumCurve {
    pub observable: String,
    pub c_phi: f64,
    pub d_phi: f64,
    pub points: Vec<SpectrumPoint>,
    /// Grid indices without a witness.
    pub missing: Vec<usize>,
}

impl SpectrumCurve {
    pub fn alphas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.alpha).collect()
    }
    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.value).collect()
    }
    pub fn value_at(&self, alpha: f64) -> Option<f64> {
        self.points.iter().find(|p| p.alpha == alpha).map(|p| p.value)
    }
}

/// n equispaced points from lo to hi.
pub fn alpha_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    (0..n).map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect()
}

/// B(α) = max h/λ over family witnesses with mean α.
pub fn birkhoff_spectrum(family: &Family, observable: &str, alpha_grid: &[f64]) -> Result<SpectrumCurve> {
    variational_curve(family, observable, alpha_grid, Objective::DimensionRatio)
}

pub(crate) fn variational_curve(family: &Family, observable: &str, alpha_grid: &[f64], objective: Objective) -> Result<SpectrumCurve> {
    Ok(variational_curves(family, observable, alpha_grid, &[objective])?.remove(0))
}

/// One curve per objective, sharing the targeted members at each α.
pub fn variational_curves(family: &Family, observable: &str, alpha_grid: &[f64], objectives: &[Objective]) -> Result<Vec<SpectrumCurve>> {
    let j = family
        .observable_index(observable)
        .ok_or_else(|| Error::Config(format!("observable {observable} not in family")))?;
    let (c_phi, d_phi) = family.mean_range(j);
    let per_alpha: Vec<Vec<SpectrumPoint>> = alpha_grid
        .par_iter()
        .map(|&alpha| {
            let cands = family.candidates(j, alpha);
            objectives
                .iter()
                .map(|&objective| {
                    let w = pick(cands.clone(), objective);
                    let value = match (&w, objective) {
                        (Some(m), Objective::DimensionRatio) => m.stats.ratio().clamp(0.0, 1.0),
                        (Some(m), Objective::FreeEnergy) => m.stats.free_energy,
                        (None, _) => f64::NAN,
                    };
                    SpectrumPoint { alpha, value, witness: w }
                })
                .collect()
        })
        .collect();
    Ok((0..objectives.len())
        .map(|k| {
            let points: Vec<SpectrumPoint> = per_alpha.iter().map(|v| v[k].clone()).collect();
            let missing = points.iter().enumerate().filter(|(_, p)| p.witness.is_none()).map(|(i, _)| i).collect();
            SpectrumCurve { observable: observable.to_string(), c_phi, d_phi, points, missing }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumCheck {
    pub monotone_violations: Vec<usize>,
    pub jump_violations: Vec<usize>,
    pub max_jump: f64,
    pub monotone_ok: bool,
    pub jump_ok: bool,
}

/// Non-decreasing up to the mean, non-increasing after it (each up to
/// `tolerance`), and adjacent jumps at most `max_jump`. Index i refers to
/// the step from point i to i + 1.
pub fn spectrum_property_check(curve: &SpectrumCurve, mean: f64, tolerance: f64, max_jump: f64) -> SpectrumCheck {
    let pts: Vec<(usize, f64, f64)> = curve
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.value.is_finite())
        .map(|(i, p)| (i, p.alpha, p.value))
        .collect();
    let mut mono = Vec::new();
    let mut jumps = Vec::new();
    let mut worst: f64 = 0.0;
    for w in pts.windows(2) {
        let ((i, a0, b0), (_, a1, b1)) = (w[0], w[1]);
        let d = b1 - b0;
        if a1 <= mean && d < -tolerance {
            mono.push(i);
        }
        if a0 >= mean && d > tolerance {
            mono.push(i);
        }
        worst = worst.max(d.abs());
        if d.abs() > max_jump {
            jumps.push(i);
        }
    }
    SpectrumCheck {
        monotone_ok: mono.is_empty(),
        jump_ok: jumps.is_empty(),
        monotone_violations: mono,
        jump_violations: jumps,
        max_jump: worst,
    }
}

/// Estimates ν(D_ρ(x)) and draws ν-typical points.
pub trait MeasureSampler: Sync {
    fn ball_mass(&self, x: f64, rho: f64) -> f64;
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64;
}

/// The Bernoulli measure with the given symbol probabilities, carried by a
/// full-branch system.
pub struct BernoulliMeasure<'s, S: FullBranchSystem> {
    pub system: &'s S,
    pub probs: Vec<f64>,
    pub max_depth: usize,
}

impl<S: FullBranchSystem> BernoulliMeasure<'_, S> {
    fn image(&self, word: &[usize], y: f64) -> f64 {
        word.iter().rev().fold(y, |z, &a| self.system.inverse(a, z))
    }

    fn mass_rec(&self, word: &mut Vec<usize>, mass: f64, lo: f64, hi: f64, d_lo: f64, d_hi: f64) -> f64 {
        if mass == 0.0 || hi <= d_lo || lo >= d_hi {
            return 0.0;
        }
        if lo >= d_lo && hi <= d_hi {
            return mass;
        }
        if word.len() >= self.max_depth {
            return mass * ((hi.min(d_hi) - lo.max(d_lo)) / (hi - lo)).max(0.0);
        }
        let (t_lo, t_hi) = self.system.target();
        let mut total = 0.0;
        for (b, &p) in self.probs.iter().enumerate() {
            word.push(b);
            let e1 = self.image(word, t_lo);
            let e2 = self.image(word, t_hi);
            total += self.mass_rec(word, mass * p, e1.min(e2), e1.max(e2), d_lo, d_hi);
            word.pop();
        }
        total
    }
}

impl<S: FullBranchSystem> MeasureSampler for BernoulliMeasure<'_, S> {
    fn ball_mass(&self, x: f64, rho: f64) -> f64 {
        let (t_lo, t_hi) = self.system.target();
        self.mass_rec(&mut Vec::new(), 1.0, t_lo, t_hi, x - rho, x + rho)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let word: Vec<usize> = (0..self.max_depth)
            .map(|_| {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (i, p) in self.probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return i;
                    }
                }
                self.probs.len() - 1
            })
            .collect();
        let (t_lo, t_hi) = self.system.target();
        self.image(&word, 0.5 * (t_lo + t_hi))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalDimension {
    pub slope: f64,
    pub r2: f64,
    /// (log ρ, log ν(D_ρ)).
    pub points: Vec<(f64, f64)>,
}

fn fit_dimension(points: Vec<(f64, f64)>) -> Result<LocalDimension> {
    if points.iter().any(|p| !p.1.is_finite()) {
        return Err(Error::FitRejected { r2: f64::NAN });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let f = linear_fit(&xs, &ys);
    if f.r2 < 0.9 {
        return Err(Error::FitRejected { r2: f.r2 });
    }
    Ok(LocalDimension { slope: f.slope, r2: f.r2, points })
}

/// Slope of log ν(D_ρ(x)) against log ρ.
pub fn local_dimension<M: MeasureSampler + ?Sized>(sampler: &M, x: f64, radii: &[f64]) -> Result<LocalDimension> {
    let pts = radii.iter().map(|&r| (r.ln(), sampler.ball_mass(x, r).ln())).collect();
    fit_dimension(pts)
}

/// Slope of the average of log ν(D_ρ(x)) over ν-typical x.
pub fn typical_local_dimension<M: MeasureSampler + ?Sized>(sampler: &M, radii: &[f64], points: usize, seed: u64) -> Result<LocalDimension> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..points).map(|_| sampler.sample(&mut rng)).collect();
    let pts = radii
        .iter()
        .map(|&r| {
            let avg = xs.iter().map(|&x| sampler.ball_mass(x, r).ln()).sum::<f64>() / xs.len() as f64;
            (r.ln(), avg)
        })
        .collect();
    fit_dimension(pts)
}

/// Log-spaced radii from `hi` down to `lo`.
pub fn log_radii(hi: f64, lo: f64, n: usize) -> Vec<f64> {
    let (a, b) = (hi.ln(), lo.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1).max(1) as f64).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layout() {
        let s = LinearFullBranch::new(&[2.0, 4.0]).unwrap();
        assert_eq!(s.starts, vec![0.0, 0.75]);
        assert!(LinearFullBranch::new(&[2.0, 1.5]).is_err());
    }

    #[test]
    fn cylinder_lengths_exact_on_linear_maps() {
        let s = LinearFullBranch::new(&[2.0, 4.0]).unwrap();
        let c = cylinders(&s, 3).unwrap();
        assert_eq!(c.len(), 16);
        for cy in &c {
            assert!(((cy.hi - cy.lo).ln() - cy.log_len).abs() < 1e-12);
        }
    }

    #[test]
    fn spreading_arithmetic() {
        let st = MeasureStats::new(8f64.ln(), 1.0, BTreeMap::new(), "t");
        let sp = spread_to_f_invariant(&st, Spread::Fixed(3)).unwrap();
        assert!((sp.h - 2f64.ln()).abs() < 1e-15);
        assert!(spread_to_f_invariant(&st, Spread::Variable(0.0)).is_err());
    }

    #[test]
    fn grid_endpoints() {
        let g = alpha_grid(-1.0, 0.5, 41);
        assert_eq!(g.len(), 41);
        assert_eq!(g[0], -1.0);
        assert_eq!(g[40], 0.5);
    }
}
