//! Bound-period machinery: the δ_p scale, the critical partition {I_{p,j}}
//! with slowly recurrent anchor points, and numerical checks of the
//! expansion estimates that go with them.

use crate::error::{Error, Result};
use crate::map::QuadraticMap;
use crate::precision::Big;
use crate::stats::log_sum_exp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// Every anchor as close to the middle of its cell as the search allows.
    Centered,
    /// Outermost anchor near the top of its cell and the third one near the
    /// bottom of its cell, which makes Λ⁺ = [x₃, x₁] as long as possible.
    MaximizeBase,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BindingConfig {
    pub epsilon: f64,
    pub big_n: usize,
    pub p_max: usize,
    pub anchor_horizon: usize,
    /// The constant 1/10 in front of e^{−εp} in δ_p².
    pub theta: f64,
    /// Annulus p is cut into ⌊e^{cut·ε·p}⌋ cells.
    pub cut_exponent: f64,
    pub precision_bits: usize,
    pub anchor_policy: AnchorPolicy,
    /// Orbit evaluations allowed per cell during the anchor search.
    pub anchor_budget: usize,
}

impl Default for BindingConfig {
    fn default() -> Self {
        BindingConfig {
            epsilon: 0.01,
            big_n: 5,
            p_max: 30,
            anchor_horizon: 1000,
            theta: 0.1,
            cut_exponent: 3.0,
            precision_bits: 128,
            anchor_policy: AnchorPolicy::MaximizeBase,
            anchor_budget: 10_000,
        }
    }
}

impl BindingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon = {} must lie in (0, 1)", self.epsilon)));
        }
        if self.big_n < 1 || self.p_max <= self.big_n + 3 {
            return Err(Error::Config(format!(
                "need N >= 1 and p_max > N + 3 (got N = {}, p_max = {})",
                self.big_n, self.p_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub a: f64,
    pub epsilon: f64,
    /// deltas[p − 1] = δ_p for p = 1, …, p_max.
    pub deltas: Vec<f64>,
    /// Smallest p used for binding (the configured N).
    pub big_n: usize,
}

impl DeltaTable {
    pub fn p_max(&self) -> usize {
        self.deltas.len()
    }

    /// δ_p for p ≥ 1; δ_0 = +∞ (empty sum).
    pub fn delta(&self, p: usize) -> f64 {
        if p == 0 {
            f64::INFINITY
        } else {
            self.deltas[p - 1]
        }
    }

    /// (p, δ_p) pairs for p ≥ N.
    pub fn rows(&self) -> Vec<(usize, f64)> {
        (self.big_n..=self.p_max()).map(|p| (p, self.delta(p))).collect()
    }
}

/// δ_p = sqrt(θ e^{−εp} / Σ_{i<p} |Df^i(f0)| / |f^{i+1}0|), from a
/// high-precision critical orbit, summed in log space.
pub fn compute_delta_table(map: &QuadraticMap, config: &BindingConfig) -> Result<DeltaTable> {
    let orbit = map.iterate_big(&Big::one(config.precision_bits), config.p_max);
    let mut log_terms = Vec::with_capacity(config.p_max);
    let mut log_df = 0.0; // log|Df^i(f0)|
    let mut deltas = Vec::with_capacity(config.p_max);
    for p in 1..=config.p_max {
        let x = &orbit[p - 1]; // f^{p}(0)
        let lx = x.ln_abs();
        if x.abs().cmp_f64(crate::certify::SUPERSTABLE_TOL).is_lt() {
            return Err(Error::Superstable { n: p });
        }
        log_terms.push(log_df - lx);
        let lse = log_sum_exp(log_terms.iter().cloned());
        let log_d2 = config.theta.ln() - config.epsilon * p as f64 - lse;
        deltas.push((0.5 * log_d2).exp());
        log_df += map.log_df_big(x);
    }
    Ok(DeltaTable { a: map.a, epsilon: config.epsilon, deltas, big_n: config.big_n })
}

/// The unique p ∈ (N, p_max] with δ_p ≤ |x| < δ_{p−1}; None outside.
pub fn bound_period(x: f64, table: &DeltaTable) -> Option<usize> {
    let ax = x.abs();
    if ax >= table.delta(table.big_n) || ax < table.delta(table.p_max()) {
        return None;
    }
    // deltas are decreasing: find the first p with δ_p ≤ |x|
    let idx = table.deltas.partition_point(|&d| d > ax);
    Some(idx + 1)
}

/// One raw cell Î_{p,j} of an annulus [δ_p, δ_{p−1}) with its anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub p: usize,
    /// 1-based, counted right to left inside the annulus.
    pub j: usize,
    pub lo: f64,
    pub hi: f64,
    pub anchor: f64,
}

/// A partition element I_{p,j}. It contains exactly one cell, whose labels
/// it carries, and lies inside that cell and its two neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub p: usize,
    /// Signed: negative on the left of 0.
    pub j: i64,
    pub lo: f64,
    pub hi: f64,
    pub anchor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalPartition {
    pub table: DeltaTable,
    /// Cells of all annuli p = N+1, …, p_max, ordered right to left.
    pub cells: Vec<Cell>,
    /// Elements on (0, δ], ordered right to left (outermost first).
    pub elements: Vec<Element>,
    /// δ = x₁, the outermost anchor.
    pub delta: f64,
    pub lambda_plus: (f64, f64),
    pub lambda_minus: (f64, f64),
    /// Points with |x| below this belong to no element.
    pub core: f64,
}

impl CriticalPartition {
    /// Elements on both sides, ordered left to right.
    pub fn all_elements(&self) -> Vec<Element> {
        let mut out: Vec<Element> =
            self.elements.iter().map(|e| Element { j: -e.j, lo: -e.hi, hi: -e.lo, ..*e }).collect();
        out.extend(self.elements.iter().rev().cloned());
        out
    }

    pub fn base_length(&self) -> f64 {
        self.lambda_plus.1 - self.lambda_plus.0
    }
}

/// Slow-recurrence test |f^n x| ≥ δ_N e^{−εn} for ⌈1/ε⌉ ≤ n ≤ horizon,
/// with early exit. Returns the number of steps evaluated and the verdict.
fn recurrence_test(map: &QuadraticMap, x: f64, delta_n: f64, eps: f64, horizon: usize, bits: usize) -> (usize, bool) {
    let start = (1.0 / eps).ceil() as usize;
    let a = map.a_big(bits);
    let mut y = Big::from_f64(x, bits);
    let log_dn = delta_n.ln();
    for n in 1..=horizon {
        y = QuadraticMap::f_big(&a, &y);
        if n >= start && y.ln_abs() < log_dn - eps * n as f64 {
            return (n, false);
        }
    }
    (horizon, true)
}

/// Working precision for an anchor test: the orbit can lose two bits per step.
pub fn anchor_precision(config: &BindingConfig) -> usize {
    config.precision_bits.max(2 * config.anchor_horizon + 64)
}

fn find_anchor(map: &QuadraticMap, cell: &Cell, target: f64, delta_n: f64, config: &BindingConfig) -> Result<f64> {
    let bits = anchor_precision(config);
    let width = cell.hi - cell.lo;
    let mut spent = 0usize;
    let mut m = (10.0 / config.epsilon).ceil() as usize;
    // grid, then successively finer grids while budget remains
    while spent < config.anchor_budget {
        let mut cands: Vec<f64> = (0..m)
            .map(|i| cell.lo + width * (i as f64 + 0.5) / m as f64)
            .filter(|&x| x > cell.lo && x < cell.hi)
            .collect();
        let aim = cell.lo + target * width;
        cands.sort_by(|x, y| (x - aim).abs().total_cmp(&(y - aim).abs()));
        for x in cands {
            if spent >= config.anchor_budget {
                break;
            }
            let (steps, ok) = recurrence_test(map, x, delta_n, config.epsilon, config.anchor_horizon, bits);
            spent += steps.max(1) / config.anchor_horizon.max(1) + 1;
            if ok {
                let (_, again) = recurrence_test(map, x, delta_n, config.epsilon, config.anchor_horizon, 2 * bits);
                if again {
                    return Ok(x);
                }
            }
        }
        m = m * 2 + 1;
    }
    Err(Error::AnchorSearch { p: cell.p, j: cell.j })
}

/// Cuts the annuli, searches anchors in parallel, and assembles elements
/// E_k = [x_{2k+1}, x_{2k−1}] (cells indexed right to left from 1), so E_k
/// contains cell 2k and lies inside cells 2k−1 … 2k+1.
pub fn build_critical_partition(map: &QuadraticMap, config: &BindingConfig) -> Result<CriticalPartition> {
    config.validate()?;
    let table = compute_delta_table(map, config)?;
    let mut cells = Vec::new();
    for p in (config.big_n + 1)..=config.p_max {
        let (lo, hi) = (table.delta(p), table.delta(p - 1).min(1.0));
        let count = ((config.cut_exponent * config.epsilon * p as f64).exp().floor() as usize).max(1);
        for j in 1..=count {
            let c_hi = hi - (hi - lo) * (j - 1) as f64 / count as f64;
            let c_lo = if j == count { lo } else { hi - (hi - lo) * j as f64 / count as f64 };
            cells.push(Cell { p, j, lo: c_lo, hi: c_hi, anchor: f64::NAN });
        }
    }
    if cells.len() < 3 {
        return Err(Error::Config("fewer than three cells; increase p_max".into()));
    }
    let delta_n = table.delta(config.big_n);
    let targets: Vec<f64> = (0..cells.len())
        .map(|i| match (config.anchor_policy, i) {
            (AnchorPolicy::MaximizeBase, 0) => 0.99,
            (AnchorPolicy::MaximizeBase, 2) => 0.01,
            _ => 0.5,
        })
        .collect();
    let anchors: Vec<Result<f64>> = cells
        .par_iter()
        .zip(targets.par_iter())
        .map(|(c, &t)| find_anchor(map, c, t, delta_n, config))
        .collect();
    for (c, a) in cells.iter_mut().zip(anchors) {
        c.anchor = a?;
    }
    let mut elements = Vec::new();
    let mut k = 1;
    while 2 * k < cells.len() {
        let inner = &cells[2 * k]; // cell 2k+1 (1-based)
        let outer = &cells[2 * k - 2]; // cell 2k−1
        let own = &cells[2 * k - 1];
        elements.push(Element { p: own.p, j: own.j as i64, lo: inner.anchor, hi: outer.anchor, anchor: own.anchor });
        k += 1;
    }
    let lambda_plus = (elements[0].lo, elements[0].hi);
    let core = elements.last().unwrap().lo;
    Ok(CriticalPartition {
        delta: cells[0].anchor,
        lambda_minus: (-lambda_plus.1, -lambda_plus.0),
        lambda_plus,
        core,
        table,
        cells,
        elements,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaPRow {
    pub p: usize,
    pub samples: usize,
    /// min over samples of (1/p) log|Df^p(x)| − λ/3.
    pub expansion_margin: f64,
    /// min over samples of p − log|x|^{−2/log 5}.
    pub lower_margin: f64,
    /// min over samples of log|x|^{−2/λ} − p.
    pub upper_margin: f64,
    pub expansion_violations: usize,
    pub lower_violations: usize,
    pub upper_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaPReport {
    pub lambda: f64,
    pub rows: Vec<LemmaPRow>,
}

impl LemmaPReport {
    pub fn violations(&self) -> (usize, usize, usize) {
        self.rows.iter().fold((0, 0, 0), |acc, r| {
            (acc.0 + r.expansion_violations, acc.1 + r.lower_violations, acc.2 + r.upper_violations)
        })
    }
}

/// Samples each annulus [δ_p, δ_{p−1}) for p in `ps` and evaluates the
/// bound-period expansion and the two-sided bound on p.
pub fn verify_lemma_p(
    map: &QuadraticMap,
    table: &DeltaTable,
    ps: std::ops::RangeInclusive<usize>,
    sample_count: usize,
    lambda: f64,
    seed: u64,
) -> LemmaPReport {
    let ln5 = 5f64.ln();
    let rows = ps
        .filter(|&p| p >= 2 && p <= table.p_max())
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&p| {
            let (lo, hi) = (table.delta(p), table.delta(p - 1));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let bits = 2 * p + 64;
            let a = map.a_big(bits);
            let mut row = LemmaPRow {
                p,
                samples: sample_count,
                expansion_margin: f64::INFINITY,
                lower_margin: f64::INFINITY,
                upper_margin: f64::INFINITY,
                expansion_violations: 0,
                lower_violations: 0,
                upper_violations: 0,
            };
            for _ in 0..sample_count {
                let x: f64 = rng.gen_range(lo..hi);
                let mut y = Big::from_f64(x, bits);
                let mut log_d = 0.0;
                for _ in 0..p {
                    log_d += map.log_df_big(&y);
                    y = QuadraticMap::f_big(&a, &y);
                }
                let em = log_d / p as f64 - lambda / 3.0;
                let l = -x.ln();
                let lm = p as f64 - 2.0 * l / ln5;
                let um = 2.0 * l / lambda - p as f64;
                row.expansion_margin = row.expansion_margin.min(em);
                row.lower_margin = row.lower_margin.min(lm);
                row.upper_margin = row.upper_margin.min(um);
                row.expansion_violations += (em < 0.0) as usize;
                row.lower_violations += (lm < 0.0) as usize;
                row.upper_violations += (um < 0.0) as usize;
            }
            row
        })
        .collect();
    LemmaPReport { lambda, rows }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub delta_hat: f64,
    pub pairs: usize,
    /// min over pairs of (1/n) log|Df^n(x)| − λ/3 − (1/n) log δ̂.
    pub min_margin: f64,
    pub violations: usize,
    /// Same margin without the δ̂ term, over orbits that end in (−δ̂, δ̂).
    pub min_return_margin: f64,
    pub return_pairs: usize,
    pub return_violations: usize,
}

/// Margins for one orbit segment x, …, f^{n−1}x that stays outside (−δ̂, δ̂).
pub fn outside_expansion_margin(map: &QuadraticMap, x: f64, n: usize, delta_hat: f64, lambda: f64) -> f64 {
    let mut y = x;
    let mut log_d = 0.0;
    for _ in 0..n {
        log_d += map.df(y).abs().ln();
        y = map.f(y);
    }
    (log_d - delta_hat.ln()) / n as f64 - lambda / 3.0
}

/// Rejection sweep: random starts, every prefix length n whose orbit has
/// stayed outside (−δ̂, δ̂) contributes one pair (x, n).
pub fn verify_outside_expansion(
    map: &QuadraticMap,
    delta_hat: f64,
    lambda: f64,
    samples: usize,
    max_n: usize,
    seed: u64,
) -> ExpansionReport {
    let mut rep = ExpansionReport {
        delta_hat,
        pairs: 0,
        min_margin: f64::INFINITY,
        violations: 0,
        min_return_margin: f64::INFINITY,
        return_pairs: 0,
        return_violations: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ldh = delta_hat.ln();
    for _ in 0..samples {
        let x: f64 = rng.gen_range(-1.0..1.0);
        let mut y = x;
        let mut log_d = 0.0;
        for n in 1..=max_n {
            if y.abs() < delta_hat {
                break;
            }
            log_d += map.df(y).abs().ln();
            y = map.f(y);
            let m = (log_d - ldh) / n as f64 - lambda / 3.0;
            rep.pairs += 1;
            rep.min_margin = rep.min_margin.min(m);
            rep.violations += (m < 0.0) as usize;
            if y.abs() < delta_hat {
                let r = log_d / n as f64 - lambda / 3.0;
                rep.return_pairs += 1;
                rep.min_return_margin = rep.min_return_margin.min(r);
                rep.return_violations += (r < 0.0) as usize;
            }
        }
    }
    rep
}
