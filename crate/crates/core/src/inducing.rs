//! The induced full-branch map over Λ = Λ⁻ ∪ Λ⁺, built by iterating,
//! subdividing and stopping, plus the tower, tail fits and the
//! quick-return and distortion diagnostics.
//!
//! Pieces are followed by their images. At a free time an image J is cut
//! by [`decide`]: if J ⊇ 3Λ^s the preimage of Λ^s returns; remaining parts
//! that meet (−δ, δ) and contain more than two partition elements are cut
//! at element boundaries and become bound for the element's p; parts that
//! meet (−δ, δ) but are not cut become bound for the smallest p they touch.
//!
//! Pieces heavier than a threshold are tracked explicitly with
//! high-precision domain endpoints, which makes emitted branches exact.
//! Lighter pieces are merged into aggregated states (image interval,
//! release time, mass) whose mass is split in proportion to image length.
//! They contribute to coverage and the tail but emit no branch records.

use crate::binding::CriticalPartition;
use crate::error::{Error, Result};
use crate::map::{Observable, QuadraticMap};
use crate::precision::Big;
use crate::stats::{linear_fit, LinearFit};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducingConfig {
    pub t_max: usize,
    /// 0 selects 2·t_max + 64 bits.
    pub precision_bits: usize,
    /// Pieces lighter than this fraction of |Λ⁺| are aggregated.
    pub min_explicit_mass: f64,
    pub max_explicit_pieces: usize,
    /// Times at which live pieces are recorded for the quick-return check.
    pub snapshot_times: Vec<usize>,
}

impl Default for InducingConfig {
    fn default() -> Self {
        InducingConfig {
            t_max: 60,
            precision_bits: 0,
            min_explicit_mass: 1e-5,
            max_explicit_pieces: 200_000,
            snapshot_times: Vec::new(),
        }
    }
}

impl InducingConfig {
    pub fn bits(&self) -> usize {
        if self.precision_bits == 0 {
            2 * self.t_max + 64
        } else {
            self.precision_bits
        }
    }
}

/// Fixed geometry used by the subdivision rules (all boundaries are `f64`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Element boundaries ascending: −x₁ < −x₃ < … < −c < c < … < x₁.
    pub bounds: Vec<f64>,
    /// Bound period of each cell between consecutive bounds; 0 for the core.
    pub labels: Vec<u32>,
    pub core_cell: usize,
    pub delta: f64,
    pub lambda_plus: (f64, f64),
    pub base_len: f64,
    /// Bound period assigned to Λ⁺ at time 0.
    pub initial_bound: u32,
}

impl Geometry {
    pub fn from_partition(part: &CriticalPartition) -> Geometry {
        let els = part.all_elements();
        let k = part.elements.len();
        let mut bounds: Vec<f64> = els[..k].iter().map(|e| e.lo).collect();
        bounds.push(-part.core);
        bounds.extend(els[k..].iter().map(|e| e.lo));
        bounds.push(els.last().unwrap().hi);
        let mut labels: Vec<u32> = els[..k].iter().map(|e| e.p as u32).collect();
        labels.push(0);
        labels.extend(els[k..].iter().map(|e| e.p as u32));
        Geometry {
            bounds,
            labels,
            core_cell: k,
            delta: part.delta,
            lambda_plus: part.lambda_plus,
            base_len: part.base_length(),
            initial_bound: part.elements[0].p as u32,
        }
    }

    pub fn lambda(&self, sign: i8) -> (f64, f64) {
        if sign > 0 {
            self.lambda_plus
        } else {
            (-self.lambda_plus.1, -self.lambda_plus.0)
        }
    }

    /// 3Λ^s: the interval with the same centre and three times the length.
    pub fn triple(&self, sign: i8) -> (f64, f64) {
        let (lo, hi) = self.lambda(sign);
        (lo - self.base_len, hi + self.base_len)
    }
}

/// A coordinate that can be compared with `f64` boundaries.
pub trait Coord {
    fn cmp_f(&self, b: f64) -> Ordering;
    fn approx(&self) -> f64;
}

impl Coord for f64 {
    fn cmp_f(&self, b: f64) -> Ordering {
        self.total_cmp(&b)
    }
    fn approx(&self) -> f64 {
        *self
    }
}

impl Coord for Big {
    fn cmp_f(&self, b: f64) -> Ordering {
        self.cmp_f64(b)
    }
    fn approx(&self) -> f64 {
        self.to_f64()
    }
}

/// Endpoint of a sub-image: one of the parent's endpoints or a boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum End {
    Lo,
    Hi,
    At(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Return(i8),
    Free,
    Bound { p: u32 },
    Lost,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sub {
    pub lo: End,
    pub hi: End,
    pub kind: Kind,
}

struct Ends<'c, C: Coord> {
    lo: &'c C,
    hi: &'c C,
}

impl<C: Coord> Ends<'_, C> {
    fn cmp(&self, e: End, b: f64) -> Ordering {
        match e {
            End::Lo => self.lo.cmp_f(b),
            End::Hi => self.hi.cmp_f(b),
            End::At(x) => x.total_cmp(&b),
        }
    }
    fn val(&self, e: End) -> f64 {
        match e {
            End::Lo => self.lo.approx(),
            End::Hi => self.hi.approx(),
            End::At(x) => x,
        }
    }
    fn le(&self, e: End, b: f64) -> bool {
        self.cmp(e, b) != Ordering::Greater
    }
    fn ge(&self, e: End, b: f64) -> bool {
        self.cmp(e, b) != Ordering::Less
    }
    fn lt(&self, e: End, b: f64) -> bool {
        self.cmp(e, b) == Ordering::Less
    }
    fn gt(&self, e: End, b: f64) -> bool {
        self.cmp(e, b) == Ordering::Greater
    }
}

/// Subdivision and stopping rules at a free time for the image [lo, hi].
pub fn decide<C: Coord>(g: &Geometry, lo: &C, hi: &C) -> Vec<Sub> {
    let e = Ends { lo, hi };
    let mut out = Vec::new();
    let mut cuts: Vec<(f64, f64)> = Vec::new();
    for s in [-1i8, 1] {
        let (t_lo, t_hi) = g.triple(s);
        if e.le(End::Lo, t_lo) && e.ge(End::Hi, t_hi) {
            let (l_lo, l_hi) = g.lambda(s);
            out.push(Sub { lo: End::At(l_lo), hi: End::At(l_hi), kind: Kind::Return(s) });
            cuts.push((l_lo, l_hi));
        }
    }
    // the parts of J left after removing the returned intervals
    let mut parts = Vec::new();
    let mut cur = End::Lo;
    for &(a, b) in &cuts {
        if e.lt(cur, a) {
            parts.push((cur, End::At(a)));
        }
        cur = End::At(b);
    }
    if e.lt(cur, e.val(End::Hi)) || matches!(cur, End::Lo) {
        parts.push((cur, End::Hi));
    }
    for (kl, kh) in parts {
        subdivide(g, &e, kl, kh, &mut out);
    }
    out
}

fn subdivide<C: Coord>(g: &Geometry, e: &Ends<C>, kl: End, kh: End, out: &mut Vec<Sub>) {
    let b = &g.bounds;
    let ncell = g.labels.len();
    if e.ge(kl, g.delta) || e.le(kh, -g.delta) {
        out.push(Sub { lo: kl, hi: kh, kind: Kind::Free });
        return;
    }
    // cells touched: c with b[c+1] > kl and b[c] < kh
    let first = (0..ncell).find(|&c| e.lt(kl, b[c + 1])).unwrap_or(ncell - 1);
    let last = (0..ncell).rev().find(|&c| e.gt(kh, b[c])).unwrap_or(0);
    let full = |c: usize| e.le(kl, b[c]) && e.ge(kh, b[c + 1]);
    let n_full = (first..=last).filter(|&c| c != g.core_cell && full(c)).count();
    if n_full > 2 {
        // index range of cells that receive a piece, after gluing partial ends inward
        let lo_c = if full(first) { first } else { first + 1 };
        let hi_c = if full(last) { last } else { last - 1 };
        let mut left_end = End::At(b[lo_c]);
        let mut right_end = End::At(b[hi_c + 1]);
        if !full(first) {
            left_end = kl;
        }
        if !full(last) {
            right_end = kh;
        }
        if e.lt(kl, b[0]) {
            if b[0] - e.val(kl) >= g.base_len {
                out.push(Sub { lo: kl, hi: End::At(b[0]), kind: Kind::Free });
            } else {
                left_end = kl;
            }
        }
        if e.gt(kh, b[ncell]) {
            if e.val(kh) - b[ncell] >= g.base_len {
                out.push(Sub { lo: End::At(b[ncell]), hi: kh, kind: Kind::Free });
            } else {
                right_end = kh;
            }
        }
        for c in lo_c..=hi_c {
            let lo = if c == lo_c { left_end } else { End::At(b[c]) };
            let hi = if c == hi_c { right_end } else { End::At(b[c + 1]) };
            let kind = if c == g.core_cell { Kind::Lost } else { Kind::Bound { p: g.labels[c] } };
            out.push(Sub { lo, hi, kind });
        }
        return;
    }
    if e.lt(kl, 0.0) && e.gt(kh, 0.0) {
        out.push(Sub { lo: kl, hi: kh, kind: Kind::Lost });
        return;
    }
    let p = (first..=last).filter(|&c| c != g.core_cell).map(|c| g.labels[c]).min();
    let kind = match p {
        Some(p) => Kind::Bound { p },
        None => Kind::Lost,
    };
    out.push(Sub { lo: kl, hi: kh, kind });
}

/// One branch ω ⊂ Λ⁺ of the induced map (Λ⁻ branches are mirror images).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InducedBranch {
    pub domain: (f64, f64),
    /// Domain endpoints as exact decimals at the construction precision.
    pub domain_exact: (String, String),
    pub return_time: usize,
    pub target_sign: i8,
    pub monotone: bool,
    /// f^R increasing on ω.
    pub increasing: bool,
    /// |ω| from the high-precision endpoints.
    pub length: f64,
    /// Bit k of word k/64 set if f^k(ω) ⊂ (0, ∞).
    pub signs: Vec<u64>,
    /// Image of the monotone extension of f^R around ω (contains 3Λ^s).
    pub extension: (f64, f64),
    /// max/min of |Df^R| over a few points of ω.
    pub distortion_sample: f64,
    pub bindings: Vec<(u32, u32)>,
    /// Index of the ancestor piece at each snapshot time.
    pub ancestors: Vec<u32>,
    #[serde(skip)]
    pub exact: Option<(Big, Big)>,
}

impl InducedBranch {
    pub fn sign_at(&self, k: usize) -> bool {
        self.signs[k / 64] >> (k % 64) & 1 == 1
    }

    /// The mirror branch −ω ⊂ Λ⁻.
    pub fn mirrored(&self) -> InducedBranch {
        let mut b = self.clone();
        b.domain = (-self.domain.1, -self.domain.0);
        b.domain_exact = (neg_dec(&self.domain_exact.1), neg_dec(&self.domain_exact.0));
        b.signs[0] ^= 1;
        b.increasing = !self.increasing;
        b.exact = self.exact.as_ref().map(|(lo, hi)| (hi.neg(), lo.neg()));
        b
    }

    /// Koebe margin ξ: the extension contains the ξ-scaled neighbourhood of Λ^s.
    pub fn koebe_margin(&self, g: &Geometry) -> f64 {
        let (lo, hi) = g.lambda(self.target_sign);
        ((lo - self.extension.0).min(self.extension.1 - hi)) / g.base_len
    }
}

fn neg_dec(s: &str) -> String {
    match s.strip_prefix('-') {
        Some(r) => r.to_string(),
        None => format!("-{s}"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregatedReturn {
    pub return_time: usize,
    pub target_sign: i8,
    pub mass: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotPiece {
    pub domain: (f64, f64),
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub time: usize,
    pub pieces: Vec<SnapshotPiece>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub zeta: f64,
    pub c1: f64,
    pub r2: f64,
    pub from: usize,
    pub to: usize,
}

/// Mass bookkeeping over Λ⁺ at the end of the construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassBalance {
    pub explicit_returned: f64,
    pub aggregated_returned: f64,
    pub live: f64,
    pub lost_to_core: f64,
    pub base: f64,
}

impl MassBalance {
    pub fn relative_defect(&self) -> f64 {
        (self.explicit_returned + self.aggregated_returned + self.live + self.lost_to_core - self.base).abs() / self.base
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InducedSystem {
    pub map: QuadraticMap,
    pub geometry: Geometry,
    pub config: InducingConfig,
    /// Explicit branches in Λ⁺, sorted by domain.
    pub branches: Vec<InducedBranch>,
    pub aggregated_returns: Vec<AggregatedReturn>,
    /// |{R > n}| over Λ (both halves), n = 0, …, T_max.
    pub tail: Vec<f64>,
    pub tail_fit: Option<TailFit>,
    pub balance: MassBalance,
    pub fold_events: usize,
    pub snapshots: Vec<Snapshot>,
}

impl InducedSystem {
    pub fn base_length(&self) -> f64 {
        2.0 * self.geometry.base_len
    }

    /// Σ|ω| / |Λ| counting aggregated returns.
    pub fn coverage(&self) -> f64 {
        (self.balance.explicit_returned + self.balance.aggregated_returned) / self.balance.base
    }

    /// Σ|ω| / |Λ| over explicit branches only.
    pub fn explicit_coverage(&self) -> f64 {
        self.balance.explicit_returned / self.balance.base
    }

    /// Branches over all of Λ, Λ⁻ first.
    pub fn all_branches(&self) -> Vec<InducedBranch> {
        let mut out: Vec<InducedBranch> = self.branches.iter().rev().map(InducedBranch::mirrored).collect();
        out.extend(self.branches.iter().cloned());
        out
    }

    /// The Λ⁺ branch containing |x| and whether x is on the negative side.
    pub fn locate(&self, x: f64) -> Option<(&InducedBranch, bool)> {
        let ax = x.abs();
        let i = self.branches.partition_point(|b| b.domain.1 < ax);
        let b = self.branches.get(i)?;
        (b.domain.0 <= ax && ax <= b.domain.1).then_some((b, x < 0.0))
    }

    /// Explicit branches sharing a return time and target sign.
    pub fn markov_defect(&self, branch: &InducedBranch) -> f64 {
        let (lo, hi) = branch.exact.clone().unwrap_or_else(|| {
            let p = self.config.bits();
            (Big::from_f64(branch.domain.0, p), Big::from_f64(branch.domain.1, p))
        });
        let a = self.map.a_big(lo.precision());
        let mut u = lo;
        let mut v = hi;
        for _ in 0..branch.return_time {
            u = QuadraticMap::f_big(&a, &u);
            v = QuadraticMap::f_big(&a, &v);
        }
        let (t_lo, t_hi) = self.geometry.lambda(branch.target_sign);
        let (img_lo, img_hi) = if branch.increasing { (u, v) } else { (v, u) };
        let d_lo = img_lo.sub(&Big::from_f64(t_lo, img_lo.precision())).abs().to_f64() / t_lo.abs();
        let d_hi = img_hi.sub(&Big::from_f64(t_hi, img_hi.precision())).abs().to_f64() / t_hi.abs();
        d_lo.max(d_hi)
    }
}

#[derive(Clone)]
struct Piece {
    lo: Big,
    hi: Big,
    jlo: Big,
    jhi: Big,
    inc: bool,
    signs: Vec<u64>,
    release: usize,
    bindings: Vec<(u32, u32)>,
    mass: f64,
    ancestors: Vec<u32>,
}

fn push_sign(signs: &mut Vec<u64>, k: usize, positive: bool) {
    if k / 64 >= signs.len() {
        signs.push(0);
    }
    if positive {
        signs[k / 64] |= 1 << (k % 64);
    }
}

fn sign_bit(signs: &[u64], k: usize) -> bool {
    signs[k / 64] >> (k % 64) & 1 == 1
}

/// x with f^n(x) = y along a sign history, in the precision of y.
pub fn pullback_big(inv_a: &Big, signs: &[u64], n: usize, y: &Big) -> Big {
    let one = Big::one(y.precision());
    let mut x = y.clone();
    for k in (0..n).rev() {
        let r = one.sub(&x).mul(inv_a);
        let r = if r.signum() < 0 { Big::zero(y.precision()) } else { r.sqrt() };
        x = if sign_bit(signs, k) { r } else { r.neg() };
    }
    x
}

struct Builder<'g> {
    map: QuadraticMap,
    g: &'g Geometry,
    bits: usize,
    a: Big,
    inv_a: Big,
    threshold: f64,
}

enum Outcome {
    Keep(Piece),
    Agg { jlo: f64, jhi: f64, release: usize, mass: f64 },
    Branch(InducedBranch),
    Lost(f64),
    Fold,
}

impl Builder<'_> {
    fn domain_of(&self, piece: &Piece, n: usize, end: End) -> Big {
        match (end, piece.inc) {
            (End::Lo, true) | (End::Hi, false) => piece.lo.clone(),
            (End::Lo, false) | (End::Hi, true) => piece.hi.clone(),
            (End::At(y), _) => pullback_big(&self.inv_a, &piece.signs, n, &Big::from_f64(y, self.bits)),
        }
    }

    fn image_of(&self, piece: &Piece, end: End) -> Big {
        match end {
            End::Lo => piece.jlo.clone(),
            End::Hi => piece.jhi.clone(),
            End::At(y) => Big::from_f64(y, self.bits),
        }
    }

    fn log_df_along(&self, x: &Big, n: usize) -> f64 {
        let mut y = x.clone();
        let mut s = 0.0;
        for _ in 0..n {
            s += self.map.log_df_big(&y);
            y = QuadraticMap::f_big(&self.a, &y);
        }
        s
    }

    fn make_branch(&self, piece: &Piece, n: usize, lo: Big, hi: Big, sign: i8) -> InducedBranch {
        let length = hi.sub(&lo).to_f64();
        let probes: Vec<f64> = (0..5)
            .map(|i| {
                let t = Big::from_f64((i as f64 + 0.5) / 5.0, self.bits);
                self.log_df_along(&lo.add(&hi.sub(&lo).mul(&t)), n)
            })
            .collect();
        let mx = probes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mn = probes.iter().cloned().fold(f64::INFINITY, f64::min);
        InducedBranch {
            domain: (lo.to_f64(), hi.to_f64()),
            domain_exact: (lo.to_decimal(), hi.to_decimal()),
            return_time: n,
            target_sign: sign,
            monotone: true,
            increasing: piece.inc,
            length,
            signs: piece.signs.clone(),
            extension: (piece.jlo.to_f64(), piece.jhi.to_f64()),
            distortion_sample: (mx - mn).exp(),
            bindings: piece.bindings.clone(),
            ancestors: piece.ancestors.clone(),
            exact: Some((lo, hi)),
        }
    }

    /// Applies the rules to one explicit piece at free time n.
    fn split(&self, piece: Piece, n: usize) -> Result<Vec<Outcome>> {
        let subs = decide(self.g, &piece.jlo, &piece.jhi);
        if subs.len() == 1 && subs[0].kind == Kind::Free && subs[0].lo == End::Lo && subs[0].hi == End::Hi {
            return Ok(vec![Outcome::Keep(Piece { release: n, ..piece })]);
        }
        let mut out = Vec::with_capacity(subs.len());
        let mut cache: Vec<(u64, Big)> = Vec::new();
        for s in subs {
            let mut dom = |end: End| -> Big {
                if let End::At(y) = end {
                    if let Some((_, d)) = cache.iter().find(|(k, _)| *k == y.to_bits()) {
                        return d.clone();
                    }
                    let d = self.domain_of(&piece, n, end);
                    cache.push((y.to_bits(), d.clone()));
                    d
                } else {
                    self.domain_of(&piece, n, end)
                }
            };
            let (d1, d2) = (dom(s.lo), dom(s.hi));
            let (lo, hi) = if d1.cmp_big(&d2) == Ordering::Greater { (d2, d1) } else { (d1, d2) };
            if lo.cmp_big(&hi) != Ordering::Less {
                if s.lo != s.hi {
                    return Err(Error::Breakdown { time: n, reason: "sub-piece endpoints collide".into() });
                }
                continue;
            }
            let mass = hi.sub(&lo).to_f64();
            match s.kind {
                Kind::Return(sign) => out.push(Outcome::Branch(self.make_branch(&piece, n, lo, hi, sign))),
                Kind::Lost => out.push(Outcome::Lost(mass)),
                Kind::Free | Kind::Bound { .. } => {
                    let (release, mut bindings) = (n, piece.bindings.clone());
                    let release = match s.kind {
                        Kind::Bound { p } => {
                            bindings.push((n as u32, p));
                            release + p as usize
                        }
                        _ => release,
                    };
                    let (jlo, jhi) = (self.image_of(&piece, s.lo), self.image_of(&piece, s.hi));
                    if mass < self.threshold {
                        out.push(Outcome::Agg { jlo: jlo.to_f64(), jhi: jhi.to_f64(), release, mass });
                    } else {
                        out.push(Outcome::Keep(Piece {
                            lo,
                            hi,
                            jlo,
                            jhi,
                            inc: piece.inc,
                            signs: piece.signs.clone(),
                            release,
                            bindings,
                            mass,
                            ancestors: piece.ancestors.clone(),
                        }));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Records the sign at time n and maps the image forward; images that
    /// straddle 0 are cut there first.
    fn advance(&self, mut piece: Piece, n: usize) -> Vec<Outcome> {
        let zero_inside = piece.jlo.signum() < 0 && piece.jhi.signum() > 0;
        if zero_inside {
            let c = pullback_big(&self.inv_a, &piece.signs, n, &Big::zero(self.bits));
            let mut left = piece.clone();
            let mut right = piece;
            let z = Big::zero(self.bits);
            if left.inc {
                left.hi = c.clone();
                right.lo = c;
            } else {
                left.lo = c.clone();
                right.hi = c;
            }
            left.jhi = z.clone();
            right.jlo = z;
            left.mass = left.hi.sub(&left.lo).to_f64();
            right.mass = right.hi.sub(&right.lo).to_f64();
            let mut out = vec![Outcome::Fold];
            for p in [left, right] {
                out.extend(self.advance(p, n));
            }
            return out;
        }
        let positive = piece.jlo.signum() + piece.jhi.signum() > 0;
        push_sign(&mut piece.signs, n, positive);
        let (u, v) = (QuadraticMap::f_big(&self.a, &piece.jlo), QuadraticMap::f_big(&self.a, &piece.jhi));
        if positive {
            piece.jlo = v;
            piece.jhi = u;
            piece.inc = !piece.inc;
        } else {
            piece.jlo = u;
            piece.jhi = v;
        }
        vec![Outcome::Keep(piece)]
    }
}

type AggKey = (u64, u64, usize);

fn agg_add(map: &mut BTreeMap<AggKey, f64>, jlo: f64, jhi: f64, release: usize, mass: f64) {
    // images that collapsed to a point in f64 keep their mass
    if mass > 0.0 {
        *map.entry((jlo.to_bits(), jhi.max(jlo).to_bits(), release)).or_insert(0.0) += mass;
    }
}

fn uniform_split(g: &Geometry, jlo: f64, jhi: f64, n: usize, release: usize, mass: f64) -> Vec<(Kind, f64, f64, usize, f64)> {
    if release > n {
        return vec![(Kind::Free, jlo, jhi, release, mass)];
    }
    let len = jhi - jlo;
    let subs = decide(g, &jlo, &jhi);
    if len <= 0.0 {
        let s = subs[0];
        let rel = match s.kind {
            Kind::Bound { p } => n + p as usize,
            _ => n,
        };
        return vec![(s.kind, jlo, jhi, rel, mass)];
    }
    subs.into_iter()
        .filter_map(|s| {
            let val = |e: End| match e {
                End::Lo => jlo,
                End::Hi => jhi,
                End::At(x) => x,
            };
            let (a, b) = (val(s.lo), val(s.hi));
            (b > a).then(|| {
                let m = mass * (b - a) / len;
                let rel = match s.kind {
                    Kind::Bound { p } => n + p as usize,
                    _ => n,
                };
                (s.kind, a, b, rel, m)
            })
        })
        .collect()
}

/// Builds the induced map over Λ from the critical partition.
pub fn build_induced_map(map: &QuadraticMap, part: &CriticalPartition, config: &InducingConfig) -> Result<InducedSystem> {
    let g = Geometry::from_partition(part);
    if !(g.lambda_plus.0 > 0.0 && g.lambda_plus.1 < part.table.delta(part.table.big_n)) {
        return Err(Error::Config("Λ⁺ must lie inside (0, δ_N)".into()));
    }
    if config.t_max < part.table.big_n {
        return Err(Error::Config("T_max must be at least N".into()));
    }
    let bits = config.bits();
    let a = map.a_big(bits);
    let b = Builder {
        map: *map,
        g: &g,
        bits,
        inv_a: Big::one(bits).div(&a),
        a,
        threshold: config.min_explicit_mass * g.base_len,
    };
    let lp = (Big::from_f64(g.lambda_plus.0, bits), Big::from_f64(g.lambda_plus.1, bits));
    let base = lp.1.sub(&lp.0).to_f64();
    let mut pieces = vec![Piece {
        lo: lp.0.clone(),
        hi: lp.1.clone(),
        jlo: lp.0,
        jhi: lp.1,
        inc: true,
        signs: Vec::new(),
        release: g.initial_bound as usize,
        bindings: vec![(0, g.initial_bound)],
        mass: base,
        ancestors: Vec::new(),
    }];
    let mut agg: BTreeMap<AggKey, f64> = BTreeMap::new();
    let mut branches = Vec::new();
    let mut agg_returns: BTreeMap<(usize, i8), f64> = BTreeMap::new();
    let mut returned_by_time = vec![0.0; config.t_max + 1];
    let mut lost = 0.0;
    let mut folds = 0;
    let mut snapshots = Vec::new();

    for n in 0..=config.t_max {
        // rules at free times
        if n >= 1 {
            let results: Vec<Result<Vec<Outcome>>> = std::mem::take(&mut pieces)
                .into_par_iter()
                .map(|p| if p.release <= n { b.split(p, n) } else { Ok(vec![Outcome::Keep(p)]) })
                .collect();
            for r in results {
                for o in r? {
                    match o {
                        Outcome::Keep(p) => pieces.push(p),
                        Outcome::Agg { jlo, jhi, release, mass } => agg_add(&mut agg, jlo, jhi, release, mass),
                        Outcome::Branch(br) => {
                            returned_by_time[n] += br.length;
                            branches.push(br);
                        }
                        Outcome::Lost(m) => lost += m,
                        Outcome::Fold => folds += 1,
                    }
                }
            }
            let mut next = BTreeMap::new();
            for (&(lo, hi, rel), &m) in &agg {
                for (kind, a0, b0, r, mm) in uniform_split(&g, f64::from_bits(lo), f64::from_bits(hi), n, rel, m) {
                    match kind {
                        Kind::Return(s) => {
                            *agg_returns.entry((n, s)).or_insert(0.0) += mm;
                            returned_by_time[n] += mm;
                        }
                        Kind::Lost => lost += mm,
                        _ => agg_add(&mut next, a0, b0, r, mm),
                    }
                }
            }
            agg = next;
            if pieces.len() > config.max_explicit_pieces {
                pieces.sort_by(|x, y| y.mass.total_cmp(&x.mass));
                for p in pieces.drain(config.max_explicit_pieces..) {
                    agg_add(&mut agg, p.jlo.to_f64(), p.jhi.to_f64(), p.release, p.mass);
                }
            }
        }
        if config.snapshot_times.contains(&n) {
            let mut snap = Vec::with_capacity(pieces.len());
            for (i, p) in pieces.iter_mut().enumerate() {
                p.ancestors.push(i as u32);
                snap.push(SnapshotPiece { domain: (p.lo.to_f64(), p.hi.to_f64()), length: p.mass });
            }
            snapshots.push(Snapshot { time: n, pieces: snap });
        }
        if n == config.t_max {
            break;
        }
        // advance to time n + 1
        let moved: Vec<Vec<Outcome>> = std::mem::take(&mut pieces).into_par_iter().map(|p| b.advance(p, n)).collect();
        for o in moved.into_iter().flatten() {
            match o {
                Outcome::Keep(p) => pieces.push(p),
                Outcome::Fold => folds += 1,
                _ => unreachable!(),
            }
        }
        let mut next = BTreeMap::new();
        for (&(lo, hi, rel), &m) in &agg {
            let (lo, hi) = (f64::from_bits(lo), f64::from_bits(hi));
            let mut segs = vec![(lo, hi, m)];
            if lo < 0.0 && hi > 0.0 {
                segs = vec![(lo, 0.0, m * -lo / (hi - lo)), (0.0, hi, m * hi / (hi - lo))];
            }
            for (u, v, mm) in segs {
                let (fu, fv) = (map.f(u), map.f(v));
                agg_add(&mut next, fu.min(fv), fu.max(fv), rel, mm);
            }
        }
        agg = next;
    }

    let live: f64 = pieces.iter().map(|p| p.mass).sum::<f64>() + agg.values().sum::<f64>();
    let explicit_returned: f64 = branches.iter().map(|b| b.length).sum();
    let aggregated_returned: f64 = agg_returns.values().sum();
    let mut tail = Vec::with_capacity(config.t_max + 1);
    let mut acc = 0.0;
    for r in &returned_by_time {
        acc += r;
        tail.push(2.0 * (base - acc).max(0.0));
    }
    branches.sort_by(|x, y| x.domain.0.total_cmp(&y.domain.0));
    let mut sys = InducedSystem {
        map: *map,
        geometry: g.clone(),
        config: config.clone(),
        branches,
        aggregated_returns: agg_returns
            .into_iter()
            .map(|((r, s), m)| AggregatedReturn { return_time: r, target_sign: s, mass: m })
            .collect(),
        tail,
        tail_fit: None,
        balance: MassBalance { explicit_returned, aggregated_returned, live, lost_to_core: lost, base },
        fold_events: folds,
        snapshots,
    };
    sys.tail_fit = return_time_tail(&sys.tail).ok();
    Ok(sys)
}

/// Least-squares fit of log|{R > n}| over the longest window (ending at the
/// last nonzero entry, starting after the initial plateau) with R² ≥ 0.99,
/// or the best-R² window if none reaches it.
pub fn return_time_tail(tail: &[f64]) -> Result<TailFit> {
    let nz: Vec<usize> = (0..tail.len()).filter(|&i| tail[i] > 0.0).collect();
    if nz.len() < 10 {
        return Err(Error::FitRejected { r2: f64::NAN });
    }
    let end = *nz.last().unwrap();
    let start0 = (0..=end).find(|&i| tail[i] < tail[0]).unwrap_or(0).saturating_sub(1);
    let fit_range = |s: usize| -> LinearFit {
        let xs: Vec<f64> = (s..=end).filter(|&i| tail[i] > 0.0).map(|i| i as f64).collect();
        let ys: Vec<f64> = (s..=end).filter(|&i| tail[i] > 0.0).map(|i| tail[i].ln()).collect();
        linear_fit(&xs, &ys)
    };
    let mut best: Option<(usize, LinearFit)> = None;
    for s in start0..=end.saturating_sub(9) {
        let f = fit_range(s);
        let good = f.r2 >= 0.99;
        match &best {
            None => best = Some((s, f)),
            Some((_, bf)) => {
                let bgood = bf.r2 >= 0.99;
                if (good && !bgood) || (!good && !bgood && f.r2 > bf.r2) {
                    best = Some((s, f));
                }
            }
        }
        if good {
            break;
        }
    }
    let (s, f) = best.ok_or(Error::FitRejected { r2: f64::NAN })?;
    if f.r2 < 0.9 || f.slope >= 0.0 {
        return Err(Error::FitRejected { r2: f.r2 });
    }
    Ok(TailFit { zeta: f.slope.exp(), c1: f.intercept.exp(), r2: f.r2, from: s, to: end })
}

/// A point (x, ℓ) of the tower Δ = {(x, ℓ): ℓ < R(x)}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TowerPoint {
    pub x: f64,
    pub level: usize,
}

pub struct Tower<'s> {
    pub system: &'s InducedSystem,
    /// |Δ_ℓ| = Σ_{R > ℓ} |ω| over explicit branches on Λ.
    pub level_mass: Vec<f64>,
}

impl<'s> Tower<'s> {
    pub fn new(system: &'s InducedSystem) -> Tower<'s> {
        let t = system.config.t_max;
        let mut level_mass = vec![0.0; t + 1];
        for b in &system.branches {
            for (l, m) in level_mass.iter_mut().enumerate().take(b.return_time) {
                let _ = l;
                *m += 2.0 * b.length;
            }
        }
        Tower { system, level_mass }
    }

    /// (x, ℓ+1) while ℓ+1 < R(x), else (f^{R(x)} x, 0).
    pub fn step(&self, pt: TowerPoint) -> Result<TowerPoint> {
        let (br, _) = self.system.locate(pt.x).ok_or(Error::NotInBase(pt.x))?;
        let r = br.return_time;
        if pt.level >= r {
            return Err(Error::Domain(format!("level {} not below R = {r}", pt.level)));
        }
        if pt.level + 1 < r {
            return Ok(TowerPoint { x: pt.x, level: pt.level + 1 });
        }
        let bits = self.system.config.bits();
        let a = self.system.map.a_big(bits);
        let mut y = Big::from_f64(pt.x, bits);
        for _ in 0..r {
            y = QuadraticMap::f_big(&a, &y);
        }
        let (lo, hi) = self.system.geometry.lambda(br.target_sign);
        Ok(TowerPoint { x: y.to_f64().clamp(lo, hi), level: 0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuickReturnRow {
    pub k: usize,
    pub piece_length: f64,
    /// Largest |ω̃|/|ω| over branches in the window.
    pub best_ratio: f64,
    /// Σ|ω̃|/|ω| over branches in the window.
    pub aggregate_ratio: f64,
    pub threshold: f64,
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuickReturnReport {
    pub window_factor: f64,
    pub rows: Vec<QuickReturnRow>,
    pub violations: usize,
    /// min over rows of log(best_ratio) + √ε k.
    pub min_margin: f64,
}

/// For each recorded piece ω at snapshot time k, looks for descendant
/// branches with k < R ≤ (1 + 19ε/λ)k and compares |ω̃|/|ω| to e^{−√ε k}.
/// Aggregated descendants are not tracked, so ratios are lower bounds.
pub fn quick_return_check(system: &InducedSystem, epsilon: f64, lambda: f64) -> QuickReturnReport {
    let factor = 1.0 + 19.0 * epsilon / lambda;
    let mut rows = Vec::new();
    for (si, snap) in system.snapshots.iter().enumerate() {
        let k = snap.time;
        let r_max = (factor * k as f64).floor() as usize;
        let mut best = vec![0.0f64; snap.pieces.len()];
        let mut total = vec![0.0f64; snap.pieces.len()];
        for b in &system.branches {
            if b.return_time > k && b.return_time <= r_max {
                if let Some(&anc) = b.ancestors.get(si) {
                    let i = anc as usize;
                    best[i] = best[i].max(b.length);
                    total[i] += b.length;
                }
            }
        }
        let threshold = (-epsilon.sqrt() * k as f64).exp();
        for (i, piece) in snap.pieces.iter().enumerate() {
            let best_ratio = best[i] / piece.length;
            rows.push(QuickReturnRow {
                k,
                piece_length: piece.length,
                best_ratio,
                aggregate_ratio: total[i] / piece.length,
                threshold,
                violation: best_ratio < threshold,
            });
        }
    }
    let violations = rows.iter().filter(|r| r.violation).count();
    let min_margin = rows
        .iter()
        .map(|r| r.best_ratio.ln() + epsilon.sqrt() * r.k as f64)
        .fold(f64::INFINITY, f64::min);
    QuickReturnReport { window_factor: factor, rows, violations, min_margin }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchDistortion {
    pub index: usize,
    pub return_time: usize,
    pub ratio: f64,
    pub xi: f64,
    pub koebe_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    pub branches: Vec<BranchDistortion>,
    pub max_ratio: f64,
    pub violations: usize,
}

/// ((1 + ξ)/ξ)².
pub fn koebe_bound(xi: f64) -> f64 {
    ((1.0 + xi) / xi).powi(2)
}

/// Empirical distortion sup |Df^R(x)|/|Df^R(y)| over `samples` points of
/// each branch (every `stride`-th branch), against the Koebe bound from the
/// branch's own extension margin.
pub fn distortion_check(system: &InducedSystem, samples: usize, stride: usize) -> DistortionReport {
    let bits = system.config.bits();
    let a = system.map.a_big(bits);
    let rows: Vec<BranchDistortion> = system
        .branches
        .par_iter()
        .enumerate()
        .filter(|(i, _)| i % stride.max(1) == 0)
        .map(|(i, br)| {
            let (lo, hi) = br.exact.clone().unwrap_or((Big::from_f64(br.domain.0, bits), Big::from_f64(br.domain.1, bits)));
            let w = hi.sub(&lo);
            let mut mx = f64::NEG_INFINITY;
            let mut mn = f64::INFINITY;
            for s in 0..samples.max(2) {
                let t = Big::from_f64((s as f64 + 0.5) / samples.max(2) as f64, bits);
                let mut y = lo.add(&w.mul(&t));
                let mut l = 0.0;
                for _ in 0..br.return_time {
                    l += system.map.log_df_big(&y);
                    y = QuadraticMap::f_big(&a, &y);
                }
                mx = mx.max(l);
                mn = mn.min(l);
            }
            let xi = br.koebe_margin(&system.geometry);
            BranchDistortion { index: i, return_time: br.return_time, ratio: (mx - mn).exp(), xi, koebe_bound: koebe_bound(xi) }
        })
        .collect();
    let max_ratio = rows.iter().map(|r| r.ratio).fold(1.0, f64::max);
    let violations = rows.iter().filter(|r| r.ratio > r.koebe_bound).count();
    DistortionReport { branches: rows, max_ratio, violations }
}

/// Outcome of following a single point through the rules in `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excursion {
    pub return_time: usize,
    pub target_sign: i8,
    /// log|Df^R(x)|.
    pub log_deriv: f64,
    /// S_R φ(x) per observable.
    pub phi_plus: Vec<f64>,
    /// S_R φ(−x) per observable.
    pub phi_minus: Vec<f64>,
    /// f^R(x), clamped into Λ^s.
    pub end_point: f64,
}

/// Follows x ∈ Λ⁺ together with the image interval containing its orbit
/// until the piece returns (Some) or is lost or exceeds `t_max` (None).
pub fn follow_point(map: &QuadraticMap, g: &Geometry, x: f64, t_max: usize, obs: &[Observable]) -> Option<Excursion> {
    let (mut jlo, mut jhi) = g.lambda_plus;
    let mut y = x;
    let mut release = g.initial_bound as usize;
    let mut log_d = 0.0;
    let mut sp: Vec<f64> = vec![0.0; obs.len()];
    let first_minus: Vec<f64> = obs.iter().map(|o| o.eval(-x)).collect();
    let first_plus: Vec<f64> = obs.iter().map(|o| o.eval(x)).collect();
    for n in 0..=t_max {
        if n >= 1 && release <= n {
            let subs = decide(g, &jlo, &jhi);
            let val = |e: End, lo: f64, hi: f64| match e {
                End::Lo => lo,
                End::Hi => hi,
                End::At(v) => v,
            };
            let chosen = subs.iter().find(|s| {
                let (a, b) = (val(s.lo, jlo, jhi), val(s.hi, jlo, jhi));
                y >= a && y <= b
            })?;
            let (a, b) = (val(chosen.lo, jlo, jhi), val(chosen.hi, jlo, jhi));
            match chosen.kind {
                Kind::Return(s) => {
                    let phi_plus = sp.clone();
                    let phi_minus: Vec<f64> =
                        sp.iter().zip(first_plus.iter().zip(&first_minus)).map(|(t, (fp, fm))| t - fp + fm).collect();
                    let (l_lo, l_hi) = g.lambda(s);
                    return Some(Excursion {
                        return_time: n,
                        target_sign: s,
                        log_deriv: log_d,
                        phi_plus,
                        phi_minus,
                        end_point: y.clamp(l_lo, l_hi),
                    });
                }
                Kind::Lost => return None,
                Kind::Free => release = n,
                Kind::Bound { p } => release = n + p as usize,
            }
            jlo = a;
            jhi = b;
        }
        if n == t_max {
            break;
        }
        for (s, o) in sp.iter_mut().zip(obs) {
            *s += o.eval(y);
        }
        log_d += map.df(y).abs().ln();
        if jlo < 0.0 && jhi > 0.0 {
            if y < 0.0 {
                jhi = 0.0;
            } else {
                jlo = 0.0;
            }
        }
        let (u, v) = (map.f(jlo), map.f(jhi));
        jlo = u.min(v);
        jhi = u.max(v);
        y = map.f(y).clamp(jlo, jhi);
    }
    None
}
