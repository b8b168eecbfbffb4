//! Monotonicity intervals ("laps") of f^n and periodic-orbit enumeration.
//!
//! Lap endpoints are preimages of the critical point. They are produced by
//! pulling 0 back through the lap's sign history, which is a contraction
//! and therefore stable in `f64`, while lap images are carried forward.

use crate::map::QuadraticMap;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lap {
    pub lo: f64,
    pub hi: f64,
    /// Images f^n(lo), f^n(hi).
    pub img_lo: f64,
    pub img_hi: f64,
    /// Bit j is set if f^j(lap) ⊂ (0, ∞).
    pub signs: u64,
}

impl Lap {
    pub fn increasing(&self) -> bool {
        self.img_hi > self.img_lo
    }
}

/// Inverse of f^k along a sign history: the unique x in the lap with
/// f^k(x) = y (bit j of `signs` gives the side of f^j(x)).
#[inline]
pub fn pullback(map: &QuadraticMap, signs: u64, k: usize, y: f64) -> f64 {
    let inv_a = 1.0 / map.a;
    let mut x = y;
    for j in (0..k).rev() {
        let r = ((1.0 - x) * inv_a).max(0.0).sqrt();
        x = if signs >> j & 1 == 1 { r } else { -r };
    }
    x
}

struct Walker<'m> {
    map: &'m QuadraticMap,
    n: usize,
}

impl Walker<'_> {
    fn walk<F: FnMut(&Lap)>(&self, k: usize, lap: Lap, visit: &mut F) {
        if k == self.n {
            visit(&lap);
            return;
        }
        let (u, v) = (lap.img_lo, lap.img_hi);
        let f = |y: f64| self.map.f(y);
        if u.min(v) < 0.0 && u.max(v) > 0.0 {
            let c = pullback(self.map, lap.signs, k, 0.0).clamp(lap.lo, lap.hi);
            let left_pos = u > 0.0;
            let left = Lap {
                lo: lap.lo,
                hi: c,
                img_lo: f(u),
                img_hi: 1.0,
                signs: lap.signs | ((left_pos as u64) << k),
            };
            let right = Lap {
                lo: c,
                hi: lap.hi,
                img_lo: 1.0,
                img_hi: f(v),
                signs: lap.signs | ((!left_pos as u64) << k),
            };
            if c > lap.lo {
                self.walk(k + 1, left, visit);
            }
            if c < lap.hi {
                self.walk(k + 1, right, visit);
            }
        } else {
            let pos = u + v > 0.0;
            let next = Lap { img_lo: f(u), img_hi: f(v), signs: lap.signs | ((pos as u64) << k), ..lap };
            self.walk(k + 1, next, visit);
        }
    }
}

fn root_lap(lo: f64, hi: f64) -> Lap {
    Lap { lo, hi, img_lo: lo, img_hi: hi, signs: 0 }
}

/// Calls `visit` on every lap of f^n restricted to [lo, hi], left to right.
pub fn visit_laps<F: FnMut(&Lap)>(map: &QuadraticMap, n: usize, lo: f64, hi: f64, mut visit: F) {
    assert!(n < 64, "lap depth limited to 63");
    Walker { map, n }.walk(0, root_lap(lo, hi), &mut visit);
}

/// Parallel fold over the laps of f^n on [lo, hi]. Work is split at a shallow
/// depth; partial results are combined in left-to-right order so the result
/// is independent of scheduling.
pub fn fold_laps<T, F, C>(map: &QuadraticMap, n: usize, lo: f64, hi: f64, init: T, fold: F, combine: C) -> T
where
    T: Clone + Send + Sync,
    F: Fn(T, &Lap) -> T + Sync,
    C: Fn(T, T) -> T + Sync,
{
    let split = n.min(8);
    let mut roots = Vec::new();
    visit_laps(map, split, lo, hi, |l| roots.push(*l));
    let parts: Vec<T> = roots
        .par_iter()
        .map(|r| {
            let mut acc = Some(init.clone());
            Walker { map, n }.walk(split, *r, &mut |lap: &Lap| {
                acc = Some(fold(acc.take().unwrap(), lap));
            });
            acc.unwrap()
        })
        .collect();
    parts.into_iter().fold(init, combine)
}

pub fn lap_count(map: &QuadraticMap, n: usize) -> usize {
    fold_laps(map, n, -1.0, 1.0, 0usize, |c, _| c + 1, |a, b| a + b)
}

/// A periodic orbit of exact period `period`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cycle {
    pub period: usize,
    pub points: Vec<f64>,
    /// |Df^period| along the cycle.
    pub multiplier: f64,
}

impl Cycle {
    pub fn mean(&self, phi: impl Fn(f64) -> f64) -> f64 {
        self.points.iter().map(|&x| phi(x)).sum::<f64>() / self.period as f64
    }

    /// Lyapunov exponent of the uniform measure on the cycle.
    pub fn exponent(&self) -> f64 {
        self.multiplier.ln() / self.period as f64
    }
}

fn fp_residual(map: &QuadraticMap, n: usize, x: f64) -> (f64, f64) {
    let mut y = x;
    let mut d = 1.0;
    for _ in 0..n {
        d *= map.df(y);
        y = map.f(y);
    }
    (y - x, d - 1.0)
}

/// Fixed points of f^n inside one lap (sign changes of f^n(x) − x on a
/// small grid, refined by safeguarded Newton). Returns None if refinement
/// failed to converge.
fn lap_fixed_points(map: &QuadraticMap, n: usize, lap: &Lap) -> Option<Vec<f64>> {
    const GRID: usize = 8;
    let mut out = Vec::new();
    let xs: Vec<f64> = (0..=GRID).map(|i| lap.lo + (lap.hi - lap.lo) * i as f64 / GRID as f64).collect();
    let gs: Vec<f64> = xs.iter().map(|&x| fp_residual(map, n, x).0).collect();
    for i in 0..GRID {
        let (mut a, mut b) = (xs[i], xs[i + 1]);
        let (ga, gb) = (gs[i], gs[i + 1]);
        if ga == 0.0 {
            out.push(a);
            continue;
        }
        if ga.signum() == gb.signum() {
            continue;
        }
        let sa = ga.signum();
        let mut x = 0.5 * (a + b);
        let mut converged = false;
        for _ in 0..200 {
            let (g, dg) = fp_residual(map, n, x);
            if g == 0.0 {
                converged = true;
                break;
            }
            if g.signum() == sa {
                a = x;
            } else {
                b = x;
            }
            let newton = x - g / dg;
            let next = if newton > a && newton < b { newton } else { 0.5 * (a + b) };
            if (next - x).abs() <= 4.0 * f64::EPSILON * x.abs().max(1e-300) || b - a <= f64::EPSILON * x.abs() {
                x = next;
                converged = true;
                break;
            }
            x = next;
        }
        if !converged {
            return None;
        }
        out.push(x);
    }
    Some(out)
}

/// Result of [`periodic_orbits`].
#[derive(Debug, Clone)]
pub struct CycleCensus {
    pub cycles: Vec<Cycle>,
    /// Laps on which root refinement did not converge.
    pub unconverged: usize,
}

/// All periodic orbits of exact period p ≤ `max_period`, deduplicated.
pub fn periodic_orbits(map: &QuadraticMap, max_period: usize) -> CycleCensus {
    let mut cycles = Vec::new();
    let mut unconverged = 0;
    for p in 1..=max_period {
        let (pts, bad) = fold_laps(
            map,
            p,
            -1.0,
            1.0,
            (Vec::new(), 0usize),
            |(mut v, bad), lap| match lap_fixed_points(map, p, lap) {
                Some(r) => {
                    v.extend(r);
                    (v, bad)
                }
                None => (v, bad + 1),
            },
            |(mut a, x), (b, y)| {
                a.extend(b);
                (a, x + y)
            },
        );
        unconverged += bad;
        let mut pts = pts;
        pts.sort_by(f64::total_cmp);
        pts.dedup_by(|b, a| (*b - *a).abs() < 1e-12);
        for x in pts {
            let orbit = cycle_points(map, x, p);
            // keep only exact period p, represented once (by its minimum)
            if let Some(c) = orbit {
                let min = c.iter().cloned().fold(f64::INFINITY, f64::min);
                if x == min {
                    let multiplier = c.iter().map(|&y| map.df(y).abs()).product();
                    cycles.push(Cycle { period: p, points: c, multiplier });
                }
            }
        }
    }
    cycles.sort_by(|a, b| a.period.cmp(&b.period).then(a.points[0].total_cmp(&b.points[0])));
    CycleCensus { cycles, unconverged }
}

/// Orbit of a period-p point, or None if its exact period is smaller.
fn cycle_points(map: &QuadraticMap, x: f64, p: usize) -> Option<Vec<f64>> {
    let mut pts = vec![x];
    let mut y = x;
    for _ in 1..p {
        y = map.f(y);
        pts.push(y);
    }
    let tol = 1e-9;
    for (i, &q) in pts.iter().enumerate().skip(1) {
        if (q - x).abs() < tol && p % i == 0 {
            return None;
        }
    }
    Some(pts)
}
