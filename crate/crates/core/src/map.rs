//! The quadratic family f(x) = 1 − a x² on X = [−1, 1].

use crate::error::{Error, Result};
use crate::precision::Big;
use serde::{Deserialize, Serialize};

/// Native double precision; selects the `f64` fast path.
pub const F64_BITS: usize = 53;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticMap {
    pub a: f64,
    /// Mantissa bits used by [`QuadraticMap::iterate`].
    pub precision: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitSegment {
    pub start: f64,
    /// Orbit points rounded to `f64` (computed in the map's precision).
    pub points: Vec<f64>,
    /// Entry i is Σ_{j<i} log|Df(points[j])|; −∞ once a point is exactly 0.
    pub log_deriv_prefix: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub x: f64,
    /// Df at the fixed point.
    pub multiplier: f64,
}

impl QuadraticMap {
    pub fn new(a: f64) -> Result<QuadraticMap> {
        if !(a > 0.0 && a <= 2.0) {
            return Err(Error::Domain(format!("a = {a} is outside (0, 2]")));
        }
        Ok(QuadraticMap { a, precision: F64_BITS })
    }

    pub fn with_precision(mut self, bits: usize) -> QuadraticMap {
        self.precision = bits.max(F64_BITS);
        self
    }

    #[inline]
    pub fn f(&self, x: f64) -> f64 {
        1.0 - self.a * x * x
    }

    #[inline]
    pub fn df(&self, x: f64) -> f64 {
        -2.0 * self.a * x
    }

    pub fn a_big(&self, prec: usize) -> Big {
        Big::from_f64(self.a, prec)
    }

    /// One step in arbitrary precision; `a` must carry the same precision.
    #[inline]
    pub fn f_big(a: &Big, x: &Big) -> Big {
        Big::one(x.precision()).sub(&a.mul(&x.mul(x)))
    }

    /// log|Df(x)| = log(2a) + log|x|, robust for tiny |x|.
    #[inline]
    pub fn log_df_big(&self, x: &Big) -> f64 {
        (2.0 * self.a).ln() + x.ln_abs()
    }

    /// Orbit x0, f(x0), …, f^n(x0) in `self.precision`.
    pub fn iterate(&self, x0: f64, n: usize) -> Result<OrbitSegment> {
        if !(x0.abs() <= 1.0) {
            return Err(Error::Domain(format!("x0 = {x0} is outside [-1, 1]")));
        }
        let log2a = (2.0 * self.a).ln();
        let mut points = Vec::with_capacity(n + 1);
        let mut prefix = Vec::with_capacity(n + 1);
        prefix.push(0.0);
        if self.precision <= F64_BITS {
            let mut x = x0;
            let mut acc = 0.0;
            for _ in 0..n {
                points.push(x);
                acc += log2a + x.abs().ln();
                prefix.push(acc);
                x = self.f(x);
            }
            points.push(x);
        } else {
            let a = self.a_big(self.precision);
            let mut x = Big::from_f64(x0, self.precision);
            let mut acc = 0.0;
            for _ in 0..n {
                points.push(x.to_f64());
                acc += self.log_df_big(&x);
                prefix.push(acc);
                x = Self::f_big(&a, &x);
            }
            points.push(x.to_f64());
        }
        Ok(OrbitSegment { start: x0, points, log_deriv_prefix: prefix })
    }

    /// The orbit as [`Big`] values at `prec` bits.
    pub fn iterate_big(&self, x0: &Big, n: usize) -> Vec<Big> {
        let a = self.a_big(x0.precision());
        let mut out = Vec::with_capacity(n + 1);
        let mut x = x0.clone();
        for _ in 0..n {
            let next = Self::f_big(&a, &x);
            out.push(x);
            x = next;
        }
        out.push(x);
        out
    }

    /// (1/n) Σ_{i<n} log|Df(f^i x0)|; −∞ if the orbit hits 0 exactly.
    pub fn lyapunov_average(&self, x0: f64, n: usize) -> Result<f64> {
        if n == 0 {
            return Err(Error::Domain("n must be at least 1".into()));
        }
        let orbit = self.iterate(x0, n)?;
        Ok(orbit.log_deriv_prefix[n] / n as f64)
    }

    pub fn birkhoff_average(&self, x0: f64, n: usize, phi: &Observable) -> Result<f64> {
        if n == 0 {
            return Err(Error::Domain("n must be at least 1".into()));
        }
        let orbit = self.iterate(x0, n)?;
        Ok(orbit.points[..n].iter().map(|&x| phi.eval(x)).sum::<f64>() / n as f64)
    }

    /// Roots of a x² + x − 1 = 0 in [−1, 1], ascending.
    pub fn fixed_points(&self) -> Vec<FixedPoint> {
        let disc = (1.0 + 4.0 * self.a).sqrt();
        let mut out: Vec<FixedPoint> = [(-1.0 - disc) / (2.0 * self.a), self.x_hat()]
            .into_iter()
            .filter(|x| x.abs() <= 1.0 + 1e-15)
            .map(|x| FixedPoint { x: x.clamp(-1.0, 1.0), multiplier: self.df(x) })
            .collect();
        out.sort_by(|p, q| p.x.total_cmp(&q.x));
        out
    }

    /// The orientation-reversing fixed point x̂ = (−1 + √(1+4a)) / 2a.
    pub fn x_hat(&self) -> f64 {
        // rationalized to avoid cancellation for small a
        2.0 / (1.0 + (1.0 + 4.0 * self.a).sqrt())
    }
}

/// Continuous observables φ on [−1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Observable {
    /// φ(x) = x
    X,
    /// φ(x) = x²
    X2,
    /// φ(x) = cos(πx)
    CosPiX,
    /// φ(x) = Σ c_k x^k
    Poly(Vec<f64>),
    Constant(f64),
    /// log(2a · max(|x|, 10⁻⁶)), a bounded stand-in for log|Df|.
    LogDfProxy { a: f64 },
}

pub const PROXY_FLOOR: f64 = 1e-6;

impl Observable {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Observable::X => x,
            Observable::X2 => x * x,
            Observable::CosPiX => (std::f64::consts::PI * x).cos(),
            Observable::Poly(c) => c.iter().rev().fold(0.0, |acc, &ck| acc * x + ck),
            Observable::Constant(c) => *c,
            Observable::LogDfProxy { a } => (2.0 * a * x.abs().max(PROXY_FLOOR)).ln(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Observable::X => "x".into(),
            Observable::X2 => "x2".into(),
            Observable::CosPiX => "cospix".into(),
            Observable::Poly(c) => {
                let parts: Vec<String> = c.iter().map(|v| v.to_string()).collect();
                format!("poly:{}", parts.join(","))
            }
            Observable::Constant(c) => format!("const:{c}"),
            Observable::LogDfProxy { a } => format!("logdf:{a}"),
        }
    }

    /// Parses `x`, `x2`, `cospix`, `poly:c0,c1,…`, `const:c` or `logdf:a`.
    pub fn parse(s: &str) -> Result<Observable> {
        let s = s.trim();
        let bad = || Error::Config(format!("unknown observable '{s}'"));
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad());
        match s {
            "x" => Ok(Observable::X),
            "x2" => Ok(Observable::X2),
            "cospix" => Ok(Observable::CosPiX),
            _ => {
                let (head, tail) = s.split_once(':').ok_or_else(bad)?;
                match head {
                    "poly" => Ok(Observable::Poly(tail.split(',').map(num).collect::<Result<_>>()?)),
                    "const" => Ok(Observable::Constant(num(tail)?)),
                    "logdf" => Ok(Observable::LogDfProxy { a: num(tail)? }),
                    _ => Err(bad()),
                }
            }
        }
    }

    /// A Lipschitz constant on [−1, 1], when one is known.
    pub fn lipschitz_bound(&self) -> Option<f64> {
        match self {
            Observable::X => Some(1.0),
            Observable::X2 => Some(2.0),
            Observable::CosPiX => Some(std::f64::consts::PI),
            Observable::Poly(c) => Some(c.iter().enumerate().map(|(k, v)| k as f64 * v.abs()).sum()),
            Observable::Constant(_) => Some(0.0),
            Observable::LogDfProxy { .. } => Some(1.0 / PROXY_FLOOR),
        }
    }

    /// True if φ(−x) = φ(x) for all x.
    pub fn is_even(&self) -> bool {
        match self {
            Observable::X => false,
            Observable::X2 | Observable::CosPiX | Observable::Constant(_) | Observable::LogDfProxy { .. } => true,
            Observable::Poly(c) => c.iter().skip(1).step_by(2).all(|&v| v == 0.0),
        }
    }
}
