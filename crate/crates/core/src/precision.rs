//! Arbitrary-precision reals for critical-orbit work.
//!
//! [`Big`] is a thin value type over `astro_float::BigFloat` that carries its
//! own working precision, so call sites read like ordinary arithmetic.

use astro_float::{BigFloat, RoundingMode, Sign};
use std::cmp::Ordering;
use std::fmt;

const RM: RoundingMode = RoundingMode::ToEven;

/// A binary floating-point number with a fixed mantissa width (bits).
#[derive(Clone)]
pub struct Big {
    v: BigFloat,
    prec: usize,
}

impl fmt::Debug for Big {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Big({:e}@{})", self.to_f64(), self.prec)
    }
}

impl Big {
    pub fn from_f64(x: f64, prec: usize) -> Big {
        Big { v: BigFloat::from_f64(x, prec), prec }
    }

    pub fn zero(prec: usize) -> Big {
        Big::from_f64(0.0, prec)
    }

    pub fn one(prec: usize) -> Big {
        Big::from_f64(1.0, prec)
    }

    pub fn precision(&self) -> usize {
        self.prec
    }

    /// Re-rounds to a different precision.
    pub fn with_precision(&self, prec: usize) -> Big {
        let mut v = self.v.clone();
        // widening is exact; narrowing rounds to nearest-even
        let _ = v.set_precision(prec, RM);
        Big { v, prec }
    }

    pub fn add(&self, o: &Big) -> Big {
        Big { v: self.v.add(&o.v, self.prec, RM), prec: self.prec }
    }

    pub fn sub(&self, o: &Big) -> Big {
        Big { v: self.v.sub(&o.v, self.prec, RM), prec: self.prec }
    }

    pub fn mul(&self, o: &Big) -> Big {
        Big { v: self.v.mul(&o.v, self.prec, RM), prec: self.prec }
    }

    pub fn div(&self, o: &Big) -> Big {
        Big { v: self.v.div(&o.v, self.prec, RM), prec: self.prec }
    }

    pub fn mul_f64(&self, c: f64) -> Big {
        self.mul(&Big::from_f64(c, self.prec))
    }

    pub fn add_f64(&self, c: f64) -> Big {
        self.add(&Big::from_f64(c, self.prec))
    }

    pub fn neg(&self) -> Big {
        Big { v: self.v.neg(), prec: self.prec }
    }

    pub fn abs(&self) -> Big {
        Big { v: self.v.abs(), prec: self.prec }
    }

    pub fn is_zero(&self) -> bool {
        self.v.is_zero()
    }

    /// −1, 0 or +1.
    pub fn signum(&self) -> i32 {
        if self.v.is_zero() {
            0
        } else if matches!(self.v.sign(), Some(Sign::Neg)) {
            -1
        } else {
            1
        }
    }

    pub fn cmp_big(&self, o: &Big) -> Ordering {
        match self.v.cmp(&o.v) {
            Some(c) if c < 0 => Ordering::Less,
            Some(0) => Ordering::Equal,
            _ => Ordering::Greater,
        }
    }

    pub fn cmp_f64(&self, x: f64) -> Ordering {
        self.cmp_big(&Big::from_f64(x, 64))
    }

    pub fn min(self, o: Big) -> Big {
        if self.cmp_big(&o) == Ordering::Greater {
            o
        } else {
            self
        }
    }

    pub fn max(self, o: Big) -> Big {
        if self.cmp_big(&o) == Ordering::Less {
            o
        } else {
            self
        }
    }

    /// Top mantissa word, sticky bit for the rest, and binary exponent:
    /// |self| ≈ top · 2^(e − 64).
    fn top_word(&self) -> Option<(u64, i64)> {
        if self.v.is_zero() {
            return None;
        }
        let words = self.v.mantissa_digits()?;
        let e = self.v.exponent()? as i64;
        let n = words.len();
        let mut top = words[n - 1];
        if words[..n - 1].iter().any(|&w| w != 0) {
            top |= 1;
        }
        Some((top, e))
    }

    /// Correctly rounded (to within one ulp) conversion to `f64`.
    pub fn to_f64(&self) -> f64 {
        let Some((top, e)) = self.top_word() else {
            return 0.0;
        };
        // top has its leading bit set; u64 → f64 rounds to nearest
        let m = top as f64;
        let scaled = scale2(m, e - 64);
        if self.signum() < 0 {
            -scaled
        } else {
            scaled
        }
    }

    /// Natural log of |self| without underflow for tiny values; −∞ at 0.
    pub fn ln_abs(&self) -> f64 {
        match self.top_word() {
            None => f64::NEG_INFINITY,
            Some((top, e)) => (top as f64).ln() + ((e - 64) as f64) * std::f64::consts::LN_2,
        }
    }

    /// Square root. Newton refinement from an `f64` seed: each step gains
    /// about 52 bits, so a few steps reach several hundred bits.
    pub fn sqrt(&self) -> Big {
        if self.is_zero() {
            return self.clone();
        }
        let approx = self.to_f64();
        if !(approx > 1e-280 && approx < 1e280) || !approx.is_normal() {
            return Big { v: self.v.sqrt(self.prec, RM), prec: self.prec };
        }
        let y0 = approx.sqrt();
        let c = Big::from_f64(0.5 / y0, self.prec);
        let mut y = Big::from_f64(y0, self.prec);
        let steps = (self.prec + 50) / 52 + 1;
        for _ in 0..steps {
            let r = self.sub(&y.mul(&y));
            y = y.add(&r.mul(&c));
        }
        // one true Newton step removes the error of the frozen slope
        let r = self.sub(&y.mul(&y));
        y.add(&r.div(&y.add(&y)))
    }

    /// Decimal string with enough digits to identify the value at its
    /// precision (used for JSON export of exact endpoints).
    pub fn to_decimal(&self) -> String {
        self.v.to_string()
    }
}

/// x · 2^k without intermediate overflow/underflow.
fn scale2(mut x: f64, mut k: i64) -> f64 {
    while k > 1000 {
        x *= 2f64.powi(1000);
        k -= 1000;
        if x.is_infinite() {
            return x;
        }
    }
    while k < -1000 {
        x *= 2f64.powi(-1000);
        k += 1000;
        if x == 0.0 {
            return x;
        }
    }
    x * 2f64.powi(k as i32)
}
