//! Double-double arithmetic (about 32 significant digits), enough to see
//! invariance residuals far below the size of the terms that cancel in them.

use num_complex::Complex64;
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// `2π` split into two doubles.
pub const TAU: Dd = Dd {
    hi: std::f64::consts::TAU,
    lo: 2.4492935982947064e-16,
};

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn new(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 || (self.hi == 0.0 && self.lo < 0.0) {
            -self
        } else {
            self
        }
    }

    pub fn mul_f64(self, b: f64) -> Self {
        let (p, e) = two_prod(self.hi, b);
        let (p, e) = quick_two_sum(p, e + self.lo * b);
        Dd { hi: p, lo: e }
    }

    /// Distance to the nearest integer, in `[-1/2, 1/2]`.
    pub fn frac_centered(self) -> Self {
        let r = self - Dd::new(self.hi.round());
        r - Dd::new(r.hi.round())
    }

    pub fn powi(self, n: u32) -> Self {
        let mut acc = Dd::ONE;
        let mut base = self;
        let mut e = n;
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * base;
            }
            base = base * base;
            e >>= 1;
        }
        acc
    }

    /// `(cos 2πt, sin 2πt)`.
    pub fn cos_sin_turns(self) -> (Dd, Dd) {
        let t = self.frac_centered();
        let q = (t.hi * 4.0).round();
        let s = t - Dd::new(q / 4.0);
        let a = TAU * s;
        let a2 = a * a;
        // Taylor series on |a| ≤ π/4, Horner in a²
        let mut sin = Dd::ONE;
        let mut cos = Dd::ONE;
        for k in (1..=13).rev() {
            let ks = (2 * k) as f64 * (2 * k + 1) as f64;
            let kc = (2 * k - 1) as f64 * (2 * k) as f64;
            sin = Dd::ONE - a2 * sin / Dd::new(ks);
            cos = Dd::ONE - a2 * cos / Dd::new(kc);
        }
        let sin = a * sin;
        match (q as i64).rem_euclid(4) {
            0 => (cos, sin),
            1 => (-sin, cos),
            2 => (-cos, -sin),
            _ => (sin, -cos),
        }
    }
}

impl From<f64> for Dd {
    fn from(v: f64) -> Self {
        Dd::new(v)
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (s, e) = quick_two_sum(s, e + f);
        Dd { hi: s, lo: e }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, b.hi);
        let e = e + (self.hi * b.lo + self.lo * b.hi);
        let (p, e) = quick_two_sum(p, e);
        Dd { hi: p, lo: e }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b.mul_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b.mul_f64(q2);
        let q3 = r.hi / b.hi;
        let (q, e) = quick_two_sum(q1, q2);
        Dd { hi: q, lo: e } + Dd::new(q3)
    }
}

/// Complex double-double.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Cdd {
    pub re: Dd,
    pub im: Dd,
}

impl Cdd {
    pub const ZERO: Cdd = Cdd {
        re: Dd::ZERO,
        im: Dd::ZERO,
    };
    pub const ONE: Cdd = Cdd {
        re: Dd::ONE,
        im: Dd::ZERO,
    };

    pub fn real(re: Dd) -> Self {
        Cdd { re, im: Dd::ZERO }
    }

    /// `e^{2πi t}`.
    pub fn cis_turns(t: Dd) -> Self {
        let (c, s) = t.cos_sin_turns();
        Cdd { re: c, im: s }
    }

    pub fn scale(self, f: Dd) -> Self {
        Cdd {
            re: self.re * f,
            im: self.im * f,
        }
    }

    pub fn to_c64(self) -> Complex64 {
        Complex64::new(self.re.to_f64(), self.im.to_f64())
    }

    pub fn norm(self) -> f64 {
        self.to_c64().norm()
    }

    pub fn powi(self, n: u32) -> Self {
        let mut acc = Cdd::ONE;
        for _ in 0..n {
            acc = acc * self;
        }
        acc
    }
}

impl From<Complex64> for Cdd {
    fn from(z: Complex64) -> Self {
        Cdd {
            re: Dd::new(z.re),
            im: Dd::new(z.im),
        }
    }
}

impl Add for Cdd {
    type Output = Cdd;
    fn add(self, b: Cdd) -> Cdd {
        Cdd {
            re: self.re + b.re,
            im: self.im + b.im,
        }
    }
}

impl Sub for Cdd {
    type Output = Cdd;
    fn sub(self, b: Cdd) -> Cdd {
        Cdd {
            re: self.re - b.re,
            im: self.im - b.im,
        }
    }
}

impl Neg for Cdd {
    type Output = Cdd;
    fn neg(self) -> Cdd {
        Cdd {
            re: -self.re,
            im: -self.im,
        }
    }
}

impl Mul for Cdd {
    type Output = Cdd;
    fn mul(self, b: Cdd) -> Cdd {
        Cdd {
            re: self.re * b.re - self.im * b.im,
            im: self.re * b.im + self.im * b.re,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_keeps_low_bits() {
        let third = Dd::ONE / Dd::new(3.0);
        let back = third * Dd::new(3.0) - Dd::ONE;
        assert!(back.to_f64().abs() < 1e-31);
        let tiny = Dd::new(1.0) + Dd::new(1e-20);
        assert_eq!((tiny - Dd::ONE).to_f64(), 1e-20);
    }

    #[test]
    fn trig_matches_f64_and_identity() {
        for i in 0..97 {
            let t = -1.3 + i as f64 * 0.0371;
            let (c, s) = Dd::new(t).cos_sin_turns();
            let ang = std::f64::consts::TAU * t;
            assert!((c.to_f64() - ang.cos()).abs() < 1e-14);
            assert!((s.to_f64() - ang.sin()).abs() < 1e-14);
            let one = c * c + s * s - Dd::ONE;
            assert!(one.to_f64().abs() < 1e-30);
        }
    }

    #[test]
    fn small_angle_sine_is_accurate() {
        // sin(2π·1e-12) to relative 1e-28
        let (_, s) = Dd::new(1e-12).cos_sin_turns();
        let a = TAU.mul_f64(1e-12);
        let expected = a - a * a * a / Dd::new(6.0);
        assert!(((s - expected) / expected).to_f64().abs() < 1e-28);
    }
}
