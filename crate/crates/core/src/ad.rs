//! Forward-mode automatic differentiation scalars.
//!
//! The kinematic chain, energies and vector field are written once over
//! [`Scalar`] and instantiated with `f64`, [`Dual`] (first derivatives in `N`
//! directions) and [`Jet2`] (value, first and second derivative along one
//! curve). The types nest, so `Jet2<Dual<f64, 17>>` carries the second time
//! derivative of a point together with its sensitivity to 17 inputs.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(v: f64) -> Self;
    /// Primal value.
    fn re(&self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn recip(self) -> Self;

    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn powi2(self) -> Self {
        self * self
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn re(&self) -> f64 {
        *self
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn recip(self) -> Self {
        1.0 / self
    }
    #[inline]
    fn sin_cos(self) -> (Self, Self) {
        f64::sin_cos(self)
    }
}

/// Dual number with `N` independent tangent directions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<S, const N: usize> {
    pub re: S,
    pub eps: [S; N],
}

impl<S: Scalar, const N: usize> Dual<S, N> {
    pub fn constant(re: S) -> Self {
        Self { re, eps: [S::zero(); N] }
    }

    /// Independent variable seeded in direction `i`.
    pub fn variable(re: S, i: usize) -> Self {
        let mut eps = [S::zero(); N];
        eps[i] = S::cst(1.0);
        Self { re, eps }
    }

    #[inline]
    fn chain(self, f: S, df: S) -> Self {
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e = *e * df;
        }
        Self { re: f, eps }
    }
}

impl<S: Scalar, const N: usize> Add for Dual<S, N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self.re += rhs.re;
        for (a, b) in self.eps.iter_mut().zip(rhs.eps.iter()) {
            *a += *b;
        }
        self
    }
}

impl<S: Scalar, const N: usize> Sub for Dual<S, N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self.re -= rhs.re;
        for (a, b) in self.eps.iter_mut().zip(rhs.eps.iter()) {
            *a -= *b;
        }
        self
    }
}

impl<S: Scalar, const N: usize> Mul for Dual<S, N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut eps = self.eps;
        for (a, b) in eps.iter_mut().zip(rhs.eps.iter()) {
            *a = *a * rhs.re + self.re * *b;
        }
        Self { re: self.re * rhs.re, eps }
    }
}

impl<S: Scalar, const N: usize> Div for Dual<S, N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = rhs.re.recip();
        let re = self.re * inv;
        let mut eps = self.eps;
        for (a, b) in eps.iter_mut().zip(rhs.eps.iter()) {
            *a = (*a - re * *b) * inv;
        }
        Self { re, eps }
    }
}

impl<S: Scalar, const N: usize> Neg for Dual<S, N> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        self.re = -self.re;
        for a in self.eps.iter_mut() {
            *a = -*a;
        }
        self
    }
}

impl<S: Scalar, const N: usize> AddAssign for Dual<S, N> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<S: Scalar, const N: usize> SubAssign for Dual<S, N> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl<S: Scalar, const N: usize> MulAssign for Dual<S, N> {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<S: Scalar, const N: usize> Add<f64> for Dual<S, N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: f64) -> Self {
        self.re = self.re + rhs;
        self
    }
}

impl<S: Scalar, const N: usize> Sub<f64> for Dual<S, N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: f64) -> Self {
        self.re = self.re - rhs;
        self
    }
}

impl<S: Scalar, const N: usize> Mul<f64> for Dual<S, N> {
    type Output = Self;
    #[inline]
    fn mul(mut self, rhs: f64) -> Self {
        self.re = self.re * rhs;
        for a in self.eps.iter_mut() {
            *a = *a * rhs;
        }
        self
    }
}

impl<S: Scalar, const N: usize> Div<f64> for Dual<S, N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        self * (1.0 / rhs)
    }
}

impl<S: Scalar, const N: usize> Scalar for Dual<S, N> {
    fn cst(v: f64) -> Self {
        Self::constant(S::cst(v))
    }
    fn re(&self) -> f64 {
        self.re.re()
    }
    fn sin(self) -> Self {
        let (s, c) = self.re.sin_cos();
        self.chain(s, c)
    }
    fn cos(self) -> Self {
        let (s, c) = self.re.sin_cos();
        self.chain(c, -s)
    }
    fn sin_cos(self) -> (Self, Self) {
        let (s, c) = self.re.sin_cos();
        (self.chain(s, c), self.chain(c, -s))
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    fn sqrt(self) -> Self {
        let r = self.re.sqrt();
        self.chain(r, (r * 2.0).recip())
    }
    fn recip(self) -> Self {
        let inv = self.re.recip();
        self.chain(inv, -(inv * inv))
    }
}

/// Second-order truncated Taylor expansion along a single curve `s ↦ x(s)`:
/// `v = x(0)`, `d = x'(0)`, `dd = x''(0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet2<S> {
    pub v: S,
    pub d: S,
    pub dd: S,
}

impl<S: Scalar> Jet2<S> {
    pub fn new(v: S, d: S, dd: S) -> Self {
        Self { v, d, dd }
    }

    pub fn constant(v: S) -> Self {
        Self { v, d: S::zero(), dd: S::zero() }
    }

    #[inline]
    fn chain(self, f: S, df: S, ddf: S) -> Self {
        Self {
            v: f,
            d: df * self.d,
            dd: df * self.dd + ddf * self.d * self.d,
        }
    }
}

impl<S: Scalar> Add for Jet2<S> {
    type Output = Self;
    #[inline]
    fn add(self, r: Self) -> Self {
        Self { v: self.v + r.v, d: self.d + r.d, dd: self.dd + r.dd }
    }
}

impl<S: Scalar> Sub for Jet2<S> {
    type Output = Self;
    #[inline]
    fn sub(self, r: Self) -> Self {
        Self { v: self.v - r.v, d: self.d - r.d, dd: self.dd - r.dd }
    }
}

impl<S: Scalar> Mul for Jet2<S> {
    type Output = Self;
    #[inline]
    fn mul(self, r: Self) -> Self {
        Self {
            v: self.v * r.v,
            d: self.d * r.v + self.v * r.d,
            dd: self.dd * r.v + self.d * r.d * 2.0 + self.v * r.dd,
        }
    }
}

impl<S: Scalar> Div for Jet2<S> {
    type Output = Self;
    #[inline]
    fn div(self, r: Self) -> Self {
        self * r.recip()
    }
}

impl<S: Scalar> Neg for Jet2<S> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self { v: -self.v, d: -self.d, dd: -self.dd }
    }
}

impl<S: Scalar> AddAssign for Jet2<S> {
    #[inline]
    fn add_assign(&mut self, r: Self) {
        *self = *self + r;
    }
}

impl<S: Scalar> SubAssign for Jet2<S> {
    #[inline]
    fn sub_assign(&mut self, r: Self) {
        *self = *self - r;
    }
}

impl<S: Scalar> MulAssign for Jet2<S> {
    #[inline]
    fn mul_assign(&mut self, r: Self) {
        *self = *self * r;
    }
}

impl<S: Scalar> Add<f64> for Jet2<S> {
    type Output = Self;
    #[inline]
    fn add(mut self, r: f64) -> Self {
        self.v = self.v + r;
        self
    }
}

impl<S: Scalar> Sub<f64> for Jet2<S> {
    type Output = Self;
    #[inline]
    fn sub(mut self, r: f64) -> Self {
        self.v = self.v - r;
        self
    }
}

impl<S: Scalar> Mul<f64> for Jet2<S> {
    type Output = Self;
    #[inline]
    fn mul(self, r: f64) -> Self {
        Self { v: self.v * r, d: self.d * r, dd: self.dd * r }
    }
}

impl<S: Scalar> Div<f64> for Jet2<S> {
    type Output = Self;
    #[inline]
    fn div(self, r: f64) -> Self {
        self * (1.0 / r)
    }
}

impl<S: Scalar> Scalar for Jet2<S> {
    fn cst(v: f64) -> Self {
        Self::constant(S::cst(v))
    }
    fn re(&self) -> f64 {
        self.v.re()
    }
    fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(s, c, -s)
    }
    fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        self.chain(c, -s, -c)
    }
    fn sin_cos(self) -> (Self, Self) {
        let (s, c) = self.v.sin_cos();
        (self.chain(s, c, -s), self.chain(c, -s, -c))
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }
    fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        let inv = r.recip();
        self.chain(r, inv * 0.5, -(inv * inv * inv) * 0.25)
    }
    fn recip(self) -> Self {
        let inv = self.v.recip();
        let inv2 = inv * inv;
        self.chain(inv, -inv2, inv2 * inv * 2.0)
    }
}
