//! Scalar abstraction over `f64` and forward-mode dual numbers.
//!
//! Every layer's forward and backward pass is written once, generic over
//! [`Scalar`]. Run with `f64` for ordinary training; run with [`Dual`] and a
//! tangent seeded on a parameter subset to get exact Hessian-vector products
//! (the dual part of the gradient is H·v), which is what second-order
//! meta-updates need.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Debug
    + PartialEq
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    /// Real (value) part; drops any tangent.
    fn re(self) -> f64;
    /// Multiplication by a constant (no tangent of its own).
    fn scale(self, c: f64) -> Self;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn recip(self) -> Self;
    fn abs(self) -> Self;
    /// max(self, 0), branching on the real part.
    fn relu(self) -> Self;
    fn sigmoid(self) -> Self;
    /// Larger of the two by real part (tangent follows the winner).
    fn max_re(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// Matrix product where both operands carry tangents.
    fn matmul(a: ArrayView2<Self>, b: ArrayView2<Self>) -> Array2<Self>;
    /// Matrix product against a constant (tangent-free) right operand.
    fn matmul_const(a: ArrayView2<Self>, b: ArrayView2<f64>) -> Array2<Self>;
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn re(self) -> f64 {
        self
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        self * c
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn recip(self) -> Self {
        1.0 / self
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    #[inline]
    fn sigmoid(self) -> Self {
        1.0 / (1.0 + (-self).exp())
    }
    #[inline]
    fn max_re(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    fn matmul(a: ArrayView2<Self>, b: ArrayView2<Self>) -> Array2<Self> {
        a.dot(&b)
    }

    fn matmul_const(a: ArrayView2<Self>, b: ArrayView2<f64>) -> Array2<Self> {
        a.dot(&b)
    }
}

/// Forward-mode dual number: value `re` plus tangent `dt`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub dt: f64,
}

impl Dual {
    #[inline]
    pub fn new(re: f64, dt: f64) -> Self {
        Dual { re, dt }
    }
    #[inline]
    pub fn constant(re: f64) -> Self {
        Dual { re, dt: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.dt + o.dt)
    }
}
impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.dt - o.dt)
    }
}
impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.dt + self.dt * o.re)
    }
}
impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.re;
        Dual::new(self.re * inv, (self.dt - self.re * inv * o.dt) * inv)
    }
}
impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.dt)
    }
}
impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.dt += o.dt;
    }
}
impl SubAssign for Dual {
    #[inline]
    fn sub_assign(&mut self, o: Dual) {
        self.re -= o.re;
        self.dt -= o.dt;
    }
}
impl MulAssign for Dual {
    #[inline]
    fn mul_assign(&mut self, o: Dual) {
        *self = *self * o;
    }
}

impl Scalar for Dual {
    const ZERO: Self = Dual { re: 0.0, dt: 0.0 };
    const ONE: Self = Dual { re: 1.0, dt: 0.0 };

    #[inline]
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    #[inline]
    fn re(self) -> f64 {
        self.re
    }
    #[inline]
    fn scale(self, c: f64) -> Self {
        Dual::new(self.re * c, self.dt * c)
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.dt * e)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.dt / self.re)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, self.dt / (2.0 * s))
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, self.dt * (1.0 - t * t))
    }
    #[inline]
    fn recip(self) -> Self {
        let inv = 1.0 / self.re;
        Dual::new(inv, -self.dt * inv * inv)
    }
    #[inline]
    fn abs(self) -> Self {
        if self.re >= 0.0 {
            self
        } else {
            -self
        }
    }
    #[inline]
    fn relu(self) -> Self {
        if self.re > 0.0 {
            self
        } else {
            Dual::ZERO
        }
    }
    #[inline]
    fn sigmoid(self) -> Self {
        let s = 1.0 / (1.0 + (-self.re).exp());
        Dual::new(s, self.dt * s * (1.0 - s))
    }
    #[inline]
    fn max_re(self, other: Self) -> Self {
        if self.re >= other.re {
            self
        } else {
            other
        }
    }
    #[inline]
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.dt.is_finite()
    }

    /// (A·B).re = A.re·B.re; (A·B).dt = A.re·B.dt + A.dt·B.re.
    /// Three real GEMMs keep the fast f64 kernel in play.
    fn matmul(a: ArrayView2<Self>, b: ArrayView2<Self>) -> Array2<Self> {
        let a_re = a.mapv(|x| x.re);
        let a_dt = a.mapv(|x| x.dt);
        let b_re = b.mapv(|x| x.re);
        let b_dt = b.mapv(|x| x.dt);
        let c_re = a_re.dot(&b_re);
        let mut c_dt = a_re.dot(&b_dt);
        c_dt += &a_dt.dot(&b_re);
        let mut out = Array2::from_elem(c_re.raw_dim(), Dual::ZERO);
        Zip::from(&mut out).and(&c_re).and(&c_dt).for_each(|o, &re, &dt| {
            *o = Dual::new(re, dt);
        });
        out
    }

    /// Constant right operand: its tangent is identically zero, so only two
    /// real GEMMs are needed.
    fn matmul_const(a: ArrayView2<Self>, b: ArrayView2<f64>) -> Array2<Self> {
        let a_re = a.mapv(|x| x.re);
        let a_dt = a.mapv(|x| x.dt);
        let c_re = a_re.dot(&b);
        let c_dt = a_dt.dot(&b);
        let mut out = Array2::from_elem(c_re.raw_dim(), Dual::ZERO);
        Zip::from(&mut out).and(&c_re).and(&c_dt).for_each(|o, &re, &dt| {
            *o = Dual::new(re, dt);
        });
        out
    }
}

/// Lifts a constant f64 matrix into any scalar type (zero tangent).
pub fn lift<S: Scalar>(a: &Array2<f64>) -> Array2<S> {
    a.mapv(S::from_f64)
}

/// Lifts a constant f64 vector into any scalar type (zero tangent).
pub fn lift1<S: Scalar>(a: &Array1<f64>) -> Array1<S> {
    a.mapv(S::from_f64)
}
