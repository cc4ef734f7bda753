//! Forward-mode dual numbers.
//!
//! `Dual<T, N>` carries a value and `N` directional derivatives. The inner
//! scalar is itself generic, so `Dual<Dual<f64, N>, N>` yields second
//! derivatives. Jacobians with more inputs than `N` are assembled by seeding
//! `N` directions at a time ([`jacobian`]); Hessian blocks likewise
//! ([`hessian`]).

use std::cmp::Ordering;
use std::fmt;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, Sub, SubAssign};

use num_traits::{Float, FloatConst, Num, NumCast, One, ToPrimitive, Zero};

use crate::Real;

/// Number of derivative directions carried per pass.
pub const CHUNK: usize = 8;

#[derive(Clone, Copy)]
pub struct Dual<T, const N: usize> {
    pub re: T,
    pub eps: [T; N],
}

pub type Dual64 = Dual<f64, CHUNK>;
pub type HyperDual64 = Dual<Dual<f64, CHUNK>, CHUNK>;

impl<T: Real, const N: usize> Dual<T, N> {
    pub fn constant(re: T) -> Self {
        Self { re, eps: [T::zero(); N] }
    }

    pub fn variable(re: T, direction: usize) -> Self {
        let mut eps = [T::zero(); N];
        eps[direction] = T::one();
        Self { re, eps }
    }

    #[inline]
    fn chain(self, f: T, df: T) -> Self {
        let mut eps = self.eps;
        for e in eps.iter_mut() {
            *e = *e * df;
        }
        Self { re: f, eps }
    }
}

impl<T: fmt::Debug, const N: usize> fmt::Debug for Dual<T, N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Dual({:?}, {:?})", self.re, self.eps)
    }
}

impl<T: Real, const N: usize> Default for Dual<T, N> {
    fn default() -> Self {
        Self::constant(T::zero())
    }
}

impl<T: Real, const N: usize> PartialEq for Dual<T, N> {
    fn eq(&self, other: &Self) -> bool {
        self.re == other.re
    }
}

impl<T: Real, const N: usize> PartialOrd for Dual<T, N> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.re.partial_cmp(&other.re)
    }
}

impl<T: Real, const N: usize> Add for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self.re = self.re + rhs.re;
        for (a, b) in self.eps.iter_mut().zip(rhs.eps) {
            *a = *a + b;
        }
        self
    }
}

impl<T: Real, const N: usize> Sub for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self.re = self.re - rhs.re;
        for (a, b) in self.eps.iter_mut().zip(rhs.eps) {
            *a = *a - b;
        }
        self
    }
}

impl<T: Real, const N: usize> Mul for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut eps = self.eps;
        for (e, b) in eps.iter_mut().zip(rhs.eps) {
            *e = *e * rhs.re + self.re * b;
        }
        Self { re: self.re * rhs.re, eps }
    }
}

impl<T: Real, const N: usize> Div for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = T::one() / rhs.re;
        let re = self.re * inv;
        let mut eps = self.eps;
        for (e, b) in eps.iter_mut().zip(rhs.eps) {
            *e = (*e - re * b) * inv;
        }
        Self { re, eps }
    }
}

impl<T: Real, const N: usize> Rem for Dual<T, N> {
    type Output = Self;
    fn rem(self, rhs: Self) -> Self {
        // x mod y = x - y * trunc(x / y); the truncated quotient is locally constant.
        let q = (self.re / rhs.re).trunc();
        self - rhs * Self::constant(q)
    }
}

impl<T: Real, const N: usize> Neg for Dual<T, N> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        self.re = -self.re;
        for e in self.eps.iter_mut() {
            *e = -*e;
        }
        self
    }
}

macro_rules! assign_ops {
    ($($tr:ident $m:ident $op:tt),*) => {$(
        impl<T: Real, const N: usize> $tr for Dual<T, N> {
            #[inline]
            fn $m(&mut self, rhs: Self) {
                *self = *self $op rhs;
            }
        }
    )*};
}
assign_ops!(AddAssign add_assign +, SubAssign sub_assign -, MulAssign mul_assign *, DivAssign div_assign /);

impl<T: Real, const N: usize> Zero for Dual<T, N> {
    fn zero() -> Self {
        Self::constant(T::zero())
    }
    fn is_zero(&self) -> bool {
        self.re.is_zero()
    }
}

impl<T: Real, const N: usize> One for Dual<T, N> {
    fn one() -> Self {
        Self::constant(T::one())
    }
}

impl<T: Real, const N: usize> Num for Dual<T, N> {
    type FromStrRadixErr = T::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        T::from_str_radix(s, radix).map(Self::constant)
    }
}

impl<T: Real, const N: usize> ToPrimitive for Dual<T, N> {
    fn to_i64(&self) -> Option<i64> {
        self.re.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.re.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        self.re.to_f64()
    }
}

impl<T: Real, const N: usize> NumCast for Dual<T, N> {
    fn from<P: ToPrimitive>(n: P) -> Option<Self> {
        <T as NumCast>::from(n).map(Self::constant)
    }
}

macro_rules! consts {
    ($($name:ident),*) => {$(
        fn $name() -> Self {
            Self::constant(T::$name())
        }
    )*};
}

impl<T: Real, const N: usize> FloatConst for Dual<T, N> {
    consts!(
        E, FRAC_1_PI, FRAC_1_SQRT_2, FRAC_2_PI, FRAC_2_SQRT_PI, FRAC_PI_2, FRAC_PI_3, FRAC_PI_4,
        FRAC_PI_6, FRAC_PI_8, LN_10, LN_2, LOG10_E, LOG2_E, PI, SQRT_2
    );
}

impl<T: Real, const N: usize> Float for Dual<T, N> {
    consts!(nan, infinity, neg_infinity, neg_zero, min_value, min_positive_value, max_value, epsilon);

    fn is_nan(self) -> bool {
        self.re.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.re.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.re.is_finite()
    }
    fn is_normal(self) -> bool {
        self.re.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.re.classify()
    }
    fn floor(self) -> Self {
        Self::constant(self.re.floor())
    }
    fn ceil(self) -> Self {
        Self::constant(self.re.ceil())
    }
    fn round(self) -> Self {
        Self::constant(self.re.round())
    }
    fn trunc(self) -> Self {
        Self::constant(self.re.trunc())
    }
    fn fract(self) -> Self {
        self.chain(self.re.fract(), T::one())
    }
    fn abs(self) -> Self {
        if self.re < T::zero() {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Self {
        Self::constant(self.re.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.re.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.re.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        let r = self.re.recip();
        self.chain(r, -r * r)
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Self::one();
        }
        let p = self.re.powi(n - 1);
        self.chain(p * self.re, T::lit(n as f64) * p)
    }
    fn powf(self, n: Self) -> Self {
        if n.eps.iter().all(|e| e.is_zero()) {
            let p = self.re.powf(n.re - T::one());
            return self.chain(p * self.re, n.re * p);
        }
        (n * self.ln()).exp()
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.chain(s, T::lit(0.5) / s)
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    fn exp2(self) -> Self {
        let e = self.re.exp2();
        self.chain(e, e * T::LN_2())
    }
    fn ln(self) -> Self {
        self.chain(self.re.ln(), self.re.recip())
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.chain(self.re.log2(), (self.re * T::LN_2()).recip())
    }
    fn log10(self) -> Self {
        self.chain(self.re.log10(), (self.re * T::LN_10()).recip())
    }
    fn max(self, other: Self) -> Self {
        if other.re > self.re {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if other.re < self.re {
            other
        } else {
            self
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self.re > other.re {
            self - other
        } else {
            Self::zero()
        }
    }
    fn cbrt(self) -> Self {
        let c = self.re.cbrt();
        self.chain(c, (T::lit(3.0) * c * c).recip())
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }
    fn sin(self) -> Self {
        let (s, c) = self.re.sin_cos();
        self.chain(s, c)
    }
    fn cos(self) -> Self {
        let (s, c) = self.re.sin_cos();
        self.chain(c, -s)
    }
    fn tan(self) -> Self {
        let t = self.re.tan();
        self.chain(t, T::one() + t * t)
    }
    fn asin(self) -> Self {
        self.chain(self.re.asin(), (T::one() - self.re * self.re).sqrt().recip())
    }
    fn acos(self) -> Self {
        self.chain(self.re.acos(), -(T::one() - self.re * self.re).sqrt().recip())
    }
    fn atan(self) -> Self {
        self.chain(self.re.atan(), (T::one() + self.re * self.re).recip())
    }
    fn atan2(self, other: Self) -> Self {
        // d atan2(y, x) = (x dy - y dx) / (x^2 + y^2)
        let (y, x) = (self, other);
        let r2 = (y.re * y.re + x.re * x.re).recip();
        let mut eps = y.eps;
        for (e, dx) in eps.iter_mut().zip(x.eps) {
            *e = (x.re * *e - y.re * dx) * r2;
        }
        Self { re: y.re.atan2(x.re), eps }
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        self.chain(self.re.exp_m1(), self.re.exp())
    }
    fn ln_1p(self) -> Self {
        self.chain(self.re.ln_1p(), (T::one() + self.re).recip())
    }
    fn sinh(self) -> Self {
        self.chain(self.re.sinh(), self.re.cosh())
    }
    fn cosh(self) -> Self {
        self.chain(self.re.cosh(), self.re.sinh())
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        self.chain(t, T::one() - t * t)
    }
    fn asinh(self) -> Self {
        self.chain(self.re.asinh(), (self.re * self.re + T::one()).sqrt().recip())
    }
    fn acosh(self) -> Self {
        self.chain(self.re.acosh(), (self.re * self.re - T::one()).sqrt().recip())
    }
    fn atanh(self) -> Self {
        self.chain(self.re.atanh(), (T::one() - self.re * self.re).recip())
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.re.integer_decode()
    }
}

impl<T: Real, const N: usize> Real for Dual<T, N> {}

/// Value and dense row-major Jacobian (`m × n`) of `f` at `x`.
pub fn jacobian<F>(f: F, x: &[f64]) -> (Vec<f64>, Vec<f64>)
where
    F: Fn(&[Dual64]) -> Vec<Dual64>,
{
    let n = x.len();
    let mut value = Vec::new();
    let mut jac = Vec::new();
    let mut args: Vec<Dual64> = x.iter().map(|&v| Dual::constant(v)).collect();
    for start in (0..n.max(1)).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        for (i, a) in args.iter_mut().enumerate() {
            *a = if (start..end).contains(&i) {
                Dual::variable(x[i], i - start)
            } else {
                Dual::constant(x[i])
            };
        }
        let out = f(&args);
        if start == 0 {
            value = out.iter().map(|o| o.re).collect();
            jac = vec![0.0; out.len() * n];
        }
        for (r, o) in out.iter().enumerate() {
            for c in start..end {
                jac[r * n + c] = o.eps[c - start];
            }
        }
    }
    (value, jac)
}

/// Value, gradient and dense row-major Hessian (`n × n`) of scalar `f` at `x`.
pub fn hessian<F>(f: F, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>)
where
    F: Fn(&[HyperDual64]) -> HyperDual64,
{
    let n = x.len();
    let mut value = 0.0;
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n * n];
    let blocks: Vec<usize> = (0..n.max(1)).step_by(CHUNK).collect();
    for (bi, &si) in blocks.iter().enumerate() {
        for &sj in &blocks[bi..] {
            let args: Vec<HyperDual64> = x
                .iter()
                .enumerate()
                .map(|(k, &v)| {
                    let mut re = Dual::constant(v);
                    if (sj..sj + CHUNK).contains(&k) {
                        re = Dual::variable(v, k - sj);
                    }
                    let mut h = Dual::constant(re);
                    if (si..si + CHUNK).contains(&k) {
                        h.eps[k - si] = Dual::constant(1.0);
                    }
                    h
                })
                .collect();
            let out = f(&args);
            value = out.re.re;
            for i in si..(si + CHUNK).min(n) {
                grad[i] = out.eps[i - si].re;
                for j in sj..(sj + CHUNK).min(n) {
                    let h = out.eps[i - si].eps[j - sj];
                    hess[i * n + j] = h;
                    hess[j * n + i] = h;
                }
            }
        }
    }
    (value, grad, hess)
}
