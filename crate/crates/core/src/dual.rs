//! Minimal forward-mode dual numbers with a fixed number of tangent slots.
//!
//! Used for the closed-form choice probabilities, where the handful of inputs
//! (three utilities and one nest scale) makes forward mode exact and cheap.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn constant(v: f64) -> Self {
        Self { v, d: [0.0; N] }
    }

    pub fn var(v: f64, slot: usize) -> Self {
        let mut d = [0.0; N];
        d[slot] = 1.0;
        Self { v, d }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        let mut d = self.d;
        for x in d.iter_mut() {
            *x *= dv;
        }
        Self { v, d }
    }

    pub fn ln(self) -> Self {
        self.chain(self.v.ln(), 1.0 / self.v)
    }

    /// `-expm1(x)`, i.e. `1 - e^x`, accurate near zero.
    pub fn one_minus_exp(self) -> Self {
        self.chain(-self.v.exp_m1(), -self.v.exp())
    }

    /// `ln σ(x)` without overflow for large `|x|`.
    pub fn log_sigmoid(self) -> Self {
        self.chain(log_sigmoid(self.v), sigmoid(-self.v))
    }

    /// Log-sum-exp of a small set of duals.
    pub fn log_sum_exp(xs: &[Self]) -> Self {
        let m = xs.iter().map(|x| x.v).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = xs.iter().map(|x| (x.v - m).exp()).sum();
        let lse = m + s.ln();
        let mut d = [0.0; N];
        for x in xs {
            let w = (x.v - lse).exp();
            for (acc, dx) in d.iter_mut().zip(x.d.iter()) {
                *acc += w * dx;
            }
        }
        Self { v: lse, d }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        self.v += rhs.v;
        for (a, b) in self.d.iter_mut().zip(rhs.d.iter()) {
            *a += b;
        }
        self
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    fn sub(mut self, rhs: Self) -> Self {
        self.v -= rhs.v;
        for (a, b) in self.d.iter_mut().zip(rhs.d.iter()) {
            *a -= b;
        }
        self
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut d = [0.0; N];
        for (k, x) in d.iter_mut().enumerate() {
            *x = self.d[k] * rhs.v + self.v * rhs.d[k];
        }
        Self { v: self.v * rhs.v, d }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.v;
        let v = self.v * inv;
        let mut d = [0.0; N];
        for (k, x) in d.iter_mut().enumerate() {
            *x = (self.d[k] - v * rhs.d[k]) * inv;
        }
        Self { v, d }
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self.chain(self.v * rhs, rhs)
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    fn neg(self) -> Self {
        self.chain(-self.v, -1.0)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}
