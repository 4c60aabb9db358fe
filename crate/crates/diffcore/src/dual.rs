//! Forward-mode differentiation with dual numbers.
//!
//! Models that want exact Jacobians implement their forward pass once,
//! generically over [`Scalar`]; evaluating with [`Dual`] carries a directional
//! derivative alongside every value.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{DiffError, Result};
use crate::tape::{sigmoid, softplus};
use crate::tensor::Tensor;

/// Numeric type a generic forward pass can run on.
pub trait Scalar:
    Copy
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn constant(v: f64) -> Self;
    /// Primal part.
    fn re(self) -> f64;
    fn scale(self, k: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn relu(self) -> Self;
    fn softplus(self) -> Self;
    fn sqrt(self) -> Self;

    fn square(self) -> Self {
        self * self
    }

    fn zero() -> Self {
        Self::constant(0.0)
    }
}

impl Scalar for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn re(self) -> f64 {
        self
    }
    fn scale(self, k: f64) -> Self {
        self * k
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn relu(self) -> Self {
        self.max(0.0)
    }
    fn softplus(self) -> Self {
        softplus(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

/// `re + eps·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub fn new(re: f64, eps: f64) -> Self {
        Dual { re, eps }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let q = self.re / o.re;
        Dual::new(q, (self.eps - q * o.eps) / o.re)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.eps)
    }
}

impl Scalar for Dual {
    fn constant(v: f64) -> Self {
        Dual::new(v, 0.0)
    }
    fn re(self) -> f64 {
        self.re
    }
    fn scale(self, k: f64) -> Self {
        Dual::new(self.re * k, self.eps * k)
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.eps * e)
    }
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.eps / self.re)
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, self.eps * (1.0 - t * t))
    }
    fn relu(self) -> Self {
        if self.re > 0.0 {
            self
        } else {
            Dual::new(0.0, 0.0)
        }
    }
    fn softplus(self) -> Self {
        Dual::new(softplus(self.re), self.eps * sigmoid(self.re))
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, self.eps * 0.5 / s)
    }
}

/// Directional derivative `J_f(z)·v`, returned together with `f(z)`.
pub fn jvp<F>(f: F, z: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&[Dual]) -> Result<Vec<Dual>>,
{
    if z.len() != v.len() {
        return Err(DiffError::dims("jvp", &[z.len()], &[v.len()]));
    }
    let input: Vec<Dual> = z.iter().zip(v).map(|(&a, &b)| Dual::new(a, b)).collect();
    let out = f(&input)?;
    Ok(out.iter().map(|d| (d.re, d.eps)).unzip())
}

/// Full `M×d` Jacobian, one forward pass per input coordinate.
pub fn jacobian<F>(f: F, z: &[f64]) -> Result<Tensor>
where
    F: Fn(&[Dual]) -> Result<Vec<Dual>>,
{
    let d = z.len();
    let mut columns = Vec::with_capacity(d);
    let mut basis = vec![0.0; d];
    for i in 0..d {
        basis[i] = 1.0;
        let (_, col) = jvp(&f, z, &basis)?;
        basis[i] = 0.0;
        columns.push(col);
    }
    let m = columns.first().map_or(0, Vec::len);
    let mut data = vec![0.0; m * d];
    for (j, col) in columns.iter().enumerate() {
        if col.len() != m {
            return Err(DiffError::dims("jacobian", &[m], &[col.len()]));
        }
        for (i, &c) in col.iter().enumerate() {
            data[i * d + j] = c;
        }
    }
    Tensor::new(vec![m, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elementwise_square_jvp() {
        let f = |z: &[Dual]| Ok(z.iter().map(|&x| x * x).collect());
        let (y, t) = jvp(f, &[1.0, 2.0], &[1.0, 0.0]).unwrap();
        assert_eq!(y, vec![1.0, 4.0]);
        assert_eq!(t, vec![2.0, 0.0]);
    }

    #[test]
    fn hand_jacobian() {
        // f(z) = (z1², z1 z2) at (1,2) → [[2,0],[2,1]]
        let f = |z: &[Dual]| Ok(vec![z[0] * z[0], z[0] * z[1]]);
        let j = jacobian(f, &[1.0, 2.0]).unwrap();
        assert_eq!(j.data(), &[2.0, 0.0, 2.0, 1.0]);
    }

    #[test]
    fn jvp_shape_mismatch() {
        let f = |z: &[Dual]| Ok(z.to_vec());
        assert!(jvp(f, &[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn dual_division_and_sqrt() {
        let x = Dual::new(4.0, 1.0);
        let y = Scalar::sqrt(x);
        assert_eq!(y, Dual::new(2.0, 0.25));
        let q = Dual::constant(1.0) / x;
        assert!((q.eps + 1.0 / 16.0).abs() < 1e-15);
    }
}
