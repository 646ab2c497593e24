//! Second-order forward-mode automatic differentiation.
//!
//! The HVAC model is written once, generically over [`Scalar`], and
//! evaluated either on plain `f64` or on [`Jet`] values carrying a dense
//! gradient and Hessian with respect to a chosen set of seed variables.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Arithmetic the model needs from its number type.
pub trait Scalar:
    Clone
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// A constant carrying the same derivative dimension as `self`.
    fn constant_like(&self, value: f64) -> Self;
    fn value(&self) -> f64;
}

impl Scalar for f64 {
    fn constant_like(&self, value: f64) -> Self {
        value
    }
    fn value(&self) -> f64 {
        *self
    }
}

/// Value, gradient and Hessian (dense, row-major, symmetric).
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
}

impl Jet {
    pub fn constant(value: f64, dim: usize) -> Self {
        Self {
            v: value,
            g: vec![0.0; dim],
            h: vec![0.0; dim * dim],
        }
    }

    /// The `index`-th independent variable.
    pub fn variable(value: f64, index: usize, dim: usize) -> Self {
        let mut j = Self::constant(value, dim);
        j.g[index] = 1.0;
        j
    }

    /// Seeds every entry of `values` as an independent variable.
    pub fn seed(values: &[f64]) -> Vec<Jet> {
        let dim = values.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| Jet::variable(*v, i, dim))
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn hess(&self, i: usize, j: usize) -> f64 {
        self.h[i * self.dim() + j]
    }

    /// Applies a scalar function with derivatives `d1`, `d2` at `self.v`.
    fn chain(&self, value: f64, d1: f64, d2: f64) -> Jet {
        let n = self.dim();
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            let gi = self.g[i];
            for j in 0..n {
                h[i * n + j] = d1 * self.h[i * n + j] + d2 * gi * self.g[j];
            }
        }
        Jet {
            v: value,
            g: self.g.iter().map(|g| d1 * g).collect(),
            h,
        }
    }

    pub fn recip(&self) -> Jet {
        let inv = 1.0 / self.v;
        self.chain(inv, -inv * inv, 2.0 * inv * inv * inv)
    }
}

impl Scalar for Jet {
    fn constant_like(&self, value: f64) -> Self {
        Jet::constant(value, self.dim())
    }
    fn value(&self) -> f64 {
        self.v
    }
}

fn dims(a: &Jet, b: &Jet) -> usize {
    debug_assert_eq!(a.dim(), b.dim(), "jets of different dimension");
    a.dim()
}

impl Add for Jet {
    type Output = Jet;
    fn add(mut self, rhs: Jet) -> Jet {
        dims(&self, &rhs);
        self.v += rhs.v;
        self.g.iter_mut().zip(&rhs.g).for_each(|(a, b)| *a += b);
        self.h.iter_mut().zip(&rhs.h).for_each(|(a, b)| *a += b);
        self
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(mut self, rhs: Jet) -> Jet {
        dims(&self, &rhs);
        self.v -= rhs.v;
        self.g.iter_mut().zip(&rhs.g).for_each(|(a, b)| *a -= b);
        self.h.iter_mut().zip(&rhs.h).for_each(|(a, b)| *a -= b);
        self
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        let n = dims(&self, &rhs);
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let k = i * n + j;
                h[k] = self.v * rhs.h[k] + rhs.v * self.h[k] + self.g[i] * rhs.g[j] + rhs.g[i] * self.g[j];
            }
        }
        let g = self
            .g
            .iter()
            .zip(&rhs.g)
            .map(|(a, b)| self.v * b + rhs.v * a)
            .collect();
        Jet {
            v: self.v * rhs.v,
            g,
            h,
        }
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, rhs: Jet) -> Jet {
        self * rhs.recip()
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(mut self) -> Jet {
        self.v = -self.v;
        self.g.iter_mut().for_each(|a| *a = -*a);
        self.h.iter_mut().for_each(|a| *a = -*a);
        self
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    fn add(mut self, rhs: f64) -> Jet {
        self.v += rhs;
        self
    }
}

impl Sub<f64> for Jet {
    type Output = Jet;
    fn sub(mut self, rhs: f64) -> Jet {
        self.v -= rhs;
        self
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(mut self, rhs: f64) -> Jet {
        self.v *= rhs;
        self.g.iter_mut().for_each(|a| *a *= rhs);
        self.h.iter_mut().for_each(|a| *a *= rhs);
        self
    }
}

impl Div<f64> for Jet {
    type Output = Jet;
    fn div(self, rhs: f64) -> Jet {
        self * (1.0 / rhs)
    }
}
