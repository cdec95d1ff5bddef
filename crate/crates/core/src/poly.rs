//! Dense real polynomials, coefficients stored highest power first.

use std::fmt;
use std::ops::{Add, Mul, Neg};

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Poly(Vec<f64>);

impl Poly {
    /// Coefficients in descending powers. An empty slice is the zero polynomial.
    pub fn new(coeffs: impl Into<Vec<f64>>) -> Self {
        let c: Vec<f64> = coeffs.into();
        if c.is_empty() {
            Poly(vec![0.0])
        } else {
            Poly(c)
        }
    }

    pub fn constant(c: f64) -> Self {
        Poly(vec![c])
    }

    /// `p`
    pub fn identity() -> Self {
        Poly(vec![1.0, 0.0])
    }

    /// Build from ascending coefficients `c0 + c1 p + ...`.
    pub fn from_ascending(mut coeffs: Vec<f64>) -> Self {
        coeffs.reverse();
        Poly::new(coeffs)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.0
    }

    pub fn ascending(&self) -> Vec<f64> {
        self.0.iter().rev().copied().collect()
    }

    /// Nominal degree (length minus one, leading zeros included).
    pub fn degree(&self) -> usize {
        self.0.len() - 1
    }

    pub fn lead(&self) -> f64 {
        self.0[0]
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&c| c == 0.0)
    }

    /// Drops leading coefficients with `|c| <= tol * max|c|`. Returns the zero
    /// polynomial if every coefficient is negligible or zero.
    pub fn trimmed(&self, tol: f64) -> Poly {
        let scale = self.0.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        if scale == 0.0 {
            return Poly::constant(0.0);
        }
        match self.0.iter().position(|c| c.abs() > tol * scale) {
            Some(i) => Poly(self.0[i..].to_vec()),
            None => Poly::constant(0.0),
        }
    }

    pub fn scale(&self, k: f64) -> Poly {
        Poly(self.0.iter().map(|c| c * k).collect())
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut out = vec![0.0; self.0.len() + other.0.len() - 1];
        for (i, a) in self.0.iter().enumerate() {
            for (j, b) in other.0.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Poly(out)
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let n = self.0.len().max(other.0.len());
        let pad = |p: &Poly| -> Vec<f64> {
            let mut v = vec![0.0; n - p.0.len()];
            v.extend_from_slice(&p.0);
            v
        };
        let (a, b) = (pad(self), pad(other));
        Poly(a.iter().zip(&b).map(|(x, y)| x + y).collect())
    }

    /// `(mu p + 1)^k`
    pub fn binomial(mu: f64, k: usize) -> Poly {
        let factor = Poly(vec![mu, 1.0]);
        (0..k).fold(Poly::constant(1.0), |acc, _| acc.mul(&factor))
    }

    pub fn eval(&self, s: Complex<f64>) -> Complex<f64> {
        self.0.iter().fold(Complex::new(0.0, 0.0), |acc, &c| acc * s + c)
    }

    pub fn eval_real(&self, s: f64) -> f64 {
        self.0.iter().fold(0.0, |acc, &c| acc * s + c)
    }
}

impl Add for &Poly {
    type Output = Poly;
    fn add(self, rhs: &Poly) -> Poly {
        Poly::add(self, rhs)
    }
}

impl Mul for &Poly {
    type Output = Poly;
    fn mul(self, rhs: &Poly) -> Poly {
        Poly::mul(self, rhs)
    }
}

impl Neg for &Poly {
    type Output = Poly;
    fn neg(self) -> Poly {
        self.scale(-1.0)
    }
}

impl fmt::Display for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.degree();
        let mut first = true;
        for (i, &c) in self.0.iter().enumerate() {
            if c == 0.0 && n > 0 {
                continue;
            }
            let pow = n - i;
            if !first {
                write!(f, " {} ", if c < 0.0 { '-' } else { '+' })?;
            } else if c < 0.0 {
                write!(f, "-")?;
            }
            let a = c.abs();
            match pow {
                0 => write!(f, "{a}")?,
                1 => write!(f, "{a} p")?,
                _ => write!(f, "{a} p^{pow}")?,
            }
            first = false;
        }
        if first {
            write!(f, "0")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomial_square() {
        let p = Poly::binomial(0.01, 2);
        let want = [0.0001, 0.02, 1.0];
        for (a, b) in p.coeffs().iter().zip(want) {
            assert!((a - b).abs() < 1e-18);
        }
        assert_eq!(Poly::binomial(0.5, 0), Poly::constant(1.0));
    }

    #[test]
    fn filter_denominator() {
        // p (0.01 p + 1)^2 + 0.001, expanded by hand
        let d = &(&Poly::identity() * &Poly::binomial(0.01, 2)) + &Poly::constant(0.001);
        let want = [0.0001, 0.02, 1.0, 0.001];
        assert_eq!(d.degree(), 3);
        for (a, b) in d.coeffs().iter().zip(want) {
            assert!((a - b).abs() < 1e-18);
        }
    }

    #[test]
    fn cubic_root_at_minus_one() {
        let q = Poly::new(vec![1.0, 3.0, 3.0, 1.0]);
        assert_eq!(q.eval(Complex::new(-1.0, 0.0)), Complex::new(0.0, 0.0));
        assert_eq!(q.eval_real(1.0), 8.0);
        let z = q.eval(Complex::new(0.0, 1.0));
        // (i + 1)^3 = -2 + 2i
        assert!((z - Complex::new(-2.0, 2.0)).norm() < 1e-15);
    }

    #[test]
    fn trimming() {
        let p = Poly::new(vec![1e-14, 0.0, 2.0, 1.0]);
        assert_eq!(p.trimmed(1e-10), Poly::new(vec![2.0, 1.0]));
        assert!(Poly::new(vec![0.0, 0.0]).trimmed(1e-10).is_zero());
    }

    #[test]
    fn add_pads_shorter() {
        let a = Poly::new(vec![1.0, 0.0, -1.0]);
        let b = Poly::new(vec![2.0, 3.0]);
        assert_eq!(&a + &b, Poly::new(vec![1.0, 2.0, 2.0]));
        assert_eq!(Poly::from_ascending(vec![3.0, 2.0, 1.0]), Poly::new(vec![1.0, 2.0, 3.0]));
    }

    #[test]
    fn display() {
        assert_eq!(Poly::new(vec![1.0, -3.0, 0.0, 2.0]).to_string(), "1 p^3 - 3 p^2 + 2");
    }
}
