//! Small dense symmetric solves for the scale-factor normal equations.

use crate::error::{Error, Result};

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.n + c] = v;
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.n {
            self.data[i * self.n + i] += v;
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| {
                self.data[r * self.n..(r + 1) * self.n]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L L^T`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: SymMatrix,
}

impl Cholesky {
    /// Factorizes a symmetric positive definite matrix. Pivots below
    /// `n * 4 eps * max(diag)` are reported as [`Error::Singular`].
    pub fn new(a: &SymMatrix) -> Result<Self> {
        let n = a.n;
        let max_diag = (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max);
        let tol = (n.max(1) as f64) * 4.0 * f64::EPSILON * max_diag;
        let mut l = SymMatrix::zeros(n);
        for j in 0..n {
            let mut d = a.get(j, j);
            for k in 0..j {
                d -= l.get(j, k) * l.get(j, k);
            }
            if !(d > tol) {
                return Err(Error::Singular { row: j, pivot: d });
            }
            let d = d.sqrt();
            l.set(j, j, d);
            for i in j + 1..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / d);
            }
        }
        Ok(Self { l })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.n;
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] -= self.l.get(i, k) * y[k];
            }
            y[i] /= self.l.get(i, i);
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                y[i] -= self.l.get(k, i) * y[k];
            }
            y[i] /= self.l.get(i, i);
        }
        y
    }
}
