use alloc::format;
#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use super::Dynamics;
use crate::error::{Error, Result};

/// Predator-prey system
/// `x₁' = αx₁ − βx₁x₂`, `x₂' = δx₁x₂ − γx₂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LotkaVolterra {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl LotkaVolterra {
    pub fn new(alpha: f64, beta: f64, gamma: f64, delta: f64) -> Result<Self> {
        if [alpha, beta, gamma, delta].iter().all(|p| p.is_finite()) {
            Ok(Self {
                alpha,
                beta,
                gamma,
                delta,
            })
        } else {
            Err(Error::invalid("Lotka-Volterra parameters must be finite"))
        }
    }

    /// Interior fixed point `(γ/δ, α/β)`.
    pub fn equilibrium(&self) -> [f64; 2] {
        [self.gamma / self.delta, self.alpha / self.beta]
    }
}

impl Dynamics for LotkaVolterra {
    fn dim(&self) -> usize {
        2
    }

    #[inline]
    fn rhs(&self, _t: f64, x: &[f64], dx: &mut [f64]) {
        let (x1, x2) = (x[0], x[1]);
        dx[0] = self.alpha * x1 - self.beta * x1 * x2;
        dx[1] = self.delta * x1 * x2 - self.gamma * x2;
    }

    fn jacobian(&self, _t: f64, x: &[f64]) -> DMatrix<f64> {
        let (x1, x2) = (x[0], x[1]);
        DMatrix::from_row_slice(
            2,
            2,
            &[
                self.alpha - self.beta * x2,
                -self.beta * x1,
                self.delta * x2,
                self.delta * x1 - self.gamma,
            ],
        )
    }

    #[inline]
    fn jvp(&self, _t: f64, x: &[f64], v: &[f64], out: &mut [f64]) {
        let (x1, x2) = (x[0], x[1]);
        out[0] = (self.alpha - self.beta * x2) * v[0] - self.beta * x1 * v[1];
        out[1] = self.delta * x2 * v[0] + (self.delta * x1 - self.gamma) * v[1];
    }

    #[inline]
    fn vjp(&self, _t: f64, x: &[f64], w: &[f64], out: &mut [f64]) {
        let (x1, x2) = (x[0], x[1]);
        out[0] = (self.alpha - self.beta * x2) * w[0] + self.delta * x2 * w[1];
        out[1] = -self.beta * x1 * w[0] + (self.delta * x1 - self.gamma) * w[1];
    }
}

/// Lorenz-96 ring `xᵢ' = xᵢ₋₁(xᵢ₊₁ − xᵢ₋₂) − xᵢ + F` with periodic indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lorenz96 {
    n: usize,
    pub forcing: f64,
}

impl Lorenz96 {
    pub fn new(n: usize, forcing: f64) -> Result<Self> {
        if n <= 3 {
            return Err(Error::invalid(format!("Lorenz-96 needs n > 3, got {n}")));
        }
        if !forcing.is_finite() {
            return Err(Error::invalid("Lorenz-96 forcing must be finite"));
        }
        Ok(Self { n, forcing })
    }

    #[inline]
    fn wrap(&self, i: usize, offset: isize) -> usize {
        let n = self.n as isize;
        ((i as isize + offset).rem_euclid(n)) as usize
    }
}

impl Dynamics for Lorenz96 {
    fn dim(&self) -> usize {
        self.n
    }

    fn rhs(&self, _t: f64, x: &[f64], dx: &mut [f64]) {
        let n = self.n;
        // interior indices without wrap-around arithmetic
        for i in 2..n - 1 {
            dx[i] = x[i - 1] * (x[i + 1] - x[i - 2]) - x[i] + self.forcing;
        }
        for i in [0, 1, n - 1] {
            let (m1, p1, m2) = (self.wrap(i, -1), self.wrap(i, 1), self.wrap(i, -2));
            dx[i] = x[m1] * (x[p1] - x[m2]) - x[i] + self.forcing;
        }
    }

    fn jacobian(&self, _t: f64, x: &[f64]) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let (m1, p1, m2) = (self.wrap(i, -1), self.wrap(i, 1), self.wrap(i, -2));
            j[(i, m1)] += x[p1] - x[m2];
            j[(i, p1)] += x[m1];
            j[(i, m2)] -= x[m1];
            j[(i, i)] -= 1.0;
        }
        j
    }

    fn jvp(&self, _t: f64, x: &[f64], v: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let (m1, p1, m2) = (self.wrap(i, -1), self.wrap(i, 1), self.wrap(i, -2));
            out[i] = (x[p1] - x[m2]) * v[m1] + x[m1] * (v[p1] - v[m2]) - v[i];
        }
    }

    fn vjp(&self, _t: f64, x: &[f64], w: &[f64], out: &mut [f64]) {
        for j in 0..self.n {
            // rows i with i-1 = j, i+1 = j, i-2 = j
            let i_a = self.wrap(j, 1);
            let i_b = self.wrap(j, -1);
            let i_c = self.wrap(j, 2);
            out[j] = (x[self.wrap(i_a, 1)] - x[self.wrap(i_a, -2)]) * w[i_a]
                + x[self.wrap(i_b, -1)] * w[i_b]
                - x[self.wrap(i_c, -1)] * w[i_c]
                - w[j];
        }
    }
}

/// Affine system `x' = A x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() != b.len() {
            return Err(Error::invalid("linear model needs square A and matching b"));
        }
        Ok(Self { a, b })
    }

    pub fn homogeneous(a: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        Self::new(a, DVector::zeros(n))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.b
    }
}

impl Dynamics for LinearModel {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn rhs(&self, _t: f64, x: &[f64], dx: &mut [f64]) {
        for (i, o) in dx.iter_mut().enumerate() {
            *o = self.b[i] + self.a.row(i).iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
        }
    }

    fn jacobian(&self, _t: f64, _x: &[f64]) -> DMatrix<f64> {
        self.a.clone()
    }
}

/// Convenience: evaluate `f(t, x)` into a fresh vector.
pub fn eval_rhs<D: Dynamics + ?Sized>(model: &D, t: f64, x: &[f64]) -> Vec<f64> {
    let mut out = alloc::vec![0.0; model.dim()];
    model.rhs(t, x, &mut out);
    out
}
