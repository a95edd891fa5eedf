//! Dense linear-algebra helpers shared across modules.
//!
//! The matrix exponential uses scaling and squaring with the degree-3 to
//! degree-13 diagonal Padé approximants and the backward-error bounds of
//! Higham (2005).

#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub type Chol = Cholesky<f64, Dyn>;

/// Cholesky factor of an SPD matrix; the matrix is symmetrized first.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Chol> {
    if !m.is_square() {
        return Err(Error::NotPositiveDefinite(format!("{what}: not square")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite(format!("{what}: non-finite entry")));
    }
    Cholesky::new(symmetrize(m)).ok_or_else(|| Error::NotPositiveDefinite(what.into()))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// log det of the matrix factored by `chol`.
pub fn log_det(chol: &Chol) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// ‖v‖² in the metric M⁻¹, with M = L Lᵀ given by `chol`.
pub fn inv_quad_form(chol: &Chol, v: &DVector<f64>) -> f64 {
    let w = chol
        .l_dirty()
        .solve_lower_triangular(v)
        .expect("cholesky factor has a nonzero diagonal");
    w.norm_squared()
}

/// Log density of N(mean, M) at x, with M = L Lᵀ.
pub fn gaussian_log_pdf(x: &DVector<f64>, mean: &DVector<f64>, chol: &Chol) -> f64 {
    let d = x.len() as f64;
    let q = inv_quad_form(chol, &(x - mean));
    -0.5 * (q + log_det(chol) + d * (2.0 * core::f64::consts::PI).ln())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Add δI with δ = max(0, floor − λ_min) so the result is SPD.
pub fn regularize_spd(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let mut out = symmetrize(m);
    let delta = (floor - min_eigenvalue(&out)).max(0.0);
    if delta > 0.0 {
        for i in 0..out.nrows() {
            out[(i, i)] += delta;
        }
    }
    out
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

// Largest 1-norm for which each approximant meets unit roundoff.
const THETA3: f64 = 1.495585217958292e-2;
const THETA5: f64 = 2.539_398_330_063_23e-1;
const THETA7: f64 = 9.504178996162932e-1;
const THETA9: f64 = 2.097847961257068e0;
const THETA13: f64 = 5.371920351148152e0;

/// Matrix exponential by scaling and squaring with diagonal Padé approximants.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm of a non-square matrix");
    let n = a.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let ident = DMatrix::<f64>::identity(n, n);
    let norm = one_norm(a);
    if !norm.is_finite() {
        return DMatrix::from_element(n, n, f64::NAN);
    }

    let a2 = a * a;
    let (u, v, squarings) = if norm <= THETA3 {
        let (u, v) = pade_low(a, &a2, &ident, &PADE3);
        (u, v, 0)
    } else if norm <= THETA5 {
        let (u, v) = pade_low(a, &a2, &ident, &PADE5);
        (u, v, 0)
    } else if norm <= THETA7 {
        let (u, v) = pade_low(a, &a2, &ident, &PADE7);
        (u, v, 0)
    } else if norm <= THETA9 {
        let (u, v) = pade_low(a, &a2, &ident, &PADE9);
        (u, v, 0)
    } else {
        let s = (norm / THETA13).log2().ceil().max(0.0) as i32;
        let scale = 2f64.powi(-s);
        let a1 = a * scale;
        let a2 = &a2 * (scale * scale);
        let (u, v) = pade13(&a1, &a2, &ident);
        (u, v, s)
    };

    let p = &v + &u;
    let q = &v - &u;
    let mut r = q
        .lu()
        .solve(&p)
        .unwrap_or_else(|| DMatrix::from_element(n, n, f64::NAN));
    for _ in 0..squarings {
        r = &r * &r;
    }
    r
}

fn pade_low(
    a: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    ident: &DMatrix<f64>,
    b: &[f64],
) -> (DMatrix<f64>, DMatrix<f64>) {
    // U = A Σ b_{2k+1} A^{2k},  V = Σ b_{2k} A^{2k}
    let n = a.nrows();
    let mut odd = DMatrix::<f64>::zeros(n, n);
    let mut even = DMatrix::<f64>::zeros(n, n);
    let mut power = ident.clone();
    let mut k = 0;
    while 2 * k < b.len() {
        even += &power * b[2 * k];
        if 2 * k + 1 < b.len() {
            odd += &power * b[2 * k + 1];
        }
        power = &power * a2;
        k += 1;
    }
    (a * odd, even)
}

fn pade13(
    a: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    ident: &DMatrix<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let b = &PADE13;
    let a4 = a2 * a2;
    let a6 = &a4 * a2;
    let inner_u = &a6 * (&a6 * b[13] + &a4 * b[11] + a2 * b[9]);
    let u = a * (inner_u + &a6 * b[7] + &a4 * b[5] + a2 * b[3] + ident * b[1]);
    let inner_v = &a6 * (&a6 * b[12] + &a4 * b[10] + a2 * b[8]);
    let v = inner_v + &a6 * b[6] + &a4 * b[4] + a2 * b[2] + ident * b[0];
    (u, v)
}
