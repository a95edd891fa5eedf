//! Gaussian approximation of the output process and the Rice integrand.
//!
//! The dynamics are linearized once at `(t = 0, x̄₀)`, giving
//! `x' ≈ A x + b`. For a Gaussian initial state the output `cᵀx(t)` and its
//! slope `cᵀx'(t)` are then jointly Gaussian at every `t`, and
//! `y·φ_t(u, y)` can be evaluated in closed form.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynamics::Dynamics;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, Chol};

/// Multivariate normal `N(mean, cov)` with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianDensity {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Chol,
    log_norm: f64,
}

impl PartialEq for GaussianDensity {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.cov == other.cov
    }
}

impl GaussianDensity {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim(mean.len(), cov.nrows())?;
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("Gaussian mean must be finite"));
        }
        let asym = (&cov - cov.transpose()).amax();
        if asym > 1e-12 * cov.amax().max(1.0) {
            return Err(Error::NotPositiveDefinite("covariance is not symmetric".into()));
        }
        let chol = linalg::cholesky(&cov, "covariance")?;
        let d = mean.len() as f64;
        let log_norm = -0.5 * (linalg::log_det(&chol) + d * (2.0 * PI).ln());
        Ok(Self {
            mean,
            cov,
            chol,
            log_norm,
        })
    }

    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * variance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn chol(&self) -> &Chol {
        &self.chol
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        self.log_norm - 0.5 * linalg::inv_quad_form(&self.chol, &(x - &self.mean))
    }

    /// `Σ⁻¹ v`.
    pub fn precision_times(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    /// Draw `mean + L z` with `z` standard normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| rng.sample(StandardNormal)));
        &self.mean + self.chol.l_dirty().lower_triangle() * z
    }
}

/// Independent uniforms `offsetᵢ + scaleᵢ · U(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformBox {
    offset: DVector<f64>,
    scale: DVector<f64>,
}

impl UniformBox {
    pub fn new(offset: DVector<f64>, scale: DVector<f64>) -> Result<Self> {
        check_dim(offset.len(), scale.len())?;
        if scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("uniform scale must be positive"));
        }
        if offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("uniform offset must be finite"));
        }
        Ok(Self { offset, scale })
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn scale(&self) -> &DVector<f64> {
        &self.scale
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> f64 {
        let inside = x
            .iter()
            .zip(self.offset.iter().zip(self.scale.iter()))
            .all(|(&v, (&a, &s))| v >= a && v <= a + s);
        if inside {
            -self.scale.iter().map(|s| s.ln()).sum::<f64>()
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.offset
                .iter()
                .zip(self.scale.iter())
                .map(|(&a, &s)| a + s * rng.random::<f64>()),
        )
    }
}

/// Method-of-moments Gaussian for a box of independent uniforms:
/// mean `a + s/2`, variance `s²/12` per coordinate.
pub fn moment_match(spec: &UniformBox) -> Result<GaussianDensity> {
    let mean = spec.offset() + spec.scale() * 0.5;
    let var = spec.scale().map(|s| s * s / 12.0);
    GaussianDensity::new(mean, DMatrix::from_diagonal(&var))
}

/// Linearization `x' ≈ A x + b` of the dynamics at `(0, x̄₀)`, together with
/// the Gaussian initial law.
#[derive(Debug, Clone)]
pub struct LinearizedSystem {
    pub a: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub init: GaussianDensity,
}

pub fn linearize<D: Dynamics + ?Sized>(model: &D, init: &GaussianDensity) -> Result<LinearizedSystem> {
    check_dim(model.dim(), init.dim())?;
    let x0 = init.mean().as_slice();
    let a = model.jacobian(0.0, x0);
    let mut f0 = DVector::zeros(model.dim());
    model.rhs(0.0, x0, f0.as_mut_slice());
    let offset = f0 - &a * init.mean();
    Ok(LinearizedSystem {
        a,
        offset,
        init: init.clone(),
    })
}

/// Mean and covariance of `(cᵀx(t), cᵀx'(t))` under the linear-Gaussian
/// approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointStateSlope {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub t: f64,
}

impl JointStateSlope {
    pub fn state_std(&self) -> f64 {
        self.cov[(0, 0)].max(0.0).sqrt()
    }

    pub fn slope_std(&self) -> f64 {
        self.cov[(1, 1)].max(0.0).sqrt()
    }

    /// Covariance with the degeneracy jitter applied when needed, plus its
    /// determinant.
    fn regularized(&self) -> Result<(Matrix2<f64>, f64)> {
        let cov = self.cov;
        let det = cov.determinant();
        if det >= DET_FLOOR && det.is_finite() {
            return Ok((cov, det));
        }
        let jitter = 1e-12 * cov[(0, 0)].max(cov[(1, 1)]);
        let cov = cov + Matrix2::identity() * jitter;
        let det = cov.determinant();
        if det >= DET_FLOOR && det.is_finite() {
            Ok((cov, det))
        } else {
            Err(Error::DegenerateCovariance { det })
        }
    }

    /// `ln(y φ_t(u, y))`; `-∞` for `y ≤ 0`.
    pub fn log_rice(&self, u: f64, y: f64) -> Result<f64> {
        if !(y > 0.0) {
            return Ok(f64::NEG_INFINITY);
        }
        let (cov, det) = self.regularized()?;
        let r = Vector2::new(u - self.mean[0], y - self.mean[1]);
        // closed-form 2×2 inverse
        let q = (cov[(1, 1)] * r[0] * r[0] - 2.0 * cov[(0, 1)] * r[0] * r[1] + cov[(0, 0)] * r[1] * r[1]) / det;
        Ok(y.ln() - (2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * q)
    }
}

const DET_FLOOR: f64 = 1e-300;

/// Everything needed to evaluate the Rice integrand of `cᵀx(t)` at level `u`
/// over `[0, T]`.
#[derive(Debug, Clone)]
pub struct RiceIntegrand {
    lin: LinearizedSystem,
    c: DVector<f64>,
    level: f64,
    horizon: f64,
    // Aᵀc, reused by every evaluation
    a_t_c: DVector<f64>,
    // [[A, b], [0, 0]]
    augmented: DMatrix<f64>,
}

impl RiceIntegrand {
    pub fn new(lin: LinearizedSystem, c: DVector<f64>, level: f64, horizon: f64) -> Result<Self> {
        let d = lin.a.nrows();
        check_dim(d, c.len())?;
        if c.iter().all(|&v| v == 0.0) {
            return Err(Error::invalid("observation functional c must be nonzero"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid("horizon must be positive"));
        }
        if !level.is_finite() {
            return Err(Error::invalid("level must be finite"));
        }
        let mut augmented = DMatrix::zeros(d + 1, d + 1);
        augmented.view_mut((0, 0), (d, d)).copy_from(&lin.a);
        augmented.view_mut((0, d), (d, 1)).copy_from(&lin.offset);
        let a_t_c = lin.a.transpose() * &c;
        Ok(Self {
            lin,
            c,
            level,
            horizon,
            a_t_c,
            augmented,
        })
    }

    pub fn linearized(&self) -> &LinearizedSystem {
        &self.lin
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Mean state `x̄(t)` and propagator `exp(A t)` from the augmented
    /// exponential `exp([[A, b], [0, 0]] t)`, which needs no `A⁻¹`.
    pub fn mean_and_propagator(&self, t: f64) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.c.len();
        let e_aug = linalg::expm(&(&self.augmented * t));
        let e = e_aug.view((0, 0), (d, d)).into_owned();
        let shift = e_aug.view((0, d), (d, 1)).column(0).into_owned();
        let mean = &e * self.lin.init.mean() + shift;
        (mean, e)
    }

    /// Joint law of `(cᵀx(t), cᵀx'(t))` with
    /// `Υ = [[cᵀΦc, cᵀΦAᵀc], [cᵀAΦc, cᵀAΦAᵀc]]`, `Φ = e^{At} Σ e^{Atᵀ}`.
    pub fn propagate_joint(&self, t: f64) -> JointStateSlope {
        self.joint_from_augmented(&linalg::expm(&(&self.augmented * t)), t)
    }

    fn joint_from_augmented(&self, e_aug: &DMatrix<f64>, t: f64) -> JointStateSlope {
        let d = self.c.len();
        let e = e_aug.view((0, 0), (d, d));
        let mean = e * self.lin.init.mean() + e_aug.view((0, d), (d, 1)).column(0);
        let slope_mean = self.c.dot(&(&self.lin.a * &mean + &self.lin.offset));
        let w1 = e.transpose() * &self.c;
        let w2 = e.transpose() * &self.a_t_c;
        let sigma = self.lin.init.cov();
        let s_w1 = sigma * &w1;
        let s_w2 = sigma * &w2;
        let v11 = w1.dot(&s_w1);
        let v12 = w1.dot(&s_w2);
        let v22 = w2.dot(&s_w2);
        JointStateSlope {
            mean: Vector2::new(self.c.dot(&mean), slope_mean),
            cov: Matrix2::new(v11, v12, v12, v22),
            t,
        }
    }

    /// `y φ_t(u, y)` at this integrand's level; zero for `y ≤ 0`.
    pub fn value(&self, y: f64, t: f64) -> Result<f64> {
        self.value_at_level(self.level, y, t)
    }

    pub fn value_at_level(&self, u: f64, y: f64, t: f64) -> Result<f64> {
        if !(y > 0.0) {
            return Ok(0.0);
        }
        Ok(self.propagate_joint(t).log_rice(u, y)?.exp())
    }

    /// `ln(y φ_t(u, y))`, `-∞` outside `t ∈ [0, T]`, `y > 0`.
    pub fn log_value(&self, y: f64, t: f64) -> Result<f64> {
        if !(y > 0.0) || !(0.0..=self.horizon).contains(&t) {
            return Ok(f64::NEG_INFINITY);
        }
        self.propagate_joint(t).log_rice(self.level, y)
    }

    /// Rice's formula `∫₀ᵀ ∫₀^∞ y φ_t(u, y) dy dt` by tensor-product
    /// trapezoid quadrature.
    pub fn expected_upcrossings(&self, quad: &Quadrature) -> Result<f64> {
        if quad.t_intervals == 0 || quad.y_intervals == 0 {
            return Err(Error::invalid("quadrature needs at least one interval per axis"));
        }
        let ht = self.horizon / quad.t_intervals as f64;
        let mut total = 0.0;
        for i in 0..=quad.t_intervals {
            let t = if i == quad.t_intervals { self.horizon } else { i as f64 * ht };
            let joint = self.propagate_joint(t);
            let inner = slope_integral(&joint, self.level, quad.y_intervals)?;
            let w = if i == 0 || i == quad.t_intervals { 0.5 } else { 1.0 };
            total += w * inner;
        }
        Ok(total * ht)
    }
}

/// Resolution of the `(t, y)` quadrature for [`RiceIntegrand::expected_upcrossings`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quadrature {
    pub t_intervals: usize,
    pub y_intervals: usize,
}

impl Default for Quadrature {
    fn default() -> Self {
        Self {
            t_intervals: 400,
            y_intervals: 400,
        }
    }
}

/// Width of the slope window in standard deviations; the Gaussian tail
/// beyond it is below 1e-12 of the mass.
const SLOPE_WINDOW_SDS: f64 = 12.0;

/// Slope range `[lo, hi]` that carries the mass of `y ↦ y φ_t(u, y)` on `y > 0`.
///
/// Centred on the conditional law of the slope given the state equals `u`,
/// which is where the integrand concentrates.
pub fn slope_window(joint: &JointStateSlope, u: f64) -> Option<(f64, f64)> {
    let (v11, v12, v22) = (joint.cov[(0, 0)], joint.cov[(0, 1)], joint.cov[(1, 1)]);
    let (mean, sd) = if v11 > 0.0 {
        let m = joint.mean[1] + v12 / v11 * (u - joint.mean[0]);
        let v = (v22 - v12 * v12 / v11).max(1e-12 * v22.max(f64::MIN_POSITIVE));
        (m, v.sqrt())
    } else {
        (joint.mean[1], v22.max(0.0).sqrt())
    };
    let hi = mean + SLOPE_WINDOW_SDS * sd;
    if !(hi > 0.0) || !hi.is_finite() {
        return None;
    }
    let lo = (mean - SLOPE_WINDOW_SDS * sd).max(0.0);
    Some((lo, hi))
}

fn slope_integral(joint: &JointStateSlope, u: f64, n: usize) -> Result<f64> {
    let Some((lo, hi)) = slope_window(joint, u) else {
        return Ok(0.0);
    };
    let hy = (hi - lo) / n as f64;
    let mut sum = 0.0;
    for j in 0..=n {
        let y = lo + j as f64 * hy;
        let v = joint.log_rice(u, y)?.exp();
        let w = if j == 0 || j == n { 0.5 } else { 1.0 };
        sum += w * v;
    }
    Ok(sum * hy)
}

/// Joint laws tabulated on the nodes `k·h` of `[0, T]`, linearly
/// interpolated in between. One matrix exponential serves the whole table.
#[derive(Debug, Clone)]
pub struct RiceTable {
    level: f64,
    horizon: f64,
    step: f64,
    nodes: Vec<JointStateSlope>,
}

impl RiceTable {
    pub fn new(rice: &RiceIntegrand, step: f64) -> Result<Self> {
        if !(step > 0.0 && step <= rice.horizon()) {
            return Err(Error::invalid("table step must lie in (0, T]"));
        }
        let n = libm::ceil(rice.horizon() / step - 1e-9) as usize;
        let e_step = linalg::expm(&(&rice.augmented * step));
        let dim = rice.augmented.nrows();
        let mut e = DMatrix::identity(dim, dim);
        let mut nodes = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let t = (k as f64 * step).min(rice.horizon());
            if k == n {
                e = linalg::expm(&(&rice.augmented * t));
            }
            nodes.push(rice.joint_from_augmented(&e, t));
            e = &e_step * e;
        }
        Ok(Self {
            level: rice.level(),
            horizon: rice.horizon(),
            step,
            nodes,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn nodes(&self) -> &[JointStateSlope] {
        &self.nodes
    }

    /// Interpolated joint law at `t ∈ [0, T]`.
    pub fn joint(&self, t: f64) -> JointStateSlope {
        let last = self.nodes.len() - 1;
        let k = ((t / self.step) as usize).min(last.saturating_sub(1));
        let (a, b) = (&self.nodes[k], &self.nodes[(k + 1).min(last)]);
        let span = b.t - a.t;
        let w = if span > 0.0 { ((t - a.t) / span).clamp(0.0, 1.0) } else { 0.0 };
        JointStateSlope {
            mean: a.mean * (1.0 - w) + b.mean * w,
            cov: a.cov * (1.0 - w) + b.cov * w,
            t,
        }
    }

    /// `ln(y φ_t(u, y))`, `-∞` outside `t ∈ [0, T]`, `y > 0`.
    pub fn log_value(&self, y: f64, t: f64) -> Result<f64> {
        if !(y > 0.0) || !(0.0..=self.horizon).contains(&t) {
            return Ok(f64::NEG_INFINITY);
        }
        self.joint(t).log_rice(self.level, y)
    }
}

/// `(t, y)` grid evaluation of the Rice integrand, row-major in `t`.
pub fn rice_grid(rice: &RiceIntegrand, times: &[f64], slopes: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(times.len() * slopes.len());
    for &t in times {
        let joint = rice.propagate_joint(t);
        for &y in slopes {
            let v = if y > 0.0 {
                joint.log_rice(rice.level(), y)?.exp()
            } else {
                0.0
            };
            out.push(v);
        }
    }
    Ok(out)
}
