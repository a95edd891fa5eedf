//! Per-observation Bayesian inverse problem: find initial states whose
//! trajectory reaches level `u` with slope `y` at time `t`.
//!
//! The forward map is `G(x₀) = (cᵀx(t), cᵀf(t, x(t)))` for the fully
//! nonlinear trajectory. Gradients use one forward and one adjoint solve;
//! Gauss-Newton products add one tangent-linear solve.

#[allow(unused_imports)]
use num_traits::Float;
use core::ops::ControlFlow;
use core::sync::atomic::{AtomicUsize, Ordering};

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use crate::dynamics::{self, Dynamics, TimeGrid, Trajectory};
use crate::error::{check_dim, Error, Result};
use crate::gaussproc::{GaussianDensity, RiceIntegrand};
use crate::linalg;
use crate::mcmc::{self, Chain, DramConfig, LogDensity};
use crate::optim::{self, LbfgsConfig, Objective};

/// A point `(u, y)` at time `t` on the excursion boundary, with its
/// likelihood covariance `Γ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub u: f64,
    pub y_slope: f64,
    pub t_obs: f64,
    pub gamma: Matrix2<f64>,
    /// `y φ_t(u, y)` at the observation, used for mixture weights.
    pub weight_hint: f64,
}

impl Observation {
    pub fn new(u: f64, y_slope: f64, t_obs: f64, gamma: Matrix2<f64>, weight_hint: f64) -> Result<Self> {
        if !(u.is_finite() && y_slope.is_finite() && t_obs.is_finite()) {
            return Err(Error::invalid("observation must be finite"));
        }
        if !(t_obs >= 0.0) {
            return Err(Error::invalid("observation time must be non-negative"));
        }
        if !(weight_hint >= 0.0) {
            return Err(Error::invalid("weight hint must be non-negative"));
        }
        spd2(&gamma, "likelihood covariance")?;
        Ok(Self {
            u,
            y_slope,
            t_obs,
            gamma,
            weight_hint,
        })
    }

    pub fn target(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.y_slope)
    }
}

fn spd2(m: &Matrix2<f64>, what: &str) -> Result<Matrix2<f64>> {
    let sym = (m[(0, 1)] - m[(1, 0)]).abs() <= 1e-12 * m.amax().max(1e-300);
    if !sym || !(m[(0, 0)] > 0.0) || !(m.determinant() > 0.0) || m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite(what.into()));
    }
    Ok(m.try_inverse().expect("positive determinant"))
}

/// `(cᵀx, cᵀf(t, x))` at the last node of `grid`.
fn observe<D: Dynamics + ?Sized>(model: &D, c: &DVector<f64>, t: f64, x: &[f64]) -> Vector2<f64> {
    let f = dynamics::eval_rhs(model, t, x);
    Vector2::new(dot(c, x), dot(c, &f))
}

fn dot(c: &DVector<f64>, x: &[f64]) -> f64 {
    c.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// `G(x₀) = (cᵀx(t), cᵀx'(t))` at the grid node nearest `t_obs`.
pub fn forward_map<D: Dynamics + ?Sized>(
    model: &D,
    c: &DVector<f64>,
    x0: &[f64],
    t_obs: f64,
    grid: &TimeGrid,
) -> Result<Vector2<f64>> {
    check_dim(model.dim(), x0.len())?;
    check_dim(model.dim(), c.len())?;
    let g = grid.truncated(grid.nearest_node(t_obs));
    let mut last = x0.to_vec();
    dynamics::integrate_observed(model, x0, &g, |_, _, x| {
        last.copy_from_slice(x);
        ControlFlow::Continue(())
    })?;
    Ok(observe(model, c, g.t_end(), &last))
}

/// Likelihood covariance from the Rice integrand around `(u, y)` at `t`:
/// mean and covariance of `y' φ_t(u', y')` restricted to the window
/// `[u ± ε₁] × [y ± ε₂]`, by trapezoid quadrature on an `n × n` grid.
pub fn build_likelihood_cov(
    rice: &RiceIntegrand,
    u: f64,
    y_slope: f64,
    t_obs: f64,
    window: (f64, f64),
    grid_pts: usize,
) -> Result<Matrix2<f64>> {
    let (e1, e2) = window;
    if !(e1 > 0.0 && e2 > 0.0 && e1.is_finite() && e2.is_finite()) {
        return Err(Error::invalid("likelihood window must be positive"));
    }
    if grid_pts < 5 {
        return Err(Error::invalid("likelihood fit needs at least 5 points per axis"));
    }
    let joint = rice.propagate_joint(t_obs);
    let axis = |centre: f64, half: f64, i: usize| centre - half + 2.0 * half * i as f64 / (grid_pts - 1) as f64;
    let mut pts = Vec::with_capacity(grid_pts * grid_pts);
    let mut max_lw = f64::NEG_INFINITY;
    for i in 0..grid_pts {
        let uu = axis(u, e1, i);
        for j in 0..grid_pts {
            let yy = axis(y_slope, e2, j);
            let lw = joint.log_rice(uu, yy)?;
            max_lw = max_lw.max(lw);
            pts.push((uu, yy, lw));
        }
    }
    if !(max_lw >= 1e-300f64.ln()) {
        return Err(Error::FlatLikelihood);
    }
    let trap = |k: usize| if k == 0 || k == grid_pts - 1 { 0.5 } else { 1.0 };
    let weight = |k: usize, lw: f64| trap(k / grid_pts) * trap(k % grid_pts) * (lw - max_lw).exp();
    let mut sw = 0.0;
    let mut m = Vector2::zeros();
    for (k, &(uu, yy, lw)) in pts.iter().enumerate() {
        let w = weight(k, lw);
        sw += w;
        m += Vector2::new(uu, yy) * w;
    }
    m /= sw;
    let mut cov = Matrix2::zeros();
    for (k, &(uu, yy, lw)) in pts.iter().enumerate() {
        let w = weight(k, lw);
        let r = Vector2::new(uu, yy) - m;
        cov += r * r.transpose() * w;
    }
    cov /= sw;
    cov = (cov + cov.transpose()) * 0.5;
    spd2(&cov, "fitted likelihood covariance")?;
    Ok(cov)
}

/// Default fit window `(0.05 sd(cᵀx(t)), 0.25 sd(cᵀx'(t)))`.
pub fn default_window(rice: &RiceIntegrand, t_obs: f64) -> (f64, f64) {
    let j = rice.propagate_joint(t_obs);
    (0.05 * j.state_std(), 0.25 * j.slope_std())
}

/// Posterior `p(x) · N(y; G(x), Γ)` with the prior term weighted by `τ`.
#[derive(Debug)]
pub struct PosteriorProblem<'a, D: ?Sized> {
    model: &'a D,
    prior: GaussianDensity,
    obs: Observation,
    c: DVector<f64>,
    grid: TimeGrid,
    tau: f64,
    gamma_inv: Matrix2<f64>,
    evals: AtomicUsize,
}

impl<'a, D: Dynamics + ?Sized> PosteriorProblem<'a, D> {
    /// `grid` spans the full horizon; the problem integrates to the node
    /// nearest `obs.t_obs`.
    pub fn new(
        model: &'a D,
        prior: GaussianDensity,
        obs: Observation,
        c: DVector<f64>,
        grid: &TimeGrid,
        tau: f64,
    ) -> Result<Self> {
        let d = model.dim();
        check_dim(d, prior.dim())?;
        check_dim(d, c.len())?;
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid("prior weight tau must be positive"));
        }
        if obs.t_obs > grid.t_end() + 0.5 * grid.step() {
            return Err(Error::invalid("observation time lies beyond the horizon"));
        }
        let gamma_inv = spd2(&obs.gamma, "likelihood covariance")?;
        Ok(Self {
            model,
            prior,
            obs,
            c,
            grid: grid.truncated(grid.nearest_node(obs.t_obs)),
            tau,
            gamma_inv,
            evals: AtomicUsize::new(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn prior(&self) -> &GaussianDensity {
        &self.prior
    }

    pub fn observation(&self) -> &Observation {
        &self.obs
    }

    /// Observation time after snapping to the grid.
    pub fn t_obs(&self) -> f64 {
        self.grid.t_end()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// ODE solves (forward, tangent or adjoint) performed so far.
    pub fn n_model_evals(&self) -> usize {
        self.evals.load(Ordering::Relaxed)
    }

    fn count(&self, n: usize) {
        self.evals.fetch_add(n, Ordering::Relaxed);
    }

    fn trajectory(&self, x: &[f64]) -> Result<Trajectory> {
        self.count(1);
        dynamics::integrate(self.model, x, &self.grid)
    }

    pub fn forward_map(&self, x: &[f64]) -> Result<Vector2<f64>> {
        self.count(1);
        forward_map(self.model, &self.c, x, self.grid.t_end(), &self.grid)
    }

    /// `-τ/2 ‖x − x̄‖²_{Σ⁻¹}`.
    pub fn log_prior_term(&self, x: &[f64]) -> f64 {
        let r = DVector::from_column_slice(x) - self.prior.mean();
        -0.5 * self.tau * linalg::inv_quad_form(self.prior.chol(), &r)
    }

    fn misfit(&self, g: &Vector2<f64>) -> f64 {
        let r = self.obs.target() - g;
        0.5 * r.dot(&(self.gamma_inv * r))
    }

    /// `-½ ‖y − G(x)‖²_{Γ⁻¹}`.
    pub fn log_like_term(&self, x: &[f64]) -> Result<f64> {
        Ok(-self.misfit(&self.forward_map(x)?))
    }

    /// Unnormalized log posterior; `-∞` where the forward solve diverges.
    pub fn log_posterior(&self, x: &[f64]) -> f64 {
        if x.len() != self.dim() || x.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        match self.log_like_term(x) {
            Ok(l) => l + self.log_prior_term(x),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// Terminal adjoint condition `c w₁ + Jᵀc w₂` at the observation time.
    fn terminal(&self, x_t: &[f64], w: &Vector2<f64>) -> Vec<f64> {
        let mut jt_c = alloc::vec![0.0; self.dim()];
        self.model.vjp(self.t_obs(), x_t, self.c.as_slice(), &mut jt_c);
        self.c.iter().zip(&jt_c).map(|(c, j)| c * w[0] + j * w[1]).collect()
    }

    fn grad_from_trajectory(&self, x: &[f64], traj: &Trajectory) -> Result<DVector<f64>> {
        let x_t = traj.final_state();
        let g = observe(self.model, &self.c, self.t_obs(), x_t);
        let w = self.gamma_inv * (g - self.obs.target());
        let lam_t = self.terminal(x_t, &w);
        self.count(1);
        let lam0 = dynamics::integrate_adjoint(self.model, traj, &self.grid, &lam_t)?;
        let r = DVector::from_column_slice(x) - self.prior.mean();
        let prior = self.prior.precision_times(&r) * self.tau;
        Ok(-(DVector::from_vec(lam0) + prior))
    }

    /// Gradient of the log posterior via one forward and one adjoint solve.
    pub fn grad_log_posterior(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_dim(self.dim(), x.len())?;
        let traj = self.trajectory(x)?;
        self.grad_from_trajectory(x, &traj)
    }

    /// Gauss-Newton Hessian of the negative log posterior applied to `v`:
    /// `(∂G/∂x)ᵀ Γ⁻¹ (∂G/∂x) v + τ Σ⁻¹ v`.
    pub fn gn_hessian_vec(&self, x: &[f64], v: &[f64]) -> Result<DVector<f64>> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), v.len())?;
        let traj = self.trajectory(x)?;
        self.count(1);
        let tl = dynamics::tangent_solve(self.model, x, &self.grid, v)?;
        let x_t = traj.final_state();
        let dg = self.observe_tangent(x_t, &tl.tangent);
        let w = self.gamma_inv * dg;
        let lam_t = self.terminal(x_t, &w);
        self.count(1);
        let lam0 = dynamics::integrate_adjoint(self.model, &traj, &self.grid, &lam_t)?;
        let prior = self.prior.precision_times(&DVector::from_column_slice(v)) * self.tau;
        Ok(DVector::from_vec(lam0) + prior)
    }

    fn observe_tangent(&self, x_t: &[f64], dx: &[f64]) -> Vector2<f64> {
        let mut jdx = alloc::vec![0.0; self.dim()];
        self.model.jvp(self.t_obs(), x_t, dx, &mut jdx);
        Vector2::new(dot(&self.c, dx), dot(&self.c, &jdx))
    }

    /// `∂G/∂x` (2 × d), one tangent-linear solve per column.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), x.len())?;
        let d = self.dim();
        let mut jac = DMatrix::zeros(2, d);
        let mut e = alloc::vec![0.0; d];
        for k in 0..d {
            e.fill(0.0);
            e[k] = 1.0;
            self.count(1);
            let tl = dynamics::tangent_solve(self.model, x, &self.grid, &e)?;
            let col = self.observe_tangent(&tl.state, &tl.tangent);
            jac[(0, k)] = col[0];
            jac[(1, k)] = col[1];
        }
        Ok(jac)
    }

    /// Laplace covariance `((∂G/∂x)ᵀ Γ⁻¹ (∂G/∂x) + τ Σ⁻¹)⁻¹` at `x`.
    pub fn laplace_cov(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let jac = self.jacobian(x)?;
        let gi = DMatrix::from_column_slice(2, 2, self.gamma_inv.as_slice());
        let d = self.dim();
        let prec_prior = self.prior.chol().inverse() * self.tau;
        let h = jac.transpose() * gi * &jac + prec_prior;
        let chol = linalg::cholesky(&h, "posterior precision")?;
        let cov = linalg::symmetrize(&chol.inverse());
        debug_assert_eq!(cov.nrows(), d);
        Ok(cov)
    }
}

impl<D: Dynamics + ?Sized> LogDensity for PosteriorProblem<'_, D> {
    fn dim(&self) -> usize {
        self.prior.dim()
    }
    fn log_density(&self, x: &[f64]) -> f64 {
        self.log_posterior(x)
    }
}

/// `𝒥 = -log posterior`, caching the last forward trajectory for the
/// gradient call that follows an accepted step.
struct NegLogPosterior<'p, 'a, D: ?Sized> {
    problem: &'p PosteriorProblem<'a, D>,
    cache: Option<(DVector<f64>, Trajectory)>,
}

impl<D: Dynamics + ?Sized> Objective for NegLogPosterior<'_, '_, D> {
    fn value(&mut self, x: &DVector<f64>) -> Result<f64> {
        let p = self.problem;
        match p.trajectory(x.as_slice()) {
            Ok(traj) => {
                let g = observe(p.model, &p.c, p.t_obs(), traj.final_state());
                let v = p.misfit(&g) - p.log_prior_term(x.as_slice());
                self.cache = Some((x.clone(), traj));
                Ok(v)
            }
            Err(Error::IntegrationDiverged { .. }) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    }

    fn gradient(&mut self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let p = self.problem;
        let traj = match self.cache.take() {
            Some((cx, traj)) if &cx == x => traj,
            _ => p.trajectory(x.as_slice())?,
        };
        Ok(-p.grad_from_trajectory(x.as_slice(), &traj)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub x_map: DVector<f64>,
    pub post_cov: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    /// `𝒥` at the start and after every accepted step.
    pub objective_history: Vec<f64>,
    /// ODE solves spent by this call, Laplace covariance included.
    pub n_model_evals: usize,
}

/// MAP point by L-BFGS on `𝒥 = -log posterior`, then the Laplace covariance.
pub fn map_solve<D: Dynamics + ?Sized>(
    problem: &PosteriorProblem<'_, D>,
    x_init: &[f64],
    cfg: &LbfgsConfig,
) -> Result<MapResult> {
    check_dim(problem.dim(), x_init.len())?;
    let before = problem.n_model_evals();
    let mut obj = NegLogPosterior { problem, cache: None };
    let r = optim::minimize(&mut obj, &DVector::from_column_slice(x_init), cfg)?;
    let post_cov = problem.laplace_cov(r.x.as_slice())?;
    Ok(MapResult {
        x_map: r.x,
        post_cov,
        converged: r.converged,
        iterations: r.iterations,
        grad_norm: r.grad_norm,
        objective_history: r.history,
        n_model_evals: problem.n_model_evals() - before,
    })
}

/// DRAM chain on the posterior started at the prior mean.
pub fn posterior_sample<D: Dynamics + ?Sized>(problem: &PosteriorProblem<'_, D>, config: &DramConfig) -> Result<Chain> {
    let start = problem.prior().mean().clone();
    mcmc::dram_run(problem, config, start.as_slice())
}

#[cfg(test)]
mod tests;
