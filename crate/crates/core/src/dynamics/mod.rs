//! ODE models and fixed-step RK4 integration, with tangent-linear and
//! adjoint sensitivity passes that share the forward grid.
//!
//! The adjoint pass integrates the sensitivity equation backwards with the
//! exact transpose of the RK4 tangent step, recomputing the forward stage
//! states from the checkpointed grid states. Forward, tangent and adjoint
//! results are therefore mutually consistent to round-off.

mod models;

pub use models::{eval_rhs, LinearModel, Lorenz96, LotkaVolterra};

#[allow(unused_imports)]
use num_traits::Float;
use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::ControlFlow;

use nalgebra::DMatrix;

use crate::error::{check_dim, Error, Result};

/// Right-hand side of an autonomous or non-autonomous ODE `x' = f(t, x)`.
pub trait Dynamics: Send + Sync {
    fn dim(&self) -> usize;

    fn rhs(&self, t: f64, x: &[f64], dx: &mut [f64]);

    /// ∂f/∂x at (t, x).
    fn jacobian(&self, t: f64, x: &[f64]) -> DMatrix<f64>;

    /// `out = J(t, x) v`.
    fn jvp(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]) {
        let j = self.jacobian(t, x);
        for (i, o) in out.iter_mut().enumerate() {
            *o = j.row(i).iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }

    /// `out = J(t, x)ᵀ w`.
    fn vjp(&self, t: f64, x: &[f64], w: &[f64], out: &mut [f64]) {
        let j = self.jacobian(t, x);
        for (k, o) in out.iter_mut().enumerate() {
            *o = j.column(k).iter().zip(w).map(|(a, b)| a * b).sum();
        }
    }
}

macro_rules! forward_dynamics {
    ($($ptr:ty),*) => {$(
        impl<D: Dynamics + ?Sized> Dynamics for $ptr {
            fn dim(&self) -> usize { (**self).dim() }
            fn rhs(&self, t: f64, x: &[f64], dx: &mut [f64]) { (**self).rhs(t, x, dx) }
            fn jacobian(&self, t: f64, x: &[f64]) -> DMatrix<f64> { (**self).jacobian(t, x) }
            fn jvp(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]) { (**self).jvp(t, x, v, out) }
            fn vjp(&self, t: f64, x: &[f64], w: &[f64], out: &mut [f64]) { (**self).vjp(t, x, w, out) }
        }
    )*};
}
forward_dynamics!(&D, Box<D>, Arc<D>);

/// Uniform grid `0, h, 2h, …, T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    step: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, step: f64) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::invalid("time step must be positive and finite"));
        }
        if !(t_end >= 0.0 && t_end.is_finite()) {
            return Err(Error::invalid("horizon must be non-negative and finite"));
        }
        let ratio = t_end / step;
        let n = libm::round(ratio);
        if (ratio - n).abs() > 1e-12 * ratio.max(1.0) {
            return Err(Error::invalid("horizon is not an integer multiple of the step"));
        }
        Ok(Self {
            t_end,
            step,
            n_steps: n as usize,
        })
    }

    /// Grid over `[0, k·step]` with the same step.
    pub fn truncated(&self, k: usize) -> Self {
        let k = k.min(self.n_steps);
        let t_end = if k == self.n_steps {
            self.t_end
        } else {
            k as f64 * self.step
        };
        Self {
            t_end,
            step: self.step,
            n_steps: k,
        }
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.t_end
        } else {
            k as f64 * self.step
        }
    }

    /// Index of the grid node nearest to `t`, clamped to the grid.
    pub fn nearest_node(&self, t: f64) -> usize {
        let k = libm::round(t / self.step);
        if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.n_steps)
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_nodes()).map(move |k| self.time(k))
    }
}

/// States of a forward solve at every grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: TimeGrid,
    dim: usize,
    states: Vec<f64>,
}

impl Trajectory {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.grid.times().collect()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }
}

/// Scratch buffers for one RK4 step.
struct Stages {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Stages {
    fn new(d: usize) -> Self {
        Self {
            k: [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]],
            tmp: vec![0.0; d],
        }
    }

    /// Evaluate the four stage slopes at (t, x); `tmp` ends holding X4.
    fn slopes<D: Dynamics + ?Sized>(&mut self, model: &D, t: f64, h: f64, x: &[f64]) {
        let [k1, k2, k3, k4] = &mut self.k;
        let tmp = &mut self.tmp;
        model.rhs(t, x, k1);
        axpy_into(tmp, x, 0.5 * h, k1);
        model.rhs(t + 0.5 * h, tmp, k2);
        axpy_into(tmp, x, 0.5 * h, k2);
        model.rhs(t + 0.5 * h, tmp, k3);
        axpy_into(tmp, x, h, k3);
        model.rhs(t + h, tmp, k4);
    }

    fn advance(&self, h: f64, x: &mut [f64]) {
        let [k1, k2, k3, k4] = &self.k;
        let w = h / 6.0;
        for i in 0..x.len() {
            x[i] += w * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

#[inline]
fn axpy_into(out: &mut [f64], x: &[f64], a: f64, y: &[f64]) {
    for i in 0..out.len() {
        out[i] = x[i] + a * y[i];
    }
}

fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// RK4 solve that reports every grid state to `observer`; the observer can
/// stop the solve early by returning `ControlFlow::Break`.
pub fn integrate_observed<D, F>(model: &D, x0: &[f64], grid: &TimeGrid, mut observer: F) -> Result<()>
where
    D: Dynamics + ?Sized,
    F: FnMut(usize, f64, &[f64]) -> ControlFlow<()>,
{
    let d = model.dim();
    check_dim(d, x0.len())?;
    let mut x = x0.to_vec();
    if !all_finite(&x) {
        return Err(Error::IntegrationDiverged { time: 0.0 });
    }
    if observer(0, 0.0, &x).is_break() {
        return Ok(());
    }
    let h = grid.step();
    let mut st = Stages::new(d);
    for k in 0..grid.n_steps() {
        let t = k as f64 * h;
        st.slopes(model, t, h, &x);
        st.advance(h, &mut x);
        let t_next = grid.time(k + 1);
        if !all_finite(&x) {
            return Err(Error::IntegrationDiverged { time: t_next });
        }
        if observer(k + 1, t_next, &x).is_break() {
            break;
        }
    }
    Ok(())
}

/// Classical RK4 solution of `x' = f(t, x)` at every node of `grid`.
pub fn integrate<D: Dynamics + ?Sized>(model: &D, x0: &[f64], grid: &TimeGrid) -> Result<Trajectory> {
    let d = model.dim();
    let mut states = Vec::with_capacity(d * grid.n_nodes());
    integrate_observed(model, x0, grid, |_, _, x| {
        states.extend_from_slice(x);
        ControlFlow::Continue(())
    })?;
    Ok(Trajectory {
        grid: *grid,
        dim: d,
        states,
    })
}

/// Final forward state and tangent of a joint forward/tangent solve.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentSolution {
    pub state: Vec<f64>,
    pub tangent: Vec<f64>,
}

/// Forward state and tangent `δx` with `δx' = J(t, x) δx`, `δx(0) = v`,
/// advanced together by RK4 on the joint system.
pub fn tangent_solve<D: Dynamics + ?Sized>(
    model: &D,
    x0: &[f64],
    grid: &TimeGrid,
    v: &[f64],
) -> Result<TangentSolution> {
    let d = model.dim();
    check_dim(d, x0.len())?;
    check_dim(d, v.len())?;
    let h = grid.step();
    let mut x = x0.to_vec();
    let mut dx = v.to_vec();
    let mut st = Stages::new(d);
    let mut dk: [Vec<f64>; 4] = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut xs = vec![0.0; d];
    let mut dxs = vec![0.0; d];
    for k in 0..grid.n_steps() {
        let t = k as f64 * h;
        let [k1, k2, k3, k4] = &mut st.k;
        let [d1, d2, d3, d4] = &mut dk;

        model.rhs(t, &x, k1);
        model.jvp(t, &x, &dx, d1);

        axpy_into(&mut xs, &x, 0.5 * h, k1);
        axpy_into(&mut dxs, &dx, 0.5 * h, d1);
        model.rhs(t + 0.5 * h, &xs, k2);
        model.jvp(t + 0.5 * h, &xs, &dxs, d2);

        axpy_into(&mut xs, &x, 0.5 * h, k2);
        axpy_into(&mut dxs, &dx, 0.5 * h, d2);
        model.rhs(t + 0.5 * h, &xs, k3);
        model.jvp(t + 0.5 * h, &xs, &dxs, d3);

        axpy_into(&mut xs, &x, h, k3);
        axpy_into(&mut dxs, &dx, h, d3);
        model.rhs(t + h, &xs, k4);
        model.jvp(t + h, &xs, &dxs, d4);

        let w = h / 6.0;
        for i in 0..d {
            x[i] += w * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            dx[i] += w * (d1[i] + 2.0 * d2[i] + 2.0 * d3[i] + d4[i]);
        }
        if !all_finite(&x) || !all_finite(&dx) {
            return Err(Error::IntegrationDiverged { time: grid.time(k + 1) });
        }
    }
    Ok(TangentSolution { state: x, tangent: dx })
}

/// Tangent-linear propagation of `v` from 0 to the end of `grid`.
pub fn integrate_tangent<D: Dynamics + ?Sized>(
    model: &D,
    x0: &[f64],
    grid: &TimeGrid,
    v: &[f64],
) -> Result<Vec<f64>> {
    tangent_solve(model, x0, grid, v).map(|s| s.tangent)
}

/// Adjoint sensitivity `λ(0)` for terminal condition `λ(T) = terminal`,
/// i.e. `(∂x(T)/∂x(0))ᵀ · terminal`, integrated backwards over the
/// checkpointed forward trajectory.
pub fn integrate_adjoint<D: Dynamics + ?Sized>(
    model: &D,
    forward: &Trajectory,
    grid: &TimeGrid,
    terminal: &[f64],
) -> Result<Vec<f64>> {
    let d = model.dim();
    check_dim(d, forward.dim())?;
    check_dim(d, terminal.len())?;
    if forward.grid() != grid || forward.len() != grid.n_nodes() {
        return Err(Error::invalid("adjoint grid does not match the forward trajectory"));
    }
    let h = grid.step();
    let mut lam = terminal.to_vec();
    let mut st = Stages::new(d);
    let mut stage_x: [Vec<f64>; 4] = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut g = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut s = vec![0.0; d];

    for k in (0..grid.n_steps()).rev() {
        let t = k as f64 * h;
        let x = forward.state(k);
        // Recompute the forward stage states X1..X4 of step k.
        st.slopes(model, t, h, x);
        stage_x[0].copy_from_slice(x);
        axpy_into(&mut stage_x[1], x, 0.5 * h, &st.k[0]);
        axpy_into(&mut stage_x[2], x, 0.5 * h, &st.k[1]);
        stage_x[3].copy_from_slice(&st.tmp);

        // Transpose of the tangent step, last stage first.
        let w = h / 6.0;
        for i in 0..d {
            g[0][i] = w * lam[i];
            g[1][i] = 2.0 * w * lam[i];
            g[2][i] = 2.0 * w * lam[i];
            g[3][i] = w * lam[i];
        }
        let times = [t, t + 0.5 * h, t + 0.5 * h, t + h];
        let carry = [0.5 * h, 0.5 * h, h];
        for stage in (0..4).rev() {
            model.vjp(times[stage], &stage_x[stage], &g[stage], &mut s);
            for i in 0..d {
                lam[i] += s[i];
            }
            if stage > 0 {
                let c = carry[stage - 1];
                for i in 0..d {
                    g[stage - 1][i] += c * s[i];
                }
            }
        }
        if !all_finite(&lam) {
            return Err(Error::IntegrationDiverged { time: t });
        }
    }
    Ok(lam)
}
