//! Limited-memory BFGS with Armijo backtracking.

#[allow(unused_imports)]
use num_traits::Float;
use alloc::collections::VecDeque;
use alloc::vec::Vec;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Smooth objective to minimize. `gradient` is only requested at points
/// where `value` was just evaluated, so implementations may cache work from
/// the value call.
pub trait Objective {
    /// Objective value; non-finite values mark points outside the domain.
    fn value(&mut self, x: &DVector<f64>) -> Result<f64>;
    fn gradient(&mut self, x: &DVector<f64>) -> Result<DVector<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub memory: usize,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Stop once `‖g‖ < grad_tol · (1 + |f|)`.
    pub grad_tol: f64,
    pub max_iter: usize,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            c1: 1e-4,
            grad_tol: 1e-6,
            max_iter: 200,
            max_backtracks: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective at the start point and after each accepted step.
    pub history: Vec<f64>,
}

struct Pair {
    s: DVector<f64>,
    y: DVector<f64>,
    rho: f64,
}

/// Two-loop recursion: `-H g` for the current curvature pairs.
fn direction(g: &DVector<f64>, pairs: &VecDeque<Pair>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for p in pairs.iter().rev() {
        let a = p.rho * p.s.dot(&q);
        q.axpy(-a, &p.y, 1.0);
        alphas.push(a);
    }
    if let Some(last) = pairs.back() {
        q *= last.s.dot(&last.y) / last.y.norm_squared();
    } else {
        q *= 1.0 / g.norm().max(1.0);
    }
    for (p, a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = p.rho * p.y.dot(&q);
        q.axpy(a - b, &p.s, 1.0);
    }
    -q
}

pub fn minimize<O: Objective + ?Sized>(obj: &mut O, x0: &DVector<f64>, cfg: &LbfgsConfig) -> Result<LbfgsResult> {
    if cfg.memory == 0 || !(cfg.c1 > 0.0 && cfg.c1 < 1.0) || !(cfg.grad_tol > 0.0) {
        return Err(Error::invalid("invalid L-BFGS settings"));
    }
    let mut x = x0.clone();
    let mut f = obj.value(&x)?;
    if !f.is_finite() {
        return Err(Error::InvalidStart);
    }
    let mut g = obj.gradient(&x)?;
    let mut pairs: VecDeque<Pair> = VecDeque::with_capacity(cfg.memory);
    let mut history = alloc::vec![f];
    let mut iterations = 0;
    let mut converged = g.norm() < cfg.grad_tol * (1.0 + f.abs());

    while !converged && iterations < cfg.max_iter {
        let mut p = direction(&g, &pairs);
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            pairs.clear();
            p = direction(&g, &pairs);
            slope = g.dot(&p);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let trial = &x + &p * step;
            let ft = obj.value(&trial)?;
            if ft.is_finite() && ft <= f + cfg.c1 * step * slope {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            break;
        };
        let g_new = obj.gradient(&x_new)?;
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back(Pair { s, y, rho: 1.0 / sy });
        }
        x = x_new;
        f = f_new;
        g = g_new;
        history.push(f);
        iterations += 1;
        converged = g.norm() < cfg.grad_tol * (1.0 + f.abs());
    }

    Ok(LbfgsResult {
        grad_norm: g.norm(),
        x,
        value: f,
        iterations,
        converged,
        history,
    })
}
