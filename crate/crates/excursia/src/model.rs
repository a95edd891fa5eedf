//! The built-in models behind one concrete type.

use excursia_core::dynamics::{Dynamics, LinearModel, Lorenz96, LotkaVolterra};
use nalgebra::DMatrix;

#[derive(Debug, Clone)]
pub enum Model {
    LotkaVolterra(LotkaVolterra),
    Lorenz96(Lorenz96),
    Linear(LinearModel),
}

macro_rules! dispatch {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            Model::LotkaVolterra($m) => $e,
            Model::Lorenz96($m) => $e,
            Model::Linear($m) => $e,
        }
    };
}

impl Dynamics for Model {
    fn dim(&self) -> usize {
        dispatch!(self, m => m.dim())
    }

    fn rhs(&self, t: f64, x: &[f64], dx: &mut [f64]) {
        dispatch!(self, m => m.rhs(t, x, dx))
    }

    fn jacobian(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        dispatch!(self, m => m.jacobian(t, x))
    }

    fn jvp(&self, t: f64, x: &[f64], v: &[f64], out: &mut [f64]) {
        dispatch!(self, m => m.jvp(t, x, v, out))
    }

    fn vjp(&self, t: f64, x: &[f64], w: &[f64], out: &mut [f64]) {
        dispatch!(self, m => m.vjp(t, x, w, out))
    }
}
