//! Excursion probabilities of ODE systems with random initial states.
//!
//! The estimator builds an importance-biasing Gaussian mixture from a
//! sequence of Bayesian inverse problems: slope/time pairs are drawn from
//! the Rice upcrossing integrand of a linearized Gaussian approximation,
//! each pair is pulled back to the initial-state space (MAP + Laplace or
//! DRAM posterior sampling), and the resulting components drive an
//! importance-sampling estimate against the fully nonlinear model.
//!
//! The crate is `no_std` and needs only `alloc`. Parallel execution is
//! injected through [`estimate::Executor`].

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
#![cfg_attr(test, allow(unused_imports))]

extern crate alloc;
#[cfg(test)]
#[macro_use]
extern crate std;

pub mod dynamics;
pub mod error;
pub mod estimate;
pub mod gaussproc;
pub mod ibd;
pub mod inverse;
pub mod linalg;
pub mod mcmc;
pub mod optim;
pub mod rng;

pub use error::{Error, Result};
