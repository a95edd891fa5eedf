//! File formats, parallel execution and the command-line front end for
//! `excursia-core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod config;
pub mod error;
pub mod exec;
pub mod model;
pub mod output;

/// Version tag of every JSON document written.
pub const SCHEMA: &str = "excursia/v1";
