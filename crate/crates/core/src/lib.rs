//! Estimation of the distribution of random parameters in a 1D diffusion
//! model of transdermal alcohol transport, from naively pooled
//! breath/transdermal alcohol episodes.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assembly;
pub mod cli;
pub mod config;
pub mod data;
pub mod density;
pub mod error;
pub mod experiments;
pub mod expm;
pub mod forward;
pub mod grid_basis;
pub mod objective;
pub mod optimizer;
pub mod quadrature;
pub mod sampled_system;
pub mod uncertainty;

pub use error::{PopdiffError, Result};
