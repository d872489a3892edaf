//! Euler-Maruyama simulation of dissipative SDEs with empirical verification
//! of the fluctuation theory of their ergodic averages: the CLT of the
//! empirical-measure statistic, the exact martingale-plus-remainder
//! decomposition, and the self-normalized moderate-deviation tail ratio.
//!
//! Everything is deterministic given a master seed: replicas derive
//! independent counter-addressable noise streams, reductions run in replica
//! order, and the worker count never changes a result.

pub mod decomposition;
pub mod ergodic;
pub mod error;
pub mod linalg;
pub mod moderate_deviation;
pub mod parallel;
pub mod quad;
pub mod rng;
pub mod sde;
pub mod stats;
pub mod stein;

pub use error::{Error, Result};
