//! Context-dependent feature selection with conditional stochastic gates.
//!
//! A hypernetwork maps context variables `z` to the means of
//! Gaussian-relaxed Bernoulli gates. The gates mask the explanatory
//! features `x` before a prediction network, and the expected number of
//! open gates is added to the task loss as a differentiable sparsity
//! penalty. The weighted variant adds a linear head that also emits signed
//! per-feature weights.

pub mod error;
pub mod data;
pub mod experiment;
pub mod gates;
pub mod networks;
pub mod objective;
pub mod report;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
