//! Simulation and analysis engine for comparing one-stage and two-stage
//! IPD meta-analysis of treatment-covariate interactions.

pub mod estimand;
pub mod harness;
pub mod lmm;
pub mod meta;
pub mod performance;
pub mod numerics;
pub mod simgen;

pub use estimand::{Estimand, ModelTag};
