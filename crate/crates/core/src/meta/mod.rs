//! Two-stage and one-stage meta-analysis of the treatment-by-subgroup
//! interaction, and the heterogeneity summaries shared by both.

pub mod one_stage;
pub mod two_stage;

pub use one_stage::{
    cell_sum_within_var, analysis_rows, build_design, contrast_summary, design_within_var, fit_one_stage, run_one_stage,
    run_one_stage_with, design_within_vars, ContrastSummary, OneStageFit, ResidualMode, TrialContrast,
};
pub use two_stage::{
    fit_trial, fit_trial_e1, fit_trial_e2, pool_reml, profile_ci_tau2, reml_loglik_tau2, run_two_stage, run_two_stage_with,
    EffectEstimate, PooledEstimate,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimand::{Estimand, ModelTag};
use crate::lmm::LmmError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetaError {
    #[error("need at least 2 trials, found {found}")]
    TooFewTrials { found: usize },
    #[error("fixed-effect weights give a non-positive denominator")]
    DegenerateWeights,
    #[error("contrast variable '{variable}' is constant in trial {trial}")]
    ZeroVariance { trial: u32, variable: String },
    #[error("treatment and subgroup are not independent in the trial")]
    IndependenceViolated,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Lmm(#[from] LmmError),
}

/// Two-sided interval whose limits may be individually missing.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

impl ConfidenceInterval {
    pub fn missing() -> Self {
        Self::default()
    }

    pub fn is_complete(&self) -> bool {
        self.lo.is_some() && self.hi.is_some()
    }

    pub fn covers(&self, value: f64) -> Option<bool> {
        match (self.lo, self.hi) {
            (Some(lo), Some(hi)) => Some(lo <= value && value <= hi),
            _ => None,
        }
    }
}

/// Heterogeneity summary of one model fitted to one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaResult {
    pub model: ModelTag,
    pub estimand: Estimand,
    pub tau2_hat: f64,
    pub tau2_ci: ConfidenceInterval,
    pub avg_within_var: f64,
    pub i2: f64,
    pub pooled_theta: f64,
    pub pooled_se: f64,
    /// Trials contributing to the within-trial average, in ascending id order.
    pub trial_ids: Vec<u32>,
    pub fixed_weights: Vec<f64>,
    pub random_weights: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

/// Average within-trial variance from fixed-effect weights `w = 1/σ²`:
/// `(K−1) / (Σw − Σw²/Σw)`.
pub fn avg_within_var(weights: &[f64]) -> Result<f64, MetaError> {
    if weights.len() < 2 {
        return Err(MetaError::TooFewTrials { found: weights.len() });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(MetaError::DegenerateWeights);
    }
    let s1: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    let denom = s1 - s2 / s1;
    if !(denom > 0.0) {
        return Err(MetaError::DegenerateWeights);
    }
    Ok((weights.len() - 1) as f64 / denom)
}

/// Percentage of total variability due to between-trial heterogeneity.
pub fn i_squared(tau2: f64, avg_within_var: f64) -> f64 {
    let tau2 = tau2.max(0.0);
    100.0 * tau2 / (tau2 + avg_within_var)
}
