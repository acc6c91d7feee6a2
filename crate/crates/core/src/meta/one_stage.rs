//! All trials in one mixed model, with the within-trial variance of the
//! interaction approximated from the residual variance and the contrast design.

use log::warn;
use serde::{Deserialize, Serialize};

use super::{avg_within_var, i_squared, ConfidenceInterval, MetaError, MetaResult};
use crate::estimand::{Estimand, ModelTag};
use crate::lmm::{wald_ci_logvariance, fit_reml_with, FitOptions, LmmFit, LmmSpec, RandomBlock, Residual, Term};
use crate::simgen::{population_variance, IpdDataset};

/// Residual variance structure of the one-stage model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResidualMode {
    PerTrial,
    Common,
}

impl ResidualMode {
    pub fn model_tag(self) -> ModelTag {
        match self {
            ResidualMode::PerTrial => ModelTag::M1s,
            ResidualMode::Common => ModelTag::M1c,
        }
    }
}

/// Rows entering the model: final-visit rows for the final-visit contrast,
/// every visit for the rate-of-change contrast.
pub fn analysis_rows(dataset: &IpdDataset, estimand: Estimand) -> IpdDataset {
    match estimand {
        Estimand::FinalVisit => match dataset.final_visit() {
            Some(tf) => dataset.at_visit(tf),
            None => dataset.clone(),
        },
        Estimand::RateOfChange => dataset.clone(),
    }
}

fn interaction_vars(estimand: Estimand) -> &'static [&'static str] {
    match estimand {
        Estimand::FinalVisit => &["a", "z"],
        Estimand::RateOfChange => &["a", "z", "t"],
    }
}

/// Shared interaction column, trial-specific copies of every other fixed
/// effect and a trial-level random slope on the interaction without a random
/// intercept.
pub fn build_design(dataset: &IpdDataset, estimand: Estimand, mode: ResidualMode) -> Result<LmmSpec, MetaError> {
    let k = dataset.num_trials();
    if k < 2 {
        return Err(MetaError::TooFewTrials { found: k });
    }
    let inter = interaction_vars(estimand);
    let mut fixed = vec![Term::product(inter)];
    let per_trial: &[&[&str]] = match estimand {
        Estimand::FinalVisit => &[&["a"], &["z"], &["y0"], &[]],
        Estimand::RateOfChange => &[&["a", "t"], &["z", "t"], &["t"], &["a"], &["z"], &["a", "z"], &[]],
    };
    fixed.extend(per_trial.iter().map(|v| Term::by_level("trial", v)));
    let mut spec = LmmSpec::new("y", fixed).with_random(RandomBlock::slope("trial", inter));
    if estimand == Estimand::RateOfChange {
        spec = spec.with_random(RandomBlock::intercept("id"));
    }
    if mode == ResidualMode::PerTrial {
        spec = spec.with_residual(Residual::ByGroup("trial".into()));
    }
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneStageFit {
    pub fit: LmmFit,
    /// Name of the trial-level slope variance component.
    pub tau2_component: String,
    pub tau2_hat: f64,
    /// Per-trial residual variances in `residual_trials` order, or a single
    /// common value.
    pub residual_vars: Vec<f64>,
    pub residual_trials: Vec<u32>,
    pub theta_hat: f64,
    pub theta_se: f64,
}

impl OneStageFit {
    /// Residual variance that applies to `trial`.
    pub fn residual_var(&self, trial: u32) -> Option<f64> {
        if self.residual_trials.is_empty() {
            return self.residual_vars.first().copied();
        }
        let i = self.residual_trials.iter().position(|&t| t == trial)?;
        Some(self.residual_vars[i])
    }
}

/// REML fit of a design from [`build_design`] to the analysis rows.
pub fn fit_one_stage(spec: &LmmSpec, rows: &IpdDataset, opts: FitOptions) -> Result<OneStageFit, MetaError> {
    let slope = spec
        .random
        .iter()
        .find(|b| b.factor == "trial" && !b.intercept && b.slopes.len() == 1)
        .ok_or_else(|| MetaError::InvalidInput("design has no trial-level random slope".into()))?;
    let inter = slope.slopes[0].join("*");
    let tau2_component = format!("trial:{inter}");
    let fit = fit_reml_with(spec, rows, opts)?;
    let tau2_hat = fit.varcomps.get(&tau2_component).expect("slope component").max(0.0);
    let mut residual_vars = Vec::new();
    let mut residual_trials = Vec::new();
    for (name, v) in fit.varcomps.iter() {
        if name == "residual" {
            residual_vars.push(v);
        } else if let Some(level) = name.strip_prefix("residual:trial=") {
            let id: f64 = level
                .parse()
                .map_err(|_| MetaError::InvalidInput(format!("unexpected trial label '{level}'")))?;
            residual_trials.push(id as u32);
            residual_vars.push(v);
        }
    }
    let theta_hat = fit.coef(&inter).expect("interaction column");
    let theta_se = fit.coef_se(&inter).expect("interaction column");
    Ok(OneStageFit { fit, tau2_component, tau2_hat, residual_vars, residual_trials, theta_hat, theta_se })
}

/// Contrast design of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialContrast {
    pub trial: u32,
    pub n_obs: usize,
    /// Population variances of the contrast variables.
    pub variances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastSummary {
    pub estimand: Estimand,
    pub variables: Vec<String>,
    pub trials: Vec<TrialContrast>,
}

fn contrast_rows(dataset: &IpdDataset, estimand: Estimand) -> IpdDataset {
    match estimand {
        // one row per participant; baseline and final rows share participants
        Estimand::FinalVisit => match dataset.baseline_visit() {
            Some(t0) => dataset.at_visit(t0),
            None => dataset.clone(),
        },
        Estimand::RateOfChange => dataset.clone(),
    }
}

fn summarize(dataset: &IpdDataset, estimand: Estimand) -> ContrastSummary {
    let vars = interaction_vars(estimand);
    let rows = contrast_rows(dataset, estimand);
    let trials = rows
        .trial_ids()
        .into_iter()
        .map(|id| {
            let tr = rows.trial(id);
            let variances = vars
                .iter()
                .map(|&v| {
                    let xs: Vec<f64> = tr
                        .rows
                        .iter()
                        .map(|r| match v {
                            "a" => f64::from(r.a),
                            "z" => f64::from(r.z),
                            _ => r.t,
                        })
                        .collect();
                    population_variance(&xs)
                })
                .collect();
            TrialContrast { trial: id, n_obs: tr.len(), variances }
        })
        .collect();
    ContrastSummary { estimand, variables: vars.iter().map(|s| s.to_string()).collect(), trials }
}

impl TrialContrast {
    fn check(&self, variables: &[String]) -> Result<(), MetaError> {
        for (v, name) in self.variances.iter().zip(variables) {
            if !(*v > 0.0) {
                return Err(MetaError::ZeroVariance { trial: self.trial, variable: name.clone() });
            }
        }
        Ok(())
    }
}

/// Per-trial row counts and population variances of the contrast variables.
pub fn contrast_summary(dataset: &IpdDataset, estimand: Estimand) -> Result<ContrastSummary, MetaError> {
    let s = summarize(dataset, estimand);
    for t in &s.trials {
        t.check(&s.variables)?;
    }
    Ok(s)
}

/// `σ²_e / (n · ∏ var(X_p))`.
pub fn design_within_var(residual_var: f64, n_obs: usize, variances: &[f64]) -> Result<f64, MetaError> {
    if !(residual_var > 0.0) || n_obs == 0 {
        return Err(MetaError::InvalidInput(format!(
            "need positive residual variance and rows, got {residual_var} and {n_obs}"
        )));
    }
    if variances.iter().any(|v| !(*v > 0.0)) {
        return Err(MetaError::ZeroVariance { trial: 0, variable: "contrast".into() });
    }
    Ok(residual_var / (n_obs as f64 * variances.iter().product::<f64>()))
}

/// Approximate within-trial variance for every trial in `summary`.
/// `residual_vars` holds one common value or one value per trial.
pub fn design_within_vars(summary: &ContrastSummary, residual_vars: &[f64]) -> Result<Vec<f64>, MetaError> {
    if residual_vars.len() != 1 && residual_vars.len() != summary.trials.len() {
        return Err(MetaError::InvalidInput(format!(
            "{} residual variances for {} trials",
            residual_vars.len(),
            summary.trials.len()
        )));
    }
    summary
        .trials
        .iter()
        .enumerate()
        .map(|(i, t)| {
            t.check(&summary.variables)?;
            let s2 = residual_vars[if residual_vars.len() == 1 { 0 } else { i }];
            design_within_var(s2, t.n_obs, &t.variances)
        })
        .collect()
}

/// Variance of the interaction as the sum of the four cell-mean variances,
/// valid only when treatment and subgroup are exactly independent.
pub fn cell_sum_within_var(trial: &IpdDataset, residual_var: f64) -> Result<f64, MetaError> {
    if trial.num_trials() != 1 {
        return Err(MetaError::InvalidInput("expected a single trial".into()));
    }
    let first_t = trial.rows.first().map(|r| r.t);
    if trial.rows.iter().any(|r| Some(r.t) != first_t) {
        return Err(MetaError::InvalidInput("expected a single visit".into()));
    }
    let mut cells = [[0usize; 2]; 2];
    for r in &trial.rows {
        cells[r.z as usize][r.a as usize] += 1;
    }
    let n = trial.len();
    let nz = [cells[0][0] + cells[0][1], cells[1][0] + cells[1][1]];
    let na = [cells[0][0] + cells[1][0], cells[0][1] + cells[1][1]];
    let mut sum = 0.0;
    for z in 0..2 {
        for a in 0..2 {
            if cells[z][a] * n != nz[z] * na[a] {
                return Err(MetaError::IndependenceViolated);
            }
            if cells[z][a] == 0 {
                return Err(MetaError::ZeroVariance { trial: trial.rows[0].trial, variable: "cell".into() });
            }
            sum += 1.0 / cells[z][a] as f64;
        }
    }
    Ok(residual_var * sum)
}

pub fn run_one_stage(dataset: &IpdDataset, estimand: Estimand, mode: ResidualMode) -> Result<MetaResult, MetaError> {
    run_one_stage_with(dataset, estimand, mode, FitOptions::default())
}

pub fn run_one_stage_with(
    dataset: &IpdDataset,
    estimand: Estimand,
    mode: ResidualMode,
    opts: FitOptions,
) -> Result<MetaResult, MetaError> {
    // a trial without variation in a contrast variable cannot inform the
    // interaction and would make the design rank deficient
    let summary = summarize(dataset, estimand);
    let mut warnings = Vec::new();
    let mut kept = Vec::new();
    for t in &summary.trials {
        match t.check(&summary.variables) {
            Ok(()) => kept.push(t),
            Err(err) => {
                let msg = format!("trial {} excluded from the one-stage model: {err}", t.trial);
                warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    let trial_ids: Vec<u32> = kept.iter().map(|t| t.trial).collect();
    let reduced;
    let data = if kept.len() == summary.trials.len() {
        dataset
    } else {
        reduced = dataset.filter(|o| trial_ids.contains(&o.trial));
        &reduced
    };

    let spec = build_design(data, estimand, mode)?;
    let rows = analysis_rows(data, estimand);
    let fit = fit_one_stage(&spec, &rows, opts)?;
    let ci = match wald_ci_logvariance(&fit.fit, &fit.tau2_component, 0.95)? {
        Some((lo, hi)) => ConfidenceInterval { lo: Some(lo), hi: Some(hi) },
        None => ConfidenceInterval::missing(),
    };
    let within = kept
        .iter()
        .map(|t| {
            let s2 = fit
                .residual_var(t.trial)
                .ok_or_else(|| MetaError::InvalidInput(format!("no residual variance for trial {}", t.trial)))?;
            design_within_var(s2, t.n_obs, &t.variances)
        })
        .collect::<Result<Vec<f64>, MetaError>>()?;
    if !fit.fit.converged {
        warnings.push(format!("REML stopped after {} iterations without converging", fit.fit.iterations));
    }
    let fixed: Vec<f64> = within.iter().map(|v| 1.0 / v).collect();
    let avg = avg_within_var(&fixed)?;
    let random = within.iter().map(|v| 1.0 / (v + fit.tau2_hat)).collect();
    Ok(MetaResult {
        model: mode.model_tag(),
        estimand,
        tau2_hat: fit.tau2_hat,
        tau2_ci: ci,
        avg_within_var: avg,
        i2: i_squared(fit.tau2_hat, avg),
        pooled_theta: fit.theta_hat,
        pooled_se: fit.theta_se,
        trial_ids,
        fixed_weights: fixed,
        random_weights: random,
        converged: fit.fit.converged,
        iterations: fit.fit.iterations,
        warnings,
    })
}
