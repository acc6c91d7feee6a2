//! Linear models fitted by least squares and linear mixed models fitted by
//! restricted maximum likelihood.
//!
//! Supported covariance structures are the ones this study needs: independent
//! random effects on at most two nested grouping factors, and a residual
//! variance that is either common or specific to the levels of a factor.

mod dense;
mod engine;
mod fit;
mod frame;

pub use frame::{DataSource, DataTable, LmmSpec, ModelFrame, RandomBlock, Residual, Term};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::numerics::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LmmError {
    #[error("design matrix is rank deficient at column '{column}'")]
    RankDeficient { column: String },
    #[error("too few rows: {rows} rows for {cols} fixed effects")]
    TooFewRows { rows: usize, cols: usize },
    #[error("marginal covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("unknown variance component '{0}'")]
    UnknownComponent(String),
    #[error("unknown variable '{0}'")]
    UnknownVariable(String),
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("invalid variance components: {0}")]
    InvalidVarComps(String),
    #[error("unsupported model structure: {0}")]
    Unsupported(String),
}

/// Named variance components in model order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarComps {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl VarComps {
    pub fn from_pairs(pairs: &[(&str, f64)]) -> Self {
        Self {
            names: pairs.iter().map(|p| p.0.to_string()).collect(),
            values: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.index(name).map(|i| self.values[i])
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmmFit {
    pub coef_names: Vec<String>,
    pub beta_hat: Vec<f64>,
    pub beta_cov: Matrix,
    pub varcomps: VarComps,
    pub reml_loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub n_obs: usize,
    /// Observed-information standard error of each log-variance.
    pub log_var_se: Vec<Option<f64>>,
}

impl LmmFit {
    pub fn coef(&self, name: &str) -> Option<f64> {
        self.coef_index(name).map(|i| self.beta_hat[i])
    }

    pub fn coef_se(&self, name: &str) -> Option<f64> {
        self.coef_index(name).map(|i| self.beta_cov[(i, i)].sqrt())
    }

    pub fn coef_index(&self, name: &str) -> Option<usize> {
        self.coef_names.iter().position(|n| n == name)
    }
}

/// Options for [`fit_reml_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Compute the observed information of the log-variances (needed for
    /// Wald intervals).
    pub information: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iter: 40, information: true }
    }
}

fn theta_from(frame: &ModelFrame, vc: &VarComps) -> Result<Vec<f64>, LmmError> {
    for name in &vc.names {
        if !frame.varcomp_names().contains(name) {
            return Err(LmmError::UnknownComponent(name.clone()));
        }
    }
    frame
        .varcomp_names()
        .iter()
        .map(|n| vc.get(n).ok_or_else(|| LmmError::InvalidVarComps(format!("missing value for '{n}'"))))
        .collect()
}

/// Restricted log-likelihood at the given variance components.
pub fn reml_loglik(spec: &LmmSpec, data: &dyn DataSource, varcomps: &VarComps) -> Result<f64, LmmError> {
    let frame = ModelFrame::build(spec, data)?;
    frame.reml_loglik(&theta_from(&frame, varcomps)?)
}

/// Ordinary least squares for a model without random effects.
pub fn fit_ols(spec: &LmmSpec, data: &dyn DataSource) -> Result<LmmFit, LmmError> {
    if !spec.random.is_empty() || spec.residual != Residual::Common {
        return Err(LmmError::InvalidSpec(
            "least squares needs no random effects and a common residual".into(),
        ));
    }
    let frame = ModelFrame::build(spec, data)?;
    fit_ols_frame(&frame)
}

fn fit_ols_frame(frame: &ModelFrame) -> Result<LmmFit, LmmError> {
    let (beta, _) = frame.evaluate(&[1.0], true)?.beta.expect("beta requested");
    let rss: f64 = frame.residuals(&beta).iter().map(|(_, r)| r * r).sum();
    let df = (frame.n_obs() - frame.n_coef()) as f64;
    let sigma2 = rss / df;
    finish(frame, vec![sigma2], true, 0, vec![None])
}

fn finish(
    frame: &ModelFrame,
    theta: Vec<f64>,
    converged: bool,
    iterations: usize,
    log_var_se: Vec<Option<f64>>,
) -> Result<LmmFit, LmmError> {
    if theta.iter().all(|&v| v > 0.0) || frame.n_random() > 0 {
        let ev = frame.evaluate(&theta, true)?;
        let (beta, cov) = ev.beta.expect("beta requested");
        return Ok(LmmFit {
            coef_names: frame.coef_names().to_vec(),
            beta_hat: beta,
            beta_cov: cov,
            varcomps: VarComps { names: frame.varcomp_names().to_vec(), values: theta },
            reml_loglik: ev.loglik,
            converged,
            iterations,
            n_obs: frame.n_obs(),
            log_var_se,
        });
    }
    // exact fit: the residual variance is zero, so report the least-squares
    // solution with zero covariance
    let (beta, _) = frame.evaluate(&vec![1.0; theta.len()], true)?.beta.expect("beta requested");
    let p = frame.n_coef();
    Ok(LmmFit {
        coef_names: frame.coef_names().to_vec(),
        beta_hat: beta,
        beta_cov: Matrix::zeros(p, p),
        varcomps: VarComps { names: frame.varcomp_names().to_vec(), values: theta },
        reml_loglik: f64::INFINITY,
        converged,
        iterations,
        n_obs: frame.n_obs(),
        log_var_se,
    })
}

impl ModelFrame {
    /// `(residual group, y − Xβ)` for every row, in frame order.
    pub(crate) fn residuals(&self, beta: &[f64]) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(self.n);
        for blk in &self.blocks {
            let nl = blk.local_cols.len();
            for r in 0..blk.rows {
                let row = &blk.m[r * blk.width..(r + 1) * blk.width];
                let mut fit = 0.0;
                for (k, &j) in blk.local_cols.iter().enumerate() {
                    fit += row[k] * beta[j];
                }
                for (k, &j) in self.global_cols.iter().enumerate() {
                    fit += row[nl + k] * beta[j];
                }
                out.push((blk.resid_group[r], row[blk.width - 1] - fit));
            }
        }
        out
    }

    /// Least-squares residual variances and a fixed fraction of them for the
    /// random effects, scaled by each random column's mean square.
    fn start_values(&self) -> Result<Vec<f64>, LmmError> {
        let n_resid = self.vc_names.len() - self.n_random;
        let mut ones = vec![0.0; self.n_random];
        ones.extend(std::iter::repeat(1.0).take(n_resid));
        let (beta, _) = self.evaluate(&ones, true)?.beta.expect("beta requested");
        let res = self.residuals(&beta);
        let infl = self.n as f64 / (self.n - self.n_coef()) as f64;
        let mut ss = vec![0.0; n_resid];
        for (g, r) in &res {
            ss[*g] += r * r;
        }
        let total = ss.iter().sum::<f64>() * infl / self.n as f64;
        let floor = 1e-6 * self.y_var.max(1e-12);
        let resid: Vec<f64> = ss
            .iter()
            .zip(&self.resid_rows)
            .map(|(s, &cnt)| if cnt > 0 { (s * infl / cnt as f64).max(floor) } else { total.max(floor) })
            .collect();
        let mut msq = vec![0.0; self.n_random];
        let mut cnt = 0usize;
        for blk in &self.blocks {
            for r in 0..blk.rows {
                for (k, &i) in self.block_vc.iter().enumerate() {
                    msq[i] += blk.zb[r * self.qb + k].powi(2);
                }
                for (k, &i) in self.cluster_vc.iter().enumerate() {
                    msq[i] += blk.zc[r * self.qc + k].powi(2);
                }
                cnt += 1;
            }
        }
        let mut theta: Vec<f64> = msq
            .iter()
            .map(|m| {
                let ms = m / cnt as f64;
                if ms > 0.0 {
                    (0.2 * total / ms).max(floor)
                } else {
                    floor
                }
            })
            .collect();
        theta.extend(resid);
        Ok(theta)
    }
}

/// REML fit with a 40-iteration cap.
pub fn fit_reml(spec: &LmmSpec, data: &dyn DataSource, max_iter: usize) -> Result<LmmFit, LmmError> {
    fit_reml_with(spec, data, FitOptions { max_iter, ..FitOptions::default() })
}

pub fn fit_reml_with(spec: &LmmSpec, data: &dyn DataSource, opts: FitOptions) -> Result<LmmFit, LmmError> {
    let frame = ModelFrame::build(spec, data)?;
    fit_frame(&frame, opts)
}

/// REML fit of an already compiled frame.
pub fn fit_frame(frame: &ModelFrame, opts: FitOptions) -> Result<LmmFit, LmmError> {
    if frame.n_random() == 0 && frame.varcomp_names().len() == 1 {
        // the REML residual variance of a fixed-effects model is RSS/(n-p)
        let mut fit = fit_ols_frame(frame)?;
        if opts.information && fit.varcomps.values[0] > 1e-10 {
            let df = (frame.n_obs() - frame.n_coef()) as f64;
            fit.log_var_se = vec![Some((2.0 / df).sqrt())];
        }
        return Ok(fit);
    }
    let start = frame.start_values()?;
    let res = fit::optimize(frame, &start, opts.max_iter, opts.information)?;
    finish(frame, res.theta, res.converged, res.iterations, res.log_se)
}

/// `exp(log v ± z·se)`, or `None` when `v` is at the boundary or `se` is
/// unusable.
pub fn log_wald_interval(v: f64, se_log: Option<f64>, level: f64) -> Option<(f64, f64)> {
    let se = se_log?;
    if !(v > 1e-10) || !se.is_finite() || !(se > 0.0) || !(level > 0.0 && level < 1.0) {
        return None;
    }
    let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.5 + level / 2.0);
    Some((v * (-z * se).exp(), v * (z * se).exp()))
}

/// Wald interval for a variance component on the log scale.
pub fn wald_ci_logvariance(fit: &LmmFit, component: &str, level: f64) -> Result<Option<(f64, f64)>, LmmError> {
    let i = fit
        .varcomps
        .index(component)
        .ok_or_else(|| LmmError::UnknownComponent(component.to_string()))?;
    Ok(log_wald_interval(fit.varcomps.values[i], fit.log_var_se[i], level))
}

#[cfg(test)]
mod tests;
