//! Multi-trial IPD data generation and the analytic population targets.
//!
//! Each trial draws a trial-specific deviation of the treatment-by-subgroup-by-time
//! slope, an active-arm size, and a subgroup indicator for every active
//! participant. The placebo arm is a matched copy of the active arm (same
//! subgroup mix), so treatment is exactly 1:1 within each subgroup. Every
//! participant is seen at `num_visits` equally spaced visits and the outcome is
//!
//! ```text
//! y = a·z·t·(beta1 + u1_trial) + beta2·t + beta3·a·t + u2_participant + e
//! ```
//!
//! rounded to `outcome_round`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimand::Estimand;
use crate::numerics::RngStream;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown scenario id {0} (expected 1..=14)")]
    UnknownScenario(u32),
    #[error("unsupported scenario for analytic truths: {0}")]
    UnsupportedScenario(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Between-trial heterogeneity level of the scenario grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heterogeneity {
    None,
    Low,
    High,
}

impl Heterogeneity {
    /// Variance of the trial-specific slope deviation.
    pub fn variance(self) -> f64 {
        match self {
            Heterogeneity::None => 0.0,
            Heterogeneity::Low => 0.01,
            Heterogeneity::High => 0.05,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Heterogeneity::None => "None",
            Heterogeneity::Low => "Low",
            Heterogeneity::High => "High",
        }
    }
}

/// (id, trials, mean participants per trial, heterogeneity), in the order of the
/// published convergence table.
pub const STUDY_SCENARIOS: [(u32, usize, usize, Heterogeneity); 14] = [
    (1, 4, 90, Heterogeneity::None),
    (2, 4, 90, Heterogeneity::Low),
    (3, 4, 90, Heterogeneity::High),
    (4, 4, 400, Heterogeneity::None),
    (5, 4, 400, Heterogeneity::Low),
    (6, 4, 400, Heterogeneity::High),
    (7, 16, 90, Heterogeneity::None),
    (8, 16, 90, Heterogeneity::Low),
    (9, 16, 90, Heterogeneity::High),
    (10, 16, 400, Heterogeneity::None),
    (11, 16, 400, Heterogeneity::Low),
    (12, 16, 400, Heterogeneity::High),
    (13, 30, 90, Heterogeneity::High),
    (14, 30, 400, Heterogeneity::High),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub num_trials: usize,
    /// Mean participants per treatment arm; trials average twice this.
    pub mean_arm_size: usize,
    pub arm_size_sd: f64,
    /// Variance of the trial-specific interaction slope deviation.
    pub het_var: f64,
    pub pr_subgroup: f64,
    pub participant_intercept_var: f64,
    pub residual_var: f64,
    pub num_visits: usize,
    /// Years between visits.
    pub visit_spacing: f64,
    pub beta1: f64,
    /// Time slope in the control group.
    pub beta2: f64,
    pub beta3: f64,
    /// Outcome rounding step (0 disables rounding).
    pub outcome_round: f64,
}

impl ScenarioConfig {
    /// Scenario with the fixed design constants and the given grid factors.
    pub fn new(num_trials: usize, mean_trial_size: usize, het_var: f64) -> Self {
        Self {
            num_trials,
            mean_arm_size: mean_trial_size / 2,
            arm_size_sd: 10.0,
            het_var,
            pr_subgroup: 0.375,
            participant_intercept_var: 4.0,
            residual_var: 1.0,
            num_visits: 5,
            visit_spacing: 0.5,
            beta1: 0.12,
            beta2: -0.4,
            beta3: 0.12,
            outcome_round: 0.01,
        }
    }

    pub fn study(id: u32) -> Result<Self, SimError> {
        STUDY_SCENARIOS
            .iter()
            .find(|s| s.0 == id)
            .map(|&(_, k, n, het)| Self::new(k, n, het.variance()))
            .ok_or(SimError::UnknownScenario(id))
    }

    pub fn mean_trial_size(&self) -> usize {
        2 * self.mean_arm_size
    }

    pub fn visit_times(&self) -> Vec<f64> {
        (0..self.num_visits).map(|g| g as f64 * self.visit_spacing).collect()
    }

    pub fn final_visit(&self) -> f64 {
        (self.num_visits.saturating_sub(1)) as f64 * self.visit_spacing
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.num_trials < 2 {
            return bad("num_trials must be at least 2");
        }
        if self.mean_arm_size < 2 {
            return bad("mean_arm_size must be at least 2");
        }
        if self.num_visits < 1 {
            return bad("num_visits must be at least 1");
        }
        for (name, v) in [
            ("arm_size_sd", self.arm_size_sd),
            ("het_var", self.het_var),
            ("participant_intercept_var", self.participant_intercept_var),
            ("residual_var", self.residual_var),
            ("outcome_round", self.outcome_round),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(&format!("{name} must be a finite non-negative number"));
            }
        }
        if !(self.pr_subgroup > 0.0 && self.pr_subgroup < 1.0) {
            return bad("pr_subgroup must lie strictly between 0 and 1");
        }
        if !(self.visit_spacing > 0.0) {
            return bad("visit_spacing must be positive");
        }
        Ok(())
    }
}

/// One row of long-format IPD: one participant at one visit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub trial: u32,
    pub id: u32,
    pub t: f64,
    pub a: u8,
    pub z: u8,
    pub y: f64,
    pub y0: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IpdDataset {
    pub rows: Vec<Observation>,
}

impl IpdDataset {
    pub fn new(rows: Vec<Observation>) -> Self {
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct trial ids in ascending order.
    pub fn trial_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.rows.iter().map(|r| r.trial).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn num_trials(&self) -> usize {
        self.trial_ids().len()
    }

    pub fn num_participants(&self) -> usize {
        let mut ids: Vec<u32> = self.rows.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    pub fn trial(&self, trial: u32) -> IpdDataset {
        self.filter(|r| r.trial == trial)
    }

    /// Rows observed at visit time `t`.
    pub fn at_visit(&self, t: f64) -> IpdDataset {
        self.filter(|r| (r.t - t).abs() < 1e-9)
    }

    pub fn final_visit(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.t).fold(None, |m, t| match m {
            None => Some(t),
            Some(v) => Some(if t > v { t } else { v }),
        })
    }

    pub fn baseline_visit(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.t).fold(None, |m, t| match m {
            None => Some(t),
            Some(v) => Some(if t < v { t } else { v }),
        })
    }

    pub fn filter(&self, keep: impl Fn(&Observation) -> bool) -> IpdDataset {
        IpdDataset::new(self.rows.iter().filter(|r| keep(r)).copied().collect())
    }

    /// CSV with header `trial,id,t,a,z,y,y0`; floats use the shortest
    /// representation that parses back to the same bits.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, SimError> {
        let mut rdr = csv::Reader::from_reader(r);
        let rows = rdr.deserialize().collect::<Result<Vec<Observation>, _>>()?;
        Ok(Self::new(rows))
    }
}

/// A dataset plus the latent trial-level draws that produced it.
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub dataset: IpdDataset,
    pub trial_slope_deviations: Vec<f64>,
    pub arm_sizes: Vec<usize>,
}

/// Truncate a normal arm-size draw toward zero and keep at least two
/// participants.
pub fn integerize_arm_size(draw: f64) -> usize {
    let t = draw.trunc();
    if t.is_nan() || t < 2.0 {
        2
    } else {
        t as usize
    }
}

pub fn generate_arm_sizes(config: &ScenarioConfig, rng: &mut RngStream) -> Vec<usize> {
    (0..config.num_trials)
        .map(|_| integerize_arm_size(rng.normal(config.mean_arm_size as f64, config.arm_size_sd)))
        .collect()
}

pub fn round_to(v: f64, step: f64) -> f64 {
    if step <= 0.0 {
        return v;
    }
    let inv = (1.0 / step).round();
    if inv >= 1.0 && (inv * step - 1.0).abs() < 1e-12 {
        // integer reciprocal: divide so the result is the double nearest k/inv,
        // i.e. exactly what parsing the printed decimal gives back
        (v * inv).round() / inv
    } else {
        (v / step).round() * step
    }
}

pub fn generate_dataset(config: &ScenarioConfig, rng: &mut RngStream) -> Result<IpdDataset, SimError> {
    Ok(generate_dataset_detailed(config, rng)?.dataset)
}

pub fn generate_dataset_detailed(
    config: &ScenarioConfig,
    rng: &mut RngStream,
) -> Result<GeneratedDataset, SimError> {
    config.validate()?;
    let k = config.num_trials;
    let slope_sd = config.het_var.sqrt();
    let u2_sd = config.participant_intercept_var.sqrt();
    let e_sd = config.residual_var.sqrt();
    let times = config.visit_times();

    let deviations: Vec<f64> = (0..k).map(|_| rng.normal(0.0, slope_sd)).collect();
    let arm_sizes = generate_arm_sizes(config, rng);

    let total: usize = arm_sizes.iter().map(|n| 2 * n * times.len()).sum();
    let mut rows = Vec::with_capacity(total);
    let mut next_id: u32 = 1;
    for (j, (&u1, &n_arm)) in deviations.iter().zip(&arm_sizes).enumerate() {
        let trial = (j + 1) as u32;
        let subgroup: Vec<u8> = (0..n_arm)
            .map(|_| u8::from(rng.uniform() < config.pr_subgroup))
            .collect();
        for z in [0u8, 1u8] {
            let m = subgroup.iter().filter(|&&s| s == z).count();
            // matched placebo copy of the active arm; latter half of the
            // doubled cell gets active treatment
            for slot in 0..2 * m {
                let a = u8::from(slot >= m);
                let id = next_id;
                next_id += 1;
                let u2 = rng.normal(0.0, u2_sd);
                let start = rows.len();
                for &t in &times {
                    let e = rng.normal(0.0, e_sd);
                    let (af, zf) = (f64::from(a), f64::from(z));
                    let raw = af * zf * t * (config.beta1 + u1)
                        + config.beta2 * t
                        + config.beta3 * af * t
                        + u2
                        + e;
                    rows.push(Observation {
                        trial,
                        id,
                        t,
                        a,
                        z,
                        y: round_to(raw, config.outcome_round),
                        y0: f64::NAN,
                    });
                }
                let y0 = rows[start].y;
                for r in &mut rows[start..] {
                    r.y0 = y0;
                }
            }
        }
    }
    Ok(GeneratedDataset {
        dataset: IpdDataset::new(rows),
        trial_slope_deviations: deviations,
        arm_sizes,
    })
}

/// Population targets for one scenario and estimand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueValues {
    pub tau2: f64,
    pub avg_within_var: f64,
    pub i2: f64,
}

/// Population variance (divisor N).
pub fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Analytic tau², average within-trial variance and I² implied by the
/// data-generating mechanism at the mean trial size.
pub fn true_values(config: &ScenarioConfig, estimand: Estimand) -> Result<TrueValues, SimError> {
    config.validate()?;
    let n = config.mean_trial_size() as f64;
    let var_a = 0.25;
    let p = config.pr_subgroup;
    let var_z = p * (1.0 - p);
    let (tau2, avg) = match estimand {
        Estimand::FinalVisit => {
            if config.num_visits < 2 {
                return Err(SimError::UnsupportedScenario(
                    "final-visit contrast needs a baseline and a later visit".into(),
                ));
            }
            let tf = config.final_visit();
            let total = config.participant_intercept_var + config.residual_var;
            if total <= 0.0 {
                return Err(SimError::UnsupportedScenario(
                    "outcome variance is zero".into(),
                ));
            }
            // residual variance of the final outcome given the baseline outcome
            let cond = total - config.participant_intercept_var.powi(2) / total;
            (tf * tf * config.het_var, cond / (n * var_a * var_z))
        }
        Estimand::RateOfChange => {
            if config.num_visits < 2 {
                return Err(SimError::UnsupportedScenario(
                    "rate of change needs at least two visits".into(),
                ));
            }
            let var_t = population_variance(&config.visit_times());
            let g = config.num_visits as f64;
            (config.het_var, config.residual_var / (n * g * var_a * var_z * var_t))
        }
    };
    if !(avg > 0.0) {
        return Err(SimError::UnsupportedScenario(
            "within-trial variance is zero".into(),
        ));
    }
    Ok(TrueValues {
        tau2,
        avg_within_var: avg,
        i2: 100.0 * tau2 / (tau2 + avg),
    })
}
