//! Simulation performance measures and one-stage versus two-stage agreement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimand::{Estimand, ModelTag};
use crate::meta::{i_squared, ConfidenceInterval, MetaResult};
use crate::simgen::TrueValues;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerfError {
    #[error("cell {cell} has {found} records, need at least 2")]
    EmptyCell { cell: String, found: usize },
    #[error("unmatched replicate: {0}")]
    MismatchedPairs(String),
    #[error("inconsistent record: {0}")]
    Inconsistent(String),
    #[error("no true values for scenario {scenario}, estimand {estimand}")]
    MissingTruth { scenario: u32, estimand: Estimand },
}

mod display_str {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        let s = String::deserialize(d)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// One model fitted to one simulated dataset. Field order is the column
/// order of the replicates CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub scenario_id: u32,
    pub rep: u32,
    #[serde(with = "display_str")]
    pub estimand: Estimand,
    #[serde(with = "display_str")]
    pub model: ModelTag,
    pub theta_hat: f64,
    pub tau2_hat: f64,
    pub tau2_lo: Option<f64>,
    pub tau2_hi: Option<f64>,
    pub sigma2_avg: f64,
    pub i2: f64,
    pub converged: bool,
    pub iterations: usize,
    pub seconds: Option<f64>,
}

impl ReplicateRecord {
    pub fn from_result(scenario_id: u32, rep: u32, r: &MetaResult, seconds: Option<f64>) -> Self {
        Self {
            scenario_id,
            rep,
            estimand: r.estimand,
            model: r.model,
            theta_hat: r.pooled_theta,
            tau2_hat: r.tau2_hat,
            tau2_lo: r.tau2_ci.lo,
            tau2_hi: r.tau2_ci.hi,
            sigma2_avg: r.avg_within_var,
            i2: r.i2,
            converged: r.converged,
            iterations: r.iterations,
            seconds,
        }
    }

    pub fn ci(&self) -> ConfidenceInterval {
        ConfidenceInterval { lo: self.tau2_lo, hi: self.tau2_hi }
    }

    /// The stored I² must follow from the stored τ̂² and average within-trial
    /// variance.
    pub fn check(&self) -> Result<(), PerfError> {
        let expect = i_squared(self.tau2_hat, self.sigma2_avg);
        if self.tau2_hat < 0.0 || !(self.sigma2_avg > 0.0) || (expect - self.i2).abs() > 1e-9 * expect.max(1.0) {
            return Err(PerfError::Inconsistent(format!(
                "scenario {} rep {} {} {}: i2 {} vs {}",
                self.scenario_id, self.rep, self.estimand, self.model, self.i2, expect
            )));
        }
        Ok(())
    }

    fn cell(&self) -> (u32, Estimand, ModelTag) {
        (self.scenario_id, self.estimand, self.model)
    }
}

/// Bias, Monte-Carlo error, empirical SE and MSE of one estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measures {
    pub n: usize,
    pub mean: f64,
    pub bias: f64,
    pub bias_mcse: f64,
    /// Sample SD with divisor n−1.
    pub ese: f64,
    /// Mean squared error with divisor n.
    pub mse: f64,
}

pub fn measures(estimates: &[f64], truth: f64) -> Result<Measures, PerfError> {
    let n = estimates.len();
    if n < 2 {
        return Err(PerfError::EmptyCell { cell: "estimates".into(), found: n });
    }
    let nf = n as f64;
    let mean = estimates.iter().sum::<f64>() / nf;
    let ss: f64 = estimates.iter().map(|x| (x - mean).powi(2)).sum();
    let ese = (ss / (nf - 1.0)).sqrt();
    let mse = estimates.iter().map(|x| (x - truth).powi(2)).sum::<f64>() / nf;
    Ok(Measures { n, mean, bias: mean - truth, bias_mcse: ese / nf.sqrt(), ese, mse })
}

/// Coverage among intervals with both limits present.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub proportion: Option<f64>,
    pub mcse: Option<f64>,
    pub n_nonmissing: usize,
    pub n_total: usize,
}

impl Coverage {
    pub fn missing_fraction(&self) -> f64 {
        if self.n_total == 0 {
            return 0.0;
        }
        1.0 - self.n_nonmissing as f64 / self.n_total as f64
    }
}

pub fn coverage(intervals: &[ConfidenceInterval], truth: f64) -> Coverage {
    let flags: Vec<bool> = intervals.iter().filter_map(|ci| ci.covers(truth)).collect();
    let n = flags.len();
    if n == 0 {
        return Coverage { proportion: None, mcse: None, n_nonmissing: 0, n_total: intervals.len() };
    }
    let p = flags.iter().filter(|&&c| c).count() as f64 / n as f64;
    Coverage { proportion: Some(p), mcse: Some((p * (1.0 - p) / n as f64).sqrt()), n_nonmissing: n, n_total: intervals.len() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Parameter {
    #[serde(rename = "tau2")]
    Tau2,
    #[serde(rename = "sigma2_avg")]
    AvgWithinVar,
    #[serde(rename = "i2")]
    I2,
}

impl Parameter {
    pub const ALL: [Parameter; 3] = [Parameter::Tau2, Parameter::AvgWithinVar, Parameter::I2];

    pub fn as_str(self) -> &'static str {
        match self {
            Parameter::Tau2 => "tau2",
            Parameter::AvgWithinVar => "sigma2_avg",
            Parameter::I2 => "i2",
        }
    }

    fn of(self, r: &ReplicateRecord) -> f64 {
        match self {
            Parameter::Tau2 => r.tau2_hat,
            Parameter::AvgWithinVar => r.sigma2_avg,
            Parameter::I2 => r.i2,
        }
    }

    fn truth(self, t: &TrueValues) -> f64 {
        match self {
            Parameter::Tau2 => t.tau2,
            Parameter::AvgWithinVar => t.avg_within_var,
            Parameter::I2 => t.i2,
        }
    }
}

/// One row of the performance table: a scenario, estimand, model and
/// parameter. Coverage fields are filled for τ² only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRow {
    pub scenario_id: u32,
    #[serde(with = "display_str")]
    pub estimand: Estimand,
    #[serde(with = "display_str")]
    pub model: ModelTag,
    pub parameter: Parameter,
    pub truth: f64,
    pub n: usize,
    pub mean: f64,
    pub bias: f64,
    pub bias_mcse: f64,
    pub ese: f64,
    pub mse: f64,
    pub coverage: Option<f64>,
    pub coverage_mcse: Option<f64>,
    pub ci_nonmissing: Option<usize>,
    pub converged: usize,
}

fn group(records: &[ReplicateRecord]) -> BTreeMap<(u32, Estimand, ModelTag), Vec<&ReplicateRecord>> {
    let mut cells: BTreeMap<_, Vec<&ReplicateRecord>> = BTreeMap::new();
    for r in records {
        cells.entry(r.cell()).or_default().push(r);
    }
    cells
}

/// Performance of every model in every scenario cell, ordered by scenario,
/// estimand, model and parameter.
pub fn summarize(
    records: &[ReplicateRecord],
    truths: &BTreeMap<(u32, Estimand), TrueValues>,
) -> Result<Vec<PerformanceRow>, PerfError> {
    let mut out = Vec::new();
    for ((scenario, estimand, model), rs) in group(records) {
        let truth = truths
            .get(&(scenario, estimand))
            .ok_or(PerfError::MissingTruth { scenario, estimand })?;
        for r in &rs {
            r.check()?;
        }
        let converged = rs.iter().filter(|r| r.converged).count();
        for param in Parameter::ALL {
            let xs: Vec<f64> = rs.iter().map(|r| param.of(r)).collect();
            let t = param.truth(truth);
            let m = measures(&xs, t).map_err(|_| PerfError::EmptyCell {
                cell: format!("scenario {scenario} estimand {estimand} {model}"),
                found: xs.len(),
            })?;
            let cov = (param == Parameter::Tau2).then(|| {
                let cis: Vec<ConfidenceInterval> = rs.iter().map(|r| r.ci()).collect();
                coverage(&cis, t)
            });
            out.push(PerformanceRow {
                scenario_id: scenario,
                estimand,
                model,
                parameter: param,
                truth: t,
                n: m.n,
                mean: m.mean,
                bias: m.bias,
                bias_mcse: m.bias_mcse,
                ese: m.ese,
                mse: m.mse,
                coverage: cov.and_then(|c| c.proportion),
                coverage_mcse: cov.and_then(|c| c.mcse),
                ci_nonmissing: cov.map(|c| c.n_nonmissing),
                converged,
            });
        }
    }
    Ok(out)
}

/// Sample quantile by linear interpolation between order statistics
/// (position `(n−1)p`). `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub n: usize,
    pub mean: f64,
    pub mcse: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub min: f64,
    pub max: f64,
}

/// Summary of the differences `I²(one-stage) − I²(two-stage)`.
pub fn agreement_stats(diffs: &[f64]) -> Result<AgreementStats, PerfError> {
    let n = diffs.len();
    if n < 2 {
        return Err(PerfError::EmptyCell { cell: "differences".into(), found: n });
    }
    let mut s = diffs.to_vec();
    s.sort_by(f64::total_cmp);
    let m = measures(diffs, 0.0)?;
    let (q1, q3) = (quantile_sorted(&s, 0.25), quantile_sorted(&s, 0.75));
    Ok(AgreementStats {
        n,
        mean: m.mean,
        mcse: m.bias_mcse,
        median: quantile_sorted(&s, 0.5),
        q1,
        q3,
        iqr: q3 - q1,
        min: s[0],
        max: s[n - 1],
    })
}

/// Agreement from `(one-stage I², two-stage I²)` pairs.
pub fn agreement(pairs: &[(f64, f64)]) -> Result<AgreementStats, PerfError> {
    let diffs: Vec<f64> = pairs.iter().map(|(one, two)| one - two).collect();
    agreement_stats(&diffs)
}

/// Per-replicate I² difference between a one-stage model and the two-stage model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRecord {
    pub scenario_id: u32,
    pub rep: u32,
    #[serde(with = "display_str")]
    pub estimand: Estimand,
    #[serde(with = "display_str")]
    pub model: ModelTag,
    pub i2_one_stage: f64,
    pub i2_two_stage: f64,
    pub i2_delta: f64,
}

/// Pairs every one-stage record with the two-stage record of the same
/// scenario, replicate and estimand.
pub fn i2_deltas(records: &[ReplicateRecord]) -> Result<Vec<DeltaRecord>, PerfError> {
    let mut two: BTreeMap<(u32, u32, Estimand), f64> = BTreeMap::new();
    for r in records.iter().filter(|r| r.model == ModelTag::M2) {
        if two.insert((r.scenario_id, r.rep, r.estimand), r.i2).is_some() {
            return Err(PerfError::MismatchedPairs(format!(
                "duplicate two-stage record for scenario {} rep {} estimand {}",
                r.scenario_id, r.rep, r.estimand
            )));
        }
    }
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.model.is_one_stage()) {
        let i2_two = *two.get(&(r.scenario_id, r.rep, r.estimand)).ok_or_else(|| {
            PerfError::MismatchedPairs(format!(
                "no two-stage record for scenario {} rep {} estimand {}",
                r.scenario_id, r.rep, r.estimand
            ))
        })?;
        out.push(DeltaRecord {
            scenario_id: r.scenario_id,
            rep: r.rep,
            estimand: r.estimand,
            model: r.model,
            i2_one_stage: r.i2,
            i2_two_stage: i2_two,
            i2_delta: r.i2 - i2_two,
        });
    }
    out.sort_by(|a, b| {
        (a.scenario_id, a.estimand, a.model, a.rep).cmp(&(b.scenario_id, b.estimand, b.model, b.rep))
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub scenario_id: u32,
    #[serde(with = "display_str")]
    pub estimand: Estimand,
    #[serde(with = "display_str")]
    pub model: ModelTag,
    pub n: usize,
    pub mean: f64,
    pub mcse: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub min: f64,
    pub max: f64,
}

/// Agreement of each one-stage model with the two-stage model per scenario
/// and estimand.
pub fn agreement_table(records: &[ReplicateRecord]) -> Result<Vec<AgreementRow>, PerfError> {
    let deltas = i2_deltas(records)?;
    let mut cells: BTreeMap<(u32, Estimand, ModelTag), Vec<f64>> = BTreeMap::new();
    for d in &deltas {
        cells.entry((d.scenario_id, d.estimand, d.model)).or_default().push(d.i2_delta);
    }
    cells
        .into_iter()
        .map(|((scenario_id, estimand, model), ds)| {
            let s = agreement_stats(&ds).map_err(|_| PerfError::EmptyCell {
                cell: format!("scenario {scenario_id} estimand {estimand} {model}"),
                found: ds.len(),
            })?;
            Ok(AgreementRow {
                scenario_id,
                estimand,
                model,
                n: s.n,
                mean: s.mean,
                mcse: s.mcse,
                median: s.median,
                q1: s.q1,
                q3: s.q3,
                iqr: s.iqr,
                min: s.min,
                max: s.max,
            })
        })
        .collect()
}

/// Per-replicate interval data for zip plots: intervals ranked by how far
/// the interval centre lies from the truth, with the covered flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZipRecord {
    pub scenario_id: u32,
    #[serde(with = "display_str")]
    pub estimand: Estimand,
    #[serde(with = "display_str")]
    pub model: ModelTag,
    pub rep: u32,
    pub truth: f64,
    pub tau2_hat: f64,
    pub tau2_lo: f64,
    pub tau2_hi: f64,
    pub covered: bool,
    /// Percentile rank of the interval in the cell, 0 to 100.
    pub centile: f64,
}

/// Zip-plot rows for every record with a complete interval.
pub fn zip_data(
    records: &[ReplicateRecord],
    truths: &BTreeMap<(u32, Estimand), TrueValues>,
) -> Result<Vec<ZipRecord>, PerfError> {
    let mut out = Vec::new();
    for ((scenario, estimand, model), rs) in group(records) {
        let truth = truths
            .get(&(scenario, estimand))
            .ok_or(PerfError::MissingTruth { scenario, estimand })?
            .tau2;
        let mut rows: Vec<(f64, &ReplicateRecord, f64, f64)> = rs
            .iter()
            .filter_map(|r| match (r.tau2_lo, r.tau2_hi) {
                (Some(lo), Some(hi)) => {
                    // distance of the truth from the centre in half-widths
                    let half = (hi - lo) / 2.0;
                    let z = if half > 0.0 { ((lo + hi) / 2.0 - truth).abs() / half } else { f64::INFINITY };
                    Some((z, *r, lo, hi))
                }
                _ => None,
            })
            .collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.rep.cmp(&b.1.rep)));
        let n = rows.len();
        for (i, (_, r, lo, hi)) in rows.into_iter().enumerate() {
            out.push(ZipRecord {
                scenario_id: scenario,
                estimand,
                model,
                rep: r.rep,
                truth,
                tau2_hat: r.tau2_hat,
                tau2_lo: lo,
                tau2_hi: hi,
                covered: lo <= truth && truth <= hi,
                centile: if n > 1 { 100.0 * i as f64 / (n - 1) as f64 } else { 0.0 },
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ci(lo: f64, hi: f64) -> ConfidenceInterval {
        ConfidenceInterval { lo: Some(lo), hi: Some(hi) }
    }

    fn record(rep: u32, model: ModelTag, tau2: f64, avg: f64) -> ReplicateRecord {
        ReplicateRecord {
            scenario_id: 1,
            rep,
            estimand: Estimand::FinalVisit,
            model,
            theta_hat: 0.24,
            tau2_hat: tau2,
            tau2_lo: Some(0.0),
            tau2_hi: if rep % 2 == 0 { Some(tau2 + 0.1) } else { None },
            sigma2_avg: avg,
            i2: i_squared(tau2, avg),
            converged: true,
            iterations: 3,
            seconds: None,
        }
    }

    #[test]
    fn exact_estimates() {
        let m = measures(&[1.5; 4], 1.5).unwrap();
        assert_eq!((m.bias, m.ese, m.mse), (0.0, 0.0, 0.0));
    }

    #[test]
    fn two_point_hand_values() {
        let m = measures(&[0.0, 2.0], 1.0).unwrap();
        assert_eq!(m.bias, 0.0);
        assert!((m.ese - 2f64.sqrt()).abs() < 1e-15);
        assert!((m.mse - 1.0).abs() < 1e-15);
        assert!((m.bias_mcse - 1.0).abs() < 1e-15);
        assert!(matches!(measures(&[1.0], 1.0), Err(PerfError::EmptyCell { found: 1, .. })));
    }

    #[test]
    fn coverage_rules() {
        let all = vec![ci(0.0, 2.0); 10];
        let c = coverage(&all, 1.0);
        assert_eq!((c.proportion, c.mcse, c.n_nonmissing), (Some(1.0), Some(0.0), 10));
        let mut half = vec![ci(0.0, 2.0); 5];
        half.extend(vec![ConfidenceInterval::missing(); 5]);
        let c = coverage(&half, 1.0);
        assert_eq!((c.proportion, c.n_nonmissing, c.n_total), (Some(1.0), 5, 10));
        assert_eq!(c.missing_fraction(), 0.5);
        let none = coverage(&[ConfidenceInterval::missing(); 3], 1.0);
        assert_eq!((none.proportion, none.n_nonmissing), (None, 0));
    }

    #[test]
    fn agreement_hand_values() {
        let s = agreement_stats(&[-2.0, -1.0, 0.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.median, s.min, s.max), (-0.5, -0.5, -2.0, 1.0));
        let same = agreement(&[(10.0, 10.0), (3.0, 3.0), (0.0, 0.0)]).unwrap();
        assert_eq!((same.mean, same.mcse, same.median, same.iqr, same.min, same.max), (0.0, 0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn quartiles() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.5), 2.5);
        assert_eq!(quantile_sorted(&s, 0.25), 1.75);
        assert_eq!(quantile_sorted(&s, 0.75), 3.25);
    }

    #[test]
    fn deltas_pair_by_replicate() {
        let mut rs = vec![];
        for rep in 0..3 {
            rs.push(record(rep, ModelTag::M2, 0.1 * rep as f64, 0.3));
            rs.push(record(rep, ModelTag::M1s, 0.1 * rep as f64 + 0.01, 0.3));
        }
        let d = i2_deltas(&rs).unwrap();
        assert_eq!(d.len(), 3);
        for x in &d {
            assert!(x.i2_delta > 0.0);
            assert_eq!(x.i2_delta, x.i2_one_stage - x.i2_two_stage);
        }
        rs.push(record(7, ModelTag::M1c, 0.0, 0.3));
        assert!(matches!(i2_deltas(&rs), Err(PerfError::MismatchedPairs(_))));
    }

    #[test]
    fn summary_table_shape() {
        let rs: Vec<_> = (0..6)
            .flat_map(|rep| [ModelTag::M2, ModelTag::M1s].map(|m| record(rep, m, 0.01 * rep as f64, 0.3)))
            .collect();
        let truths = BTreeMap::from([((1, Estimand::FinalVisit), TrueValues { tau2: 0.0, avg_within_var: 0.3, i2: 0.0 })]);
        let rows = summarize(&rs, &truths).unwrap();
        assert_eq!(rows.len(), 2 * 3);
        let tau = rows.iter().find(|r| r.model == ModelTag::M2 && r.parameter == Parameter::Tau2).unwrap();
        assert_eq!(tau.ci_nonmissing, Some(3));
        assert_eq!(tau.coverage, Some(1.0));
        assert!(rows.iter().filter(|r| r.parameter != Parameter::Tau2).all(|r| r.coverage.is_none()));
        let mut bad = rs.clone();
        bad[0].i2 += 1.0;
        assert!(matches!(summarize(&bad, &truths), Err(PerfError::Inconsistent(_))));
    }

    #[test]
    fn csv_round_trip() {
        let r = record(2, ModelTag::M1c, 0.05, 0.3);
        let mut w = csv::Writer::from_writer(vec![]);
        w.serialize(&r).unwrap();
        let mut miss = r.clone();
        miss.tau2_hi = None;
        w.serialize(&miss).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "scenario_id,rep,estimand,model,theta_hat,tau2_hat,tau2_lo,tau2_hi,sigma2_avg,i2,converged,iterations,seconds"
        );
        assert!(lines[1].starts_with("1,2,1,M1c,"));
        let back: Vec<ReplicateRecord> =
            csv::Reader::from_reader(text.as_bytes()).deserialize().collect::<Result<_, _>>().unwrap();
        assert_eq!(back, vec![r, miss]);
    }

    #[test]
    fn zip_flags_match_intervals() {
        let rs: Vec<_> = (0..8).map(|rep| record(rep, ModelTag::M2, 0.02 * rep as f64, 0.3)).collect();
        let truths = BTreeMap::from([((1, Estimand::FinalVisit), TrueValues { tau2: 0.05, avg_within_var: 0.3, i2: 14.0 })]);
        let z = zip_data(&rs, &truths).unwrap();
        assert_eq!(z.len(), 4);
        for row in &z {
            assert_eq!(row.covered, row.tau2_lo <= 0.05 && 0.05 <= row.tau2_hi);
        }
        assert_eq!(z.last().unwrap().centile, 100.0);
    }

    proptest! {
        #[test]
        fn shift_moves_bias_only(xs in proptest::collection::vec(-5.0f64..5.0, 2..40), c in -3.0f64..3.0, t in -1.0f64..1.0) {
            let a = measures(&xs, t).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let b = measures(&shifted, t).unwrap();
            prop_assert!((b.bias - a.bias - c).abs() < 1e-9);
            prop_assert!((b.ese - a.ese).abs() < 1e-9);
        }

        #[test]
        fn mse_decomposition(xs in proptest::collection::vec(-5.0f64..5.0, 2..40), t in -1.0f64..1.0) {
            let m = measures(&xs, t).unwrap();
            let r = xs.len() as f64;
            prop_assert!((m.mse - (m.bias * m.bias + m.ese * m.ese * (r - 1.0) / r)).abs() < 1e-12 * m.mse.max(1.0) * 10.0);
            prop_assert!(m.mse >= m.bias * m.bias - 1e-12);
        }

        #[test]
        fn widening_never_lowers_coverage(
            ivs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..30),
            widen in 0.0f64..0.5,
            truth in 0.0f64..1.0,
        ) {
            let narrow: Vec<_> = ivs.iter().map(|(a, b)| ci(a.min(*b), a.max(*b))).collect();
            let wide: Vec<_> = narrow.iter().map(|c| ci(c.lo.unwrap() - widen, c.hi.unwrap() + widen)).collect();
            let (p, q) = (coverage(&narrow, truth).proportion.unwrap(), coverage(&wide, truth).proportion.unwrap());
            prop_assert!(q >= p);
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn agreement_order_statistics(xs in proptest::collection::vec(-30.0f64..5.0, 2..50)) {
            let s = agreement_stats(&xs).unwrap();
            prop_assert!(s.min <= s.q1 && s.q1 <= s.median && s.median <= s.q3 && s.q3 <= s.max);
            prop_assert!(s.iqr >= 0.0);
        }
    }
}
