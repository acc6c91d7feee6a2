//! Monte-Carlo runner: simulate replicates, fit every requested model and
//! write per-replicate, summary and plot-data files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimand::{Estimand, ModelTag};
use crate::lmm::FitOptions;
use crate::meta::{run_one_stage_with, run_two_stage_with, MetaError, MetaResult, ResidualMode};
use crate::numerics::{stream_id, RngStream};
use crate::performance::{
    agreement_table, i2_deltas, summarize, zip_data, AgreementRow, DeltaRecord, PerfError, PerformanceRow,
    ReplicateRecord, ZipRecord,
};
use crate::simgen::{generate_dataset, true_values, ScenarioConfig, SimError, TrueValues, STUDY_SCENARIOS};

pub const WORKERS_ENV: &str = "IPDMA_WORKERS";
pub const REPLICATES_FILE: &str = "replicates.csv";
pub const PERFORMANCE_FILE: &str = "performance.csv";
pub const AGREEMENT_FILE: &str = "agreement.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DELTA_FILE: &str = "i2_delta.csv";
pub const ZIP_FILE: &str = "ci_zip.csv";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Perf(#[from] PerfError),
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenarios: Vec<u32>,
    pub reps: u32,
    pub seed: u64,
    /// `None` runs both estimands where allowed (rate of change only below
    /// 30 trials).
    pub estimands: Option<Vec<Estimand>>,
    pub models: Vec<ModelTag>,
    pub workers: usize,
    pub out: PathBuf,
    /// Record wall-clock seconds per fit in the replicates file. Off by
    /// default so that output files are reproducible byte for byte.
    pub timing: bool,
    pub max_iter: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenarios: vec![1],
            reps: 200,
            seed: 20240601,
            estimands: None,
            models: ModelTag::ALL.to_vec(),
            workers: default_workers(),
            out: PathBuf::from("ipdma-out"),
            timing: false,
            max_iter: 40,
        }
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

pub fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, HarnessError>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<T>().map_err(|e| config_err(format!("'{x}': {e}"))))
        .collect()
}

/// Scenario ids from `all`, a comma list, or ranges such as `1-6,13`.
pub fn parse_scenarios(s: &str) -> Result<Vec<u32>, HarnessError> {
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(STUDY_SCENARIOS.iter().map(|p| p.0).collect());
    }
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
        let parse = |x: &str| x.trim().parse::<u32>().map_err(|e| config_err(format!("scenario '{x}': {e}")));
        match part.split_once('-') {
            Some((a, b)) => out.extend(parse(a)?..=parse(b)?),
            None => out.push(parse(part)?),
        }
    }
    Ok(out)
}

fn parse_bool(s: &str) -> Result<bool, HarnessError> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        other => Err(config_err(format!("'{other}' is not a boolean"))),
    }
}

impl RunConfig {
    /// Applies `key = value` lines on top of the current values. Blank lines
    /// and `#` comments are ignored.
    pub fn apply_kv(&mut self, text: &str) -> Result<(), HarnessError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| config_err(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let num = |v: &str| v.parse::<u64>().map_err(|e| config_err(format!("{key}: {e}")));
        match key {
            "scenarios" | "scenario" => self.scenarios = parse_scenarios(value)?,
            "reps" => self.reps = num(value)? as u32,
            "seed" => self.seed = num(value)?,
            "estimands" => {
                self.estimands = if value.eq_ignore_ascii_case("auto") { None } else { Some(parse_list(value)?) }
            }
            "models" => self.models = parse_list(value)?,
            "workers" => self.workers = num(value)? as usize,
            "out" => self.out = PathBuf::from(value),
            "timing" => self.timing = parse_bool(value)?,
            "max_iter" => self.max_iter = num(value)? as usize,
            other => return Err(config_err(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn from_kv_file(path: &Path) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        cfg.apply_kv(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Takes the worker count from the environment when set.
    pub fn apply_env(&mut self) -> Result<(), HarnessError> {
        if let Ok(v) = std::env::var(WORKERS_ENV) {
            self.workers = v
                .trim()
                .parse()
                .map_err(|e| config_err(format!("{WORKERS_ENV}='{v}': {e}")))?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let join = |xs: Vec<String>| xs.join(",");
        let mut s = String::new();
        s.push_str(&format!("scenarios = {}\n", join(self.scenarios.iter().map(u32::to_string).collect())));
        s.push_str(&format!("reps = {}\nseed = {}\n", self.reps, self.seed));
        match &self.estimands {
            Some(es) => s.push_str(&format!("estimands = {}\n", join(es.iter().map(Estimand::to_string).collect()))),
            None => s.push_str("estimands = auto\n"),
        }
        s.push_str(&format!("models = {}\n", join(self.models.iter().map(ModelTag::to_string).collect())));
        s.push_str(&format!("workers = {}\nout = {}\n", self.workers, self.out.display()));
        s.push_str(&format!("timing = {}\nmax_iter = {}\n", self.timing, self.max_iter));
        s
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.reps == 0 {
            return Err(config_err("reps must be at least 1"));
        }
        if self.scenarios.is_empty() {
            return Err(config_err("no scenarios selected"));
        }
        if self.models.is_empty() {
            return Err(config_err("no models selected"));
        }
        if self.workers == 0 {
            return Err(config_err("workers must be at least 1"));
        }
        if self.reps as u64 > crate::numerics::REPLICATES_PER_SCENARIO {
            return Err(config_err("too many replicates for the stream layout"));
        }
        for &id in &self.scenarios {
            let cfg = ScenarioConfig::study(id)?;
            if let Some(es) = &self.estimands {
                if es.contains(&Estimand::RateOfChange) && cfg.num_trials >= 30 {
                    return Err(config_err(format!(
                        "scenario {id} has {} trials; the rate-of-change estimand is only run below 30",
                        cfg.num_trials
                    )));
                }
            }
        }
        Ok(())
    }

    /// Estimands run for a scenario.
    pub fn estimands_for(&self, scenario: &ScenarioConfig) -> Vec<Estimand> {
        match &self.estimands {
            Some(es) => {
                let mut es = es.clone();
                es.sort();
                es.dedup();
                es
            }
            None if scenario.num_trials < 30 => Estimand::ALL.to_vec(),
            None => vec![Estimand::FinalVisit],
        }
    }

    fn sorted_models(&self) -> Vec<ModelTag> {
        let mut m = self.models.clone();
        m.sort();
        m.dedup();
        m
    }
}

/// Fits one model to one dataset.
pub fn fit_model(
    dataset: &crate::simgen::IpdDataset,
    estimand: Estimand,
    model: ModelTag,
    opts: FitOptions,
) -> Result<MetaResult, MetaError> {
    match model {
        ModelTag::M2 => run_two_stage_with(dataset, estimand, opts),
        ModelTag::M1s => run_one_stage_with(dataset, estimand, ResidualMode::PerTrial, opts),
        ModelTag::M1c => run_one_stage_with(dataset, estimand, ResidualMode::Common, opts),
    }
}

/// A fit that produced no estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFailure {
    pub scenario_id: u32,
    pub rep: u32,
    pub estimand: Estimand,
    pub model: ModelTag,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct ReplicateOutput {
    pub records: Vec<ReplicateRecord>,
    pub failures: Vec<FitFailure>,
    /// Wall-clock seconds per model.
    pub seconds: BTreeMap<ModelTag, f64>,
}

/// Simulates replicate `rep` of `scenario_id` from its own random stream and
/// fits every requested estimand and model to the same dataset.
pub fn run_replicate(
    scenario_id: u32,
    rep: u32,
    seed: u64,
    estimands: &[Estimand],
    models: &[ModelTag],
    opts: FitOptions,
    timing: bool,
) -> Result<ReplicateOutput, HarnessError> {
    let cfg = ScenarioConfig::study(scenario_id)?;
    let mut rng = RngStream::for_replicate(seed, scenario_id as u64, rep as u64);
    let data = generate_dataset(&cfg, &mut rng)?;
    let mut out = ReplicateOutput::default();
    for &estimand in estimands {
        for &model in models {
            let start = Instant::now();
            let res = fit_model(&data, estimand, model, opts);
            let secs = start.elapsed().as_secs_f64();
            *out.seconds.entry(model).or_default() += secs;
            match res {
                Ok(r) => out.records.push(ReplicateRecord::from_result(
                    scenario_id,
                    rep,
                    &r,
                    timing.then_some(secs),
                )),
                Err(e) => {
                    warn!("scenario {scenario_id} rep {rep} estimand {estimand} {model}: {e}");
                    out.failures.push(FitFailure { scenario_id, rep, estimand, model, error: e.to_string() });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSeed {
    pub scenario_id: u32,
    pub rep: u32,
    pub seed: u64,
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub scenario_id: u32,
    pub estimand: Estimand,
    pub model: ModelTag,
    pub fitted: usize,
    pub converged: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: RunConfig,
    pub rng: String,
    pub replicate_seeds: Vec<ReplicateSeed>,
    pub seconds_per_model: BTreeMap<ModelTag, f64>,
    pub tallies: Vec<Tally>,
    pub failures: Vec<FitFailure>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self, HarnessError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// Regenerates the records of one replicate from the manifest alone.
    pub fn replay(&self, scenario_id: u32, rep: u32) -> Result<Vec<ReplicateRecord>, HarnessError> {
        let entry = self
            .replicate_seeds
            .iter()
            .find(|s| s.scenario_id == scenario_id && s.rep == rep)
            .ok_or_else(|| config_err(format!("replicate {scenario_id}:{rep} is not in the manifest")))?;
        let cfg = ScenarioConfig::study(scenario_id)?;
        let opts = FitOptions { max_iter: self.config.max_iter, ..FitOptions::default() };
        let out = run_replicate(
            scenario_id,
            rep,
            entry.seed,
            &self.config.estimands_for(&cfg),
            &self.config.sorted_models(),
            opts,
            false,
        )?;
        Ok(out.records)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<ReplicateRecord>,
    pub manifest: RunManifest,
    pub performance: Vec<PerformanceRow>,
    pub agreement: Vec<AgreementRow>,
}

fn sort_records(records: &mut [ReplicateRecord]) {
    records.sort_by(|a, b| {
        (a.scenario_id, a.rep, a.estimand, a.model).cmp(&(b.scenario_id, b.rep, b.estimand, b.model))
    });
}

/// Simulates and fits every replicate of every scenario without writing files.
pub fn execute(config: &RunConfig) -> Result<RunOutput, HarnessError> {
    config.validate()?;
    let models = config.sorted_models();
    let opts = FitOptions { max_iter: config.max_iter, ..FitOptions::default() };
    let mut jobs = Vec::new();
    for &s in &config.scenarios {
        let cfg = ScenarioConfig::study(s)?;
        let es = config.estimands_for(&cfg);
        for r in 0..config.reps {
            jobs.push((s, r, es.clone()));
        }
    }
    info!("{} replicates on {} workers", jobs.len(), config.workers);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| config_err(format!("thread pool: {e}")))?;
    let outputs: Vec<ReplicateOutput> = pool.install(|| {
        jobs.par_iter()
            .map(|(s, r, es)| run_replicate(*s, *r, config.seed, es, &models, opts, config.timing))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut seconds: BTreeMap<ModelTag, f64> = BTreeMap::new();
    for o in outputs {
        records.extend(o.records);
        failures.extend(o.failures);
        for (m, t) in o.seconds {
            *seconds.entry(m).or_default() += t;
        }
    }
    sort_records(&mut records);

    let mut tallies: BTreeMap<(u32, Estimand, ModelTag), Tally> = BTreeMap::new();
    for r in &records {
        let t = tallies.entry((r.scenario_id, r.estimand, r.model)).or_insert_with(|| Tally {
            scenario_id: r.scenario_id,
            estimand: r.estimand,
            model: r.model,
            fitted: 0,
            converged: 0,
            failed: 0,
        });
        t.fitted += 1;
        t.converged += usize::from(r.converged);
    }
    for f in &failures {
        tallies
            .entry((f.scenario_id, f.estimand, f.model))
            .or_insert_with(|| Tally {
                scenario_id: f.scenario_id,
                estimand: f.estimand,
                model: f.model,
                fitted: 0,
                converged: 0,
                failed: 0,
            })
            .failed += 1;
    }

    let mut warnings = Vec::new();
    let (performance, agreement) = summaries(&records, &mut warnings)?;
    let replicate_seeds = jobs
        .iter()
        .map(|(s, r, _)| ReplicateSeed {
            scenario_id: *s,
            rep: *r,
            seed: config.seed,
            stream: stream_id(*s as u64, *r as u64),
        })
        .collect();
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        rng: "ChaCha20, one stream per (scenario, replicate): stream = scenario * 2^20 + replicate".into(),
        replicate_seeds,
        seconds_per_model: seconds,
        tallies: tallies.into_values().collect(),
        failures,
        warnings,
    };
    Ok(RunOutput { records, manifest, performance, agreement })
}

/// Truths for every scenario present in `records`.
pub fn truths_for(records: &[ReplicateRecord]) -> Result<BTreeMap<(u32, Estimand), TrueValues>, HarnessError> {
    let mut out = BTreeMap::new();
    for r in records {
        if let std::collections::btree_map::Entry::Vacant(e) = out.entry((r.scenario_id, r.estimand)) {
            e.insert(true_values(&ScenarioConfig::study(r.scenario_id)?, r.estimand)?);
        }
    }
    Ok(out)
}

/// One-stage records without a two-stage partner are left out of the
/// agreement table.
fn paired(records: &[ReplicateRecord]) -> Vec<ReplicateRecord> {
    let two: std::collections::BTreeSet<_> = records
        .iter()
        .filter(|r| r.model == ModelTag::M2)
        .map(|r| (r.scenario_id, r.rep, r.estimand))
        .collect();
    records
        .iter()
        .filter(|r| r.model == ModelTag::M2 || two.contains(&(r.scenario_id, r.rep, r.estimand)))
        .cloned()
        .collect()
}

/// Performance and agreement tables. Cells with fewer than two replicates are
/// skipped with a warning.
pub fn summaries(
    records: &[ReplicateRecord],
    warnings: &mut Vec<String>,
) -> Result<(Vec<PerformanceRow>, Vec<AgreementRow>), HarnessError> {
    let truths = truths_for(records)?;
    let mut cells: BTreeMap<(u32, Estimand, ModelTag), usize> = BTreeMap::new();
    for r in records {
        *cells.entry((r.scenario_id, r.estimand, r.model)).or_default() += 1;
    }
    let keep: Vec<ReplicateRecord> = records
        .iter()
        .filter(|r| cells[&(r.scenario_id, r.estimand, r.model)] >= 2)
        .cloned()
        .collect();
    if keep.len() < records.len() {
        let msg = "cells with fewer than 2 replicates were left out of the summaries".to_string();
        warn!("{msg}");
        warnings.push(msg);
    }
    let performance = summarize(&keep, &truths)?;
    let agreement = if keep.iter().any(|r| r.model == ModelTag::M2) {
        agreement_table(&paired(&keep))?
    } else {
        Vec::new()
    };
    Ok((performance, agreement))
}

pub fn write_csv<T: Serialize, W: Write>(rows: &[T], w: W, header: &[&str]) -> Result<(), HarnessError> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(header)?;
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub const REPLICATE_HEADER: [&str; 13] = [
    "scenario_id",
    "rep",
    "estimand",
    "model",
    "theta_hat",
    "tau2_hat",
    "tau2_lo",
    "tau2_hi",
    "sigma2_avg",
    "i2",
    "converged",
    "iterations",
    "seconds",
];
pub const PERFORMANCE_HEADER: [&str; 15] = [
    "scenario_id",
    "estimand",
    "model",
    "parameter",
    "truth",
    "n",
    "mean",
    "bias",
    "bias_mcse",
    "ese",
    "mse",
    "coverage",
    "coverage_mcse",
    "ci_nonmissing",
    "converged",
];
pub const AGREEMENT_HEADER: [&str; 12] =
    ["scenario_id", "estimand", "model", "n", "mean", "mcse", "median", "q1", "q3", "iqr", "min", "max"];
pub const DELTA_HEADER: [&str; 7] =
    ["scenario_id", "rep", "estimand", "model", "i2_one_stage", "i2_two_stage", "i2_delta"];
pub const ZIP_HEADER: [&str; 10] =
    ["scenario_id", "estimand", "model", "rep", "truth", "tau2_hat", "tau2_lo", "tau2_hi", "covered", "centile"];

/// Replicate rows as CSV text, header first.
pub fn replicates_csv(records: &[ReplicateRecord]) -> Result<String, HarnessError> {
    let mut buf = Vec::new();
    write_csv(records, &mut buf, &REPLICATE_HEADER)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub fn read_replicates(path: &Path) -> Result<Vec<ReplicateRecord>, HarnessError> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut out: Vec<ReplicateRecord> = rd.deserialize().collect::<Result<_, _>>()?;
    sort_records(&mut out);
    Ok(out)
}

fn write_file<T: Serialize>(dir: &Path, name: &str, rows: &[T], header: &[&str]) -> Result<(), HarnessError> {
    let f = io::BufWriter::new(fs::File::create(dir.join(name))?);
    write_csv(rows, f, header)
}

pub fn write_summaries(
    dir: &Path,
    performance: &[PerformanceRow],
    agreement: &[AgreementRow],
) -> Result<(), HarnessError> {
    write_file(dir, PERFORMANCE_FILE, performance, &PERFORMANCE_HEADER)?;
    write_file(dir, AGREEMENT_FILE, agreement, &AGREEMENT_HEADER)
}

/// Runs the study and writes replicates, summaries and the manifest.
pub fn run(config: &RunConfig) -> Result<RunOutput, HarnessError> {
    let out = execute(config)?;
    fs::create_dir_all(&config.out)?;
    write_file(&config.out, REPLICATES_FILE, &out.records, &REPLICATE_HEADER)?;
    write_summaries(&config.out, &out.performance, &out.agreement)?;
    fs::write(config.out.join(MANIFEST_FILE), serde_json::to_string_pretty(&out.manifest)?)?;
    Ok(out)
}

/// Recomputes the summary tables from a replicates file.
pub fn summarize_file(replicates: &Path, out_dir: &Path) -> Result<Vec<String>, HarnessError> {
    let records = read_replicates(replicates)?;
    let mut warnings = Vec::new();
    let (p, a) = summaries(&records, &mut warnings)?;
    fs::create_dir_all(out_dir)?;
    write_summaries(out_dir, &p, &a)?;
    Ok(warnings)
}

/// Long-format plot data: per-replicate I² differences and interval zip data.
pub fn plot_data(records: &[ReplicateRecord]) -> Result<(Vec<DeltaRecord>, Vec<ZipRecord>), HarnessError> {
    let deltas = i2_deltas(&paired(records))?;
    let zip = zip_data(records, &truths_for(records)?)?;
    Ok((deltas, zip))
}

pub fn emit_plotdata(records: &[ReplicateRecord], out_dir: &Path) -> Result<(), HarnessError> {
    let (deltas, zip) = plot_data(records)?;
    fs::create_dir_all(out_dir)?;
    write_file(out_dir, DELTA_FILE, &deltas, &DELTA_HEADER)?;
    write_file(out_dir, ZIP_FILE, &zip, &ZIP_HEADER)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub scenario_id: u32,
    pub num_trials: usize,
    pub mean_trial_size: usize,
    pub heterogeneity: String,
    pub estimand: u8,
    pub tau2: f64,
    pub sigma2_avg: f64,
    pub i2: f64,
}

/// True τ², average within-trial variance and I² for the scenario grid.
pub fn truths_table(scenarios: &[u32]) -> Result<Vec<TruthRow>, HarnessError> {
    let mut out = Vec::new();
    for &id in scenarios {
        let cfg = ScenarioConfig::study(id)?;
        let het = STUDY_SCENARIOS.iter().find(|p| p.0 == id).expect("known scenario").3;
        let es: &[Estimand] = if cfg.num_trials < 30 { &Estimand::ALL } else { &[Estimand::FinalVisit] };
        for &e in es {
            let t = true_values(&cfg, e)?;
            out.push(TruthRow {
                scenario_id: id,
                num_trials: cfg.num_trials,
                mean_trial_size: cfg.mean_trial_size(),
                heterogeneity: het.label().to_string(),
                estimand: e.number(),
                tau2: t.tau2,
                sigma2_avg: t.avg_within_var,
                i2: t.i2,
            });
        }
    }
    Ok(out)
}
