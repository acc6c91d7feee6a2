use std::io;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ipdma_core::harness::{self, RunConfig, RunManifest};
use log::info;

/// Heterogeneity (I²) in one-stage and two-stage IPD meta-analyses of
/// treatment-covariate interactions.
#[derive(Parser)]
#[command(name = "ipdma", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate replicates, fit the models and write all result files.
    Run(RunArgs),
    /// Recompute the performance and agreement tables from a replicates file.
    Summarize(FileArgs),
    /// Write long-format plot data (I² differences and interval zip data).
    Plotdata(FileArgs),
    /// Print the analytic true values for the scenario grid as CSV.
    Truths {
        #[arg(long, default_value = "all")]
        scenario: String,
    },
}

#[derive(Args)]
struct RunArgs {
    /// key = value file; command-line flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario ids: `all`, a list, or ranges such as `1-6,13`.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    reps: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma list of M2, M1s, M1c.
    #[arg(long)]
    models: Option<String>,
    /// Comma list of 1 and 2, or `auto`.
    #[arg(long)]
    estimands: Option<String>,
    /// Worker threads (overrides IPDMA_WORKERS).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record per-fit wall-clock seconds in the replicates file.
    #[arg(long)]
    timing: bool,
    /// Regenerate one replicate `SCENARIO:REP` from a manifest and print its rows.
    #[arg(long, requires = "manifest")]
    replicate: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct FileArgs {
    /// Directory holding replicates.csv; outputs are written here too.
    #[arg(long, default_value = "ipdma-out")]
    out: PathBuf,
    /// Replicates file to read instead of `<out>/replicates.csv`.
    #[arg(long)]
    replicates: Option<PathBuf>,
}

impl FileArgs {
    fn replicates(&self) -> PathBuf {
        self.replicates.clone().unwrap_or_else(|| self.out.join(harness::REPLICATES_FILE))
    }
}

fn run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_kv_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    let pairs = [
        ("scenarios", args.scenario.clone()),
        ("reps", args.reps.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("models", args.models.clone()),
        ("estimands", args.estimands.clone()),
        ("workers", args.workers.map(|v| v.to_string())),
    ];
    for (k, v) in pairs {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    cfg.timing |= args.timing;
    Ok(cfg)
}

fn replay(spec: &str, manifest: &PathBuf) -> Result<()> {
    let (s, r) = spec.split_once(':').context("--replicate expects SCENARIO:REP")?;
    let (s, r): (u32, u32) = (s.trim().parse()?, r.trim().parse()?);
    let m = RunManifest::read(manifest)?;
    let records = m.replay(s, r)?;
    if records.is_empty() {
        bail!("replicate {s}:{r} produced no rows");
    }
    print!("{}", harness::replicates_csv(&records)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run(args) => {
            if let (Some(spec), Some(m)) = (&args.replicate, &args.manifest) {
                return replay(spec, m);
            }
            let cfg = run_config(&args)?;
            let out = harness::run(&cfg)?;
            info!(
                "{} rows, {} failed fits, written to {}",
                out.records.len(),
                out.manifest.failures.len(),
                cfg.out.display()
            );
        }
        Command::Summarize(args) => {
            for w in harness::summarize_file(&args.replicates(), &args.out)? {
                log::warn!("{w}");
            }
            info!("summaries written to {}", args.out.display());
        }
        Command::Plotdata(args) => {
            let records = harness::read_replicates(&args.replicates())?;
            harness::emit_plotdata(&records, &args.out)?;
            info!("plot data written to {}", args.out.display());
        }
        Command::Truths { scenario } => {
            let rows = harness::truths_table(&harness::parse_scenarios(&scenario)?)?;
            harness::write_csv(&rows, io::stdout().lock(), &[
                "scenario_id",
                "num_trials",
                "mean_trial_size",
                "heterogeneity",
                "estimand",
                "tau2",
                "sigma2_avg",
                "i2",
            ])?;
        }
    }
    Ok(())
}
