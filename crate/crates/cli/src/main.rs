//! Command-line harness for convergence-rate experiments on sigmoid-gated
//! mixtures of multinomial logistic experts.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sgmoe_core::config::{preset_config, RunConfig};
use sgmoe_core::estimation::{em_fit, InitConfig};
use sgmoe_core::experiments::{
    run_sweep_with, Execution, RateFit, RegressionOptions, RegressionTarget, SweepRecord,
};
use sgmoe_core::plot::{write_loglog_svg, PlotSeries};
use sgmoe_core::presets::Preset;
use sgmoe_core::report::{
    read_records_csv, write_records_csv, write_summary, RunManifest, Summary,
};
use sgmoe_core::sampling::{read_dataset_csv, sample_dataset, write_dataset_csv, SampleConfig};
use sgmoe_core::verify::run_property_suite;
use sgmoe_core::Error;

#[derive(Parser)]
#[command(
    name = "sgmoe",
    version,
    about = "Sigmoid-gated MoE estimation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset from the configured truth and write it as CSV
    Simulate {
        #[command(flatten)]
        source: ConfigSource,
        /// Sample size
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one model by EM and print its loss against the truth
    Fit {
        #[command(flatten)]
        source: ConfigSource,
        /// Dataset CSV written by `simulate`; sampled from the truth when absent
        #[arg(long)]
        data: Option<PathBuf>,
        /// Sample size when sampling
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        /// Sampling seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of fitted atoms
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Seed of the perturbed initialization
        #[arg(long)]
        init_seed: Option<u64>,
    },
    /// Run the replicated sample-size sweep and write records, summary and plots
    Sweep {
        #[command(flatten)]
        source: ConfigSource,
        /// Output directory (overrides `output.dir`)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: all cores)
        #[arg(long)]
        threads: Option<usize>,
        /// Run replications one after another
        #[arg(long)]
        sequential: bool,
        /// Suppress per-replication progress lines
        #[arg(long, short)]
        quiet: bool,
    },
    /// Recompute summary and plots from records CSV files
    Report {
        /// Records CSV; repeat to overlay several sweeps
        #[arg(long = "records", required = true)]
        records: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Smallest sample sizes left out of each regression
        #[arg(long, default_value_t = 0)]
        trim_leading: usize,
        #[arg(long, value_enum, default_value_t = Target::LogOfMean)]
        target: Target,
        /// Skip the plots
        #[arg(long)]
        no_plot: bool,
    },
    /// Run the built-in property suite
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ConfigSource {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shipped truth table with default settings
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    SigmoidComparison,
    SoftmaxComparison,
    TemperatureInner,
    TemperatureEuclidean,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Preset {
        match p {
            PresetArg::SigmoidComparison => Preset::SigmoidComparison,
            PresetArg::SoftmaxComparison => Preset::SoftmaxComparison,
            PresetArg::TemperatureInner => Preset::TemperatureInner,
            PresetArg::TemperatureEuclidean => Preset::TemperatureEuclidean,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    LogOfMean,
    MeanOfLog,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let usage = e
            .chain()
            .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config { .. })));
        if usage {
            Failure::Usage(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::from(anyhow::Error::new(e))
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Simulate {
            source,
            n,
            seed,
            out,
        } => simulate(&source, n, seed, &out),
        Command::Fit {
            source,
            data,
            n,
            seed,
            k,
            init_seed,
        } => fit(&source, data.as_deref(), n, seed, k, init_seed),
        Command::Sweep {
            source,
            out,
            threads,
            sequential,
            quiet,
        } => sweep(&source, out, threads, sequential, quiet),
        Command::Report {
            records,
            out,
            trim_leading,
            target,
            no_plot,
        } => report(&records, &out, trim_leading, target, !no_plot),
        Command::Verify { seed } => verify(seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(1)
        }
    }
}

/// Error chain on one line, skipping causes already quoted by their parent.
fn render(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.ends_with(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn load_config(source: &ConfigSource) -> Result<RunConfig, Failure> {
    match (&source.config, source.preset) {
        (Some(path), _) => RunConfig::from_file(path).map_err(|e| match e {
            Error::Io { .. } => Failure::Usage(anyhow::Error::new(e).context("cannot read config")),
            other => other.into(),
        }),
        (None, Some(p)) => Ok(preset_config(p.into())),
        (None, None) => Err(Failure::Usage(anyhow!(
            "one of --config or --preset is required"
        ))),
    }
}

fn manifest_path(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    file.with_file_name(name)
}

fn simulate(source: &ConfigSource, n: usize, seed: u64, out: &Path) -> CmdResult {
    let cfg = load_config(source)?;
    let mut manifest = RunManifest::start("simulate", Some(cfg.digest()?));
    let data = sample_dataset(&SampleConfig {
        n,
        seed,
        truth: cfg.sweep.truth.clone(),
    })?;
    write_dataset_csv(&data, out)?;
    manifest.add_file(out)?;
    manifest.finish(&[]);
    manifest.write(&manifest_path(out))?;
    println!("wrote {} rows to {}", data.n(), out.display());
    Ok(())
}

fn fit(
    source: &ConfigSource,
    data_path: Option<&Path>,
    n: usize,
    seed: u64,
    k: usize,
    init_seed: Option<u64>,
) -> CmdResult {
    let cfg = load_config(source)?;
    let sweep = &cfg.sweep;
    let truth = &sweep.truth;
    let data = match data_path {
        Some(p) => read_dataset_csv(p, truth.classes())?,
        None => sample_dataset(&SampleConfig {
            n,
            seed,
            truth: truth.clone(),
        })?,
    };
    let init = InitConfig {
        cell_seed: init_seed.unwrap_or(sweep.init.cell_seed),
        ..sweep.init.clone()
    };
    let result = em_fit(&data, k, truth, &init, &sweep.em)?;
    let loss = sweep.loss.evaluate(&result.estimate, truth)?;
    println!("gate           {}", sweep.gate);
    println!("n              {}", data.n());
    println!("k              {k}");
    println!("iterations     {}", result.iterations);
    println!("converged      {}", result.converged);
    println!("final loglik   {:.10e}", result.final_loglik());
    println!("{:<14} {loss:.10e}", sweep.loss.name());
    if let Some(d) = &result.diagnostics {
        println!("diagnostics    {d}");
    }
    Ok(())
}

fn sweep(
    source: &ConfigSource,
    out: Option<PathBuf>,
    threads: Option<usize>,
    sequential: bool,
    quiet: bool,
) -> CmdResult {
    let cfg = load_config(source)?;
    let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(Failure::Runtime)?;
    let mut manifest = RunManifest::start("sweep", Some(cfg.digest()?));
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml()?)
        .with_context(|| format!("cannot write {}", config_path.display()))
        .map_err(Failure::Runtime)?;
    manifest.add_file(&config_path)?;

    let total = cfg.sweep.jobs().len();
    let done = AtomicUsize::new(0);
    let progress = |r: &SweepRecord| {
        let i = done.fetch_add(1, Ordering::Relaxed) + 1;
        if !quiet {
            eprintln!(
                "[{i}/{total}] k={} n={} rep={} {}={:.4e} iters={} {}ms{}",
                r.k_fit,
                r.n,
                r.replication,
                r.loss_name,
                r.loss_value,
                r.em_iterations,
                r.wall_ms,
                if r.converged { "" } else { " (not converged)" }
            );
        }
    };
    let mode = if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let records = match threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Failure::Usage(anyhow!("thread pool: {e}")))?
            .install(|| run_sweep_with(&cfg.sweep, mode, &progress)),
        None => run_sweep_with(&cfg.sweep, mode, &progress),
    }?;

    let records_path = dir.join("records.csv");
    write_records_csv(&records, &records_path)?;
    manifest.add_file(&records_path)?;
    let summary = Summary::from_records(&records, &cfg.sweep.regression)?;
    emit_summary(&summary, &dir, cfg.output.plot, &mut manifest)?;
    manifest.finish(&records);
    manifest.write(&dir.join("manifest.json"))?;
    Ok(())
}

fn report(
    paths: &[PathBuf],
    out: &Path,
    trim_leading: usize,
    target: Target,
    plot: bool,
) -> CmdResult {
    let mut records = Vec::new();
    for p in paths {
        records.extend(read_records_csv(p)?);
    }
    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create {}", out.display()))
        .map_err(Failure::Runtime)?;
    let mut manifest = RunManifest::start("report", None);
    let opts = RegressionOptions {
        target: match target {
            Target::LogOfMean => RegressionTarget::LogOfMean,
            Target::MeanOfLog => RegressionTarget::MeanOfLog,
        },
        trim_leading,
    };
    let summary = Summary::from_records(&records, &opts)?;
    emit_summary(&summary, out, plot, &mut manifest)?;
    manifest.finish(&records);
    manifest.write(&out.join("manifest.json"))?;
    Ok(())
}

/// Writes `summary.json` and one plot per fitted size, and prints the slopes.
fn emit_summary(
    summary: &Summary,
    dir: &Path,
    plot: bool,
    manifest: &mut RunManifest,
) -> CmdResult {
    let summary_path = dir.join("summary.json");
    write_summary(summary, &summary_path)?;
    manifest.add_file(&summary_path)?;
    for f in &summary.fits {
        println!(
            "{:<24} k={} {:<16} slope {:+.4}  r^2 {:.3}  failures {}",
            f.gate, f.k_fit, f.loss_name, f.slope, f.r_squared, f.failures
        );
    }
    if !plot {
        return Ok(());
    }
    let mut ks: Vec<usize> = summary.fits.iter().map(|f| f.k_fit).collect();
    ks.sort_unstable();
    ks.dedup();
    for k in ks {
        let fits: Vec<&RateFit> = summary.fits.iter().filter(|f| f.k_fit == k).collect();
        let series: Vec<PlotSeries> = fits.iter().map(|f| PlotSeries::for_fit(f)).collect();
        let losses: Vec<&str> = fits.iter().map(|f| f.loss_name.as_str()).collect();
        let title = format!("k = {k}: {}", losses.join(" / "));
        let path = dir.join(format!("rates_k{k}.svg"));
        write_loglog_svg(&series, &title, &path)?;
        manifest.add_file(&path)?;
    }
    Ok(())
}

fn verify(seed: u64) -> CmdResult {
    let checks = run_property_suite(seed);
    let mut failed = 0;
    for c in &checks {
        println!(
            "{} {:<34} {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        return Err(Failure::Runtime(anyhow!(
            "{failed} of {} checks failed",
            checks.len()
        )));
    }
    Ok(())
}
