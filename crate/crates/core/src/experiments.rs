//! Sample-size sweeps: replicated fits, losses against the truth, and
//! log-log rate regressions.
//!
//! Every replication is a pure function of `(config, k, n, rep)`. The dataset
//! seed is `derive_seed([master_seed, n, rep])`, shared by all fitted `k` so
//! that different `k` see the same data; the initialization seed additionally
//! folds in `k` and `init.cell_seed`. Adding grid points or replications never
//! changes existing records.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{em_fit, EmConfig, InitConfig};
use crate::metrics::LossKind;
use crate::model::{GateKind, MixingMeasure};
use crate::sampling::{derive_seed, sample_dataset, SampleConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegressionTarget {
    /// Regress `log(mean loss at n)` on `log n`.
    #[default]
    LogOfMean,
    /// Regress `mean(log loss at n)` on `log n`.
    MeanOfLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RegressionOptions {
    pub target: RegressionTarget,
    /// Number of smallest sample sizes left out of the regression. They still
    /// appear in the per-n summaries.
    pub trim_leading: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub gate: GateKind,
    pub truth: MixingMeasure,
    pub k_fit: Vec<usize>,
    pub n_grid: Vec<usize>,
    pub replications: usize,
    pub master_seed: u64,
    pub loss: LossKind,
    pub em: EmConfig,
    pub init: InitConfig,
    pub regression: RegressionOptions,
}

/// `count` sample sizes evenly spaced in `log n` between `lo` and `hi`,
/// rounded to the nearest integer.
pub fn log_spaced_grid(lo: usize, hi: usize, count: usize) -> Result<Vec<usize>> {
    if lo == 0 || hi < lo || count == 0 || (count == 1 && lo != hi) {
        return Err(Error::InvalidArgument(format!(
            "cannot build a grid of {count} sizes in [{lo}, {hi}]"
        )));
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    let grid: Vec<usize> = (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp().round() as usize)
        .collect();
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "{count} log-spaced sizes in [{lo}, {hi}] are not distinct after rounding"
        )));
    }
    Ok(grid)
}

impl SweepConfig {
    /// Defaults for a truth: `k ∈ {3, 4}`, 20 log-spaced sizes in
    /// `[10^4, 10^5]`, 20 replications, and the loss matched to the gate.
    pub fn with_defaults(truth: MixingMeasure) -> Self {
        SweepConfig {
            gate: truth.gate(),
            loss: default_loss(truth.gate()),
            truth,
            k_fit: vec![3, 4],
            n_grid: log_spaced_grid(10_000, 100_000, 20).expect("default grid is valid"),
            replications: 20,
            master_seed: 0,
            em: EmConfig::default(),
            init: InitConfig::default(),
            regression: RegressionOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.truth.gate() != self.gate {
            return Err(Error::config(
                "model.gate",
                format!(
                    "truth uses the {} gate, sweep declares {}",
                    self.truth.gate(),
                    self.gate
                ),
            ));
        }
        self.truth
            .check_ground_truth()
            .map_err(|e| Error::config("model.truth", e.to_string()))?;
        if !self.loss.compatible_with(self.gate) {
            return Err(Error::config(
                "loss.kind",
                format!(
                    "loss {} is not defined for the {} gate",
                    self.loss.name(),
                    self.gate
                ),
            ));
        }
        if self.k_fit.is_empty() {
            return Err(Error::config("sweep.k_fit", "must list at least one value"));
        }
        if let Some(&k) = self.k_fit.iter().find(|&&k| k < self.truth.len()) {
            return Err(Error::config(
                "sweep.k_fit",
                format!(
                    "k = {k} is below the number of true atoms ({})",
                    self.truth.len()
                ),
            ));
        }
        let mut ks = self.k_fit.clone();
        ks.sort_unstable();
        ks.dedup();
        if ks.len() != self.k_fit.len() {
            return Err(Error::config("sweep.k_fit", "values must be distinct"));
        }
        if self.n_grid.is_empty() || self.n_grid[0] == 0 {
            return Err(Error::config("sweep.n_grid", "must hold positive sizes"));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("sweep.n_grid", "must be strictly increasing"));
        }
        if self.replications == 0 {
            return Err(Error::config("sweep.replications", "must be at least 1"));
        }
        if self.regression.trim_leading + 2 > self.n_grid.len() {
            return Err(Error::config(
                "sweep.trim_leading",
                "must leave at least two sample sizes for the regression",
            ));
        }
        self.em.validate()?;
        self.init.validate()
    }

    pub fn data_seed(&self, n: usize, rep: usize) -> u64 {
        derive_seed(&[self.master_seed, n as u64, rep as u64])
    }

    pub fn init_seed(&self, k: usize, n: usize, rep: usize) -> u64 {
        derive_seed(&[
            self.master_seed,
            n as u64,
            rep as u64,
            k as u64,
            self.init.cell_seed,
        ])
    }

    /// All `(k, n, rep)` jobs in canonical order.
    pub fn jobs(&self) -> Vec<(usize, usize, usize)> {
        let mut ks = self.k_fit.clone();
        ks.sort_unstable();
        let mut jobs = Vec::with_capacity(ks.len() * self.n_grid.len() * self.replications);
        for &k in &ks {
            for &n in &self.n_grid {
                for rep in 0..self.replications {
                    jobs.push((k, n, rep));
                }
            }
        }
        jobs
    }
}

/// The loss reported by default for each gate.
pub fn default_loss(gate: GateKind) -> LossKind {
    match gate {
        GateKind::ModifiedSigmoid => LossKind::D1,
        GateKind::TempSigmoidInner => LossKind::D2r { r: 2 },
        GateKind::TempSigmoidEuclidean => LossKind::D3,
        GateKind::SoftmaxBaseline => LossKind::SoftmaxBaseline,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub gate: GateKind,
    pub k_fit: usize,
    pub n: usize,
    pub replication: usize,
    pub seed: u64,
    pub loss_name: String,
    pub loss_value: f64,
    pub em_iterations: usize,
    pub final_loglik: f64,
    pub converged: bool,
    pub wall_ms: u64,
}

impl SweepRecord {
    /// Copy with the wall-clock field cleared, for comparing runs.
    pub fn without_timing(&self) -> SweepRecord {
        SweepRecord {
            wall_ms: 0,
            ..self.clone()
        }
    }

    fn sort_key(&self) -> (usize, usize, usize) {
        (self.k_fit, self.n, self.replication)
    }
}

/// Samples one dataset, fits `k` atoms and scores the estimate.
///
/// EM failures do not abort: the record carries `converged = false` and the
/// loss of the last iterate.
pub fn run_replication(cfg: &SweepConfig, k: usize, n: usize, rep: usize) -> Result<SweepRecord> {
    let seed = cfg.data_seed(n, rep);
    let data = sample_dataset(&SampleConfig {
        n,
        seed,
        truth: cfg.truth.clone(),
    })?;
    let init = InitConfig {
        cell_seed: cfg.init_seed(k, n, rep),
        ..cfg.init.clone()
    };
    let fit = em_fit(&data, k, &cfg.truth, &init, &cfg.em)?;
    let loss_value = cfg.loss.evaluate(&fit.estimate, &cfg.truth)?;
    Ok(SweepRecord {
        gate: cfg.gate,
        k_fit: k,
        n,
        replication: rep,
        seed,
        loss_name: cfg.loss.name(),
        loss_value,
        em_iterations: fit.iterations,
        final_loglik: fit.final_loglik(),
        converged: fit.converged && loss_value.is_finite(),
        wall_ms: fit.wall_time_ms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

/// Runs the full `k_fit × n_grid × replications` grid. Records come back
/// sorted by `(k, n, rep)` whatever the execution mode.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRecord>> {
    run_sweep_with(cfg, Execution::Parallel, &|_| {})
}

/// [`run_sweep`] with an explicit execution mode and a callback invoked once
/// per finished replication (in completion order).
pub fn run_sweep_with(
    cfg: &SweepConfig,
    mode: Execution,
    on_record: &(dyn Fn(&SweepRecord) + Sync),
) -> Result<Vec<SweepRecord>> {
    cfg.validate()?;
    let jobs = cfg.jobs();
    let run = |&(k, n, rep): &(usize, usize, usize)| {
        let rec = run_replication(cfg, k, n, rep)?;
        on_record(&rec);
        Ok(rec)
    };
    let mut records: Vec<SweepRecord> = match mode {
        Execution::Parallel => jobs.par_iter().map(run).collect::<Result<_>>()?,
        Execution::Sequential => jobs.iter().map(run).collect::<Result<_>>()?,
    };
    records.sort_by_key(SweepRecord::sort_key);
    Ok(records)
}

/// Least-squares line through `(log n, log loss)` with per-n error bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub gate: GateKind,
    pub k_fit: usize,
    pub loss_name: String,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub target: RegressionTarget,
    pub trim_leading: usize,
    /// Sample sizes with at least one converged record, ascending.
    pub n_values: Vec<usize>,
    pub per_n_mean: Vec<f64>,
    /// Twice the sample standard deviation (zero for a single record).
    pub per_n_two_std: Vec<f64>,
    pub per_n_count: Vec<usize>,
    /// Records excluded because EM did not converge.
    pub failures: usize,
}

impl RateFit {
    /// Fitted loss at `n`.
    pub fn predict(&self, n: f64) -> f64 {
        (self.intercept + self.slope * n.ln()).exp()
    }
}

pub fn fit_loglog(records: &[SweepRecord]) -> Result<RateFit> {
    fit_loglog_with(records, &RegressionOptions::default())
}

pub fn fit_loglog_with(records: &[SweepRecord], opts: &RegressionOptions) -> Result<RateFit> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("no records to fit".into()))?;
    if records
        .iter()
        .any(|r| r.gate != first.gate || r.k_fit != first.k_fit || r.loss_name != first.loss_name)
    {
        return Err(Error::InvalidArgument(
            "records mix gates, fitted sizes or losses; group them first".into(),
        ));
    }
    let failures = records.iter().filter(|r| !r.converged).count();
    let mut ok: Vec<&SweepRecord> = records.iter().filter(|r| r.converged).collect();
    ok.sort_by_key(|r| (r.n, r.replication));

    let mut n_values = Vec::new();
    let mut per_n_mean = Vec::new();
    let mut per_n_two_std = Vec::new();
    let mut per_n_count = Vec::new();
    let mut per_n_log = Vec::new();
    for group in ok.chunk_by(|a, b| a.n == b.n) {
        let vals: Vec<f64> = group.iter().map(|r| r.loss_value).collect();
        let m = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / m;
        let var = if vals.len() > 1 {
            vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)
        } else {
            0.0
        };
        n_values.push(group[0].n);
        per_n_mean.push(mean);
        per_n_two_std.push(2.0 * var.sqrt());
        per_n_count.push(vals.len());
        per_n_log.push(vals.iter().map(|v| v.ln()).sum::<f64>() / m);
    }
    if n_values.len() < opts.trim_leading + 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least two sample sizes after trimming {}, have {}",
            opts.trim_leading,
            n_values.len()
        )));
    }
    let xs: Vec<f64> = n_values[opts.trim_leading..]
        .iter()
        .map(|&n| (n as f64).ln())
        .collect();
    let ys: Vec<f64> = match opts.target {
        RegressionTarget::LogOfMean => per_n_mean[opts.trim_leading..]
            .iter()
            .map(|m| m.ln())
            .collect(),
        RegressionTarget::MeanOfLog => per_n_log[opts.trim_leading..].to_vec(),
    };
    if ys.iter().any(|y| !y.is_finite()) {
        return Err(Error::InvalidArgument(
            "log-log regression needs strictly positive losses".into(),
        ));
    }
    let (slope, intercept, r_squared) = least_squares(&xs, &ys);
    Ok(RateFit {
        gate: first.gate,
        k_fit: first.k_fit,
        loss_name: first.loss_name.clone(),
        slope,
        intercept,
        r_squared,
        target: opts.target,
        trim_leading: opts.trim_leading,
        n_values,
        per_n_mean,
        per_n_two_std,
        per_n_count,
        failures,
    })
}

/// Ordinary least squares `y ≈ intercept + slope · x`.
fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    };
    (slope, intercept, r_squared)
}

/// Splits records into `(gate, k, loss)` groups, in order of first appearance.
pub fn group_records(records: &[SweepRecord]) -> Vec<Vec<SweepRecord>> {
    let mut groups: Vec<Vec<SweepRecord>> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|g| {
            let h = &g[0];
            h.gate == r.gate && h.k_fit == r.k_fit && h.loss_name == r.loss_name
        }) {
            Some(g) => g.push(r.clone()),
            None => groups.push(vec![r.clone()]),
        }
    }
    groups
}
