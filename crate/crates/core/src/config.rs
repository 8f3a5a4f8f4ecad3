//! TOML run configuration.
//!
//! ```toml
//! [model]
//! gate = "modified_sigmoid"
//! truth = "sigmoid_comparison"   # a shipped table, or give `tau` and `[[model.atoms]]`
//!
//! [sweep]                        # all keys optional
//! k_fit = [3, 4]
//! n_min = 10000                  # or an explicit `n_grid = [...]`
//! n_max = 100000
//! n_count = 20
//! replications = 20
//! master_seed = 0
//! trim_leading = 0
//! regression = "log_of_mean"     # or "mean_of_log"
//!
//! [em]                           # tol, max_iter, m_step_solver, m_step_inner_tol,
//!                                # m_step_inner_max_iter, backtrack_shrink
//! [init]                         # scheme, perturb_std, cell_seed
//! [loss]
//! kind = "d1"                    # d1 | d2r (with `r = 2`) | d3 | softmax_baseline
//!
//! [output]
//! dir = "results"
//! plot = true
//! ```
//!
//! Unknown keys are rejected. [`RunConfig::to_toml`] writes the fully
//! resolved form (explicit atoms, grid and defaults), which parses back to
//! the same configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimation::{EmConfig, InitConfig};
use crate::experiments::{
    default_loss, log_spaced_grid, RegressionOptions, RegressionTarget, SweepConfig,
};
use crate::metrics::LossKind;
use crate::model::{ExpertAtom, GateKind, MixingMeasure, ParameterBox};
use crate::presets::Preset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub plot: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("results"),
            plot: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sweep: SweepConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: RawModel,
    #[serde(default)]
    sweep: RawSweep,
    #[serde(default)]
    em: EmConfig,
    #[serde(default)]
    init: InitConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss: Option<LossKind>,
    #[serde(default)]
    output: OutputConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    gate: GateKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth: Option<Preset>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bounds: Option<ParameterBox>,
    #[serde(skip_serializing_if = "Option::is_none")]
    atoms: Option<Vec<ExpertAtom>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawSweep {
    k_fit: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_grid: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_min: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_max: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_count: Option<usize>,
    replications: usize,
    master_seed: u64,
    trim_leading: usize,
    regression: RegressionTarget,
}

impl Default for RawSweep {
    fn default() -> Self {
        RawSweep {
            k_fit: vec![3, 4],
            n_grid: None,
            n_min: None,
            n_max: None,
            n_count: None,
            replications: 20,
            master_seed: 0,
            trim_leading: 0,
            regression: RegressionTarget::LogOfMean,
        }
    }
}

fn resolve_truth(model: RawModel) -> Result<MixingMeasure> {
    match (model.truth, model.atoms) {
        (Some(_), Some(_)) => Err(Error::config(
            "model.truth",
            "give either a named table or explicit atoms, not both",
        )),
        (None, None) => Err(Error::config(
            "model.truth",
            "missing: name a table or list [[model.atoms]]",
        )),
        (Some(preset), None) => {
            if model.tau.is_some() || model.bounds.is_some() {
                return Err(Error::config(
                    "model.tau",
                    "a named table fixes its own temperature and box",
                ));
            }
            if preset.gate() != model.gate {
                return Err(Error::config(
                    "model.gate",
                    format!("table {} uses the {} gate", preset.name(), preset.gate()),
                ));
            }
            Ok(preset.truth())
        }
        (None, Some(atoms)) => MixingMeasure::new(
            atoms,
            model.gate,
            model.tau,
            model.bounds.unwrap_or_default(),
        )
        .map_err(|e| Error::config("model.atoms", e.to_string())),
    }
}

fn resolve_grid(s: &RawSweep) -> Result<Vec<usize>> {
    let range_given = s.n_min.is_some() || s.n_max.is_some() || s.n_count.is_some();
    match &s.n_grid {
        Some(_) if range_given => Err(Error::config(
            "sweep.n_grid",
            "give either n_grid or n_min/n_max/n_count, not both",
        )),
        Some(grid) => Ok(grid.clone()),
        None => log_spaced_grid(
            s.n_min.unwrap_or(10_000),
            s.n_max.unwrap_or(100_000),
            s.n_count.unwrap_or(20),
        )
        .map_err(|e| Error::config("sweep.n_count", e.to_string())),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            Error::config(
                "<toml>",
                e.message().to_string() + &span_note(text, e.span()),
            )
        })?;
        let gate = raw.model.gate;
        let n_grid = resolve_grid(&raw.sweep)?;
        let truth = resolve_truth(raw.model)?;
        if raw.sweep.master_seed > i64::MAX as u64 {
            return Err(Error::config(
                "sweep.master_seed",
                "must fit in a signed 64-bit integer",
            ));
        }
        let sweep = SweepConfig {
            gate,
            truth,
            k_fit: raw.sweep.k_fit,
            n_grid,
            replications: raw.sweep.replications,
            master_seed: raw.sweep.master_seed,
            loss: raw.loss.unwrap_or_else(|| default_loss(gate)),
            em: raw.em,
            init: raw.init,
            regression: RegressionOptions {
                target: raw.sweep.regression,
                trim_leading: raw.sweep.trim_leading,
            },
        };
        sweep.validate()?;
        Ok(RunConfig {
            sweep,
            output: raw.output,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { path: key, msg } if key == "<toml>" => {
                Error::config(path.display().to_string(), msg)
            }
            other => other,
        })
    }

    /// Fully resolved TOML.
    pub fn to_toml(&self) -> Result<String> {
        let s = &self.sweep;
        let raw = RawConfig {
            model: RawModel {
                gate: s.gate,
                truth: None,
                tau: s.truth.tau(),
                bounds: Some(*s.truth.bounds()),
                atoms: Some(s.truth.atoms().to_vec()),
            },
            sweep: RawSweep {
                k_fit: s.k_fit.clone(),
                n_grid: Some(s.n_grid.clone()),
                n_min: None,
                n_max: None,
                n_count: None,
                replications: s.replications,
                master_seed: s.master_seed,
                trim_leading: s.regression.trim_leading,
                regression: s.regression.target,
            },
            em: s.em.clone(),
            init: s.init.clone(),
            loss: Some(s.loss),
            output: self.output.clone(),
        };
        toml::to_string(&raw).map_err(|e| Error::config("<serialize>", e.to_string()))
    }

    /// Hex SHA-256 of [`RunConfig::to_toml`].
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

fn span_note(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}

/// Resolved configuration for a shipped table with all defaults.
pub fn preset_config(preset: Preset) -> RunConfig {
    RunConfig {
        sweep: SweepConfig::with_defaults(preset.truth()),
        output: OutputConfig::default(),
    }
}
