//! Voronoi cell assignment, Voronoi parameter losses, and Monte Carlo
//! divergences between conditional densities.
//!
//! Atoms are compared on `θ = (α, β, a, b)`; `γ` and `τ` never enter the cell
//! assignment. Every loss has the shape
//!
//! `Σ_j |Σ_{i∈A_j} exp(γ_i) − exp(γ*_j)| + Σ_j Σ_{i∈A_j} exp(γ_i) · P_ij`,
//!
//! where the per-atom penalty `P_ij` sums powers of the coordinate
//! discrepancies and the exponent depends on the loss and, for D1, D3 and the
//! softmax analog, on whether the cell holds one atom or several.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dist, GateKind, MixingMeasure};
use crate::sampling::stream_rng;

/// Partition of the fitted atoms into the Voronoi cells of the truth atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct VoronoiAssignment {
    /// `cells[j]` lists fitted atom indices nearest to truth atom `j`, ascending.
    pub cells: Vec<Vec<usize>>,
    /// `distances[i][j] = ‖θ_i − θ*_j‖`.
    pub distances: Vec<Vec<f64>>,
}

/// Per-coordinate discrepancies between a fitted atom and a truth atom.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomDelta {
    pub d_alpha: f64,
    pub d_beta: f64,
    pub d_tau: f64,
    pub d_a: Vec<f64>,
    pub d_b: Vec<f64>,
}

impl AtomDelta {
    pub fn between(fitted: &MixingMeasure, i: usize, truth: &MixingMeasure, j: usize) -> AtomDelta {
        let f = &fitted.atoms()[i];
        let t = &truth.atoms()[j];
        AtomDelta {
            d_alpha: dist(&f.alpha, &t.alpha),
            d_beta: (f.beta - t.beta).abs(),
            d_tau: match (fitted.tau(), truth.tau()) {
                (Some(a), Some(b)) => (a - b).abs(),
                _ => 0.0,
            },
            d_a: f.a.iter().zip(&t.a).map(|(p, q)| dist(p, q)).collect(),
            d_b: f.b.iter().zip(&t.b).map(|(p, q)| (p - q).abs()).collect(),
        }
    }

    /// `‖Δα‖^κ + |Δβ|^κ + Σ_l (‖Δa_l‖^κ + |Δb_l|^κ)`, plus `|Δτ|^κ` when
    /// `with_tau`.
    pub fn penalty(&self, kappa: i32, with_tau: bool) -> f64 {
        let mut s = self.d_alpha.powi(kappa) + self.d_beta.powi(kappa);
        if with_tau {
            s += self.d_tau.powi(kappa);
        }
        s + self
            .d_a
            .iter()
            .zip(&self.d_b)
            .map(|(a, b)| a.powi(kappa) + b.powi(kappa))
            .sum::<f64>()
    }
}

fn theta(m: &MixingMeasure, i: usize) -> Vec<f64> {
    let a = &m.atoms()[i];
    let mut v = a.alpha.clone();
    v.push(a.beta);
    a.a.iter().for_each(|row| v.extend_from_slice(row));
    v.extend_from_slice(&a.b);
    v
}

fn check_shapes(fitted: &MixingMeasure, truth: &MixingMeasure) -> Result<()> {
    if fitted.dim() != truth.dim() || fitted.classes() != truth.classes() {
        return Err(Error::InvalidArgument(format!(
            "measures have incompatible shapes (d={}, K={}) vs (d={}, K={})",
            fitted.dim(),
            fitted.classes(),
            truth.dim(),
            truth.classes()
        )));
    }
    Ok(())
}

/// Assigns each fitted atom to its nearest truth atom; ties go to the lower
/// truth index.
pub fn voronoi_cells(fitted: &MixingMeasure, truth: &MixingMeasure) -> Result<VoronoiAssignment> {
    check_shapes(fitted, truth)?;
    let truth_theta: Vec<Vec<f64>> = (0..truth.len()).map(|j| theta(truth, j)).collect();
    let mut cells = vec![Vec::new(); truth.len()];
    let mut distances = Vec::with_capacity(fitted.len());
    for i in 0..fitted.len() {
        let t = theta(fitted, i);
        let row: Vec<f64> = truth_theta.iter().map(|s| dist(&t, s)).collect();
        let mut best = 0;
        for (j, &dj) in row.iter().enumerate().skip(1) {
            if dj < row[best] {
                best = j;
            }
        }
        cells[best].push(i);
        distances.push(row);
    }
    Ok(VoronoiAssignment { cells, distances })
}

/// Exponent rule of a Voronoi loss.
#[derive(Debug, Clone, Copy)]
enum Exponents {
    /// 1 on singleton cells, 2 on multi-atom cells.
    CellSize,
    /// The same exponent everywhere.
    Uniform(i32),
}

fn voronoi_loss(
    fitted: &MixingMeasure,
    truth: &MixingMeasure,
    exps: Exponents,
    with_tau: bool,
) -> Result<f64> {
    let cells = voronoi_cells(fitted, truth)?;
    let mut mass_term = 0.0;
    let mut param_term = 0.0;
    for (j, cell) in cells.cells.iter().enumerate() {
        let mass: f64 = cell.iter().map(|&i| fitted.atoms()[i].gamma.exp()).sum();
        mass_term += (mass - truth.atoms()[j].gamma.exp()).abs();
        let kappa = match exps {
            Exponents::CellSize if cell.len() > 1 => 2,
            Exponents::CellSize => 1,
            Exponents::Uniform(r) => r,
        };
        for &i in cell {
            let delta = AtomDelta::between(fitted, i, truth, j);
            param_term += fitted.atoms()[i].gamma.exp() * delta.penalty(kappa, with_tau);
        }
    }
    Ok(mass_term + param_term)
}

fn require_same_gate(
    fitted: &MixingMeasure,
    truth: &MixingMeasure,
    op: &'static str,
) -> Result<()> {
    if fitted.gate() != truth.gate() {
        return Err(Error::InvalidArgument(format!(
            "{op}: gate mismatch ({} vs {})",
            fitted.gate(),
            truth.gate()
        )));
    }
    Ok(())
}

/// D1: cell-size exponents, no temperature.
pub fn loss_d1(fitted: &MixingMeasure, truth: &MixingMeasure) -> Result<f64> {
    require_same_gate(fitted, truth, "loss_d1")?;
    if fitted.gate().has_temperature() {
        return Err(Error::UnsupportedGate {
            gate: fitted.gate(),
            op: "loss_d1",
        });
    }
    voronoi_loss(fitted, truth, Exponents::CellSize, false)
}

/// D_{2,r}: exponent `r` on every coordinate discrepancy including `|Δτ|`.
pub fn loss_d2r(fitted: &MixingMeasure, truth: &MixingMeasure, r: u32) -> Result<f64> {
    require_same_gate(fitted, truth, "loss_d2r")?;
    if !fitted.gate().has_temperature() {
        return Err(Error::UnsupportedGate {
            gate: fitted.gate(),
            op: "loss_d2r",
        });
    }
    if r == 0 {
        return Err(Error::InvalidArgument("loss_d2r needs r >= 1".into()));
    }
    voronoi_loss(fitted, truth, Exponents::Uniform(r as i32), true)
}

/// D3: cell-size exponents with the temperature discrepancy included.
pub fn loss_d3(fitted: &MixingMeasure, truth: &MixingMeasure) -> Result<f64> {
    require_same_gate(fitted, truth, "loss_d3")?;
    if !fitted.gate().has_temperature() {
        return Err(Error::UnsupportedGate {
            gate: fitted.gate(),
            op: "loss_d3",
        });
    }
    voronoi_loss(fitted, truth, Exponents::CellSize, true)
}

/// Structural analog of D1 for the softmax gate: weights `exp(γ_i)`,
/// discrepancies over `(α, β, a, b)`, exponent 1 on singleton cells and 2 on
/// multi-atom cells. It stands in for the softmax-specific loss only for slope
/// comparisons.
pub fn loss_softmax_baseline(fitted: &MixingMeasure, truth: &MixingMeasure) -> Result<f64> {
    require_same_gate(fitted, truth, "loss_softmax_baseline")?;
    if fitted.gate() != GateKind::SoftmaxBaseline {
        return Err(Error::UnsupportedGate {
            gate: fitted.gate(),
            op: "loss_softmax_baseline",
        });
    }
    voronoi_loss(fitted, truth, Exponents::CellSize, false)
}

/// Which Voronoi loss to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    D1,
    D2r { r: u32 },
    D3,
    SoftmaxBaseline,
}

impl LossKind {
    pub fn name(self) -> String {
        match self {
            LossKind::D1 => "D1".into(),
            LossKind::D2r { r } => format!("D2r{r}"),
            LossKind::D3 => "D3".into(),
            LossKind::SoftmaxBaseline => "softmax_baseline".into(),
        }
    }

    pub fn from_name(name: &str) -> Option<LossKind> {
        match name {
            "D1" => Some(LossKind::D1),
            "D3" => Some(LossKind::D3),
            "softmax_baseline" => Some(LossKind::SoftmaxBaseline),
            _ => name
                .strip_prefix("D2r")
                .and_then(|r| r.parse().ok())
                .filter(|&r| r >= 1)
                .map(|r| LossKind::D2r { r }),
        }
    }

    /// Whether this loss is defined for measures with the given gate.
    pub fn compatible_with(self, gate: GateKind) -> bool {
        match self {
            LossKind::D1 => gate == GateKind::ModifiedSigmoid,
            LossKind::D2r { .. } | LossKind::D3 => gate.has_temperature(),
            LossKind::SoftmaxBaseline => gate == GateKind::SoftmaxBaseline,
        }
    }

    pub fn evaluate(self, fitted: &MixingMeasure, truth: &MixingMeasure) -> Result<f64> {
        match self {
            LossKind::D1 => loss_d1(fitted, truth),
            LossKind::D2r { r } => loss_d2r(fitted, truth, r),
            LossKind::D3 => loss_d3(fitted, truth),
            LossKind::SoftmaxBaseline => loss_softmax_baseline(fitted, truth),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    /// `½ Σ_s |p_s − q_s|`.
    TotalVariation,
    /// `(½ Σ_s (√p_s − √q_s)²)^{1/2}`.
    Hellinger,
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn hellinger(p: &[f64], q: &[f64]) -> f64 {
    let s: f64 = p
        .iter()
        .zip(q)
        .map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2))
        .sum();
    (0.5 * s).sqrt().min(1.0)
}

/// Per-covariate divergences at `m` uniform draws from `[0, 1]^d`.
pub fn divergence_samples(
    g1: &MixingMeasure,
    g2: &MixingMeasure,
    m: usize,
    seed: u64,
    kind: DivergenceKind,
) -> Result<Vec<f64>> {
    check_shapes(g1, g2)?;
    if m == 0 {
        return Err(Error::InvalidArgument(
            "need at least one Monte Carlo draw".into(),
        ));
    }
    let mut rng = stream_rng(seed, 2);
    let d = g1.dim();
    let mut x = vec![0.0; d];
    (0..m)
        .map(|_| {
            x.iter_mut().for_each(|v| *v = rng.gen::<f64>());
            let p = g1.conditional_density(&x)?;
            let q = g2.conditional_density(&x)?;
            Ok(match kind {
                DivergenceKind::TotalVariation => total_variation(&p, &q),
                DivergenceKind::Hellinger => hellinger(&p, &q),
            })
        })
        .collect()
}

/// Plain Monte Carlo estimate of `E_X[d(p_{g1}(·|X), p_{g2}(·|X))]`,
/// `X ~ Uniform[0, 1]^d`.
pub fn divergence_mc(
    g1: &MixingMeasure,
    g2: &MixingMeasure,
    m: usize,
    seed: u64,
    kind: DivergenceKind,
) -> Result<f64> {
    let v = divergence_samples(g1, g2, m, seed, kind)?;
    Ok(v.iter().sum::<f64>() / m as f64)
}

pub const DEFAULT_MC_DRAWS: usize = 20_000;
