//! Model types and density evaluation for multinomial logistic mixtures of
//! experts under the four supported gating mechanisms.
//!
//! Class labels are zero-based throughout the library (`0..K`); the records
//! and dataset files use one-based labels.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gating mechanism of a mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// `exp(γ) σ(αᵀx + β)`.
    ModifiedSigmoid,
    /// `exp(γ) σ((αᵀx + β) / τ)`.
    TempSigmoidInner,
    /// `exp(γ) σ((‖α − x‖ + β) / τ)`.
    TempSigmoidEuclidean,
    /// `exp(αᵀx + β + γ)`, normalized across experts.
    SoftmaxBaseline,
}

impl GateKind {
    pub const ALL: [GateKind; 4] = [
        GateKind::ModifiedSigmoid,
        GateKind::TempSigmoidInner,
        GateKind::TempSigmoidEuclidean,
        GateKind::SoftmaxBaseline,
    ];

    pub fn has_temperature(self) -> bool {
        matches!(
            self,
            GateKind::TempSigmoidInner | GateKind::TempSigmoidEuclidean
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            GateKind::ModifiedSigmoid => "modified_sigmoid",
            GateKind::TempSigmoidInner => "temp_sigmoid_inner",
            GateKind::TempSigmoidEuclidean => "temp_sigmoid_euclidean",
            GateKind::SoftmaxBaseline => "softmax_baseline",
        }
    }

    pub fn from_name(name: &str) -> Option<GateKind> {
        GateKind::ALL.into_iter().find(|g| g.name() == name)
    }
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Closed real interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

/// Compact parameter space, one interval per parameter group applied to
/// every coordinate of that group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParameterBox {
    pub gamma: Interval,
    pub alpha: Interval,
    pub beta: Interval,
    pub tau: Interval,
    pub a: Interval,
    pub b: Interval,
}

impl Default for ParameterBox {
    fn default() -> Self {
        ParameterBox {
            gamma: Interval::new(-10.0, 10.0),
            alpha: Interval::new(-20.0, 20.0),
            beta: Interval::new(-20.0, 20.0),
            tau: Interval::new(0.01, 20.0),
            a: Interval::new(-20.0, 20.0),
            b: Interval::new(-20.0, 20.0),
        }
    }
}

impl ParameterBox {
    pub fn validate(&self) -> Result<()> {
        let groups = [
            ("gamma", self.gamma),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("tau", self.tau),
            ("a", self.a),
            ("b", self.b),
        ];
        for (name, iv) in groups {
            if !(iv.lo.is_finite() && iv.hi.is_finite() && iv.lo < iv.hi) {
                return Err(Error::InvalidMeasure(format!(
                    "bounds for {name} must satisfy lo < hi, got [{}, {}]",
                    iv.lo, iv.hi
                )));
            }
        }
        if self.tau.lo <= 0.0 {
            return Err(Error::InvalidMeasure(format!(
                "temperature lower bound must be positive, got {}",
                self.tau.lo
            )));
        }
        Ok(())
    }
}

/// Gate parameters `(γ, α, β)` and expert parameters `(a, b)` of one component.
///
/// `a[l]` is the length-`d` slope of class `l`, `b[l]` its intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertAtom {
    pub gamma: f64,
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl ExpertAtom {
    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn classes(&self) -> usize {
        self.b.len()
    }

    fn check_shape(&self) -> Result<()> {
        let d = self.dim();
        let k = self.classes();
        if d == 0 {
            return Err(Error::InvalidMeasure("alpha must be non-empty".into()));
        }
        if k < 2 {
            return Err(Error::InvalidMeasure(format!(
                "experts need at least two classes, got {k}"
            )));
        }
        if self.a.len() != k || self.a.iter().any(|row| row.len() != d) {
            return Err(Error::InvalidMeasure(format!(
                "expert slopes must be {k} vectors of length {d}"
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.gamma.is_finite()
            && self.beta.is_finite()
            && self.alpha.iter().all(|v| v.is_finite())
            && self.b.iter().all(|v| v.is_finite())
            && self.a.iter().flatten().all(|v| v.is_finite())
    }

    /// True when the last class carries the reference logit `a_K = 0, b_K = 0`.
    pub fn is_canonical(&self) -> bool {
        let last = self.classes() - 1;
        self.b[last] == 0.0 && self.a[last].iter().all(|&v| v == 0.0)
    }

    /// Shifts all class logits so that the last class is the zero reference.
    /// The expert distribution is unchanged.
    pub fn canonicalize(&mut self) {
        let last = self.classes() - 1;
        let a_ref = self.a[last].clone();
        let b_ref = self.b[last];
        for (row, bl) in self.a.iter_mut().zip(self.b.iter_mut()) {
            for (v, r) in row.iter_mut().zip(&a_ref) {
                *v -= r;
            }
            *bl -= b_ref;
        }
    }

    fn within(&self, bounds: &ParameterBox) -> bool {
        bounds.gamma.contains(self.gamma)
            && bounds.beta.contains(self.beta)
            && self.alpha.iter().all(|&v| bounds.alpha.contains(v))
            && self.b.iter().all(|&v| bounds.b.contains(v))
            && self.a.iter().flatten().all(|&v| bounds.a.contains(v))
    }

    /// Log class probabilities of this expert at `x`, written to `out`.
    pub fn expert_log_probs_into(&self, x: &[f64], out: &mut [f64]) {
        for (l, o) in out.iter_mut().enumerate() {
            *o = dot(&self.a[l], x) + self.b[l];
        }
        let lse = log_sum_exp(out);
        for o in out.iter_mut() {
            *o -= lse;
        }
    }
}

/// `1 / (1 + exp(-t))`, evaluated without overflow for any finite `t`.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(t) = −ln(1 + exp(−t))`.
pub fn log_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

/// `(ln σ(t), σ(−t))` from a single exponential.
pub(crate) fn log_sigmoid_and_complement(t: f64) -> (f64, f64) {
    let e = (-t.abs()).exp();
    if t >= 0.0 {
        (-e.ln_1p(), e / (1.0 + e))
    } else {
        (t - e.ln_1p(), 1.0 / (1.0 + e))
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|&t| (t - m).exp()).sum::<f64>().ln()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

/// Atomic mixing measure `Σ exp(γ_i) δ_{θ_i}` with its gate and optional
/// shared temperature.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixingMeasure {
    atoms: Vec<ExpertAtom>,
    gate: GateKind,
    tau: Option<f64>,
    bounds: ParameterBox,
}

impl MixingMeasure {
    pub fn new(
        atoms: Vec<ExpertAtom>,
        gate: GateKind,
        tau: Option<f64>,
        bounds: ParameterBox,
    ) -> Result<Self> {
        bounds.validate()?;
        let first = atoms
            .first()
            .ok_or_else(|| Error::InvalidMeasure("at least one atom is required".into()))?;
        let (d, k) = (first.dim(), first.classes());
        for (i, atom) in atoms.iter().enumerate() {
            atom.check_shape()?;
            if atom.dim() != d || atom.classes() != k {
                return Err(Error::InvalidMeasure(format!(
                    "atom {i} has shape (d={}, K={}), expected (d={d}, K={k})",
                    atom.dim(),
                    atom.classes()
                )));
            }
            if !atom.is_finite() {
                return Err(Error::InvalidMeasure(format!(
                    "atom {i} has non-finite entries"
                )));
            }
            if !atom.within(&bounds) {
                return Err(Error::InvalidMeasure(format!(
                    "atom {i} lies outside the parameter box"
                )));
            }
        }
        match (gate.has_temperature(), tau) {
            (true, None) => {
                return Err(Error::InvalidMeasure(format!(
                    "the {gate} gate requires a temperature"
                )))
            }
            (false, Some(_)) => {
                return Err(Error::InvalidMeasure(format!(
                    "the {gate} gate does not take a temperature"
                )))
            }
            (true, Some(t)) if !bounds.tau.contains(t) => {
                return Err(Error::InvalidMeasure(format!(
                    "temperature {t} outside [{}, {}]",
                    bounds.tau.lo, bounds.tau.hi
                )))
            }
            _ => {}
        }
        Ok(MixingMeasure {
            atoms,
            gate,
            tau,
            bounds,
        })
    }

    pub fn with_default_bounds(
        atoms: Vec<ExpertAtom>,
        gate: GateKind,
        tau: Option<f64>,
    ) -> Result<Self> {
        Self::new(atoms, gate, tau, ParameterBox::default())
    }

    pub fn atoms(&self) -> &[ExpertAtom] {
        &self.atoms
    }

    pub fn gate(&self) -> GateKind {
        self.gate
    }

    pub fn tau(&self) -> Option<f64> {
        self.tau
    }

    pub fn bounds(&self) -> &ParameterBox {
        &self.bounds
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].dim()
    }

    pub fn classes(&self) -> usize {
        self.atoms[0].classes()
    }

    /// Ground-truth canonicalization: every expert uses the last class as the
    /// zero reference and at least one gate slope is nonzero.
    pub fn check_ground_truth(&self) -> Result<()> {
        if let Some(i) = self.atoms.iter().position(|a| !a.is_canonical()) {
            return Err(Error::InvalidMeasure(format!(
                "truth atom {i} must have a zero last-class slope and intercept"
            )));
        }
        if self.atoms.iter().all(|a| a.alpha.iter().all(|&v| v == 0.0)) {
            return Err(Error::InvalidMeasure(
                "at least one truth gate slope must be nonzero".into(),
            ));
        }
        Ok(())
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "covariate",
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Log of the un-normalized gate numerator of atom `i` at `x`.
    pub(crate) fn log_gate_numerator(&self, i: usize, x: &[f64]) -> f64 {
        let atom = &self.atoms[i];
        match self.gate {
            GateKind::ModifiedSigmoid => atom.gamma + log_sigmoid(dot(&atom.alpha, x) + atom.beta),
            GateKind::TempSigmoidInner => {
                let tau = self.tau.unwrap_or(1.0);
                atom.gamma + log_sigmoid((dot(&atom.alpha, x) + atom.beta) / tau)
            }
            GateKind::TempSigmoidEuclidean => {
                let tau = self.tau.unwrap_or(1.0);
                atom.gamma + log_sigmoid((dist(&atom.alpha, x) + atom.beta) / tau)
            }
            GateKind::SoftmaxBaseline => dot(&atom.alpha, x) + atom.beta + atom.gamma,
        }
    }

    /// Log gate weights at `x`, written to `out` (length `k'`).
    pub(crate) fn log_gate_weights_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.log_gate_numerator(i, x);
        }
        let lse = log_sum_exp(out);
        for o in out.iter_mut() {
            *o -= lse;
        }
    }

    /// Normalized gate weights at `x`.
    pub fn gate_weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let mut w = vec![0.0; self.len()];
        self.log_gate_weights_into(x, &mut w);
        w.iter_mut().for_each(|v| *v = v.exp());
        Ok(w)
    }

    /// Class probabilities of expert `i` at `x`.
    pub fn expert_probs(&self, i: usize, x: &[f64]) -> Result<Vec<f64>> {
        let atom = self.atoms.get(i).ok_or_else(|| {
            Error::InvalidArgument(format!("atom index {i} out of range 0..{}", self.len()))
        })?;
        expert_probs(atom, x)
    }

    /// Mixture class distribution `p_G(· | x)`.
    pub fn conditional_density(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let mut out = vec![0.0; self.classes()];
        let mut scratch = DensityScratch::new(self.len(), self.classes());
        self.log_density_into(x, &mut scratch, &mut out);
        out.iter_mut().for_each(|v| *v = v.exp());
        Ok(out)
    }

    /// Log of `p_G(s | x)` for every class, via log-sum-exp over atoms.
    pub(crate) fn log_density_into(
        &self,
        x: &[f64],
        scratch: &mut DensityScratch,
        out: &mut [f64],
    ) {
        self.log_gate_weights_into(x, &mut scratch.log_w);
        for (i, atom) in self.atoms.iter().enumerate() {
            atom.expert_log_probs_into(x, &mut scratch.log_f[i]);
        }
        for (s, o) in out.iter_mut().enumerate() {
            for i in 0..self.len() {
                scratch.terms[i] = scratch.log_w[i] + scratch.log_f[i][s];
            }
            *o = log_sum_exp(&scratch.terms);
        }
    }

    /// `Σ_j log p_G(y_j | x_j)`.
    pub fn log_likelihood(&self, data: &Dataset) -> Result<f64> {
        self.check_data(data)?;
        let mut scratch = DensityScratch::new(self.len(), self.classes());
        let mut total = 0.0;
        for j in 0..data.n() {
            total += self.log_density_at(data.row(j), data.label(j), &mut scratch);
        }
        Ok(total)
    }

    pub(crate) fn log_density_at(&self, x: &[f64], y: usize, scratch: &mut DensityScratch) -> f64 {
        self.log_gate_weights_into(x, &mut scratch.log_w);
        for (i, atom) in self.atoms.iter().enumerate() {
            atom.expert_log_probs_into(x, &mut scratch.log_f[i]);
            scratch.terms[i] = scratch.log_w[i] + scratch.log_f[i][y];
        }
        log_sum_exp(&scratch.terms)
    }

    pub(crate) fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "dataset covariates",
                expected: self.dim(),
                got: data.dim(),
            });
        }
        if data.classes() != self.classes() {
            return Err(Error::DimensionMismatch {
                what: "dataset classes",
                expected: self.classes(),
                got: data.classes(),
            });
        }
        Ok(())
    }

    /// Replaces atoms and temperature, re-validating against the same box.
    pub fn with_parameters(&self, atoms: Vec<ExpertAtom>, tau: Option<f64>) -> Result<Self> {
        Self::new(atoms, self.gate, tau, self.bounds)
    }

    pub(crate) fn from_parts_unchecked(
        atoms: Vec<ExpertAtom>,
        gate: GateKind,
        tau: Option<f64>,
        bounds: ParameterBox,
    ) -> Self {
        MixingMeasure {
            atoms,
            gate,
            tau,
            bounds,
        }
    }
}

/// Reusable buffers for per-row density evaluation.
pub(crate) struct DensityScratch {
    pub log_w: Vec<f64>,
    pub log_f: Vec<Vec<f64>>,
    pub terms: Vec<f64>,
}

impl DensityScratch {
    pub fn new(atoms: usize, classes: usize) -> Self {
        DensityScratch {
            log_w: vec![0.0; atoms],
            log_f: vec![vec![0.0; classes]; atoms],
            terms: vec![0.0; atoms],
        }
    }
}

/// Multinomial logistic expert `f(· | x; a, b)`.
pub fn expert_probs(atom: &ExpertAtom, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != atom.dim() {
        return Err(Error::DimensionMismatch {
            what: "covariate",
            expected: atom.dim(),
            got: x.len(),
        });
    }
    let mut out = vec![0.0; atom.classes()];
    atom.expert_log_probs_into(x, &mut out);
    out.iter_mut().for_each(|v| *v = v.exp());
    Ok(out)
}

/// Covariate/label pairs. Covariates lie in `[0, 1]^d`, labels in `0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Vec<f64>,
    y: Vec<usize>,
    d: usize,
    classes: usize,
}

impl Dataset {
    /// Builds a dataset from a row-major `n × d` covariate buffer.
    pub fn new(x: Vec<f64>, y: Vec<usize>, d: usize, classes: usize) -> Result<Self> {
        if d == 0 || classes < 2 {
            return Err(Error::InvalidDataset(format!(
                "need d >= 1 and K >= 2, got d={d}, K={classes}"
            )));
        }
        if y.is_empty() {
            return Err(Error::InvalidDataset("dataset is empty".into()));
        }
        if x.len() != y.len() * d {
            return Err(Error::DimensionMismatch {
                what: "covariate buffer",
                expected: y.len() * d,
                got: x.len(),
            });
        }
        if let Some(v) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidDataset(format!(
                "covariate {v} outside [0, 1]"
            )));
        }
        if let Some(l) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidDataset(format!(
                "label index {l} outside 0..{classes}"
            )));
        }
        Ok(Dataset { x, y, d, classes })
    }

    pub fn from_rows(rows: &[Vec<f64>], y: Vec<usize>, classes: usize) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidDataset("ragged covariate rows".into()));
        }
        Self::new(rows.concat(), y, d, classes)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.x[j * self.d..(j + 1) * self.d]
    }

    pub fn label(&self, j: usize) -> usize {
        self.y[j]
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn covariates(&self) -> &[f64] {
        &self.x
    }

    /// The dataset concatenated with itself.
    pub fn duplicated(&self) -> Dataset {
        let mut x = self.x.clone();
        x.extend_from_slice(&self.x);
        let mut y = self.y.clone();
        y.extend_from_slice(&self.y);
        Dataset { x, y, ..*self }
    }
}

/// Central finite-difference residual of the temperature interaction
/// identity for atom `atom_index` and class `class_s` at `x`:
///
/// `R = ∂ũ/∂τ + (1/τ)(αᵀ ∂ũ/∂α + β ∂ũ/∂β)`,
///
/// where `ũ = σ(affinity / τ) f(s | x; a, b)`. For the inner-product
/// affinity the identity holds exactly, so `R = O(h²)`; for the Euclidean
/// affinity `R` tends to a nonzero limit at generic points.
pub fn pde_residual(
    measure: &MixingMeasure,
    atom_index: usize,
    x: &[f64],
    class_s: usize,
    h: f64,
) -> Result<f64> {
    let gate = measure.gate();
    let tau = match (gate.has_temperature(), measure.tau()) {
        (true, Some(t)) => t,
        _ => {
            return Err(Error::UnsupportedGate {
                gate,
                op: "pde_residual",
            })
        }
    };
    measure.check_x(x)?;
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must lie in (0, 1e-3], got {h}"
        )));
    }
    let atom = measure
        .atoms()
        .get(atom_index)
        .ok_or_else(|| Error::InvalidArgument(format!("atom index {atom_index} out of range")))?;
    if class_s >= atom.classes() {
        return Err(Error::InvalidArgument(format!(
            "class index {class_s} outside 0..{}",
            atom.classes()
        )));
    }
    let euclidean = gate == GateKind::TempSigmoidEuclidean;
    if euclidean && dist(&atom.alpha, x) <= 10.0 * h {
        return Err(Error::InvalidArgument(
            "Euclidean affinity is not differentiable near alpha = x".into(),
        ));
    }

    let expert = expert_probs(atom, x)?[class_s];
    let u = |alpha: &[f64], beta: f64, tau: f64| {
        let affinity = if euclidean {
            dist(alpha, x) + beta
        } else {
            dot(alpha, x) + beta
        };
        sigmoid(affinity / tau) * expert
    };
    let alpha = atom.alpha.as_slice();
    let beta = atom.beta;

    let du_dtau = (u(alpha, beta, tau + h) - u(alpha, beta, tau - h)) / (2.0 * h);
    let du_dbeta = (u(alpha, beta + h, tau) - u(alpha, beta - h, tau)) / (2.0 * h);
    let mut alpha_term = 0.0;
    let mut shifted = alpha.to_vec();
    for c in 0..alpha.len() {
        shifted[c] = alpha[c] + h;
        let up = u(&shifted, beta, tau);
        shifted[c] = alpha[c] - h;
        let down = u(&shifted, beta, tau);
        shifted[c] = alpha[c];
        alpha_term += alpha[c] * (up - down) / (2.0 * h);
    }
    Ok(du_dtau + (alpha_term + beta * du_dbeta) / tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atom(gamma: f64, alpha: f64, beta: f64, a: [f64; 2], b: [f64; 2]) -> ExpertAtom {
        ExpertAtom {
            gamma,
            alpha: vec![alpha],
            beta,
            a: vec![vec![a[0]], vec![a[1]]],
            b: b.to_vec(),
        }
    }

    fn sigmoid_truth() -> MixingMeasure {
        MixingMeasure::with_default_bounds(
            vec![
                atom(0.2, -1.0, -0.5, [1.0, 0.0], [-2.0, 0.0]),
                atom(-0.3, 1.0, 0.5, [0.0, 0.0], [-2.0, 0.0]),
            ],
            GateKind::ModifiedSigmoid,
            None,
        )
        .unwrap()
    }

    #[test]
    fn sigmoid_reference_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        let s = sigmoid(40.0);
        // 1 - e^{-40} is within half an ulp of 1, so the value rounds to 1.
        assert!(s >= 1.0 - 1e-17 && s <= 1.0);
        // 1 / (1 + e^{0.5}) to 20 digits.
        assert!((sigmoid(-0.5) - 0.377_540_668_798_145_4).abs() < 1e-16);
        assert!(sigmoid(-700.0) > 0.0 && sigmoid(-700.0).is_finite());
        assert!((log_sigmoid(-0.5) - sigmoid(-0.5).ln()).abs() < 1e-15);
        assert!(log_sigmoid(-800.0) == -800.0);
    }

    #[test]
    fn single_atom_weight_is_one() {
        for gate in GateKind::ALL {
            let tau = gate.has_temperature().then_some(0.7);
            let m = MixingMeasure::with_default_bounds(
                vec![atom(0.3, 2.0, -1.0, [0.5, 0.0], [0.1, 0.0])],
                gate,
                tau,
            )
            .unwrap();
            assert_eq!(m.gate_weights(&[0.3]).unwrap(), vec![1.0]);
        }
    }

    #[test]
    fn paper_sigmoid_gate_at_origin() {
        // exp(0.2)σ(-0.5) and exp(-0.3)σ(0.5) both equal exp(0.2)/(1+e^0.5).
        let w = sigmoid_truth().gate_weights(&[0.0]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15, "{w:?}");
        assert!((w[0] + w[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn euclidean_gate_at_zero_distance() {
        let m = MixingMeasure::with_default_bounds(
            vec![
                atom(0.0, 0.4, 0.3, [1.0, 0.0], [0.0, 0.0]),
                atom(0.0, 0.9, -0.2, [0.0, 0.0], [1.0, 0.0]),
            ],
            GateKind::TempSigmoidEuclidean,
            Some(0.5),
        )
        .unwrap();
        let w = m.gate_weights(&[0.4]).unwrap();
        let n0 = sigmoid(0.3 / 0.5);
        let n1 = sigmoid((0.5 - 0.2) / 0.5);
        assert!((w[0] - n0 / (n0 + n1)).abs() < 1e-15);
    }

    #[test]
    fn expert_probs_cases() {
        let uniform = atom(0.0, 1.0, 0.0, [0.0, 0.0], [0.0, 0.0]);
        assert_eq!(expert_probs(&uniform, &[0.8]).unwrap(), vec![0.5, 0.5]);
        let e2 = atom(0.0, 1.0, 0.0, [0.0, 0.0], [0.0, 2.0]);
        let p = expert_probs(&e2, &[0.37]).unwrap();
        assert!((p[0] - 0.119_202_922_022_117_57).abs() < 1e-15);
        assert!((p[1] - 0.880_797_077_977_882_4).abs() < 1e-15);
        let mut shifted = e2.clone();
        for row in &mut shifted.a {
            row[0] += 1.7;
        }
        for b in &mut shifted.b {
            *b -= 3.1;
        }
        let q = expert_probs(&shifted, &[0.37]).unwrap();
        assert!((p[0] - q[0]).abs() < 1e-14);
        assert!(matches!(
            expert_probs(&e2, &[0.1, 0.2]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn density_degenerate_cases() {
        let single = MixingMeasure::with_default_bounds(
            vec![atom(0.0, 1.0, 0.0, [0.3, 0.0], [0.2, 0.0])],
            GateKind::ModifiedSigmoid,
            None,
        )
        .unwrap();
        let p = single.conditional_density(&[0.6]).unwrap();
        let f = single.expert_probs(0, &[0.6]).unwrap();
        assert!((p[0] - f[0]).abs() < 1e-15);

        let common = MixingMeasure::with_default_bounds(
            vec![
                atom(1.0, 3.0, 0.0, [0.3, 0.0], [0.2, 0.0]),
                atom(-2.0, -4.0, 1.0, [0.3, 0.0], [0.2, 0.0]),
            ],
            GateKind::ModifiedSigmoid,
            None,
        )
        .unwrap();
        let p = common.conditional_density(&[0.6]).unwrap();
        assert!((p[0] - f[0]).abs() < 1e-15);
    }

    #[test]
    fn log_likelihood_basics() {
        let m = MixingMeasure::with_default_bounds(
            vec![atom(0.0, 1.0, 0.0, [0.0, 0.0], [0.0, 0.0])],
            GateKind::ModifiedSigmoid,
            None,
        )
        .unwrap();
        let data = Dataset::new(vec![0.3], vec![1], 1, 2).unwrap();
        assert!((m.log_likelihood(&data).unwrap() - 0.5f64.ln()).abs() < 1e-15);

        let truth = sigmoid_truth();
        let data = Dataset::new(vec![0.1, 0.5, 0.9], vec![0, 1, 1], 1, 2).unwrap();
        let once = truth.log_likelihood(&data).unwrap();
        let twice = truth.log_likelihood(&data.duplicated()).unwrap();
        assert!((twice - 2.0 * once).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_inputs() {
        assert!(Dataset::new(vec![], vec![], 1, 2).is_err());
        assert!(Dataset::new(vec![1.5], vec![0], 1, 2).is_err());
        assert!(Dataset::new(vec![0.5], vec![2], 1, 2).is_err());
        let a = atom(0.0, 1.0, 0.0, [0.0, 0.0], [0.0, 0.0]);
        assert!(MixingMeasure::with_default_bounds(
            vec![a.clone()],
            GateKind::TempSigmoidInner,
            None
        )
        .is_err());
        assert!(MixingMeasure::with_default_bounds(
            vec![a.clone()],
            GateKind::ModifiedSigmoid,
            Some(1.0)
        )
        .is_err());
        assert!(MixingMeasure::with_default_bounds(
            vec![a.clone()],
            GateKind::TempSigmoidInner,
            Some(0.0)
        )
        .is_err());
        let mut far = a.clone();
        far.alpha[0] = 25.0;
        assert!(
            MixingMeasure::with_default_bounds(vec![far], GateKind::ModifiedSigmoid, None).is_err()
        );
        assert!(
            MixingMeasure::with_default_bounds(vec![], GateKind::ModifiedSigmoid, None).is_err()
        );
        let m =
            MixingMeasure::with_default_bounds(vec![a], GateKind::ModifiedSigmoid, None).unwrap();
        assert!(m.gate_weights(&[0.1, 0.2]).is_err());
    }

    #[test]
    fn pde_residual_vanishes_at_origin_parameters() {
        let m = MixingMeasure::with_default_bounds(
            vec![atom(0.0, 0.0, 0.0, [1.2, 0.0], [-0.4, 0.0])],
            GateKind::TempSigmoidInner,
            Some(0.8),
        )
        .unwrap();
        let r = pde_residual(&m, 0, &[0.4], 0, 1e-3).unwrap();
        assert!(r.abs() < 1e-15, "{r}");
    }

    #[test]
    fn pde_residual_rejects_bad_inputs() {
        let truth = sigmoid_truth();
        assert!(matches!(
            pde_residual(&truth, 0, &[0.5], 0, 1e-4),
            Err(Error::UnsupportedGate { .. })
        ));
        let m = MixingMeasure::with_default_bounds(
            vec![atom(0.0, 0.5, 0.1, [1.0, 0.0], [0.0, 0.0])],
            GateKind::TempSigmoidEuclidean,
            Some(1.0),
        )
        .unwrap();
        assert!(pde_residual(&m, 0, &[0.5], 0, 1e-4).is_err());
        assert!(pde_residual(&m, 0, &[0.2], 0, 1e-4).is_ok());
        assert!(pde_residual(&m, 0, &[0.2], 0, 1e-2).is_err());
    }
}
