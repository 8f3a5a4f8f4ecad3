//! Maximum likelihood fitting by generalized EM.
//!
//! The E-step computes posterior component responsibilities. The M-step
//! numerically ascends the expected complete-data objective
//!
//! `Q(θ) = (1/n) Σ_j Σ_i r_ji [log w_i(x_j; θ) + log f_i(y_j | x_j; θ)]`,
//!
//! which separates into one gate block (all `γ, α, β` and the shared `τ`,
//! coupled through the normalization) and one multinomial logistic block per
//! expert. Experts are optimized in the gauge where the last class is the
//! zero reference. Each block is maximized by projected quasi-Newton (BFGS)
//! or projected gradient ascent with backtracking, so `Q` never decreases.
//!
//! `Q` is normalized by `n`; the inner gradient tolerance applies to that
//! normalized objective.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    dist, dot, log_sigmoid_and_complement, log_sum_exp, Dataset, ExpertAtom, GateKind,
    MixingMeasure,
};
use crate::sampling::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MStepSolver {
    GradientAscent,
    QuasiNewton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub m_step_solver: MStepSolver,
    pub m_step_inner_tol: f64,
    pub m_step_inner_max_iter: usize,
    pub backtrack_shrink: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            tol: 1e-6,
            max_iter: 1000,
            m_step_solver: MStepSolver::QuasiNewton,
            m_step_inner_tol: 1e-8,
            m_step_inner_max_iter: 200,
            backtrack_shrink: 0.5,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::config("em.tol", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::config("em.max_iter", "must be at least 1"));
        }
        if !(self.m_step_inner_tol > 0.0) {
            return Err(Error::config("em.m_step_inner_tol", "must be positive"));
        }
        if self.m_step_inner_max_iter == 0 {
            return Err(Error::config(
                "em.m_step_inner_max_iter",
                "must be at least 1",
            ));
        }
        if !(self.backtrack_shrink > 0.0 && self.backtrack_shrink < 1.0) {
            return Err(Error::config("em.backtrack_shrink", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    PerturbTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub scheme: InitScheme,
    pub perturb_std: f64,
    pub cell_seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            scheme: InitScheme::PerturbTruth,
            perturb_std: 0.01,
            cell_seed: 0,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.perturb_std > 0.0 && self.perturb_std.is_finite()) {
            return Err(Error::config("init.perturb_std", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub estimate: MixingMeasure,
    pub initial: MixingMeasure,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time_ms: u64,
    pub diagnostics: Option<String>,
}

impl FitResult {
    pub fn final_loglik(&self) -> f64 {
        *self
            .loglik_trace
            .last()
            .expect("trace holds the initial log-likelihood")
    }
}

/// Perturbed initialization around the truth for an over-specified fit
/// (`k > k*`).
///
/// Atoms are assigned to truth cells by a uniformly random surjection; each
/// copies its truth atom, adds Gaussian noise to every free coordinate, and
/// shifts `γ` by `−log |cell|` so that cell masses start near the truth.
pub fn init_perturbed(truth: &MixingMeasure, k: usize, cfg: &InitConfig) -> Result<MixingMeasure> {
    if k <= truth.len() {
        return Err(Error::InvalidArgument(format!(
            "over-specified initialization needs k > k* = {}, got {k}",
            truth.len()
        )));
    }
    init_assigned(truth, k, cfg).map(|(m, _)| m)
}

/// Uniformly random surjection `{0..k} → {0..k*}` by rejection sampling.
pub fn random_surjection<R: Rng>(rng: &mut R, k: usize, cells: usize) -> Vec<usize> {
    loop {
        let assign: Vec<usize> = (0..k).map(|_| rng.gen_range(0..cells)).collect();
        let mut seen = vec![false; cells];
        assign.iter().for_each(|&c| seen[c] = true);
        if seen.iter().all(|&s| s) {
            return assign;
        }
    }
}

/// Initialization allowing `k = k*` as well; returns the cell of each atom.
pub(crate) fn init_assigned(
    truth: &MixingMeasure,
    k: usize,
    cfg: &InitConfig,
) -> Result<(MixingMeasure, Vec<usize>)> {
    cfg.validate()?;
    let k_star = truth.len();
    if k < k_star {
        return Err(Error::InvalidArgument(format!(
            "cannot fit k = {k} atoms to a truth with {k_star} atoms"
        )));
    }
    let mut rng = stream_rng(cfg.cell_seed, 0);
    let assign = random_surjection(&mut rng, k, k_star);
    let mut sizes = vec![0usize; k_star];
    assign.iter().for_each(|&c| sizes[c] += 1);

    let noise = Normal::new(0.0, cfg.perturb_std)
        .map_err(|e| Error::InvalidArgument(format!("perturbation std: {e}")))?;
    let bounds = *truth.bounds();
    let gate = truth.gate();
    let classes = truth.classes();
    let mut atoms = Vec::with_capacity(k);
    for &cell in &assign {
        let src = &truth.atoms()[cell];
        let mut atom = src.clone();
        atom.gamma = bounds
            .gamma
            .clamp(src.gamma - (sizes[cell] as f64).ln() + noise.sample(&mut rng));
        for v in &mut atom.alpha {
            *v = bounds.alpha.clamp(*v + noise.sample(&mut rng));
        }
        if gate != GateKind::SoftmaxBaseline {
            atom.beta = bounds.beta.clamp(atom.beta + noise.sample(&mut rng));
        }
        for l in 0..classes - 1 {
            for v in &mut atom.a[l] {
                *v = bounds.a.clamp(*v + noise.sample(&mut rng));
            }
            atom.b[l] = bounds.b.clamp(atom.b[l] + noise.sample(&mut rng));
        }
        atoms.push(atom);
    }
    let tau = truth
        .tau()
        .map(|t| bounds.tau.clamp(t + noise.sample(&mut rng)));
    Ok((truth.with_parameters(atoms, tau)?, assign))
}

/// Posterior responsibilities `r_ji` (row-major `n × k'`) together with the
/// observed-data log-likelihood of the measure they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    values: Vec<f64>,
    k: usize,
    pub log_likelihood: f64,
}

impl Responsibilities {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument(
                "responsibility rows must share a nonzero length".into(),
            ));
        }
        for r in rows {
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > 1e-8 || r.iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidArgument(
                    "responsibility rows must be stochastic".into(),
                ));
            }
        }
        Ok(Responsibilities {
            values: rows.concat(),
            k,
            log_likelihood: f64::NAN,
        })
    }

    pub fn n(&self) -> usize {
        self.values.len() / self.k
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.k..(j + 1) * self.k]
    }
}

/// Bayes-rule responsibilities `r_ji ∝ w_i(x_j) f_i(y_j | x_j)`.
pub fn e_step(measure: &MixingMeasure, data: &Dataset) -> Result<Responsibilities> {
    measure.check_data(data)?;
    let k = measure.len();
    let classes = measure.classes();
    let mut values = vec![0.0; data.n() * k];
    let mut log_w = vec![0.0; k];
    let mut log_f = vec![0.0; classes];
    let mut total = 0.0;
    for (j, out) in values.chunks_exact_mut(k).enumerate() {
        let x = data.row(j);
        let y = data.label(j);
        measure.log_gate_weights_into(x, &mut log_w);
        for (i, atom) in measure.atoms().iter().enumerate() {
            atom.expert_log_probs_into(x, &mut log_f);
            out[i] = log_w[i] + log_f[y];
        }
        let lse = log_sum_exp(out);
        total += lse;
        out.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    if !total.is_finite() {
        return Err(Error::Numerical(format!("log-likelihood is {total}")));
    }
    Ok(Responsibilities {
        values,
        k,
        log_likelihood: total,
    })
}

/// Flattening of a measure's parameters: the gate block
/// `[γ_i, α_i, β_i]_i (+ τ)` followed by one expert block per atom
/// `[a_l, b_l]_{l < K−1}`.
#[derive(Debug, Clone, Copy)]
pub struct ParamLayout {
    pub gate: GateKind,
    pub k: usize,
    pub d: usize,
    pub classes: usize,
}

impl ParamLayout {
    pub fn of(measure: &MixingMeasure) -> Self {
        ParamLayout {
            gate: measure.gate(),
            k: measure.len(),
            d: measure.dim(),
            classes: measure.classes(),
        }
    }

    fn gate_stride(&self) -> usize {
        self.d + 2
    }

    pub fn gate_len(&self) -> usize {
        self.k * self.gate_stride() + usize::from(self.gate.has_temperature())
    }

    pub fn expert_len(&self) -> usize {
        (self.classes - 1) * (self.d + 1)
    }

    pub fn len(&self) -> usize {
        self.gate_len() + self.k * self.expert_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinates that the M-step leaves untouched: the softmax intercept
    /// `β` duplicates `γ` and stays at its initial value.
    pub fn frozen(&self) -> Vec<bool> {
        let mut frozen = vec![false; self.len()];
        if self.gate == GateKind::SoftmaxBaseline {
            for i in 0..self.k {
                frozen[i * self.gate_stride() + self.d + 1] = true;
            }
        }
        frozen
    }

    pub fn pack(&self, measure: &MixingMeasure) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.len());
        for atom in measure.atoms() {
            p.push(atom.gamma);
            p.extend_from_slice(&atom.alpha);
            p.push(atom.beta);
        }
        if let Some(t) = measure.tau() {
            p.push(t);
        }
        for atom in measure.atoms() {
            pack_expert(atom, self.classes, &mut p);
        }
        p
    }

    /// Rebuilds a measure from `p`, keeping the template's gate and box.
    pub fn unpack(&self, template: &MixingMeasure, p: &[f64]) -> Result<MixingMeasure> {
        let (atoms, tau) = self.unpack_parts(template, p);
        template.with_parameters(atoms, tau)
    }

    fn unpack_parts(&self, template: &MixingMeasure, p: &[f64]) -> (Vec<ExpertAtom>, Option<f64>) {
        let gs = self.gate_stride();
        let tau = self.gate.has_temperature().then(|| p[self.gate_len() - 1]);
        let atoms = template
            .atoms()
            .iter()
            .enumerate()
            .map(|(i, src)| {
                let g = &p[i * gs..(i + 1) * gs];
                let mut atom = src.clone();
                atom.gamma = g[0];
                atom.alpha.copy_from_slice(&g[1..1 + self.d]);
                atom.beta = g[1 + self.d];
                let off = self.gate_len() + i * self.expert_len();
                unpack_expert(&p[off..off + self.expert_len()], self.classes, &mut atom);
                atom
            })
            .collect();
        (atoms, tau)
    }

    /// Per-coordinate box bounds.
    pub fn bounds(&self, measure: &MixingMeasure) -> (Vec<f64>, Vec<f64>) {
        let b = measure.bounds();
        let mut lo = Vec::with_capacity(self.len());
        let mut hi = Vec::with_capacity(self.len());
        for _ in 0..self.k {
            lo.push(b.gamma.lo);
            hi.push(b.gamma.hi);
            for _ in 0..self.d {
                lo.push(b.alpha.lo);
                hi.push(b.alpha.hi);
            }
            lo.push(b.beta.lo);
            hi.push(b.beta.hi);
        }
        if self.gate.has_temperature() {
            lo.push(b.tau.lo);
            hi.push(b.tau.hi);
        }
        for _ in 0..self.k {
            for _ in 0..self.classes - 1 {
                for _ in 0..self.d {
                    lo.push(b.a.lo);
                    hi.push(b.a.hi);
                }
                lo.push(b.b.lo);
                hi.push(b.b.hi);
            }
        }
        (lo, hi)
    }
}

fn pack_expert(atom: &ExpertAtom, classes: usize, p: &mut Vec<f64>) {
    let last = classes - 1;
    for l in 0..last {
        for (v, r) in atom.a[l].iter().zip(&atom.a[last]) {
            p.push(v - r);
        }
        p.push(atom.b[l] - atom.b[last]);
    }
}

fn unpack_expert(p: &[f64], classes: usize, atom: &mut ExpertAtom) {
    let d = atom.dim();
    for l in 0..classes - 1 {
        let row = &p[l * (d + 1)..(l + 1) * (d + 1)];
        atom.a[l].copy_from_slice(&row[..d]);
        atom.b[l] = row[d];
    }
    atom.a[classes - 1].iter_mut().for_each(|v| *v = 0.0);
    atom.b[classes - 1] = 0.0;
}

/// Gate part of `Q` over the gate block `[γ_i, α_i, β_i]_i (+ τ)`.
struct GateObjective<'a> {
    layout: ParamLayout,
    data: &'a Dataset,
    resp: &'a Responsibilities,
}

impl GateObjective<'_> {
    fn eval(&self, p: &[f64], grad: &mut [f64]) -> f64 {
        let ParamLayout { gate, k, d, .. } = self.layout;
        let gs = d + 2;
        let tau = if gate.has_temperature() {
            p[k * gs]
        } else {
            1.0
        };
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut ell = vec![0.0; k];
        let mut dz = vec![0.0; k];
        let mut zs = vec![0.0; k];
        let mut weights = vec![0.0; k];
        let mut q = 0.0;
        for j in 0..self.data.n() {
            let x = self.data.row(j);
            let r = self.resp.row(j);
            for i in 0..k {
                let g = &p[i * gs..(i + 1) * gs];
                let alpha = &g[1..1 + d];
                let beta = g[1 + d];
                let (l, s, z) = match gate {
                    GateKind::ModifiedSigmoid => {
                        let z = dot(alpha, x) + beta;
                        let (ls, s) = log_sigmoid_and_complement(z);
                        (g[0] + ls, s, z)
                    }
                    GateKind::TempSigmoidInner => {
                        let z = (dot(alpha, x) + beta) / tau;
                        let (ls, s) = log_sigmoid_and_complement(z);
                        (g[0] + ls, s, z)
                    }
                    GateKind::TempSigmoidEuclidean => {
                        let z = (dist(alpha, x) + beta) / tau;
                        let (ls, s) = log_sigmoid_and_complement(z);
                        (g[0] + ls, s, z)
                    }
                    GateKind::SoftmaxBaseline => (g[0] + dot(alpha, x) + beta, 1.0, 0.0),
                };
                ell[i] = l;
                dz[i] = s;
                zs[i] = z;
            }
            let m = ell.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (w, &l) in weights.iter_mut().zip(&ell) {
                *w = (l - m).exp();
                total += *w;
            }
            let lse = m + total.ln();
            for i in 0..k {
                q += r[i] * (ell[i] - lse);
                // dQ/dℓ_i, using Σ_i r_ji = 1.
                let c = r[i] - weights[i] / total;
                if c == 0.0 {
                    continue;
                }
                let base = i * gs;
                grad[base] += c;
                let cz = c * dz[i];
                match gate {
                    GateKind::ModifiedSigmoid | GateKind::SoftmaxBaseline => {
                        for (gv, xv) in grad[base + 1..base + 1 + d].iter_mut().zip(x) {
                            *gv += cz * xv;
                        }
                        grad[base + 1 + d] += cz;
                    }
                    GateKind::TempSigmoidInner => {
                        for (gv, xv) in grad[base + 1..base + 1 + d].iter_mut().zip(x) {
                            *gv += cz * xv / tau;
                        }
                        grad[base + 1 + d] += cz / tau;
                        grad[k * gs] -= cz * zs[i] / tau;
                    }
                    GateKind::TempSigmoidEuclidean => {
                        let alpha = &p[base + 1..base + 1 + d];
                        let norm = dist(alpha, x);
                        if norm > 0.0 {
                            for c_ in 0..d {
                                grad[base + 1 + c_] += cz * (alpha[c_] - x[c_]) / (norm * tau);
                            }
                        }
                        grad[base + 1 + d] += cz / tau;
                        grad[k * gs] -= cz * zs[i] / tau;
                    }
                }
            }
        }
        let scale = 1.0 / self.data.n() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        q * scale
    }
}

/// Weighted multinomial logistic part of `Q` for atom `atom`.
struct ExpertObjective<'a> {
    layout: ParamLayout,
    atom: usize,
    data: &'a Dataset,
    resp: &'a Responsibilities,
}

impl ExpertObjective<'_> {
    fn eval(&self, p: &[f64], grad: &mut [f64]) -> f64 {
        let ParamLayout { d, classes, .. } = self.layout;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut logits = vec![0.0; classes];
        let mut q = 0.0;
        for j in 0..self.data.n() {
            let w = self.resp.row(j)[self.atom];
            if w == 0.0 {
                continue;
            }
            let x = self.data.row(j);
            let y = self.data.label(j);
            for l in 0..classes - 1 {
                let row = &p[l * (d + 1)..(l + 1) * (d + 1)];
                logits[l] = dot(&row[..d], x) + row[d];
            }
            logits[classes - 1] = 0.0;
            let lse = log_sum_exp(&logits);
            q += w * (logits[y] - lse);
            for l in 0..classes - 1 {
                let ind = if l == y { 1.0 } else { 0.0 };
                let c = w * (ind - (logits[l] - lse).exp());
                let g = &mut grad[l * (d + 1)..(l + 1) * (d + 1)];
                for (gv, xv) in g[..d].iter_mut().zip(x) {
                    *gv += c * xv;
                }
                g[d] += c;
            }
        }
        let scale = 1.0 / self.data.n() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        q * scale
    }
}

fn check_resp(resp: &Responsibilities, data: &Dataset, measure: &MixingMeasure) -> Result<()> {
    measure.check_data(data)?;
    if resp.n() != data.n() || resp.k() != measure.len() {
        return Err(Error::DimensionMismatch {
            what: "responsibilities",
            expected: data.n() * measure.len(),
            got: resp.n() * resp.k(),
        });
    }
    Ok(())
}

/// Value and gradient of the normalized expected complete-data objective at
/// `measure`, in [`ParamLayout`] order. Frozen coordinates get a zero gradient.
pub fn q_objective(
    resp: &Responsibilities,
    data: &Dataset,
    measure: &MixingMeasure,
) -> Result<(f64, Vec<f64>)> {
    check_resp(resp, data, measure)?;
    let layout = ParamLayout::of(measure);
    let p = layout.pack(measure);
    Ok(q_at(layout, resp, data, &p))
}

/// Like [`q_objective`] at an arbitrary parameter vector, without box checks.
pub fn q_objective_at(
    resp: &Responsibilities,
    data: &Dataset,
    template: &MixingMeasure,
    p: &[f64],
) -> Result<(f64, Vec<f64>)> {
    check_resp(resp, data, template)?;
    let layout = ParamLayout::of(template);
    if p.len() != layout.len() {
        return Err(Error::DimensionMismatch {
            what: "parameter vector",
            expected: layout.len(),
            got: p.len(),
        });
    }
    Ok(q_at(layout, resp, data, p))
}

fn q_at(
    layout: ParamLayout,
    resp: &Responsibilities,
    data: &Dataset,
    p: &[f64],
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; layout.len()];
    let gl = layout.gate_len();
    let gate = GateObjective { layout, data, resp };
    let mut q = gate.eval(&p[..gl], &mut grad[..gl]);
    for i in 0..layout.k {
        let off = gl + i * layout.expert_len();
        let obj = ExpertObjective {
            layout,
            atom: i,
            data,
            resp,
        };
        let end = off + layout.expert_len();
        q += obj.eval(&p[off..end], &mut grad[off..end]);
    }
    for (g, f) in grad.iter_mut().zip(layout.frozen()) {
        if f {
            *g = 0.0;
        }
    }
    (q, grad)
}

/// Outcome of one M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct MStepOutcome {
    pub measure: MixingMeasure,
    pub q_old: f64,
    pub q_new: f64,
    /// Norm of the projected gradient of `Q` at the returned point.
    pub grad_norm: f64,
    pub inner_iterations: usize,
}

/// Numerical M-step: ascends `Q` block by block from `current`.
///
/// Returns [`Error::NoAscent`] when no block admits an ascent step and the
/// projected gradient is still above tolerance.
pub fn m_step(
    resp: &Responsibilities,
    data: &Dataset,
    current: &MixingMeasure,
    cfg: &EmConfig,
) -> Result<MStepOutcome> {
    check_resp(resp, data, current)?;
    let layout = ParamLayout::of(current);
    let mut p = layout.pack(current);
    let (lo, hi) = layout.bounds(current);
    let frozen = layout.frozen();

    let gl = layout.gate_len();
    let gate = GateObjective { layout, data, resp };
    let mut blocks: Vec<BlockResult> = Vec::with_capacity(layout.k + 1);
    blocks.push(maximize(
        |x, g| gate.eval(x, g),
        &mut p[..gl],
        &lo[..gl],
        &hi[..gl],
        &frozen[..gl],
        cfg,
    )?);
    for i in 0..layout.k {
        let off = gl + i * layout.expert_len();
        let end = off + layout.expert_len();
        let obj = ExpertObjective {
            layout,
            atom: i,
            data,
            resp,
        };
        blocks.push(maximize(
            |x, g| obj.eval(x, g),
            &mut p[off..end],
            &lo[off..end],
            &hi[off..end],
            &frozen[off..end],
            cfg,
        )?);
    }
    if blocks.iter().all(|b| b.stalled) {
        return Err(Error::NoAscent);
    }
    let q_old = blocks.iter().map(|b| b.start_value).sum();
    let q_new = blocks.iter().map(|b| b.value).sum();
    let grad_norm = blocks
        .iter()
        .map(|b| b.grad_norm * b.grad_norm)
        .sum::<f64>()
        .sqrt();
    let inner_iterations = blocks.iter().map(|b| b.iterations).sum();
    let (atoms, tau) = layout.unpack_parts(current, &p);
    if atoms.iter().any(|a| !a.is_finite()) || tau.is_some_and(|t| !t.is_finite()) {
        return Err(Error::Numerical(
            "M-step produced non-finite parameters".into(),
        ));
    }
    let measure =
        MixingMeasure::from_parts_unchecked(atoms, current.gate(), tau, *current.bounds());
    Ok(MStepOutcome {
        measure,
        q_old,
        q_new,
        grad_norm,
        inner_iterations,
    })
}

struct BlockResult {
    start_value: f64,
    value: f64,
    grad_norm: f64,
    iterations: usize,
    /// No ascent step was possible from a point above the gradient tolerance.
    stalled: bool,
}

fn projected_gradient(
    x: &[f64],
    g: &[f64],
    lo: &[f64],
    hi: &[f64],
    frozen: &[bool],
    out: &mut [f64],
) {
    for i in 0..x.len() {
        out[i] = if frozen[i] || (x[i] <= lo[i] && g[i] < 0.0) || (x[i] >= hi[i] && g[i] > 0.0) {
            0.0
        } else {
            g[i]
        };
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

const ARMIJO: f64 = 1e-4;
/// Longest trial step, in parameter units.
const MAX_STEP: f64 = 1.0;
/// Backtracking stops once the step is this small relative to `1 + ‖x‖`.
const MIN_STEP: f64 = 1e-14;

/// Projected BFGS / gradient ascent with backtracking on a box.
fn maximize<F>(
    f: F,
    x: &mut [f64],
    lo: &[f64],
    hi: &[f64],
    frozen: &[bool],
    cfg: &EmConfig,
) -> Result<BlockResult>
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    let n = x.len();
    for i in 0..n {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
    let mut g = vec![0.0; n];
    let mut value = f(x, &mut g);
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "objective is {value} at the M-step start"
        )));
    }
    let start_value = value;
    let quasi_newton = cfg.m_step_solver == MStepSolver::QuasiNewton;
    let mut pg = vec![0.0; n];
    projected_gradient(x, &g, lo, hi, frozen, &mut pg);
    let mut gnorm = norm(&pg);

    // Inverse of the (negative) Hessian approximation, row-major.
    let mut h: Vec<f64> = vec![0.0; n * n];
    let mut h_ready = false;
    let mut step_hint = 1.0;
    let mut dir = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut g_trial = vec![0.0; n];
    let mut iterations = 0;
    let mut stalled = false;

    while gnorm > cfg.m_step_inner_tol && iterations < cfg.m_step_inner_max_iter {
        // Free set: coordinates not pinned at an active bound.
        let free: Vec<bool> = (0..n)
            .map(|i| !frozen[i] && (pg[i] != 0.0 || (lo[i] < x[i] && x[i] < hi[i])))
            .collect();
        if quasi_newton && h_ready {
            for i in 0..n {
                dir[i] = if free[i] {
                    (0..n)
                        .filter(|&c| free[c])
                        .map(|c| h[i * n + c] * pg[c])
                        .sum()
                } else {
                    0.0
                };
            }
            if dot(&dir, &pg) <= 0.0 {
                h_ready = false;
            }
        }
        let mut t;
        if !(quasi_newton && h_ready) {
            dir.copy_from_slice(&pg);
            t = if quasi_newton {
                (1.0 / gnorm).min(1.0)
            } else {
                step_hint
            };
        } else {
            t = 1.0;
        }
        let dir_norm = norm(&dir);
        t = t.min(MAX_STEP / dir_norm);
        let min_t = MIN_STEP * (1.0 + norm(x)) / dir_norm;

        let mut accepted = None;
        while t >= min_t {
            for i in 0..n {
                trial[i] = (x[i] + t * dir[i]).clamp(lo[i], hi[i]);
            }
            let v = f(&trial, &mut g_trial);
            let gain: f64 = (0..n).map(|i| g[i] * (trial[i] - x[i])).sum();
            if v.is_finite() && v >= value + ARMIJO * gain && v >= value {
                accepted = Some(v);
                break;
            }
            t *= cfg.backtrack_shrink;
        }
        let Some(v) = accepted else {
            if quasi_newton && h_ready {
                h_ready = false;
                continue;
            }
            stalled = iterations == 0;
            break;
        };

        iterations += 1;
        if quasi_newton {
            // BFGS on the minimization objective −Q.
            let s: Vec<f64> = (0..n).map(|i| trial[i] - x[i]).collect();
            let y: Vec<f64> = (0..n).map(|i| g[i] - g_trial[i]).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
                if !h_ready {
                    let scale = sy / dot(&y, &y);
                    h.iter_mut().for_each(|v| *v = 0.0);
                    for i in 0..n {
                        h[i * n + i] = scale;
                    }
                    h_ready = true;
                }
                bfgs_update(&mut h, &s, &y, sy);
            }
        } else {
            step_hint = t * 2.0;
        }
        x.copy_from_slice(&trial);
        g.copy_from_slice(&g_trial);
        value = v;
        projected_gradient(x, &g, lo, hi, frozen, &mut pg);
        gnorm = norm(&pg);
    }
    Ok(BlockResult {
        start_value,
        value,
        grad_norm: gnorm,
        iterations,
        stalled: stalled && gnorm > cfg.m_step_inner_tol,
    })
}

/// `H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ`, `ρ = 1 / sᵀy`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|c| h[i * n + c] * y[c]).sum())
        .collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for c in 0..n {
            h[i * n + c] +=
                -rho * (hy[i] * s[c] + s[i] * hy[c]) + (rho * rho * yhy + rho) * s[i] * s[c];
        }
    }
}

/// Fits `k` atoms by generalized EM from a perturbed-truth start.
///
/// Stops when `|ℓ_t − ℓ_{t−1}| ≤ tol (1 + |ℓ_{t−1}|)`, when the M-step can no
/// longer ascend (treated as convergence), or at `max_iter`. Numerical
/// failures end the run with `converged = false` and a diagnostic.
pub fn em_fit(
    data: &Dataset,
    k: usize,
    truth: &MixingMeasure,
    init_cfg: &InitConfig,
    em_cfg: &EmConfig,
) -> Result<FitResult> {
    em_cfg.validate()?;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    truth.check_data(data)?;
    let (initial, _) = init_assigned(truth, k, init_cfg)?;
    em_from(data, initial, em_cfg)
}

/// Runs generalized EM from an explicit starting measure.
pub fn em_from(data: &Dataset, initial: MixingMeasure, em_cfg: &EmConfig) -> Result<FitResult> {
    em_cfg.validate()?;
    let started = Instant::now();
    let mut resp = e_step(&initial, data)?;
    let mut trace = vec![resp.log_likelihood];
    let mut current = initial.clone();
    let mut converged = false;
    let mut diagnostics = None;
    let mut iterations = 0;
    while iterations < em_cfg.max_iter {
        let outcome = match m_step(&resp, data, &current, em_cfg) {
            Ok(o) => o,
            Err(Error::NoAscent) => {
                converged = true;
                break;
            }
            Err(e) => {
                diagnostics = Some(format!("iteration {}: {e}", iterations + 1));
                break;
            }
        };
        let next = match e_step(&outcome.measure, data) {
            Ok(r) => r,
            Err(e) => {
                diagnostics = Some(format!("iteration {}: {e}", iterations + 1));
                break;
            }
        };
        iterations += 1;
        let prev = resp.log_likelihood;
        let now = next.log_likelihood;
        trace.push(now);
        current = outcome.measure;
        resp = next;
        if (now - prev).abs() <= em_cfg.tol * (1.0 + prev.abs()) {
            converged = true;
            break;
        }
    }
    if diagnostics.is_none() && !converged {
        diagnostics = Some(format!("reached max_iter = {}", em_cfg.max_iter));
    }
    Ok(FitResult {
        estimate: current,
        initial,
        loglik_trace: trace,
        iterations,
        converged,
        wall_time_ms: started.elapsed().as_millis() as u64,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::Preset;
    use crate::sampling::{sample_dataset, SampleConfig};
    use crate::verify::{random_measure, random_point};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};

    const GATES: [GateKind; 4] = [
        GateKind::ModifiedSigmoid,
        GateKind::TempSigmoidInner,
        GateKind::TempSigmoidEuclidean,
        GateKind::SoftmaxBaseline,
    ];

    fn random_data(rng: &mut impl Rng, n: usize, d: usize, classes: usize) -> Dataset {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| random_point(rng, d)).collect();
        let y = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        Dataset::from_rows(&rows, y, classes).unwrap()
    }

    /// `(1/n) Σ_j Σ_i r_ji [log w_i(x_j) + log f_i(y_j | x_j)]`, from the public densities.
    fn q_oracle(resp: &Responsibilities, data: &Dataset, m: &MixingMeasure) -> f64 {
        let mut q = 0.0;
        for j in 0..data.n() {
            let x = data.row(j);
            let w = m.gate_weights(x).unwrap();
            for (i, &r) in resp.row(j).iter().enumerate() {
                let f = m.expert_probs(i, x).unwrap()[data.label(j)];
                q += r * (w[i].ln() + f.ln());
            }
        }
        q / data.n() as f64
    }

    #[test]
    fn e_step_matches_bayes_rule() {
        let mut rng = stream_rng(11, 0);
        for gate in GATES {
            let m = random_measure(&mut rng, gate, 3, 2, 3);
            let data = random_data(&mut rng, 30, 2, 3);
            let resp = e_step(&m, &data).unwrap();
            let mut ll = 0.0;
            for j in 0..data.n() {
                let x = data.row(j);
                let w = m.gate_weights(x).unwrap();
                let joint: Vec<f64> = (0..3)
                    .map(|i| w[i] * m.expert_probs(i, x).unwrap()[data.label(j)])
                    .collect();
                let total: f64 = joint.iter().sum();
                ll += total.ln();
                for i in 0..3 {
                    assert!((resp.row(j)[i] - joint[i] / total).abs() < 1e-12, "{gate}");
                }
            }
            assert!((resp.log_likelihood - ll).abs() < 1e-10 * ll.abs());
            assert!((m.log_likelihood(&data).unwrap() - ll).abs() < 1e-10 * ll.abs());
        }
    }

    #[test]
    fn q_value_and_gradient_match_oracle_and_differences() {
        let mut rng = stream_rng(12, 0);
        for gate in GATES {
            for _ in 0..5 {
                let m = random_measure(&mut rng, gate, 3, 2, 3);
                let data = random_data(&mut rng, 40, 2, 3);
                let other = random_measure(&mut rng, gate, 3, 2, 3);
                let resp = e_step(&other, &data).unwrap();
                let (q, grad) = q_objective(&resp, &data, &m).unwrap();
                assert!(
                    (q - q_oracle(&resp, &data, &m)).abs() < 1e-12 * (1.0 + q.abs()),
                    "{gate}"
                );

                let layout = ParamLayout::of(&m);
                let p = layout.pack(&m);
                let frozen = layout.frozen();
                for c in 0..p.len() {
                    if frozen[c] {
                        assert_eq!(grad[c], 0.0);
                        continue;
                    }
                    let h = 1e-5 * (1.0 + p[c].abs());
                    let mut up = p.clone();
                    let mut dn = p.clone();
                    up[c] += h;
                    dn[c] -= h;
                    let fd = (q_objective_at(&resp, &data, &m, &up).unwrap().0
                        - q_objective_at(&resp, &data, &m, &dn).unwrap().0)
                        / (2.0 * h);
                    assert!(
                        (fd - grad[c]).abs() <= 1e-5 * fd.abs().max(grad[c].abs()).max(1e-3),
                        "{gate} coordinate {c}: analytic {} vs fd {fd}",
                        grad[c]
                    );
                }
            }
        }
    }

    #[test]
    fn pack_unpack_round_trip() {
        let mut rng = stream_rng(13, 0);
        for gate in GATES {
            let m = random_measure(&mut rng, gate, 2, 2, 3);
            let layout = ParamLayout::of(&m);
            let p = layout.pack(&m);
            assert_eq!(p.len(), layout.len());
            let back = layout.unpack(&m, &p).unwrap();
            assert_eq!(layout.pack(&back), p);
            for x in [[0.2, 0.7], [0.9, 0.1]] {
                let a = m.conditional_density(&x).unwrap();
                let b = back.conditional_density(&x).unwrap();
                a.iter()
                    .zip(&b)
                    .for_each(|(u, v)| assert!((u - v).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn m_step_does_not_decrease_q() {
        let truth = Preset::SigmoidComparison.truth();
        let data = sample_dataset(&SampleConfig {
            n: 500,
            seed: 3,
            truth: truth.clone(),
        })
        .unwrap();
        let init = init_perturbed(&truth, 3, &InitConfig::default()).unwrap();
        let resp = e_step(&init, &data).unwrap();
        let out = m_step(&resp, &data, &init, &EmConfig::default()).unwrap();
        assert!(out.q_new >= out.q_old);
        let q0 = q_oracle(&resp, &data, &init);
        let q1 = q_oracle(&resp, &data, &out.measure);
        assert!(q1 >= q0 - 1e-12, "{q1} < {q0}");
    }

    #[test]
    fn init_is_deterministic_and_covers_every_cell() {
        let truth = Preset::TemperatureEuclidean.truth();
        let cfg = InitConfig {
            cell_seed: 42,
            ..InitConfig::default()
        };
        let a = init_perturbed(&truth, 4, &cfg).unwrap();
        assert_eq!(a, init_perturbed(&truth, 4, &cfg).unwrap());
        let b = init_perturbed(
            &truth,
            4,
            &InitConfig {
                cell_seed: 43,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_ne!(a, b);
        assert!(init_perturbed(&truth, 2, &cfg).is_err());
        assert!(init_assigned(&truth, 1, &cfg).is_err());
    }

    #[test]
    fn tiny_perturbation_gives_a_weight_preserving_split() {
        let truth = Preset::SigmoidComparison.truth();
        let cfg = InitConfig {
            perturb_std: 1e-12,
            ..InitConfig::default()
        };
        let (m, cells) = init_assigned(&truth, 3, &cfg).unwrap();
        for j in 0..truth.len() {
            let mass: f64 = cells
                .iter()
                .zip(m.atoms())
                .filter(|(c, _)| **c == j)
                .map(|(_, a)| a.gamma.exp())
                .sum();
            assert!((mass - truth.atoms()[j].gamma.exp()).abs() < 1e-9);
        }
        assert!(crate::metrics::loss_d1(&m, &truth).unwrap() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn surjection_hits_every_cell(seed in any::<u64>(), cells in 1usize..4, extra in 0usize..4) {
            let k = cells + extra;
            let s = random_surjection(&mut stream_rng(seed, 0), k, cells);
            prop_assert_eq!(s.len(), k);
            for c in 0..cells {
                prop_assert!(s.contains(&c));
            }
        }
    }

    #[test]
    fn single_expert_estimate_is_consistent() {
        // The slope's standard error is about 0.07 at n = 1e4 with x ~ U[0, 1],
        // so 0.05 is only a safe margin at this larger size.
        let truth = MixingMeasure::with_default_bounds(
            vec![ExpertAtom {
                gamma: 0.0,
                alpha: vec![1.0],
                beta: 0.0,
                a: vec![vec![1.5], vec![0.0]],
                b: vec![-0.5, 0.0],
            }],
            GateKind::ModifiedSigmoid,
            None,
        )
        .unwrap();
        let data = sample_dataset(&SampleConfig {
            n: 200_000,
            seed: 0,
            truth: truth.clone(),
        })
        .unwrap();
        let fit = em_fit(&data, 1, &truth, &InitConfig::default(), &EmConfig::default()).unwrap();
        let e = &fit.estimate.atoms()[0];
        assert!((e.a[0][0] - 1.5).abs() < 0.05, "slope {}", e.a[0][0]);
        assert!((e.b[0] + 0.5).abs() < 0.05, "intercept {}", e.b[0]);
    }

    #[test]
    fn single_atom_fit_is_a_plain_logistic_regression() {
        // With k = 1 the gate is constant, so EM reduces to maximizing the
        // expert log-likelihood; a second run from another start must agree.
        let mut rng = stream_rng(14, 0);
        let truth = random_measure(&mut rng, GateKind::ModifiedSigmoid, 1, 1, 2);
        let data = sample_dataset(&SampleConfig {
            n: 2000,
            seed: 5,
            truth: truth.clone(),
        })
        .unwrap();
        let cfg = EmConfig {
            tol: 1e-12,
            ..EmConfig::default()
        };
        let a = em_fit(&data, 1, &truth, &InitConfig::default(), &cfg).unwrap();
        let start = truth
            .with_parameters(
                vec![
                    random_measure(&mut rng, GateKind::ModifiedSigmoid, 1, 1, 2).atoms()[0].clone(),
                ],
                None,
            )
            .unwrap();
        let b = em_from(&data, start, &cfg).unwrap();
        let (ea, eb) = (&a.estimate.atoms()[0], &b.estimate.atoms()[0]);
        assert!(
            (ea.a[0][0] - eb.a[0][0]).abs() < 1e-4,
            "{} vs {}",
            ea.a[0][0],
            eb.a[0][0]
        );
        assert!((ea.b[0] - eb.b[0]).abs() < 1e-4);
        assert!((a.final_loglik() - b.final_loglik()).abs() < 1e-6 * a.final_loglik().abs());
    }

    #[test]
    fn traces_are_monotone() {
        let mut rng = stream_rng(15, 0);
        for gate in GATES {
            let truth = random_measure(&mut rng, gate, 2, 1, 2);
            let data = sample_dataset(&SampleConfig {
                n: 300,
                seed: 9,
                truth: truth.clone(),
            })
            .unwrap();
            let cfg = EmConfig {
                max_iter: 30,
                ..EmConfig::default()
            };
            let fit = em_fit(&data, 3, &truth, &InitConfig::default(), &cfg).unwrap();
            assert!(fit.loglik_trace.len() == fit.iterations + 1);
            for w in fit.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9 * 300.0, "{gate}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn config_validation_names_keys() {
        let bad = EmConfig {
            backtrack_shrink: 1.0,
            ..EmConfig::default()
        };
        assert!(
            matches!(bad.validate(), Err(Error::Config { path, .. }) if path == "em.backtrack_shrink")
        );
        let bad = InitConfig {
            perturb_std: 0.0,
            ..InitConfig::default()
        };
        assert!(
            matches!(bad.validate(), Err(Error::Config { path, .. }) if path == "init.perturb_std")
        );
    }
}
