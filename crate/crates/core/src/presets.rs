//! Ground-truth mixing measures of the reference experiments
//! (`k* = 2` experts, `K = 2` classes, `d = 1`).
//!
//! Expert parameters are stored with the last class as the zero reference;
//! tables given with a nonzero class-2 logit are shifted accordingly, which
//! leaves every expert distribution unchanged.

use serde::{Deserialize, Serialize};

use crate::model::{ExpertAtom, GateKind, MixingMeasure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Modified sigmoid gate, comparison table.
    SigmoidComparison,
    /// Softmax gate, comparison table.
    SoftmaxComparison,
    /// Temperature sigmoid gate with inner-product affinity.
    TemperatureInner,
    /// Temperature sigmoid gate with Euclidean affinity.
    TemperatureEuclidean,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::SigmoidComparison,
        Preset::SoftmaxComparison,
        Preset::TemperatureInner,
        Preset::TemperatureEuclidean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::SigmoidComparison => "sigmoid_comparison",
            Preset::SoftmaxComparison => "softmax_comparison",
            Preset::TemperatureInner => "temperature_inner",
            Preset::TemperatureEuclidean => "temperature_euclidean",
        }
    }

    pub fn gate(self) -> GateKind {
        match self {
            Preset::SigmoidComparison => GateKind::ModifiedSigmoid,
            Preset::SoftmaxComparison => GateKind::SoftmaxBaseline,
            Preset::TemperatureInner => GateKind::TempSigmoidInner,
            Preset::TemperatureEuclidean => GateKind::TempSigmoidEuclidean,
        }
    }

    pub fn truth(self) -> MixingMeasure {
        let (atoms, tau) = match self {
            // Class logits (a, b): expert 1 (0, -1) / (-1, 1); expert 2 (0, 0) / (0, 2).
            Preset::SigmoidComparison => (
                vec![
                    atom(0.2, -1.0, -0.5, 1.0, -2.0),
                    atom(-0.3, 1.0, 0.5, 0.0, -2.0),
                ],
                None,
            ),
            // Gate (intercept, slope) = (0.2, -1) and (-0.3, 1); the intercept is
            // carried by γ and β stays at zero. Class logits: expert 1
            // (-1, 0) / (1, -1); expert 2 (0, 0) / (2, 0).
            Preset::SoftmaxComparison => (
                vec![
                    atom(0.2, -1.0, 0.0, -2.0, 1.0),
                    atom(-0.3, 1.0, 0.0, -2.0, 0.0),
                ],
                None,
            ),
            // Class logits: expert 1 (0, 0) / (1.86, 0.963); expert 2 (0, 0) / (1.87, 0.964).
            Preset::TemperatureInner => (
                vec![
                    atom(0.0, 1.0, 0.0, -1.86, -0.963),
                    atom(0.0, 1.001, 0.0, -1.87, -0.964),
                ],
                Some(0.1),
            ),
            Preset::TemperatureEuclidean => (
                vec![
                    atom(1.0, -5.0, -0.5, -1.0, 2.0),
                    atom(-1.0, 5.0, 0.5, 1.0, -1.0),
                ],
                Some(2.0),
            ),
        };
        MixingMeasure::with_default_bounds(atoms, self.gate(), tau)
            .expect("preset tables lie inside the default box")
    }
}

/// One-dimensional, two-class atom with canonical class-1 logit `(a1, b1)`.
fn atom(gamma: f64, alpha: f64, beta: f64, a1: f64, b1: f64) -> ExpertAtom {
    ExpertAtom {
        gamma,
        alpha: vec![alpha],
        beta,
        a: vec![vec![a1], vec![0.0]],
        b: vec![b1, 0.0],
    }
}
