//! Built-in property suite: density normalization, the temperature PDE
//! residual, loss and divergence axioms, and EM monotonicity on small
//! random instances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::estimation::{em_fit, EmConfig, InitConfig};
use crate::metrics::{divergence_samples, hellinger, total_variation, DivergenceKind, LossKind};
use crate::model::{pde_residual, ExpertAtom, GateKind, MixingMeasure};
use crate::sampling::{sample_dataset, stream_rng, SampleConfig};

/// Random atom with moderate parameters: `γ, β ∈ [−1, 1]`, `α ∈ [−2, 2]^d`,
/// class logits in `[−2, 2]` with the last class as zero reference.
pub fn random_atom<R: Rng>(rng: &mut R, d: usize, classes: usize) -> ExpertAtom {
    let mut a: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let mut b: Vec<f64> = (0..classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
    a[classes - 1].iter_mut().for_each(|v| *v = 0.0);
    b[classes - 1] = 0.0;
    ExpertAtom {
        gamma: rng.gen_range(-1.0..1.0),
        alpha: (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        beta: rng.gen_range(-1.0..1.0),
        a,
        b,
    }
}

/// Random measure with `k` atoms; temperature gates get `τ ∈ [0.5, 2]`.
pub fn random_measure<R: Rng>(
    rng: &mut R,
    gate: GateKind,
    k: usize,
    d: usize,
    classes: usize,
) -> MixingMeasure {
    let atoms = (0..k).map(|_| random_atom(rng, d, classes)).collect();
    let tau = gate.has_temperature().then(|| rng.gen_range(0.5..2.0));
    MixingMeasure::with_default_bounds(atoms, gate, tau)
        .expect("random parameters lie in the default box")
}

pub fn random_point<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen::<f64>()).collect()
}

/// Copy of `m` with every coordinate of every atom (and `τ`) moved by at most
/// `delta`, keeping the last class as reference.
pub fn perturb<R: Rng>(rng: &mut R, m: &MixingMeasure, delta: f64) -> MixingMeasure {
    let mut jitter = |v: &mut f64| *v += rng.gen_range(-delta..delta);
    let mut atoms = m.atoms().to_vec();
    let classes = m.classes();
    for atom in &mut atoms {
        jitter(&mut atom.gamma);
        atom.alpha.iter_mut().for_each(&mut jitter);
        jitter(&mut atom.beta);
        for l in 0..classes - 1 {
            atom.a[l].iter_mut().for_each(&mut jitter);
            jitter(&mut atom.b[l]);
        }
    }
    let tau = m.tau().map(|t| t + rng.gen_range(-delta..delta));
    m.with_parameters(atoms, tau)
        .expect("perturbation stays in the box")
}

/// Splits atom `i` into two identical copies carrying half its mass each.
pub fn split_atom(m: &MixingMeasure, i: usize) -> MixingMeasure {
    let mut atoms = m.atoms().to_vec();
    atoms[i].gamma -= std::f64::consts::LN_2;
    atoms.insert(i + 1, atoms[i].clone());
    m.with_parameters(atoms, m.tau())
        .expect("split keeps the box")
}

/// Observed convergence orders `log2(R(h)/R(h/2))` for `h = 1e-3, 5e-4`.
pub fn pde_orders(
    m: &MixingMeasure,
    atom: usize,
    x: &[f64],
    class_s: usize,
) -> crate::Result<(f64, f64, [f64; 3])> {
    let r = [
        pde_residual(m, atom, x, class_s, 1e-3)?,
        pde_residual(m, atom, x, class_s, 5e-4)?,
        pde_residual(m, atom, x, class_s, 2.5e-4)?,
    ];
    Ok(((r[0] / r[1]).abs().log2(), (r[1] / r[2]).abs().log2(), r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, failures: Vec<String>, ok_detail: String) -> Check {
    Check {
        name,
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            ok_detail
        } else {
            format!("{} failure(s), first: {}", failures.len(), failures[0])
        },
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    stream_rng(seed, stream)
}

fn normalization(seed: u64) -> Check {
    let mut rng = rng_for(seed, 10);
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for gate in GateKind::ALL {
        for _ in 0..100 {
            let k = rng.gen_range(1..=4);
            let d = rng.gen_range(1..=2);
            let classes = rng.gen_range(2..=3);
            let m = random_measure(&mut rng, gate, k, d, classes);
            let x = random_point(&mut rng, d);
            let p = m.conditional_density(&x).expect("shapes match");
            let w = m.gate_weights(&x).expect("shapes match");
            let err = (p.iter().sum::<f64>() - 1.0)
                .abs()
                .max((w.iter().sum::<f64>() - 1.0).abs());
            worst = worst.max(err);
            if err > 1e-12 || p.iter().chain(&w).any(|v| !(*v >= 0.0)) {
                failures.push(format!("{gate}: sum error {err:e}"));
            }
        }
    }
    check(
        "density_normalization",
        failures,
        format!("400 instances, max error {worst:.1e}"),
    )
}

fn pde_inner(seed: u64) -> Check {
    let mut rng = rng_for(seed, 11);
    let mut failures = Vec::new();
    let mut min_order = f64::INFINITY;
    for _ in 0..50 {
        let d = rng.gen_range(1..=2);
        let m = random_measure(&mut rng, GateKind::TempSigmoidInner, 1, d, 2);
        let x = random_point(&mut rng, d);
        match pde_orders(&m, 0, &x, 0) {
            Ok((o1, o2, _)) => {
                min_order = min_order.min(o1.min(o2));
                if !(o1 >= 1.8 && o2 >= 1.8) {
                    failures.push(format!("orders {o1:.3}, {o2:.3}"));
                }
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    check(
        "pde_residual_inner_vanishes",
        failures,
        format!("50 instances, min observed order {min_order:.3}"),
    )
}

fn pde_euclidean(seed: u64) -> Check {
    let mut rng = rng_for(seed, 12);
    let mut failures = Vec::new();
    let mut min_mag = f64::INFINITY;
    let mut done = 0;
    while done < 50 {
        let d = rng.gen_range(1..=2);
        let m = random_measure(&mut rng, GateKind::TempSigmoidEuclidean, 1, d, 2);
        let x = random_point(&mut rng, d);
        if crate::model::dist(&m.atoms()[0].alpha, &x) <= 0.1 {
            continue;
        }
        done += 1;
        match (
            pde_residual(&m, 0, &x, 0, 1e-3),
            pde_residual(&m, 0, &x, 0, 5e-4),
        ) {
            (Ok(r1), Ok(r2)) => {
                min_mag = min_mag.min(r2.abs());
                if (r1 - r2).abs() > 1e-3 * r2.abs() || r2.abs() <= 1e-4 {
                    failures.push(format!("residuals {r1:e}, {r2:e}"));
                }
            }
            (Err(e), _) | (_, Err(e)) => failures.push(e.to_string()),
        }
    }
    check(
        "pde_residual_euclidean_persists",
        failures,
        format!("50 instances, min |residual| {min_mag:.2e}"),
    )
}

fn loss_axioms(seed: u64) -> Check {
    let mut rng = rng_for(seed, 13);
    let mut failures = Vec::new();
    let losses = [
        LossKind::D1,
        LossKind::D2r { r: 2 },
        LossKind::D3,
        LossKind::SoftmaxBaseline,
    ];
    for gate in GateKind::ALL {
        for loss in losses.iter().filter(|l| l.compatible_with(gate)) {
            for _ in 0..25 {
                let d = rng.gen_range(1..=2);
                let truth = random_measure(&mut rng, gate, 2, d, 2);
                let at_truth = loss.evaluate(&truth, &truth).unwrap_or(f64::NAN);
                if at_truth.abs() > 1e-14 {
                    failures.push(format!("{} at the truth is {at_truth:e}", loss.name()));
                }
                let split = split_atom(&truth, 0);
                let at_split = loss.evaluate(&split, &truth).unwrap_or(f64::NAN);
                if at_split.abs() > 1e-12 {
                    failures.push(format!("{} of an exact split is {at_split:e}", loss.name()));
                }
                let moved = perturb(&mut rng, &truth, 0.1);
                let v = loss.evaluate(&moved, &truth).unwrap_or(f64::NAN);
                if !(v > 0.0 && v.is_finite()) {
                    failures.push(format!("{} of a perturbation is {v}", loss.name()));
                }
            }
        }
    }
    check(
        "loss_axioms",
        failures,
        "zero at the truth and at exact splits, positive off it".into(),
    )
}

fn split_preserves_density(seed: u64) -> Check {
    let mut rng = rng_for(seed, 14);
    let mut failures = Vec::new();
    for gate in GateKind::ALL {
        for _ in 0..25 {
            let m = random_measure(&mut rng, gate, 2, 2, 3);
            let s = split_atom(&m, 1);
            let x = random_point(&mut rng, 2);
            let p = m.conditional_density(&x).expect("shapes match");
            let q = s.conditional_density(&x).expect("shapes match");
            let tv = total_variation(&p, &q);
            if tv > 1e-14 {
                failures.push(format!("{gate}: TV {tv:e}"));
            }
        }
    }
    check("split_preserves_density", failures, "100 instances".into())
}

fn divergence_bounds(seed: u64) -> Check {
    let mut rng = rng_for(seed, 15);
    let mut failures = Vec::new();
    for gate in GateKind::ALL {
        for _ in 0..10 {
            let g1 = random_measure(&mut rng, gate, 2, 1, 3);
            let g2 = perturb(&mut rng, &g1, 0.5);
            let s = rng.gen();
            let tv = divergence_samples(&g1, &g2, 200, s, DivergenceKind::TotalVariation)
                .expect("shapes match");
            let h = divergence_samples(&g1, &g2, 200, s, DivergenceKind::Hellinger)
                .expect("shapes match");
            for (t, h) in tv.iter().zip(&h) {
                if !(h * h <= t + 1e-15 && *t <= std::f64::consts::SQRT_2 * h + 1e-15) {
                    failures.push(format!("{gate}: TV {t:e}, H {h:e}"));
                }
            }
            let p = g1.conditional_density(&[0.5]).expect("shapes match");
            if total_variation(&p, &p) != 0.0 || hellinger(&p, &p) != 0.0 {
                failures.push("nonzero self-divergence".into());
            }
        }
    }
    check(
        "divergence_bounds",
        failures,
        "H² ≤ TV ≤ √2·H pointwise".into(),
    )
}

fn em_monotone(seed: u64) -> Check {
    let mut failures = Vec::new();
    let em = EmConfig {
        max_iter: 50,
        ..EmConfig::default()
    };
    for (i, gate) in GateKind::ALL.into_iter().enumerate() {
        let mut rng = rng_for(seed, 16 + i as u64);
        let mut truth = random_measure(&mut rng, gate, 2, 1, 2);
        if gate == GateKind::SoftmaxBaseline {
            let atoms = truth
                .atoms()
                .iter()
                .map(|a| ExpertAtom {
                    beta: 0.0,
                    ..a.clone()
                })
                .collect();
            truth = truth.with_parameters(atoms, None).expect("same box");
        }
        let n = 400;
        let data = match sample_dataset(&SampleConfig {
            n,
            seed,
            truth: truth.clone(),
        }) {
            Ok(d) => d,
            Err(e) => {
                failures.push(format!("{gate}: {e}"));
                continue;
            }
        };
        let init = InitConfig {
            cell_seed: seed,
            ..InitConfig::default()
        };
        match em_fit(&data, 3, &truth, &init, &em) {
            Ok(fit) => {
                let slack = 1e-9 * n as f64;
                if let Some(w) = fit.loglik_trace.windows(2).find(|w| w[1] < w[0] - slack) {
                    failures.push(format!(
                        "{gate}: log-likelihood fell from {} to {}",
                        w[0], w[1]
                    ));
                }
            }
            Err(e) => failures.push(format!("{gate}: {e}")),
        }
    }
    check("em_monotone", failures, "4 gates, n = 400, k = 3".into())
}

/// Runs every property check with deterministic draws derived from `seed`.
pub fn run_property_suite(seed: u64) -> Vec<Check> {
    vec![
        normalization(seed),
        pde_inner(seed),
        pde_euclidean(seed),
        loss_axioms(seed),
        split_preserves_density(seed),
        divergence_bounds(seed),
        em_monotone(seed),
    ]
}
