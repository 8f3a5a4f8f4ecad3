//! Synthetic data generation from a ground-truth mixing measure.
//!
//! All randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`), seeded with
//! `seed_from_u64`. Covariates and labels are drawn from distinct ChaCha
//! streams of the same seed (stream 0 and stream 1), and both are consumed
//! row by row, so the first `n` rows of a larger sample equal the sample of
//! size `n`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Dataset, DensityScratch, MixingMeasure};

const COVARIATE_STREAM: u64 = 0;
const LABEL_STREAM: u64 = 1;

/// Generator for one named sub-stream of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into a seed: `mix64(... mix64(mix64(w0) ^ w1) ...)`.
pub fn derive_seed(words: &[u64]) -> u64 {
    words.iter().fold(0u64, |acc, &w| mix64(acc ^ w))
}

#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub n: usize,
    pub seed: u64,
    pub truth: MixingMeasure,
}

/// `n × d` i.i.d. Uniform[0, 1) covariates, row-major.
pub fn sample_covariates(n: usize, d: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument(format!(
            "need n >= 1 and d >= 1, got n={n}, d={d}"
        )));
    }
    let mut rng = stream_rng(seed, COVARIATE_STREAM);
    Ok((0..n * d).map(|_| rng.gen::<f64>()).collect())
}

/// One categorical label per covariate row, drawn from the truth's
/// conditional density by inverse-CDF on a single uniform.
pub fn sample_labels(truth: &MixingMeasure, x: &[f64], seed: u64) -> Result<Vec<usize>> {
    let d = truth.dim();
    if !x.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch {
            what: "covariate buffer",
            expected: d,
            got: x.len() % d,
        });
    }
    let classes = truth.classes();
    let mut rng = stream_rng(seed, LABEL_STREAM);
    let mut scratch = DensityScratch::new(truth.len(), classes);
    let mut log_p = vec![0.0; classes];
    let labels = x
        .chunks_exact(d)
        .map(|row| {
            truth.log_density_into(row, &mut scratch, &mut log_p);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (s, lp) in log_p.iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    return s;
                }
            }
            classes - 1
        })
        .collect();
    Ok(labels)
}

/// Draws a full dataset; a pure function of the config.
pub fn sample_dataset(cfg: &SampleConfig) -> Result<Dataset> {
    cfg.truth.check_ground_truth()?;
    let d = cfg.truth.dim();
    let x = sample_covariates(cfg.n, d, cfg.seed)?;
    let y = sample_labels(&cfg.truth, &x, cfg.seed)?;
    Dataset::new(x, y, d, cfg.truth.classes())
}

/// Writes `x_0,…,x_{d−1},y` with one-based labels.
pub fn write_dataset_csv(data: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut header: Vec<String> = (0..data.dim()).map(|c| format!("x_{c}")).collect();
    header.push("y".into());
    let mut out = header.join(",");
    out.push('\n');
    for j in 0..data.n() {
        for v in data.row(j) {
            out.push_str(&format!("{v:.17e},"));
        }
        out.push_str(&(data.label(j) + 1).to_string());
        out.push('\n');
    }
    w.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dataset written by [`write_dataset_csv`].
pub fn read_dataset_csv(path: &Path, classes: usize) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.into(),
        source: e,
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: path.into(),
            source: e,
        })?
        .clone();
    let d = headers.len().saturating_sub(1);
    if d == 0 || headers.get(d) != Some("y") {
        return Err(Error::Record {
            path: path.into(),
            msg: "expected header x_0,...,x_{d-1},y".into(),
        });
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv {
            path: path.into(),
            source: e,
        })?;
        let bad = |msg: String| Error::Record {
            path: path.into(),
            msg: format!("row {}: {msg}", line + 1),
        };
        for c in 0..d {
            let v: f64 = rec[c].parse().map_err(|e| bad(format!("{e}")))?;
            x.push(v);
        }
        let label: usize = rec[d].parse().map_err(|e| bad(format!("{e}")))?;
        if label == 0 {
            return Err(bad("labels are one-based".into()));
        }
        y.push(label - 1);
    }
    Dataset::new(x, y, d, classes)
}
