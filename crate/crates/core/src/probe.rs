//! Central-difference probes of the loss around an embedding point.
//!
//! For a unit direction `u` and step `delta`, a probe reports
//! `|f(x + delta*u) - f(x - delta*u)| / (2*delta)`, the magnitude of the
//! directional derivative of `f` along `u` up to `O(delta^2)`. Here `f` is
//! the masked per-sequence mean loss of a model, seen as a function of its
//! clean token embeddings.

use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{build_batch, Batch, DataError, TokenizedExample, IGNORE};
use crate::model::{self, ModelError, ModelParams};
use crate::rng::{self, Domain};
use crate::tensor::{Tape, Tensor, TensorError};

/// Largest tolerated deviation of `||u[b]||` from 1.
pub const UNIT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("invalid probe config: {0}")]
    Config(String),
    #[error("direction for sequence {sequence} has norm {norm}, expected 1")]
    NotUnit { sequence: usize, norm: f64 },
    #[error("direction shape {direction:?} does not match embeddings {embeddings:?}")]
    Shape { direction: Vec<usize>, embeddings: Vec<usize> },
    #[error("non-finite loss {loss} for sequence {sequence}")]
    NonFinite { sequence: usize, loss: f64 },
    #[error("sequence {0} has no supervised positions")]
    Unsupervised(usize),
    #[error("probe dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, ProbeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionKind {
    /// `±1` on every element of the sequence's true length, scaled by
    /// `1/sqrt(L*d)`.
    Bernoulli,
    /// A standard normal draw normalized to unit length.
    #[serde(alias = "gaussian-unit")]
    GaussianUnit,
}

impl FromStr for DirectionKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bernoulli" => Ok(Self::Bernoulli),
            "gaussian_unit" | "gaussian-unit" | "gaussian" => Ok(Self::GaussianUnit),
            other => Err(format!("unknown direction kind `{other}` (expected bernoulli or gaussian_unit)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub n_directions: usize,
    pub delta: f64,
    pub direction_kind: DirectionKind,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_directions: 8,
            delta: 1e-3,
            direction_kind: DirectionKind::Bernoulli,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_directions < 1 {
            return Err(ProbeError::Config("n_directions must be at least 1".into()));
        }
        check_delta(self.delta)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(ProbeError::Config(format!("delta must be positive, got {delta}")))
    }
}

/// `|f(x + delta*u) - f(x - delta*u)| / (2*delta)` per output of `f`.
///
/// `f` maps a `[B, ...]` point to one value per sequence; it is called once
/// on each side.
pub fn central_difference<F>(mut f: F, x: &Tensor, u: &Tensor, delta: f64) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<Vec<f64>>,
{
    check_delta(delta)?;
    if x.shape() != u.shape() {
        return Err(ProbeError::Shape {
            direction: u.shape().to_vec(),
            embeddings: x.shape().to_vec(),
        });
    }
    let shifted = |sign: f64| {
        let data = x.data().iter().zip(u.data()).map(|(a, b)| a + sign * delta * b).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape as x")
    };
    let plus = f(&shifted(1.0))?;
    let minus = f(&shifted(-1.0))?;
    for (sequence, &loss) in plus.iter().chain(&minus).enumerate() {
        if !loss.is_finite() {
            return Err(ProbeError::NonFinite {
                sequence: sequence % plus.len().max(1),
                loss,
            });
        }
    }
    Ok(plus.iter().zip(&minus).map(|(p, m)| (p - m).abs() / (2.0 * delta)).collect())
}

/// Masked per-sequence mean loss of `batch` with `x` in place of its token
/// embeddings.
pub fn sequence_losses(params: &ModelParams, batch: &Batch, x: &Tensor) -> Result<Vec<f64>> {
    let logits = model::logits_from_embeddings(params, x, &batch.lengths)?;
    model::sequence_nll(&logits, &batch.labels, &batch.loss_mask())
        .into_iter()
        .enumerate()
        .map(|(b, (sum, count))| {
            if count == 0 {
                Err(ProbeError::Unsupervised(b))
            } else {
                Ok(sum / count as f64)
            }
        })
        .collect()
}

fn check_unit(u: &Tensor) -> Result<()> {
    let per_seq = u.numel() / u.shape()[0].max(1);
    for (sequence, row) in u.data().chunks(per_seq.max(1)).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(ProbeError::NotUnit { sequence, norm });
        }
    }
    Ok(())
}

/// Probe of each sequence of `batch` along its slice of `u` (`[B, L, d]`,
/// unit norm per sequence). Noise-free and read-only.
pub fn directional_probe(params: &ModelParams, batch: &Batch, u: &Tensor, delta: f64) -> Result<Vec<f64>> {
    let x = model::embeddings(params, &batch.tokens, batch.batch_size, batch.seq_len)?;
    if x.shape() != u.shape() {
        return Err(ProbeError::Shape {
            direction: u.shape().to_vec(),
            embeddings: x.shape().to_vec(),
        });
    }
    check_unit(u)?;
    central_difference(|p| sequence_losses(params, batch, p), &x, u, delta)
}

/// `|<grad_x loss_b, u[b]>|` per sequence by reverse mode, for comparison
/// with [`directional_probe`].
pub fn autodiff_directional(params: &ModelParams, batch: &Batch, u: &Tensor) -> Result<Vec<f64>> {
    let x = model::embeddings(params, &batch.tokens, batch.batch_size, batch.seq_len)?;
    let per_seq = batch.seq_len;
    let width = x.numel() / batch.batch_size;
    (0..batch.batch_size)
        .map(|b| {
            // loss of sequence b alone: mask every other row out
            let mask: Vec<bool> = batch
                .labels
                .iter()
                .enumerate()
                .map(|(i, &l)| l != IGNORE && i / per_seq == b)
                .collect();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let xv = tape.leaf(x.clone().with_requires_grad(true));
            let logits = model::forward_from_embeddings(&mut tape, params, &bound, xv, &batch.lengths)?;
            let loss = tape.cross_entropy_masked(logits, &batch.labels, &mask)?;
            tape.backward(loss)?;
            let g = tape.grad(xv).expect("leaf requires grad");
            let range = b * width..(b + 1) * width;
            Ok(g[range.clone()].iter().zip(&u.data()[range]).map(|(a, c)| a * c).sum::<f64>().abs())
        })
        .collect()
}

/// A unit direction supported on the first `len` positions of one
/// `[L, d]` sequence slot.
pub fn sample_direction(kind: DirectionKind, rng: &mut impl Rng, slot_len: usize, len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; slot_len * dim];
    let active = &mut out[..len * dim];
    match kind {
        DirectionKind::Bernoulli => {
            let s = 1.0 / ((len * dim) as f64).sqrt();
            for v in active.iter_mut() {
                *v = if rng.random::<bool>() { s } else { -s };
            }
        }
        DirectionKind::GaussianUnit => {
            for v in active.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let norm = active.iter().map(|v| v * v).sum::<f64>().sqrt();
            active.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ProbeMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// `estimates[i][j]`: example `i`, direction `j`.
    pub estimates: Vec<Vec<f64>>,
    pub median: f64,
    pub mean: f64,
    pub max: f64,
    pub config: ProbeConfig,
    #[serde(default)]
    pub metadata: ProbeMetadata,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Probes every example along `n_directions` seeded directions. Direction
/// `j` of example `i` comes from stream `(seed, i, j)`, so reports do not
/// depend on dataset order beyond the index.
pub fn probe_model(params: &ModelParams, dataset: &[TokenizedExample], config: &ProbeConfig) -> Result<ProbeReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(ProbeError::EmptyDataset);
    }
    let dim = params.config().d_model;
    let mut estimates = Vec::with_capacity(dataset.len());
    for (i, example) in dataset.iter().enumerate() {
        let rows: Vec<&TokenizedExample> = vec![example; config.n_directions];
        let batch = build_batch(&rows)?;
        let len = example.true_length();
        let data: Vec<f64> = (0..config.n_directions)
            .flat_map(|j| {
                let mut rng = rng::stream(config.seed, Domain::Probe, i as u64, j as u64);
                sample_direction(config.direction_kind, &mut rng, len, len, dim)
            })
            .collect();
        let u = Tensor::new(vec![config.n_directions, len, dim], data)?;
        estimates.push(directional_probe(params, &batch, &u, config.delta)?);
    }
    let flat: Vec<f64> = estimates.iter().flatten().copied().collect();
    Ok(ProbeReport {
        median: median(&flat),
        mean: flat.iter().sum::<f64>() / flat.len() as f64,
        max: flat.iter().copied().fold(0.0, f64::max),
        estimates,
        config: *config,
        metadata: ProbeMetadata::default(),
    })
}

impl ProbeReport {
    pub fn summary_table(&self) -> String {
        let n: usize = self.estimates.iter().map(Vec::len).sum();
        format!(
            "{:<10} {:>14}\n{:<10} {:>14}\n{:<10} {:>14.6e}\n{:<10} {:>14.6e}\n{:<10} {:>14.6e}\n{:<10} {:>14.1e}\n",
            "examples",
            self.estimates.len(),
            "estimates",
            n,
            "median",
            self.median,
            "mean",
            self.mean,
            "max",
            self.max,
            "delta",
            self.config.delta,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{tokenize_and_mask, VOCAB_SIZE};
    use crate::model::ModelConfig;

    fn params(seed: u64) -> ModelParams {
        ModelParams::init(&ModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            context_len: 16,
            seed,
        })
        .unwrap()
    }

    fn dataset() -> Vec<TokenizedExample> {
        vec![
            tokenize_and_mask("ab", "cde", 16).unwrap(),
            tokenize_and_mask("hello", "x", 16).unwrap(),
        ]
    }

    #[test]
    fn linear_map_gives_inner_product_exactly() {
        let x = Tensor::new(vec![1, 2, 2], vec![0.25, -1.0, 2.0, 0.5]).unwrap();
        let u = Tensor::new(vec![1, 2, 2], vec![0.5, -0.5, 0.5, 0.5]).unwrap();
        let w = [2.0, 4.0, -1.0, 8.0];
        let f = |p: &Tensor| Ok(vec![p.data().iter().zip(&w).map(|(a, b)| a * b).sum()]);
        let expected = (0.5f64 * 2.0 - 0.5 * 4.0 - 0.5 + 4.0).abs();
        for delta in [1.0, 0.25, 1.0 / 1024.0] {
            assert_eq!(central_difference(f, &x, &u, delta).unwrap(), vec![expected]);
        }
    }

    #[test]
    fn zero_head_is_flat() {
        let mut p = params(1);
        for (name, t) in p.iter_mut() {
            if name == "tok_emb" || name == "ln_f.gain" {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let report = probe_model(&p, &dataset(), &ProbeConfig::default()).unwrap();
        assert!(report.estimates.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn sign_symmetric_and_read_only() {
        let p = params(2);
        let ex = dataset();
        let batch = build_batch(&[&ex[0]]).unwrap();
        let mut rng = rng::stream(0, Domain::Probe, 0, 0);
        let len = batch.seq_len;
        let data = sample_direction(DirectionKind::GaussianUnit, &mut rng, len, len, 8);
        let u = Tensor::new(vec![1, len, 8], data.clone()).unwrap();
        let neg = Tensor::new(vec![1, len, 8], data.iter().map(|v| -v).collect()).unwrap();
        let before = p.clone();
        assert_eq!(
            directional_probe(&p, &batch, &u, 1e-3).unwrap(),
            directional_probe(&p, &batch, &neg, 1e-3).unwrap()
        );
        assert_eq!(p, before);
    }

    #[test]
    fn rejects_non_unit_and_bad_config() {
        let p = params(3);
        let ex = dataset();
        let batch = build_batch(&[&ex[0]]).unwrap();
        let u = Tensor::filled(&[1, batch.seq_len, 8], 1.0);
        assert!(matches!(
            directional_probe(&p, &batch, &u, 1e-3),
            Err(ProbeError::NotUnit { .. })
        ));
        let bad = ProbeConfig {
            delta: 0.0,
            ..ProbeConfig::default()
        };
        assert!(probe_model(&p, &ex, &bad).is_err());
        assert!(matches!(
            probe_model(&p, &[], &ProbeConfig::default()),
            Err(ProbeError::EmptyDataset)
        ));
    }

    #[test]
    fn bernoulli_directions_are_unit_on_the_true_length() {
        let mut rng = rng::stream(9, Domain::Probe, 0, 0);
        let u = sample_direction(DirectionKind::Bernoulli, &mut rng, 6, 4, 3);
        let norm: f64 = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(u[12..].iter().all(|&v| v == 0.0));
        let s = 1.0 / 12f64.sqrt();
        assert!(u[..12].iter().all(|&v| v == s || v == -s));
    }

    #[test]
    fn deterministic_reports() {
        let p = params(4);
        let cfg = ProbeConfig {
            n_directions: 1,
            seed: 11,
            ..ProbeConfig::default()
        };
        let a = probe_model(&p, &dataset(), &cfg).unwrap();
        assert_eq!(a, probe_model(&p, &dataset(), &cfg).unwrap());
        assert!(a.median >= 0.0 && a.max >= a.median);
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<ProbeReport>(&json).unwrap(), a);
    }

    #[test]
    fn matches_autodiff() {
        let p = params(5);
        let ex = dataset();
        let batch = build_batch(&[&ex[0], &ex[1]]).unwrap();
        let (l, d) = (batch.seq_len, 8);
        let data: Vec<f64> = (0..2)
            .flat_map(|b| {
                let mut rng = rng::stream(1, Domain::Probe, b, 0);
                sample_direction(DirectionKind::GaussianUnit, &mut rng, l, batch.lengths[b as usize], d)
            })
            .collect();
        let u = Tensor::new(vec![2, l, d], data).unwrap();
        let exact = autodiff_directional(&p, &batch, &u).unwrap();
        let probe = directional_probe(&p, &batch, &u, 1e-4).unwrap();
        for (a, b) in exact.iter().zip(&probe) {
            assert!((a - b).abs() <= 1e-3 * a.abs(), "{a} vs {b}");
        }
    }
}
