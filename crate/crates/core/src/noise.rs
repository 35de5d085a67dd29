//! Embedding-noise samplers and the per-sequence scaling rule.
//!
//! Raw draws `eps` have shape `[B, L, d]`. The term actually added to
//! sequence `b` is `sign * alpha / sqrt(len_b * d) * eps[b]` on its first
//! `len_b` positions and exactly zero on padding, where `len_b` is the
//! sequence's true (unpadded) length. Additive training (uniform, Gaussian,
//! Bernoulli) uses `sign = +1`; the symmetric scheme builds both signs from a
//! single draw and stacks them along the batch axis.

use std::cell::Cell;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Domain};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    Uniform,
    Gaussian,
    Bernoulli,
    SymmetricBernoulli,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 5] = [
        NoiseKind::None,
        NoiseKind::Uniform,
        NoiseKind::Gaussian,
        NoiseKind::Bernoulli,
        NoiseKind::SymmetricBernoulli,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::None => "none",
            NoiseKind::Uniform => "uniform",
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::Bernoulli => "bernoulli",
            NoiseKind::SymmetricBernoulli => "symmetric_bernoulli",
        }
    }

    /// Whether draws are restricted to `{-1, +1}`.
    pub fn is_bernoulli_family(self) -> bool {
        matches!(self, NoiseKind::Bernoulli | NoiseKind::SymmetricBernoulli)
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = NoiseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(NoiseKind::None),
            "uniform" | "neft" => Ok(NoiseKind::Uniform),
            "gaussian" => Ok(NoiseKind::Gaussian),
            "bernoulli" => Ok(NoiseKind::Bernoulli),
            "symmetric_bernoulli" | "symnoise" => Ok(NoiseKind::SymmetricBernoulli),
            other => Err(NoiseError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub alpha: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, alpha: f64, seed: u64) -> Result<Self, NoiseError> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(NoiseError::BadAlpha(alpha));
        }
        Ok(Self { kind, alpha, seed })
    }

    pub fn none() -> Self {
        Self {
            kind: NoiseKind::None,
            alpha: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NoiseError {
    #[error("noise kind `none` has nothing to sample; skip injection instead")]
    KindNone,
    #[error("unknown noise kind `{0}`")]
    UnknownKind(String),
    #[error("noise scale alpha must be finite and non-negative, got {0}")]
    BadAlpha(f64),
    #[error("noise shape {noise:?} does not match embeddings {embeddings:?}")]
    ShapeMismatch {
        noise: Vec<usize>,
        embeddings: Vec<usize>,
    },
    #[error("sequence {index} has length {length}, outside 1..={max}")]
    BadLength { index: usize, length: usize, max: usize },
}

/// Raw, unscaled draws of shape `[B, L, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTensor {
    values: Tensor,
}

impl NoiseTensor {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2])
    }
}

thread_local! {
    static DRAWS: Cell<u64> = const { Cell::new(0) };
}

/// Number of noise tensors sampled on this thread so far. Lets tests assert
/// that evaluation and generation never touch the sampler.
pub fn draws_on_this_thread() -> u64 {
    DRAWS.with(Cell::get)
}

/// `alpha / sqrt(len * dim)`.
pub fn scale_factor(alpha: f64, len: usize, dim: usize) -> f64 {
    alpha / ((len * dim) as f64).sqrt()
}

/// Samples `[B, L, d]` raw noise with rows keyed `0..B`.
pub fn sample_noise(
    spec: &NoiseSpec,
    batch: usize,
    len: usize,
    dim: usize,
    step: u64,
) -> Result<NoiseTensor, NoiseError> {
    let keys: Vec<u64> = (0..batch as u64).collect();
    sample_noise_keyed(spec, &keys, len, dim, step)
}

/// Samples one row per key. Row `b` is drawn from the stream addressed by
/// `(spec.seed, step, row_keys[b])` and filled position-major, so the first
/// `t * dim` values of a row do not depend on the padded length `len` or on
/// the other rows in the batch.
pub fn sample_noise_keyed(
    spec: &NoiseSpec,
    row_keys: &[u64],
    len: usize,
    dim: usize,
    step: u64,
) -> Result<NoiseTensor, NoiseError> {
    if spec.kind == NoiseKind::None {
        return Err(NoiseError::KindNone);
    }
    DRAWS.with(|c| c.set(c.get() + 1));
    let per_row = len * dim;
    let mut data = Vec::with_capacity(row_keys.len() * per_row);
    for &key in row_keys {
        let mut rng = rng::stream(spec.seed, Domain::Noise, step, key);
        match spec.kind {
            NoiseKind::Uniform => {
                let u = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
                data.extend((0..per_row).map(|_| u.sample(&mut rng)));
            }
            NoiseKind::Gaussian => {
                data.extend((0..per_row).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng)));
            }
            NoiseKind::Bernoulli | NoiseKind::SymmetricBernoulli => {
                data.extend((0..per_row).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }));
            }
            NoiseKind::None => unreachable!(),
        }
    }
    let values = Tensor::new(vec![row_keys.len(), len, dim], data).expect("consistent shape");
    Ok(NoiseTensor { values })
}

fn check_lengths(lengths: &[usize], batch: usize, len: usize) -> Result<(), NoiseError> {
    if lengths.len() != batch {
        return Err(NoiseError::ShapeMismatch {
            noise: vec![batch],
            embeddings: vec![lengths.len()],
        });
    }
    match lengths.iter().enumerate().find(|(_, &l)| l == 0 || l > len) {
        Some((index, &length)) => Err(NoiseError::BadLength { index, length, max: len }),
        None => Ok(()),
    }
}

/// The exact term injected into embeddings: per sequence `b`,
/// `sign * scale_factor(alpha, lengths[b], d) * eps[b]` on positions
/// `< lengths[b]`, and `0.0` on padding.
pub fn scaled_noise(noise: &NoiseTensor, lengths: &[usize], alpha: f64, sign: f64) -> Result<Tensor, NoiseError> {
    let (batch, len, dim) = noise.dims();
    check_lengths(lengths, batch, len)?;
    let eps = noise.values.data();
    let mut out = vec![0.0; eps.len()];
    for (b, &true_len) in lengths.iter().enumerate() {
        let s = scale_factor(alpha, true_len, dim);
        let row = b * len * dim;
        for j in row..row + true_len * dim {
            out[j] = sign * (s * eps[j]);
        }
    }
    Ok(Tensor::new(vec![batch, len, dim], out).expect("same shape as noise"))
}

fn check_same_shape(x: &Tensor, noise: &NoiseTensor) -> Result<(), NoiseError> {
    if x.shape() != noise.values.shape() {
        return Err(NoiseError::ShapeMismatch {
            noise: noise.values.shape().to_vec(),
            embeddings: x.shape().to_vec(),
        });
    }
    Ok(())
}

fn add(x: &Tensor, term: &Tensor) -> Tensor {
    let data = x.data().iter().zip(term.data()).map(|(a, b)| a + b).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// `x + scaled_noise(noise, lengths, alpha, sign)`.
pub fn apply_noise(
    x: &Tensor,
    noise: &NoiseTensor,
    lengths: &[usize],
    alpha: f64,
    sign: f64,
) -> Result<Tensor, NoiseError> {
    check_same_shape(x, noise)?;
    Ok(add(x, &scaled_noise(noise, lengths, alpha, sign)?))
}

/// Stacks `[x + s; x - s]` along the batch axis for one shared draw, where
/// `s` is the scaled noise term. Output shape is `[2B, L, d]`.
pub fn make_symmetric_batch(
    x: &Tensor,
    noise: &NoiseTensor,
    lengths: &[usize],
    alpha: f64,
) -> Result<Tensor, NoiseError> {
    check_same_shape(x, noise)?;
    let term = scaled_noise(noise, lengths, alpha, 1.0)?;
    let plus = add(x, &term);
    let minus: Vec<f64> = x.data().iter().zip(term.data()).map(|(a, b)| a - b).collect();
    let mut data = plus.into_data();
    data.extend(minus);
    let mut shape = x.shape().to_vec();
    shape[0] *= 2;
    Ok(Tensor::new(shape, data).expect("doubled batch"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: NoiseKind, alpha: f64) -> NoiseSpec {
        NoiseSpec::new(kind, alpha, 11).unwrap()
    }

    fn ramp(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| 1.0 + (i as f64) * 0.37).collect()).unwrap()
    }

    #[test]
    fn scale_factor_examples() {
        assert_eq!(scale_factor(5.0, 4, 4), 1.25);
        assert_eq!(scale_factor(10.0, 100, 64), 0.125);
        assert_eq!(scale_factor(0.0, 7, 3), 0.0);
    }

    #[test]
    fn none_kind_cannot_be_sampled() {
        assert_eq!(
            sample_noise(&NoiseSpec::none(), 1, 2, 2, 0).unwrap_err(),
            NoiseError::KindNone
        );
    }

    #[test]
    fn negative_alpha_is_rejected() {
        assert!(NoiseSpec::new(NoiseKind::Uniform, -1.0, 0).is_err());
        assert!(NoiseSpec::new(NoiseKind::Uniform, f64::NAN, 0).is_err());
    }

    #[test]
    fn bernoulli_support_and_determinism() {
        for kind in [NoiseKind::Bernoulli, NoiseKind::SymmetricBernoulli] {
            let a = sample_noise(&spec(kind, 5.0), 3, 7, 5, 42).unwrap();
            assert!(a.values().data().iter().all(|&v| v == 1.0 || v == -1.0));
            let b = sample_noise(&spec(kind, 5.0), 3, 7, 5, 42).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn uniform_draws_stay_in_unit_interval() {
        let n = sample_noise(&spec(NoiseKind::Uniform, 5.0), 4, 16, 8, 3).unwrap();
        assert!(n.values().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn bernoulli_mean_is_near_zero_over_a_million_draws() {
        let n = sample_noise(&spec(NoiseKind::Bernoulli, 1.0), 1, 1000, 1000, 0).unwrap();
        let mean = n.values().data().iter().sum::<f64>() / 1e6;
        // Binomial standard error of the mean is 1e-3; 0.004 is about 4 sigma.
        assert!(mean.abs() < 0.004, "mean {mean}");
    }

    #[test]
    fn rows_do_not_depend_on_padding_or_neighbours() {
        let s = spec(NoiseKind::Gaussian, 1.0);
        let short = sample_noise_keyed(&s, &[7], 3, 4, 9).unwrap();
        let long = sample_noise_keyed(&s, &[2, 7], 6, 4, 9).unwrap();
        assert_eq!(&long.values().data()[24..24 + 12], short.values().data());
    }

    #[test]
    fn plus_then_minus_average_back_for_small_noise() {
        // Holds bit-exactly while x +/- s stay in the binade of x.
        let x = ramp(&[2, 3, 4]);
        let n = sample_noise(&spec(NoiseKind::Uniform, 1e-3), 2, 3, 4, 1).unwrap();
        let plus = apply_noise(&x, &n, &[3, 3], 1e-3, 1.0).unwrap();
        let minus = apply_noise(&x, &n, &[3, 3], 1e-3, -1.0).unwrap();
        for ((p, m), v) in plus.data().iter().zip(minus.data()).zip(x.data()) {
            assert_eq!((p + m) / 2.0, *v);
        }
    }

    #[test]
    fn bernoulli_block_norm_is_alpha() {
        let n = sample_noise(&spec(NoiseKind::Bernoulli, 5.0), 1, 9, 6, 0).unwrap();
        let term = scaled_noise(&n, &[9], 5.0, 1.0).unwrap();
        let norm = term.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 5.0).abs() < 1e-12);
    }

    #[test]
    fn per_sequence_scale_uses_true_lengths() {
        let n = sample_noise(&spec(NoiseKind::Bernoulli, 5.0), 2, 16, 4, 0).unwrap();
        let term = scaled_noise(&n, &[4, 16], 5.0, 1.0).unwrap();
        let a = term.data()[0].abs();
        let b = term.data()[16 * 4].abs();
        assert_eq!(a, 2.0 * b);
        // padding of the short row carries no noise
        assert!(term.data()[4 * 4..16 * 4].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_batch_layout() {
        let x = ramp(&[2, 3, 2]);
        let n = sample_noise(&spec(NoiseKind::SymmetricBernoulli, 5.0), 2, 3, 2, 0).unwrap();
        let sym = make_symmetric_batch(&x, &n, &[3, 2], 5.0).unwrap();
        assert_eq!(sym.shape(), &[4, 3, 2]);
        let plus = apply_noise(&x, &n, &[3, 2], 5.0, 1.0).unwrap();
        let minus = apply_noise(&x, &n, &[3, 2], 5.0, -1.0).unwrap();
        assert_eq!(&sym.data()[..12], plus.data());
        assert_eq!(&sym.data()[12..], minus.data());

        let clean = make_symmetric_batch(&x, &n, &[3, 2], 0.0).unwrap();
        assert_eq!(&clean.data()[..12], x.data());
        assert_eq!(&clean.data()[12..], x.data());
    }

    #[test]
    fn shape_and_length_errors() {
        let x = ramp(&[1, 3, 2]);
        let n = sample_noise(&spec(NoiseKind::Uniform, 1.0), 1, 4, 2, 0).unwrap();
        assert!(matches!(
            apply_noise(&x, &n, &[3], 1.0, 1.0),
            Err(NoiseError::ShapeMismatch { .. })
        ));
        let n = sample_noise(&spec(NoiseKind::Uniform, 1.0), 1, 3, 2, 0).unwrap();
        assert!(matches!(
            apply_noise(&x, &n, &[4], 1.0, 1.0),
            Err(NoiseError::BadLength { .. })
        ));
    }

    #[test]
    fn sampling_is_counted() {
        let before = draws_on_this_thread();
        sample_noise(&spec(NoiseKind::Uniform, 1.0), 1, 1, 1, 0).unwrap();
        assert_eq!(draws_on_this_thread(), before + 1);
    }
}
