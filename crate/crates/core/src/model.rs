//! Decoder-only transformer, split into a token-embedding stage ([`embed`])
//! and everything after it ([`forward_from_embeddings`]) so that training can
//! perturb token embeddings between the two.
//!
//! Blocks are pre-layer-norm; position embeddings are learned, absolute, and
//! added inside [`forward_from_embeddings`], i.e. after any injected noise.
//! The LM head is tied to the token embedding table.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{EOS, PAD};
use crate::rng::{self, Domain};
use crate::tensor::{softmax_rows, Tape, Tensor, TensorError, Var};

pub const INIT_STD: f64 = 0.02;
/// Additive attention mask value; large enough that `exp` underflows to 0.
const MASKED: f64 = -1e30;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence length {len} exceeds context length {context_len}")]
    ContextOverflow { len: usize, context_len: usize },
    #[error("lengths {lengths:?} invalid for batch of {batch} sequences of length {len}")]
    BadLengths { lengths: Vec<usize>, batch: usize, len: usize },
    #[error("token matrix has {got} ids, expected {batch}x{len}")]
    BadTokens { got: usize, batch: usize, len: usize },
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("parameter `{name}`: {problem}")]
    Parameter { name: String, problem: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return bad(format!("sizes must be positive: {self:?}"));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.context_len < 2 {
            return bad(format!("context_len {} < 2", self.context_len));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.d_model;
    let mut out = vec![
        ("tok_emb".to_string(), vec![config.vocab_size, d], Init::Normal),
        ("pos_emb".to_string(), vec![config.context_len, d], Init::Normal),
    ];
    for layer in 0..config.n_layers {
        let p = |s: &str| format!("blocks.{layer}.{s}");
        out.extend([
            (p("ln1.gain"), vec![d], Init::Ones),
            (p("ln1.bias"), vec![d], Init::Zeros),
            (p("attn.w_q"), vec![d, d], Init::Normal),
            (p("attn.b_q"), vec![d], Init::Zeros),
            (p("attn.w_k"), vec![d, d], Init::Normal),
            (p("attn.b_k"), vec![d], Init::Zeros),
            (p("attn.w_v"), vec![d, d], Init::Normal),
            (p("attn.b_v"), vec![d], Init::Zeros),
            (p("attn.w_o"), vec![d, d], Init::Normal),
            (p("attn.b_o"), vec![d], Init::Zeros),
            (p("ln2.gain"), vec![d], Init::Ones),
            (p("ln2.bias"), vec![d], Init::Zeros),
            (p("mlp.w_in"), vec![d, 4 * d], Init::Normal),
            (p("mlp.b_in"), vec![4 * d], Init::Zeros),
            (p("mlp.w_out"), vec![4 * d, d], Init::Normal),
            (p("mlp.b_out"), vec![d], Init::Zeros),
        ]);
    }
    out.extend([
        ("ln_f.gain".to_string(), vec![d], Init::Ones),
        ("ln_f.bias".to_string(), vec![d], Init::Zeros),
    ]);
    out
}

/// Named parameter tensors plus the config that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Seeded initialization: N(0, 0.02) weights and embeddings, zero biases,
    /// unit layer-norm gains. Each tensor draws from its own stream.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tensors = layout(config)
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape, init))| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Normal => {
                        let mut rng = rng::stream(config.seed, Domain::Init, i as u64, 0);
                        (0..n).map(|_| normal.sample(&mut rng)).collect()
                    }
                };
                let t = Tensor::new(shape, data).expect("layout shapes are valid");
                (name, t.with_requires_grad(true))
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Wraps loaded tensors after checking names and shapes against `config`.
    pub fn from_tensors(config: ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        for (name, shape, _) in &expected {
            match tensors.get(name) {
                None => {
                    return Err(ModelError::Parameter {
                        name: name.clone(),
                        problem: "missing".into(),
                    })
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(ModelError::Parameter {
                        name: name.clone(),
                        problem: format!("shape {:?}, config implies {:?}", t.shape(), shape),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = tensors.keys().find(|k| !expected.iter().any(|(n, _, _)| n == *k)) {
            return Err(ModelError::Parameter {
                name: extra.clone(),
                problem: "not part of this architecture".into(),
            });
        }
        for t in tensors.values_mut() {
            *t = std::mem::replace(t, Tensor::scalar(0.0)).with_requires_grad(true);
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Registers every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let mut leaf = t.clone();
                leaf.zero_grad();
                (name.clone(), tape.leaf(leaf))
            })
            .collect();
        Bound { vars }
    }

    /// Adds the gradients accumulated on `tape` into the parameters' own
    /// gradient buffers.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (name, t) in &mut self.tensors {
            if let Some(g) = tape.grad(bound.var(name)) {
                t.accumulate_grad(g);
            }
        }
    }
}

/// Parameter handles on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }
}

/// Gathers token embeddings for a `[batch, len]` token matrix.
pub fn embed(tape: &mut Tape, bound: &Bound, tokens: &[usize], batch: usize, len: usize) -> Result<Var> {
    if tokens.len() != batch * len {
        return Err(ModelError::BadTokens {
            got: tokens.len(),
            batch,
            len,
        });
    }
    Ok(tape.embedding(bound.var("tok_emb"), tokens, &[batch, len])?)
}

fn attention_mask(lengths: &[usize], heads: usize, len: usize) -> Tensor {
    let mut data = Vec::with_capacity(lengths.len() * heads * len * len);
    for &true_len in lengths {
        for _ in 0..heads {
            for t in 0..len {
                for s in 0..len {
                    data.push(if s <= t && s < true_len { 0.0 } else { MASKED });
                }
            }
        }
    }
    Tensor::new(vec![lengths.len() * heads, len, len], data).expect("mask shape")
}

fn linear(tape: &mut Tape, bound: &Bound, x: Var, w: &str, b: &str) -> Result<Var> {
    let y = tape.matmul(x, bound.var(w))?;
    Ok(tape.add(y, bound.var(b))?)
}

/// `[B*L, d]` projection to `[B*H, L, dh]`.
fn split_heads(tape: &mut Tape, x: Var, batch: usize, len: usize, heads: usize, dh: usize) -> Result<Var> {
    let x = tape.reshape(x, &[batch, len, heads, dh])?;
    let x = tape.transpose(x, &[0, 2, 1, 3])?;
    Ok(tape.reshape(x, &[batch * heads, len, dh])?)
}

/// Runs positions, blocks, final norm and the tied head on `[B, L, d]`
/// embeddings, producing `[B, L, V]` logits. Attention is causal and keys at
/// or beyond `lengths[b]` are masked out.
pub fn forward_from_embeddings(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    x: Var,
    lengths: &[usize],
) -> Result<Var> {
    let cfg = &params.config;
    let shape = tape.shape(x).to_vec();
    let [batch, len, d] = shape[..] else {
        return Err(TensorError::ShapeMismatch {
            op: "forward_from_embeddings",
            left: shape,
            right: vec![cfg.d_model],
        }
        .into());
    };
    if d != cfg.d_model {
        return Err(TensorError::ShapeMismatch {
            op: "forward_from_embeddings",
            left: shape,
            right: vec![cfg.d_model],
        }
        .into());
    }
    if len > cfg.context_len {
        return Err(ModelError::ContextOverflow {
            len,
            context_len: cfg.context_len,
        });
    }
    if lengths.len() != batch || lengths.iter().any(|&l| l == 0 || l > len) {
        return Err(ModelError::BadLengths {
            lengths: lengths.to_vec(),
            batch,
            len,
        });
    }
    let (heads, dh) = (cfg.n_heads, cfg.head_dim());
    let rows = batch * len;

    let positions: Vec<usize> = (0..len).collect();
    let pos = tape.embedding(bound.var("pos_emb"), &positions, &[len])?;
    let mut h = tape.add(x, pos)?;
    let mask = tape.constant(attention_mask(lengths, heads, len));

    for layer in 0..cfg.n_layers {
        let p = |s: &str| format!("blocks.{layer}.{s}");
        let normed = tape.layer_norm(h, bound.var(&p("ln1.gain")), bound.var(&p("ln1.bias")))?;
        let flat = tape.reshape(normed, &[rows, d])?;
        let q = linear(tape, bound, flat, &p("attn.w_q"), &p("attn.b_q"))?;
        let k = linear(tape, bound, flat, &p("attn.w_k"), &p("attn.b_k"))?;
        let v = linear(tape, bound, flat, &p("attn.w_v"), &p("attn.b_v"))?;
        let q = split_heads(tape, q, batch, len, heads, dh)?;
        let k = split_heads(tape, k, batch, len, heads, dh)?;
        let v = split_heads(tape, v, batch, len, heads, dh)?;
        let kt = tape.transpose(k, &[0, 2, 1])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = tape.add(scores, mask)?;
        let attn = tape.softmax(scores);
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.reshape(ctx, &[batch, heads, len, dh])?;
        let ctx = tape.transpose(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[rows, d])?;
        let out = linear(tape, bound, ctx, &p("attn.w_o"), &p("attn.b_o"))?;
        let out = tape.reshape(out, &[batch, len, d])?;
        h = tape.add(h, out)?;

        let normed = tape.layer_norm(h, bound.var(&p("ln2.gain")), bound.var(&p("ln2.bias")))?;
        let flat = tape.reshape(normed, &[rows, d])?;
        let up = linear(tape, bound, flat, &p("mlp.w_in"), &p("mlp.b_in"))?;
        let act = tape.gelu(up);
        let down = linear(tape, bound, act, &p("mlp.w_out"), &p("mlp.b_out"))?;
        let down = tape.reshape(down, &[batch, len, d])?;
        h = tape.add(h, down)?;
    }

    let normed = tape.layer_norm(h, bound.var("ln_f.gain"), bound.var("ln_f.bias"))?;
    let flat = tape.reshape(normed, &[rows, d])?;
    let head = tape.transpose(bound.var("tok_emb"), &[1, 0])?;
    let logits = tape.matmul(flat, head)?;
    Ok(tape.reshape(logits, &[batch, len, cfg.vocab_size])?)
}

/// [`embed`] then [`forward_from_embeddings`].
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    tokens: &[usize],
    lengths: &[usize],
) -> Result<Var> {
    let batch = lengths.len();
    let len = if batch == 0 { 0 } else { tokens.len() / batch };
    let x = embed(tape, bound, tokens, batch, len)?;
    forward_from_embeddings(tape, params, bound, x, lengths)
}

/// Logits for a token matrix on a throwaway tape.
pub fn logits(params: &ModelParams, tokens: &[usize], lengths: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = forward(&mut tape, params, &bound, tokens, lengths)?;
    Ok(tape.value(out).clone())
}

/// Logits for precomputed `[B, L, d]` embeddings on a throwaway tape.
pub fn logits_from_embeddings(params: &ModelParams, x: &Tensor, lengths: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let out = forward_from_embeddings(&mut tape, params, &bound, xv, lengths)?;
    Ok(tape.value(out).clone())
}

/// Token embeddings for a token matrix, outside any training tape.
pub fn embeddings(params: &ModelParams, tokens: &[usize], batch: usize, len: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = embed(&mut tape, &bound, tokens, batch, len)?;
    Ok(tape.value(x).clone())
}

/// Per-sequence `(sum of NLL, count)` over masked positions of `[B, L, V]`
/// logits. Sequences with no supervised position report `(0.0, 0)`.
pub fn sequence_nll(logits: &Tensor, labels: &[usize], mask: &[bool]) -> Vec<(f64, usize)> {
    let shape = logits.shape();
    let (batch, len, vocab) = (shape[0], shape[1], shape[2]);
    let data = logits.data();
    (0..batch)
        .map(|b| {
            let mut total = 0.0;
            let mut count = 0;
            for t in 0..len {
                let pos = b * len + t;
                if mask[pos] {
                    let row = &data[pos * vocab..(pos + 1) * vocab];
                    total += crate::tensor::log_sum_exp(row) - row[labels[pos]];
                    count += 1;
                }
            }
            (total, count)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Decoding {
    Greedy,
    /// Softmax sampling at the given temperature; `0.0` means greedy.
    Temperature(f64),
}

/// Extends `prompt` by up to `max_new` tokens, stopping early at EOS (which
/// is not included). Only the last `context_len` tokens are fed to the model.
/// PAD is never produced. No noise is involved.
pub fn generate(
    params: &ModelParams,
    prompt: &[usize],
    max_new: usize,
    decoding: Decoding,
    seed: u64,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(ModelError::EmptyPrompt);
    }
    let vocab = params.config.vocab_size;
    if let Some((position, &index)) = prompt.iter().enumerate().find(|(_, &t)| t >= vocab) {
        return Err(TensorError::IndexOutOfRange {
            op: "generate",
            index,
            size: vocab,
            position,
        }
        .into());
    }
    let context = params.config.context_len;
    let mut out = prompt.to_vec();
    for step in 0..max_new {
        let window = &out[out.len().saturating_sub(context)..];
        let logits = logits(params, window, &[window.len()])?;
        let last = &logits.data()[(window.len() - 1) * vocab..window.len() * vocab];
        let next = match decoding {
            Decoding::Temperature(tau) if tau > 0.0 => {
                let scaled: Vec<f64> = last.iter().map(|v| v / tau).collect();
                let mut probs = softmax_rows(&Tensor::new(vec![vocab], scaled)?).into_data();
                if PAD < vocab {
                    probs[PAD] = 0.0;
                }
                let total: f64 = probs.iter().sum();
                let mut u = rng::stream(seed, Domain::Sampling, step as u64, 0).random::<f64>() * total;
                let mut chosen = vocab - 1;
                for (i, p) in probs.iter().enumerate() {
                    if u < *p {
                        chosen = i;
                        break;
                    }
                    u -= p;
                }
                chosen
            }
            _ => {
                let mut best = 0;
                for (i, v) in last.iter().enumerate() {
                    if i != PAD && (best == PAD || *v > last[best]) {
                        best = i;
                    }
                }
                best
            }
        };
        if next == EOS {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VOCAB_SIZE;

    fn tiny(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            context_len: 8,
            seed,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(0);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny(0);
        c.context_len = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let a = ModelParams::init(&tiny(7)).unwrap();
        let b = ModelParams::init(&tiny(7)).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(&tiny(8)).unwrap();
        assert!(a.iter().zip(c.iter()).any(|((_, x), (_, y))| x.data() != y.data()));
        assert_eq!(a.get("tok_emb").unwrap().shape(), &[VOCAB_SIZE, 8]);
        assert!(a.iter().all(|(_, t)| t.requires_grad()));
    }

    #[test]
    fn embed_gathers_rows() {
        let p = ModelParams::init(&tiny(1)).unwrap();
        let table = p.get("tok_emb").unwrap().data();
        let x = embeddings(&p, &[3, 5], 1, 2).unwrap();
        assert_eq!(&x.data()[..8], &table[24..32]);
        assert_eq!(&x.data()[8..], &table[40..48]);
        let zeros = embeddings(&p, &[0; 6], 2, 3).unwrap();
        for row in zeros.data().chunks(8) {
            assert_eq!(row, &table[..8]);
        }
    }

    #[test]
    fn embed_rejects_out_of_range_ids() {
        let p = ModelParams::init(&tiny(1)).unwrap();
        let err = embeddings(&p, &[1, 2, 999], 1, 3).unwrap_err();
        assert!(matches!(
            err,
            ModelError::Tensor(TensorError::IndexOutOfRange { position: 2, .. })
        ));
    }

    #[test]
    fn output_shape_and_batch_independence() {
        let p = ModelParams::init(&tiny(2)).unwrap();
        let seq = [10, 20, 30, 40];
        let tokens: Vec<usize> = seq.iter().chain(&seq).copied().collect();
        let out = logits(&p, &tokens, &[4, 4]).unwrap();
        assert_eq!(out.shape(), &[2, 4, VOCAB_SIZE]);
        let half = 4 * VOCAB_SIZE;
        assert_eq!(out.data()[..half], out.data()[half..]);
    }

    #[test]
    fn context_overflow_is_an_error() {
        let p = ModelParams::init(&tiny(2)).unwrap();
        let tokens = vec![1; 9];
        assert!(matches!(
            logits(&p, &tokens, &[9]),
            Err(ModelError::ContextOverflow { len: 9, context_len: 8 })
        ));
    }

    #[test]
    fn generate_basics() {
        let p = ModelParams::init(&tiny(3)).unwrap();
        assert_eq!(generate(&p, &[1, 2], 0, Decoding::Greedy, 0).unwrap(), vec![1, 2]);
        assert!(matches!(generate(&p, &[], 3, Decoding::Greedy, 0), Err(ModelError::EmptyPrompt)));
        let g1 = generate(&p, &[1, 2], 12, Decoding::Greedy, 0).unwrap();
        let g2 = generate(&p, &[1, 2], 12, Decoding::Greedy, 99).unwrap();
        let g3 = generate(&p, &[1, 2], 12, Decoding::Temperature(0.0), 5).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(g1, g3);
        assert!(g1.len() <= 14 && !g1.contains(&PAD));
        let s1 = generate(&p, &[1, 2], 12, Decoding::Temperature(1.0), 5).unwrap();
        let s2 = generate(&p, &[1, 2], 12, Decoding::Temperature(1.0), 5).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn from_tensors_checks_layout() {
        let p = ModelParams::init(&tiny(4)).unwrap();
        let mut tensors: BTreeMap<String, Tensor> = p.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        assert!(ModelParams::from_tensors(tiny(4), tensors.clone()).is_ok());
        let mut wrong = tiny(4);
        wrong.d_model = 16;
        assert!(ModelParams::from_tensors(wrong, tensors.clone()).is_err());
        tensors.remove("ln_f.bias");
        assert!(matches!(
            ModelParams::from_tensors(tiny(4), tensors),
            Err(ModelError::Parameter { .. })
        ));
    }
}
