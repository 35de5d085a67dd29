//! Fine-tuning loops with embedding noise.
//!
//! [`train_step_neft`] adds one scaled draw to the token embeddings of a
//! batch (or nothing, for `NoiseKind::None`). [`train_step_symnoise`] adds
//! and subtracts the same Bernoulli draw, runs the `2B` stacked batch through
//! the model against duplicated labels, and averages the loss over all
//! supervised positions of both halves. Each step performs exactly one
//! clipped AdamW update.
//!
//! All randomness is addressed by counters: the noise for step `s` and
//! dataset example `i` comes from stream `(noise.seed, s, i)`, and the batch
//! order of epoch `e` from stream `(seed, e)`. A [`TrainState`] therefore needs
//! no RNG state beyond its step counter, and resuming from a checkpoint
//! replays the uninterrupted run exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::data::{build_batch, Batch, DataError, TokenizedExample};
use crate::model::{self, ModelError, ModelParams};
use crate::noise::{self, NoiseError, NoiseKind, NoiseSpec};
use crate::rng::{self, Domain};
use crate::tensor::{Tape, Tensor, TensorError};

/// Checkpoint entries with this prefix hold optimizer and loop state rather
/// than model parameters.
pub const STATE_PREFIX: &str = "state.";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("{step_kind} step cannot use noise kind `{kind}`")]
    WrongKind { step_kind: &'static str, kind: NoiseKind },
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: u64, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("writing step log: {0}")]
    Log(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub noise: NoiseSpec,
    pub batch_size: usize,
    pub max_steps: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Clean evaluation cadence in steps; 0 disables periodic evaluation.
    pub eval_every: u64,
    pub max_seq_len: usize,
    /// Halve the symmetric-noise batch so it forwards as many sequences per
    /// step as the additive schemes.
    pub compute_matched: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            noise: NoiseSpec {
                kind: NoiseKind::None,
                alpha: 5.0,
                seed: 0,
            },
            batch_size: 8,
            max_steps: 1000,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
            seed: 0,
            eval_every: 100,
            max_seq_len: 512,
            compute_matched: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.max_steps < 1 {
            return bad("max_steps must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip_norm >= 0.0) {
            return bad("weight_decay and grad_clip_norm must be non-negative");
        }
        NoiseSpec::new(self.noise.kind, self.noise.alpha, self.noise.seed)?;
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            grad_clip_norm: self.grad_clip_norm,
            ..AdamW::default()
        }
    }

    /// Sequences drawn from the dataset per step.
    pub fn effective_batch_size(&self) -> usize {
        if self.compute_matched && self.noise.kind == NoiseKind::SymmetricBernoulli {
            (self.batch_size / 2).max(1)
        } else {
            self.batch_size
        }
    }
}

/// Decoupled-weight-decay Adam with global-norm gradient clipping.
/// Weight decay applies to matrices only (rank 2), not to biases or gains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// 0 disables clipping.
    pub grad_clip_norm: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    /// Adam moments, keyed like the parameters.
    pub moments: BTreeMap<String, Moments>,
    /// Completed optimizer updates. Also the counter addressing the next
    /// step's noise draw.
    pub step: u64,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let moments = params
            .iter()
            .map(|(k, t)| {
                let n = t.numel();
                (k.clone(), Moments { m: vec![0.0; n], v: vec![0.0; n] })
            })
            .collect();
        Self {
            params,
            moments,
            step: 0,
            loss_history: Vec::new(),
        }
    }

    /// Applies one update from the gradients currently held by the
    /// parameters, then clears them. Returns the pre-clipping global norm.
    pub fn apply_update(&mut self, opt: &AdamW) -> f64 {
        let norm = self
            .params
            .iter()
            .filter_map(|(_, t)| t.grad())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let clip = if opt.grad_clip_norm > 0.0 && norm > opt.grad_clip_norm {
            opt.grad_clip_norm / norm
        } else {
            1.0
        };
        let t = (self.step + 1) as i32;
        let bias1 = 1.0 - opt.beta1.powi(t);
        let bias2 = 1.0 - opt.beta2.powi(t);
        for (name, param) in self.params.iter_mut() {
            let Some(grad) = param.grad().map(<[f64]>::to_vec) else { continue };
            let decay = if param.shape().len() == 2 { opt.weight_decay } else { 0.0 };
            let mom = self.moments.get_mut(name).expect("moments mirror parameters");
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                let g = grad[i] * clip;
                mom.m[i] = opt.beta1 * mom.m[i] + (1.0 - opt.beta1) * g;
                mom.v[i] = opt.beta2 * mom.v[i] + (1.0 - opt.beta2) * g * g;
                let m_hat = mom.m[i] / bias1;
                let v_hat = mom.v[i] / bias2;
                *p -= opt.learning_rate * (m_hat / (v_hat.sqrt() + opt.eps) + decay * *p);
            }
        }
        self.params.zero_grad();
        norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    /// Masked mean loss of the step's (noisy) forward pass, before the update.
    pub loss: f64,
    /// Sequences in the forward batch (`2B` for the symmetric step).
    pub forward_batch: usize,
    /// `|loss(x + s) - loss(x - s)|` for the symmetric step.
    pub symmetric_gap: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Injection {
    Additive,
    Symmetric,
}

/// Forward and backward for one batch, leaving gradients in `params`.
/// `step` addresses the noise draw.
fn accumulate_gradients(
    params: &mut ModelParams,
    batch: &Batch,
    spec: &NoiseSpec,
    injection: Injection,
    step: u64,
) -> Result<(f64, usize, Option<f64>)> {
    let (b, l) = (batch.batch_size, batch.seq_len);
    let d = params.config().d_model;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = model::embed(&mut tape, &bound, &batch.tokens, b, l)?;

    let draw = |spec: &NoiseSpec| noise::sample_noise_keyed(spec, &batch.ids, l, d, step);
    let (input, labels, lengths, fwd) = match injection {
        Injection::Symmetric => {
            let eps = draw(spec)?;
            let term = noise::scaled_noise(&eps, &batch.lengths, spec.alpha, 1.0)?;
            let negated: Vec<f64> = term.data().iter().map(|v| -v).collect();
            let negated = Tensor::new(term.shape().to_vec(), negated)?;
            let plus_term = tape.constant(term);
            let minus_term = tape.constant(negated);
            let plus = tape.add(x, plus_term)?;
            let minus = tape.add(x, minus_term)?;
            let stacked = tape.concat_batch(plus, minus)?;
            let twice = batch.duplicated();
            (stacked, twice.labels, twice.lengths, 2 * b)
        }
        Injection::Additive if spec.kind == NoiseKind::None => (x, batch.labels.clone(), batch.lengths.clone(), b),
        Injection::Additive => {
            let eps = draw(spec)?;
            let term = tape.constant(noise::scaled_noise(&eps, &batch.lengths, spec.alpha, 1.0)?);
            (tape.add(x, term)?, batch.labels.clone(), batch.lengths.clone(), b)
        }
    };
    let mask: Vec<bool> = labels.iter().map(|&t| t != crate::data::IGNORE).collect();
    let logits = model::forward_from_embeddings(&mut tape, params, &bound, input, &lengths)?;
    let (loss, gap) = match injection {
        Injection::Additive => (tape.cross_entropy_masked(logits, &labels, &mask)?, None),
        Injection::Symmetric => {
            // Both halves carry the same mask, so the mean of the two half
            // means is the masked mean over all 2B rows. Splitting it this
            // way keeps the alpha = 0 loss bit-equal to the plain one.
            let half = b * l;
            let plus_mask: Vec<bool> = mask.iter().enumerate().map(|(i, &m)| m && i < half).collect();
            let minus_mask: Vec<bool> = mask.iter().enumerate().map(|(i, &m)| m && i >= half).collect();
            let plus = tape.cross_entropy_masked(logits, &labels, &plus_mask)?;
            let minus = tape.cross_entropy_masked(logits, &labels, &minus_mask)?;
            let gap = (tape.value(plus).item() - tape.value(minus).item()).abs();
            let both = tape.add(plus, minus)?;
            (tape.scale(both, 0.5), Some(gap))
        }
    };
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(TrainError::NonFinite { step, loss: value });
    }
    tape.backward(loss)?;
    params.absorb_grads(&tape, &bound);
    Ok((value, fwd, gap))
}

/// Loss and parameter gradients for one batch without updating anything.
/// Symmetric injection is used for `SymmetricBernoulli`, additive otherwise.
pub fn loss_and_gradients(
    params: &ModelParams,
    batch: &Batch,
    spec: &NoiseSpec,
    step: u64,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut scratch = params.clone();
    scratch.zero_grad();
    let injection = match spec.kind {
        NoiseKind::SymmetricBernoulli => Injection::Symmetric,
        _ => Injection::Additive,
    };
    let (loss, _, _) = accumulate_gradients(&mut scratch, batch, spec, injection, step)?;
    let grads = scratch
        .iter()
        .map(|(k, t)| (k.clone(), t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()])))
        .collect();
    Ok((loss, grads))
}

fn finish_step(state: &mut TrainState, opt: &AdamW, loss: f64, fwd: usize, gap: Option<f64>) -> StepOutcome {
    let grad_norm = state.apply_update(opt);
    state.step += 1;
    state.loss_history.push(loss);
    StepOutcome {
        loss,
        forward_batch: fwd,
        symmetric_gap: gap,
        grad_norm,
    }
}

/// Plain fine-tuning (`NoiseKind::None`) or additive noise injection
/// (uniform, Gaussian, Bernoulli), followed by one optimizer update.
pub fn train_step_neft(state: &mut TrainState, batch: &Batch, spec: &NoiseSpec, opt: &AdamW) -> Result<StepOutcome> {
    if spec.kind == NoiseKind::SymmetricBernoulli {
        return Err(TrainError::WrongKind {
            step_kind: "additive",
            kind: spec.kind,
        });
    }
    state.params.zero_grad();
    let (loss, fwd, gap) = accumulate_gradients(&mut state.params, batch, spec, Injection::Additive, state.step)?;
    Ok(finish_step(state, opt, loss, fwd, gap))
}

/// Symmetric Bernoulli injection on the `[x + s; x - s]` stacked batch,
/// followed by one optimizer update.
pub fn train_step_symnoise(state: &mut TrainState, batch: &Batch, spec: &NoiseSpec, opt: &AdamW) -> Result<StepOutcome> {
    if spec.kind != NoiseKind::SymmetricBernoulli {
        return Err(TrainError::WrongKind {
            step_kind: "symmetric",
            kind: spec.kind,
        });
    }
    state.params.zero_grad();
    let (loss, fwd, gap) = accumulate_gradients(&mut state.params, batch, spec, Injection::Symmetric, state.step)?;
    Ok(finish_step(state, opt, loss, fwd, gap))
}

/// Token-weighted mean NLL over the supervised positions of `examples`,
/// with no noise.
pub fn evaluate(params: &ModelParams, examples: &[TokenizedExample], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&TokenizedExample> = chunk.iter().collect();
        let batch = build_batch(&refs)?;
        let logits = model::logits(params, &batch.tokens, &batch.lengths)?;
        for (s, c) in model::sequence_nll(&logits, &batch.labels, &batch.loss_mask()) {
            total += s;
            count += c;
        }
    }
    if count == 0 {
        return Err(TrainError::Tensor(TensorError::EmptyLoss));
    }
    Ok(total / count as f64)
}

/// One line of the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_eval_loss: Option<f64>,
    pub noise_kind: NoiseKind,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symmetric_gap: Option<f64>,
}

pub trait StepSink {
    fn record(&mut self, record: &StepRecord) -> std::io::Result<()>;
}

/// Discards records.
pub struct NoLog;

impl StepSink for NoLog {
    fn record(&mut self, _: &StepRecord) -> std::io::Result<()> {
        Ok(())
    }
}

impl StepSink for Vec<StepRecord> {
    fn record(&mut self, record: &StepRecord) -> std::io::Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Append-only JSONL step log.
pub struct JsonlLog<W: Write> {
    out: W,
}

impl JsonlLog<BufWriter<File>> {
    pub fn append(path: &Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(file) })
    }
}

impl<W: Write> JsonlLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }
}

impl<W: Write> StepSink for JsonlLog<W> {
    fn record(&mut self, record: &StepRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

/// Dataset indices for each step: consecutive slices of per-epoch shuffles.
#[derive(Debug, Clone)]
pub struct BatchOrder {
    seed: u64,
    dataset_len: usize,
    batch_size: usize,
}

impl BatchOrder {
    pub fn new(seed: u64, dataset_len: usize, batch_size: usize) -> Self {
        Self {
            seed,
            dataset_len,
            batch_size,
        }
    }

    pub fn epoch_permutation(&self, epoch: u64) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.dataset_len).collect();
        perm.shuffle(&mut rng::stream(self.seed, Domain::Shuffle, epoch, 0));
        perm
    }

    /// Indices for the zero-based step `step`.
    pub fn indices(&self, step: u64) -> Vec<usize> {
        let n = self.dataset_len as u64;
        let start = step * self.batch_size as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (start..start + self.batch_size as u64)
            .map(|pos| {
                let epoch = pos / n;
                if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                    cached = Some((epoch, self.epoch_permutation(epoch)));
                }
                cached.as_ref().expect("just filled").1[(pos % n) as usize]
            })
            .collect()
    }
}

/// Runs steps over a fixed dataset under one [`TrainConfig`].
pub struct Trainer<'a> {
    config: &'a TrainConfig,
    train: &'a [TokenizedExample],
    eval: &'a [TokenizedExample],
    order: BatchOrder,
}

impl<'a> Trainer<'a> {
    /// `eval` may be empty, in which case clean evaluation uses `train`.
    pub fn new(config: &'a TrainConfig, train: &'a [TokenizedExample], eval: &'a [TokenizedExample]) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let order = BatchOrder::new(config.seed, train.len(), config.effective_batch_size());
        let eval = if eval.is_empty() { train } else { eval };
        Ok(Self {
            config,
            train,
            eval,
            order,
        })
    }

    pub fn batch_for_step(&self, step: u64) -> Result<Batch> {
        let indices = self.order.indices(step);
        let refs: Vec<&TokenizedExample> = indices.iter().map(|&i| &self.train[i]).collect();
        Ok(build_batch(&refs)?.with_ids(indices.iter().map(|&i| i as u64).collect()))
    }

    pub fn eval_set(&self) -> &[TokenizedExample] {
        self.eval
    }

    pub fn step(&self, state: &mut TrainState) -> Result<StepRecord> {
        let batch = self.batch_for_step(state.step)?;
        let spec = &self.config.noise;
        let opt = self.config.optimizer();
        let outcome = match spec.kind {
            NoiseKind::SymmetricBernoulli => train_step_symnoise(state, &batch, spec, &opt)?,
            _ => train_step_neft(state, &batch, spec, &opt)?,
        };
        let every = self.config.eval_every;
        let due = every > 0 && (state.step % every == 0 || state.step == self.config.max_steps);
        let clean_eval_loss = if due {
            Some(evaluate(&state.params, self.eval, self.config.batch_size)?)
        } else {
            None
        };
        Ok(StepRecord {
            step: state.step,
            loss: outcome.loss,
            clean_eval_loss,
            noise_kind: spec.kind,
            alpha: spec.alpha,
            symmetric_gap: outcome.symmetric_gap,
        })
    }

    /// Steps until `state.step == config.max_steps`.
    pub fn run(&self, state: &mut TrainState, log: &mut dyn StepSink) -> Result<()> {
        while state.step < self.config.max_steps {
            let record = self.step(state)?;
            log.record(&record)?;
        }
        Ok(())
    }
}

/// Trains from `init` for `config.max_steps` steps, logging each step, and
/// writes the final state to `checkpoint` when given.
pub fn train_loop(
    config: &TrainConfig,
    train: &[TokenizedExample],
    eval: &[TokenizedExample],
    init: ModelParams,
    log: &mut dyn StepSink,
    checkpoint: Option<&Path>,
) -> Result<TrainState> {
    let trainer = Trainer::new(config, train, eval)?;
    let mut state = TrainState::new(init);
    trainer.run(&mut state, log)?;
    if let Some(path) = checkpoint {
        save_checkpoint(&state, path)?;
    }
    Ok(state)
}

fn tensor_of(data: Vec<f64>, shape: Vec<usize>) -> Tensor {
    Tensor::new(shape, data).expect("shape mirrors data")
}

/// Parameters plus `state.*` entries (Adam moments, step counter, loss
/// history) in one `SYMN` file, with the model config sidecar.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut extra: Vec<(String, Tensor)> = Vec::new();
    for (name, t) in state.params.iter() {
        let mom = &state.moments[name];
        extra.push((format!("{STATE_PREFIX}adam_m.{name}"), tensor_of(mom.m.clone(), t.shape().to_vec())));
        extra.push((format!("{STATE_PREFIX}adam_v.{name}"), tensor_of(mom.v.clone(), t.shape().to_vec())));
    }
    if !state.loss_history.is_empty() {
        let n = state.loss_history.len();
        extra.push((format!("{STATE_PREFIX}loss_history"), tensor_of(state.loss_history.clone(), vec![n])));
    }
    extra.push((format!("{STATE_PREFIX}step"), Tensor::scalar(state.step as f64)));
    let entries = state
        .params
        .iter()
        .map(|(k, v)| (k.as_str(), v))
        .chain(extra.iter().map(|(k, v)| (k.as_str(), v)));
    checkpoint::write_file(path, &checkpoint::encode(entries))?;
    checkpoint::write_config(path, state.params.config())?;
    Ok(())
}

/// Restores a [`TrainState`]. A plain model checkpoint (no `state.*`
/// entries) loads with zero moments at step 0.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let config = checkpoint::read_config(path)?;
    let mut params = BTreeMap::new();
    let mut extra = BTreeMap::new();
    for (name, t) in checkpoint::read_file(path)? {
        match name.strip_prefix(STATE_PREFIX) {
            Some(rest) => extra.insert(rest.to_string(), t),
            None => params.insert(name, t),
        };
    }
    let params = ModelParams::from_tensors(config, params)?;
    let mut state = TrainState::new(params);
    let format = |m: String| TrainError::Checkpoint(CheckpointError::Format(m));
    for (name, mom) in &mut state.moments {
        match (extra.remove(&format!("adam_m.{name}")), extra.remove(&format!("adam_v.{name}"))) {
            (Some(m), Some(v)) if m.numel() == mom.m.len() && v.numel() == mom.v.len() => {
                mom.m = m.into_data();
                mom.v = v.into_data();
            }
            (None, None) => {}
            _ => return Err(format(format!("optimizer moments for `{name}` missing or misshapen"))),
        }
    }
    if let Some(step) = extra.remove("step") {
        let v = step.item();
        if !(v >= 0.0 && v.fract() == 0.0) {
            return Err(format(format!("step counter {v} is not a whole number")));
        }
        state.step = v as u64;
    }
    if let Some(history) = extra.remove("loss_history") {
        state.loss_history = history.into_data();
    }
    if let Some(unknown) = extra.keys().next() {
        return Err(format(format!("unknown state entry `{STATE_PREFIX}{unknown}`")));
    }
    Ok(state)
}
