//! Autoregressive forecasting of per-location latent index sequences.
//!
//! A location's sequence is its frame-0 grid followed by every later frame's
//! grid (frame-major, 16 tokens per frame). The first 16 tokens are the
//! conditioning prompt; the model is trained with teacher forcing to predict
//! every token after them.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural::checkpoint::{self, CheckpointError};
use crate::neural::layers::{multi_head_attention, Attention, LayerNorm, Linear, PROJECTION_STD};
use crate::neural::{adam_step, gemm, AdamConfig, AdamState, Bound, MatView, NeuralError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::vqvae::tokens::{LatentGrid, TokenError, TokenStream, GRID_TOKENS};

pub const CHECKPOINT_TAG: &str = "gpt/";

const SPLIT_SALT: u64 = 0x5eed_5011;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tokens(#[from] TokenError),
    #[error("invalid forecaster config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sequence of {needed} tokens exceeds context length {max_len}")]
    ContextOverflow { needed: usize, max_len: usize },
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfVocabulary { token: usize, vocab: usize },
    #[error("malformed sequence: {0}")]
    Sequence(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecasterConfig {
    /// Vocabulary size; equals the codebook size.
    pub vocab: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Feed-forward width as a multiple of `d_model`.
    pub ff_mult: usize,
    /// Longest sequence the positional table covers.
    pub max_len: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Cosine decay target as a fraction of `lr`; 1.0 keeps it constant.
    pub final_lr_ratio: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    /// Fraction of locations held out for validation.
    pub val_fraction: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            layers: 6,
            heads: 8,
            d_model: 128,
            ff_mult: 4,
            max_len: 256,
            lr: 2.5e-6,
            warmup_steps: 0,
            final_lr_ratio: 1.0,
            batch_size: 32,
            steps: 1000,
            clip_norm: 1.0,
            val_fraction: 0.1,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl ForecasterConfig {
    pub fn validate(&self) -> Result<(), ForecastError> {
        let bad = |m: String| Err(ForecastError::Config(m));
        if self.vocab < 2 || self.vocab > u16::MAX as usize + 1 {
            return bad(format!("vocab {} outside [2, 65536]", self.vocab));
        }
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.ff_mult == 0 {
            return bad("layers, heads, d_model and ff_mult must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.max_len < 2 * GRID_TOKENS {
            return bad(format!("max_len {} shorter than two frames", self.max_len));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.final_lr_ratio >= 0.0) {
            return bad("lr must be positive and final_lr_ratio non-negative".into());
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        Ok(())
    }

    /// Learning rate for 0-based `step`: linear warmup, then cosine decay.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.final_lr_ratio + (1.0 - self.final_lr_ratio) * cosine)
    }
}

/// Frame-major token sequence of one patch location.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u16>,
    /// Top-left origin of the patch in its frame.
    pub location: (usize, usize),
}

impl TokenSequence {
    pub fn frames(&self) -> usize {
        self.tokens.len() / GRID_TOKENS
    }

    pub fn frame(&self, f: usize) -> &[u16] {
        &self.tokens[f * GRID_TOKENS..(f + 1) * GRID_TOKENS]
    }

    pub fn grid(&self, f: usize, vocab: usize) -> Result<LatentGrid, TokenError> {
        let idx: Vec<usize> = self.frame(f).iter().map(|&t| t as usize).collect();
        LatentGrid::new(&idx, vocab)
    }
}

/// One training sequence per patch location, in location order.
pub fn build_dataset(stream: &TokenStream, origins: &[(usize, usize)]) -> Result<Vec<TokenSequence>, ForecastError> {
    let frames = stream.frames()?;
    if origins.len() != stream.locations() {
        return Err(ForecastError::Sequence(format!(
            "{} origins for {} locations",
            origins.len(),
            stream.locations()
        )));
    }
    if frames == 0 {
        return Err(ForecastError::EmptyDataset);
    }
    Ok(stream
        .grids
        .iter()
        .zip(origins)
        .map(|(grids, &location)| TokenSequence {
            tokens: grids.iter().flat_map(|g| g.indices().iter().copied()).collect(),
            location,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    Greedy,
    Temperature,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub mode: SamplingMode,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { mode: SamplingMode::Greedy, temperature: 1.0, seed: 0 }
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    attention: Attention,
    norm2: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Decoder-only causal transformer over codebook indices.
#[derive(Clone, Debug)]
pub struct Forecaster {
    config: ForecasterConfig,
    params: ParamStore<f32>,
    token_embedding: ParamId,
    position_embedding: ParamId,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    head: Linear,
}

impl Forecaster {
    pub fn new(config: ForecasterConfig) -> Result<Self, ForecastError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let d = config.d_model;
        let token_embedding = p.add_normal("token_embedding", &[config.vocab, d], PROJECTION_STD, &mut rng);
        let position_embedding = p.add_normal("position_embedding", &[config.max_len, d], PROJECTION_STD, &mut rng);
        let blocks = (0..config.layers)
            .map(|i| Block {
                norm1: LayerNorm::new(&mut p, &format!("block{i}.norm1"), d),
                attention: Attention::new(&mut p, &format!("block{i}.attn"), d, &mut rng),
                norm2: LayerNorm::new(&mut p, &format!("block{i}.norm2"), d),
                ff_in: Linear::new(&mut p, &format!("block{i}.ff_in"), d, d * config.ff_mult, &mut rng),
                ff_out: Linear::new(&mut p, &format!("block{i}.ff_out"), d * config.ff_mult, d, &mut rng),
            })
            .collect();
        let final_norm = LayerNorm::new(&mut p, "final_norm", d);
        let head = Linear::new(&mut p, "head", d, config.vocab, &mut rng);
        Ok(Self { config, params: p, token_embedding, position_embedding, blocks, final_norm, head })
    }

    pub fn config(&self) -> &ForecasterConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    fn check_tokens(&self, tokens: &[u16]) -> Result<(), ForecastError> {
        if tokens.len() > self.config.max_len {
            return Err(ForecastError::ContextOverflow { needed: tokens.len(), max_len: self.config.max_len });
        }
        if tokens.is_empty() {
            return Err(ForecastError::Sequence("empty token prefix".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(ForecastError::TokenOutOfVocabulary { token: t as usize, vocab: self.config.vocab });
        }
        Ok(())
    }

    /// Logits `[N, T, vocab]` for a batch of equal-length sequences.
    pub fn forward_tape(&self, tape: &mut Tape<f32>, p: &Bound, batch: &[&[u16]]) -> Result<Var, ForecastError> {
        let n = batch.len();
        let t = batch.first().map_or(0, |s| s.len());
        for seq in batch {
            if seq.len() != t {
                return Err(ForecastError::Sequence("batch sequences differ in length".into()));
            }
            self.check_tokens(seq)?;
        }
        let d = self.config.d_model;
        let flat: Vec<usize> = batch.iter().flat_map(|s| s.iter().map(|&v| v as usize)).collect();
        let positions: Vec<usize> = (0..n).flat_map(|_| 0..t).collect();
        let tok = tape.embedding(p.get(self.token_embedding), &flat)?;
        let pos = tape.embedding(p.get(self.position_embedding), &positions)?;
        let x = tape.add(tok, pos)?;
        let mut x = tape.reshape(x, &[n, t, d])?;
        for b in &self.blocks {
            let h = b.norm1.forward(tape, p, x)?;
            let h = multi_head_attention(tape, p, h, &b.attention, self.config.heads, true)?;
            x = tape.add(x, h)?;
            let h = b.norm2.forward(tape, p, x)?;
            let h = b.ff_in.forward(tape, p, h)?;
            let h = tape.gelu(h)?;
            let h = b.ff_out.forward(tape, p, h)?;
            x = tape.add(x, h)?;
        }
        let x = self.final_norm.forward(tape, p, x)?;
        Ok(self.head.forward(tape, p, x)?)
    }

    /// Logits `[T, vocab]`; row `t` is the distribution of token `t + 1`.
    pub fn forward_logits(&self, tokens: &[u16]) -> Result<Tensor<f32>, ForecastError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let out = self.forward_tape(&mut tape, &p, &[tokens])?;
        let t = tokens.len();
        Ok(tape.value(out).clone().reshaped(&[t, self.config.vocab])?)
    }

    /// Generates `frames` grids after `initial`, returning all `frames + 1`.
    pub fn predict(&self, initial: &LatentGrid, frames: usize, sampler: &SamplerConfig) -> Result<TokenSequence, ForecastError> {
        if frames == 0 {
            return Err(ForecastError::Sequence("need at least one frame to predict".into()));
        }
        let total = (frames + 1) * GRID_TOKENS;
        let tokens = self.continue_tokens(initial.indices(), total, sampler)?;
        Ok(TokenSequence { tokens, location: (0, 0) })
    }

    /// Extends `prefix` autoregressively to `total_len` tokens.
    pub fn continue_tokens(&self, prefix: &[u16], total_len: usize, sampler: &SamplerConfig) -> Result<Vec<u16>, ForecastError> {
        if total_len > self.config.max_len {
            return Err(ForecastError::ContextOverflow { needed: total_len, max_len: self.config.max_len });
        }
        self.check_tokens(prefix)?;
        if sampler.mode == SamplingMode::Temperature && !(sampler.temperature > 0.0 && sampler.temperature.is_finite()) {
            return Err(ForecastError::Config(format!("temperature {} must be positive", sampler.temperature)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
        let mut dec = IncrementalDecoder::new(self);
        let mut tokens = prefix.to_vec();
        let mut logits = Vec::new();
        for &tok in prefix {
            logits = dec.push(tok)?;
        }
        while tokens.len() < total_len {
            let next = match sampler.mode {
                SamplingMode::Greedy => argmax(&logits),
                SamplingMode::Temperature => sample_logits(&logits, sampler.temperature, &mut rng),
            };
            tokens.push(next as u16);
            if tokens.len() < total_len {
                logits = dec.push(next as u16)?;
            }
        }
        Ok(tokens)
    }

    pub fn save<W: Write>(&self, out: W) -> Result<(), ForecastError> {
        Ok(checkpoint::write(out, &self.params, CHECKPOINT_TAG)?)
    }

    pub fn load<R: Read>(config: ForecasterConfig, input: R) -> Result<Self, ForecastError> {
        let mut model = Self::new(config)?;
        let records = checkpoint::read(input)?;
        checkpoint::load_into(&records, &mut model.params, CHECKPOINT_TAG)?;
        Ok(model)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn sample_logits<R: Rng>(logits: &[f32], temperature: f64, rng: &mut R) -> usize {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let weights: Vec<f64> = logits.iter().map(|&l| ((l as f64 - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    logits.len() - 1
}

/// Single-sequence decoder that caches per-layer keys and values so each new
/// token costs one position of work.
pub struct IncrementalDecoder<'a> {
    model: &'a Forecaster,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

fn affine(x: &[f32], p: &ParamStore<f32>, lin: &Linear) -> Vec<f32> {
    let w = p.get(lin.weight);
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = p.get(lin.bias).data().to_vec();
    gemm(MatView::row_major(x, 0, 1, k), MatView::row_major(w.data(), 0, k, n), &mut out, 0, true);
    out
}

fn layer_norm(x: &[f32], p: &ParamStore<f32>, ln: &LayerNorm) -> Vec<f32> {
    let n = x.len() as f32;
    let mean = x.iter().copied().sum::<f32>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let rstd = 1.0 / (var + LayerNorm::EPS as f32).sqrt();
    let (g, b) = (p.get(ln.gamma).data(), p.get(ln.beta).data());
    x.iter().enumerate().map(|(j, &v)| (v - mean) * rstd * g[j] + b[j]).collect()
}

fn gelu(v: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let u = C * (v + 0.044_715 * v * v * v);
    0.5 * v * (2.0 - 2.0 / ((2.0 * u).exp() + 1.0))
}

impl<'a> IncrementalDecoder<'a> {
    pub fn new(model: &'a Forecaster) -> Self {
        let layers = model.blocks.len();
        Self { model, keys: vec![Vec::new(); layers], values: vec![Vec::new(); layers], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `token` and returns the logits for the following position.
    pub fn push(&mut self, token: u16) -> Result<Vec<f32>, ForecastError> {
        let m = self.model;
        let cfg = &m.config;
        if self.len >= cfg.max_len {
            return Err(ForecastError::ContextOverflow { needed: self.len + 1, max_len: cfg.max_len });
        }
        if token as usize >= cfg.vocab {
            return Err(ForecastError::TokenOutOfVocabulary { token: token as usize, vocab: cfg.vocab });
        }
        let p = &m.params;
        let d = cfg.d_model;
        let dh = d / cfg.heads;
        let tok = &p.get(m.token_embedding).data()[token as usize * d..(token as usize + 1) * d];
        let pos = &p.get(m.position_embedding).data()[self.len * d..(self.len + 1) * d];
        let mut x: Vec<f32> = tok.iter().zip(pos).map(|(a, b)| a + b).collect();
        let t = self.len + 1;
        let scale = 1.0 / (dh as f32).sqrt();
        for (li, b) in m.blocks.iter().enumerate() {
            let h = layer_norm(&x, p, &b.norm1);
            let q = affine(&h, p, &b.attention.query);
            self.keys[li].extend(affine(&h, p, &b.attention.key));
            self.values[li].extend(affine(&h, p, &b.attention.value));
            let (keys, values) = (&self.keys[li], &self.values[li]);
            let mut ctx = vec![0.0f32; d];
            let mut scores = vec![0.0f32; t];
            for head in 0..cfg.heads {
                let qh = &q[head * dh..(head + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kh = &keys[j * d + head * dh..j * d + (head + 1) * dh];
                    *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
                let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0.0;
                for s in &mut scores {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let out = &mut ctx[head * dh..(head + 1) * dh];
                for (j, s) in scores.iter().enumerate() {
                    let w = s / total;
                    let vh = &values[j * d + head * dh..j * d + (head + 1) * dh];
                    out.iter_mut().zip(vh).for_each(|(o, v)| *o += w * v);
                }
            }
            let attn = affine(&ctx, p, &b.attention.output);
            x.iter_mut().zip(&attn).for_each(|(a, b)| *a += b);
            let h = layer_norm(&x, p, &b.norm2);
            let f: Vec<f32> = affine(&h, p, &b.ff_in).into_iter().map(gelu).collect();
            let f = affine(&f, p, &b.ff_out);
            x.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        }
        self.len = t;
        let x = layer_norm(&x, p, &m.final_norm);
        Ok(affine(&x, p, &m.head))
    }
}

/// Inputs and loss targets for teacher forcing: the model reads all but the
/// last token and is scored on every token after the conditioning frame.
fn teacher_forcing(seq: &[u16]) -> (&[u16], Vec<Option<usize>>) {
    let input = &seq[..seq.len() - 1];
    let targets = (0..input.len())
        .map(|t| (t + 1 >= GRID_TOKENS).then(|| seq[t + 1] as usize))
        .collect();
    (input, targets)
}

fn check_dataset(model: &Forecaster, seqs: &[TokenSequence]) -> Result<usize, ForecastError> {
    let len = seqs.first().ok_or(ForecastError::EmptyDataset)?.tokens.len();
    if len % GRID_TOKENS != 0 || len < 2 * GRID_TOKENS {
        return Err(ForecastError::Sequence(format!("length {len} is not a whole number of frames >= 2")));
    }
    if seqs.iter().any(|s| s.tokens.len() != len) {
        return Err(ForecastError::Sequence("sequences differ in length".into()));
    }
    if len > model.config.max_len {
        return Err(ForecastError::ContextOverflow { needed: len, max_len: model.config.max_len });
    }
    Ok(len)
}

/// Percentage of post-conditioning positions whose argmax prediction equals
/// the ground-truth token.
pub fn accuracy(model: &Forecaster, validation: &[TokenSequence]) -> Result<f64, ForecastError> {
    check_dataset(model, validation)?;
    let (mut hits, mut total) = (0usize, 0usize);
    let vocab = model.config.vocab;
    for chunk in validation.chunks(model.config.batch_size) {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, false);
        let inputs: Vec<&[u16]> = chunk.iter().map(|s| teacher_forcing(&s.tokens).0).collect();
        let logits = model.forward_tape(&mut tape, &p, &inputs)?;
        let rows = tape.value(logits).data().chunks(vocab);
        let targets = chunk.iter().flat_map(|s| teacher_forcing(&s.tokens).1);
        for (row, target) in rows.zip(targets) {
            if let Some(target) = target {
                total += 1;
                hits += usize::from(argmax(row) == target);
            }
        }
    }
    Ok(100.0 * hits as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: f64,
    /// Validation accuracy in percent.
    pub accuracy: f64,
}

impl TrainLogEntry {
    pub fn line(&self) -> String {
        format!("step {} loss {:.6} acc {:.4}", self.step, self.loss, self.accuracy)
    }
}

#[derive(Clone, Debug)]
pub struct ForecasterTraining {
    pub model: Forecaster,
    pub log: Vec<TrainLogEntry>,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
    pub validation_accuracy: f64,
}

/// Seeded split of location indices into (train, validation).
pub fn split_locations(count: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let n_val = if val_fraction > 0.0 && count >= 2 {
        ((count as f64 * val_fraction).round() as usize).clamp(1, count - 1)
    } else {
        0
    };
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Teacher-forced cross-entropy training with Adam. `on_log` sees every log
/// entry as it is produced.
pub fn train_forecaster(
    dataset: &[TokenSequence],
    config: &ForecasterConfig,
    mut on_log: impl FnMut(&TrainLogEntry),
) -> Result<ForecasterTraining, ForecastError> {
    let mut model = Forecaster::new(config.clone())?;
    check_dataset(&model, dataset)?;
    let (train_idx, val_idx) = split_locations(dataset.len(), config.val_fraction, config.seed);
    let validation: Vec<TokenSequence> = if val_idx.is_empty() {
        train_idx.iter().map(|&i| dataset[i].clone()).collect()
    } else {
        val_idx.iter().map(|&i| dataset[i].clone()).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = AdamState::new(&model.params, AdamConfig::with_lr(config.lr));
    let mut order = train_idx.clone();
    let mut cursor = order.len();
    let batch = config.batch_size.min(order.len());
    let mut log = Vec::new();
    for step in 0..config.steps {
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let mut inputs = Vec::with_capacity(batch);
        let mut targets = Vec::new();
        for &i in &picked {
            let (input, tgt) = teacher_forcing(&dataset[i].tokens);
            inputs.push(input);
            targets.extend(tgt);
        }
        let logits = model.forward_tape(&mut tape, &p, &inputs)?;
        let loss = tape.cross_entropy(logits, &targets)?;
        tape.backward(loss)?;
        let loss_value = tape.value(loss).item() as f64;
        let mut grads: Vec<Option<Vec<f32>>> =
            model.params.grads(&tape, &p).into_iter().map(|g| g.map(<[f32]>::to_vec)).collect();
        clip_gradients(&mut grads, config.clip_norm);
        adam.config.lr = config.lr_at(step);
        let views: Vec<Option<&[f32]>> = grads.iter().map(|g| g.as_deref()).collect();
        adam_step(&mut model.params, &views, &mut adam)?;
        if (step + 1) % config.eval_every == 0 || step + 1 == config.steps {
            let entry = TrainLogEntry { step: step + 1, loss: loss_value, accuracy: accuracy(&model, &validation)? };
            on_log(&entry);
            log.push(entry);
        }
    }
    let validation_accuracy = match log.last() {
        Some(e) => e.accuracy,
        None => accuracy(&model, &validation)?,
    };
    Ok(ForecasterTraining { model, log, train_indices: train_idx, validation_indices: val_idx, validation_accuracy })
}

fn clip_gradients(grads: &mut [Option<Vec<f32>>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().flatten().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().flatten().flatten().for_each(|g| *g *= s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::permutation_cycle_dataset;

    fn small(layers: usize, heads: usize, d_model: usize) -> ForecasterConfig {
        ForecasterConfig { layers, heads, d_model, max_len: 64, vocab: 32, ..Default::default() }
    }

    fn tokens(n: usize, vocab: u16, seed: u64) -> Vec<u16> {
        let mut s = seed | 1;
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s % vocab as u64) as u16
            })
            .collect()
    }

    #[test]
    fn later_tokens_do_not_change_earlier_logits() {
        let model = Forecaster::new(small(2, 4, 32)).unwrap();
        let a = tokens(20, 32, 1);
        let base = model.forward_logits(&a).unwrap();
        for t in [0, 7, 18] {
            let mut b = a.clone();
            b[t + 1] = (b[t + 1] + 1) % 32;
            let other = model.forward_logits(&b).unwrap();
            let rows = (t + 1) * 32;
            assert_eq!(&base.data()[..rows], &other.data()[..rows], "changed at {}", t + 1);
            assert_ne!(&base.data()[rows..], &other.data()[rows..]);
        }
    }

    #[test]
    fn cached_decoder_matches_full_forward() {
        let model = Forecaster::new(small(3, 2, 16)).unwrap();
        let seq = tokens(40, 32, 2);
        let full = model.forward_logits(&seq).unwrap();
        let mut dec = IncrementalDecoder::new(&model);
        for (t, &tok) in seq.iter().enumerate() {
            let row = dec.push(tok).unwrap();
            for (a, b) in row.iter().zip(&full.data()[t * 32..(t + 1) * 32]) {
                assert!((a - b).abs() <= 1e-5, "position {t}: {a} vs {b}");
            }
        }
        assert_eq!(dec.len(), 40);
    }

    #[test]
    fn greedy_decoding_is_idempotent() {
        let model = Forecaster::new(small(2, 2, 16)).unwrap();
        let initial = LatentGrid::new(&tokens(16, 32, 3).iter().map(|&t| t as usize).collect::<Vec<_>>(), 32).unwrap();
        let sampler = SamplerConfig::default();
        let out = model.predict(&initial, 2, &sampler).unwrap();
        assert_eq!(out.tokens.len(), 48);
        assert_eq!(&out.tokens[..16], initial.indices());
        for cut in [16, 20, 33, 47] {
            assert_eq!(model.continue_tokens(&out.tokens[..cut], 48, &sampler).unwrap(), out.tokens);
        }
        let hot = SamplerConfig { mode: SamplingMode::Temperature, temperature: 1.0, seed: 4 };
        assert_eq!(model.predict(&initial, 2, &hot).unwrap(), model.predict(&initial, 2, &hot).unwrap());
    }

    #[test]
    fn context_and_vocabulary_limits() {
        let model = Forecaster::new(small(1, 1, 8)).unwrap();
        let initial = LatentGrid::uniform(0);
        assert!(matches!(model.predict(&initial, 4, &SamplerConfig::default()), Err(ForecastError::ContextOverflow { .. })));
        assert!(matches!(model.forward_logits(&[40]), Err(ForecastError::TokenOutOfVocabulary { .. })));
        let cold = SamplerConfig { mode: SamplingMode::Temperature, temperature: 0.0, seed: 0 };
        assert!(model.predict(&initial, 1, &cold).is_err());
        assert!(Forecaster::new(ForecasterConfig { d_model: 30, heads: 4, ..small(1, 1, 8) }).is_err());
    }

    #[test]
    fn teacher_forcing_scores_only_later_frames() {
        let seq: Vec<u16> = (0..48).collect();
        let (input, targets) = teacher_forcing(&seq);
        assert_eq!(input.len(), 47);
        assert!(targets[..15].iter().all(Option::is_none));
        assert_eq!(targets[15], Some(16));
        assert_eq!(targets[46], Some(47));
    }

    #[test]
    fn schedule_and_split() {
        let cfg = ForecasterConfig { lr: 1.0, warmup_steps: 10, final_lr_ratio: 0.1, steps: 110, ..Default::default() };
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(60) - 0.55).abs() < 1e-12);
        assert!((cfg.lr_at(110) - 0.1).abs() < 1e-12);
        let (train, val) = split_locations(169, 0.1, 5);
        assert_eq!(val.len(), 17);
        assert_eq!(train.len() + val.len(), 169);
        assert!(val.iter().all(|v| !train.contains(v)));
        assert_eq!(split_locations(169, 0.1, 5), (train, val));
        assert!(split_locations(9, 0.0, 5).1.is_empty());
    }

    #[test]
    fn dataset_from_stream() {
        let stream = TokenStream { codebook_size: 8, grids: vec![vec![LatentGrid::uniform(1), LatentGrid::uniform(2)]; 3] };
        let data = build_dataset(&stream, &[(0, 0), (4, 0), (8, 0)]).unwrap();
        assert_eq!(data.len(), 3);
        assert_eq!(data[1].location, (4, 0));
        assert_eq!(data[1].frame(1), &[2; 16]);
        let ragged = TokenStream { codebook_size: 8, grids: vec![vec![LatentGrid::uniform(1); 2], vec![LatentGrid::uniform(1)]] };
        assert!(build_dataset(&ragged, &[(0, 0), (1, 0)]).is_err());
    }

    #[test]
    fn untrained_model_is_at_chance() {
        let cfg = ForecasterConfig { layers: 2, heads: 2, d_model: 16, max_len: 128, ..Default::default() };
        let model = Forecaster::new(cfg).unwrap();
        let data: Vec<TokenSequence> =
            (0..100).map(|l| TokenSequence { tokens: tokens(128, 256, 1000 + l), location: (l as usize, 0) }).collect();
        // 100 locations x 112 scored positions.
        let acc = accuracy(&model, &data).unwrap();
        assert!((acc - 100.0 / 256.0).abs() <= 0.3, "accuracy {acc}");
    }

    #[test]
    fn memorizes_a_small_cycle_dataset() {
        let (data, _) = permutation_cycle_dataset(4, 3, 32, 1);
        let cfg = ForecasterConfig {
            vocab: 32,
            layers: 2,
            heads: 2,
            d_model: 32,
            max_len: 48,
            lr: 3e-3,
            warmup_steps: 20,
            final_lr_ratio: 0.1,
            batch_size: 4,
            steps: 300,
            val_fraction: 0.0,
            eval_every: 100,
            ..Default::default()
        };
        let run = train_forecaster(&data, &cfg, |_| {}).unwrap();
        assert_eq!(run.log.len(), 3);
        assert_eq!(run.validation_accuracy, 100.0);
        let again = train_forecaster(&data, &ForecasterConfig { steps: 3, eval_every: 1, ..cfg.clone() }, |_| {}).unwrap();
        let twice = train_forecaster(&data, &ForecasterConfig { steps: 3, eval_every: 1, ..cfg }, |_| {}).unwrap();
        assert_eq!(again.log, twice.log);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Forecaster::new(small(1, 2, 8)).unwrap();
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let loaded = Forecaster::load(small(1, 2, 8), buf.as_slice()).unwrap();
        assert_eq!(loaded.params(), model.params());
        assert!(Forecaster::load(small(2, 2, 8), buf.as_slice()).is_err());
    }
}
