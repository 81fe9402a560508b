//! Patch codec: convolutional encoder, nearest-entry quantizer and decoder,
//! trained on the reconstruction, codebook and commitment losses.
//!
//! A `16 x 16 x C` patch maps to a `4 x 4 x D` latent whose cells are
//! replaced by their nearest codebook entries; the 16 entry indices form the
//! patch's [`LatentGrid`].

pub mod tokens;

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural::checkpoint::{self, CheckpointError};
use crate::neural::layers::Conv;
use crate::neural::{adam_step, AdamConfig, AdamState, Bound, NeuralError, ParamId, ParamStore, Tape, Tensor, Var};
pub use tokens::{LatentGrid, TokenError, TokenStream, GRID_SIDE, GRID_TOKENS};

pub const CHECKPOINT_TAG: &str = "vqvae/";
/// Side length of the patches the codec accepts.
pub const PATCH_SIDE: usize = 16;

#[derive(Debug, Error)]
pub enum VqvaeError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tokens(#[from] TokenError),
    #[error("invalid VQ-VAE config: {0}")]
    Config(String),
    #[error("patch has {found} values, expected {expected} (16x16x{channels})")]
    PatchDims { expected: usize, found: usize, channels: usize },
    #[error("latent width {found} does not match codebook width {expected}")]
    LatentDims { expected: usize, found: usize },
    #[error("codebook needs at least 2 finite entries")]
    Codebook,
    #[error("no training patches")]
    EmptyDataset,
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqvaeConfig {
    pub codebook_size: usize,
    pub embedding_dim: usize,
    /// Channel width of the convolutional trunk.
    pub hidden: usize,
    /// Bottleneck width inside residual blocks.
    pub residual_hidden: usize,
    pub beta: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for VqvaeConfig {
    fn default() -> Self {
        Self {
            codebook_size: 256,
            embedding_dim: 64,
            hidden: 64,
            residual_hidden: 32,
            beta: 0.25,
            lr: 1e-3,
            steps: 3000,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl VqvaeConfig {
    pub fn validate(&self) -> Result<(), VqvaeError> {
        let bad = |m: &str| Err(VqvaeError::Config(m.to_string()));
        if self.codebook_size < 2 || self.codebook_size > u16::MAX as usize + 1 {
            return bad("codebook_size must be in [2, 65536]");
        }
        if self.embedding_dim == 0 || self.hidden == 0 || self.residual_hidden == 0 {
            return bad("widths must be positive");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and non-negative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

/// The `Θ x D` embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    size: usize,
    dim: usize,
    entries: Vec<f32>,
}

impl Codebook {
    pub fn new(size: usize, dim: usize, entries: Vec<f32>) -> Result<Self, VqvaeError> {
        if size < 2 || dim == 0 || entries.len() != size * dim || entries.iter().any(|v| !v.is_finite()) {
            return Err(VqvaeError::Codebook);
        }
        Ok(Self { size, dim, entries })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, index: usize) -> &[f32] {
        &self.entries[index * self.dim..(index + 1) * self.dim]
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    /// Index of the entry nearest to `z` in squared Euclidean distance; the
    /// lowest index wins ties.
    pub fn nearest(&self, z: &[f32]) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, e) in self.entries.chunks_exact(self.dim).enumerate() {
            let mut dist = 0.0f64;
            for (&a, &b) in z.iter().zip(e) {
                let d = f64::from(a) - f64::from(b);
                dist += d * d;
            }
            if dist < best_dist {
                best = i;
                best_dist = dist;
            }
        }
        best
    }
}

/// Replaces every `D`-wide row of `z_e` (any leading shape) with its nearest
/// codebook entry, returning the quantized tensor and the row indices.
pub fn quantize(z_e: &Tensor<f32>, codebook: &Codebook) -> Result<(Tensor<f32>, Vec<usize>), VqvaeError> {
    let found = *z_e.shape().last().unwrap_or(&0);
    if found != codebook.dim {
        return Err(VqvaeError::LatentDims { expected: codebook.dim, found });
    }
    let indices: Vec<usize> = z_e.data().chunks_exact(found).map(|row| codebook.nearest(row)).collect();
    let mut data = Vec::with_capacity(z_e.numel());
    for &i in &indices {
        data.extend_from_slice(codebook.entry(i));
    }
    Ok((Tensor::new(z_e.shape(), data)?, indices))
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    inner: Conv,
    outer: Conv,
}

impl ResBlock {
    fn new(store: &mut ParamStore<f32>, name: &str, width: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            inner: Conv::new(store, &format!("{name}.conv3"), width, hidden, 3, 1, 1, false, rng),
            outer: Conv::new(store, &format!("{name}.conv1"), hidden, width, 1, 1, 0, false, rng),
        }
    }

    /// `x + conv1(relu(conv3(relu(x))))`
    fn forward(&self, tape: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Var, NeuralError> {
        let h = tape.relu(x)?;
        let h = self.inner.forward(tape, p, h)?;
        let h = tape.relu(h)?;
        let h = self.outer.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    down1: Conv,
    down2: Conv,
    blocks: [ResBlock; 3],
    project: Conv,
}

#[derive(Clone, Debug)]
struct Decoder {
    expand: Conv,
    blocks: [ResBlock; 3],
    up1: Conv,
    up2: Conv,
}

/// Tape handles of one loss evaluation.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub total: Var,
    pub recon: Var,
    pub codebook: Var,
    pub commit: Var,
    /// Encoder output rows `[N * 16, D]`.
    pub z_e: Var,
    /// Selected codebook rows `[N * 16, D]`.
    pub z_q: Var,
    /// Reconstruction `[N, C, 16, 16]`.
    pub x_hat: Var,
    pub indices: Vec<usize>,
}

/// Scalar values of the three loss terms and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
}

/// Which loss terms enter the total; all of them by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub recon: bool,
    pub codebook: bool,
    pub commit: bool,
}

impl LossTerms {
    pub const ALL: Self = Self { recon: true, codebook: true, commit: true };
}

#[derive(Clone, Debug)]
pub struct Vqvae {
    config: VqvaeConfig,
    channels: usize,
    params: ParamStore<f32>,
    encoder: Encoder,
    decoder: Decoder,
    codebook: ParamId,
}

impl Vqvae {
    pub fn new(config: VqvaeConfig, channels: usize) -> Result<Self, VqvaeError> {
        config.validate()?;
        if channels == 0 {
            return Err(VqvaeError::Config("channels must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (h, r, d) = (config.hidden, config.residual_hidden, config.embedding_dim);
        let s = &mut store;
        let encoder = Encoder {
            down1: Conv::new(s, "enc.down1", channels, h, 4, 2, 1, false, &mut rng),
            down2: Conv::new(s, "enc.down2", h, h, 4, 2, 1, false, &mut rng),
            blocks: [0, 1, 2].map(|i| ResBlock::new(s, &format!("enc.res{i}"), h, r, &mut rng)),
            project: Conv::new(s, "enc.project", h, d, 1, 1, 0, false, &mut rng),
        };
        let decoder = Decoder {
            expand: Conv::new(s, "dec.expand", d, h, 3, 1, 1, false, &mut rng),
            blocks: [0, 1, 2].map(|i| ResBlock::new(s, &format!("dec.res{i}"), h, r, &mut rng)),
            up1: Conv::new(s, "dec.up1", h, h, 4, 2, 1, true, &mut rng),
            up2: Conv::new(s, "dec.up2", h, channels, 4, 2, 1, true, &mut rng),
        };
        let codebook = s.add_normal("codebook", &[config.codebook_size, d], 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(Self { config, channels, params: store, encoder, decoder, codebook })
    }

    pub fn config(&self) -> &VqvaeConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn codebook(&self) -> Codebook {
        let t = self.params.get(self.codebook);
        Codebook { size: t.shape()[0], dim: t.shape()[1], entries: t.data().to_vec() }
    }

    fn patch_len(&self) -> usize {
        PATCH_SIDE * PATCH_SIDE * self.channels
    }

    /// Stacks `16 x 16 x C` row-major patches into an `[N, C, 16, 16]` tensor.
    pub fn batch_tensor(&self, patches: &[&[f64]]) -> Result<Tensor<f32>, VqvaeError> {
        let (c, n, plane) = (self.channels, self.patch_len(), PATCH_SIDE * PATCH_SIDE);
        let mut data = vec![0.0f32; patches.len() * n];
        for (b, patch) in patches.iter().enumerate() {
            if patch.len() != n {
                return Err(VqvaeError::PatchDims { expected: n, found: patch.len(), channels: c });
            }
            let out = &mut data[b * n..(b + 1) * n];
            for (i, &v) in patch.iter().enumerate() {
                out[(i % c) * plane + i / c] = v as f32;
            }
        }
        Ok(Tensor::new(&[patches.len(), c, PATCH_SIDE, PATCH_SIDE], data)?)
    }

    fn encode_tape(&self, tape: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Var, NeuralError> {
        let e = &self.encoder;
        let h = e.down1.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        let h = e.down2.forward(tape, p, h)?;
        let mut h = tape.relu(h)?;
        for b in &e.blocks {
            h = b.forward(tape, p, h)?;
        }
        let h = tape.relu(h)?;
        let z = e.project.forward(tape, p, h)?;
        // [N, D, 4, 4] -> [N * 16, D]
        let n = tape.shape(z)[0];
        let z = tape.permute(z, &[0, 2, 3, 1])?;
        tape.reshape(z, &[n * GRID_TOKENS, self.config.embedding_dim])
    }

    fn decode_tape(&self, tape: &mut Tape<f32>, p: &Bound, z: Var) -> Result<Var, NeuralError> {
        let n = tape.shape(z)[0] / GRID_TOKENS;
        let z = tape.reshape(z, &[n, GRID_SIDE, GRID_SIDE, self.config.embedding_dim])?;
        let z = tape.permute(z, &[0, 3, 1, 2])?;
        let d = &self.decoder;
        let mut h = d.expand.forward(tape, p, z)?;
        for b in &d.blocks {
            h = b.forward(tape, p, h)?;
        }
        let h = tape.relu(h)?;
        let h = d.up1.forward(tape, p, h)?;
        let h = tape.relu(h)?;
        d.up2.forward(tape, p, h)
    }

    /// Records the full loss graph for a batch `x: [N, C, 16, 16]`.
    pub fn loss_graph(&self, tape: &mut Tape<f32>, p: &Bound, x: Var, terms: LossTerms) -> Result<LossGraph, VqvaeError> {
        let z_e = self.encode_tape(tape, p, x)?;
        let codebook = self.codebook();
        let indices: Vec<usize> = tape.value(z_e).data().chunks_exact(codebook.dim).map(|r| codebook.nearest(r)).collect();
        let z_q = tape.embedding(p.get(self.codebook), &indices)?;
        // Straight-through: forward uses z_q, backward copies the gradient to z_e.
        let gap = tape.sub(z_q, z_e)?;
        let gap = tape.stop_gradient(gap);
        let z_st = tape.add(z_e, gap)?;
        let x_hat = self.decode_tape(tape, p, z_st)?;
        let recon = mean_square(tape, x, x_hat)?;
        let z_e_sg = tape.stop_gradient(z_e);
        let codebook_term = mean_square(tape, z_e_sg, z_q)?;
        let z_q_sg = tape.stop_gradient(z_q);
        let commit = mean_square(tape, z_q_sg, z_e)?;
        let beta_commit = tape.scale(commit, self.config.beta)?;
        let mut parts = Vec::new();
        if terms.recon {
            parts.push(recon);
        }
        if terms.codebook {
            parts.push(codebook_term);
        }
        if terms.commit {
            parts.push(beta_commit);
        }
        let mut total = match parts.first() {
            Some(&v) => v,
            None => tape.scale(recon, 0.0)?,
        };
        for &v in &parts[1..] {
            total = tape.add(total, v)?;
        }
        Ok(LossGraph { total, recon, codebook: codebook_term, commit, z_e, z_q, x_hat, indices })
    }

    /// Loss terms averaged over the batch, without gradients.
    pub fn loss(&self, patches: &[&[f64]]) -> Result<LossValues, VqvaeError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(self.batch_tensor(patches)?);
        let g = self.loss_graph(&mut tape, &p, x, LossTerms::ALL)?;
        let v = |var: Var| f64::from(tape.value(var).item());
        Ok(LossValues { total: v(g.total), recon: v(g.recon), codebook: v(g.codebook), commit: v(g.commit) })
    }

    /// Encoder output `[N, 4, 4, D]` per patch.
    pub fn encode(&self, patches: &[&[f64]]) -> Result<Tensor<f32>, VqvaeError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(self.batch_tensor(patches)?);
        let z = self.encode_tape(&mut tape, &p, x)?;
        let n = patches.len();
        Ok(tape.value(z).clone().reshaped(&[n, GRID_SIDE, GRID_SIDE, self.config.embedding_dim])?)
    }

    /// Decodes `[N, 4, 4, D]` latents into `16 x 16 x C` row-major patches
    /// (unclamped).
    pub fn decode(&self, z_q: &Tensor<f32>) -> Result<Vec<Vec<f32>>, VqvaeError> {
        let d = self.config.embedding_dim;
        let found = *z_q.shape().last().unwrap_or(&0);
        if found != d || z_q.numel() % (GRID_TOKENS * d) != 0 {
            return Err(VqvaeError::LatentDims { expected: d, found });
        }
        let n = z_q.numel() / (GRID_TOKENS * d);
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let z = tape.constant(z_q.clone().reshaped(&[n * GRID_TOKENS, d])?);
        let out = self.decode_tape(&mut tape, &p, z)?;
        Ok(self.unstack(tape.value(out).data(), n))
    }

    fn unstack(&self, data: &[f32], n: usize) -> Vec<Vec<f32>> {
        let (c, plane) = (self.channels, PATCH_SIDE * PATCH_SIDE);
        (0..n)
            .map(|b| {
                let src = &data[b * c * plane..(b + 1) * c * plane];
                (0..plane * c).map(|i| src[(i % c) * plane + i / c]).collect()
            })
            .collect()
    }

    /// Latent grid of every patch, batched internally.
    pub fn encode_to_grids(&self, patches: &[&[f64]]) -> Result<Vec<LatentGrid>, VqvaeError> {
        let codebook = self.codebook();
        let mut grids = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(256) {
            let z = self.encode(chunk)?;
            let (_, indices) = quantize(&z, &codebook)?;
            for cells in indices.chunks_exact(GRID_TOKENS) {
                grids.push(LatentGrid::new(cells, codebook.size)?);
            }
        }
        Ok(grids)
    }

    /// Codebook rows for every cell, shaped `[N, 4, 4, D]`.
    pub fn lookup(&self, grids: &[LatentGrid]) -> Result<Tensor<f32>, VqvaeError> {
        let codebook = self.codebook();
        let mut data = Vec::with_capacity(grids.len() * GRID_TOKENS * codebook.dim);
        for g in grids {
            for i in g.iter() {
                if i >= codebook.size {
                    return Err(TokenError::IndexOutOfRange { index: i, codebook_size: codebook.size }.into());
                }
                data.extend_from_slice(codebook.entry(i));
            }
        }
        Ok(Tensor::new(&[grids.len(), GRID_SIDE, GRID_SIDE, codebook.dim], data)?)
    }

    /// Decoded patches for latent grids, clamped into `[0, 1]`.
    pub fn indices_to_patches(&self, grids: &[LatentGrid]) -> Result<Vec<Vec<f64>>, VqvaeError> {
        let mut out = Vec::with_capacity(grids.len());
        for chunk in grids.chunks(256) {
            for patch in self.decode(&self.lookup(chunk)?)? {
                out.push(patch.into_iter().map(|v| f64::from(v).clamp(0.0, 1.0)).collect());
            }
        }
        Ok(out)
    }

    pub fn indices_to_patch(&self, grid: &LatentGrid) -> Result<Vec<f64>, VqvaeError> {
        Ok(self.indices_to_patches(std::slice::from_ref(grid))?.remove(0))
    }

    /// Mean squared error of clamped reconstructions through the quantizer.
    pub fn reconstruction_mse(&self, patches: &[&[f64]]) -> Result<f64, VqvaeError> {
        if patches.is_empty() {
            return Err(VqvaeError::EmptyDataset);
        }
        let grids = self.encode_to_grids(patches)?;
        let decoded = self.indices_to_patches(&grids)?;
        let mut sum = 0.0;
        let mut count = 0usize;
        for (a, b) in patches.iter().zip(&decoded) {
            sum += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            count += a.len();
        }
        Ok(sum / count as f64)
    }

    /// How often each codebook entry is selected over `patches`.
    pub fn usage(&self, patches: &[&[f64]]) -> Result<Vec<usize>, VqvaeError> {
        let mut counts = vec![0; self.config.codebook_size];
        for g in self.encode_to_grids(patches)? {
            g.iter().for_each(|i| counts[i] += 1);
        }
        Ok(counts)
    }

    pub fn save<W: Write>(&self, out: W) -> Result<(), VqvaeError> {
        Ok(checkpoint::write(out, &self.params, CHECKPOINT_TAG)?)
    }

    pub fn load<R: Read>(config: VqvaeConfig, channels: usize, input: R) -> Result<Self, VqvaeError> {
        let mut model = Self::new(config, channels)?;
        let records = checkpoint::read(input)?;
        checkpoint::load_into(&records, &mut model.params, CHECKPOINT_TAG)?;
        Ok(model)
    }
}

fn mean_square(tape: &mut Tape<f32>, a: Var, b: Var) -> Result<Var, NeuralError> {
    let d = tape.sub(a, b)?;
    let n = tape.value(d).numel();
    let s = tape.sum_squares(d)?;
    tape.scale(s, 1.0 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VqvaeLogEntry {
    pub step: usize,
    pub loss: LossValues,
}

impl VqvaeLogEntry {
    pub fn line(&self) -> String {
        let l = &self.loss;
        format!("step {} total {:.6} recon {:.6} codebook {:.6} commit {:.6}", self.step, l.total, l.recon, l.codebook, l.commit)
    }
}

#[derive(Clone, Debug)]
pub struct VqvaeTraining {
    pub model: Vqvae,
    /// One entry per step.
    pub log: Vec<VqvaeLogEntry>,
    /// Codebook usage over the training patches after the last step.
    pub usage: Vec<usize>,
}

/// Adam on the summed loss over seeded, reshuffled mini-batches.
pub fn train_vqvae(
    patches: &[&[f64]],
    channels: usize,
    config: &VqvaeConfig,
    mut on_step: impl FnMut(&VqvaeLogEntry),
) -> Result<VqvaeTraining, VqvaeError> {
    if patches.is_empty() {
        return Err(VqvaeError::EmptyDataset);
    }
    let mut model = Vqvae::new(config.clone(), channels)?;
    let expected = model.patch_len();
    if let Some(p) = patches.iter().find(|p| p.len() != expected) {
        return Err(VqvaeError::PatchDims { expected, found: p.len(), channels });
    }
    let mut adam = AdamState::new(&model.params, AdamConfig::with_lr(config.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(patches.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(patches[order[cursor]]);
            cursor += 1;
        }
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let x = tape.constant(model.batch_tensor(&batch)?);
        let g = model.loss_graph(&mut tape, &p, x, LossTerms::ALL)?;
        tape.backward(g.total)?;
        let v = |var: Var| f64::from(tape.value(var).item());
        let entry = VqvaeLogEntry {
            step: step + 1,
            loss: LossValues { total: v(g.total), recon: v(g.recon), codebook: v(g.codebook), commit: v(g.commit) },
        };
        let grads = model.params.grads(&tape, &p);
        match adam_step(&mut model.params, &grads, &mut adam) {
            Err(NeuralError::NonFiniteGradient { .. }) => return Err(VqvaeError::NonFiniteGradient { step: step + 1 }),
            other => other?,
        }
        on_step(&entry);
        log.push(entry);
    }
    let usage = model.usage(patches)?;
    Ok(VqvaeTraining { model, log, usage })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> VqvaeConfig {
        VqvaeConfig { codebook_size: 16, embedding_dim: 8, hidden: 8, residual_hidden: 4, ..Default::default() }
    }

    fn patch(seed: u64, channels: usize) -> Vec<f64> {
        let mut s = seed.wrapping_mul(2654435761).wrapping_add(1);
        (0..256 * channels)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s % 1000) as f64 / 1000.0
            })
            .collect()
    }

    #[test]
    fn quantize_examples() {
        let cb = Codebook::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let z = Tensor::new(&[1, 2], vec![0.9, 0.8]).unwrap();
        let (q, idx) = quantize(&z, &cb).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(q.data(), &[1.0, 1.0]);
        let mut entries = vec![5.0f32; 8 * 2];
        entries[6..8].copy_from_slice(&[1.0, 0.0]);
        entries[14..16].copy_from_slice(&[-1.0, 0.0]);
        let cb = Codebook::new(8, 2, entries).unwrap();
        let (_, idx) = quantize(&Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap(), &cb).unwrap();
        assert_eq!(idx, vec![3]);
        assert!(matches!(quantize(&Tensor::zeros(&[1, 3]), &cb), Err(VqvaeError::LatentDims { .. })));
    }

    #[test]
    fn shapes_and_determinism() {
        let model = Vqvae::new(tiny_config(), 3).unwrap();
        let x = patch(1, 3);
        let z = model.encode(&[&x]).unwrap();
        assert_eq!(z.shape(), &[1, 4, 4, 8]);
        assert_eq!(model.encode(&[&x]).unwrap(), z);
        let (q, _) = quantize(&z, &model.codebook()).unwrap();
        let out = model.decode(&q).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].len(), 16 * 16 * 3);
        assert_eq!(model.decode(&q).unwrap(), out);
        assert!(matches!(model.encode(&[&x[..10]]), Err(VqvaeError::PatchDims { .. })));
    }

    #[test]
    fn lookup_is_table_indexing() {
        let model = Vqvae::new(tiny_config(), 1).unwrap();
        let cb = model.codebook();
        let z = model.lookup(&[LatentGrid::uniform(5)]).unwrap();
        for cell in z.data().chunks(8) {
            assert_eq!(cell, cb.entry(5));
        }
        let (_, idx) = quantize(&z, &cb).unwrap();
        assert!(idx.iter().all(|&i| i == 5));
        let bad = LatentGrid::new(&[20; 16], 21).unwrap();
        assert!(model.lookup(&[bad]).is_err());
    }

    #[test]
    fn loss_terms_match_direct_formulas() {
        let model = Vqvae::new(tiny_config(), 1).unwrap();
        let (a, b) = (patch(3, 1), patch(4, 1));
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let x = tape.constant(model.batch_tensor(&[&a, &b]).unwrap());
        let g = model.loss_graph(&mut tape, &p, x, LossTerms::ALL).unwrap();
        let mse = |u: &[f32], v: &[f32]| {
            u.iter().zip(v).map(|(&s, &t)| (f64::from(s) - f64::from(t)).powi(2)).sum::<f64>() / u.len() as f64
        };
        let ze = tape.value(g.z_e).data();
        let cb = model.codebook();
        let zq: Vec<f32> = ze.chunks(8).flat_map(|r| cb.entry(cb.nearest(r)).to_vec()).collect();
        assert_eq!(tape.value(g.z_q).data(), zq.as_slice());
        let recon = mse(tape.value(x).data(), tape.value(g.x_hat).data());
        let quant = mse(ze, &zq);
        let item = |v: Var| f64::from(tape.value(v).item());
        assert!((item(g.recon) - recon).abs() < 1e-6);
        assert!((item(g.codebook) - quant).abs() < 1e-6);
        assert!((item(g.commit) - quant).abs() < 1e-6);
        assert!((item(g.total) - (recon + 1.25 * quant)).abs() < 1e-6);
        assert!(item(g.recon) >= 0.0 && item(g.codebook) >= 0.0);
    }

    #[test]
    fn zero_beta_ignores_commitment() {
        let cfg = VqvaeConfig { beta: 0.0, ..tiny_config() };
        let model = Vqvae::new(cfg, 1).unwrap();
        let x = patch(5, 1);
        let l = model.loss(&[&x]).unwrap();
        assert!(l.commit > 0.0);
        assert!((l.total - (l.recon + l.codebook)).abs() < 1e-6);
    }

    fn grads_for(model: &Vqvae, terms: LossTerms) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let x = patch(9, 1);
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true);
        let xv = tape.constant(model.batch_tensor(&[&x]).unwrap());
        let g = model.loss_graph(&mut tape, &p, xv, terms).unwrap();
        tape.backward(g.total).unwrap();
        let grads = model.params.grads(&tape, &p);
        let collect = |prefix: &str| -> Vec<f32> {
            model
                .params
                .iter()
                .enumerate()
                .filter(|(_, (name, _))| name.starts_with(prefix))
                .flat_map(|(i, (_, t))| grads[i].map_or_else(|| vec![0.0; t.numel()], <[f32]>::to_vec))
                .collect()
        };
        (collect("enc."), collect("dec."), collect("codebook"))
    }

    #[test]
    fn gradient_routing() {
        let model = Vqvae::new(tiny_config(), 1).unwrap();
        let nonzero = |g: &[f32]| g.iter().any(|&v| v != 0.0);
        let zero = |g: &[f32]| g.iter().all(|&v| v == 0.0);
        let (enc, dec, cb) = grads_for(&model, LossTerms { recon: true, codebook: false, commit: false });
        assert!(nonzero(&enc) && nonzero(&dec) && zero(&cb));
        let (enc, dec, cb) = grads_for(&model, LossTerms { recon: false, codebook: true, commit: false });
        assert!(zero(&enc) && zero(&dec) && nonzero(&cb));
        let (enc, dec, cb) = grads_for(&model, LossTerms { recon: false, codebook: false, commit: true });
        assert!(nonzero(&enc) && zero(&dec) && zero(&cb));
        let (_, _, cb) = grads_for(&model, LossTerms { recon: true, codebook: false, commit: true });
        assert!(zero(&cb));
    }

    #[test]
    fn single_patch_memorization_and_determinism() {
        let x = patch(11, 1);
        let cfg = VqvaeConfig { steps: 500, lr: 2e-3, ..tiny_config() };
        let run = train_vqvae(&[&x], 1, &cfg, |_| {}).unwrap();
        assert_eq!(run.log.len(), 500);
        assert!(run.log[499].loss.recon < run.log[0].loss.recon);
        assert_eq!(run.usage.iter().sum::<usize>(), 16);
        let short = VqvaeConfig { steps: 5, ..cfg };
        let a = train_vqvae(&[&x], 1, &short, |_| {}).unwrap();
        let b = train_vqvae(&[&x], 1, &short, |_| {}).unwrap();
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Vqvae::new(tiny_config(), 3).unwrap();
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let loaded = Vqvae::load(tiny_config(), 3, buf.as_slice()).unwrap();
        assert_eq!(loaded.params(), model.params());
        assert!(Vqvae::load(tiny_config(), 1, buf.as_slice()).is_err());
    }
}
