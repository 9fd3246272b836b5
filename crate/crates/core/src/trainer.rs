//! Classification training and fine-tuning with the additive-margin head.
//!
//! Randomness never comes from a stateful generator: the data order of epoch
//! `e` and the augmentation of sample `i` in epoch `e` are pure functions of
//! `(seed, e, i)`. The resumable "PRNG state" is therefore just the seed plus
//! the `(epoch, step)` position, which the checkpoint stores.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{augment, AlignedFace, AugmentationConfig};
use crate::data::FaceDataset;
use crate::error::{Error, Result};
use crate::margin::{ArcFaceHead, MarginConfig};
use crate::nn::{Encoder, EncoderSpec, ForwardCache};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    /// Not stated by the method description; the usual value for this loss.
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: bool,
    /// Samples per parallel work unit. Fixed so results do not depend on the
    /// number of threads.
    pub chunk_size: usize,
    /// Write `checkpoints/epoch_<n>` every this many epochs; the last epoch
    /// is always written. 0 keeps only the last one.
    pub checkpoint_every: usize,
    pub encoder: EncoderSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 24,
            milestones: vec![10, 18, 22],
            lr_decay: 0.1,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            augment: true,
            chunk_size: 16,
            checkpoint_every: 1,
            encoder: EncoderSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.chunk_size == 0 {
            return Err(Error::validation("train.batch_size and train.chunk_size must be positive"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation(format!(
                "train.milestones {:?} must be strictly increasing",
                self.milestones
            )));
        }
        // An empty run has nothing to schedule.
        if self.epochs > 0 && self.milestones.iter().any(|m| *m >= self.epochs) {
            return Err(Error::validation(format!(
                "train.milestones {:?} must be below train.epochs {}",
                self.milestones, self.epochs
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::validation(format!("train.lr_decay {} outside (0, 1)", self.lr_decay)));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::validation(format!("train.base_lr {} must be >= 0", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation(format!("train.momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::validation("train.weight_decay must be >= 0"));
        }
        self.encoder.validate()
    }

    /// Multiplier applied on top of a group's base rate at `epoch`.
    fn schedule(&self, base: f64, epoch: usize) -> f64 {
        let mut lr = base;
        for _ in self.milestones.iter().filter(|m| **m <= epoch) {
            lr *= self.lr_decay;
        }
        lr
    }
}

/// `base_lr` decayed once per milestone at or before `epoch`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::validation(format!(
            "epoch {epoch} outside [0, {})",
            cfg.epochs
        )));
    }
    Ok(cfg.schedule(cfg.base_lr, epoch))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub base_lr: f64,
    pub params: usize,
}

impl ParamGroup {
    /// Group rate at `epoch` under the schedule of `cfg`.
    pub fn lr_at(&self, cfg: &TrainConfig, epoch: usize) -> f64 {
        cfg.schedule(self.base_lr, epoch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Encoder,
    pub head: ArcFaceHead,
}

impl Model {
    pub fn new(spec: &EncoderSpec, classes: usize, seed: u64) -> Result<Self> {
        let encoder = Encoder::new(spec.clone(), seed::derive(seed, "encoder"))?;
        let head = ArcFaceHead::new(classes, spec.embedding_dim, seed::derive(seed, "head"));
        Ok(Self { encoder, head })
    }

    /// Keeps the encoder and attaches a freshly initialized head.
    pub fn with_fresh_head(encoder: Encoder, classes: usize, seed: u64) -> Self {
        let head = ArcFaceHead::new(classes, encoder.embedding_dim(), seed::derive(seed, "finetune-head"));
        Self { encoder, head }
    }
}

pub fn standard_param_groups(base_lr: f64, model: &Model) -> Vec<ParamGroup> {
    vec![
        ParamGroup { name: "backbone".into(), base_lr, params: model.encoder.num_params() },
        ParamGroup { name: "head".into(), base_lr, params: model.head.weights.len() },
    ]
}

/// Backbone at `base_lr / 100`, head at `base_lr / 10`.
pub fn make_finetune_param_groups(base_lr: f64, model: &Model) -> Vec<ParamGroup> {
    vec![
        ParamGroup { name: "backbone".into(), base_lr: base_lr / 100.0, params: model.encoder.num_params() },
        ParamGroup { name: "head".into(), base_lr: base_lr / 10.0, params: model.head.weights.len() },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    /// Backbone group rate.
    pub lr: f64,
    pub head_lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
}

/// Running totals of the epoch in progress.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub step: usize,
    pub loss_sum: f64,
    pub correct: usize,
    pub seen: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub batch: usize,
}

pub struct Trainer {
    pub model: Model,
    groups: Vec<ParamGroup>,
    velocity: [Vec<f64>; 2],
    cfg: TrainConfig,
    margin: MarginConfig,
    augmentation: AugmentationConfig,
    progress: Progress,
    history: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(
        model: Model,
        groups: Vec<ParamGroup>,
        cfg: TrainConfig,
        margin: MarginConfig,
        augmentation: AugmentationConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        margin.validate()?;
        augmentation.validate()?;
        if groups.len() != 2 {
            return Err(Error::validation("expected a backbone and a head parameter group"));
        }
        if model.head.dim != model.encoder.embedding_dim() {
            return Err(Error::validation(format!(
                "head dim {} != embedding dim {}",
                model.head.dim,
                model.encoder.embedding_dim()
            )));
        }
        let velocity = [
            vec![0.0; model.encoder.num_params()],
            vec![0.0; model.head.weights.len()],
        ];
        Ok(Self {
            model,
            groups,
            velocity,
            cfg,
            margin,
            augmentation,
            progress: Progress::default(),
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn progress(&self) -> &Progress {
        &self.progress
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    pub fn is_finished(&self) -> bool {
        self.progress.epoch >= self.cfg.epochs
    }

    fn check_data(&self, data: &dyn FaceDataset) -> Result<()> {
        if data.num_classes() != self.model.head.classes {
            return Err(Error::validation(format!(
                "dataset has {} classes, head has {}",
                data.num_classes(),
                self.model.head.classes
            )));
        }
        if data.is_empty() {
            return Err(Error::validation("training dataset is empty"));
        }
        if let Some(i) = (0..data.len()).find(|i| data.label(*i) >= data.num_classes()) {
            return Err(Error::validation(format!(
                "sample {i} has label {} outside [0, {})",
                data.label(i),
                data.num_classes()
            )));
        }
        Ok(())
    }

    /// Sample order of `epoch`, shuffled with an epoch-derived seed.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let s = seed::derive_index(seed::derive(self.cfg.seed, "data-order"), epoch as u64);
        order.shuffle(&mut seed::rng(s));
        order
    }

    fn prepare(&self, data: &dyn FaceDataset, index: usize, epoch: usize) -> Result<Vec<f64>> {
        let mut image = data.image(index)?;
        if self.cfg.augment {
            let s = seed::derive_index(
                seed::derive_index(seed::derive(self.cfg.seed, "augment"), epoch as u64),
                index as u64,
            );
            image = augment(&AlignedFace::new(image)?, &self.augmentation, s)?.image;
        }
        self.model.encoder.prepare_input(&image)
    }

    /// Runs one optimizer step on the next batch. Returns the epoch summary
    /// when the step completes an epoch.
    pub fn step(&mut self, data: &dyn FaceDataset) -> Result<(StepStats, Option<EpochMetrics>)> {
        if self.is_finished() {
            return Err(Error::validation("training already finished"));
        }
        if self.progress.step == 0 && self.progress.seen == 0 {
            self.check_data(data)?;
        }
        let epoch = self.progress.epoch;
        let order = self.epoch_order(data.len(), epoch);
        let bs = self.cfg.batch_size;
        let start = self.progress.step * bs;
        let batch = &order[start..(start + bs).min(order.len())];
        let stats = self.train_batch(data, batch, epoch)?;

        let p = &mut self.progress;
        p.step += 1;
        p.loss_sum += stats.loss * stats.batch as f64;
        p.correct += stats.correct;
        p.seen += stats.batch;
        if p.step * bs < data.len() {
            return Ok((stats, None));
        }
        let metrics = EpochMetrics {
            epoch: epoch + 1,
            lr: self.groups[0].lr_at(&self.cfg, epoch),
            head_lr: self.groups[1].lr_at(&self.cfg, epoch),
            loss: p.loss_sum / p.seen as f64,
            train_accuracy: p.correct as f64 / p.seen as f64,
        };
        *p = Progress { epoch: epoch + 1, ..Progress::default() };
        self.history.push(metrics.clone());
        Ok((stats, Some(metrics)))
    }

    fn train_batch(&mut self, data: &dyn FaceDataset, batch: &[usize], epoch: usize) -> Result<StepStats> {
        let chunks: Vec<&[usize]> = batch.chunks(self.cfg.chunk_size).collect();
        let this = &*self;
        let forward: Vec<Vec<(Vec<f64>, ForwardCache)>> = chunks
            .par_iter()
            .map(|c| {
                c.iter()
                    .map(|i| Ok(this.model.encoder.forward_train(this.prepare(data, *i, epoch)?)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;

        let dim = self.model.encoder.embedding_dim();
        let flat: Vec<f64> = forward.iter().flatten().flat_map(|(e, _)| e.iter().copied()).collect();
        let emb = Array2::from_shape_vec((batch.len(), dim), flat).expect("consistent shape");
        let labels: Vec<usize> = batch.iter().map(|i| data.label(*i)).collect();
        let head = self.model.head.loss_and_grad(&emb.view(), &labels, &self.margin)?;
        if !head.loss.is_finite() || emb.iter().any(|v| !v.is_finite()) {
            let mean_norm = emb.outer_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / batch.len() as f64;
            return Err(Error::Divergence(format!(
                "epoch {} step {}: loss {}, batch {}, mean embedding norm {mean_norm}, max |logit| {}",
                epoch,
                self.progress.step,
                head.loss,
                batch.len(),
                head.max_abs_logit
            )));
        }

        let n = self.model.encoder.num_params();
        let mut offsets = Vec::with_capacity(forward.len());
        let mut acc = 0;
        for c in &forward {
            offsets.push(acc);
            acc += c.len();
        }
        let encoder = &self.model.encoder;
        let grad_emb = &head.grad_emb;
        let partial: Vec<Vec<f64>> = forward
            .par_iter()
            .zip(offsets.par_iter())
            .map(|(chunk, off)| {
                let mut g = vec![0.0; n];
                for (k, (_, cache)) in chunk.iter().enumerate() {
                    let row = grad_emb.row(off + k);
                    encoder.backward(cache, row.as_slice().expect("row-major"), &mut g);
                }
                g
            })
            .collect();
        let mut grads = vec![0.0; n];
        for g in &partial {
            grads.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }

        let (wd, mu) = (self.cfg.weight_decay, self.cfg.momentum);
        let lr_b = self.groups[0].lr_at(&self.cfg, epoch);
        let lr_h = self.groups[1].lr_at(&self.cfg, epoch);
        sgd(&mut self.model.encoder.params, &grads, &mut self.velocity[0], lr_b, mu, wd);
        let gw = head.grad_w.as_slice().expect("row-major");
        sgd(&mut self.model.head.weights, gw, &mut self.velocity[1], lr_h, mu, wd);
        Ok(StepStats { loss: head.loss, correct: head.correct, batch: batch.len() })
    }

    /// Trains until the configured epoch count, writing `metrics.jsonl` and
    /// `checkpoints/epoch_<n>` under `run_dir` when given.
    pub fn run(&mut self, data: &dyn FaceDataset, run_dir: Option<&Path>) -> Result<()> {
        self.check_data(data)?;
        if let Some(dir) = run_dir {
            self.write_metrics(dir)?;
        }
        while !self.is_finished() {
            let (_, done) = self.step(data)?;
            let (Some(m), Some(dir)) = (done, run_dir) else { continue };
            self.write_metrics(dir)?;
            let every = self.cfg.checkpoint_every;
            if self.is_finished() || (every > 0 && m.epoch % every == 0) {
                self.checkpoint().save(&checkpoint_path(dir, m.epoch))?;
            }
        }
        if let Some(dir) = run_dir {
            let last = checkpoint_path(dir, self.progress.epoch);
            if !last.exists() {
                self.checkpoint().save(&last)?;
            }
        }
        Ok(())
    }

    fn write_metrics(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = String::new();
        for m in &self.history {
            out.push_str(&serde_json::to_string(m).map_err(|e| Error::json("metrics", e))?);
            out.push('\n');
        }
        write_atomic(&dir.join("metrics.jsonl"), out.as_bytes())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            state: CheckpointState {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
                encoder: self.model.encoder.spec().clone(),
                head_classes: self.model.head.classes,
                head_dim: self.model.head.dim,
                groups: self.groups.clone(),
                train: self.cfg.clone(),
                margin: self.margin,
                augmentation: self.augmentation.clone(),
                progress: self.progress.clone(),
                history: self.history.clone(),
                tensors_sha256: String::new(),
            },
            encoder_params: self.model.encoder.params.clone(),
            head_weights: self.model.head.weights.clone(),
            velocity: self.velocity.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let s = ckpt.state;
        let encoder = Encoder::from_params(s.encoder, ckpt.encoder_params)?;
        let head = ArcFaceHead { classes: s.head_classes, dim: s.head_dim, weights: ckpt.head_weights };
        let mut t = Self::new(Model { encoder, head }, s.groups, s.train, s.margin, s.augmentation)?;
        if ckpt.velocity[0].len() != t.velocity[0].len() || ckpt.velocity[1].len() != t.velocity[1].len() {
            return Err(Error::validation("checkpoint optimizer state has the wrong size"));
        }
        t.velocity = ckpt.velocity;
        t.progress = s.progress;
        t.history = s.history;
        Ok(t)
    }
}

/// PyTorch-style SGD: `v = mu v + (g + wd p)`, `p -= lr v`.
fn sgd(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, mu: f64, wd: f64) {
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

pub const CHECKPOINT_FORMAT: &str = "synthface-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const STATE_FILE: &str = "state.json";
const TENSOR_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointState {
    pub format: String,
    pub version: u32,
    pub encoder: EncoderSpec,
    pub head_classes: usize,
    pub head_dim: usize,
    pub groups: Vec<ParamGroup>,
    pub train: TrainConfig,
    pub margin: MarginConfig,
    pub augmentation: AugmentationConfig,
    pub progress: Progress,
    pub history: Vec<EpochMetrics>,
    pub tensors_sha256: String,
}

/// A directory holding `state.json` and little-endian `f64` tensors in
/// `tensors.bin` (encoder, head, backbone velocity, head velocity).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: CheckpointState,
    pub encoder_params: Vec<f64>,
    pub head_weights: Vec<f64>,
    pub velocity: [Vec<f64>; 2],
}

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch_{epoch}"))
}

/// Highest-numbered `checkpoints/epoch_<n>` in a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    let dir = run_dir.join("checkpoints");
    std::fs::read_dir(&dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_prefix("epoch_")?.parse::<usize>().ok().map(|n| (n, e.path()))
        })
        .max_by_key(|(n, _)| *n)
        .map(|(_, p)| p)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    fn tensor_bytes(&self) -> Vec<u8> {
        let parts = [&self.encoder_params, &self.head_weights, &self.velocity[0], &self.velocity[1]];
        let mut out = Vec::with_capacity(parts.iter().map(|p| p.len() * 8).sum());
        for p in parts {
            for v in p.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Writes into `<path>.partial` and renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.tensor_bytes();
        let mut state = self.state.clone();
        state.tensors_sha256 = hex::encode(Sha256::digest(&bytes));
        let tmp = path.with_extension("partial");
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let json = serde_json::to_vec_pretty(&state).map_err(|e| Error::json("checkpoint state", e))?;
        write_atomic(&tmp.join(STATE_FILE), &json)?;
        write_atomic(&tmp.join(TENSOR_FILE), &bytes)?;
        if path.exists() {
            std::fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_dir() {
            return Err(Error::Missing(format!("checkpoint {} not found", path.display())));
        }
        let sp = path.join(STATE_FILE);
        let raw = std::fs::read(&sp).map_err(|e| Error::io(&sp, e))?;
        let state: CheckpointState =
            serde_json::from_slice(&raw).map_err(|e| Error::json(sp.display().to_string(), e))?;
        if state.format != CHECKPOINT_FORMAT || state.version != CHECKPOINT_VERSION {
            return Err(Error::validation(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                state.format,
                state.version
            )));
        }
        let tp = path.join(TENSOR_FILE);
        let bytes = std::fs::read(&tp).map_err(|e| Error::io(&tp, e))?;
        if hex::encode(Sha256::digest(&bytes)) != state.tensors_sha256 {
            return Err(Error::validation(format!("{}: tensor checksum mismatch", tp.display())));
        }
        let mut values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let enc_len = Encoder::new(state.encoder.clone(), 0)?.num_params();
        let head_len = state.head_classes * state.head_dim;
        let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
        let encoder_params = take(enc_len);
        let head_weights = take(head_len);
        let velocity = [take(enc_len), take(head_len)];
        if bytes.len() != 16 * (enc_len + head_len) || velocity[1].len() != head_len {
            return Err(Error::validation(format!("{}: tensor file has the wrong size", tp.display())));
        }
        Ok(Self { state, encoder_params, head_weights, velocity })
    }

    pub fn encoder(&self) -> Result<Encoder> {
        Encoder::from_params(self.state.encoder.clone(), self.encoder_params.clone())
    }
}

/// Trains a fresh encoder and head on `data`.
pub fn fit(
    data: &dyn FaceDataset,
    cfg: &TrainConfig,
    margin: &MarginConfig,
    augmentation: &AugmentationConfig,
    run_dir: Option<&Path>,
) -> Result<Trainer> {
    cfg.validate()?;
    let model = Model::new(&cfg.encoder, data.num_classes(), cfg.seed)?;
    let groups = standard_param_groups(cfg.base_lr, &model);
    let mut t = Trainer::new(model, groups, cfg.clone(), *margin, augmentation.clone())?;
    t.run(data, run_dir)?;
    Ok(t)
}

/// Replaces the head of a pretrained encoder and trains with the
/// fine-tuning rate split. The schedule is the regular one.
pub fn finetune(
    pretrained: &Checkpoint,
    data: &dyn FaceDataset,
    cfg: &TrainConfig,
    margin: &MarginConfig,
    augmentation: &AugmentationConfig,
    run_dir: Option<&Path>,
) -> Result<Trainer> {
    let encoder = pretrained.encoder()?;
    let cfg = TrainConfig { encoder: encoder.spec().clone(), ..cfg.clone() };
    let model = Model::with_fresh_head(encoder, data.num_classes(), cfg.seed);
    let groups = make_finetune_param_groups(cfg.base_lr, &model);
    let mut t = Trainer::new(model, groups, cfg, *margin, augmentation.clone())?;
    t.run(data, run_dir)?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{Image, ALIGNED_SIZE};
    use crate::data::InMemoryDataset;
    use crate::nn::StageSpec;

    fn tiny_spec() -> EncoderSpec {
        EncoderSpec {
            input_pool: 16,
            stem_width: 4,
            stages: vec![StageSpec { width: 4, blocks: 1 }],
            embedding_dim: 8,
        }
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs,
            milestones: vec![],
            base_lr: 0.05,
            augment: false,
            chunk_size: 3,
            encoder: tiny_spec(),
            ..TrainConfig::default()
        }
    }

    /// Two classes: bright left half versus bright right half, with noise.
    fn two_class_data(n: usize) -> InMemoryDataset {
        let mut ds = InMemoryDataset::new(vec!["left".into(), "right".into()]);
        let mut rng = seed::rng(11);
        for i in 0..n {
            let label = i % 2;
            let mut img = Image::new(ALIGNED_SIZE, ALIGNED_SIZE);
            for y in 0..ALIGNED_SIZE {
                for x in 0..ALIGNED_SIZE {
                    let bright = (x < ALIGNED_SIZE / 2) == (label == 0);
                    let base = if bright { 0.8 } else { 0.2 };
                    let v = base + rand::Rng::random_range(&mut rng, -0.1f32..0.1);
                    img.put_pixel(x, y, [v, v, v]);
                }
            }
            ds.push(&img, label).unwrap();
        }
        ds
    }

    fn quiet_margin() -> MarginConfig {
        MarginConfig { margin: 0.2, scale: 8.0, easy_margin: false }
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_epoch(&cfg, 0).unwrap(), 0.1);
        assert_eq!(lr_at_epoch(&cfg, 10).unwrap(), 0.1 * 0.1);
        assert_eq!(lr_at_epoch(&cfg, 18).unwrap(), 0.1 * 0.1 * 0.1);
        assert_eq!(lr_at_epoch(&cfg, 23).unwrap(), 0.1 * 0.1 * 0.1 * 0.1);
        assert!((lr_at_epoch(&cfg, 23).unwrap() - 1e-4).abs() < 1e-18);
        assert!(lr_at_epoch(&cfg, 24).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig { milestones: vec![10, 10], ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { milestones: vec![30], ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { lr_decay: 1.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_ok());
    }

    #[test]
    fn finetune_groups() {
        let model = Model::new(&tiny_spec(), 3, 0).unwrap();
        let g = make_finetune_param_groups(0.1, &model);
        assert_eq!(g[0].base_lr, 0.1 / 100.0);
        assert_eq!(g[1].base_lr, 0.1 / 10.0);
        assert_eq!(g[1].params, 3 * 8);
        let z = make_finetune_param_groups(0.0, &model);
        assert_eq!((z[0].base_lr, z[1].base_lr), (0.0, 0.0));
        let cfg = TrainConfig::default();
        assert_eq!(g[0].lr_at(&cfg, 10), 0.001 * 0.1);
    }

    #[test]
    fn zero_epochs_is_a_noop() {
        let data = two_class_data(8);
        let t = fit(&data, &tiny_cfg(0), &quiet_margin(), &AugmentationConfig::disabled(), None).unwrap();
        let fresh = Model::new(&tiny_spec(), 2, 0).unwrap();
        assert_eq!(t.model, fresh);
        assert!(t.history().is_empty());
    }

    #[test]
    fn loss_decreases_on_separable_task() {
        let data = two_class_data(32);
        let t = fit(&data, &tiny_cfg(5), &quiet_margin(), &AugmentationConfig::disabled(), None).unwrap();
        let losses: Vec<f64> = t.history().iter().map(|m| m.loss).collect();
        assert_eq!(losses.len(), 5);
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn runs_are_deterministic_and_chunking_invariant() {
        let data = two_class_data(20);
        let aug = AugmentationConfig::default();
        let cfg = TrainConfig { augment: true, ..tiny_cfg(2) };
        let a = fit(&data, &cfg, &quiet_margin(), &aug, None).unwrap();
        let b = fit(&data, &cfg, &quiet_margin(), &aug, None).unwrap();
        assert_eq!(a.history(), b.history());
        assert_eq!(a.model, b.model);
        let c = fit(&data, &TrainConfig { chunk_size: 8, ..cfg }, &quiet_margin(), &aug, None).unwrap();
        for (x, y) in a.model.encoder.params.iter().zip(&c.model.encoder.params) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted() {
        let data = two_class_data(20);
        let cfg = tiny_cfg(2);
        let aug = AugmentationConfig::disabled();
        let model = || Model::new(&tiny_spec(), 2, 0).unwrap();
        let groups = standard_param_groups(cfg.base_lr, &model());
        let mut straight = Trainer::new(model(), groups.clone(), cfg.clone(), quiet_margin(), aug.clone()).unwrap();
        straight.step(&data).unwrap();
        straight.step(&data).unwrap();

        let mut first = Trainer::new(model(), groups, cfg, quiet_margin(), aug).unwrap();
        first.step(&data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        first.checkpoint().save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.encoder_params, first.model.encoder.params);
        let mut resumed = Trainer::from_checkpoint(loaded).unwrap();
        resumed.step(&data).unwrap();
        for (x, y) in straight.model.encoder.params.iter().zip(&resumed.model.encoder.params) {
            assert!((x - y).abs() <= 1e-7);
        }
        assert_eq!(straight.model.head, resumed.model.head);
        assert_eq!(straight.progress(), resumed.progress());
    }

    #[test]
    fn run_dir_layout_and_finetune_head() {
        let data = two_class_data(16);
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(2);
        let aug = AugmentationConfig::disabled();
        fit(&data, &cfg, &quiet_margin(), &aug, Some(dir.path())).unwrap();
        let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(metrics.lines().count(), 2);
        let last = latest_checkpoint(dir.path()).unwrap();
        assert!(last.ends_with("epoch_2"));
        let ckpt = Checkpoint::load(&last).unwrap();

        let three = InMemoryDataset::new(vec!["a".into(), "b".into(), "c".into()]);
        let mut three = three;
        for i in 0..6 {
            three.push(&data.image(i).unwrap(), i % 3).unwrap();
        }
        let ft = finetune(&ckpt, &three, &TrainConfig { epochs: 0, ..cfg }, &quiet_margin(), &aug, None).unwrap();
        assert_eq!(ft.model.head.weights.len(), 3 * 8);
        assert_eq!(ft.model.encoder.params, ckpt.encoder_params);
        assert_eq!(ft.groups()[0].base_lr, 0.05 / 100.0);
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let data = two_class_data(8);
        let t = fit(&data, &tiny_cfg(0), &quiet_margin(), &AugmentationConfig::disabled(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c");
        t.checkpoint().save(&p).unwrap();
        let mut bytes = std::fs::read(p.join(TENSOR_FILE)).unwrap();
        bytes[0] ^= 1;
        std::fs::write(p.join(TENSOR_FILE), bytes).unwrap();
        assert!(Checkpoint::load(&p).is_err());
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Missing(_))));
    }
}
