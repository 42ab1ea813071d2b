//! Pretraining loop: AdamW with decoupled weight decay, linear warmup then
//! cosine decay, epochs counted in images, and per-pair gradients reduced in a
//! fixed order so runs are bit-reproducible for a given thread count.

use std::f64::consts::PI;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augmentation::AugmentConfig;
use crate::error::{Error, Result};
use crate::exec::{derive_seed, rng_for, Execution};
use crate::geo_index::NeighborIndex;
use crate::masking::MaskConfig;
use crate::model::{
    average_gradients, load_checkpoint, save_checkpoint, Checkpoint, Gradients, MaskedAutoencoder, MaskedPair,
    ModelConfig, OptimizerSnapshot,
};
use crate::pipeline::{sample_pair, Dataset, PairSettings};
use crate::visibility::{Visibility, WeightGradient, WeightPolicy};

const MODEL_STREAM: u64 = 0x006d_6f64_656c;
const ANCHOR_STREAM: u64 = 0x616e_6368_6f72;
const PAIR_STREAM: u64 = 0x7061_6972;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Learning rate per 256 images; the applied peak is scaled by batch size.
    pub base_lr: f64,
    /// Images per step (two per pair).
    pub batch_images: usize,
    pub epochs: f64,
    pub warmup_epochs: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub policy: WeightPolicy,
    pub mask: MaskConfig,
    pub augment: AugmentConfig,
    /// Write an intermediate checkpoint every this many steps (0 = only at
    /// the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Small-world settings used by the tests and the default CLI run.
    pub fn desk() -> Self {
        TrainConfig {
            base_lr: 1e-2,
            batch_images: 32,
            epochs: 25.0,
            warmup_epochs: 2.0,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            seed: 0,
            policy: WeightPolicy::Ours,
            mask: MaskConfig::default(),
            augment: AugmentConfig::default(),
            checkpoint_every: 0,
        }
    }

    /// The large-scale schedule (fMoW-length run at batch 2048).
    pub fn large_scale() -> Self {
        TrainConfig {
            base_lr: 1.5e-4,
            batch_images: 2048,
            epochs: 800.0,
            warmup_epochs: 40.0,
            augment: AugmentConfig {
                input_size: 224,
                ..AugmentConfig::default()
            },
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_images < 2 || !self.batch_images.is_multiple_of(2) {
            return fail("batch_images must be a positive even number");
        }
        if !(self.epochs >= 0.0 && self.warmup_epochs >= 0.0 && self.warmup_epochs <= self.epochs) {
            return fail("need 0 <= warmup_epochs <= epochs");
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0 && self.adam_eps > 0.0) {
            return fail("base_lr and weight_decay must be >= 0, adam_eps > 0");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("betas must lie in [0, 1)");
        }
        self.mask.validate()?;
        self.augment.validate()
    }

    /// Peak learning rate: `base_lr * batch_images / 256`.
    pub fn actual_lr(&self) -> f64 {
        self.base_lr * self.batch_images as f64 / 256.0
    }

    pub fn pairs_per_step(&self) -> usize {
        self.batch_images / 2
    }
}

/// Model and training settings as read from a config file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.input_size != self.train.augment.input_size {
            return Err(Error::Config(format!(
                "model input_size {} differs from augment input_size {}",
                self.model.input_size, self.train.augment.input_size
            )));
        }
        Ok(())
    }

    pub fn pair_settings(&self) -> PairSettings {
        PairSettings {
            augment: self.train.augment.clone(),
            mask: self.train.mask,
            patch_size: self.model.patch_size,
        }
    }
}

/// Dropping the last partial batch, one epoch is `floor(D / B)` steps.
pub fn steps_per_epoch(dataset_images: usize, batch_images: usize) -> u64 {
    (dataset_images / batch_images.max(1)) as u64
}

/// Linear warmup from 0 to the peak, then cosine decay to 0 at the end.
pub fn lr_at(step: u64, cfg: &TrainConfig, steps_per_epoch: u64) -> f64 {
    let peak = cfg.actual_lr();
    let warmup = cfg.warmup_epochs * steps_per_epoch as f64;
    let total = cfg.epochs * steps_per_epoch as f64;
    let s = step as f64;
    if s < warmup {
        peak * s / warmup
    } else if s >= total || total <= warmup {
        0.0
    } else {
        0.5 * peak * (1.0 + (PI * (s - warmup) / (total - warmup)).cos())
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub images_seen: u64,
    pub model: MaskedAutoencoder,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl TrainState {
    pub fn new(model: MaskedAutoencoder) -> Self {
        let zeros: Vec<Array2<f64>> = model.store.zeros_like().tensors().to_vec();
        TrainState {
            step: 0,
            images_seen: 0,
            model,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            step: self.step,
            images_seen: self.images_seen,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = MaskedAutoencoder::from_checkpoint(ckpt)?;
        let mut state = TrainState::new(model);
        if let Some(o) = &ckpt.optimizer {
            let shapes_match = |ts: &[Array2<f64>]| {
                ts.len() == state.m.len() && ts.iter().zip(&state.m).all(|(a, b)| a.dim() == b.dim())
            };
            if !shapes_match(&o.m) || !shapes_match(&o.v) {
                return Err(Error::Shape("optimizer state does not match the model".into()));
            }
            state.step = o.step;
            state.images_seen = o.images_seen;
            state.m = o.m.clone();
            state.v = o.v.clone();
        }
        Ok(state)
    }
}

/// Aggregates of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub mean_mask_ratio: f64,
    pub mean_cross_fraction: f64,
}

/// Averages per-pair losses and gradients, then applies one AdamW update.
/// `lr = 0` leaves the parameters untouched.
pub fn train_step(
    state: &mut TrainState,
    batch: &[MaskedPair],
    cfg: &TrainConfig,
    lr: f64,
    exec: Execution,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let model = &state.model;
    let results = exec.map_indexed(batch.len(), |k| {
        model.loss_and_grad(&batch[k], cfg.policy, WeightGradient::Detached)
    });
    let mut losses = Vec::with_capacity(batch.len());
    let mut grads = Vec::with_capacity(batch.len());
    let mut cross = 0.0;
    let mut bad = Vec::new();
    for (pair, r) in batch.iter().zip(results) {
        let (out, g) = r?;
        if !out.loss.is_finite() || !g.is_finite() {
            bad.push((pair.ids[0].clone(), pair.ids.last().cloned().unwrap_or_default()));
        }
        cross += out.cross_fraction();
        losses.push(out.loss);
        grads.push(g);
    }
    if !bad.is_empty() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            pairs: bad,
        });
    }
    let n = batch.len() as f64;
    let grad = average_gradients(&state.model.store, &grads);
    adamw_update(state, &grad, cfg, lr);
    state.step += 1;
    state.images_seen += 2 * batch.len() as u64;
    Ok(StepStats {
        loss: losses.iter().sum::<f64>() / n,
        mean_mask_ratio: batch.iter().map(|p| p.mask_ratio).sum::<f64>() / n,
        mean_cross_fraction: cross / n,
    })
}

fn adamw_update(state: &mut TrainState, grad: &Gradients, cfg: &TrainConfig, lr: f64) {
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let params = state.model.store.params_mut();
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grad.tensors())
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let decay = if p.decay { lr * cfg.weight_decay } else { 0.0 };
        Zip::from(&mut p.value).and(g).and(m).and(v).for_each(|w, &g, m, v| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *w -= decay * *w;
            *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.adam_eps);
        });
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub images_seen: u64,
    pub epoch: f64,
    pub loss: f64,
    pub lr: f64,
    pub mean_mask_ratio: f64,
    pub mean_cross_fraction: f64,
    pub policy: WeightPolicy,
}

/// Drives training over a dataset and its neighbor index.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    index: &'a NeighborIndex,
    pub config: PretrainConfig,
    pub exec: Execution,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        dataset: &'a Dataset,
        index: &'a NeighborIndex,
        config: PretrainConfig,
        exec: Execution,
    ) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        let model = MaskedAutoencoder::new(config.model.clone(), derive_seed(config.train.seed, &[MODEL_STREAM]))?;
        Ok(Trainer {
            dataset,
            index,
            config,
            exec,
            state: TrainState::new(model),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`]. The
    /// stored config wins over `config` for the model architecture.
    pub fn resume(
        dataset: &'a Dataset,
        index: &'a NeighborIndex,
        config: PretrainConfig,
        ckpt: &Checkpoint,
        exec: Execution,
    ) -> Result<Self> {
        let config = PretrainConfig {
            model: ckpt.config.clone(),
            ..config
        };
        let mut t = Trainer::new(dataset, index, config, exec)?;
        t.state = TrainState::from_checkpoint(ckpt)?;
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> u64 {
        steps_per_epoch(self.dataset.len(), self.config.train.batch_images)
    }

    pub fn total_steps(&self) -> u64 {
        (self.config.train.epochs * self.steps_per_epoch() as f64).floor() as u64
    }

    /// Anchor id number `k` of the run: anchors are consumed in order from a
    /// fresh shuffle of all images every `D` draws.
    fn anchor(&self, k: u64) -> &'a str {
        let d = self.dataset.len() as u64;
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        order.shuffle(&mut rng_for(self.config.train.seed, &[ANCHOR_STREAM, k / d]));
        &self.dataset.records()[order[(k % d) as usize]].id
    }

    /// The masked pairs of step `step`.
    pub fn batch(&self, step: u64) -> Result<Vec<MaskedPair>> {
        let per = self.config.train.pairs_per_step() as u64;
        let settings = self.config.pair_settings();
        let seed = self.config.train.seed;
        let anchors: Vec<&str> = (0..per).map(|k| self.anchor(step * per + k)).collect();
        self.exec
            .map_indexed(anchors.len(), |k| {
                sample_pair(
                    self.dataset,
                    self.index,
                    anchors[k],
                    &settings,
                    derive_seed(seed, &[PAIR_STREAM, step, k as u64]),
                )
            })
            .into_iter()
            .collect()
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.state.step;
        let spe = self.steps_per_epoch();
        let lr = lr_at(step, &self.config.train, spe);
        let batch = self.batch(step)?;
        let stats = train_step(&mut self.state, &batch, &self.config.train, lr, self.exec)?;
        Ok(StepRecord {
            step,
            images_seen: self.state.images_seen,
            epoch: self.state.step as f64 / spe.max(1) as f64,
            loss: stats.loss,
            lr,
            mean_mask_ratio: stats.mean_mask_ratio,
            mean_cross_fraction: stats.mean_cross_fraction,
            policy: self.config.train.policy,
        })
    }

    /// Runs until the schedule ends, calling `on_step` after every step.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepRecord) -> Result<()>) -> Result<()> {
        while self.state.step < self.total_steps() {
            let rec = self.step()?;
            on_step(self, &rec)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::to_value(&self.config)?;
        Ok(self.state.model.to_checkpoint(meta, Some(self.state.snapshot())))
    }
}

/// Files written by [`pretrain`].
#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub history: Vec<StepRecord>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.nmck";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Full run into `out_dir`: a metrics line per step and a final checkpoint.
/// If `out_dir` already holds a checkpoint and `resume` is set, training
/// continues from it and metrics are appended.
pub fn pretrain(
    dataset: &Dataset,
    index: &NeighborIndex,
    config: PretrainConfig,
    out_dir: &Path,
    resume: bool,
    exec: Execution,
) -> Result<PretrainOutput> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut trainer = if resume && ckpt_path.exists() {
        let ckpt = load_checkpoint(&ckpt_path)?;
        log::info!("resuming from {}", ckpt_path.display());
        Trainer::resume(dataset, index, config, &ckpt, exec)?
    } else {
        Trainer::new(dataset, index, config, exec)?
    };
    let file = if trainer.state.step > 0 {
        OpenOptions::new().append(true).create(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    }
    .map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = BufWriter::new(file);
    let mut history = Vec::new();
    let every = trainer.config.train.checkpoint_every;
    trainer.run(|t, rec| {
        serde_json::to_writer(&mut log, rec)?;
        writeln!(log).map_err(|e| Error::io(&metrics_path, e))?;
        if rec.step % 10 == 0 {
            log::info!("step {} loss {:.5} lr {:.3e}", rec.step, rec.loss, rec.lr);
        }
        if every > 0 && t.state.step % every == 0 {
            log.flush().map_err(|e| Error::io(&metrics_path, e))?;
            save_checkpoint(&ckpt_path, &t.checkpoint()?)?;
        }
        history.push(rec.clone());
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    save_checkpoint(&ckpt_path, &trainer.checkpoint()?)?;
    Ok(PretrainOutput {
        checkpoint: ckpt_path,
        metrics: metrics_path,
        history,
    })
}

/// Held-out reconstruction quality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    /// Mean of the per-pair training loss under the given policy.
    pub loss: f64,
    /// Mean per-pixel error (loss space) over cross-visible pixels, each
    /// pixel weighted by its "ours" weight.
    pub cross_weighted_error: f64,
    /// Unweighted mean error over cross-visible pixels.
    pub cross_error: f64,
    pub cross_pixels: usize,
}

pub fn evaluate(
    model: &MaskedAutoencoder,
    pairs: &[MaskedPair],
    policy: WeightPolicy,
    exec: Execution,
) -> Result<EvalReport> {
    let outs = exec.map_indexed(pairs.len(), |k| {
        let ours = model.forward_loss(&pairs[k], WeightPolicy::Ours)?;
        let loss = if policy == WeightPolicy::Ours {
            ours.loss
        } else {
            model.forward_loss(&pairs[k], policy)?.loss
        };
        Ok::<_, Error>((loss, ours))
    });
    let (mut loss, mut wsum, mut werr, mut err, mut count) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for r in outs {
        let (l, out) = r?;
        loss += l;
        for v in 0..out.recon.len() {
            let c = out.recon[v].dim().2 as f64;
            for ((y, x), cat) in out.visibility[v].category.indexed_iter() {
                if *cat != Visibility::CrossVisible {
                    continue;
                }
                let e: f64 = (0..out.recon[v].dim().2)
                    .map(|k| (out.recon[v][[y, x, k]] - out.targets[v][[y, x, k]]).powi(2))
                    .sum::<f64>()
                    / c;
                let w = out.weights[v].weights[[y, x]];
                werr += w * e;
                wsum += w;
                err += e;
                count += 1;
            }
        }
    }
    Ok(EvalReport {
        loss: loss / pairs.len().max(1) as f64,
        cross_weighted_error: if wsum > 0.0 { werr / wsum } else { 0.0 },
        cross_error: err / count.max(1) as f64,
        cross_pixels: count,
    })
}
