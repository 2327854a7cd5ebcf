//! SGD training with a poly learning-rate schedule.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dca_tensor::{BnUpdate, ParamId, ParamKind, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::checkpoint;
use crate::data::{Dataset, Sample};
use crate::error::{invalid, DcaError, Result};
use crate::layers::Ctx;
use crate::network::{median_frequency_weights, LossBreakdown, LossWeights, Model, Targets};

/// Images are fed to the network as `(x - 0.5) / 0.25`.
pub const PIXEL_CENTER: f32 = 0.5;
pub const PIXEL_SCALE: f32 = 0.25;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassBalance {
    #[default]
    Median,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub power: f64,
    pub max_iter: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub loss_weights: LossWeights,
    pub class_balance: ClassBalance,
    /// Log every n-th iteration; 0 disables the log.
    pub log_every: usize,
    /// Checkpoint every n-th iteration; 0 saves only the final state.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            power: 0.9,
            max_iter: 1000,
            batch_size: 8,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            augment: AugmentConfig::default(),
            loss_weights: LossWeights::default(),
            class_balance: ClassBalance::Median,
            log_every: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(invalid("base_lr must be positive"));
        }
        if !(self.power > 0.0) {
            return Err(invalid("power must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(invalid("weight_decay must be nonnegative"));
        }
        if self.max_iter == 0 || self.batch_size == 0 {
            return Err(invalid("max_iter and batch_size must be positive"));
        }
        self.augment.validate()?;
        self.loss_weights.validate()
    }
}

/// `base_lr * (1 - iteration / max_iter)^power`; past `max_iter` the rate is 0.
pub fn poly_lr(iteration: usize, cfg: &TrainConfig) -> f64 {
    if iteration > cfg.max_iter {
        log::warn!("iteration {iteration} is past max_iter {}; learning rate clamped to 0", cfg.max_iter);
        return 0.0;
    }
    cfg.base_lr * (1.0 - iteration as f64 / cfg.max_iter as f64).powf(cfg.power)
}

/// SGD with momentum and L2 weight decay folded into the gradient:
/// `v = m * v + (g + wd * p)`, `p -= lr * v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: HashMap<ParamId, Tensor<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum: momentum as f32, weight_decay: weight_decay as f32, velocity: HashMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &HashMap<ParamId, Tensor<f32>>, lr: f64) {
        let lr = lr as f32;
        let ids: Vec<ParamId> = params.ids().filter(|&id| params.kind(id) == ParamKind::Trainable).collect();
        for id in ids {
            let Some(g) = grads.get(&id) else { continue };
            let (m, wd) = (self.momentum, self.weight_decay);
            let p = params.get_mut(id);
            let v = self.velocity.entry(id).or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = m * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
    }
}

/// `running = (1 - m) * running + m * batch` for every recorded layer.
pub fn apply_bn_updates(params: &mut ParamStore<f32>, updates: &[BnUpdate<f32>], momentum: f32) {
    for u in updates {
        for (id, batch) in [(u.running_mean, &u.batch_mean), (u.running_var, &u.batch_var)] {
            for (r, &b) in params.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}

/// Normalized `[n, 3, H, W]` images, flat labels and `[n, K]` presence.
pub fn collate(samples: &[Sample], num_classes: usize) -> Result<(Tensor<f32>, Vec<u8>, Tensor<f32>)> {
    if samples.is_empty() {
        return Err(invalid("empty batch"));
    }
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| normalize(&s.image)).collect();
    let images = Tensor::stack(&images)?;
    let labels = samples.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let present = Tensor::from_fn(&[samples.len(), num_classes], |i| samples[i / num_classes].present[i % num_classes] as f32);
    Ok((images, labels, present))
}

/// Normalizes a `[3, H, W]` image into a `[1, 3, H, W]` network input.
pub fn normalize(image: &Tensor<f32>) -> Tensor<f32> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    image.map(|v| (v - PIXEL_CENTER) / PIXEL_SCALE).reshape(&shape).expect("same length")
}

pub fn class_weights(data: &Dataset, balance: ClassBalance) -> Vec<f32> {
    match balance {
        ClassBalance::Uniform => vec![1.0; data.num_classes],
        ClassBalance::Median => median_frequency_weights(&data.class_counts()).into_iter().map(|w| w as f32).collect(),
    }
}

/// One line of the JSON-lines metric log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_main: f64,
    pub loss_aux: f64,
    pub loss_sem: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    /// Directory for checkpoints and the metric log; nothing is written when `None`.
    pub dir: Option<PathBuf>,
    /// Stored in every checkpoint header.
    pub config: serde_json::Value,
}

pub const LOG_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.dcackpt";

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub iterations: usize,
    pub losses: Vec<LossBreakdown>,
    pub final_checkpoint: Option<PathBuf>,
    pub final_digest: Option<String>,
    pub log: Option<PathBuf>,
}

/// Stream of augmented training batches. Each epoch is a fresh permutation.
struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    cursor: usize,
    shuffle_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
    fill: [f32; 3],
}

impl<'a> Batches<'a> {
    fn new(data: &'a Dataset, seed: u64) -> Self {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
        shuffle_rng.set_stream(1);
        let mut augment_rng = ChaCha8Rng::seed_from_u64(seed);
        augment_rng.set_stream(2);
        Self { data, order: Vec::new(), cursor: 0, shuffle_rng, augment_rng, fill: data.mean() }
    }

    fn next(&mut self, n: usize, cfg: &AugmentConfig) -> Result<Vec<Sample>> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == self.order.len() {
                self.order = (0..self.data.len()).collect();
                self.order.shuffle(&mut self.shuffle_rng);
                self.cursor = 0;
            }
            let s = &self.data.samples[self.order[self.cursor]];
            self.cursor += 1;
            out.push(augment(s, cfg, &mut self.augment_rng, self.fill, self.data.num_classes)?);
        }
        Ok(out)
    }
}

/// Runs `cfg.max_iter` SGD iterations on `model`.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig, output: &RunOutput) -> Result<TrainSummary> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let k = model.config().num_classes;
    if data.num_classes != k {
        return Err(invalid(format!("dataset has {} classes, model {k}", data.num_classes)));
    }
    let weights = class_weights(data, cfg.class_balance);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut batches = Batches::new(data, cfg.seed);

    let mut log = match &output.dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join(LOG_FILE))?))
        }
        None => None,
    };
    let mut last_good: Option<PathBuf> = None;
    let mut losses = Vec::with_capacity(cfg.max_iter);

    for iter in 0..cfg.max_iter {
        let lr = poly_lr(iter, cfg);
        let batch = batches.next(cfg.batch_size, &cfg.augment)?;
        let (images, labels, present) = collate(&batch, k)?;

        let tape = Tape::new(true);
        let parts = {
            let cx = Ctx::new(&tape, &model.params);
            let x = tape.input(images, false);
            let out = model.net.forward(&cx, x)?;
            let targets = Targets { labels: &labels, present: &present, class_weights: &weights };
            let (loss, parts) = model.net.loss(&tape, &out, &targets, &cfg.loss_weights)?;
            if !parts.total.is_finite() {
                return Err(DcaError::NonFiniteLoss { iteration: iter, last_good });
            }
            let grads = tape.backward(loss)?;
            sgd.step(&mut model.params, &grads.params(), lr);
            parts
        };
        apply_bn_updates(&mut model.params, &tape.take_bn_updates(), BN_MOMENTUM);
        losses.push(parts);

        if let Some(w) = log.as_mut() {
            if cfg.log_every > 0 && iter % cfg.log_every == 0 {
                let rec = LogRecord {
                    iter,
                    lr,
                    loss_total: parts.total,
                    loss_main: parts.main,
                    loss_aux: parts.aux,
                    loss_sem: parts.sem,
                };
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
            }
        }
        if let Some(dir) = &output.dir {
            if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 && iter + 1 < cfg.max_iter {
                let path = dir.join(format!("iter_{:06}.{}", iter + 1, checkpoint::EXTENSION));
                checkpoint::save(&path, &model.params, &output.config, iter + 1)?;
                last_good = Some(path);
            }
        }
    }

    if let Some(mut w) = log {
        w.flush()?;
    }
    let (final_checkpoint, final_digest) = match &output.dir {
        Some(dir) => {
            let path = dir.join(FINAL_CHECKPOINT);
            let d = checkpoint::save(&path, &model.params, &output.config, cfg.max_iter)?;
            (Some(path), Some(d))
        }
        None => (None, None),
    };
    Ok(TrainSummary {
        iterations: cfg.max_iter,
        losses,
        final_checkpoint,
        final_digest,
        log: output.dir.as_deref().map(|d: &Path| d.join(LOG_FILE)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_examples() {
        let cfg = TrainConfig { base_lr: 0.01, power: 0.9, max_iter: 1000, ..TrainConfig::default() };
        assert_eq!(poly_lr(0, &cfg), 0.01);
        assert_eq!(poly_lr(1000, &cfg), 0.0);
        assert!((poly_lr(500, &cfg) - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((poly_lr(500, &cfg) - 0.0053589).abs() < 1e-7);
        assert_eq!(poly_lr(1001, &cfg), 0.0);
    }

    #[test]
    fn first_sgd_step_is_plain_decayed_gradient() {
        let mut params = ParamStore::new();
        let id = params.insert("w", ParamKind::Trainable, Tensor::from_vec(&[2], vec![1.0f32, -2.0]).unwrap()).unwrap();
        let grads = HashMap::from([(id, Tensor::from_vec(&[2], vec![0.5f32, 0.25]).unwrap())]);
        let mut sgd = Sgd::new(0.9, 1e-4);
        sgd.step(&mut params, &grads, 0.1);
        let want = [1.0 - 0.1 * (0.5 + 1e-4), -2.0 - 0.1 * (0.25 - 2e-4)];
        for (got, want) in params.get(id).data().iter().zip(want) {
            assert!((*got as f64 - want).abs() < 1e-7);
        }
    }

    #[test]
    fn buffers_are_not_optimized() {
        let mut params = ParamStore::new();
        let id = params.insert("rv", ParamKind::Buffer, Tensor::<f32>::ones(&[1])).unwrap();
        let grads = HashMap::from([(id, Tensor::ones(&[1]))]);
        Sgd::new(0.9, 0.0).step(&mut params, &grads, 1.0);
        assert_eq!(params.get(id).data(), &[1.0]);
    }
}
