//! Mini-batch SGD with momentum, step learning-rate decay, per-epoch
//! validation and best-validation checkpoint selection.

use std::io::Write;
use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::ImageSource;
use crate::checkpoint::Checkpoint;
use crate::config;
use crate::corpus::Manifest;
use crate::error::{Error, Result};
use crate::labels::NUM_CLASSES;
use crate::nn::{softmax_cross_entropy, Layer, Scalar, Tensor};
use crate::preprocess::{model_input, GrayImage, INPUT_SIDE};
use crate::seed::SeedBuilder;
use crate::zoo::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub decay_period: usize,
    pub decay_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 70,
            lr0: 0.01,
            momentum: 0.9,
            decay_period: 20,
            decay_factor: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] =
        &["batch_size", "epochs", "lr0", "momentum", "decay_period", "decay_factor", "seed"];

    /// Defaults, overlaid by the optional file, overlaid by `CRYSTAL_*`.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let cfg: Self = config::load(path, Self::KEYS, env)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.decay_period < 1 {
            return Err(Error::Config("decay_period must be at least 1".into()));
        }
        if !(self.decay_factor > 1.0) {
            return Err(Error::Config("decay_factor must exceed 1".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("lr0 must be non-negative and momentum in [0, 1)".into()));
        }
        Ok(())
    }

    /// `lr0 / decay_factor^floor(epoch / decay_period)`.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::InvalidArgument(format!("epoch {epoch} is past the last epoch {}", self.epochs - 1)));
        }
        Ok(self.lr0 / self.decay_factor.powi((epoch / self.decay_period) as i32))
    }
}

/// `v <- momentum * v - lr * g; w <- w + v`.
pub fn sgd_update<T: Scalar>(w: &mut [T], g: &[T], v: &mut [T], lr: T, momentum: T) {
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v - lr * g;
        *w += *v;
    }
}

/// Velocity buffers, one per parameter in graph order.
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(model: &mut Model, momentum: f64) -> Self {
        let mut velocity = Vec::new();
        model.net.visit_params(&mut |p| velocity.push(vec![0.0; p.value.len()]));
        Self { momentum, velocity }
    }

    pub fn step(&mut self, model: &mut Model, lr: f64) {
        let (lr, mom) = (lr as f32, self.momentum as f32);
        let mut i = 0;
        let velocity = &mut self.velocity;
        model.net.visit_params(&mut |p| {
            sgd_update(&mut p.value, &p.grad, &mut velocity[i], lr, mom);
            i += 1;
        });
    }
}

/// One optimization step on a batch; returns the mean cross-entropy. The
/// weights are left untouched when the loss is not finite.
pub fn train_step(model: &mut Model, sgd: &mut Sgd, x: &Tensor<f32>, labels: &[usize], lr: f64) -> Result<f64> {
    model.check_input(x)?;
    model.net.visit_params(&mut |p| p.zero_grad());
    let logits = model.net.forward(x);
    let (loss, grad) = softmax_cross_entropy(&logits, labels);
    let loss = loss as f64;
    if !loss.is_finite() {
        return Ok(loss);
    }
    model.net.backward(&grad);
    sgd.step(model, lr);
    Ok(loss)
}

/// Images already at model resolution, held in memory.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pixels: Vec<f32>,
}

const ITEM: usize = INPUT_SIDE * INPUT_SIDE;

impl Dataset {
    pub fn from_images(items: Vec<(String, usize, GrayImage)>) -> Result<Self> {
        let mut d = Dataset::default();
        for (id, label, img) in items {
            d.push(id, label, &img)?;
        }
        Ok(d)
    }

    pub fn push(&mut self, id: String, label: usize, img: &GrayImage) -> Result<()> {
        if img.width != INPUT_SIDE || img.height != INPUT_SIDE {
            return Err(Error::ShapeMismatch {
                expected: format!("{INPUT_SIDE}x{INPUT_SIDE}"),
                got: format!("{}x{}", img.width, img.height),
            });
        }
        if label >= NUM_CLASSES {
            return Err(Error::UnknownLabel(label.to_string()));
        }
        self.ids.push(id);
        self.labels.push(label);
        self.pixels.extend_from_slice(&img.pixels);
        Ok(())
    }

    /// Loads every record of `manifest`. Images not already at model
    /// resolution go through the inference preprocessing path.
    pub fn load(manifest: &Manifest, source: &dyn ImageSource) -> Result<Self> {
        let images: Vec<GrayImage> = manifest
            .records
            .par_iter()
            .map(|r| model_input(&source.load(manifest, r)?))
            .collect::<Result<_>>()?;
        let mut d = Dataset::default();
        for (r, img) in manifest.records.iter().zip(&images) {
            d.push(r.record_id.clone(), r.label.id(), img)?;
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * ITEM);
        for &i in indices {
            data.extend_from_slice(&self.pixels[i * ITEM..(i + 1) * ITEM]);
        }
        Tensor::from_vec(&[indices.len(), 1, INPUT_SIDE, INPUT_SIDE], data)
    }
}

/// Visiting order of the training records in `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedBuilder::new("epoch").u64(seed).u64(epoch as u64).rng());
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub best: Checkpoint,
    pub history: Vec<EpochStats>,
}

impl TrainResult {
    pub fn best_epoch(&self) -> usize {
        self.best.header.epoch.expect("best checkpoint records its epoch")
    }
}

/// Index of the highest validation accuracy, earliest on ties.
pub fn best_epoch_index(accuracies: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &a) in accuracies.iter().enumerate() {
        if best.is_none_or(|b| a > accuracies[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn train(model: &mut Model, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<TrainResult> {
    train_with(model, train_set, val_set, cfg, |_, _| ControlFlow::Continue(()))
}

/// Like [`train`], calling `observe` after every epoch; returning
/// `Break` ends the run after that epoch.
pub fn train_with(
    model: &mut Model,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochStats, &Model) -> ControlFlow<()>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut sgd = Sgd::new(model, cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch)?;
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = train_set.batch(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let loss = train_step(model, &mut sgd, &x, &labels, lr)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, loss });
            }
            loss_sum += loss * idx.len() as f64;
            steps += 1;
        }
        let stats = EpochStats {
            epoch,
            lr,
            steps,
            train_loss: loss_sum / train_set.len() as f64,
            val_accuracy: validate(model, val_set)?,
        };
        tracing::info!(
            epoch,
            lr,
            train_loss = stats.train_loss,
            val_accuracy = stats.val_accuracy,
            "epoch finished"
        );
        if best
            .as_ref()
            .is_none_or(|b| stats.val_accuracy > b.header.validation_accuracy.unwrap_or(f64::NEG_INFINITY))
        {
            let mut ckpt = Checkpoint::capture(model);
            ckpt.header.epoch = Some(epoch);
            ckpt.header.validation_accuracy = Some(stats.val_accuracy);
            ckpt.header.training_loss = Some(stats.train_loss);
            best = Some(ckpt);
        }
        history.push(stats);
        if observe(history.last().expect("just pushed"), model).is_break() {
            break;
        }
    }
    Ok(TrainResult {
        best: best.expect("at least one epoch ran"),
        history,
    })
}

/// Softmax activations for every record, in dataset order.
pub fn predict(model: &Model, data: &Dataset) -> Result<Vec<[f32; NUM_CLASSES]>> {
    let mut out = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(64) {
        let y = model.forward(&data.batch(idx))?;
        out.extend(y.data.chunks(NUM_CLASSES).map(|r| <[f32; NUM_CLASSES]>::try_from(r).expect("10 outputs")));
    }
    Ok(out)
}

/// Highest activation, lowest label id on ties.
pub fn argmax(activations: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in activations.iter().enumerate() {
        if v > activations[best] {
            best = i;
        }
    }
    best
}

/// Fraction of records whose top activation is the true label.
pub fn validate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let preds = predict(model, data)?;
    let correct = preds
        .iter()
        .zip(&data.labels)
        .filter(|(p, &y)| argmax(&p[..]) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

pub fn write_history_csv(history: &[EpochStats], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut body = String::from("epoch,lr,train_loss,val_accuracy\n");
    for h in history {
        body.push_str(&format!("{},{},{},{}\n", h.epoch, h.lr, h.train_loss, h.val_accuracy));
    }
    f.write_all(body.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        let lr = |e| c.lr_at(e).unwrap();
        assert_eq!(lr(0), 0.01);
        assert_eq!(lr(19), 0.01);
        assert!((lr(20) - 0.001).abs() < 1e-15);
        assert!((lr(39) - 0.001).abs() < 1e-15);
        assert!((lr(40) - 0.0001).abs() < 1e-16);
        assert!((lr(60) - 0.00001).abs() < 1e-17);
        assert!(c.lr_at(70).is_err());
        let distinct: std::collections::BTreeSet<u64> = (0..70).map(|e| lr(e).to_bits()).collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn momentum_recurrence_on_quadratic() {
        let (mut w, mut v) = ([0.0f64], [0.0f64]);
        let g = |w: f64| 2.0 * (w - 3.0);
        let grad = [g(w[0])];
        sgd_update(&mut w, &grad, &mut v, 0.1, 0.9);
        assert!((w[0] - 0.6).abs() < 1e-12 && (v[0] - 0.6).abs() < 1e-12);
        let grad = [g(w[0])];
        sgd_update(&mut w, &grad, &mut v, 0.1, 0.9);
        assert!((v[0] - 1.02).abs() < 1e-12);
        assert!((w[0] - 1.62).abs() < 1e-12);
    }

    #[test]
    fn zero_momentum_is_plain_descent() {
        let (mut w, mut v) = ([1.0f64, -2.0], [0.0f64; 2]);
        sgd_update(&mut w, &[0.5, 0.25], &mut v, 0.1, 0.0);
        assert_eq!(w, [0.95, -2.025]);
    }

    #[test]
    fn best_epoch_prefers_earliest_tie() {
        assert_eq!(best_epoch_index(&[0.3, 0.8, 0.8, 0.5]), Some(1));
        assert_eq!(best_epoch_index(&[]), None);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(100, 1, 0);
        assert_eq!(a, epoch_order(100, 1, 0));
        assert_ne!(a, epoch_order(100, 1, 1));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn argmax_ties_go_to_lowest_id() {
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig { decay_factor: 1.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let env = vec![("CRYSTAL_EPOCHS".to_string(), "5".to_string())];
        assert_eq!(TrainConfig::load(None, env).unwrap().epochs, 5);
    }
}
