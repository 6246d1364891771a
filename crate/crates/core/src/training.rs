//! Source-model training: BCE + soft Dice loss, Adam, cosine schedule and a
//! frozen domain prior generator feeding AdaBN layers.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{EpochLog, ModelCheckpoint, TrainingMetadata};
use crate::data::{Mask, SegSample};
use crate::dpg::DomainPriorGenerator;
use crate::error::{Error, Result};
use crate::model::{NormKind, UNet};
use crate::nn::{Adam, AdamConfig};
use crate::normalization::{DomainCode, StatsMode};
use crate::tensor::{Real, Tensor};

/// Classification term of the segmentation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLoss {
    /// Per-class one-vs-rest sigmoid BCE; Dice on sigmoid probabilities.
    SigmoidBce,
    /// Softmax cross-entropy; Dice on softmax probabilities.
    SoftmaxCe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the classification term.
    pub lambda: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Adam first-moment decay.
    pub momentum: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub eps_dice: f64,
    /// Running-statistics update rate of normalization layers.
    pub bn_momentum: f64,
    pub class_loss: ClassLoss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::published_2d()
    }
}

impl TrainConfig {
    /// Published 2D recipe: Adam at 1e-4 annealed to 1e-5, batch 8.
    pub fn published_2d() -> Self {
        Self {
            lambda: 1.0,
            lr_max: 1e-4,
            lr_min: 1e-5,
            momentum: 0.9,
            beta2: 0.999,
            batch_size: 8,
            epochs: 50,
            seed: 0,
            eps_dice: 1e-6,
            bn_momentum: 0.1,
            class_loss: ClassLoss::SigmoidBce,
        }
    }

    /// Published 3D recipe: learning rate 1e-3, batch 2.
    pub fn published_3d() -> Self {
        Self {
            lr_max: 1e-3,
            batch_size: 2,
            ..Self::published_2d()
        }
    }

    /// Small-budget CPU recipe used by the synthetic experiments.
    pub fn desk() -> Self {
        Self {
            lr_max: 3e-3,
            lr_min: 1e-4,
            epochs: 30,
            ..Self::published_2d()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Validation("batch_size and epochs must be >= 1".into()));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Validation(format!(
                "need 0 <= lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(self.lambda >= 0.0) || !(self.eps_dice >= 0.0) {
            return Err(Error::Validation("lambda and eps_dice must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Validation("Adam decay rates must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub(crate) fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.momentum,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t).cos())
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn check_same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() || a.ndim() < 3 {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} must share a (batch, classes, *spatial) shape",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn foreground_classes(k: usize) -> std::ops::Range<usize> {
    if k >= 2 {
        1..k
    } else {
        0..k
    }
}

/// One-hot encoding `(batch, num_classes, *spatial)` of label masks.
pub fn one_hot<T: Real>(masks: &[&Mask], num_classes: usize) -> Result<Tensor<T>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Validation("no masks to encode".into()))?;
    let s = first.len();
    let mut shape = vec![masks.len(), num_classes];
    shape.extend_from_slice(first.shape());
    let mut out = Tensor::zeros(&shape);
    for (n, m) in masks.iter().enumerate() {
        if m.shape() != first.shape() {
            return Err(Error::Shape("masks in a batch must share a shape".into()));
        }
        let item = out.item_mut(n);
        for (p, &l) in m.labels().iter().enumerate() {
            let l = l as usize;
            if l >= num_classes {
                return Err(Error::Validation(format!("label {l} >= num_classes {num_classes}")));
            }
            item[l * s + p] = T::one();
        }
    }
    Ok(out)
}

/// Soft Dice loss and its gradient with respect to `probs`.
///
/// `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`, averaged over samples
/// and foreground classes (class 0 is background when there are two or more).
pub fn dice_loss_with_grad<T: Real>(probs: &Tensor<T>, target: &Tensor<T>, eps: T) -> Result<(T, Tensor<T>)> {
    check_same_shape(probs, target)?;
    if probs.data().iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
        return Err(Error::Validation("probabilities must lie in [0, 1]".into()));
    }
    let (n, k, s) = (probs.batch(), probs.channels(), probs.spatial_len());
    let classes = foreground_classes(k);
    let terms = T::of((n * classes.len()) as f64);
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(probs.shape());
    for i in 0..n {
        for c in classes.clone() {
            let off = (i * k + c) * s;
            let p = &probs.data()[off..off + s];
            let t = &target.data()[off..off + s];
            let inter: T = p.iter().zip(t).map(|(&a, &b)| a * b).sum();
            let den = p.iter().copied().sum::<T>() + t.iter().copied().sum::<T>() + eps;
            let num = T::of(2.0) * inter + eps;
            if den == T::zero() {
                // both empty: perfect agreement, flat
                continue;
            }
            loss += T::one() - num / den;
            let g = &mut grad.data_mut()[off..off + s];
            for (gv, &tv) in g.iter_mut().zip(t) {
                *gv = -(T::of(2.0) * tv * den - num) / (den * den) / terms;
            }
        }
    }
    Ok((loss / terms, grad))
}

pub fn dice_loss<T: Real>(probs: &Tensor<T>, target: &Tensor<T>, eps: T) -> Result<T> {
    dice_loss_with_grad(probs, target, eps).map(|(l, _)| l)
}

/// Mean numerically stable binary cross-entropy on logits, and its gradient.
pub fn bce_loss_with_grad<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    check_same_shape(logits, target)?;
    let m = T::of(logits.len() as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &t) in logits.data().iter().zip(target.data()) {
        loss += x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p();
        grad.push((sigmoid(x) - t) / m);
    }
    Ok((loss / m, Tensor::new(logits.shape().to_vec(), grad)?))
}

pub fn bce_loss<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    bce_loss_with_grad(logits, target).map(|(l, _)| l)
}

/// Softmax over the class axis.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let (n, k, s) = (logits.batch(), logits.channels(), logits.spatial_len());
    let mut out = logits.clone();
    for i in 0..n {
        let item = out.item_mut(i);
        for p in 0..s {
            let mx = (0..k).map(|c| item[c * s + p]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..k {
                let e = (item[c * s + p] - mx).exp();
                item[c * s + p] = e;
                z += e;
            }
            for c in 0..k {
                item[c * s + p] /= z;
            }
        }
    }
    out
}

/// Mean softmax cross-entropy per pixel and its gradient.
fn softmax_ce_with_grad<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    check_same_shape(logits, target)?;
    let probs = softmax(logits);
    let pixels = T::of((logits.batch() * logits.spatial_len()) as f64);
    let tiny = T::min_positive_value();
    let loss = probs
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| if t > T::zero() { -t * p.max(tiny).ln() } else { T::zero() })
        .sum::<T>()
        / pixels;
    let grad = probs
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) / pixels)
        .collect();
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// `lambda * BCE + Dice` on logits, with the gradient with respect to the logits.
pub fn combined_loss_with_grad<T: Real>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
    lambda: T,
    eps_dice: T,
    class_loss: ClassLoss,
) -> Result<(T, Tensor<T>)> {
    let (ce, mut grad, probs) = match class_loss {
        ClassLoss::SigmoidBce => {
            let (l, g) = bce_loss_with_grad(logits, target)?;
            (l, g, logits.map(sigmoid))
        }
        ClassLoss::SoftmaxCe => {
            let (l, g) = softmax_ce_with_grad(logits, target)?;
            (l, g, softmax(logits))
        }
    };
    grad.data_mut().iter_mut().for_each(|g| *g *= lambda);
    let (dice, dprobs) = dice_loss_with_grad(&probs, target, eps_dice)?;
    match class_loss {
        ClassLoss::SigmoidBce => {
            for ((g, &dp), &p) in grad.data_mut().iter_mut().zip(dprobs.data()).zip(probs.data()) {
                *g += dp * p * (T::one() - p);
            }
        }
        ClassLoss::SoftmaxCe => {
            let (n, k, s) = (logits.batch(), logits.channels(), logits.spatial_len());
            for i in 0..n {
                let base = i * k * s;
                for px in 0..s {
                    let dot: T = (0..k)
                        .map(|c| dprobs.data()[base + c * s + px] * probs.data()[base + c * s + px])
                        .sum();
                    for c in 0..k {
                        let idx = base + c * s + px;
                        grad.data_mut()[idx] += probs.data()[idx] * (dprobs.data()[idx] - dot);
                    }
                }
            }
        }
    }
    Ok((lambda * ce + dice, grad))
}

/// `lambda * BCE(logits, target) + Dice(sigmoid(logits), target)`.
pub fn combined_loss<T: Real>(logits: &Tensor<T>, target: &Tensor<T>, lambda: T, eps_dice: T) -> Result<T> {
    combined_loss_with_grad(logits, target, lambda, eps_dice, ClassLoss::SigmoidBce).map(|(l, _)| l)
}

pub(crate) fn stack_images(samples: &[&SegSample]) -> Result<Tensor<f32>> {
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    Tensor::stack(&images)
}

/// Trains an Adaptive UNet against a frozen domain prior generator.
pub fn train_source(
    model: &ModelCheckpoint,
    dpg: &ModelCheckpoint,
    dataset: &[SegSample],
    cfg: &TrainConfig,
) -> Result<ModelCheckpoint> {
    train_segmenter(model, Some(dpg), dataset, cfg)
}

/// Trains a plain batch-norm UNet with the same recipe and no domain codes.
pub fn train_plain(model: &ModelCheckpoint, dataset: &[SegSample], cfg: &TrainConfig) -> Result<ModelCheckpoint> {
    train_segmenter(model, None, dataset, cfg)
}

fn train_segmenter(
    model: &ModelCheckpoint,
    dpg: Option<&ModelCheckpoint>,
    dataset: &[SegSample],
    cfg: &TrainConfig,
) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    let mut net = UNet::<f32>::from_checkpoint(model)?;
    let arch = net.config().clone();
    let generator = match (arch.norm, dpg) {
        (NormKind::AdaBn, Some(d)) => {
            let g = DomainPriorGenerator::from_checkpoint(d)?;
            if let Some(fp) = &model.dpg_fingerprint {
                if fp != g.fingerprint() {
                    return Err(Error::Contract(format!(
                        "model was trained with prior generator {fp}, got {}",
                        g.fingerprint()
                    )));
                }
            }
            Some(g)
        }
        (NormKind::AdaBn, None) => {
            return Err(Error::Contract("Adaptive UNet training needs a domain prior generator".into()))
        }
        (NormKind::Bn, Some(_)) => {
            return Err(Error::Contract("plain UNet training does not use a domain prior generator".into()))
        }
        (NormKind::Bn, None) => None,
    };
    if dataset.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let masks: Vec<&Mask> = dataset
        .iter()
        .map(|s| {
            s.mask
                .as_ref()
                .ok_or_else(|| Error::Validation(format!("training sample {} has no mask", s.id)))
        })
        .collect::<Result<_>>()?;
    // frozen generator: one code per image for the whole run
    let codes: Option<Vec<DomainCode<f32>>> = generator
        .as_ref()
        .map(|g| dataset.iter().map(|s| g.encode(&s.image)).collect::<Result<_>>())
        .transpose()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::<f32>::new(cfg.adam());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut dice_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&SegSample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let x = stack_images(&samples)?;
            let batch_masks: Vec<&Mask> = chunk.iter().map(|&i| masks[i]).collect();
            let target = one_hot::<f32>(&batch_masks, arch.num_classes)?;
            let batch_codes: Option<Vec<DomainCode<f32>>> =
                codes.as_ref().map(|c| chunk.iter().map(|&i| c[i].clone()).collect());
            let (logits, trace) = net.forward_traced(&x, batch_codes.as_deref(), StatsMode::Batch)?;
            let (loss, dlogits) = combined_loss_with_grad(
                &logits,
                &target,
                cfg.lambda as f32,
                cfg.eps_dice as f32,
                cfg.class_loss,
            )?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss diverged at epoch {epoch}")));
            }
            let probs = match cfg.class_loss {
                ClassLoss::SigmoidBce => logits.map(sigmoid),
                ClassLoss::SoftmaxCe => softmax(&logits),
            };
            dice_sum += dice_loss(&probs, &target, cfg.eps_dice as f32)? as f64;
            let grad = net.backward(&trace, &dlogits);
            opt.step(&mut net, &grad, lr, |_| true);
            // a zero-rate step is a no-op, statistics included
            if lr != 0.0 {
                net.update_running(&trace, cfg.bn_momentum as f32);
            }
            loss_sum += loss as f64;
            batches += 1;
        }
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / batches as f64,
            lr,
            dice_loss: Some(dice_sum / batches as f64),
        };
        log::debug!("epoch {epoch}: loss {:.5} lr {lr:.2e}", entry.mean_loss);
        log.push(entry);
    }
    Ok(net.to_checkpoint(
        generator.map(|g| g.fingerprint().to_string()),
        TrainingMetadata {
            epochs: cfg.epochs,
            seed: cfg.seed,
            loss_curve: log,
            config_hash: model.metadata.config_hash.clone(),
            notes: model.metadata.notes.clone(),
        },
    ))
}

/// `epoch,mean_loss,lr` rows.
pub fn loss_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,mean_loss,lr\n");
    for e in log {
        let _ = writeln!(out, "{},{},{}", e.epoch, e.mean_loss, e.lr);
    }
    out
}

pub fn write_loss_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    std::fs::write(path, loss_csv(log)).map_err(|e| Error::io(path, e))
}
