//! Comparison methods: direct testing of a plain batch-norm UNet and TENT,
//! entropy minimization over the test distribution updating only the
//! batch-norm affine parameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::data::Mask;
use crate::error::{Error, Result};
use crate::eval::{score_predictions, DiceReport, RegionSpec, ReportMetadata};
use crate::inference::{decode_logits, probabilities, TestInstance};
use crate::model::{NormKind, UNet};
use crate::nn::{Adam, AdamConfig, ParamKind};
use crate::normalization::StatsMode;
use crate::tensor::{Real, Tensor};
use crate::training::{sigmoid, softmax};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TentConfig {
    /// Epochs over the test set.
    pub shots: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TentConfig {
    fn default() -> Self {
        Self {
            shots: 1,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 || self.batch_size == 0 {
            return Err(Error::Validation("shots and batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Validation(format!("TENT lr {} must be >= 0", self.lr)));
        }
        Ok(())
    }
}

/// Mean Shannon entropy per pixel. One channel is read as a binary
/// foreground probability, several as a distribution over classes.
pub fn entropy_loss<T: Real>(probs: &Tensor<T>) -> Result<T> {
    if probs.ndim() < 3 {
        return Err(Error::Shape(format!("expected (batch, classes, *spatial), got {:?}", probs.shape())));
    }
    if probs.data().iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
        return Err(Error::Validation("probabilities must lie in [0, 1]".into()));
    }
    let h = |p: T| if p > T::zero() { -p * p.ln() } else { T::zero() };
    let (n, k, s) = (probs.batch(), probs.channels(), probs.spatial_len());
    let mut total = T::zero();
    for i in 0..n {
        let item = probs.item(i);
        for px in 0..s {
            if k == 1 {
                let p = item[px];
                total += h(p) + h(T::one() - p);
            } else {
                let sum: T = (0..k).map(|c| item[c * s + px]).sum();
                if (sum - T::one()).abs() > T::of(1e-4) {
                    return Err(Error::Validation(format!("class probabilities sum to {sum:?}, not 1")));
                }
                total += (0..k).map(|c| h(item[c * s + px])).sum::<T>();
            }
        }
    }
    Ok(total / T::of((n * s) as f64))
}

/// Entropy of the prediction distribution and its gradient on the logits.
fn entropy_with_grad<T: Real>(logits: &Tensor<T>) -> (T, Tensor<T>) {
    let (n, k, s) = (logits.batch(), logits.channels(), logits.spatial_len());
    let pixels = T::of((n * s) as f64);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    let xlogx = |p: T| if p > T::zero() { p * p.ln() } else { T::zero() };
    if k == 2 {
        // binary prediction from the foreground channel
        for i in 0..n {
            let x = &logits.item(i)[s..2 * s];
            let g = &mut grad.item_mut(i)[s..2 * s];
            for (gv, &xv) in g.iter_mut().zip(x) {
                let p = sigmoid(xv);
                total -= xlogx(p) + xlogx(T::one() - p);
                *gv = -xv * p * (T::one() - p) / pixels;
            }
        }
    } else {
        let probs = softmax(logits);
        for i in 0..n {
            let p = probs.item(i);
            let g = grad.item_mut(i);
            for px in 0..s {
                let hpx: T = -(0..k).map(|c| xlogx(p[c * s + px])).sum::<T>();
                total += hpx;
                for c in 0..k {
                    let pc = p[c * s + px];
                    let lp = if pc > T::zero() { pc.ln() } else { T::zero() };
                    g[c * s + px] = -pc * (lp + hpx) / pixels;
                }
            }
        }
    }
    (total / pixels, grad)
}

fn plain_net(model: &ModelCheckpoint) -> Result<UNet<f32>> {
    let net = UNet::<f32>::from_checkpoint(model)?;
    if net.config().norm != NormKind::Bn {
        return Err(Error::Contract("baselines run on a plain batch-norm UNet".into()));
    }
    Ok(net)
}

fn batches(test_set: &[TestInstance], batch_size: usize) -> impl Iterator<Item = &[TestInstance]> {
    test_set.chunks(batch_size.max(1))
}

fn stack_batch(batch: &[TestInstance]) -> Result<Tensor<f32>> {
    Tensor::stack(&batch.iter().map(|i| &i.image).collect::<Vec<_>>())
}

/// Predicted masks; `Batch` statistics pool over consecutive batches of
/// `batch_size` in test-set order.
fn predict(net: &UNet<f32>, test_set: &[TestInstance], mode: StatsMode, batch_size: usize) -> Result<Vec<Mask>> {
    let mut out = Vec::with_capacity(test_set.len());
    let size = if mode == StatsMode::Batch { batch_size } else { 1 };
    for batch in batches(test_set, size) {
        let logits = net.forward(&stack_batch(batch)?, None, mode)?;
        for n in 0..logits.batch() {
            out.push(decode_logits(&logits.select(n))?);
        }
    }
    Ok(out)
}

/// Mean prediction entropy over the test set.
pub fn mean_entropy(model: &ModelCheckpoint, test_set: &[TestInstance], mode: StatsMode, batch_size: usize) -> Result<f64> {
    let net = plain_net(model)?;
    let size = if mode == StatsMode::Batch { batch_size } else { 1 };
    let (mut total, mut count) = (0.0, 0usize);
    for batch in batches(test_set, size) {
        let logits = net.forward(&stack_batch(batch)?, None, mode)?;
        total += entropy_loss(&probabilities(&logits))? as f64 * batch.len() as f64;
        count += batch.len();
    }
    Ok(total / count.max(1) as f64)
}

fn score(
    net: &UNet<f32>,
    model: &ModelCheckpoint,
    test_set: &[TestInstance],
    mode: StatsMode,
    batch_size: usize,
    method: &str,
    regions: Option<&RegionSpec>,
) -> Result<DiceReport> {
    if test_set.is_empty() {
        return Err(Error::Validation("test set is empty".into()));
    }
    if let Some(i) = test_set.iter().find(|i| i.ground_truth().is_none()) {
        return Err(Error::Validation(format!("test instance {} has no ground truth", i.id)));
    }
    let masks = predict(net, test_set, mode, batch_size)?;
    let mut meta = ReportMetadata::new(method, "");
    meta.model_fingerprint = Some(model.fingerprint());
    meta.config_hash = model.metadata.config_hash.clone();
    score_predictions(
        masks
            .iter()
            .zip(test_set)
            .map(|(m, i)| (i.id.as_str(), m, i.ground_truth().expect("checked above"))),
        net.config().num_classes,
        regions,
        meta,
    )
}

/// Source model on target data, frozen source running statistics.
pub fn direct_test(plain_model: &ModelCheckpoint, test_set: &[TestInstance]) -> Result<DiceReport> {
    let net = plain_net(plain_model)?;
    score(&net, plain_model, test_set, StatsMode::Running, 1, "direct", None)
}

/// Direct testing with statistics of consecutive test batches.
pub fn direct_test_batch_stats(plain_model: &ModelCheckpoint, test_set: &[TestInstance], batch_size: usize) -> Result<DiceReport> {
    let net = plain_net(plain_model)?;
    score(&net, plain_model, test_set, StatsMode::Batch, batch_size, "direct", None)
}

/// Adapts a private copy of `plain_model` by entropy minimization over the
/// test set for `shots` epochs, then scores it with batch statistics.
pub fn tent_adapt(
    plain_model: &ModelCheckpoint,
    test_set: &[TestInstance],
    cfg: &TentConfig,
) -> Result<(ModelCheckpoint, DiceReport)> {
    cfg.validate()?;
    if test_set.is_empty() {
        return Err(Error::Validation("test set is empty".into()));
    }
    let mut net = plain_net(plain_model)?;
    let mut opt = Adam::<f32>::new(AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..test_set.len()).collect();
    for _ in 0..cfg.shots {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = Tensor::stack(&chunk.iter().map(|&i| &test_set[i].image).collect::<Vec<_>>())?;
            let (logits, trace) = net.forward_traced(&x, None, StatsMode::Batch)?;
            let (_, dlogits) = entropy_with_grad(&logits);
            let grad = net.backward(&trace, &dlogits);
            opt.step(&mut net, &grad, cfg.lr, ParamKind::is_norm_affine);
        }
    }
    let mut adapted = net.to_checkpoint(plain_model.dpg_fingerprint.clone(), plain_model.metadata.clone());
    adapted
        .metadata
        .notes
        .insert("tent".into(), format!("shots={} lr={} batch_size={}", cfg.shots, cfg.lr, cfg.batch_size));
    let report = score(
        &net,
        &adapted,
        test_set,
        StatsMode::Batch,
        cfg.batch_size,
        &format!("tent-{}shot", cfg.shots),
        None,
    )?;
    Ok((adapted, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn entropy_hand_values() {
        let half = Tensor::full(&[1, 1, 10], 0.5f64);
        assert!((entropy_loss(&half).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let hard = Tensor::new(vec![1, 1, 4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(entropy_loss(&hard).unwrap(), 0.0);
        let uniform = Tensor::full(&[2, 4, 3], 0.25f64);
        assert!((entropy_loss(&uniform).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(entropy_loss(&Tensor::full(&[1, 1, 2], 1.5f64)).is_err());
        assert!(entropy_loss(&Tensor::full(&[1, 2, 2], 0.7f64)).is_err());
    }

    fn numeric(logits: &Tensor<f64>) -> Vec<f64> {
        (0..logits.len())
            .map(|i| {
                let h = 1e-6;
                let mut p = logits.clone();
                p.data_mut()[i] += h;
                let mut m = logits.clone();
                m.data_mut()[i] -= h;
                (entropy_with_grad(&p).0 - entropy_with_grad(&m).0) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn entropy_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in [2, 3] {
            let logits = Tensor::from_fn(&[2, k, 4, 4], |_| rng.gen_range(-3.0..3.0));
            let (h, g) = entropy_with_grad(&logits);
            let probs = probabilities(&logits.cast::<f32>()).cast::<f64>();
            assert!((h - entropy_loss(&probs).unwrap()).abs() < 1e-5);
            let n = numeric(&logits);
            for (a, b) in g.data().iter().zip(&n) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn uniform_distribution_maximizes_entropy(raw in proptest::collection::vec(0.01f64..1.0, 4)) {
            let sum: f64 = raw.iter().sum();
            let p = Tensor::new(vec![1, 4, 1], raw.iter().map(|v| v / sum).collect()).unwrap();
            let uniform = Tensor::full(&[1, 4, 1], 0.25f64);
            proptest::prop_assert!(entropy_loss(&p).unwrap() <= entropy_loss(&uniform).unwrap() + 1e-12);
        }
    }
}
