//! The on-the-fly protocol: each test instance is encoded by the frozen
//! prior generator and segmented in one forward pass with instance
//! statistics. Nothing is written back and nothing is carried over.

use std::time::Instant;

use crate::checkpoint::ModelCheckpoint;
use crate::data::{Mask, SegSample};
use crate::dpg::DomainPriorGenerator;
use crate::error::{Error, Result};
use crate::eval::{score_predictions, DiceReport, RegionSpec, ReportMetadata};
use crate::model::{NormKind, UNet};
use crate::normalization::StatsMode;
use crate::tensor::Tensor;
use crate::training::sigmoid;

/// One target image. The ground truth is only reachable through
/// [`TestInstance::ground_truth`], which the adaptation path never calls.
#[derive(Clone, Debug, PartialEq)]
pub struct TestInstance {
    pub id: String,
    /// `(channels, *spatial)`.
    pub image: Tensor<f32>,
    ground_truth: Option<Mask>,
}

impl TestInstance {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, ground_truth: Option<Mask>) -> Self {
        Self {
            id: id.into(),
            image,
            ground_truth,
        }
    }

    pub fn ground_truth(&self) -> Option<&Mask> {
        self.ground_truth.as_ref()
    }
}

impl From<&SegSample> for TestInstance {
    fn from(s: &SegSample) -> Self {
        Self::new(s.id.clone(), s.image.clone(), s.mask.clone())
    }
}

pub fn test_instances(samples: &[SegSample]) -> Vec<TestInstance> {
    samples.iter().map(TestInstance::from).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub instance_id: String,
    pub mask: Mask,
    /// Foreground probability (binary) or class probabilities, when requested.
    pub probabilities: Option<Tensor<f32>>,
    pub wall_time_ms: f64,
    pub code_fingerprint: String,
}

/// Labels from logits `(1, K, *spatial)`: sigmoid of channel 1 above 0.5
/// for two classes, argmax otherwise.
pub fn decode_logits(logits: &Tensor<f32>) -> Result<Mask> {
    if logits.batch() != 1 {
        return Err(Error::Shape(format!("expected one logit map, got {:?}", logits.shape())));
    }
    let (k, s) = (logits.channels(), logits.spatial_len());
    let d = logits.item(0);
    let labels = match k {
        0 | 1 => return Err(Error::Shape("need at least two class channels".into())),
        2 => d[s..2 * s].iter().map(|&x| (sigmoid(x) > 0.5) as u8).collect(),
        _ => (0..s)
            .map(|p| {
                let mut best = 0;
                for c in 1..k {
                    if d[c * s + p] > d[best * s + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect(),
    };
    Mask::new(logits.spatial().to_vec(), labels)
}

/// Per-pixel class probabilities matching [`decode_logits`].
pub fn probabilities(logits: &Tensor<f32>) -> Tensor<f32> {
    if logits.channels() == 2 {
        let s = logits.spatial_len();
        let mut shape = logits.shape().to_vec();
        shape[1] = 1;
        Tensor::from_fn(&shape, |i| sigmoid(logits.data()[(i / s) * 2 * s + s + i % s]))
    } else {
        crate::training::softmax(logits)
    }
}

/// Adaptive UNet paired with its frozen prior generator.
#[derive(Clone, Debug)]
pub struct OnTheFly {
    net: UNet<f32>,
    dpg: DomainPriorGenerator,
    mode: StatsMode,
    keep_probabilities: bool,
}

impl OnTheFly {
    pub fn new(model: &ModelCheckpoint, dpg: &ModelCheckpoint) -> Result<Self> {
        let net = UNet::<f32>::from_checkpoint(model)?;
        if net.config().norm != NormKind::AdaBn {
            return Err(Error::Contract("on-the-fly adaptation needs an Adaptive UNet".into()));
        }
        let dpg = DomainPriorGenerator::from_checkpoint(dpg)?;
        match &model.dpg_fingerprint {
            Some(fp) if fp == dpg.fingerprint() => {}
            Some(fp) => {
                return Err(Error::Contract(format!(
                    "model was trained with prior generator {fp}, got {}",
                    dpg.fingerprint()
                )))
            }
            None => return Err(Error::Contract("model records no prior generator fingerprint".into())),
        }
        if dpg.config().code_channels != net.config().code_channels {
            return Err(Error::Contract(format!(
                "prior generator emits {} code channels, model expects {}",
                dpg.config().code_channels,
                net.config().code_channels
            )));
        }
        Ok(Self {
            net,
            dpg,
            mode: StatsMode::Instance,
            keep_probabilities: false,
        })
    }

    /// Uses frozen source running statistics for `μ(X), σ(X)` instead of
    /// instance statistics.
    pub fn with_running_stats(mut self, on: bool) -> Self {
        self.mode = if on { StatsMode::Running } else { StatsMode::Instance };
        self
    }

    pub fn with_probabilities(mut self, on: bool) -> Self {
        self.keep_probabilities = on;
        self
    }

    pub fn num_classes(&self) -> usize {
        self.net.config().num_classes
    }

    /// Encodes, then segments one instance.
    pub fn segment(&self, instance: &TestInstance) -> Result<EpisodeResult> {
        let start = Instant::now();
        let code = self.dpg.encode(&instance.image)?;
        let x = Tensor::stack(&[&instance.image])?;
        let logits = self.net.forward(&x, Some(std::slice::from_ref(&code)), self.mode)?;
        let mask = decode_logits(&logits)?;
        let probabilities = self.keep_probabilities.then(|| probabilities(&logits));
        Ok(EpisodeResult {
            instance_id: instance.id.clone(),
            mask,
            probabilities,
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
            code_fingerprint: code.fingerprint().to_string(),
        })
    }
}

/// Zero-shot, single-instance adaptation and segmentation.
pub fn adapt_and_segment(model: &ModelCheckpoint, dpg: &ModelCheckpoint, instance: &TestInstance) -> Result<EpisodeResult> {
    OnTheFly::new(model, dpg)?.segment(instance)
}

/// Segments every instance independently and scores it.
pub fn episodic_run(
    model: &ModelCheckpoint,
    dpg: &ModelCheckpoint,
    test_set: &[TestInstance],
    regions: Option<&RegionSpec>,
) -> Result<(Vec<EpisodeResult>, DiceReport)> {
    if let Some(i) = test_set.iter().find(|i| i.ground_truth().is_none()) {
        return Err(Error::Validation(format!("test instance {} has no ground truth", i.id)));
    }
    let runner = OnTheFly::new(model, dpg)?;
    let results = test_set
        .iter()
        .map(|i| runner.segment(i))
        .collect::<Result<Vec<_>>>()?;
    let mut meta = ReportMetadata::new("ours", "");
    meta.model_fingerprint = Some(model.fingerprint());
    meta.dpg_fingerprint = Some(dpg.fingerprint());
    meta.config_hash = model.metadata.config_hash.clone();
    let report = score_predictions(
        results
            .iter()
            .zip(test_set)
            .map(|(r, i)| (i.id.as_str(), &r.mask, i.ground_truth().expect("checked above"))),
        runner.num_classes(),
        regions,
        meta,
    )?;
    Ok((results, report))
}

pub fn episodic_eval(model: &ModelCheckpoint, dpg: &ModelCheckpoint, test_set: &[TestInstance]) -> Result<DiceReport> {
    episodic_run(model, dpg, test_set, None).map(|(_, r)| r)
}
