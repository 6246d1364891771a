//! Domain prior generator: a convolutional autoencoder trained to restore
//! clean images from augmented ones. Its frozen encoder maps an image to a
//! [`DomainCode`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Architecture, EpochLog, ModelCheckpoint, TrainingMetadata};
use crate::error::{Error, Result};
use crate::model::Dimensionality;
use crate::nn::{self, ops, Adam, BlockTrace, Conditioning, Conv, ConvBlock, Module, NormChoice, Visitor, VisitorMut};
use crate::normalization::{DomainCode, StatsMode};
use crate::tensor::{Real, Tensor};
use crate::training::{cosine_lr, TrainConfig};
use crate::transforms;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugSpec {
    pub gamma_range: (f64, f64),
    pub noise_std: f64,
    pub blur_sigma_range: (f64, f64),
    pub flip_prob: f64,
}

impl Default for AugSpec {
    fn default() -> Self {
        Self {
            gamma_range: (0.7, 1.5),
            noise_std: 0.03,
            blur_sigma_range: (0.0, 1.0),
            flip_prob: 0.5,
        }
    }
}

impl AugSpec {
    pub fn identity() -> Self {
        Self {
            gamma_range: (1.0, 1.0),
            noise_std: 0.0,
            blur_sigma_range: (0.0, 0.0),
            flip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (glo, ghi) = self.gamma_range;
        let (blo, bhi) = self.blur_sigma_range;
        if !(glo > 0.0 && glo <= ghi) {
            return Err(Error::Validation(format!("bad gamma range ({glo}, {ghi})")));
        }
        if !(blo >= 0.0 && blo <= bhi) {
            return Err(Error::Validation(format!("bad blur sigma range ({blo}, {bhi})")));
        }
        if !(self.noise_std >= 0.0) || !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Validation("noise_std must be >= 0 and flip_prob in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpgConfig {
    pub dimensionality: Dimensionality,
    pub in_channels: usize,
    /// Encoder stages, each followed by a 2x pooling.
    pub depth: usize,
    pub base_channels: usize,
    pub code_channels: usize,
    pub convs_per_block: usize,
    pub augmentation: AugSpec,
    pub eps: f64,
}

impl Default for DpgConfig {
    fn default() -> Self {
        Self {
            dimensionality: Dimensionality::D2,
            in_channels: 1,
            depth: 4,
            base_channels: 8,
            code_channels: 64,
            convs_per_block: 1,
            augmentation: AugSpec::default(),
            eps: 1e-5,
        }
    }
}

impl DpgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Validation("depth, base_channels and in_channels must be >= 1".into()));
        }
        if !(1..=2).contains(&self.convs_per_block) {
            return Err(Error::Validation("convs_per_block must be 1 or 2".into()));
        }
        let expected = self.base_channels << (self.depth - 1);
        if self.code_channels != expected {
            return Err(Error::Validation(format!(
                "code_channels must be base_channels * 2^(depth-1) = {expected}, got {}",
                self.code_channels
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Validation("eps must be positive".into()));
        }
        self.augmentation.validate()
    }

    pub fn channel_ladder(&self) -> Vec<usize> {
        (0..self.depth).map(|i| self.base_channels << i).collect()
    }

    fn check_spatial(&self, spatial: &[usize]) -> Result<()> {
        let factor = 1usize << self.depth;
        if spatial.len() != self.dimensionality.spatial_dims() {
            return Err(Error::Shape(format!(
                "prior generator is {:?}, input has {} spatial dims",
                self.dimensionality,
                spatial.len()
            )));
        }
        if spatial.iter().any(|&d| d == 0 || d % factor != 0) {
            return Err(Error::Shape(format!(
                "spatial dims {spatial:?} must be divisible by {factor}"
            )));
        }
        Ok(())
    }
}

/// Augments one image `(channels, *spatial)` with intensities in `[0, 1]`.
///
/// Order: gamma, noise, blur, flip; the result is clipped to `[0, 1]`.
pub fn augment(image: &Tensor<f32>, spec: &AugSpec, seed: u64) -> Result<Tensor<f32>> {
    spec.validate()?;
    transforms::check_unit_range(image)?;
    let (img, _) = augment_pair(image, None, spec, seed)?;
    Ok(img)
}

/// Augments an input and returns it with the target, flipped consistently.
fn augment_pair(
    image: &Tensor<f32>,
    target: Option<&Tensor<f32>>,
    spec: &AugSpec,
    seed: u64,
) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = sample_range(&mut rng, spec.gamma_range);
    let sigma = sample_range(&mut rng, spec.blur_sigma_range);
    let flip = rng.gen::<f64>() < spec.flip_prob;
    let mut out = transforms::gamma(image, g);
    out = transforms::add_noise(&out, spec.noise_std, &mut rng)?;
    out = transforms::gaussian_blur(&out, sigma)?;
    let mut target = target.cloned();
    if flip {
        let width = *image.shape().last().expect("image has spatial dims");
        transforms::flip_last_axis(out.data_mut(), width);
        if let Some(t) = target.as_mut() {
            transforms::flip_last_axis(t.data_mut(), width);
        }
    }
    transforms::clip_unit(&mut out);
    Ok((out, target))
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Skip-free encoder/decoder with batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder<T> {
    config: DpgConfig,
    encoder: Vec<ConvBlock<T>>,
    decoder: Vec<ConvBlock<T>>,
    head: Conv<T>,
}

struct AutoencoderTrace<T> {
    encoder: Vec<BlockTrace<T>>,
    pools: Vec<(Vec<usize>, Vec<u32>)>,
    decoder: Vec<BlockTrace<T>>,
    ups: Vec<Vec<usize>>,
    head_input: Tensor<T>,
}

impl<T: Real> Autoencoder<T> {
    pub fn init(config: &DpgConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernel = config.dimensionality.kernel(3);
        let eps = T::of(config.eps);
        let ch = config.channel_ladder();
        let encoder = (0..config.depth)
            .map(|i| {
                let cin = if i == 0 { config.in_channels } else { ch[i - 1] };
                ConvBlock::init(cin, ch[i], config.convs_per_block, &kernel, NormChoice::Bn, eps, &mut rng)
            })
            .collect();
        let decoder = (0..config.depth)
            .map(|i| {
                let cout = if i == 0 { ch[0] } else { ch[i - 1] };
                ConvBlock::init(ch[i], cout, config.convs_per_block, &kernel, NormChoice::Bn, eps, &mut rng)
            })
            .collect();
        let head = Conv::init(
            config.in_channels,
            ch[0],
            &config.dimensionality.kernel(1),
            true,
            &mut rng,
        );
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &DpgConfig {
        &self.config
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        let Architecture::Dpg(config) = &ckpt.arch else {
            return Err(Error::Contract("checkpoint does not hold a domain prior generator".into()));
        };
        let mut net = Self::init(config, 0)?;
        nn::assign(&mut net, &ckpt.weights)?;
        Ok(net)
    }

    pub fn to_checkpoint(&self, metadata: TrainingMetadata) -> ModelCheckpoint {
        ModelCheckpoint {
            arch: Architecture::Dpg(self.config.clone()),
            weights: nn::export(self),
            dpg_fingerprint: None,
            metadata,
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.ndim() < 3 || x.channels() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected (batch, {}, *spatial) input, got {:?}",
                self.config.in_channels,
                x.shape()
            )));
        }
        self.config.check_spatial(x.spatial())
    }

    /// Bottleneck features `(batch, code_channels, *spatial / 2^depth)`.
    pub fn encode(&self, x: &Tensor<T>, mode: StatsMode) -> Result<Tensor<T>> {
        self.check(x)?;
        let cond = Conditioning { mode, codes: None };
        let mut h = x.clone();
        for block in &self.encoder {
            h = block.forward(&h, cond)?;
            h = ops::max_pool(&h)?.0;
        }
        Ok(h)
    }

    pub fn decode(&self, code: &Tensor<T>, mode: StatsMode) -> Result<Tensor<T>> {
        let cond = Conditioning { mode, codes: None };
        let mut h = code.clone();
        for block in self.decoder.iter().rev() {
            h = ops::upsample(&h)?;
            h = block.forward(&h, cond)?;
        }
        self.head.forward(&h)
    }

    /// Reconstruction with the same shape as the input.
    pub fn forward(&self, x: &Tensor<T>, mode: StatsMode) -> Result<Tensor<T>> {
        let code = self.encode(x, mode)?;
        self.decode(&code, mode)
    }

    fn forward_traced(&self, x: &Tensor<T>) -> Result<(Tensor<T>, AutoencoderTrace<T>)> {
        self.check(x)?;
        let cond = Conditioning {
            mode: StatsMode::Batch,
            codes: None,
        };
        let mut h = x.clone();
        let mut encoder = Vec::with_capacity(self.config.depth);
        let mut pools = Vec::with_capacity(self.config.depth);
        for block in &self.encoder {
            let (out, t) = block.forward_traced(&h, cond)?;
            encoder.push(t);
            let (pooled, arg) = ops::max_pool(&out)?;
            pools.push((out.shape().to_vec(), arg));
            h = pooled;
        }
        let mut decoder = Vec::with_capacity(self.config.depth);
        let mut ups = Vec::with_capacity(self.config.depth);
        for block in self.decoder.iter().rev() {
            ups.push(h.shape().to_vec());
            h = ops::upsample(&h)?;
            let (out, t) = block.forward_traced(&h, cond)?;
            decoder.push(t);
            h = out;
        }
        // stored in block order
        decoder.reverse();
        ups.reverse();
        let y = self.head.forward(&h)?;
        Ok((
            y,
            AutoencoderTrace {
                encoder,
                pools,
                decoder,
                ups,
                head_input: h,
            },
        ))
    }

    fn backward(&self, trace: &AutoencoderTrace<T>, dy: &Tensor<T>) -> Self {
        let mut grad = self.zeros_like();
        let mut d = self.head.backward(&trace.head_input, dy, &mut grad.head);
        for i in 0..self.config.depth {
            d = self.decoder[i].backward(&trace.decoder[i], &d, &mut grad.decoder[i]);
            d = ops::upsample_backward(&trace.ups[i], &d);
        }
        for i in (0..self.config.depth).rev() {
            let (shape, arg) = &trace.pools[i];
            d = ops::max_pool_backward(shape, arg, &d);
            d = self.encoder[i].backward(&trace.encoder[i], &d, &mut grad.encoder[i]);
        }
        grad
    }

    fn update_running(&mut self, trace: &AutoencoderTrace<T>, momentum: T) {
        for (b, t) in self.encoder.iter_mut().zip(&trace.encoder) {
            b.update_running(t, momentum);
        }
        for (b, t) in self.decoder.iter_mut().zip(&trace.decoder) {
            b.update_running(t, momentum);
        }
    }
}

impl<T: Real> Module<T> for Autoencoder<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&nn::join(prefix, &format!("encoder.block{i}")), f);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            b.visit(&nn::join(prefix, &format!("decoder.block{i}")), f);
        }
        self.head.visit(&nn::join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&nn::join(prefix, &format!("encoder.block{i}")), f);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit_mut(&nn::join(prefix, &format!("decoder.block{i}")), f);
        }
        self.head.visit_mut(&nn::join(prefix, "head"), f);
    }
}

fn mse_with_grad(y: &Tensor<f32>, target: &Tensor<f32>) -> (f64, Tensor<f32>) {
    let m = y.len() as f32;
    let mut loss = 0.0f64;
    let grad = y
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = a - b;
            loss += (d as f64) * (d as f64);
            2.0 * d / m
        })
        .collect();
    (loss / y.len() as f64, Tensor::new(y.shape().to_vec(), grad).expect("same shape"))
}

fn mix_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng.gen()
}

/// Untrained generator checkpoint.
pub fn build_dpg(config: &DpgConfig, seed: u64) -> Result<ModelCheckpoint> {
    let net = Autoencoder::<f32>::init(config, seed)?;
    Ok(net.to_checkpoint(TrainingMetadata {
        seed,
        ..Default::default()
    }))
}

/// Trains the autoencoder from scratch to restore clean images from their
/// augmented versions, with an MSE objective.
pub fn pretrain_dpg(corpus: &[Tensor<f32>], config: &DpgConfig, train: &TrainConfig) -> Result<ModelCheckpoint> {
    let init = build_dpg(config, train.seed)?;
    continue_pretraining(&init, corpus, train)
}

/// Runs the reconstruction training loop starting from `start`.
pub fn continue_pretraining(start: &ModelCheckpoint, corpus: &[Tensor<f32>], train: &TrainConfig) -> Result<ModelCheckpoint> {
    train.validate()?;
    if corpus.is_empty() {
        return Err(Error::Validation("prior generator corpus is empty".into()));
    }
    let mut net = Autoencoder::<f32>::from_checkpoint(start)?;
    let spec = net.config().augmentation.clone();
    for img in corpus {
        net.config().check_spatial(&img.shape()[1..])?;
        transforms::check_unit_range(img)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut opt = Adam::<f32>::new(train.adam());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut log = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let lr = cosine_lr(epoch, train.epochs, train.lr_max, train.lr_min);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(train.batch_size) {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (x, t) = augment_pair(&corpus[i], Some(&corpus[i]), &spec, mix_seed(train.seed, epoch, i))?;
                inputs.push(x);
                targets.push(t.expect("target requested"));
            }
            let x = Tensor::stack(&inputs.iter().collect::<Vec<_>>())?;
            let target = Tensor::stack(&targets.iter().collect::<Vec<_>>())?;
            let (y, trace) = net.forward_traced(&x)?;
            let (loss, dy) = mse_with_grad(&y, &target);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("reconstruction loss diverged at epoch {epoch}")));
            }
            let grad = net.backward(&trace, &dy);
            opt.step(&mut net, &grad, lr, |_| true);
            if lr != 0.0 {
                net.update_running(&trace, train.bn_momentum as f32);
            }
            loss_sum += loss;
            batches += 1;
        }
        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / batches as f64,
            lr,
            dice_loss: None,
        });
    }
    Ok(net.to_checkpoint(TrainingMetadata {
        epochs: train.epochs,
        seed: train.seed,
        loss_curve: log,
        config_hash: start.metadata.config_hash.clone(),
        notes: start.metadata.notes.clone(),
    }))
}

/// Mean squared error of clean-input reconstructions, with frozen statistics.
pub fn reconstruction_mse(dpg: &ModelCheckpoint, images: &[Tensor<f32>]) -> Result<f64> {
    let net = Autoencoder::<f32>::from_checkpoint(dpg)?;
    if images.is_empty() {
        return Err(Error::Validation("no images to reconstruct".into()));
    }
    let mut total = 0.0;
    for img in images {
        let x = Tensor::stack(&[img])?;
        let y = net.forward(&x, StatsMode::Running)?;
        total += mse_with_grad(&y, &x).0;
    }
    Ok(total / images.len() as f64)
}

/// Frozen encoder of a trained autoencoder.
#[derive(Clone, Debug)]
pub struct DomainPriorGenerator {
    net: Autoencoder<f32>,
    fingerprint: String,
}

impl DomainPriorGenerator {
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        Ok(Self {
            net: Autoencoder::from_checkpoint(ckpt)?,
            fingerprint: ckpt.fingerprint(),
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn config(&self) -> &DpgConfig {
        self.net.config()
    }

    /// Code of one image `(channels, *spatial)`.
    pub fn encode(&self, image: &Tensor<f32>) -> Result<DomainCode<f32>> {
        if image.ndim() != self.config().dimensionality.spatial_dims() + 1 {
            return Err(Error::Shape(format!(
                "{:?} prior generator cannot encode an image of shape {:?}",
                self.config().dimensionality,
                image.shape()
            )));
        }
        let x = Tensor::stack(&[image])?;
        let code = self.net.encode(&x, StatsMode::Running)?.squeeze_batch()?;
        DomainCode::new(code, self.fingerprint.clone())
    }
}

/// One feed-forward through the frozen encoder.
pub fn encode_domain(image: &Tensor<f32>, dpg: &ModelCheckpoint) -> Result<DomainCode<f32>> {
    DomainPriorGenerator::from_checkpoint(dpg)?.encode(image)
}
