//! Adaptive UNet and its plain batch-norm counterpart, in 2D and 3D.
//!
//! Five encoder blocks (`conv -> norm -> ReLU`, max pooling between blocks)
//! and five decoder blocks (`conv -> norm -> ReLU`, upsampling after every
//! block but the last), with the pre-pool output of each of the first four
//! encoder blocks concatenated onto the matching decoder input. A 1x1 conv
//! maps the last decoder block to per-class logits.
//!
//! ```text
//! enc0 ─pool─ enc1 ─pool─ enc2 ─pool─ enc3 ─pool─ enc4
//!  │           │           │           │           │
//! dec0 ─up──  dec1 ─up──  dec2 ─up──  dec3 ─up──  dec4
//!  │
//! head (1x1 conv -> logits)
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Architecture, ModelCheckpoint, TrainingMetadata};
use crate::error::{Error, Result};
use crate::nn::{self, ops, BlockTrace, Conditioning, Conv, ConvBlock, Module, NormChoice, Visitor, VisitorMut};
use crate::normalization::{DomainCode, StatsMode, DEFAULT_EPS};
use crate::tensor::{Real, Tensor};

/// Number of conv blocks on each side of the UNet.
pub const UNET_BLOCKS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dimensionality {
    #[serde(rename = "2d")]
    D2,
    #[serde(rename = "3d")]
    D3,
}

impl Dimensionality {
    pub fn spatial_dims(self) -> usize {
        match self {
            Dimensionality::D2 => 2,
            Dimensionality::D3 => 3,
        }
    }

    /// Cubic kernel of side `k`.
    pub fn kernel(self, k: usize) -> Vec<usize> {
        vec![k; self.spatial_dims()]
    }

    pub fn from_spatial(spatial: &[usize]) -> Result<Self> {
        match spatial.len() {
            2 => Ok(Dimensionality::D2),
            3 => Ok(Dimensionality::D3),
            n => Err(Error::Shape(format!("expected 2 or 3 spatial dims, got {n}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    AdaBn,
    Bn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub dimensionality: Dimensionality,
    pub in_channels: usize,
    /// Label count including background.
    pub num_classes: usize,
    pub base_channels: usize,
    pub blocks: usize,
    pub norm: NormKind,
    /// Convolutions per block (1 or 2).
    pub convs_per_block: usize,
    /// Width of the domain code consumed by AdaBN layers; ignored for BN.
    pub code_channels: usize,
    pub eps: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            dimensionality: Dimensionality::D2,
            in_channels: 1,
            num_classes: 2,
            base_channels: 16,
            blocks: UNET_BLOCKS,
            norm: NormKind::AdaBn,
            convs_per_block: 2,
            code_channels: 64,
            eps: DEFAULT_EPS,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks != UNET_BLOCKS {
            return Err(Error::Validation(format!(
                "the UNet has exactly {UNET_BLOCKS} blocks per side, got {}",
                self.blocks
            )));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.code_channels == 0 {
            return Err(Error::Validation("channel counts must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Validation("num_classes counts background and must be >= 2".into()));
        }
        if !(1..=2).contains(&self.convs_per_block) {
            return Err(Error::Validation("convs_per_block must be 1 or 2".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Validation("eps must be positive".into()));
        }
        Ok(())
    }

    /// Output channels of each encoder block.
    pub fn channel_ladder(&self) -> Vec<usize> {
        (0..self.blocks).map(|i| self.base_channels << i).collect()
    }

    /// Spatial dims must survive four halvings.
    pub fn check_input(&self, spatial: &[usize]) -> Result<()> {
        let div = 1usize << (self.blocks - 1);
        if spatial.len() != self.dimensionality.spatial_dims() {
            return Err(Error::Shape(format!(
                "{:?} model got {} spatial dims",
                self.dimensionality,
                spatial.len()
            )));
        }
        if spatial.iter().any(|&s| s == 0 || s % div != 0) {
            return Err(Error::Shape(format!(
                "spatial dims {spatial:?} must be positive multiples of {div}"
            )));
        }
        Ok(())
    }
}

/// Segmentation network with weights in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet<T> {
    config: ArchConfig,
    encoder: Vec<ConvBlock<T>>,
    decoder: Vec<ConvBlock<T>>,
    head: Conv<T>,
}

/// Cached activations of one traced forward pass.
pub struct UNetTrace<T> {
    encoder: Vec<BlockTrace<T>>,
    pools: Vec<(Vec<usize>, Vec<u32>)>,
    decoder: Vec<BlockTrace<T>>,
    /// Input shape of each upsampling, indexed by decoder block.
    ups: Vec<Option<Vec<usize>>>,
    /// Channels coming from below at each concatenation.
    concat_split: Vec<usize>,
    head_input: Tensor<T>,
}

impl<T: Real> UNet<T> {
    /// Deterministic He initialization under `seed`.
    pub fn init(config: &ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernel = config.dimensionality.kernel(3);
        let eps = T::of(config.eps);
        let norm = match config.norm {
            NormKind::Bn => NormChoice::Bn,
            NormKind::AdaBn => NormChoice::AdaBn {
                code_channels: config.code_channels,
            },
        };
        let ch = config.channel_ladder();
        let last = config.blocks - 1;
        let encoder = (0..config.blocks)
            .map(|i| {
                let cin = if i == 0 { config.in_channels } else { ch[i - 1] };
                ConvBlock::init(cin, ch[i], config.convs_per_block, &kernel, norm, eps, &mut rng)
            })
            .collect();
        let decoder = (0..config.blocks)
            .map(|i| {
                let cin = if i == last { ch[last] } else { 2 * ch[i] };
                let cout = if i == 0 { ch[0] } else { ch[i - 1] };
                ConvBlock::init(cin, cout, config.convs_per_block, &kernel, norm, eps, &mut rng)
            })
            .collect();
        let head = Conv::init(
            config.num_classes,
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

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        let Architecture::Unet(config) = &ckpt.arch else {
            return Err(Error::Contract("checkpoint does not hold a segmentation UNet".into()));
        };
        let mut net = Self::init(config, 0)?;
        nn::assign(&mut net, &ckpt.weights)?;
        Ok(net)
    }

    pub fn to_checkpoint(&self, dpg_fingerprint: Option<String>, metadata: TrainingMetadata) -> ModelCheckpoint {
        ModelCheckpoint {
            arch: Architecture::Unet(self.config.clone()),
            weights: nn::export(self),
            dpg_fingerprint,
            metadata,
        }
    }

    fn check(&self, x: &Tensor<T>, codes: Option<&[DomainCode<T>]>) -> Result<()> {
        if x.ndim() < 3 || x.channels() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected (batch, {}, *spatial) input, got {:?}",
                self.config.in_channels,
                x.shape()
            )));
        }
        self.config.check_input(x.spatial())?;
        match (self.config.norm, codes) {
            (NormKind::AdaBn, None) => Err(Error::Contract("Adaptive UNet requires a domain code".into())),
            (NormKind::Bn, Some(_)) => Err(Error::Contract("plain UNet does not take a domain code".into())),
            (NormKind::AdaBn, Some(c)) => {
                if let Some(bad) = c.iter().find(|c| c.code_channels() != self.config.code_channels) {
                    return Err(Error::Shape(format!(
                        "domain code has {} channels, model expects {}",
                        bad.code_channels(),
                        self.config.code_channels
                    )));
                }
                Ok(())
            }
            (NormKind::Bn, None) => Ok(()),
        }
    }

    /// Logits `(batch, num_classes, *spatial)`. Pure in the weights.
    pub fn forward(&self, x: &Tensor<T>, codes: Option<&[DomainCode<T>]>, mode: StatsMode) -> Result<Tensor<T>> {
        self.check(x, codes)?;
        let cond = Conditioning { mode, codes };
        let last = self.config.blocks - 1;
        let mut skips = Vec::with_capacity(last);
        let mut h = x.clone();
        for (i, block) in self.encoder.iter().enumerate() {
            h = block.forward(&h, cond)?;
            if i < last {
                let (pooled, _) = ops::max_pool(&h)?;
                skips.push(h);
                h = pooled;
            }
        }
        for i in (0..=last).rev() {
            if i < last {
                h = ops::concat(&h, &skips[i])?;
            }
            h = self.decoder[i].forward(&h, cond)?;
            if i > 0 {
                h = ops::upsample(&h)?;
            }
        }
        self.head.forward(&h)
    }

    /// Forward pass that records what back-propagation needs.
    pub fn forward_traced(
        &self,
        x: &Tensor<T>,
        codes: Option<&[DomainCode<T>]>,
        mode: StatsMode,
    ) -> Result<(Tensor<T>, UNetTrace<T>)> {
        self.check(x, codes)?;
        let cond = Conditioning { mode, codes };
        let last = self.config.blocks - 1;
        let mut skips = Vec::with_capacity(last);
        let mut enc_traces = Vec::with_capacity(self.config.blocks);
        let mut pools = Vec::with_capacity(last);
        let mut h = x.clone();
        for (i, block) in self.encoder.iter().enumerate() {
            let (out, t) = block.forward_traced(&h, cond)?;
            enc_traces.push(t);
            h = out;
            if i < last {
                let (pooled, arg) = ops::max_pool(&h)?;
                pools.push((h.shape().to_vec(), arg));
                skips.push(h);
                h = pooled;
            }
        }
        let mut dec_traces: Vec<Option<BlockTrace<T>>> = (0..=last).map(|_| None).collect();
        let mut ups = vec![None; last + 1];
        let mut concat_split = vec![0; last];
        for i in (0..=last).rev() {
            if i < last {
                concat_split[i] = h.channels();
                h = ops::concat(&h, &skips[i])?;
            }
            let (out, t) = self.decoder[i].forward_traced(&h, cond)?;
            dec_traces[i] = Some(t);
            h = out;
            if i > 0 {
                ups[i] = Some(h.shape().to_vec());
                h = ops::upsample(&h)?;
            }
        }
        let logits = self.head.forward(&h)?;
        Ok((
            logits,
            UNetTrace {
                encoder: enc_traces,
                pools,
                decoder: dec_traces.into_iter().map(|t| t.expect("every decoder block ran")).collect(),
                ups,
                concat_split,
                head_input: h,
            },
        ))
    }

    /// Back-propagates `dlogits`; returns parameter gradients.
    pub fn backward(&self, trace: &UNetTrace<T>, dlogits: &Tensor<T>) -> UNet<T> {
        let mut grad = self.zeros_like();
        let last = self.config.blocks - 1;
        let mut d = self.head.backward(&trace.head_input, dlogits, &mut grad.head);
        let mut dskips: Vec<Option<Tensor<T>>> = vec![None; last];
        for i in 0..=last {
            if let Some(shape) = &trace.ups[i] {
                d = ops::upsample_backward(shape, &d);
            }
            d = self.decoder[i].backward(&trace.decoder[i], &d, &mut grad.decoder[i]);
            if i < last {
                let (below, skip) = ops::split(&d, trace.concat_split[i]);
                dskips[i] = Some(skip);
                d = below;
            }
        }
        for i in (0..=last).rev() {
            if i < last {
                let (shape, arg) = &trace.pools[i];
                d = ops::max_pool_backward(shape, arg, &d);
                let skip = dskips[i].take().expect("skip gradient computed");
                d.data_mut().iter_mut().zip(skip.data()).for_each(|(a, &b)| *a += b);
            }
            d = self.encoder[i].backward(&trace.encoder[i], &d, &mut grad.encoder[i]);
        }
        grad
    }

    /// Folds the batch statistics of a traced pass into running averages.
    pub fn update_running(&mut self, trace: &UNetTrace<T>, momentum: T) {
        for (b, t) in self.encoder.iter_mut().zip(&trace.encoder) {
            b.update_running(t, momentum);
        }
        for (b, t) in self.decoder.iter_mut().zip(&trace.decoder) {
            b.update_running(t, momentum);
        }
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, kind, _, d| {
            if kind.trainable() {
                n += d.len()
            }
        });
        n
    }
}

impl<T: Real> Module<T> for UNet<T> {
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

/// Untrained checkpoint, deterministic under `seed`.
pub fn build_model(config: &ArchConfig, seed: u64) -> Result<ModelCheckpoint> {
    let net = UNet::<f32>::init(config, seed)?;
    Ok(net.to_checkpoint(
        None,
        TrainingMetadata {
            seed,
            ..Default::default()
        },
    ))
}

/// Logits for a batch, straight from a checkpoint.
pub fn forward(
    model: &ModelCheckpoint,
    image: &Tensor<f32>,
    codes: Option<&[DomainCode<f32>]>,
    mode: StatsMode,
) -> Result<Tensor<f32>> {
    UNet::<f32>::from_checkpoint(model)?.forward(image, codes, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg(norm: NormKind, dims: Dimensionality, classes: usize) -> ArchConfig {
        ArchConfig {
            dimensionality: dims,
            num_classes: classes,
            base_channels: 4,
            norm,
            convs_per_block: 1,
            code_channels: 3,
            ..Default::default()
        }
    }

    fn code<T: Real>(seed: u64) -> DomainCode<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DomainCode::new(Tensor::from_fn(&[3, 2, 2], |_| T::of(rng.gen_range(0.0..2.0))), "t").unwrap()
    }

    #[test]
    fn channel_ladder_doubles() {
        let c = ArchConfig::default();
        assert_eq!(c.channel_ladder(), vec![16, 32, 64, 128, 256]);
        let net = UNet::<f32>::init(&c, 0).unwrap();
        let widths: Vec<_> = net.encoder.iter().map(|b| b.out_channels()).collect();
        assert_eq!(widths, vec![16, 32, 64, 128, 256]);
    }

    #[test]
    fn build_is_deterministic_and_bn_has_no_projection() {
        let c = cfg(NormKind::AdaBn, Dimensionality::D2, 2);
        assert_eq!(build_model(&c, 7).unwrap(), build_model(&c, 7).unwrap());
        assert_ne!(build_model(&c, 7).unwrap().weights, build_model(&c, 8).unwrap().weights);
        let bn = build_model(&cfg(NormKind::Bn, Dimensionality::D2, 2), 7).unwrap();
        assert!(bn.weights.keys().all(|k| !k.contains("code_projection")));
        let ada = build_model(&c, 7).unwrap();
        assert!(ada.weights.contains_key("encoder.block0.norm0.code_projection.weight"));
        assert!(ada.weights.contains_key("decoder.block4.conv0.weight"));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = cfg(NormKind::Bn, Dimensionality::D2, 2);
        c.blocks = 4;
        assert!(matches!(build_model(&c, 0), Err(Error::Validation(_))));
        let mut c = cfg(NormKind::Bn, Dimensionality::D2, 1);
        c.num_classes = 1;
        assert!(build_model(&c, 0).is_err());
    }

    #[test]
    fn forward_shapes_2d_and_3d() {
        let net = UNet::<f32>::init(&cfg(NormKind::AdaBn, Dimensionality::D2, 2), 1).unwrap();
        let x = Tensor::full(&[1, 1, 64, 64], 0.5f32);
        let x = x.map(|v| v + 0.01);
        let codes = [code::<f32>(1)];
        let y = net.forward(&x, Some(&codes), StatsMode::Batch).unwrap();
        assert_eq!(y.shape(), &[1, 2, 64, 64]);

        let net = UNet::<f32>::init(&cfg(NormKind::Bn, Dimensionality::D3, 4), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_fn(&[1, 1, 32, 32, 32], |_| rng.gen::<f32>());
        let y = net.forward(&x, None, StatsMode::Instance).unwrap();
        assert_eq!(y.shape(), &[1, 4, 32, 32, 32]);
    }

    #[test]
    fn forward_contract_errors() {
        let net = UNet::<f32>::init(&cfg(NormKind::AdaBn, Dimensionality::D2, 2), 1).unwrap();
        let x = Tensor::full(&[1, 1, 16, 16], 0.5f32);
        assert!(matches!(net.forward(&x, None, StatsMode::Batch), Err(Error::Contract(_))));
        let bad = Tensor::full(&[1, 1, 24, 16], 0.5f32);
        assert!(matches!(
            net.forward(&bad, Some(&[code(0)]), StatsMode::Batch),
            Err(Error::Shape(_))
        ));
        let plain = UNet::<f32>::init(&cfg(NormKind::Bn, Dimensionality::D2, 2), 1).unwrap();
        assert!(matches!(
            plain.forward(&x, Some(&[code(0)]), StatsMode::Batch),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn forward_is_pure_and_code_sensitive() {
        let ckpt = build_model(&cfg(NormKind::AdaBn, Dimensionality::D2, 2), 3).unwrap();
        let hash = ckpt.weights_hash();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[1, 1, 16, 16], |_| rng.gen::<f32>());
        let a = forward(&ckpt, &x, Some(&[code(1)]), StatsMode::Instance).unwrap();
        let b = forward(&ckpt, &x, Some(&[code(1)]), StatsMode::Instance).unwrap();
        assert_eq!(a.data(), b.data());
        let c = forward(&ckpt, &x, Some(&[code(2)]), StatsMode::Instance).unwrap();
        assert!(a.max_abs_diff(&c) > 0.0);
        assert_eq!(ckpt.weights_hash(), hash);
    }

    #[test]
    fn checkpoint_roundtrip_through_module() {
        let ckpt = build_model(&cfg(NormKind::AdaBn, Dimensionality::D3, 3), 11).unwrap();
        let net = UNet::<f32>::from_checkpoint(&ckpt).unwrap();
        assert_eq!(net.to_checkpoint(None, ckpt.metadata.clone()), ckpt);
        let mut broken = ckpt.clone();
        broken.weights.remove("head.bias");
        assert!(matches!(UNet::<f32>::from_checkpoint(&broken), Err(Error::Contract(_))));
    }

    /// Loss used for gradient checks: weighted sum of logits.
    fn probe_loss(net: &UNet<f64>, x: &Tensor<f64>, codes: &[DomainCode<f64>], w: &Tensor<f64>) -> f64 {
        let y = net.forward(x, Some(codes), StatsMode::Batch).unwrap();
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn backward_matches_finite_differences_on_sampled_weights() {
        let mut c = cfg(NormKind::AdaBn, Dimensionality::D2, 2);
        c.base_channels = 2;
        c.convs_per_block = 2;
        let net = UNet::<f64>::init(&c, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(&[2, 1, 16, 16], |_| rng.gen_range(0.0..1.0));
        let codes = [code::<f64>(3), code::<f64>(4)];
        let (y, trace) = net.forward_traced(&x, Some(&codes), StatsMode::Batch).unwrap();
        let w = Tensor::from_fn(y.shape(), |_| rng.gen_range(-1.0..1.0));
        let grad = net.backward(&trace, &w);
        let analytic = nn::flatten(&grad);
        let h = 1e-5;
        for (pi, (name, kind, _, g)) in analytic.iter().enumerate() {
            if !kind.trainable() {
                continue;
            }
            for &j in &[0usize, g.len() / 2, g.len() - 1] {
                let mut plus = net.clone();
                let mut minus = net.clone();
                let mut idx = 0;
                plus.visit_mut("", &mut |_, _, _, d| {
                    if idx == pi {
                        d[j] += h;
                    }
                    idx += 1;
                });
                idx = 0;
                minus.visit_mut("", &mut |_, _, _, d| {
                    if idx == pi {
                        d[j] -= h;
                    }
                    idx += 1;
                });
                let num = (probe_loss(&plus, &x, &codes, &w) - probe_loss(&minus, &x, &codes, &w)) / (2.0 * h);
                let err = (num - g[j]).abs() / (num.abs() + g[j].abs()).max(1e-6);
                assert!(err < 1e-3, "{name}[{j}]: analytic {} numeric {num}", g[j]);
            }
        }
    }
}
