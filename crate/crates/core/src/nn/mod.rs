//! Layer plumbing shared by the segmentation network and the domain prior
//! generator: parameterized layers, named parameter traversal, traced
//! forward passes for back-propagation and the Adam optimizer.

pub(crate) mod ops;

mod adam;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use adam::{Adam, AdamConfig};

use crate::error::{Error, Result};
use crate::normalization::{
    ada_bn_backward, ada_bn_forward_traced, batch_norm_backward, batch_norm_traced, AdaBnState,
    AdaBnTrace, ChannelStats, CodeProjection, DomainCode, NormTrace, StatsMode,
};
use crate::tensor::{Real, Tensor};

/// Counts every construction of back-propagation state. Inference paths must
/// leave it untouched.
pub mod probe {
    use std::sync::atomic::{AtomicU64, Ordering};

    static EVENTS: AtomicU64 = AtomicU64::new(0);

    /// Traced forward passes plus backward passes run in this process so far.
    pub fn autograd_events() -> u64 {
        EVENTS.load(Ordering::SeqCst)
    }

    pub(crate) fn record() {
        EVENTS.fetch_add(1, Ordering::SeqCst);
    }
}

/// Role of a named parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    /// Normalization scale `gamma`.
    NormScale,
    /// Normalization shift `beta`.
    NormShift,
    ProjectionWeight,
    ProjectionBias,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn is_norm_affine(self) -> bool {
        matches!(self, ParamKind::NormScale | ParamKind::NormShift)
    }
}

pub(crate) type Visitor<'a, T> = dyn FnMut(&str, ParamKind, &[usize], &[T]) + 'a;
pub(crate) type VisitorMut<'a, T> = dyn FnMut(&str, ParamKind, &[usize], &mut [T]) + 'a;

/// Deterministic traversal of named parameters.
pub trait Module<T: Real> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>);
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>);

    /// Copy with every parameter zeroed, for gradient accumulation.
    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut g = self.clone();
        g.visit_mut("", &mut |_, _, _, v| v.fill(T::zero()));
        g
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Stride-1 same-padding convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Real> Conv<T> {
    /// He-normal initialization.
    pub fn init(cout: usize, cin: usize, kernel: &[usize], bias: bool, rng: &mut impl Rng) -> Self {
        let mut shape = vec![cout, cin];
        shape.extend_from_slice(kernel);
        let fan_in = cin * kernel.iter().product::<usize>();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        Self {
            weight: Tensor::from_fn(&shape, |_| T::of(normal.sample(rng))),
            bias: bias.then(|| vec![T::zero(); cout]),
        }
    }

    #[cfg(test)]
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv(x, &self.weight, self.bias.as_deref())
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grad: &mut Conv<T>) -> Tensor<T> {
        ops::conv_backward(x, &self.weight, dy, &mut grad.weight, grad.bias.as_deref_mut())
    }
}

impl<T: Real> Module<T> for Conv<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(&join(prefix, "weight"), ParamKind::ConvWeight, self.weight.shape(), self.weight.data());
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), ParamKind::ConvBias, &[b.len()], b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        let shape = self.weight.shape().to_vec();
        f(&join(prefix, "weight"), ParamKind::ConvWeight, &shape, self.weight.data_mut());
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), ParamKind::ConvBias, &[b.len()], b);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Affine<T> {
    Bn { gamma: Vec<T>, beta: Vec<T> },
    AdaBn(AdaBnState<T>),
}

/// BN or AdaBN layer with running statistics of its input features.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct NormLayer<T> {
    pub affine: Affine<T>,
    pub eps: T,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// How normalization layers obtain their statistics during one forward pass.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conditioning<'a, T> {
    pub mode: StatsMode,
    pub codes: Option<&'a [DomainCode<T>]>,
}

#[derive(Clone, Debug)]
pub(crate) enum NormLayerTrace<T> {
    Bn(NormTrace<T>),
    AdaBn(AdaBnTrace<T>),
}

impl<T> NormLayerTrace<T> {
    fn norm(&self) -> &NormTrace<T> {
        match self {
            NormLayerTrace::Bn(t) => t,
            NormLayerTrace::AdaBn(t) => t.norm(),
        }
    }
}

impl<T: Real> NormLayer<T> {
    pub fn batch_norm(channels: usize, eps: T) -> Self {
        Self {
            affine: Affine::Bn {
                gamma: vec![T::one(); channels],
                beta: vec![T::zero(); channels],
            },
            eps,
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    /// AdaBN layer with a random projection of `code_channels` inputs.
    pub fn ada_bn(channels: usize, code_channels: usize, eps: T, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / code_channels as f64).sqrt()).expect("positive std");
        let projection = CodeProjection {
            weight: Tensor::from_fn(&[channels, code_channels], |_| T::of(normal.sample(rng))),
            bias: vec![T::zero(); channels],
        };
        Self {
            affine: Affine::AdaBn(AdaBnState::new(projection, eps).expect("valid AdaBN state")),
            eps,
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    fn running(&self) -> ChannelStats<T> {
        ChannelStats::from_running(&self.running_mean, &self.running_var, self.eps)
    }

    pub fn forward_traced(&self, x: &Tensor<T>, cond: Conditioning<'_, T>) -> Result<(Tensor<T>, NormLayerTrace<T>)> {
        let running = (cond.mode == StatsMode::Running).then(|| self.running());
        match &self.affine {
            Affine::Bn { gamma, beta } => {
                let (z, t) = batch_norm_traced(x, gamma, beta, self.eps, cond.mode, running.as_ref())?;
                Ok((z, NormLayerTrace::Bn(t)))
            }
            Affine::AdaBn(state) => {
                let codes = cond
                    .codes
                    .ok_or_else(|| Error::Contract("AdaBN layers need a domain code".into()))?;
                let (z, t) = ada_bn_forward_traced(x, codes, state, cond.mode, running.as_ref())?;
                Ok((z, NormLayerTrace::AdaBn(t)))
            }
        }
    }

    pub fn backward(&self, trace: &NormLayerTrace<T>, dy: &Tensor<T>, grad: &mut NormLayer<T>) -> Tensor<T> {
        match (&self.affine, trace, &mut grad.affine) {
            (Affine::Bn { gamma, .. }, NormLayerTrace::Bn(t), Affine::Bn { gamma: dg, beta: db }) => {
                batch_norm_backward(t, dy, gamma, dg, db)
            }
            (Affine::AdaBn(state), NormLayerTrace::AdaBn(t), Affine::AdaBn(g)) => {
                ada_bn_backward(t, dy, state, g)
            }
            _ => unreachable!("gradient container mirrors the layer"),
        }
    }

    /// Exponential moving average of batch statistics.
    pub fn update_running(&mut self, trace: &NormLayerTrace<T>, momentum: T) {
        let t = trace.norm();
        if t.mode() != StatsMode::Batch {
            return;
        }
        for (r, &m) in self.running_mean.iter_mut().zip(&t.mean) {
            *r = (T::one() - momentum) * *r + momentum * m;
        }
        for (r, &v) in self.running_var.iter_mut().zip(&t.var) {
            *r = (T::one() - momentum) * *r + momentum * v;
        }
    }
}

impl<T: Real> Module<T> for NormLayer<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        match &self.affine {
            Affine::Bn { gamma, beta } => {
                f(&join(prefix, "gamma"), ParamKind::NormScale, &[gamma.len()], gamma);
                f(&join(prefix, "beta"), ParamKind::NormShift, &[beta.len()], beta);
            }
            Affine::AdaBn(s) => {
                f(&join(prefix, "gamma"), ParamKind::NormScale, &[s.gamma.len()], &s.gamma);
                f(&join(prefix, "beta"), ParamKind::NormShift, &[s.beta.len()], &s.beta);
                let w = &s.projection.weight;
                f(&join(prefix, "code_projection.weight"), ParamKind::ProjectionWeight, w.shape(), w.data());
                let b = &s.projection.bias;
                f(&join(prefix, "code_projection.bias"), ParamKind::ProjectionBias, &[b.len()], b);
            }
        }
        let c = self.running_mean.len();
        f(&join(prefix, "running_mean"), ParamKind::RunningMean, &[c], &self.running_mean);
        f(&join(prefix, "running_var"), ParamKind::RunningVar, &[c], &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        match &mut self.affine {
            Affine::Bn { gamma, beta } => {
                f(&join(prefix, "gamma"), ParamKind::NormScale, &[gamma.len()], gamma);
                f(&join(prefix, "beta"), ParamKind::NormShift, &[beta.len()], beta);
            }
            Affine::AdaBn(s) => {
                f(&join(prefix, "gamma"), ParamKind::NormScale, &[s.gamma.len()], &mut s.gamma);
                f(&join(prefix, "beta"), ParamKind::NormShift, &[s.beta.len()], &mut s.beta);
                let shape = s.projection.weight.shape().to_vec();
                f(
                    &join(prefix, "code_projection.weight"),
                    ParamKind::ProjectionWeight,
                    &shape,
                    s.projection.weight.data_mut(),
                );
                let n = s.projection.bias.len();
                f(&join(prefix, "code_projection.bias"), ParamKind::ProjectionBias, &[n], &mut s.projection.bias);
            }
        }
        let c = self.running_mean.len();
        f(&join(prefix, "running_mean"), ParamKind::RunningMean, &[c], &mut self.running_mean);
        f(&join(prefix, "running_var"), ParamKind::RunningVar, &[c], &mut self.running_var);
    }
}

/// Norm selection for a conv block.
#[derive(Clone, Copy, Debug)]
pub(crate) enum NormChoice {
    Bn,
    AdaBn { code_channels: usize },
}

/// One or more `conv -> norm -> ReLU` steps at a fixed resolution.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvBlock<T> {
    pub steps: Vec<(Conv<T>, NormLayer<T>)>,
}

#[derive(Clone, Debug)]
struct StepTrace<T> {
    input: Tensor<T>,
    norm: NormLayerTrace<T>,
    output: Tensor<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockTrace<T> {
    steps: Vec<StepTrace<T>>,
}

impl<T: Real> ConvBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        cin: usize,
        cout: usize,
        convs: usize,
        kernel: &[usize],
        norm: NormChoice,
        eps: T,
        rng: &mut impl Rng,
    ) -> Self {
        let steps = (0..convs)
            .map(|j| {
                let conv = Conv::init(cout, if j == 0 { cin } else { cout }, kernel, false, rng);
                let norm = match norm {
                    NormChoice::Bn => NormLayer::batch_norm(cout, eps),
                    NormChoice::AdaBn { code_channels } => NormLayer::ada_bn(cout, code_channels, eps, rng),
                };
                (conv, norm)
            })
            .collect();
        Self { steps }
    }

    #[cfg(test)]
    pub fn out_channels(&self) -> usize {
        self.steps.last().map(|(c, _)| c.out_channels()).unwrap_or(0)
    }

    pub fn forward(&self, x: &Tensor<T>, cond: Conditioning<'_, T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (conv, norm) in &self.steps {
            let z = conv.forward(&h)?;
            let (z, _) = norm.forward_traced(&z, cond)?;
            h = ops::relu(&z);
        }
        Ok(h)
    }

    pub fn forward_traced(&self, x: &Tensor<T>, cond: Conditioning<'_, T>) -> Result<(Tensor<T>, BlockTrace<T>)> {
        probe::record();
        let mut h = x.clone();
        let mut steps = Vec::with_capacity(self.steps.len());
        for (conv, norm) in &self.steps {
            let z = conv.forward(&h)?;
            let (z, nt) = norm.forward_traced(&z, cond)?;
            let out = ops::relu(&z);
            steps.push(StepTrace {
                input: h,
                norm: nt,
                output: out.clone(),
            });
            h = out;
        }
        Ok((h, BlockTrace { steps }))
    }

    pub fn backward(&self, trace: &BlockTrace<T>, dy: &Tensor<T>, grad: &mut ConvBlock<T>) -> Tensor<T> {
        probe::record();
        let mut d = dy.clone();
        for ((step, (conv, norm)), (gconv, gnorm)) in trace
            .steps
            .iter()
            .zip(&self.steps)
            .zip(grad.steps.iter_mut())
            .rev()
        {
            let dz = ops::relu_backward(&step.output, &d);
            let dz = norm.backward(&step.norm, &dz, gnorm);
            d = conv.backward(&step.input, &dz, gconv);
        }
        d
    }

    pub fn update_running(&mut self, trace: &BlockTrace<T>, momentum: T) {
        for ((_, norm), step) in self.steps.iter_mut().zip(&trace.steps) {
            norm.update_running(&step.norm, momentum);
        }
    }
}

impl<T: Real> Module<T> for ConvBlock<T> {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_, T>) {
        for (j, (conv, norm)) in self.steps.iter().enumerate() {
            conv.visit(&join(prefix, &format!("conv{j}")), f);
            norm.visit(&join(prefix, &format!("norm{j}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_, T>) {
        for (j, (conv, norm)) in self.steps.iter_mut().enumerate() {
            conv.visit_mut(&join(prefix, &format!("conv{j}")), f);
            norm.visit_mut(&join(prefix, &format!("norm{j}")), f);
        }
    }
}

/// Snapshot of all parameters of a module, in traversal order.
#[cfg(test)]
pub(crate) fn flatten<T: Real, M: Module<T>>(m: &M) -> Vec<(String, ParamKind, Vec<usize>, Vec<T>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, kind, shape, data| {
        out.push((name.to_string(), kind, shape.to_vec(), data.to_vec()))
    });
    out
}

/// Named weights of a module as `f32` tensors.
pub(crate) fn export<T: Real, M: Module<T>>(m: &M) -> BTreeMap<String, Tensor<f32>> {
    let mut out = BTreeMap::new();
    m.visit("", &mut |name, _, shape, data| {
        let t = Tensor::new(shape.to_vec(), data.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect())
            .expect("visited shape matches data");
        out.insert(name.to_string(), t);
    });
    out
}

/// Overwrites every parameter of `m` from a weight map. Every parameter must
/// be present with a matching shape and no extra names may remain.
pub(crate) fn assign<T: Real, M: Module<T>>(m: &mut M, weights: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    let mut seen = 0usize;
    let mut err = None;
    m.visit_mut("", &mut |name, _, shape, data| {
        if err.is_some() {
            return;
        }
        match weights.get(name) {
            Some(t) if t.shape() == shape => {
                for (d, &v) in data.iter_mut().zip(t.data()) {
                    *d = T::of(v as f64);
                }
                seen += 1;
            }
            Some(t) => {
                err = Some(Error::Contract(format!(
                    "weight {name} has shape {:?}, architecture needs {shape:?}",
                    t.shape()
                )))
            }
            None => err = Some(Error::Contract(format!("checkpoint lacks weight {name}"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if seen != weights.len() {
        return Err(Error::Contract(format!(
            "checkpoint has {} weights, architecture uses {seen}",
            weights.len()
        )));
    }
    Ok(())
}
