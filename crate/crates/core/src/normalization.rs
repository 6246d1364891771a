//! Batch normalization, adaptive instance normalization and adaptive batch
//! normalization (AdaBN) conditioned on a domain code.
//!
//! All standard deviations are `sqrt(var + eps)` with the biased variance
//! estimator. AdaBN computes
//!
//! ```text
//! z = gamma * (sigma(Y) * (X - mu(X)) / sigma(X) + mu(Y)) + beta
//! ```
//!
//! where `Y` is the domain code projected pointwise to the layer's channel
//! count and its statistics are taken over the code's spatial grid, one set
//! per sample. `mu(X)`, `sigma(X)` are pooled according to [`StatsMode`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Feature tensor laid out as `(batch, channels, *spatial)`.
pub type FeatureBatch<T> = Tensor<T>;

/// Default variance floor.
pub const DEFAULT_EPS: f64 = 1e-5;

/// How `mu(X)` and `sigma(X)` are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsMode {
    /// Pool over batch and spatial axes (training).
    Batch,
    /// Pool over spatial axes of each sample separately (episodic test time).
    Instance,
    /// Use caller-supplied running statistics.
    Running,
}

/// Per-channel mean and floored standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Real> ChannelStats<T> {
    /// Builds stats from a running mean/variance pair.
    pub fn from_running(mean: &[T], var: &[T], eps: T) -> Self {
        Self {
            mean: mean.to_vec(),
            std: var.iter().map(|&v| (v + eps).sqrt()).collect(),
        }
    }
}

/// Bottleneck feature map of the domain prior generator for one image,
/// laid out as `(code_channels, *spatial_code)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainCode<T> {
    values: Tensor<T>,
    fingerprint: String,
}

impl<T: Real> DomainCode<T> {
    pub fn new(values: Tensor<T>, fingerprint: impl Into<String>) -> Result<Self> {
        if values.ndim() < 2 {
            return Err(Error::Shape(format!(
                "domain code needs (channels, *spatial), got {:?}",
                values.shape()
            )));
        }
        if !values.all_finite() {
            return Err(Error::Validation("domain code has non-finite entries".into()));
        }
        Ok(Self {
            values,
            fingerprint: fingerprint.into(),
        })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn code_channels(&self) -> usize {
        self.values.shape()[0]
    }

    /// Number of spatial positions in the code grid.
    pub fn positions(&self) -> usize {
        self.values.shape()[1..].iter().product()
    }

    /// Identifier of the checkpoint that produced this code.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn cast<U: Real>(&self) -> DomainCode<U> {
        DomainCode {
            values: self.values.cast(),
            fingerprint: self.fingerprint.clone(),
        }
    }

    /// Euclidean distance between two codes of equal shape.
    pub fn distance(&self, other: &Self) -> Result<T> {
        if self.values.shape() != other.values.shape() {
            return Err(Error::Shape(format!(
                "code shapes differ: {:?} vs {:?}",
                self.values.shape(),
                other.values.shape()
            )));
        }
        Ok(self
            .values
            .data()
            .iter()
            .zip(other.values.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            .sqrt())
    }
}

/// Learned 1x1 map from `code_channels` to a layer's channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeProjection<T> {
    /// `(channels, code_channels)`, row-major.
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Real> CodeProjection<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            weight: Tensor::from_fn(&[channels, channels], |i| {
                if i / channels == i % channels {
                    T::one()
                } else {
                    T::zero()
                }
            }),
            bias: vec![T::zero(); channels],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Projects a code to `(channels, positions)`.
    fn apply(&self, code: &DomainCode<T>) -> Result<Vec<T>> {
        let (c, k) = (self.out_channels(), self.in_channels());
        if code.code_channels() != k {
            return Err(Error::Shape(format!(
                "projection expects {k} code channels, code has {}",
                code.code_channels()
            )));
        }
        let q = code.positions();
        let mut out = vec![T::zero(); c * q];
        for (row, &b) in out.chunks_mut(q).zip(&self.bias) {
            row.fill(b);
        }
        T::gemm_raw(
            c,
            k,
            q,
            self.weight.data(),
            k,
            1,
            code.values.data(),
            q,
            1,
            T::one(),
            &mut out,
            q,
            1,
        );
        Ok(out)
    }
}

/// Learnable state of one AdaBN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaBnState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub projection: CodeProjection<T>,
    pub eps: T,
}

impl<T: Real> AdaBnState<T> {
    /// Unit scale, zero shift, given projection.
    pub fn new(projection: CodeProjection<T>, eps: T) -> Result<Self> {
        let c = projection.out_channels();
        let state = Self {
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            projection,
            eps,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c
            || self.projection.out_channels() != c
            || self.projection.bias.len() != c
        {
            return Err(Error::Shape(format!(
                "AdaBN state lengths disagree: gamma {c}, beta {}, projection {}x{}, bias {}",
                self.beta.len(),
                self.projection.out_channels(),
                self.projection.in_channels(),
                self.projection.bias.len()
            )));
        }
        if !(self.eps > T::zero()) {
            return Err(Error::Validation("AdaBN epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Zeroed copy used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: vec![T::zero(); self.gamma.len()],
            beta: vec![T::zero(); self.beta.len()],
            projection: CodeProjection {
                weight: Tensor::zeros(self.projection.weight.shape()),
                bias: vec![T::zero(); self.projection.bias.len()],
            },
            eps: self.eps,
        }
    }
}

/// Cached quantities from a normalization forward pass.
#[derive(Clone, Debug)]
pub struct NormTrace<T> {
    shape: Vec<usize>,
    mode: StatsMode,
    xhat: Vec<T>,
    /// One entry per statistics group.
    inv_std: Vec<T>,
    /// Group mean and biased variance, used for running-average updates.
    pub(crate) mean: Vec<T>,
    pub(crate) var: Vec<T>,
}

/// Cached quantities from an AdaBN forward pass.
#[derive(Clone, Debug)]
pub struct AdaBnTrace<T> {
    norm: NormTrace<T>,
    codes: Vec<DomainCode<T>>,
    /// Projected code per sample, `(channels, positions)`.
    projected: Vec<Vec<T>>,
    code_mean: Vec<T>,
    code_std: Vec<T>,
}

impl<T> AdaBnTrace<T> {
    pub(crate) fn norm(&self) -> &NormTrace<T> {
        &self.norm
    }
}

impl<T> NormTrace<T> {
    pub(crate) fn mode(&self) -> StatsMode {
        self.mode
    }
}

fn check_features<T: Real>(x: &Tensor<T>) -> Result<()> {
    if x.ndim() < 3 || x.shape().iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!(
            "feature batch needs (batch, channels, *spatial) with nonzero dims, got {:?}",
            x.shape()
        )));
    }
    Ok(())
}

fn group_of(mode: StatsMode, channels: usize, n: usize, c: usize) -> usize {
    match mode {
        StatsMode::Instance => n * channels + c,
        StatsMode::Batch | StatsMode::Running => c,
    }
}

/// Mean and biased variance per group, accumulated in double precision.
fn moments<T: Real>(x: &Tensor<T>, mode: StatsMode) -> (Vec<T>, Vec<T>) {
    let (n, c, s) = (x.batch(), x.channels(), x.spatial_len());
    let groups = if mode == StatsMode::Instance { n * c } else { c };
    let mut sum = vec![0.0f64; groups];
    let mut count = vec![0usize; groups];
    for i in 0..n {
        for ch in 0..c {
            let g = group_of(mode, c, i, ch);
            let base = (i * c + ch) * s;
            sum[g] += x.data()[base..base + s]
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN))
                .sum::<f64>();
            count[g] += s;
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &k)| s / k as f64).collect();
    let mut sq = vec![0.0f64; groups];
    for i in 0..n {
        for ch in 0..c {
            let g = group_of(mode, c, i, ch);
            let base = (i * c + ch) * s;
            let m = mean[g];
            sq[g] += x.data()[base..base + s]
                .iter()
                .map(|v| {
                    let d = v.to_f64().unwrap_or(f64::NAN) - m;
                    d * d
                })
                .sum::<f64>();
        }
    }
    let var = sq.iter().zip(&count).map(|(s, &k)| T::of(s / k as f64)).collect();
    (mean.into_iter().map(T::of).collect(), var)
}

fn normalize<T: Real>(
    x: &Tensor<T>,
    mode: StatsMode,
    eps: T,
    running: Option<&ChannelStats<T>>,
) -> Result<NormTrace<T>> {
    check_features(x)?;
    if !x.all_finite() {
        return Err(Error::Validation("feature batch has non-finite entries".into()));
    }
    let (n, c, s) = (x.batch(), x.channels(), x.spatial_len());
    let (mean, var, inv_std) = match mode {
        StatsMode::Running => {
            let stats = running.ok_or_else(|| {
                Error::Contract("running stats mode requires running statistics".into())
            })?;
            if stats.mean.len() != c || stats.std.len() != c {
                return Err(Error::Shape(format!(
                    "running stats have {} channels, features have {c}",
                    stats.mean.len()
                )));
            }
            if stats.std.iter().any(|&v| !(v > T::zero())) {
                return Err(Error::Numeric("running std must be positive".into()));
            }
            let var = stats.std.iter().map(|&v| v * v).collect();
            let inv = stats.std.iter().map(|&v| T::one() / v).collect();
            (stats.mean.clone(), var, inv)
        }
        _ => {
            let (mean, var) = moments(x, mode);
            let mut inv = Vec::with_capacity(var.len());
            for &v in &var {
                let floored = v + eps;
                if !(floored > T::zero()) {
                    return Err(Error::Numeric(
                        "zero-variance channel cannot be normalized without a positive epsilon"
                            .into(),
                    ));
                }
                inv.push(T::one() / floored.sqrt());
            }
            (mean, var, inv)
        }
    };
    let mut xhat = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let g = group_of(mode, c, i, ch);
            let base = (i * c + ch) * s;
            let (m, inv) = (mean[g], inv_std[g]);
            for (o, &v) in xhat[base..base + s].iter_mut().zip(&x.data()[base..base + s]) {
                *o = (v - m) * inv;
            }
        }
    }
    Ok(NormTrace {
        shape: x.shape().to_vec(),
        mode,
        xhat,
        inv_std,
        mean,
        var,
    })
}

/// Gradient of `xhat` with respect to `x` applied to `dxhat`.
fn normalize_backward<T: Real>(trace: &NormTrace<T>, dxhat: &[T]) -> Vec<T> {
    let (n, c) = (trace.shape[0], trace.shape[1]);
    let s: usize = trace.shape[2..].iter().product();
    let mut dx = vec![T::zero(); dxhat.len()];
    if trace.mode == StatsMode::Running {
        for i in 0..n {
            for ch in 0..c {
                let inv = trace.inv_std[ch];
                let base = (i * c + ch) * s;
                for (o, &d) in dx[base..base + s].iter_mut().zip(&dxhat[base..base + s]) {
                    *o = d * inv;
                }
            }
        }
        return dx;
    }
    let groups = trace.inv_std.len();
    let mut sum_d = vec![T::zero(); groups];
    let mut sum_dx = vec![T::zero(); groups];
    let mut count = vec![0usize; groups];
    for i in 0..n {
        for ch in 0..c {
            let g = group_of(trace.mode, c, i, ch);
            let base = (i * c + ch) * s;
            for (&d, &xh) in dxhat[base..base + s].iter().zip(&trace.xhat[base..base + s]) {
                sum_d[g] += d;
                sum_dx[g] += d * xh;
            }
            count[g] += s;
        }
    }
    for i in 0..n {
        for ch in 0..c {
            let g = group_of(trace.mode, c, i, ch);
            let base = (i * c + ch) * s;
            let m = T::of(count[g] as f64);
            let (md, mdx, inv) = (sum_d[g] / m, sum_dx[g] / m, trace.inv_std[g]);
            for ((o, &d), &xh) in dx[base..base + s]
                .iter_mut()
                .zip(&dxhat[base..base + s])
                .zip(&trace.xhat[base..base + s])
            {
                *o = inv * (d - md - xh * mdx);
            }
        }
    }
    dx
}

fn check_affine<T>(channels: usize, gamma: &[T], beta: &[T]) -> Result<()> {
    if gamma.len() != channels || beta.len() != channels {
        return Err(Error::Shape(format!(
            "affine parameters have lengths {}/{}, features have {channels} channels",
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// Batch normalization `z = gamma * (X - mu) / sigma + beta`.
pub fn batch_norm<T: Real>(
    x: &FeatureBatch<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
    mode: StatsMode,
    running: Option<&ChannelStats<T>>,
) -> Result<FeatureBatch<T>> {
    batch_norm_traced(x, gamma, beta, eps, mode, running).map(|(z, _)| z)
}

pub fn batch_norm_traced<T: Real>(
    x: &FeatureBatch<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
    mode: StatsMode,
    running: Option<&ChannelStats<T>>,
) -> Result<(FeatureBatch<T>, NormTrace<T>)> {
    check_features(x)?;
    check_affine(x.channels(), gamma, beta)?;
    let trace = normalize(x, mode, eps, running)?;
    let (c, s) = (x.channels(), x.spatial_len());
    let mut out = trace.xhat.clone();
    for (k, plane) in out.chunks_mut(s).enumerate() {
        let ch = k % c;
        let (g, b) = (gamma[ch], beta[ch]);
        plane.iter_mut().for_each(|v| *v = g * *v + b);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, trace))
}

/// Backward pass of [`batch_norm`]; accumulates into `dgamma`/`dbeta` and
/// returns the input gradient.
pub fn batch_norm_backward<T: Real>(
    trace: &NormTrace<T>,
    dy: &Tensor<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let c = trace.shape[1];
    let s: usize = trace.shape[2..].iter().product();
    let mut dxhat = vec![T::zero(); dy.len()];
    for (k, (dplane, (xplane, out))) in dy
        .data()
        .chunks(s)
        .zip(trace.xhat.chunks(s).zip(dxhat.chunks_mut(s)))
        .enumerate()
    {
        let ch = k % c;
        let mut s0 = T::zero();
        let mut s1 = T::zero();
        for ((&d, &xh), o) in dplane.iter().zip(xplane).zip(out.iter_mut()) {
            s0 += d;
            s1 += d * xh;
            *o = d * gamma[ch];
        }
        dgamma[ch] += s1;
        dbeta[ch] += s0;
    }
    let dx = normalize_backward(trace, &dxhat);
    Tensor::new(trace.shape.clone(), dx).expect("gradient shape matches trace")
}

/// Adaptive instance normalization `z = sigma(y) * (x - mu(x)) / sigma(x) + mu(y)`
/// with statistics per sample and channel over spatial axes.
///
/// `y` may hold one sample (broadcast) or as many as `x`.
pub fn ada_in<T: Real>(x: &FeatureBatch<T>, y: &FeatureBatch<T>, eps: T) -> Result<FeatureBatch<T>> {
    check_features(x)?;
    check_features(y)?;
    if x.channels() != y.channels() {
        return Err(Error::Shape(format!(
            "AdaIN channel mismatch: {} vs {}",
            x.channels(),
            y.channels()
        )));
    }
    if y.batch() != 1 && y.batch() != x.batch() {
        return Err(Error::Shape(format!(
            "style batch {} must be 1 or {}",
            y.batch(),
            x.batch()
        )));
    }
    let xt = normalize(x, StatsMode::Instance, eps, None)?;
    let (ym, yv) = moments(y, StatsMode::Instance);
    let (c, s) = (x.channels(), x.spatial_len());
    let mut out = xt.xhat;
    for (k, plane) in out.chunks_mut(s).enumerate() {
        let (i, ch) = (k / c, k % c);
        let g = if y.batch() == 1 { ch } else { i * c + ch };
        let (m, sd) = (ym[g], (yv[g] + eps).sqrt());
        plane.iter_mut().for_each(|v| *v = sd * *v + m);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Mean and floored std of a code after projection, one entry per channel.
pub fn code_stats<T: Real>(code: &DomainCode<T>, state: &AdaBnState<T>) -> Result<ChannelStats<T>> {
    state.validate()?;
    let projected = state.projection.apply(code)?;
    let (mean, std) = projected_stats(&projected, state.channels(), state.eps);
    Ok(ChannelStats { mean, std })
}

fn projected_stats<T: Real>(projected: &[T], channels: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let q = projected.len() / channels;
    let qf = q as f64;
    let mut mean = Vec::with_capacity(channels);
    let mut std = Vec::with_capacity(channels);
    for row in projected.chunks(q) {
        let m = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>() / qf;
        let var = row
            .iter()
            .map(|v| {
                let d = v.to_f64().unwrap_or(f64::NAN) - m;
                d * d
            })
            .sum::<f64>()
            / qf;
        mean.push(T::of(m));
        std.push((T::of(var) + eps).sqrt());
    }
    (mean, std)
}

/// Adaptive batch normalization conditioned on per-sample domain codes.
///
/// `codes` holds either one code (shared by the batch) or one per sample.
pub fn ada_bn_forward<T: Real>(
    x: &FeatureBatch<T>,
    codes: &[DomainCode<T>],
    state: &AdaBnState<T>,
    mode: StatsMode,
    running: Option<&ChannelStats<T>>,
) -> Result<FeatureBatch<T>> {
    ada_bn_forward_traced(x, codes, state, mode, running).map(|(z, _)| z)
}

pub fn ada_bn_forward_traced<T: Real>(
    x: &FeatureBatch<T>,
    codes: &[DomainCode<T>],
    state: &AdaBnState<T>,
    mode: StatsMode,
    running: Option<&ChannelStats<T>>,
) -> Result<(FeatureBatch<T>, AdaBnTrace<T>)> {
    check_features(x)?;
    state.validate()?;
    let (n, c, s) = (x.batch(), x.channels(), x.spatial_len());
    if state.channels() != c {
        return Err(Error::Shape(format!(
            "AdaBN layer has {} channels, features have {c}",
            state.channels()
        )));
    }
    if codes.is_empty() || (codes.len() != 1 && codes.len() != n) {
        return Err(Error::Shape(format!(
            "need 1 or {n} domain codes, got {}",
            codes.len()
        )));
    }
    let norm = normalize(x, mode, state.eps, running)?;
    let mut projected = Vec::with_capacity(codes.len());
    let mut code_mean = Vec::with_capacity(codes.len() * c);
    let mut code_std = Vec::with_capacity(codes.len() * c);
    for code in codes {
        let p = state.projection.apply(code)?;
        let (m, sd) = projected_stats(&p, c, state.eps);
        code_mean.extend(m);
        code_std.extend(sd);
        projected.push(p);
    }
    let mut out = norm.xhat.clone();
    for (k, plane) in out.chunks_mut(s).enumerate() {
        let (i, ch) = (k / c, k % c);
        let ci = if codes.len() == 1 { ch } else { i * c + ch };
        let a = state.gamma[ch] * code_std[ci];
        let b = state.gamma[ch] * code_mean[ci] + state.beta[ch];
        plane.iter_mut().for_each(|v| *v = a * *v + b);
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        AdaBnTrace {
            norm,
            codes: codes.to_vec(),
            projected,
            code_mean,
            code_std,
        },
    ))
}

/// Backward pass of [`ada_bn_forward`]; accumulates parameter gradients into
/// `grad` and returns the feature gradient. The codes are treated as constants.
pub fn ada_bn_backward<T: Real>(
    trace: &AdaBnTrace<T>,
    dy: &Tensor<T>,
    state: &AdaBnState<T>,
    grad: &mut AdaBnState<T>,
) -> Tensor<T> {
    let shape = &trace.norm.shape;
    let (n, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let shared = trace.codes.len() == 1;
    let mut dxhat = vec![T::zero(); dy.len()];
    // d/d mu(Y) and d/d sigma(Y), per code entry
    let mut dmu = vec![T::zero(); trace.code_mean.len()];
    let mut dsd = vec![T::zero(); trace.code_std.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * s;
            let ci = if shared { ch } else { i * c + ch };
            let a = state.gamma[ch] * trace.code_std[ci];
            let mut s0 = T::zero();
            let mut s1 = T::zero();
            for ((&d, &xh), o) in dy.data()[base..base + s]
                .iter()
                .zip(&trace.norm.xhat[base..base + s])
                .zip(dxhat[base..base + s].iter_mut())
            {
                s0 += d;
                s1 += d * xh;
                *o = d * a;
            }
            grad.gamma[ch] += trace.code_std[ci] * s1 + trace.code_mean[ci] * s0;
            grad.beta[ch] += s0;
            dsd[ci] += state.gamma[ch] * s1;
            dmu[ci] += state.gamma[ch] * s0;
        }
    }
    let k = state.projection.in_channels();
    for (j, (code, p)) in trace.codes.iter().zip(&trace.projected).enumerate() {
        let q = code.positions();
        let qf = T::of(q as f64);
        let mut dp = vec![T::zero(); c * q];
        for ch in 0..c {
            let ci = j * c + ch;
            let (m, sd) = (trace.code_mean[ci], trace.code_std[ci]);
            let row = &p[ch * q..(ch + 1) * q];
            for (o, &v) in dp[ch * q..(ch + 1) * q].iter_mut().zip(row) {
                *o = dmu[ci] / qf + dsd[ci] * (v - m) / (qf * sd);
            }
            grad.projection.bias[ch] += dp[ch * q..(ch + 1) * q].iter().copied().sum();
        }
        // dW (c x k) += dP (c x q) . code^T (q x k)
        T::gemm_raw(
            c,
            q,
            k,
            &dp,
            q,
            1,
            code.values().data(),
            1,
            q,
            T::one(),
            grad.projection.weight.data_mut(),
            k,
            1,
        );
    }
    let dx = normalize_backward(&trace.norm, &dxhat);
    Tensor::new(shape.clone(), dx).expect("gradient shape matches trace")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TINY: f64 = 1e-15;

    fn features(shape: &[usize], values: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), values.to_vec()).unwrap()
    }

    fn random(shape: &[usize], scale: f64, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale) + 0.3)
    }

    fn scalar_code(values: &[f64]) -> DomainCode<f64> {
        DomainCode::new(features(&[1, values.len()], values), "test").unwrap()
    }

    fn identity_state(c: usize, eps: f64) -> AdaBnState<f64> {
        AdaBnState::new(CodeProjection::identity(c), eps).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    /// Per (sample, channel) mean and std, computed directly.
    fn instance_stats(t: &Tensor<f64>) -> Vec<(f64, f64)> {
        t.data()
            .chunks(t.spatial_len())
            .map(|p| {
                let m = p.iter().sum::<f64>() / p.len() as f64;
                let v = p.iter().map(|x| (x - m).powi(2)).sum::<f64>() / p.len() as f64;
                (m, v.sqrt())
            })
            .collect()
    }

    #[test]
    fn batch_norm_hand_values() {
        let x = features(&[1, 1, 1, 2], &[0.0, 2.0]);
        let z = batch_norm(&x, &[1.0], &[0.0], TINY, StatsMode::Batch, None).unwrap();
        assert_close(z.data(), &[-1.0, 1.0], 1e-10);
        let z = batch_norm(&x, &[3.0], &[5.0], TINY, StatsMode::Batch, None).unwrap();
        assert_close(z.data(), &[2.0, 8.0], 1e-10);
    }

    #[test]
    fn batch_norm_identity_on_standardized_input() {
        let x = features(&[2, 1, 1, 2], &[-1.0, 1.0, 1.0, -1.0]);
        let z = batch_norm(&x, &[1.0], &[0.0], TINY, StatsMode::Batch, None).unwrap();
        assert_close(z.data(), x.data(), 1e-10);
    }

    #[test]
    fn batch_norm_errors() {
        let x = features(&[1, 2, 1, 2], &[0.0, 2.0, 1.0, 1.0]);
        assert!(matches!(
            batch_norm(&x, &[1.0], &[0.0], 1e-5, StatsMode::Batch, None),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            batch_norm(&x, &[1.0, 1.0], &[0.0, 0.0], 0.0, StatsMode::Batch, None),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            batch_norm(&x, &[1.0, 1.0], &[0.0, 0.0], 1e-5, StatsMode::Running, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn running_mode_uses_supplied_stats() {
        let x = features(&[1, 1, 1, 2], &[0.0, 2.0]);
        let stats = ChannelStats {
            mean: vec![2.0],
            std: vec![4.0],
        };
        let z = batch_norm(&x, &[1.0], &[0.0], 1e-5, StatsMode::Running, Some(&stats)).unwrap();
        assert_close(z.data(), &[-0.5, 0.0], 1e-12);
    }

    #[test]
    fn ada_in_hand_values() {
        let x = features(&[1, 1, 1, 2], &[0.0, 2.0]);
        let y = features(&[1, 1, 1, 2], &[1.0, 5.0]);
        let z = ada_in(&x, &y, TINY).unwrap();
        assert_close(z.data(), &[1.0, 5.0], 1e-10);
        let z = ada_in(&x, &x, TINY).unwrap();
        assert_close(z.data(), x.data(), 1e-10);
    }

    #[test]
    fn ada_in_matches_style_statistics() {
        let x = random(&[2, 3, 5, 4], 2.0, 1);
        let y = random(&[2, 3, 4, 4], 5.0, 2);
        let z = ada_in(&x, &y, 1e-12).unwrap();
        for ((mz, sz), (my, sy)) in instance_stats(&z).into_iter().zip(instance_stats(&y)) {
            assert!((mz - my).abs() < 1e-5 && (sz - sy).abs() < 1e-5);
        }
        let y1 = random(&[1, 2, 2, 2], 1.0, 3);
        assert!(matches!(ada_in(&x, &y1, 1e-5), Err(Error::Shape(_))));
    }

    #[test]
    fn code_stats_hand_values() {
        let state = identity_state(1, TINY);
        let s = code_stats(&scalar_code(&[1.0, 5.0]), &state).unwrap();
        assert_close(&s.mean, &[3.0], 1e-10);
        assert_close(&s.std, &[2.0], 1e-10);

        let eps = 1e-5;
        let state = identity_state(1, eps);
        let s = code_stats(&scalar_code(&[0.7; 4]), &state).unwrap();
        assert_close(&s.mean, &[0.7], 1e-12);
        // constant map: only the floor remains
        assert_close(&s.std, &[eps.sqrt()], 1e-12);
        assert!(s.std[0] >= eps);
    }

    #[test]
    fn code_stats_rejects_width_mismatch() {
        let state = identity_state(2, 1e-5);
        assert!(matches!(
            code_stats(&scalar_code(&[1.0, 2.0]), &state),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ada_bn_hand_values() {
        let x = features(&[1, 1, 1, 2], &[0.0, 2.0]);
        let code = scalar_code(&[1.0, 5.0]);
        let mut state = identity_state(1, TINY);
        let z = ada_bn_forward(&x, &[code.clone()], &state, StatsMode::Instance, None).unwrap();
        assert_close(z.data(), &[1.0, 5.0], 1e-10);
        state.gamma = vec![2.0];
        state.beta = vec![1.0];
        let z = ada_bn_forward(&x, &[code], &state, StatsMode::Instance, None).unwrap();
        assert_close(z.data(), &[3.0, 11.0], 1e-10);
    }

    #[test]
    fn ada_bn_reduces_to_batch_norm_for_standard_code() {
        let x = random(&[3, 1, 4, 4], 1.5, 4);
        // mean 0, population std 1
        let code = scalar_code(&[-1.0, 1.0, -1.0, 1.0]);
        let state = identity_state(1, TINY);
        let a = ada_bn_forward(&x, &[code], &state, StatsMode::Batch, None).unwrap();
        let b = batch_norm(&x, &[1.0], &[0.0], TINY, StatsMode::Batch, None).unwrap();
        assert_close(a.data(), b.data(), 1e-10);
    }

    #[test]
    fn ada_bn_output_follows_code_statistics() {
        let x = random(&[2, 3, 6, 6], 3.0, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let proj = CodeProjection {
            weight: Tensor::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0)),
            bias: vec![0.5, -0.2, 1.0],
        };
        let state = AdaBnState::new(proj, 1e-5).unwrap();
        let codes: Vec<_> = (0..2)
            .map(|i| {
                DomainCode::new(random(&[4, 2, 2], 1.0, 10 + i), "c").unwrap()
            })
            .collect();
        let z = ada_bn_forward(&x, &codes, &state, StatsMode::Instance, None).unwrap();
        let got = instance_stats(&z);
        for (i, code) in codes.iter().enumerate() {
            let want = code_stats(code, &state).unwrap();
            for ch in 0..3 {
                let (m, s) = got[i * 3 + ch];
                assert!((m - want.mean[ch]).abs() < 1e-5);
                assert!((s - want.std[ch]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn ada_bn_rejects_bad_code_count() {
        let x = random(&[3, 1, 2, 2], 1.0, 7);
        let state = identity_state(1, 1e-5);
        let codes = vec![scalar_code(&[1.0, 2.0]); 2];
        assert!(matches!(
            ada_bn_forward(&x, &codes, &state, StatsMode::Batch, None),
            Err(Error::Shape(_))
        ));
    }

    /// Central differences of `f` at `params`, perturbing each entry in turn.
    fn numeric_grad(params: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-6;
        let mut p = params.to_vec();
        (0..p.len())
            .map(|i| {
                let orig = p[i];
                p[i] = orig + h;
                let up = f(&p);
                p[i] = orig - h;
                let down = f(&p);
                p[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt()
            + b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }

    #[test]
    fn ada_bn_gradients_match_finite_differences() {
        for mode in [StatsMode::Batch, StatsMode::Instance] {
            let x = random(&[2, 2, 3, 3], 1.0, 20);
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let state = AdaBnState {
                gamma: vec![1.3, 0.7],
                beta: vec![0.1, -0.4],
                projection: CodeProjection {
                    weight: Tensor::from_fn(&[2, 3], |_| rng.gen_range(-1.0..1.0)),
                    bias: vec![0.2, -0.3],
                },
                eps: 1e-5,
            };
            let codes: Vec<_> = (0..2)
                .map(|i| DomainCode::new(random(&[3, 2, 2], 1.0, 30 + i), "c").unwrap())
                .collect();
            let w = random(&[2, 2, 3, 3], 1.0, 22);
            let loss = |x: &Tensor<f64>, st: &AdaBnState<f64>| -> f64 {
                let z = ada_bn_forward(x, &codes, st, mode, None).unwrap();
                z.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
            };
            let (_, trace) = ada_bn_forward_traced(&x, &codes, &state, mode, None).unwrap();
            let mut grad = state.zeros_like();
            let dx = ada_bn_backward(&trace, &w, &state, &mut grad);

            let num_dx = numeric_grad(x.data(), |p| {
                loss(&Tensor::new(x.shape().to_vec(), p.to_vec()).unwrap(), &state)
            });
            assert!(rel_err(dx.data(), &num_dx) < 1e-4);
            let num_g = numeric_grad(&state.gamma, |p| {
                let mut s = state.clone();
                s.gamma = p.to_vec();
                loss(&x, &s)
            });
            assert!(rel_err(&grad.gamma, &num_g) < 1e-4);
            let num_b = numeric_grad(&state.beta, |p| {
                let mut s = state.clone();
                s.beta = p.to_vec();
                loss(&x, &s)
            });
            assert!(rel_err(&grad.beta, &num_b) < 1e-4);
            let num_w = numeric_grad(state.projection.weight.data(), |p| {
                let mut s = state.clone();
                s.projection.weight = Tensor::new(vec![2, 3], p.to_vec()).unwrap();
                loss(&x, &s)
            });
            assert!(rel_err(grad.projection.weight.data(), &num_w) < 1e-4);
            let num_pb = numeric_grad(&state.projection.bias, |p| {
                let mut s = state.clone();
                s.projection.bias = p.to_vec();
                loss(&x, &s)
            });
            assert!(rel_err(&grad.projection.bias, &num_pb) < 1e-4);
        }
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let x = random(&[3, 2, 2, 2], 1.0, 40);
        let w = random(&[3, 2, 2, 2], 1.0, 41);
        let (gamma, beta) = (vec![0.8, 1.4], vec![0.3, -0.1]);
        let (_, trace) =
            batch_norm_traced(&x, &gamma, &beta, 1e-5, StatsMode::Batch, None).unwrap();
        let (mut dg, mut db) = (vec![0.0; 2], vec![0.0; 2]);
        let dx = batch_norm_backward(&trace, &w, &gamma, &mut dg, &mut db);
        let f = |x: &[f64], g: &[f64]| -> f64 {
            let t = Tensor::new(vec![3, 2, 2, 2], x.to_vec()).unwrap();
            let z = batch_norm(&t, g, &beta, 1e-5, StatsMode::Batch, None).unwrap();
            z.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        assert!(rel_err(dx.data(), &numeric_grad(x.data(), |p| f(p, &gamma))) < 1e-4);
        assert!(rel_err(&dg, &numeric_grad(&gamma, |p| f(x.data(), p))) < 1e-4);
    }

    proptest! {
        #[test]
        fn batch_norm_is_affine_invariant(
            vals in proptest::collection::vec(-5.0f64..5.0, 8),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let x = features(&[2, 1, 2, 2], &vals);
            prop_assume!(instance_stats(&x.clone().reshape(&[1, 1, 8]).unwrap())[0].1 > 0.1);
            let y = x.map(|v| a * v + b);
            let eps = 1e-12;
            let zx = batch_norm(&x, &[1.7], &[0.2], eps, StatsMode::Batch, None).unwrap();
            let zy = batch_norm(&y, &[1.7], &[0.2], eps, StatsMode::Batch, None).unwrap();
            prop_assert!(zx.max_abs_diff(&zy) < 1e-4);
        }

        #[test]
        fn ada_in_is_idempotent(
            xs in proptest::collection::vec(-3.0f64..3.0, 12),
            ys in proptest::collection::vec(-3.0f64..3.0, 12),
        ) {
            let x = features(&[1, 2, 2, 3], &xs);
            let y = features(&[1, 2, 2, 3], &ys);
            prop_assume!(instance_stats(&x).iter().all(|s| s.1 > 0.05));
            let once = ada_in(&x, &y, 1e-12).unwrap();
            let twice = ada_in(&once, &y, 1e-12).unwrap();
            prop_assert!(once.max_abs_diff(&twice) < 1e-5);
        }

        #[test]
        fn code_std_is_floored(vals in proptest::collection::vec(-2.0f64..2.0, 4)) {
            let eps = 1e-5;
            let s = code_stats(&scalar_code(&vals), &identity_state(1, eps)).unwrap();
            prop_assert!(s.std[0] >= eps);
        }
    }
}
