//! Intensity and geometry transforms on single images `(channels, *spatial)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn spatial_of(img: &Tensor<f32>) -> Result<&[usize]> {
    if !(2..=4).contains(&img.ndim()) {
        return Err(Error::Shape(format!(
            "expected a (channels, *spatial) image, got {:?}",
            img.shape()
        )));
    }
    Ok(&img.shape()[1..])
}

pub fn check_unit_range(img: &Tensor<f32>) -> Result<()> {
    match img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::Validation(format!("intensity {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

pub fn clip_unit(img: &mut Tensor<f32>) {
    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

pub fn gamma(img: &Tensor<f32>, g: f64) -> Tensor<f32> {
    if g == 1.0 {
        return img.clone();
    }
    img.map(|v| (v.max(0.0) as f64).powf(g) as f32)
}

/// Scales deviations from the image mean.
pub fn contrast(img: &Tensor<f32>, scale: f64) -> Tensor<f32> {
    if scale == 1.0 {
        return img.clone();
    }
    let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
    img.map(|v| (mean + (v as f64 - mean) * scale) as f32)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge clamping; `sigma = 0` is the identity.
pub fn gaussian_blur(img: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    spatial_of(img)?;
    if sigma < 0.0 {
        return Err(Error::Validation(format!("blur sigma {sigma} is negative")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let mut data: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let shape = img.shape();
    for axis in 1..shape.len() {
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for i in 0..len {
                for in_ in 0..inner {
                    let mut acc = 0.0;
                    for (t, &w) in kernel.iter().enumerate() {
                        let j = (i as i64 + t as i64 - r).clamp(0, len as i64 - 1) as usize;
                        acc += w * data[(o * len + j) * inner + in_];
                    }
                    out[(o * len + i) * inner + in_] = acc;
                }
            }
        }
        data = out;
    }
    Tensor::new(shape.to_vec(), data.into_iter().map(|v| v as f32).collect())
}

/// Block-averages by `factor` per axis, then replicates back to full size.
pub fn down_up(img: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let spatial = spatial_of(img)?;
    if factor == 0 {
        return Err(Error::Validation("downsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    if let Some(d) = spatial.iter().find(|&&d| d % factor != 0) {
        return Err(Error::Validation(format!(
            "spatial size {d} is not divisible by downsample factor {factor}"
        )));
    }
    let mut data = img.data().to_vec();
    let shape = img.shape();
    for axis in 1..shape.len() {
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for block in 0..len / factor {
                for in_ in 0..inner {
                    let idx = |i: usize| (o * len + block * factor + i) * inner + in_;
                    let mean = (0..factor).map(|i| data[idx(i)] as f64).sum::<f64>() / factor as f64;
                    for i in 0..factor {
                        data[idx(i)] = mean as f32;
                    }
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// Mirrors the last spatial axis.
pub fn flip_last_axis<T: Copy>(data: &mut [T], width: usize) {
    for row in data.chunks_mut(width) {
        row.reverse();
    }
}

pub fn add_noise(img: &Tensor<f32>, std: f64, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    if std < 0.0 {
        return Err(Error::Validation(format!("noise std {std} is negative")));
    }
    if std == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::Validation(e.to_string()))?;
    let mut out = img.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = (*v as f64 + normal.sample(rng)) as f32);
    Ok(out)
}
