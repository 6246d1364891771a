//! Benchmark fixtures shared by the criterion targets.

use otfseg::model::build_model;
use otfseg::{ArchConfig, DomainCode, ModelCheckpoint, NormKind, Tensor};

/// Deterministic pseudo-random values in `[0, 1)`.
pub fn ramp(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i as u64).wrapping_mul(2654435761) % 1000) as f32 / 1000.0)
}

pub fn code(channels: usize, side: usize) -> DomainCode<f32> {
    DomainCode::new(ramp(&[channels, side, side]), "bench").expect("valid code")
}

pub fn desk_model(norm: NormKind) -> ModelCheckpoint {
    let cfg = ArchConfig {
        base_channels: 8,
        convs_per_block: 1,
        code_channels: 64,
        norm,
        ..ArchConfig::default()
    };
    build_model(&cfg, 0).expect("valid config")
}
