use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use otfseg::dpg::{build_dpg, DomainPriorGenerator};
use otfseg::normalization::{ada_bn_forward, batch_norm, CodeProjection};
use otfseg::{AdaBnState, DpgConfig, NormKind, StatsMode, UNet};
use otfseg_bench::{code, desk_model, ramp};

fn normalization(c: &mut Criterion) {
    let x = ramp(&[8, 32, 64, 64]);
    let codes: Vec<_> = (0..8).map(|_| code(64, 4)).collect();
    let mut state = AdaBnState::new(CodeProjection::identity(64), 1e-5).unwrap();
    state.projection.weight = ramp(&[32, 64]);
    state.projection.bias = vec![0.0; 32];
    state.gamma.truncate(32);
    state.beta.truncate(32);
    let (g, b) = (vec![1.0f32; 32], vec![0.0f32; 32]);
    c.bench_function("batch_norm 8x32x64x64", |bench| {
        bench.iter(|| batch_norm(black_box(&x), &g, &b, 1e-5, StatsMode::Batch, None).unwrap())
    });
    c.bench_function("ada_bn 8x32x64x64", |bench| {
        bench.iter(|| ada_bn_forward(black_box(&x), &codes, &state, StatsMode::Batch, None).unwrap())
    });
}

fn forward(c: &mut Criterion) {
    let x = ramp(&[1, 1, 64, 64]);
    let plain = UNet::<f32>::from_checkpoint(&desk_model(NormKind::Bn)).unwrap();
    let adaptive = UNet::<f32>::from_checkpoint(&desk_model(NormKind::AdaBn)).unwrap();
    let code = code(64, 4);
    c.bench_function("unet forward bn 64x64", |bench| {
        bench.iter(|| plain.forward(black_box(&x), None, StatsMode::Running).unwrap())
    });
    c.bench_function("unet forward adabn 64x64", |bench| {
        bench.iter(|| adaptive.forward(black_box(&x), Some(std::slice::from_ref(&code)), StatsMode::Instance).unwrap())
    });
    let dpg = DomainPriorGenerator::from_checkpoint(&build_dpg(&DpgConfig::default(), 0).unwrap()).unwrap();
    let image = ramp(&[1, 64, 64]);
    c.bench_function("prior generator encode 64x64", |bench| bench.iter(|| dpg.encode(black_box(&image)).unwrap()));
}

fn training_step(c: &mut Criterion) {
    let x = ramp(&[8, 1, 64, 64]);
    let net = UNet::<f32>::from_checkpoint(&desk_model(NormKind::Bn)).unwrap();
    c.bench_function("unet forward+backward bn 8x64x64", |bench| {
        bench.iter(|| {
            let (y, trace) = net.forward_traced(black_box(&x), None, StatsMode::Batch).unwrap();
            net.backward(&trace, &y)
        })
    });
}

criterion_group!(benches, normalization, forward, training_step);
criterion_main!(benches);
