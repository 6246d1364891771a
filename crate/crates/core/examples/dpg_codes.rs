//! Pretrains a prior generator on a three-domain synthetic corpus and
//! reports reconstruction error and code distances within and across
//! domains.
//!
//! `cargo run --release -p otfseg --example dpg_codes -- [epochs] [depth]`

use std::time::Instant;

use otfseg::data::{shift_samples, synth_samples, ShiftSpec, SynthSpec};
use otfseg::dpg::{build_dpg, pretrain_dpg, reconstruction_mse, DomainPriorGenerator, DpgConfig};
use otfseg::training::TrainConfig;
use otfseg::Tensor;

fn domain(name: &str, n: usize, seed: u64) -> otfseg::Result<Vec<Tensor<f32>>> {
    let base = synth_samples(&SynthSpec {
        n_train: n,
        n_test: 0,
        seed,
        ..SynthSpec::default()
    })?;
    Ok(shift_samples(&base, &ShiftSpec::preset(name)?, seed, name)?
        .into_iter()
        .map(|s| s.image)
        .collect())
}

fn main() -> otfseg::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let depth: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let names = ["identity", "dark", "blurred"];
    let mut corpus = Vec::new();
    let mut held_out = Vec::new();
    for (i, name) in names.iter().enumerate() {
        corpus.extend(domain(name, 60, 100 + i as u64)?);
        held_out.push(domain(name, 8, 200 + i as u64)?);
    }
    let cfg = DpgConfig {
        depth,
        code_channels: 8 << (depth - 1),
        ..DpgConfig::default()
    };
    let train = TrainConfig {
        epochs,
        lr_max: 3e-3,
        lr_min: 1e-4,
        ..TrainConfig::published_2d()
    };
    let t = Instant::now();
    let dpg = pretrain_dpg(&corpus, &cfg, &train)?;
    let flat: Vec<Tensor<f32>> = held_out.iter().flatten().cloned().collect();
    let before = reconstruction_mse(&build_dpg(&cfg, train.seed)?, &flat)?;
    let after = reconstruction_mse(&dpg, &flat)?;
    println!("{:.1}s  mse untrained {before:.5} trained {after:.5} ratio {:.4}", t.elapsed().as_secs_f64(), after / before);
    let g = DomainPriorGenerator::from_checkpoint(&dpg)?;
    let codes: Vec<Vec<_>> = held_out
        .iter()
        .map(|d| d.iter().map(|x| g.encode(x)).collect::<otfseg::Result<Vec<_>>>())
        .collect::<otfseg::Result<_>>()?;
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
    for a in 0..codes.len() {
        for b in a..codes.len() {
            for (i, ca) in codes[a].iter().enumerate() {
                for (j, cb) in codes[b].iter().enumerate() {
                    if a == b && j <= i {
                        continue;
                    }
                    let d = ca.distance(cb)? as f64;
                    if a == b {
                        intra += d;
                        ni += 1;
                    } else {
                        inter += d;
                        nx += 1;
                    }
                }
            }
        }
    }
    println!("intra {:.3} inter {:.3}", intra / ni as f64, inter / nx as f64);
    Ok(())
}
