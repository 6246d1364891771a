//! Synthetic domain-shift experiment: plain UNet direct testing versus the
//! Adaptive UNet on a shifted target domain.
//!
//! `cargo run --release -p otfseg --example shift_experiment -- [seeds] [epochs] [preset|gamma,contrast,blur,noise]`

use std::time::Instant;

use otfseg::baselines::direct_test;
use otfseg::data::{shift_samples, synth_samples, ShiftSpec, Split, SynthSpec};
use otfseg::dpg::{pretrain_dpg, DpgConfig};
use otfseg::inference::{episodic_eval, test_instances};
use otfseg::model::{build_model, ArchConfig, NormKind};
use otfseg::training::{train_plain, train_source, TrainConfig};
use otfseg::SegSample;

fn split(samples: &[SegSample], s: Split) -> Vec<SegSample> {
    samples.iter().filter(|x| x.split == s).cloned().collect()
}

fn main() -> otfseg::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let preset = args.get(3).cloned().unwrap_or_else(|| "strong".into());

    let source = synth_samples(&SynthSpec::default())?;
    let shift = if preset.contains(',') {
        let v: Vec<f64> = preset.split(',').map(|x| x.parse().unwrap()).collect();
        ShiftSpec { gamma: v[0], contrast_scale: v[1], blur_sigma: v[2], noise_std: v[3], downsample_factor: 1 }
    } else {
        ShiftSpec::preset(&preset)?
    };
    let target = shift_samples(&source, &shift, 11, &preset)?;
    let (src_train, src_test) = (split(&source, Split::Train), split(&source, Split::Test));
    let tgt_test = split(&target, Split::Test);

    let mut corpus = Vec::new();
    for (i, name) in ["identity", "dark", "blurred"].iter().enumerate() {
        let base = synth_samples(&SynthSpec {
            n_train: 60,
            n_test: 0,
            seed: 1000 + i as u64,
            ..SynthSpec::default()
        })?;
        corpus.extend(shift_samples(&base, &ShiftSpec::preset(name)?, 7, name)?.into_iter().map(|s| s.image));
    }
    let t = Instant::now();
    let dpg_cfg = DpgConfig::default();
    let dpg_train = TrainConfig {
        epochs: 10,
        lr_max: 3e-3,
        lr_min: 1e-4,
        ..TrainConfig::published_2d()
    };
    let dpg = pretrain_dpg(&corpus, &dpg_cfg, &dpg_train)?;
    println!("dpg: {:.1}s final loss {:.5}", t.elapsed().as_secs_f64(), dpg.metadata.loss_curve.last().unwrap().mean_loss);

    for seed in 0..seeds {
        let cfg = TrainConfig {
            epochs,
            seed,
            ..TrainConfig::desk()
        };
        let arch = ArchConfig {
            base_channels: 8,
            convs_per_block: 1,
            code_channels: dpg_cfg.code_channels,
            ..ArchConfig::default()
        };
        let t = Instant::now();
        let plain = train_plain(
            &build_model(&ArchConfig { norm: NormKind::Bn, ..arch.clone() }, seed)?,
            &src_train,
            &cfg,
        )?;
        println!("plain trained in {:.1}s", t.elapsed().as_secs_f64());
        let t = Instant::now();
        let ours = train_source(&build_model(&arch, seed)?, &dpg, &src_train, &cfg)?;
        println!("adaptive trained in {:.1}s", t.elapsed().as_secs_f64());
        let d_src = direct_test(&plain, &test_instances(&src_test))?.mean_dice();
        let d_tgt = direct_test(&plain, &test_instances(&tgt_test))?.mean_dice();
        let o_src = episodic_eval(&ours, &dpg, &test_instances(&src_test))?.mean_dice();
        let o_tgt = episodic_eval(&ours, &dpg, &test_instances(&tgt_test))?.mean_dice();
        println!("seed {seed}: direct src {d_src:.4} tgt {d_tgt:.4} | ours src {o_src:.4} tgt {o_tgt:.4}");
        for (name, m) in [("plain", &plain), ("ours", &ours)] {
            let c: Vec<String> = m.metadata.loss_curve.iter().map(|e| format!("{:.3}", e.dice_loss.unwrap())).collect();
            println!("  {name} dice loss: {}", c.join(" "));
        }
    }
    Ok(())
}
