//! Desk-scale training runs on the synthetic domains. These take a few
//! minutes on one CPU core.

use std::sync::OnceLock;

use otfseg::baselines::direct_test;
use otfseg::data::{shift_samples, synth_samples};
use otfseg::dpg::{build_dpg, pretrain_dpg, reconstruction_mse, DomainPriorGenerator};
use otfseg::eval::dice_score;
use otfseg::inference::{decode_logits, episodic_eval, test_instances};
use otfseg::model::build_model;
use otfseg::training::{train_plain, train_source};
use otfseg::{
    ArchConfig, DpgConfig, ModelCheckpoint, NormKind, SegSample, ShiftSpec, Split, StatsMode, SynthSpec, Tensor,
    TrainConfig, UNet,
};

fn source() -> &'static (Vec<SegSample>, Vec<SegSample>) {
    static S: OnceLock<(Vec<SegSample>, Vec<SegSample>)> = OnceLock::new();
    S.get_or_init(|| {
        let all = synth_samples(&SynthSpec::default()).unwrap();
        let (train, test) = all.into_iter().partition(|s| s.split == Split::Train);
        (train, test)
    })
}

fn corpus(per_domain: &[usize], seed: u64) -> Vec<Tensor<f32>> {
    let mut out = Vec::new();
    for (i, (name, &n)) in ["identity", "dark", "blurred"].iter().zip(per_domain).enumerate() {
        let s = seed + i as u64;
        let base = synth_samples(&SynthSpec {
            n_train: n,
            n_test: 0,
            seed: s,
            ..SynthSpec::default()
        })
        .unwrap();
        out.extend(shift_samples(&base, &ShiftSpec::preset(name).unwrap(), s, name).unwrap().into_iter().map(|x| x.image));
    }
    out
}

fn dpg_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr_max: 3e-3,
        lr_min: 1e-4,
        ..TrainConfig::published_2d()
    }
}

/// Prior generator pretrained on 200 images for 30 epochs.
fn prior() -> &'static ModelCheckpoint {
    static P: OnceLock<ModelCheckpoint> = OnceLock::new();
    P.get_or_init(|| pretrain_dpg(&corpus(&[67, 67, 66], 500), &DpgConfig::default(), &dpg_train(30)).unwrap())
}

fn arch(norm: NormKind) -> ArchConfig {
    ArchConfig {
        base_channels: 8,
        convs_per_block: 1,
        code_channels: DpgConfig::default().code_channels,
        norm,
        ..ArchConfig::default()
    }
}

/// Adaptive UNet trained for 50 epochs with the desk recipe.
fn adaptive() -> &'static ModelCheckpoint {
    static M: OnceLock<ModelCheckpoint> = OnceLock::new();
    M.get_or_init(|| {
        let cfg = TrainConfig {
            epochs: 50,
            ..TrainConfig::desk()
        };
        train_source(&build_model(&arch(NormKind::AdaBn), 0).unwrap(), prior(), &source().0, &cfg).unwrap()
    })
}

#[test]
fn prior_generator_pretraining_beats_untrained_reconstruction() {
    let held_out = corpus(&[10, 10, 10], 900);
    let untrained = reconstruction_mse(&build_dpg(&DpgConfig::default(), 0).unwrap(), &held_out).unwrap();
    let trained = reconstruction_mse(prior(), &held_out).unwrap();
    assert!(trained < 0.2 * untrained, "{trained} vs untrained {untrained}");
}

#[test]
fn source_training_converges() {
    let curve: Vec<f64> = adaptive().metadata.loss_curve.iter().map(|e| e.dice_loss.unwrap()).collect();
    assert_eq!(curve.len(), 50);
    // trailing five-epoch means; rises below PLATEAU are float noise once converged
    const PLATEAU: f64 = 1e-5;
    let smooth: Vec<f64> = (4..curve.len()).map(|i| curve[i - 4..=i].iter().sum::<f64>() / 5.0).collect();
    for (i, w) in smooth.windows(2).enumerate().skip(1) {
        assert!(w[1] <= w[0] + PLATEAU, "smoothed Dice loss rose after epoch {}: {:?}", i + 5, &smooth);
    }
    assert!(smooth[smooth.len() - 1] < 0.1 * smooth[1]);
    let train = episodic_eval(adaptive(), prior(), &test_instances(&source().0)).unwrap();
    assert!(train.mean_dice() > 0.85, "train Dice {}", train.mean_dice());
}

#[test]
fn instance_statistics_agree_with_training_mode_on_training_images() {
    let model = adaptive();
    let images = &source().0;
    let episodic = episodic_eval(model, prior(), &test_instances(images)).unwrap().mean_dice();

    let net = UNet::<f32>::from_checkpoint(model).unwrap();
    let g = DomainPriorGenerator::from_checkpoint(prior()).unwrap();
    let mut total = 0.0;
    for chunk in images.chunks(8) {
        let x = Tensor::stack(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
        let codes: Vec<_> = chunk.iter().map(|s| g.encode(&s.image).unwrap()).collect();
        let logits = net.forward(&x, Some(&codes), StatsMode::Batch).unwrap();
        for (i, s) in chunk.iter().enumerate() {
            let mask = decode_logits(&logits.select(i)).unwrap();
            total += dice_score(&mask, s.mask.as_ref().unwrap(), 1).unwrap();
        }
    }
    let batch_mode = total / images.len() as f64;
    assert!((episodic - batch_mode).abs() <= 0.02, "episodic {episodic} vs training mode {batch_mode}");
}

#[test]
fn plain_model_has_no_shift_gap_on_source_and_drops_on_target() {
    let (train, test) = source();
    let (fit, val) = train.split_at(180);
    let plain = train_plain(&build_model(&arch(NormKind::Bn), 0).unwrap(), fit, &TrainConfig::desk()).unwrap();
    let val_dice = direct_test(&plain, &test_instances(val)).unwrap().mean_dice();
    let test_dice = direct_test(&plain, &test_instances(test)).unwrap().mean_dice();
    assert!((val_dice - test_dice).abs() <= 0.02, "validation {val_dice} vs test {test_dice}");

    let target = shift_samples(test, &ShiftSpec::preset("strong").unwrap(), 11, "strong").unwrap();
    let target_dice = direct_test(&plain, &test_instances(&target)).unwrap().mean_dice();
    assert!(target_dice < test_dice, "target {target_dice} vs source {test_dice}");
}
