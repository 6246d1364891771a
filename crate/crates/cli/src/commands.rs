//! Subcommand implementations. Each one reads its inputs from the run
//! layout under `output_dir`, writes its outputs plus a provenance record,
//! and refuses to replace existing outputs unless forced.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;

use otfseg::baselines::{direct_test, tent_adapt};
use otfseg::data::{apply_domain_shift, load_dataset, random_split, shift_samples, synth_base_dataset, synth_samples, write_dataset};
use otfseg::dpg::{build_dpg, pretrain_dpg, reconstruction_mse};
use otfseg::eval::{comparison_csv, comparison_markdown, emit_report, load_report, ReportFormat};
use otfseg::inference::{episodic_run, test_instances};
use otfseg::model::build_model;
use otfseg::training::{train_plain, train_source, write_loss_csv};
use otfseg::{ArchConfig, DatasetManifest, DiceReport, Error, ModelCheckpoint, NormKind, Split, SynthSpec, Tensor};

use crate::config::ExperimentConfig;
use crate::provenance::Provenance;

pub const REPORT_JSON: &str = "report.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineMethod {
    Direct,
    Tent,
    Oracle,
}

/// Directory layout of one experiment.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            root: cfg.output_dir.clone(),
        }
    }

    pub fn dpg(&self) -> PathBuf {
        self.root.join("dpg")
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.root.join("models").join(name)
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn run(&self, method: &str, domain: &str) -> PathBuf {
        self.runs().join(method).join(domain)
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Makes `dir` empty and present; an existing non-empty `dir` is an error
/// unless `force` is set.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    let occupied = match fs::read_dir(dir) {
        Ok(mut it) => it.next().is_some(),
        Err(_) => false,
    };
    if occupied {
        if !force {
            return Err(Error::Validation(format!("{} already exists; pass --force to overwrite", dir.display())).into());
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn load_checkpoint(dir: &Path, what: &str) -> Result<ModelCheckpoint> {
    ModelCheckpoint::load(dir).with_context(|| format!("loading {what} from {}", dir.display()))
}

/// Source, shifted target, and one corpus dataset per corpus shift.
pub fn synth(cfg: &ExperimentConfig, force: bool) -> Result<Vec<DatasetManifest>> {
    let (src_dir, tgt_dir, corpus_dir) = (cfg.path(&cfg.data.source), cfg.path(&cfg.data.target), cfg.path(&cfg.data.dpg_corpus));
    let target_shift = cfg.shift(&cfg.synth.target_shift)?;
    let corpus_shifts = cfg
        .synth
        .corpus_shifts
        .iter()
        .map(|n| cfg.shift(n).map(|s| (n.clone(), s)))
        .collect::<otfseg::Result<Vec<_>>>()?;
    for d in [&src_dir, &tgt_dir, &corpus_dir] {
        prepare_output(d, force)?;
    }

    let source = synth_base_dataset(&src_dir, &cfg.synth.source)?;
    let target = apply_domain_shift(&source, &target_shift, cfg.seed.wrapping_add(1), &cfg.synth.target_shift, &tgt_dir)?;
    Provenance::new("synth", cfg)
        .output("source_samples", source.len())
        .write(&src_dir)?;
    Provenance::new("synth", cfg)
        .input("source", src_dir.display())
        .input("shift", &cfg.synth.target_shift)
        .output("shift_spec", &target_shift)
        .write(&tgt_dir)?;
    info!("source: {} samples, target `{}`", source.len(), cfg.synth.target_shift);

    let mut out = vec![source, target];
    for (i, (name, spec)) in corpus_shifts.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(1000 + i as u64);
        let base = synth_samples(&SynthSpec {
            n_train: cfg.synth.corpus_per_domain,
            n_test: 0,
            seed,
            domain_tag: name.clone(),
            ..cfg.synth.source.clone()
        })?;
        let shifted = shift_samples(&base, spec, seed, name)?;
        out.push(write_dataset(&corpus_dir.join(name), cfg.synth.source.num_classes, name, &shifted)?);
    }
    Provenance::new("synth", cfg)
        .output("domains", &cfg.synth.corpus_shifts)
        .write(&corpus_dir)?;
    Ok(out)
}

fn corpus_images(root: &Path) -> Result<Vec<Tensor<f32>>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("manifest.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!(Error::Validation(format!("no datasets found under {}", root.display())));
    }
    let mut images = Vec::new();
    for d in dirs {
        let m = load_dataset(&d)?;
        for split in [Split::Train, Split::Test] {
            images.extend(m.load_split(split)?.into_iter().map(|s| s.image));
        }
    }
    Ok(images)
}

/// Trained prior generator and its held-out reconstruction MSE ratio.
pub fn pretrain(cfg: &ExperimentConfig, force: bool) -> Result<(ModelCheckpoint, Option<f64>)> {
    let corpus_dir = cfg.path(&cfg.data.dpg_corpus);
    let images = corpus_images(&corpus_dir)?;
    let (train_idx, held_idx) = random_split(images.len(), cfg.dpg_gate.held_out_fraction, cfg.seed);
    let train: Vec<Tensor<f32>> = train_idx.iter().map(|&i| images[i].clone()).collect();
    let held: Vec<Tensor<f32>> = held_idx.iter().map(|&i| images[i].clone()).collect();

    let out = Layout::new(cfg).dpg();
    prepare_output(&out, force)?;
    let mut dpg = pretrain_dpg(&train, &cfg.dpg, &cfg.dpg_train)?;
    dpg.metadata.config_hash = Some(cfg.hash());
    dpg.save(&out)?;
    write_loss_csv(&out.join("loss.csv"), &dpg.metadata.loss_curve)?;

    let ratio = if held.is_empty() {
        None
    } else {
        let before = reconstruction_mse(&build_dpg(&cfg.dpg, cfg.dpg_train.seed)?, &held)?;
        let after = reconstruction_mse(&dpg, &held)?;
        info!("held-out MSE {before:.5} -> {after:.5}");
        Some(after / before)
    };
    Provenance::new("pretrain-dpg", cfg)
        .input("corpus", corpus_dir.display())
        .output("fingerprint", dpg.fingerprint())
        .output("train_images", train.len())
        .output("held_out_images", held.len())
        .output("mse_ratio", ratio)
        .write(&out)?;
    if let Some(r) = ratio.filter(|_| cfg.dpg_gate.enforce) {
        let max = cfg.dpg_gate.max_mse_ratio;
        if r >= max {
            bail!(Error::Numeric(format!("held-out MSE ratio {r:.4} is not below {max}")));
        }
    }
    Ok((dpg, ratio))
}

fn model_name(norm: NormKind, domain: Domain) -> Result<&'static str> {
    match (norm, domain) {
        (NormKind::AdaBn, Domain::Source) => Ok("adabn"),
        (NormKind::Bn, Domain::Source) => Ok("bn"),
        (NormKind::Bn, Domain::Target) => Ok("oracle"),
        (NormKind::AdaBn, Domain::Target) => {
            Err(Error::Validation("the oracle is a plain BN model; use --norm bn with --domain target".into()).into())
        }
    }
}

fn arch_for(cfg: &ExperimentConfig, data: &DatasetManifest, norm: NormKind) -> ArchConfig {
    ArchConfig {
        dimensionality: data.dimensionality,
        in_channels: data.in_channels,
        num_classes: data.num_classes,
        norm,
        ..cfg.arch.clone()
    }
}

/// Trains a segmenter and saves it under `models/{adabn,bn,oracle}`.
pub fn train(cfg: &ExperimentConfig, norm: NormKind, domain: Domain, force: bool) -> Result<ModelCheckpoint> {
    let name = model_name(norm, domain)?;
    let data_dir = cfg.path(match domain {
        Domain::Source => &cfg.data.source,
        Domain::Target => &cfg.data.target,
    });
    let data = load_dataset(&data_dir)?;
    let samples = data.load_split(Split::Train)?;
    let layout = Layout::new(cfg);
    let mut prov = Provenance::new("train", cfg).input("dataset", data_dir.display());

    let dpg = match norm {
        NormKind::AdaBn => Some(load_checkpoint(&layout.dpg(), "prior generator")?),
        NormKind::Bn => None,
    };
    let mut arch = arch_for(cfg, &data, norm);
    if let Some(d) = &dpg {
        if let otfseg::Architecture::Dpg(dc) = &d.arch {
            arch.code_channels = dc.code_channels;
        }
    }
    let out = layout.model(name);
    prepare_output(&out, force)?;
    let init = build_model(&arch, cfg.train.seed)?;
    let mut model = match &dpg {
        Some(d) => {
            let before = d.weights_hash();
            let m = train_source(&init, d, &samples, &cfg.train)?;
            if d.weights_hash() != before {
                bail!(Error::Contract("prior generator weights changed during training".into()));
            }
            prov = prov.input("dpg", d.fingerprint());
            m
        }
        None => train_plain(&init, &samples, &cfg.train)?,
    };
    model.metadata.config_hash = Some(cfg.hash());
    model.save(&out)?;
    write_loss_csv(&out.join("loss.csv"), &model.metadata.loss_curve)?;
    let final_loss = model.metadata.loss_curve.last().map(|e| e.mean_loss);
    info!("{name}: {} epochs, final loss {final_loss:?}", cfg.train.epochs);
    prov.output("fingerprint", model.fingerprint())
        .output("final_loss", final_loss)
        .write(&out)?;
    Ok(model)
}

fn write_report(dir: &Path, report: &DiceReport) -> Result<()> {
    emit_report(report, &dir.join(REPORT_JSON), ReportFormat::Json)?;
    emit_report(report, &dir.join("report.csv"), ReportFormat::Csv)?;
    emit_report(report, &dir.join("report.md"), ReportFormat::MarkdownTable)?;
    Ok(())
}

fn test_data(cfg: &ExperimentConfig, dataset: Option<&Path>) -> Result<(DatasetManifest, Vec<otfseg::TestInstance>)> {
    let dir = match dataset {
        Some(p) => p.to_path_buf(),
        None => cfg.path(&cfg.data.target),
    };
    let data = load_dataset(&dir)?;
    let samples = data.load_split(Split::Test)?;
    if samples.is_empty() {
        bail!(Error::Validation(format!("{} has no test split", dir.display())));
    }
    Ok((data, test_instances(&samples)))
}

/// Episodic on-the-fly evaluation; writes the report and one mask per
/// instance under `runs/ours/<domain>`.
pub fn adapt(cfg: &ExperimentConfig, dataset: Option<&Path>, force: bool) -> Result<DiceReport> {
    let layout = Layout::new(cfg);
    let model = load_checkpoint(&layout.model("adabn"), "adaptive model")?;
    let dpg = load_checkpoint(&layout.dpg(), "prior generator")?;
    let (data, instances) = test_data(cfg, dataset)?;
    let out = layout.run("ours", &data.domain_tag);
    prepare_output(&out, force)?;

    let hashes = (model.weights_hash(), dpg.weights_hash());
    let (results, mut report) = episodic_run(&model, &dpg, &instances, None)?;
    let unchanged = hashes == (model.weights_hash(), dpg.weights_hash());
    info!("weights unchanged after episodic evaluation: {unchanged}");
    if !unchanged {
        bail!(Error::Contract("weights changed during episodic evaluation".into()));
    }
    report.metadata.target_domain = data.domain_tag.clone();
    report.metadata.config_hash = Some(cfg.hash());
    write_report(&out, &report)?;
    let masks = out.join("masks");
    fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    for r in &results {
        otfseg::io::write_array_u8(&masks.join(format!("{}.arr", r.instance_id)), r.mask.shape(), r.mask.labels())?;
    }
    Provenance::new("adapt", cfg)
        .input("dataset", data.root.display())
        .input("model", model.fingerprint())
        .input("dpg", dpg.fingerprint())
        .output("mean_dice", report.mean_dice())
        .output("weights_unchanged", unchanged)
        .write(&out)?;
    Ok(report)
}

/// Scores a comparison method under `runs/<method>/<domain>`.
pub fn baseline(
    cfg: &ExperimentConfig,
    method: BaselineMethod,
    shots: Option<usize>,
    dataset: Option<&Path>,
    force: bool,
) -> Result<DiceReport> {
    let layout = Layout::new(cfg);
    let (data, instances) = test_data(cfg, dataset)?;
    let model_dir = layout.model(match method {
        BaselineMethod::Oracle => "oracle",
        _ => "bn",
    });
    let model = load_checkpoint(&model_dir, "plain model")?;
    let mut report = match method {
        BaselineMethod::Direct => direct_test(&model, &instances)?,
        BaselineMethod::Oracle => {
            let mut r = direct_test(&model, &instances)?;
            r.metadata.method = "oracle".into();
            r
        }
        BaselineMethod::Tent => {
            let mut tc = cfg.tent.clone();
            if let Some(s) = shots {
                tc.shots = s;
            }
            tent_adapt(&model, &instances, &tc)?.1
        }
    };
    report.metadata.target_domain = data.domain_tag.clone();
    report.metadata.config_hash = Some(cfg.hash());
    let out = layout.run(&report.metadata.method, &data.domain_tag);
    prepare_output(&out, force)?;
    write_report(&out, &report)?;
    Provenance::new("baseline", cfg)
        .input("dataset", data.root.display())
        .input("model", model.fingerprint())
        .output("method", &report.metadata.method)
        .output("mean_dice", report.mean_dice())
        .write(&out)?;
    Ok(report)
}

/// Every `report.json` below `root`, in path order.
pub fn find_reports(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == REPORT_JSON) {
                found.push(p);
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Comparison grid over the given run directories, or every run.
pub fn report(cfg: &ExperimentConfig, run_dirs: &[PathBuf], force: bool) -> Result<String> {
    let layout = Layout::new(cfg);
    let mut paths = Vec::new();
    if run_dirs.is_empty() {
        paths = find_reports(&layout.runs())?;
    } else {
        for d in run_dirs {
            paths.extend(find_reports(d)?);
        }
    }
    if paths.is_empty() {
        bail!(Error::Validation("no run reports found".into()));
    }
    let reports = paths.iter().map(|p| load_report(p)).collect::<otfseg::Result<Vec<_>>>()?;
    let out = layout.report();
    prepare_output(&out, force)?;
    let md = comparison_markdown(&reports);
    let csv = comparison_csv(&reports);
    for (name, text) in [("comparison.md", &md), ("comparison.csv", &csv)] {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    let mut prov = Provenance::new("report", cfg);
    for p in &paths {
        prov = prov.input(&p.display().to_string(), "report");
    }
    prov.write(&out)?;
    Ok(md)
}
