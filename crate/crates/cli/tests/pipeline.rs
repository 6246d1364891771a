use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use sha2::{Digest, Sha256};

use otfseg::baselines::{direct_test, direct_test_batch_stats};
use otfseg::data::load_dataset;
use otfseg::eval::load_report;
use otfseg::inference::test_instances;
use otfseg::{ModelCheckpoint, Split};
use otfseg_cli::commands::{self, BaselineMethod, Layout};
use otfseg_cli::provenance::Provenance;
use otfseg_cli::ExperimentConfig;

const TINY: &str = r#"
experiment_name = "tiny"
[synth]
n_train = 12
n_test = 4
size = [32, 32]
corpus_per_domain = 6
[dpg]
depth = 2
base_channels = 8
code_channels = 16
[dpg_train]
epochs = 2
[dpg_gate]
enforce = false
[train]
epochs = 2
batch_size = 4
[tent]
batch_size = 4
"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn otfseg(cfg: &Path, out: &Path, args: &[&str]) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_otfseg"))
        .arg("--config")
        .arg(cfg)
        .arg("--output-dir")
        .arg(out)
        .args(args)
        .output()
        .unwrap();
    let text = format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
    (o.status.code().unwrap_or(-1), text)
}

fn ok(cfg: &Path, out: &Path, args: &[&str]) -> String {
    let (code, text) = otfseg(cfg, out, args);
    assert_eq!(code, 0, "otfseg {args:?} failed:\n{text}");
    text
}

fn tree_digest(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "provenance.json" {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, hex::encode(Sha256::digest(fs::read(&p).unwrap())));
            }
        }
    }
    out
}

fn tiny_config(out: &Path) -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap().resolve(None, Some(out.to_path_buf()))
}

#[test]
fn full_pipeline_composes_and_records_provenance() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    for step in [
        &["synth"][..],
        &["pretrain-dpg"],
        &["train"],
        &["train", "--norm", "bn"],
        &["train", "--norm", "bn", "--domain", "target"],
    ] {
        ok(&cfg, &out, step);
    }
    let dpg_before = tree_digest(&out.join("dpg"));
    ok(&cfg, &out, &["adapt"]);
    ok(&cfg, &out, &["baseline", "--method", "direct"]);
    ok(&cfg, &out, &["baseline", "--method", "tent", "--shots", "1"]);
    ok(&cfg, &out, &["baseline", "--method", "tent", "--shots", "10"]);
    ok(&cfg, &out, &["baseline", "--method", "oracle"]);
    let grid = ok(&cfg, &out, &["report"]);
    assert_eq!(dpg_before, tree_digest(&out.join("dpg")));

    let rows: Vec<&str> = grid.lines().skip(2).map(|l| l.split('|').nth(1).unwrap().trim()).collect();
    assert_eq!(rows, ["direct", "ours", "tent-10shot", "tent-1shot", "oracle"]);

    let hash = tiny_config(&out).hash();
    let layout = Layout::new(&tiny_config(&out));
    for d in [
        out.join("data/source"),
        out.join("data/target"),
        out.join("data/corpus"),
        layout.dpg(),
        layout.model("adabn"),
        layout.model("bn"),
        layout.model("oracle"),
        layout.run("ours", "strong"),
        layout.run("direct", "strong"),
        layout.report(),
    ] {
        let p = Provenance::read(&d).unwrap_or_else(|e| panic!("{}: {e}", d.display()));
        assert_eq!(p.config_hash, hash, "{}", d.display());
    }
    let model = ModelCheckpoint::load(&layout.model("adabn")).unwrap();
    assert_eq!(model.metadata.config_hash.as_deref(), Some(hash.as_str()));
    assert!(fs::read_to_string(layout.dpg().join("loss.csv")).unwrap().starts_with("epoch,mean_loss,lr\n"));

    let masks = fs::read_dir(layout.run("ours", "strong").join("masks")).unwrap().count();
    assert_eq!(masks, 4);
    let report = load_report(&layout.run("ours", "strong").join("report.json")).unwrap();
    assert_eq!(report.per_instance.len(), 4);
    assert_eq!(report.metadata.model_fingerprint, Some(model.fingerprint()));

    // rerunning the report on unchanged runs gives identical bytes
    let first = fs::read(layout.report().join("comparison.csv")).unwrap();
    ok(&cfg, &out, &["--force", "report"]);
    assert_eq!(first, fs::read(layout.report().join("comparison.csv")).unwrap());
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    ok(&cfg, &out, &["synth"]);
    let before = tree_digest(&out);
    let (code, text) = otfseg(&cfg, &out, &["synth"]);
    assert_eq!(code, 1, "{text}");
    assert!(text.contains("--force"));
    assert_eq!(before, tree_digest(&out));
    ok(&cfg, &out, &["synth", "--force"]);
    assert_eq!(before, tree_digest(&out));
}

#[test]
fn synth_is_deterministic_under_seed() {
    let (dir, cfg) = setup();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&cfg, &a, &["synth"]);
    ok(&cfg, &b, &["synth"]);
    ok(&cfg, &c, &["--seed", "5", "synth"]);
    assert_eq!(tree_digest(&a), tree_digest(&b));
    assert_ne!(tree_digest(&a), tree_digest(&c));
}

#[test]
fn exit_codes_follow_error_classes() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    // missing prior generator checkpoint
    let (code, text) = otfseg(&cfg, &out, &["adapt"]);
    assert_eq!(code, 3, "{text}");

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nepochs = \"many\"\n").unwrap();
    assert_eq!(otfseg(&bad, &out, &["synth"]).0, 1);
    fs::write(&bad, "[synth]\ntarget_shift = \"sideways\"\n").unwrap();
    assert_eq!(otfseg(&bad, &out, &["synth"]).0, 1);

    ok(&cfg, &out, &["synth"]);
    ok(&cfg, &out, &["pretrain-dpg"]);
    ok(&cfg, &out, &["train"]);
    // a different prior generator breaks the fingerprint contract
    ok(&cfg, &out, &["--force", "--seed", "9", "pretrain-dpg"]);
    let (code, text) = otfseg(&cfg, &out, &["adapt"]);
    assert_eq!(code, 2, "{text}");
    assert_eq!(otfseg(&cfg, &out, &["train", "--domain", "target"]).0, 1);
}

#[test]
fn cli_flags_override_the_config_file() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    let text = ok(&cfg, &out, &["--seed", "42", "show-config"]);
    let shown = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(shown.seed, 42);
    assert_eq!(shown.train.seed, 42);
    assert_eq!(shown.output_dir, out);
    assert_eq!(shown.synth.source.n_train, 12);
}

#[test]
fn baselines_match_library_calls() {
    let (dir, _) = setup();
    let out = dir.path().join("run");
    let mut cfg = tiny_config(&out);
    commands::synth(&cfg, false).unwrap();
    commands::train(&cfg, otfseg::NormKind::Bn, commands::Domain::Source, false).unwrap();
    let model = ModelCheckpoint::load(&Layout::new(&cfg).model("bn")).unwrap();
    let data = load_dataset(&cfg.path(&cfg.data.target)).unwrap();
    let instances = test_instances(&data.load_split(Split::Test).unwrap());

    let direct = commands::baseline(&cfg, BaselineMethod::Direct, None, None, false).unwrap();
    assert_eq!(direct.per_instance, direct_test(&model, &instances).unwrap().per_instance);

    cfg.tent.lr = 0.0;
    let tent = commands::baseline(&cfg, BaselineMethod::Tent, Some(1), None, false).unwrap();
    let batch = direct_test_batch_stats(&model, &instances, cfg.tent.batch_size).unwrap();
    assert_eq!(tent.per_instance, batch.per_instance);
}
