//! Dice scoring, region composition, aggregation and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{Error, Result};

fn check_pair(pred: &Mask, gt: &Mask) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

fn dice_counts(inter: usize, p: usize, g: usize) -> f64 {
    match (p, g) {
        (0, 0) => 1.0,
        _ => 2.0 * inter as f64 / (p + g) as f64,
    }
}

fn dice_of(pred: &Mask, gt: &Mask, member: impl Fn(u8) -> bool) -> f64 {
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels().iter().zip(gt.labels()) {
        let (ia, ib) = (member(a), member(b));
        p += ia as usize;
        g += ib as usize;
        inter += (ia && ib) as usize;
    }
    dice_counts(inter, p, g)
}

/// `2|P ∩ G| / (|P| + |G|)` for one label; 1 when both are empty.
pub fn dice_score(pred: &Mask, gt: &Mask, class_id: u8) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(dice_of(pred, gt, |l| l == class_id))
}

/// Named label unions scored as binary regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    /// Every label that may appear in a mask.
    pub label_space: BTreeSet<u8>,
    pub regions: BTreeMap<String, BTreeSet<u8>>,
}

impl RegionSpec {
    pub fn new(label_space: impl IntoIterator<Item = u8>, regions: impl IntoIterator<Item = (String, Vec<u8>)>) -> Result<Self> {
        let spec = Self {
            label_space: label_space.into_iter().collect(),
            regions: regions
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().collect()))
                .collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Whole tumor, tumor core and enhancing tumor over labels `{0, 1, 2, 4}`.
    pub fn brats() -> Self {
        Self::new(
            [0, 1, 2, 4],
            [
                ("WT".to_string(), vec![1, 2, 4]),
                ("TC".to_string(), vec![1, 4]),
                ("ET".to_string(), vec![4]),
            ],
        )
        .expect("static region spec is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() {
            return Err(Error::Validation("region spec has no regions".into()));
        }
        for (name, labels) in &self.regions {
            if labels.is_empty() {
                return Err(Error::Validation(format!("region {name} has no labels")));
            }
            if let Some(l) = labels.iter().find(|l| !self.label_space.contains(l)) {
                return Err(Error::Validation(format!(
                    "region {name} uses label {l}, which is not in the label space {:?}",
                    self.label_space
                )));
            }
        }
        Ok(())
    }
}

/// Dice per region after binarizing both masks by label-set union.
pub fn region_dice(pred: &Mask, gt: &Mask, spec: &RegionSpec) -> Result<BTreeMap<String, f64>> {
    spec.validate()?;
    check_pair(pred, gt)?;
    for m in [pred, gt] {
        if let Some(l) = m.labels().iter().find(|l| !spec.label_space.contains(l)) {
            return Err(Error::Validation(format!("mask label {l} is outside the region label space")));
        }
    }
    Ok(spec
        .regions
        .iter()
        .map(|(name, set)| (name.clone(), dice_of(pred, gt, |l| set.contains(&l))))
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub method: String,
    #[serde(default)]
    pub target_domain: String,
    #[serde(default)]
    pub model_fingerprint: Option<String>,
    #[serde(default)]
    pub dpg_fingerprint: Option<String>,
    #[serde(default)]
    pub config_hash: Option<String>,
    /// Seconds since the Unix epoch.
    #[serde(default)]
    pub timestamp: u64,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl ReportMetadata {
    pub fn new(method: impl Into<String>, target_domain: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            target_domain: target_domain.into(),
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            ..Default::default()
        }
    }
}

/// Per-instance and aggregate Dice of one method on one test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    /// Scored labels, in column order of `per_instance`.
    pub classes: Vec<u8>,
    pub per_instance: BTreeMap<String, Vec<f64>>,
    pub per_class_mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_scores: Option<BTreeMap<String, f64>>,
    pub metadata: ReportMetadata,
}

impl DiceReport {
    /// Unweighted mean over scored classes of the per-class means.
    pub fn mean_dice(&self) -> f64 {
        if self.per_class_mean.is_empty() {
            return 0.0;
        }
        self.per_class_mean.iter().sum::<f64>() / self.per_class_mean.len() as f64
    }

    /// Mean Dice of one instance over scored classes.
    pub fn instance_mean(&self, id: &str) -> Option<f64> {
        self.per_instance
            .get(id)
            .map(|v| v.iter().sum::<f64>() / v.len().max(1) as f64)
    }
}

/// Foreground labels `1..num_classes`.
pub fn foreground_labels(num_classes: usize) -> Vec<u8> {
    (1..num_classes.max(2)).map(|c| c as u8).collect()
}

/// The single scoring path shared by every method.
pub fn score_predictions<'a>(
    pairs: impl IntoIterator<Item = (&'a str, &'a Mask, &'a Mask)>,
    num_classes: usize,
    regions: Option<&RegionSpec>,
    metadata: ReportMetadata,
) -> Result<DiceReport> {
    let classes = foreground_labels(num_classes);
    let mut per_instance = BTreeMap::new();
    let mut region_acc: BTreeMap<String, f64> = BTreeMap::new();
    for (id, pred, gt) in pairs {
        let scores = classes
            .iter()
            .map(|&c| dice_score(pred, gt, c))
            .collect::<Result<Vec<_>>>()?;
        if per_instance.insert(id.to_string(), scores).is_some() {
            return Err(Error::Validation(format!("instance {id} scored twice")));
        }
        if let Some(spec) = regions {
            for (name, v) in region_dice(pred, gt, spec)? {
                *region_acc.entry(name).or_default() += v;
            }
        }
    }
    if per_instance.is_empty() {
        return Err(Error::Validation("no instances to score".into()));
    }
    let n = per_instance.len() as f64;
    let per_class_mean = (0..classes.len())
        .map(|k| per_instance.values().map(|v: &Vec<f64>| v[k]).sum::<f64>() / n)
        .collect();
    Ok(DiceReport {
        classes,
        per_instance,
        per_class_mean,
        region_scores: regions.map(|_| region_acc.into_iter().map(|(k, v)| (k, v / n)).collect()),
        metadata,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    MarkdownTable,
}

/// `instance,class,dice` rows.
pub fn report_csv(report: &DiceReport) -> String {
    let mut out = String::from("instance,class,dice\n");
    for (id, scores) in &report.per_instance {
        for (c, d) in report.classes.iter().zip(scores) {
            let _ = writeln!(out, "{id},{c},{d}");
        }
    }
    out
}

pub fn report_markdown(report: &DiceReport) -> String {
    let m = &report.metadata;
    let mut out = format!("## {} on {}\n\n", m.method, m.target_domain);
    out.push_str("| class | mean Dice |\n|---|---|\n");
    for (c, d) in report.classes.iter().zip(&report.per_class_mean) {
        let _ = writeln!(out, "| {c} | {d:.4} |");
    }
    if let Some(regions) = &report.region_scores {
        out.push_str("\n| region | mean Dice |\n|---|---|\n");
        for (name, d) in regions {
            let _ = writeln!(out, "| {name} | {d:.4} |");
        }
    }
    let _ = writeln!(out, "\n{} instances, mean Dice {:.4}", report.per_instance.len(), report.mean_dice());
    out
}

pub fn emit_report(report: &DiceReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).map_err(|e| Error::corrupt(path, e))?,
        ReportFormat::Csv => report_csv(report),
        ReportFormat::MarkdownTable => report_markdown(report),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_report(path: &Path) -> Result<DiceReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e))
}

/// Shown in a comparison grid cell with no report.
pub const GAP_MARKER: &str = "n/a";

fn method_rank(method: &str) -> u8 {
    match method {
        "direct" => 0,
        "oracle" => 2,
        _ => 1,
    }
}

/// Methods in grid order: `direct` first, `oracle` last, the rest by name.
pub fn ordered_methods<'a>(methods: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut m: Vec<String> = methods.into_iter().map(str::to_string).collect::<BTreeSet<_>>().into_iter().collect();
    m.sort_by(|a, b| method_rank(a).cmp(&method_rank(b)).then(a.cmp(b)));
    m
}

fn grid(reports: &[DiceReport]) -> (Vec<String>, Vec<String>, BTreeMap<(String, String), f64>) {
    let methods = ordered_methods(reports.iter().map(|r| r.metadata.method.as_str()));
    let domains: Vec<String> = reports
        .iter()
        .map(|r| r.metadata.target_domain.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let cells = reports
        .iter()
        .map(|r| ((r.metadata.method.clone(), r.metadata.target_domain.clone()), r.mean_dice()))
        .collect();
    (methods, domains, cells)
}

/// Methods as rows, target domains as columns, mean Dice in each cell.
pub fn comparison_markdown(reports: &[DiceReport]) -> String {
    let (methods, domains, cells) = grid(reports);
    let mut out = String::from("| method |");
    for d in &domains {
        let _ = write!(out, " {d} |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(domains.len()));
    out.push('\n');
    for m in &methods {
        let _ = write!(out, "| {m} |");
        for d in &domains {
            match cells.get(&(m.clone(), d.clone())) {
                Some(v) => {
                    let _ = write!(out, " {v:.4} |");
                }
                None => {
                    let _ = write!(out, " {GAP_MARKER} |");
                }
            }
        }
        out.push('\n');
    }
    out
}

pub fn comparison_csv(reports: &[DiceReport]) -> String {
    let (methods, domains, cells) = grid(reports);
    let mut out = format!("method,{}\n", domains.join(","));
    for m in &methods {
        out.push_str(m);
        for d in &domains {
            match cells.get(&(m.clone(), d.clone())) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => {
                    let _ = write!(out, ",{GAP_MARKER}");
                }
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(labels: &[u8]) -> Mask {
        Mask::new(vec![labels.len()], labels.to_vec()).unwrap()
    }

    #[test]
    fn dice_hand_values() {
        let gt = mask(&[1, 1, 1, 1, 0, 0, 0]);
        let pred = mask(&[0, 0, 1, 1, 1, 0, 0]);
        assert!((dice_score(&pred, &gt, 1).unwrap() - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(dice_score(&gt, &gt, 1).unwrap(), 1.0);
        assert_eq!(dice_score(&gt, &gt, 3).unwrap(), 1.0);
        assert_eq!(dice_score(&mask(&[0, 0]), &mask(&[1, 0]), 1).unwrap(), 0.0);
        assert!(matches!(dice_score(&gt, &mask(&[1]), 1), Err(Error::Shape(_))));
    }

    #[test]
    fn brats_regions_by_hand() {
        // voxels: (pred, gt) = (4, 4), (1, 2), (2, 0)
        let pred = mask(&[4, 1, 2]);
        let gt = mask(&[4, 2, 0]);
        let r = region_dice(&pred, &gt, &RegionSpec::brats()).unwrap();
        // WT: P={0,1,2} G={0,1} -> 4/5; TC: P={0,1} G={0} -> 2/3; ET: P={0} G={0} -> 1
        assert!((r["WT"] - 0.8).abs() < 1e-12);
        assert!((r["TC"] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r["ET"], 1.0);
        assert!(RegionSpec::new([0, 1], [("X".to_string(), vec![3])]).is_err());
        assert!(region_dice(&mask(&[3, 0, 0]), &gt, &RegionSpec::brats()).is_err());
    }

    #[test]
    fn singleton_region_matches_class_dice() {
        let pred = mask(&[0, 1, 2, 2, 1]);
        let gt = mask(&[1, 1, 2, 0, 2]);
        let spec = RegionSpec::new(0..3, [("one".to_string(), vec![2])]).unwrap();
        let r = region_dice(&pred, &gt, &spec).unwrap();
        assert_eq!(r["one"], dice_score(&pred, &gt, 2).unwrap());
    }

    fn sample_report(method: &str, domain: &str, d: f64) -> DiceReport {
        let gt = mask(&[1, 1, 0, 0]);
        let pred = if d >= 1.0 { gt.clone() } else { mask(&[1, 0, 0, 0]) };
        score_predictions([("a", &pred, &gt)], 2, None, ReportMetadata::new(method, domain)).unwrap()
    }

    #[test]
    fn reports_roundtrip_and_render() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample_report("ours", "strong", 0.5);
        assert!((r.mean_dice() - 2.0 / 3.0).abs() < 1e-12);
        assert!(r.region_scores.is_none());
        let p = dir.path().join("r.json");
        emit_report(&r, &p, ReportFormat::Json).unwrap();
        assert_eq!(load_report(&p).unwrap(), r);
        assert!(!fs::read_to_string(&p).unwrap().contains("region_scores"));
        emit_report(&r, &dir.path().join("r.csv"), ReportFormat::Csv).unwrap();
        assert_eq!(report_csv(&r), format!("instance,class,dice\na,1,{}\n", 2.0 / 3.0));
        emit_report(&r, &dir.path().join("r.md"), ReportFormat::MarkdownTable).unwrap();
    }

    #[test]
    fn grid_orders_rows_and_marks_gaps() {
        let reports = vec![
            sample_report("oracle", "strong", 1.0),
            sample_report("ours", "strong", 0.5),
            sample_report("direct", "strong", 0.5),
            sample_report("direct", "mild", 1.0),
        ];
        let md = comparison_markdown(&reports);
        let rows: Vec<&str> = md.lines().skip(2).collect();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].starts_with("| direct |"));
        assert!(rows[2].starts_with("| oracle |"));
        assert!(rows[2].contains(GAP_MARKER));
        assert_eq!(md, comparison_markdown(&reports));
        assert!(comparison_csv(&reports).starts_with("method,mild,strong\ndirect,"));
    }
}
