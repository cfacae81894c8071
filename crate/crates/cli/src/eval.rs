//! Joins predictions with ground truth and scores them against a constant
//! baseline: the best constant disparity per sequence for depth, and for
//! normals the mean normal of the training split, one vector for all
//! sequences.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use clearflow_core::imageio;
use clearflow_core::metrics::{
    self, apply_alignment, evaluate_depth_sequence, evaluation_mask, normal_metrics, AlignmentResult, DepthMetrics,
    EvalConfig, NormalReport,
};
use clearflow_core::trainer::Target;
use clearflow_core::Video;

use crate::dataset::{load_sequence, DatasetManifest, SequenceEntry, Split};
use crate::error::{CliError, Result};
use crate::files::{write_json, RunManifest};
use crate::infer::{load_prediction, PredictionManifest};

pub const MODEL: &str = "model";
pub const BASELINE: &str = "constant";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalJobConfig {
    pub metrics: EvalConfig,
    /// Image row used for temporal profiles; the middle row when absent.
    pub profile_row: Option<usize>,
    pub write_profiles: bool,
}

impl Default for EvalJobConfig {
    fn default() -> Self {
        Self {
            metrics: EvalConfig::default(),
            profile_row: None,
            write_profiles: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEval {
    pub id: String,
    /// Metric values in report column order, per method; `None` when skipped.
    pub model: Option<Vec<f64>>,
    pub baseline: Option<Vec<f64>>,
    pub alignment: Option<AlignmentResult>,
    pub pred_jitter: Option<f64>,
    pub gt_jitter: Option<f64>,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target: Target,
    pub columns: Vec<String>,
    pub higher_is_better: Vec<bool>,
    pub sequences: Vec<SequenceEval>,
    /// Unweighted means over evaluated sequences, per method.
    pub mean: Vec<(String, Vec<f64>)>,
    /// Average rank per method over the mean metrics.
    pub ranks: Vec<(String, f64)>,
    pub mean_pred_jitter: Option<f64>,
    pub mean_gt_jitter: Option<f64>,
}

impl EvalReport {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Sequences where the model beats the baseline on `column`.
    pub fn wins(&self, column: &str) -> (usize, usize) {
        let Some(j) = self.column(column) else { return (0, 0) };
        let hib = self.higher_is_better[j];
        let mut n = 0;
        let mut wins = 0;
        for s in &self.sequences {
            if let (Some(m), Some(b)) = (&s.model, &s.baseline) {
                n += 1;
                if (hib && m[j] > b[j]) || (!hib && m[j] < b[j]) {
                    wins += 1;
                }
            }
        }
        (wins, n)
    }
}

fn mean_rows(rows: impl Iterator<Item = Vec<f64>>) -> Option<Vec<f64>> {
    let rows: Vec<Vec<f64>> = rows.collect();
    let first = rows.first()?;
    let mut m = vec![0.0; first.len()];
    for r in &rows {
        for (a, v) in m.iter_mut().zip(r) {
            *a += v / rows.len() as f64;
        }
    }
    Some(m)
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Ids present on only one side of the join.
fn check_join(gt: &BTreeSet<String>, pred: &BTreeSet<String>) -> Result<()> {
    let missing: Vec<&String> = gt.difference(pred).collect();
    let unknown: Vec<&String> = pred.difference(gt).collect();
    if missing.is_empty() && unknown.is_empty() {
        return Ok(());
    }
    Err(CliError::Data(format!(
        "prediction/ground-truth id mismatch: missing predictions for {missing:?}; predictions without ground truth {unknown:?}"
    )))
}

fn depth_columns(m: &DepthMetrics) -> Vec<f64> {
    m.columns().to_vec()
}

fn profile_png(video: &Video, row: usize, keep: &dyn Fn(usize, usize) -> bool, path: &Path) -> Result<()> {
    let p = metrics::temporal_profile(video, row)?;
    let w = p.width;
    let img = imageio::colorize(&p.data, p.width, p.height, |i| keep(i / w, i % w))?;
    imageio::write_png(path, &img)?;
    Ok(())
}

/// Unit mean of valid ground-truth normals over the given sequences.
fn mean_normal<'a>(root: &Path, entries: impl Iterator<Item = &'a SequenceEntry>) -> Result<Option<[f32; 3]>> {
    let mut sum = [0.0f64; 3];
    for e in entries {
        let gt = load_sequence(root, e)?;
        for (n, _) in gt.normal.data().chunks_exact(3).zip(&gt.mask).filter(|(_, &m)| m) {
            for c in 0..3 {
                sum[c] += n[c] as f64;
            }
        }
    }
    let len = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((len > 0.0).then(|| sum.map(|v| (v / len) as f32)))
}

/// The constant normal baseline: the training-split mean, or the pooled test
/// mean when the dataset has no training split.
fn baseline_normal(root: &Path, manifest: &DatasetManifest) -> Result<[f32; 3]> {
    if let Some(n) = mean_normal(root, manifest.split(Split::Train))? {
        return Ok(n);
    }
    log::warn!("no training normals; the constant baseline uses the pooled test mean");
    Ok(mean_normal(root, manifest.split(Split::Test))?.unwrap_or([0.0, 0.0, 1.0]))
}

pub fn run_eval(pred_dir: &Path, data_root: &Path, out: &Path, config: &EvalJobConfig) -> Result<EvalReport> {
    let preds = PredictionManifest::load(pred_dir)?;
    let manifest = DatasetManifest::load(data_root)?;
    let gt_ids: BTreeSet<String> = manifest.split(Split::Test).map(|s| s.id.clone()).collect();
    let pred_ids: BTreeSet<String> = preds.sequences.iter().map(|s| s.id.clone()).collect();
    check_join(&gt_ids, &pred_ids)?;

    let (columns, hib): (Vec<String>, Vec<bool>) = match preds.target {
        Target::Depth => (
            DepthMetrics::COLUMN_NAMES.iter().map(|s| s.to_string()).collect(),
            DepthMetrics::HIGHER_IS_BETTER.to_vec(),
        ),
        Target::Normal => (
            NormalReport::COLUMN_NAMES.iter().map(|s| s.to_string()).collect(),
            NormalReport::HIGHER_IS_BETTER.to_vec(),
        ),
    };
    let constant_normal = match preds.target {
        Target::Depth => None,
        Target::Normal => Some(baseline_normal(data_root, &manifest)?),
    };
    let mut sequences = Vec::new();
    for pe in &preds.sequences {
        let entry = manifest.get(&pe.id).expect("join checked above");
        let gt = load_sequence(data_root, entry)?;
        let pred = load_prediction(pred_dir, pe)?;
        let expected_channels = preds.target.channels();
        if pred.frames() != gt.frames()
            || pred.height() != gt.rgb.height()
            || pred.width() != gt.rgb.width()
            || pred.channels() != expected_channels
        {
            return Err(CliError::Data(format!(
                "{}: prediction shape {:?} does not match ground truth {:?}",
                pe.id,
                pred.shape(),
                gt.depth.shape()
            )));
        }
        let row = config.profile_row.unwrap_or(gt.rgb.height() / 2);
        let mut se = SequenceEval {
            id: pe.id.clone(),
            model: None,
            baseline: None,
            alignment: None,
            pred_jitter: None,
            gt_jitter: None,
            note: None,
        };
        match preds.target {
            Target::Depth => {
                let r = evaluate_depth_sequence(&pe.id, &pred, &gt.depth, &gt.mask, &config.metrics)?;
                let constant = Video::filled(pred.frames(), pred.height(), pred.width(), 1, 0.0);
                let b = evaluate_depth_sequence(&pe.id, &constant, &gt.depth, &gt.mask, &config.metrics)?;
                se.model = r.metrics.as_ref().map(depth_columns);
                se.baseline = b.metrics.as_ref().map(depth_columns);
                se.alignment = r.alignment;
                se.note = r.note;
                if let Some(a) = &r.alignment {
                    let aligned = apply_alignment(pred.data(), a, config.metrics.align_space);
                    let aligned = Video::new(pred.frames(), pred.height(), pred.width(), 1, aligned)?;
                    let mask = evaluation_mask(gt.depth.data(), &gt.mask, config.metrics.depth_range);
                    let (h, w) = (gt.rgb.height(), gt.rgb.width());
                    let keep = |k: usize, x: usize| mask[(k * h + row) * w + x];
                    let pp = metrics::temporal_profile(&aligned, row)?;
                    let gp = metrics::temporal_profile(&gt.depth, row)?;
                    se.pred_jitter = metrics::profile_jitter(&pp, keep);
                    se.gt_jitter = metrics::profile_jitter(&gp, keep);
                    if config.write_profiles {
                        let dir = out.join("profiles");
                        profile_png(&aligned, row, &keep, &dir.join(format!("{}_pred.png", pe.id)))?;
                        profile_png(&gt.depth, row, &keep, &dir.join(format!("{}_gt.png", pe.id)))?;
                    }
                }
            }
            Target::Normal => {
                let model = normal_metrics(pred.data(), gt.normal.data(), &gt.mask)?;
                let mean = constant_normal.expect("computed for normal targets");
                let constant: Vec<f32> = (0..gt.mask.len()).flat_map(|_| mean).collect();
                let baseline = normal_metrics(&constant, gt.normal.data(), &gt.mask)?;
                se.model = model.map(|m| m.columns().to_vec());
                se.baseline = baseline.map(|m| m.columns().to_vec());
                if se.model.is_none() {
                    se.note = Some("no valid pixels; skipped".into());
                }
            }
        }
        sequences.push(se);
    }
    let model_mean = mean_rows(sequences.iter().filter_map(|s| s.model.clone()));
    let base_mean = mean_rows(sequences.iter().filter_map(|s| s.baseline.clone()));
    let mut mean = Vec::new();
    if let Some(m) = model_mean.clone() {
        mean.push((MODEL.to_owned(), m));
    }
    if let Some(b) = base_mean.clone() {
        mean.push((BASELINE.to_owned(), b));
    }
    let ranks = match (model_mean, base_mean) {
        (Some(m), Some(b)) => {
            let r = metrics::rank_methods(&[m, b], &hib)?;
            vec![(MODEL.to_owned(), r[0]), (BASELINE.to_owned(), r[1])]
        }
        _ => Vec::new(),
    };
    let report = EvalReport {
        target: preds.target,
        columns,
        higher_is_better: hib,
        mean_pred_jitter: mean_opt(sequences.iter().map(|s| s.pred_jitter)),
        mean_gt_jitter: mean_opt(sequences.iter().map(|s| s.gt_jitter)),
        sequences,
        mean,
        ranks,
    };
    write_report(out, &report)?;
    RunManifest::new("eval", 0, config)?.write(out)?;
    Ok(report)
}

/// `metrics.csv` (one row per method and sequence, then the means and
/// ranks) and `report.json`.
pub fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let path = out.join("metrics.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["method".to_owned(), "sequence".to_owned()];
    header.extend(report.columns.iter().cloned());
    header.push("rank".into());
    write_row(&mut w, &path, &header)?;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>();
    for (method, pick) in [
        (
            MODEL,
            (|s: &SequenceEval| s.model.clone()) as fn(&SequenceEval) -> Option<Vec<f64>>,
        ),
        (BASELINE, |s: &SequenceEval| s.baseline.clone()),
    ] {
        for s in &report.sequences {
            if let Some(v) = pick(s) {
                let mut row = vec![method.to_owned(), s.id.clone()];
                row.extend(fmt(&v));
                row.push(String::new());
                write_row(&mut w, &path, &row)?;
            }
        }
    }
    for (method, v) in &report.mean {
        let mut row = vec![method.clone(), "mean".to_owned()];
        row.extend(fmt(v));
        let rank = report
            .ranks
            .iter()
            .find(|(m, _)| m == method)
            .map(|(_, r)| format!("{r:.2}"));
        row.push(rank.unwrap_or_default());
        write_row(&mut w, &path, &row)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    write_json(&out.join("report.json"), report)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn write_row(w: &mut csv::Writer<std::fs::File>, path: &Path, row: &[String]) -> Result<()> {
    w.write_record(row)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
