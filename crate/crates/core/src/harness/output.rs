use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::run::TradeoffCurve;
use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, CSV_HEADER, METRIC_SCHEMA_VERSION};
use crate::params::{read_text, write_text};

pub const CURVE_HEADER: &str =
    "algorithm,step,reward_mean,frechet,cov_distance,log_cov_distance,embedding_diversity,alignment";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub report: MetricReport,
}

/// Fine-tuned-only probe metrics over training steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub algorithm: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub status: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub config: Option<serde_json::Value>,
    /// Relative path to sha256 of every artifact in the output directory.
    pub files: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct CurvesFile {
    schema_version: u32,
    curves: Vec<TradeoffCurve>,
    training: Vec<TrainingCurve>,
}

fn curves_csv(curves: &[&TradeoffCurve]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in curves.iter().flat_map(|c| &c.rows) {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    out
}

fn training_csv(curves: &[TrainingCurve]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for c in curves {
        for p in &c.points {
            let r = &p.report;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.algorithm,
                p.step,
                r.reward_mean,
                r.frechet,
                r.cov_distance,
                r.log_cov_distance,
                r.embedding_diversity,
                r.alignment
            ));
        }
    }
    out
}

/// Writes `sweep.csv` (all curves), `sweep_<method>.csv` per curve,
/// `training_curves.csv` and `results.json`.
pub fn emit_curves(dir: &Path, curves: &[TradeoffCurve], training: &[TrainingCurve]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<()> {
        let path = dir.join(name);
        write_text(&path, &text)?;
        written.push(path);
        Ok(())
    };
    put("sweep.csv".into(), curves_csv(&curves.iter().collect::<Vec<_>>()))?;
    for c in curves {
        put(format!("sweep_{}.csv", c.method), curves_csv(&[c]))?;
    }
    if !training.is_empty() {
        put("training_curves.csv".into(), training_csv(training))?;
    }
    let file = CurvesFile {
        schema_version: METRIC_SCHEMA_VERSION,
        curves: curves.to_vec(),
        training: training.to_vec(),
    };
    put("results.json".into(), serde_json::to_string_pretty(&file)? + "\n")?;
    Ok(written)
}

pub fn read_curves_json(path: &Path) -> Result<(Vec<TradeoffCurve>, Vec<TrainingCurve>)> {
    let file: CurvesFile = serde_json::from_str(&read_text(path)?)?;
    if file.schema_version != METRIC_SCHEMA_VERSION {
        return Err(Error::config(format!(
            "results schema version {} is not supported",
            file.schema_version
        )));
    }
    Ok((file.curves, file.training))
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::io("drawing plot", std::io::Error::other(e.to_string()))
}

fn padded_range(values: impl Iterator<Item = f64>) -> std::ops::Range<f64> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return 0.0..1.0;
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
    (lo - pad)..(hi + pad)
}

type Series = (String, Vec<(f64, f64)>);

fn line_chart(title: &str, x_desc: &str, y_desc: &str, series: &[Series]) -> Result<String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (720, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let xs = padded_range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
        let ys = padded_range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(70)
            .build_cartesian_2d(xs, ys)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc(x_desc)
            .y_desc(y_desc)
            .draw()
            .map_err(plot_err)?;
        for (i, (name, pts)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
            chart
                .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
                .map_err(plot_err)?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// Mean raw reward and embedding diversity of the fine-tuned-only probe set over training.
pub fn plot_training_curves(dir: &Path, training: &[TrainingCurve]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let panels: [(&str, &str, fn(&MetricReport) -> f64); 2] = [
        ("reward_vs_step.svg", "mean raw reward", |r| r.reward_mean),
        ("diversity_vs_step.svg", "embedding diversity", |r| r.embedding_diversity),
    ];
    for (file, y, get) in panels {
        let series: Vec<Series> = training
            .iter()
            .map(|c| {
                let pts = c.points.iter().map(|p| (p.step as f64, get(&p.report))).collect();
                (c.algorithm.clone(), pts)
            })
            .collect();
        let path = dir.join(file);
        write_text(&path, &line_chart(&format!("{y} during fine-tuning"), "training step", y, &series)?)?;
        written.push(path);
    }
    Ok(written)
}

/// Quality-versus-diversity panels: reward against embedding diversity,
/// Frechet distance, covariance distance and log-covariance distance.
pub fn plot_tradeoff(dir: &Path, curves: &[TradeoffCurve]) -> Result<Vec<PathBuf>> {
    let panels: [(&str, &str, fn(&MetricReport) -> f64); 4] = [
        ("tradeoff_diversity.svg", "embedding diversity", |r| r.embedding_diversity),
        ("tradeoff_frechet.svg", "frechet distance", |r| r.frechet),
        ("tradeoff_cov.svg", "covariance distance", |r| r.cov_distance),
        ("tradeoff_logcov.svg", "log-covariance distance", |r| r.log_cov_distance),
    ];
    let mut written = Vec::new();
    for (file, x, get) in panels {
        let series: Vec<Series> = curves
            .iter()
            .map(|c| {
                let pts = c.rows.iter().map(|r| (get(r), r.reward_mean)).collect();
                (c.method.clone(), pts)
            })
            .collect();
        let path = dir.join(file);
        write_text(&path, &line_chart(&format!("reward vs {x}"), x, "mean raw reward", &series)?)?;
        written.push(path);
    }
    Ok(written)
}

/// CSV, JSON and every plot for a set of curves.
pub fn emit_outputs(dir: &Path, curves: &[TradeoffCurve], training: &[TrainingCurve]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut written = emit_curves(dir, curves, training)?;
    written.extend(plot_tradeoff(dir, curves)?);
    if !training.is_empty() {
        written.extend(plot_training_curves(dir, training)?);
    }
    Ok(written)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io("listing output directory", e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != "manifest.json") {
            let rel = path.strip_prefix(root).expect("inside root").to_string_lossy().replace('\\', "/");
            out.insert(rel, sha256_file(&path)?);
        }
    }
    Ok(())
}

/// Writes `manifest.json` listing every file under `dir` with its hash;
/// `failure` marks the run as failed at the given stage.
pub fn write_manifest(dir: &Path, cfg: &ExperimentConfig, failure: Option<(&str, &Error)>) -> Result<Manifest> {
    let mut files = BTreeMap::new();
    collect_files(dir, dir, &mut files)?;
    let manifest = Manifest {
        version: 1,
        status: if failure.is_some() { "failed" } else { "ok" }.into(),
        failed_stage: failure.map(|(s, _)| s.to_string()),
        error: failure.map(|(_, e)| e.to_string()),
        config: Some(serde_json::to_value(cfg)?),
        files,
    };
    write_text(&dir.join("manifest.json"), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    Ok(manifest)
}
