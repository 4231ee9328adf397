//! Report emission over a persisted run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::experiment::{read_json, write_json, ExperimentConfig, Manifest, MetricKind, Method, PairRecord, RunLayout};
use super::io::{hstack, load_png, save_png};
use crate::diffusion::ToyLdm;
use crate::metrics::{embedding_cosine, evaluate_immunization, Classifier, CosineSummary, FeatureExtractor, MetricsReport};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub metrics: MetricsReport,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub complete: bool,
    pub pairs: Vec<PairRecord>,
    pub methods: Vec<MethodReport>,
}

impl RunReport {
    pub fn method(&self, m: Method) -> Option<&MetricsReport> {
        self.methods.iter().find(|r| r.method == m).map(|r| &r.metrics)
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        read_json(&RunLayout::new(run_dir).metrics_json())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodCosine {
    pub method: Method,
    pub values: Vec<f64>,
    pub summary: CosineSummary,
}

/// Contents of `cosine.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineReport {
    pub schema_version: u32,
    pub methods: Vec<MethodCosine>,
}

impl CosineReport {
    pub fn method(&self, m: Method) -> Option<&MethodCosine> {
        self.methods.iter().find(|r| r.method == m)
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        read_json(&RunLayout::new(run_dir).cosine_json())
    }
}

/// `(mean, std)` of one metric in a method's report; std is `None` when the
/// metric is a single set-level number without a spread estimate.
pub fn metric_value(r: &MetricsReport, m: MetricKind) -> (f64, Option<f64>) {
    let d = &r.distributional;
    match m {
        MetricKind::Psnr => (r.aggregate.psnr.mean, Some(r.aggregate.psnr.std)),
        MetricKind::Ssim => (r.aggregate.ssim.mean, Some(r.aggregate.ssim.std)),
        MetricKind::Gmsd => (r.aggregate.gmsd.mean, Some(r.aggregate.gmsd.std)),
        MetricKind::FrechetDistance => (d.frechet_distance, Some(d.frechet_std)),
        MetricKind::Precision => (d.precision, None),
        MetricKind::Recall => (d.recall, None),
    }
}

fn csv(report: &RunReport, metrics: &[MetricKind]) -> String {
    let mut out = String::from("method,metric,mean,std,n\n");
    for mr in &report.methods {
        for &m in metrics {
            let (mean, std) = metric_value(&mr.metrics, m);
            let std = std.map(|s| s.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{mean},{std},{}", mr.method.name(), m.name(), mr.metrics.count);
        }
    }
    out
}

pub fn load_edits(layout: &RunLayout, pairs: &[PairRecord], method: Method) -> Result<Vec<Tensor>> {
    pairs.iter().map(|p| load_png(&layout.edited(p, method))).collect()
}

/// Files written by [`emit_report`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub metrics_csv: PathBuf,
    pub metrics_json: PathBuf,
    pub cosine_json: PathBuf,
    pub grids: Vec<PathBuf>,
}

/// Compute every metric from the persisted edits and write the report files.
pub fn emit_report(run_dir: &Path) -> Result<ReportFiles> {
    let layout = RunLayout::new(run_dir);
    if !layout.manifest().exists() {
        return Err(Error::invalid(format!("{} holds no run manifest", run_dir.display())));
    }
    let manifest: Manifest = read_json(&layout.manifest())?;
    if manifest.pairs.len() < 2 {
        return Err(Error::invalid(format!(
            "run has {} edit pairs; the report needs at least two",
            manifest.pairs.len()
        )));
    }
    let cfg = ExperimentConfig::load(&layout.config())?;
    let fx = FeatureExtractor::Encoder(ToyLdm::load(&layout.model())?);
    let classifier = Classifier::load(&layout.classifier())?;
    let pairs = &manifest.pairs;
    let originals = pairs
        .iter()
        .map(|p| load_png(&layout.original(p.image)))
        .collect::<Result<Vec<_>>>()?;
    let conditions: Vec<usize> = pairs.iter().map(|p| p.condition).collect();
    let clean = load_edits(&layout, pairs, Method::Clean)?;

    let mut methods = Vec::new();
    let mut cosines = Vec::new();
    for method in Method::ALL {
        let edits = load_edits(&layout, pairs, method)?;
        let mut metrics = evaluate_immunization(&clean, &edits, &originals, &fx, &cfg.evaluation.options)?;
        let values = embedding_cosine(&edits, &conditions, &classifier)?;
        let summary = CosineSummary::of(&values)?;
        metrics.embedding = Some(summary);
        methods.push(MethodReport { method, metrics });
        cosines.push(MethodCosine { method, values, summary });
    }
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        complete: manifest.complete,
        pairs: pairs.clone(),
        methods,
    };
    let files = ReportFiles {
        metrics_csv: layout.metrics_csv(),
        metrics_json: layout.metrics_json(),
        cosine_json: layout.cosine_json(),
        grids: pairs.iter().map(|p| layout.grid(p)).collect(),
    };
    fs::write(&files.metrics_csv, csv(&report, &cfg.evaluation.metrics)).map_err(|e| Error::io(&files.metrics_csv, e))?;
    write_json(&files.metrics_json, &report)?;
    write_json(
        &files.cosine_json,
        &CosineReport {
            schema_version: SCHEMA_VERSION,
            methods: cosines,
        },
    )?;
    let grid_dir = layout.root.join("grids");
    fs::create_dir_all(&grid_dir).map_err(|e| Error::io(&grid_dir, e))?;
    for (i, pair) in pairs.iter().enumerate() {
        let panels = [
            originals[i].clone(),
            clean[i].clone(),
            load_png(&layout.edited(pair, Method::Encoder))?,
            load_png(&layout.edited(pair, Method::Diffusion))?,
        ];
        save_png(&hstack(&panels)?, &files.grids[i])?;
    }
    Ok(files)
}
