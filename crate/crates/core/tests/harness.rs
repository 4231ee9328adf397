use std::path::Path;
use std::sync::OnceLock;

use immunize_core::harness::io::load_png;
use immunize_core::harness::{
    emit_report, metric_value, run_pipeline, CosineReport, ExperimentConfig, FailureRecord, Manifest, Method,
    MetricKind, RunLayout, RunReport,
};
use immunize_core::metrics::{ssim, Aggregate, PairMetrics};

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 5,
        output_dir: dir.to_path_buf(),
        ..Default::default()
    };
    cfg.dataset.samples_per_class = 12;
    cfg.dataset.eval_per_class = 2;
    cfg.train.ae_epochs = 1;
    cfg.train.den_epochs = 1;
    cfg.classifier.epochs = 1;
    cfg.evaluation.num_images = 3;
    cfg.evaluation.conditions_per_image = 2;
    cfg.evaluation.options.bootstrap = 10;
    cfg.attack.encoder.num_steps = 3;
    cfg.attack.diffusion.num_steps = 2;
    cfg
}

struct Run {
    _dir: tempfile::TempDir,
    report: RunReport,
}

fn run() -> &'static Run {
    static R: OnceLock<Run> = OnceLock::new();
    R.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        run_pipeline(&tiny(dir.path())).unwrap();
        let report = RunReport::load(dir.path()).unwrap();
        Run { _dir: dir, report }
    })
}

fn root() -> &'static Path {
    run()._dir.path()
}

#[test]
fn aggregates_match_per_pair_values() {
    let r = &run().report;
    assert_eq!(r.pairs.len(), 6);
    for m in &r.methods {
        let pick = |f: fn(&PairMetrics) -> f64| m.metrics.per_pair.iter().map(f).collect::<Vec<_>>();
        assert_eq!(m.metrics.aggregate.psnr, Aggregate::of(&pick(|p| p.psnr)));
        assert_eq!(m.metrics.aggregate.ssim, Aggregate::of(&pick(|p| p.ssim)));
        assert_eq!(m.metrics.aggregate.gmsd, Aggregate::of(&pick(|p| p.gmsd)));
        assert_eq!(m.metrics.count, 6);
    }
}

#[test]
fn per_pair_values_recompute_from_stored_edits() {
    let r = &run().report;
    let layout = RunLayout::new(root());
    let enc = r.method(Method::Encoder).unwrap();
    for (pair, stored) in r.pairs.iter().zip(&enc.per_pair) {
        let clean = load_png(&layout.edited(pair, Method::Clean)).unwrap();
        let imm = load_png(&layout.edited(pair, Method::Encoder)).unwrap();
        assert_eq!(ssim(&clean, &imm).unwrap(), stored.ssim);
    }
    // clean against itself is the ideal row
    let clean = r.method(Method::Clean).unwrap();
    assert!(clean.per_pair.iter().all(|p| p.ssim == 1.0 && p.gmsd == 0.0));
}

#[test]
fn csv_rows_mirror_json() {
    let r = &run().report;
    let csv = std::fs::read_to_string(RunLayout::new(root()).metrics_csv()).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,metric,mean,std,n"));
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        let method = Method::ALL.into_iter().find(|m| m.name() == cols[0]).unwrap();
        let kind = MetricKind::ALL.into_iter().find(|k| k.name() == cols[1]).unwrap();
        let (mean, std) = metric_value(r.method(method).unwrap(), kind);
        assert_eq!(cols[2].parse::<f64>().unwrap(), mean);
        match std {
            Some(s) => assert_eq!(cols[3].parse::<f64>().unwrap(), s),
            None => assert!(cols[3].is_empty()),
        }
        assert_eq!(cols[4], "6");
    }
}

#[test]
fn cosine_summary_matches_values() {
    let cos = CosineReport::load(root()).unwrap();
    for m in &cos.methods {
        assert_eq!(m.values.len(), 6);
        assert!(m.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        let mean = m.values.iter().sum::<f64>() / 6.0;
        assert!((m.summary.cosine_mean - mean).abs() < 1e-12);
        assert!(m.summary.cosine_q1 <= m.summary.cosine_median && m.summary.cosine_median <= m.summary.cosine_q3);
    }
}

#[test]
fn report_reemits_identically() {
    let layout = RunLayout::new(root());
    let before = std::fs::read(layout.metrics_json()).unwrap();
    emit_report(root()).unwrap();
    assert_eq!(std::fs::read(layout.metrics_json()).unwrap(), before);
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(layout.manifest()).unwrap()).unwrap();
    assert!(manifest.complete);
}

#[test]
fn failed_stage_leaves_a_failure_record() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("not-a-model.ckpt");
    std::fs::write(&bogus, b"garbage").unwrap();
    let mut cfg = tiny(&dir.path().join("run"));
    cfg.checkpoint = Some(bogus);
    assert!(run_pipeline(&cfg).is_err());
    let text = std::fs::read_to_string(RunLayout::new(&cfg.output_dir).failure()).unwrap();
    let rec: FailureRecord = serde_json::from_str(&text).unwrap();
    assert_eq!(rec.stage, "train");
    assert!(!rec.message.is_empty());
}

#[test]
fn invalid_config_is_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&dir.path().join("run"));
    cfg.evaluation.num_images = 1;
    cfg.evaluation.conditions_per_image = 1;
    assert!(run_pipeline(&cfg).is_err());
    cfg = tiny(&dir.path().join("run"));
    cfg.edit.strength = 0.0;
    assert!(run_pipeline(&cfg).is_err());
}
