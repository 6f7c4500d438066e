use std::fs;
use std::path::Path;

use anyhow::Result;
use lung_detr::dataset::Role;
use lung_detr::metaimage::write_annotations;
use lung_detr::metrics::ScoredBox;
use lung_detr::trainer::Sample;
use lung_detr_cli::config::PipelineConfig;
use lung_detr_cli::pipeline::{
    cmd_build_dataset, cmd_eval, cmd_preprocess, cmd_report, cmd_synth, cmd_train, eval_with,
    load_reports, Detector, Layout, RunOptions,
};
use lung_detr_cli::synth::SynthParams;

fn small_config(root: &Path, scans: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        seed: 21,
        ..PipelineConfig::default()
    };
    cfg.paths.scans = root.join("scans");
    cfg.paths.annotations = root.join("annotations.csv");
    cfg.paths.output_root = root.join("out");
    cfg.synth = SynthParams {
        scans,
        slices: 45,
        size: 48,
        nodules: [2, 3],
        vessels: [1, 2],
        ..SynthParams::default()
    };
    cfg.validate().unwrap();
    cfg
}

fn run() -> RunOptions {
    RunOptions::default()
}

fn forced() -> RunOptions {
    RunOptions {
        force: true,
        ..RunOptions::default()
    }
}

fn prepared(root: &Path, scans: usize) -> PipelineConfig {
    let cfg = small_config(root, scans);
    assert!(cmd_synth(&cfg, run()).unwrap().succeeded());
    assert!(cmd_preprocess(&cfg, run()).unwrap().succeeded());
    cfg
}

/// Answers every image with its own ground truth at full confidence.
struct Oracle;

impl Detector for Oracle {
    fn detect(&self, samples: &[Sample]) -> Result<Vec<Vec<ScoredBox>>> {
        Ok(samples
            .iter()
            .map(|s| {
                s.boxes
                    .iter()
                    .map(|b| ScoredBox {
                        score: 1.0,
                        bbox: b.as_array(),
                    })
                    .collect()
            })
            .collect())
    }
}

#[test]
fn preprocess_of_an_empty_directory_writes_an_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1);
    fs::create_dir_all(&cfg.paths.scans).unwrap();
    let summary = cmd_preprocess(&cfg, run()).unwrap();
    assert_eq!(summary.produced + summary.skipped, 0);
    assert!(summary.succeeded());
    assert!(load_reports(&cfg).unwrap().is_empty());
}

#[test]
fn two_scans_give_two_report_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path(), 2);
    let reports = load_reports(&cfg).unwrap();
    let ids: Vec<&str> = reports.iter().map(|r| r.scan_id.as_str()).collect();
    assert_eq!(ids, ["synth-000", "synth-001"]);
    for r in &reports {
        assert!(r.retained_end > r.retained_start);
        assert!(r.reduction_ratio > 0.0 && r.reduction_ratio < 1.0, "{r:?}");
    }
    let text = fs::read_to_string(Layout::new(&cfg).reports_csv()).unwrap();
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn rerunning_preprocess_skips_up_to_date_scans() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path(), 2);
    let out = Layout::new(&cfg).processed().join("synth-001.raw");
    let before = fs::read(&out).unwrap();

    let again = cmd_preprocess(&cfg, run()).unwrap();
    assert_eq!((again.produced, again.skipped), (0, 2));
    assert_eq!(fs::read(&out).unwrap(), before);

    let forced_run = cmd_preprocess(&cfg, forced()).unwrap();
    assert_eq!((forced_run.produced, forced_run.skipped), (2, 0));
    assert_eq!(fs::read(&out).unwrap(), before);
}

#[test]
fn one_bad_scan_does_not_stop_the_others() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    cmd_synth(&cfg, run()).unwrap();
    fs::write(cfg.paths.scans.join("broken.mhd"), "NDims = 3\n").unwrap();
    let summary = cmd_preprocess(&cfg, run()).unwrap();
    assert_eq!(summary.produced, 2);
    assert_eq!(summary.failures.len(), 1);
    assert_eq!(summary.failures[0].0, "broken");
    assert_eq!(load_reports(&cfg).unwrap().len(), 2);
}

#[test]
fn manifest_is_byte_identical_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path(), 10);
    assert!(cmd_build_dataset(&cfg, run()).unwrap().succeeded());
    let first = fs::read(Layout::new(&cfg).manifest()).unwrap();
    assert_eq!(cmd_build_dataset(&cfg, run()).unwrap().skipped, 1);
    assert!(cmd_build_dataset(&cfg, forced()).unwrap().succeeded());
    assert_eq!(fs::read(Layout::new(&cfg).manifest()).unwrap(), first);

    let other = tempfile::tempdir().unwrap();
    let cfg2 = prepared(other.path(), 10);
    cmd_build_dataset(&cfg2, run()).unwrap();
    assert_eq!(fs::read(Layout::new(&cfg2).manifest()).unwrap(), first);
}

#[test]
fn a_corpus_without_nodules_is_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path(), 4);
    write_annotations(&cfg.paths.annotations, &[]).unwrap();
    let err = format!("{:#}", cmd_build_dataset(&cfg, run()).unwrap_err());
    assert!(err.contains("infeasible"), "{err}");
}

#[test]
fn a_perfect_detector_scores_one_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path(), 10);
    cmd_build_dataset(&cfg, run()).unwrap();
    for role in Role::ALL {
        let eval = eval_with(&cfg, &Oracle, role, None, run()).unwrap();
        let r = &eval.report;
        assert!(r.overall.positives > 0, "{role} has no positives");
        assert_eq!(
            (r.overall.ap, r.overall.ar, r.operating.f1),
            (1.0, 1.0, 1.0),
            "{role}"
        );
        assert_eq!((r.operating.fp, r.operating.fn_), (0, 0));
        for band in [&r.small, &r.medium, &r.large] {
            if band.positives > 0 {
                assert_eq!((band.ap, band.ar), (1.0, 1.0));
            }
        }
        assert_eq!(r.images, eval.images.len());
    }
}

#[test]
fn report_tables_list_every_metric() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = prepared(dir.path(), 10);
    cmd_build_dataset(&cfg, run()).unwrap();
    let evaluated = eval_with(&cfg, &Oracle, Role::Val, Some(0.5), run())
        .unwrap()
        .report;
    let report = cmd_report(&cfg, Role::Val).unwrap();
    assert_eq!(report, evaluated);

    let dir = Layout::new(&cfg).report(Role::Val);
    let csv = fs::read_to_string(dir.join("table.csv")).unwrap();
    let names: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    let rows: Vec<&str> = report.rows().iter().map(|(n, _)| *n).collect();
    assert_eq!(&names[..rows.len()], rows.as_slice());
    let text = fs::read_to_string(dir.join("table.txt")).unwrap();
    for name in rows {
        assert!(text.contains(name), "{name}");
    }
    let svg = fs::read_to_string(dir.join("pr_curve.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
}

#[test]
fn missing_artifacts_are_named_in_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1);
    let layout = Layout::new(&cfg);

    let err = format!("{:#}", cmd_train(&cfg, run()).unwrap_err());
    assert!(
        err.contains(&layout.manifest().display().to_string()),
        "{err}"
    );

    let err = format!("{:#}", cmd_eval(&cfg, Role::Test, None, run()).unwrap_err());
    assert!(
        err.contains(&layout.best_checkpoint().display().to_string()),
        "{err}"
    );

    let err = format!("{:#}", cmd_report(&cfg, Role::Test).unwrap_err());
    assert!(err.contains("detections.csv"), "{err}");

    let err = format!("{:#}", cmd_build_dataset(&cfg, run()).unwrap_err());
    assert!(
        err.contains(&cfg.paths.scans.display().to_string()),
        "{err}"
    );
}
