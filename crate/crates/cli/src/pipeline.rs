//! Subcommand implementations.
//!
//! Every command reads the shared [`PipelineConfig`], writes below
//! `<output_root>/v1` and returns a [`RunSummary`]. Per-item failures (one bad
//! scan, say) are collected and the command carries on with the remaining
//! items; errors that make the whole command meaningless are returned as `Err`.
//!
//! Each stage writes a `.stamp` file holding a SHA-256 fingerprint of its
//! inputs and the config sections it depends on. A stage whose stamp matches
//! is skipped unless `force` is set.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use lung_detr::dataset::{
    augment, enforce_sparsity, read_manifest, split, write_manifest, AugmentationSpec, Role,
    SlabEntry, SplitManifest,
};
use lung_detr::image::Image;
use lung_detr::metaimage::{
    parse_annotations, read_mhd, write_annotations, write_mhd, CtVolume, ElementType,
    NoduleAnnotation, VolumeMeta,
};
use lung_detr::metrics::{
    best_threshold, evaluate, pr_curve_svg, role_pr_curve, EvalReport, ImageEval, ScoredBox,
    TruthBox,
};
use lung_detr::model::{load_checkpoint, DetrModel};
use lung_detr::preprocess::{preprocess_scan, PreprocessReport};
use lung_detr::projection::{mip_range, project_annotation, slab_partition};
use lung_detr::rng::derived;
use lung_detr::trainer::{predict_all, train, EpochSummary, Sample, TrainOutputs};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::synth::{synth_scan, SynthScan};

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub force: bool,
    pub workers: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            force: false,
            workers: 1,
        }
    }
}

/// Outcome of one subcommand.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct RunSummary {
    /// Items produced in this run.
    pub produced: usize,
    /// Items skipped because their outputs were up to date.
    pub skipped: usize,
    /// `(item, reason)` for every item that failed.
    pub failures: Vec<(String, String)>,
}

impl RunSummary {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .context("building worker pool")
}

fn fingerprint(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn toml_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    toml::to_string(value)
        .expect("config sections serialize")
        .into_bytes()
}

fn stamp_matches(stamp: &Path, fp: &str) -> bool {
    fs::read_to_string(stamp).is_ok_and(|s| s.trim() == fp)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Directory layout below `<output_root>/v1`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Layout {
            root: cfg.output_dir(),
        }
    }
    pub fn processed(&self) -> PathBuf {
        self.root.join("processed")
    }
    pub fn reports_csv(&self) -> PathBuf {
        self.processed().join("reports.csv")
    }
    pub fn slabs(&self) -> PathBuf {
        self.root.join("slabs")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.tsv")
    }
    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.train().join("best.ckpt")
    }
    pub fn last_checkpoint(&self) -> PathBuf {
        self.train().join("last.ckpt")
    }
    pub fn train_log(&self) -> PathBuf {
        self.train().join("log.csv")
    }
    pub fn epochs_csv(&self) -> PathBuf {
        self.train().join("epochs.csv")
    }
    pub fn eval(&self, role: Role) -> PathBuf {
        self.root.join("eval").join(role.as_str())
    }
    pub fn report(&self, role: Role) -> PathBuf {
        self.root.join("report").join(role.as_str())
    }
}

// ---------------------------------------------------------------- synth

/// Write the synthetic corpus to `paths.scans` and `paths.annotations`.
pub fn cmd_synth(cfg: &PipelineConfig, opts: RunOptions) -> Result<RunSummary> {
    cfg.synth
        .validate()
        .and_then(|_| cfg.synth.validate_for_slabs(cfg.slab.thickness_mm))
        .map_err(|e| anyhow!(e))?;
    let dir = &cfg.paths.scans;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let fp = fingerprint(&[
        &toml_bytes(&cfg.synth),
        &cfg.slab.thickness_mm.to_le_bytes(),
        &cfg.seed.to_le_bytes(),
    ]);
    let stamp = dir.join("synth.stamp");
    if !opts.force && stamp_matches(&stamp, &fp) && cfg.paths.annotations.is_file() {
        info!("synthetic corpus in {} is up to date", dir.display());
        return Ok(RunSummary {
            skipped: cfg.synth.scans,
            ..RunSummary::default()
        });
    }
    let scans: Vec<Result<SynthScan>> = pool(opts.workers)?.install(|| {
        (0..cfg.synth.scans)
            .into_par_iter()
            .map(|i| {
                let scan = synth_scan(i, &cfg.synth, cfg.slab.thickness_mm, cfg.seed);
                write_mhd(&scan.volume, &dir.join(&scan.id))?;
                Ok(scan)
            })
            .collect()
    });
    let mut summary = RunSummary::default();
    let mut annotations: Vec<NoduleAnnotation> = Vec::new();
    for (i, s) in scans.into_iter().enumerate() {
        match s {
            Ok(scan) => {
                summary.produced += 1;
                annotations.extend(scan.nodules);
            }
            Err(e) => summary
                .failures
                .push((crate::synth::scan_id(i), format!("{e:#}"))),
        }
    }
    if let Some(parent) = cfg.paths.annotations.parent() {
        fs::create_dir_all(parent)?;
    }
    write_annotations(&cfg.paths.annotations, &annotations)?;
    if summary.succeeded() {
        write_atomic(&stamp, fp.as_bytes())?;
    }
    info!(
        "wrote {} synthetic scans with {} nodules to {}",
        summary.produced,
        annotations.len(),
        dir.display()
    );
    Ok(summary)
}

// ----------------------------------------------------------- preprocess

/// `.mhd` files of a directory, sorted by name.
pub fn list_scans(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "mhd"))
        .collect();
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_report(path: &Path) -> Result<PreprocessReport> {
    let mut rdr =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    rdr.deserialize()
        .next()
        .ok_or_else(|| anyhow!("{} holds no report", path.display()))?
        .with_context(|| format!("parsing {}", path.display()))
}

fn write_reports(path: &Path, reports: &[PreprocessReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(r)?;
    }
    if reports.is_empty() {
        w.write_record([
            "scan_id",
            "threshold_hu",
            "retained_start",
            "retained_end",
            "input_nonzero",
            "output_nonzero",
            "reduction_ratio",
        ])?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| anyhow!("{e}"))?)
}

enum ScanOutcome {
    Produced(PreprocessReport),
    Skipped(PreprocessReport),
}

fn preprocess_one(
    scan: &Path,
    out: &Path,
    cfg: &PipelineConfig,
    force: bool,
) -> Result<ScanOutcome> {
    let id = stem(scan);
    let header = fs::read(scan).with_context(|| format!("reading {}", scan.display()))?;
    let volume = read_mhd(scan)?;
    let raw_len = volume.voxels.len().to_le_bytes();
    let voxel_bytes: Vec<u8> = volume.voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
    let fp = fingerprint(&[
        &header,
        &raw_len,
        &voxel_bytes,
        &toml_bytes(&cfg.preprocess),
    ]);
    let base = out.join(&id);
    let stamp = base.with_extension("stamp");
    let report_path = base.with_extension("report.csv");
    if !force && stamp_matches(&stamp, &fp) && base.with_extension("mhd").is_file() {
        if let Ok(report) = read_report(&report_path) {
            return Ok(ScanOutcome::Skipped(report));
        }
    }
    let (processed, report) = preprocess_scan(&id, &volume, &cfg.preprocess)?;
    write_mhd(&processed, &base)?;
    write_reports(&report_path, std::slice::from_ref(&report))?;
    write_atomic(&stamp, fp.as_bytes())?;
    Ok(ScanOutcome::Produced(report))
}

/// Resample, segment, trim and enhance every scan in `paths.scans`.
pub fn cmd_preprocess(cfg: &PipelineConfig, opts: RunOptions) -> Result<RunSummary> {
    if !cfg.paths.scans.is_dir() {
        bail!(
            "scan directory does not exist: {}",
            cfg.paths.scans.display()
        );
    }
    let layout = Layout::new(cfg);
    let out = layout.processed();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let scans = list_scans(&cfg.paths.scans)?;
    if scans.is_empty() {
        warn!("no .mhd scans in {}", cfg.paths.scans.display());
    }
    let results: Vec<(String, Result<ScanOutcome>)> = pool(opts.workers)?.install(|| {
        scans
            .par_iter()
            .map(|s| (stem(s), preprocess_one(s, &out, cfg, opts.force)))
            .collect()
    });
    let mut summary = RunSummary::default();
    let mut reports = Vec::new();
    for (id, r) in results {
        match r {
            Ok(ScanOutcome::Produced(rep)) => {
                summary.produced += 1;
                reports.push(rep);
            }
            Ok(ScanOutcome::Skipped(rep)) => {
                summary.skipped += 1;
                reports.push(rep);
            }
            Err(e) => summary.failures.push((id, format!("{e:#}"))),
        }
    }
    write_reports(&layout.reports_csv(), &reports)?;
    info!(
        "preprocessed {} scans, {} up to date, {} failed",
        summary.produced,
        summary.skipped,
        summary.failures.len()
    );
    Ok(summary)
}

/// Per-scan reports written by the last preprocessing run.
pub fn load_reports(cfg: &PipelineConfig) -> Result<Vec<PreprocessReport>> {
    let path = Layout::new(cfg).reports_csv();
    let mut rdr = csv::Reader::from_path(&path).with_context(|| {
        format!(
            "preprocessing reports not found at {}; run preprocess first",
            path.display()
        )
    })?;
    rdr.deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

// --------------------------------------------------------- build-dataset

fn slab_volume(image: &Image, meta: &VolumeMeta, z_lo: f64, thickness: f64) -> Result<CtVolume> {
    let spacing = [thickness, meta.spacing[1], meta.spacing[2]];
    let origin = [z_lo + thickness / 2.0, meta.origin[1], meta.origin[2]];
    let m = VolumeMeta::new(
        [1, image.height, image.width],
        spacing,
        origin,
        ElementType::F32,
    )?;
    Ok(CtVolume::new(m, image.pixels.clone())?)
}

fn slabs_for_scan(
    id: &str,
    layout: &Layout,
    nodules: &[&NoduleAnnotation],
    cfg: &PipelineConfig,
) -> Result<Vec<SlabEntry>> {
    let vol = read_mhd(&layout.processed().join(format!("{id}.mhd")))?;
    let ranges = slab_partition(
        &vol.meta,
        0..vol.meta.dims[0],
        cfg.slab.thickness_mm,
        cfg.slab.stride_mm,
    )?;
    let mut out = Vec::with_capacity(ranges.len());
    for (k, r) in ranges.iter().enumerate() {
        let image = mip_range(&vol, r.slices.clone())?.pad_to_multiple(cfg.slab.pad_multiple);
        let boxes = nodules
            .iter()
            .filter_map(|n| {
                project_annotation(n, r.z_range_mm, &vol.meta, (image.height, image.width))
            })
            .collect();
        let rel = format!("slabs/{id}_{k:03}");
        write_mhd(
            &slab_volume(&image, &vol.meta, r.z_range_mm.0, cfg.slab.thickness_mm)?,
            &layout.root.join(&rel),
        )?;
        out.push(SlabEntry {
            scan_id: id.to_string(),
            slab_index: k,
            image_path: format!("{rel}.mhd"),
            boxes,
        });
    }
    Ok(out)
}

/// Split slab entries into roles and enforce each role's positive rate.
pub fn assemble_manifest(slabs: &[SlabEntry], cfg: &PipelineConfig) -> Result<SplitManifest> {
    let mut manifest = split(slabs, cfg.seed, cfg.split.ratios)?;
    for role in Role::ALL {
        manifest = enforce_sparsity(&manifest, role, cfg.split.positive_rates[role.index()])?;
    }
    Ok(manifest)
}

/// Project slabs, split by scan, enforce positive rates and write the manifest.
pub fn cmd_build_dataset(cfg: &PipelineConfig, opts: RunOptions) -> Result<RunSummary> {
    cfg.validate_inputs()?;
    let layout = Layout::new(cfg);
    let reports = load_reports(cfg)?;
    let annotations_bytes = fs::read(&cfg.paths.annotations)
        .with_context(|| format!("reading {}", cfg.paths.annotations.display()))?;
    let annotations = parse_annotations(annotations_bytes.as_slice())?;

    let mut stamps = Vec::new();
    for r in &reports {
        let p = layout.processed().join(format!("{}.stamp", r.scan_id));
        stamps.push(
            fs::read(&p).with_context(|| format!("missing {}; rerun preprocess", p.display()))?,
        );
    }
    let mut parts: Vec<&[u8]> = stamps.iter().map(Vec::as_slice).collect();
    let config_parts = [
        toml_bytes(&cfg.slab),
        toml_bytes(&cfg.split),
        cfg.seed.to_le_bytes().to_vec(),
    ];
    parts.push(&annotations_bytes);
    parts.extend(config_parts.iter().map(Vec::as_slice));
    let fp = fingerprint(&parts);
    let stamp = layout.root.join("manifest.stamp");
    if !opts.force && stamp_matches(&stamp, &fp) && layout.manifest().is_file() {
        info!("manifest {} is up to date", layout.manifest().display());
        return Ok(RunSummary {
            skipped: 1,
            ..RunSummary::default()
        });
    }

    fs::create_dir_all(layout.slabs())?;
    let results: Vec<(String, Result<Vec<SlabEntry>>)> = pool(opts.workers)?.install(|| {
        reports
            .par_iter()
            .map(|r| {
                let nodules: Vec<&NoduleAnnotation> = annotations
                    .iter()
                    .filter(|a| a.series_id == r.scan_id)
                    .collect();
                (
                    r.scan_id.clone(),
                    slabs_for_scan(&r.scan_id, &layout, &nodules, cfg),
                )
            })
            .collect()
    });
    let mut summary = RunSummary::default();
    let mut slabs = Vec::new();
    for (id, r) in results {
        match r {
            Ok(s) => {
                summary.produced += s.len();
                slabs.extend(s);
            }
            Err(e) => summary.failures.push((id, format!("{e:#}"))),
        }
    }
    let manifest = assemble_manifest(&slabs, cfg)?;
    for role in Role::ALL {
        let (p, n) = manifest.counts(role);
        let rate = manifest.achieved_rates[role.index()];
        let target = cfg.split.positive_rates[role.index()];
        info!("{role}: {p} positive / {n} negative slabs, rate {rate:.4} (target {target})");
        if (rate - target).abs() > 0.005 {
            warn!(
                "{role} positive rate {rate:.4} is more than 0.5 points from the target {target}"
            );
        }
    }
    let mut bytes = Vec::new();
    write_manifest(&manifest, &mut bytes)?;
    write_atomic(&layout.manifest(), &bytes)?;
    if summary.succeeded() {
        write_atomic(&stamp, fp.as_bytes())?;
    }
    Ok(summary)
}

pub fn load_manifest(cfg: &PipelineConfig) -> Result<SplitManifest> {
    let path = Layout::new(cfg).manifest();
    let f = fs::File::open(&path).with_context(|| {
        format!(
            "manifest not found at {}; run build-dataset first",
            path.display()
        )
    })?;
    Ok(read_manifest(BufReader::new(f))?)
}

fn load_image(root: &Path, rel: &str) -> Result<Image> {
    let vol = read_mhd(&root.join(rel)).with_context(|| format!("loading slab {rel}"))?;
    let [_, h, w] = vol.meta.dims;
    Ok(Image::new(h, w, vol.voxels))
}

fn sample_id(scan: &str, slab: usize) -> String {
    format!("{scan}/{slab:03}")
}

/// The role's slabs as training samples, in manifest order.
pub fn role_samples(
    cfg: &PipelineConfig,
    manifest: &SplitManifest,
    role: Role,
) -> Result<Vec<Sample>> {
    let root = Layout::new(cfg).root;
    manifest
        .role_entries(role)
        .map(|e| {
            Ok(Sample {
                id: sample_id(&e.slab.scan_id, e.slab.slab_index),
                image: load_image(&root, &e.slab.image_path)?,
                boxes: e.slab.boxes.clone(),
            })
        })
        .collect()
}

/// Training samples followed by `augment.copies` augmented copies of each,
/// each copy drawn from a stream keyed by the seed, slab and copy index.
pub fn training_samples(cfg: &PipelineConfig, manifest: &SplitManifest) -> Result<Vec<Sample>> {
    let base = role_samples(cfg, manifest, Role::Train)?;
    let mut out = base.clone();
    for c in 0..cfg.augment.copies {
        for s in &base {
            let mut rng = derived(cfg.seed, &format!("augment/{}/{c}", s.id));
            let spec = AugmentationSpec::sample(&cfg.augment, &mut rng);
            let a = augment(&s.image, &s.boxes, &spec, &mut rng);
            out.push(Sample {
                id: format!("{}#aug{c}", s.id),
                image: a.image,
                boxes: a.boxes,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- train

/// Result of [`cmd_train`].
#[derive(Debug, Clone, Default)]
pub struct TrainRun {
    pub summary: RunSummary,
    pub epochs: Vec<EpochSummary>,
    pub step_losses: Vec<f64>,
}

fn write_epochs(path: &Path, epochs: &[EpochSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "mean_loss", "val_ap", "val_f1"])?;
    for e in epochs {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            e.epoch.to_string(),
            e.mean_loss.to_string(),
            opt(e.val_ap),
            opt(e.val_f1),
        ])?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| anyhow!("{e}"))?)
}

/// Epoch summaries written by the last training run.
pub fn read_epochs(path: &Path) -> Result<Vec<EpochSummary>> {
    let mut rdr =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let opt = |s: &str| -> Result<Option<f64>> {
            Ok(if s.is_empty() { None } else { Some(s.parse()?) })
        };
        out.push(EpochSummary {
            epoch: rec[0].parse()?,
            mean_loss: rec[1].parse()?,
            val_ap: opt(&rec[2])?,
            val_f1: opt(&rec[3])?,
        });
    }
    Ok(out)
}

/// Train the detector on the manifest's train role, validating on val.
pub fn cmd_train(cfg: &PipelineConfig, opts: RunOptions) -> Result<TrainRun> {
    let layout = Layout::new(cfg);
    let manifest_bytes = fs::read(layout.manifest()).with_context(|| {
        format!(
            "manifest not found at {}; run build-dataset first",
            layout.manifest().display()
        )
    })?;
    let model_cfg = cfg.effective_model();
    let optim = cfg.effective_optim();
    let fp = fingerprint(&[
        &manifest_bytes,
        &toml_bytes(&model_cfg),
        &toml_bytes(&optim),
        &toml_bytes(&cfg.loss),
        &toml_bytes(&cfg.augment),
        &cfg.seed.to_le_bytes(),
    ]);
    let stamp = layout.train().join("train.stamp");
    if !opts.force && stamp_matches(&stamp, &fp) && layout.best_checkpoint().is_file() {
        info!(
            "checkpoint {} is up to date",
            layout.best_checkpoint().display()
        );
        return Ok(TrainRun {
            summary: RunSummary {
                skipped: 1,
                ..RunSummary::default()
            },
            epochs: read_epochs(&layout.epochs_csv())?,
            step_losses: Vec::new(),
        });
    }
    let manifest = read_manifest(manifest_bytes.as_slice())?;
    let train_set = training_samples(cfg, &manifest)?;
    let val_set = role_samples(cfg, &manifest, Role::Val)?;
    info!(
        "training on {} images, validating on {}",
        train_set.len(),
        val_set.len()
    );
    fs::create_dir_all(layout.train())?;
    let model = DetrModel::new(model_cfg)?;
    let outputs = TrainOutputs {
        log_csv: Some(layout.train_log()),
        best_checkpoint: Some(layout.best_checkpoint()),
        last_checkpoint: Some(layout.last_checkpoint()),
    };
    let outcome = pool(opts.workers)?
        .install(|| train(model, &train_set, &val_set, &cfg.loss, &optim, &outputs))?;
    write_epochs(&layout.epochs_csv(), &outcome.epochs)?;
    write_atomic(&stamp, fp.as_bytes())?;
    Ok(TrainRun {
        summary: RunSummary {
            produced: 1,
            ..RunSummary::default()
        },
        epochs: outcome.epochs,
        step_losses: outcome.step_losses,
    })
}

// ----------------------------------------------------------------- eval

/// Anything that turns an image into scored boxes.
pub trait Detector: Sync {
    fn detect(&self, samples: &[Sample]) -> Result<Vec<Vec<ScoredBox>>>;
}

impl Detector for DetrModel {
    fn detect(&self, samples: &[Sample]) -> Result<Vec<Vec<ScoredBox>>> {
        Ok(predict_all(self, samples)?
            .into_iter()
            .map(|e| e.detections)
            .collect())
    }
}

fn truths(sample: &Sample) -> Vec<TruthBox> {
    sample
        .boxes
        .iter()
        .map(|b| TruthBox {
            bbox: b.as_array(),
            diameter_mm: b.diameter_mm,
        })
        .collect()
}

fn image_evals(detector: &dyn Detector, samples: &[Sample]) -> Result<Vec<ImageEval>> {
    let dets = detector.detect(samples)?;
    Ok(dets
        .into_iter()
        .zip(samples)
        .map(|(detections, s)| ImageEval {
            detections,
            truths: truths(s),
        })
        .collect())
}

/// Result of an evaluation: the report, the threshold it used and the raw
/// per-image detections.
#[derive(Debug, Clone)]
pub struct EvalRun {
    pub role: Role,
    pub threshold: f64,
    pub report: EvalReport,
    pub images: Vec<(String, ImageEval)>,
}

/// Operating threshold: explicit flag, then config, then the F1-maximizing
/// threshold on the validation role.
pub fn operating_threshold(
    cfg: &PipelineConfig,
    manifest: &SplitManifest,
    detector: &dyn Detector,
    flag: Option<f64>,
) -> Result<f64> {
    if let Some(t) = flag.or(cfg.eval.threshold) {
        return Ok(t);
    }
    let val = role_samples(cfg, manifest, Role::Val)?;
    if val.is_empty() {
        bail!("no validation slabs to choose a threshold from; pass --threshold");
    }
    Ok(best_threshold(&image_evals(detector, &val)?).threshold)
}

/// Evaluate `detector` on `role` and write `report.txt`, `report.csv` and
/// `detections.csv` under `eval/<role>`.
pub fn eval_with(
    cfg: &PipelineConfig,
    detector: &dyn Detector,
    role: Role,
    threshold: Option<f64>,
    opts: RunOptions,
) -> Result<EvalRun> {
    let manifest = load_manifest(cfg)?;
    pool(opts.workers)?.install(|| {
        let threshold = operating_threshold(cfg, &manifest, detector, threshold)?;
        let samples = role_samples(cfg, &manifest, role)?;
        if samples.is_empty() {
            bail!("role {role} has no slabs in the manifest");
        }
        let evals = image_evals(detector, &samples)?;
        let report = evaluate(&evals, threshold)?;
        let dir = Layout::new(cfg).eval(role);
        write_atomic(
            &dir.join("report.txt"),
            format!("role: {role}\n{report}").as_bytes(),
        )?;
        write_atomic(&dir.join("report.csv"), report.to_csv().as_bytes())?;
        let images: Vec<(String, ImageEval)> =
            samples.into_iter().map(|s| s.id).zip(evals).collect();
        write_detections(&dir.join("detections.csv"), threshold, &images)?;
        info!(
            "{role}: {}",
            report
                .rows()
                .iter()
                .map(|(k, v)| format!("{k} {v:.4}"))
                .collect::<Vec<_>>()
                .join(", ")
        );
        Ok(EvalRun {
            role,
            threshold,
            report,
            images,
        })
    })
}

/// Evaluate the best checkpoint on `role`.
pub fn cmd_eval(
    cfg: &PipelineConfig,
    role: Role,
    threshold: Option<f64>,
    opts: RunOptions,
) -> Result<EvalRun> {
    let path = Layout::new(cfg).best_checkpoint();
    if !path.is_file() {
        bail!(
            "checkpoint not found at {}; run train first",
            path.display()
        );
    }
    let model = load_checkpoint(&path)?;
    eval_with(cfg, &model, role, threshold, opts)
}

fn write_detections(path: &Path, threshold: f64, images: &[(String, ImageEval)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "image",
        "kind",
        "score",
        "cx",
        "cy",
        "w",
        "h",
        "diameter_mm",
    ])?;
    w.write_record(["", "threshold", &threshold.to_string(), "", "", "", "", ""])?;
    for (id, img) in images {
        for t in &img.truths {
            let [cx, cy, bw, bh] = t.bbox.map(|v| v.to_string());
            w.write_record([
                id.as_str(),
                "truth",
                "",
                &cx,
                &cy,
                &bw,
                &bh,
                &t.diameter_mm.to_string(),
            ])?;
        }
        for d in &img.detections {
            let [cx, cy, bw, bh] = d.bbox.map(|v| v.to_string());
            w.write_record([
                id.as_str(),
                "detection",
                &d.score.to_string(),
                &cx,
                &cy,
                &bw,
                &bh,
                "",
            ])?;
        }
        if img.truths.is_empty() && img.detections.is_empty() {
            w.write_record([id.as_str(), "empty", "", "", "", "", "", ""])?;
        }
    }
    write_atomic(path, &w.into_inner().map_err(|e| anyhow!("{e}"))?)
}

/// Read back what [`cmd_eval`] wrote: the threshold and per-image evaluations
/// in their original order.
pub fn read_detections(path: &Path) -> Result<(f64, Vec<(String, ImageEval)>)> {
    let mut rdr = csv::Reader::from_path(path)
        .with_context(|| format!("detections not found at {}; run eval first", path.display()))?;
    let mut threshold = None;
    let mut images: Vec<(String, ImageEval)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .with_context(|| format!("bad number {:?}", &rec[i]))
        };
        if &rec[1] == "threshold" {
            threshold = Some(num(2)?);
            continue;
        }
        let id = rec[0].to_string();
        if images.last().is_none_or(|(last, _)| *last != id) {
            images.push((id, ImageEval::default()));
        }
        let img = &mut images.last_mut().expect("just pushed").1;
        let bbox = || -> Result<[f64; 4]> { Ok([num(3)?, num(4)?, num(5)?, num(6)?]) };
        match &rec[1] {
            "truth" => img.truths.push(TruthBox {
                bbox: bbox()?,
                diameter_mm: num(7)?,
            }),
            "detection" => img.detections.push(ScoredBox {
                score: num(2)?,
                bbox: bbox()?,
            }),
            "empty" => {}
            other => bail!("unknown row kind {other:?} in {}", path.display()),
        }
    }
    let threshold = threshold.ok_or_else(|| anyhow!("{} lacks a threshold row", path.display()))?;
    Ok((threshold, images))
}

// --------------------------------------------------------------- report

/// Render the PR curve and the summary table of the last evaluation of `role`.
pub fn cmd_report(cfg: &PipelineConfig, role: Role) -> Result<EvalReport> {
    let layout = Layout::new(cfg);
    let (threshold, images) = read_detections(&layout.eval(role).join("detections.csv"))?;
    let evals: Vec<ImageEval> = images.into_iter().map(|(_, e)| e).collect();
    let report = evaluate(&evals, threshold)?;
    let dir = layout.report(role);
    let curve = role_pr_curve(&evals);
    write_atomic(
        &dir.join("pr_curve.svg"),
        pr_curve_svg(&curve, &format!("{role}: AP@0.5 {:.3}", report.overall.ap)).as_bytes(),
    )?;
    write_atomic(&dir.join("table.csv"), report.to_csv().as_bytes())?;
    write_atomic(
        &dir.join("table.txt"),
        format!("role: {role}\n{report}").as_bytes(),
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_separates_parts() {
        assert_ne!(fingerprint(&[b"ab", b"c"]), fingerprint(&[b"a", b"bc"]));
        assert_eq!(fingerprint(&[b"x"]), fingerprint(&[b"x"]));
        assert_eq!(fingerprint(&[]).len(), 64);
    }

    #[test]
    fn detections_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let images = vec![
            (
                "a/000".to_string(),
                ImageEval {
                    detections: vec![ScoredBox {
                        score: 0.25,
                        bbox: [0.5, 0.5, 0.1, 0.2],
                    }],
                    truths: vec![TruthBox {
                        bbox: [0.4, 0.5, 0.1, 0.1],
                        diameter_mm: 6.5,
                    }],
                },
            ),
            ("a/001".to_string(), ImageEval::default()),
        ];
        write_detections(&path, 0.3, &images).unwrap();
        let (t, back) = read_detections(&path).unwrap();
        assert_eq!(t, 0.3);
        assert_eq!(back, images);
    }
}
