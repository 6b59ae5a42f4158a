//! Implementation of each subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{SecondsFormat, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segdebias::datasets::{
    generate_biased_shapes, load_folder_dataset, write_folder_dataset, BiasedShapesConfig, CorruptionRecord,
    DatasetManifest, DatasetSpec, Sample,
};
use segdebias::evaluate::{evaluate_dataset, Evaluation, ModelSegmenter};
use segdebias::metrics::{class_histogram, Comparison, MetricsReport};
use segdebias::model::Part;
use segdebias::training::{
    load_train_data, Checkpoint, DataFormat, EpochLog, Scheme, TrainConfig, TrainOutcome, Trainer,
};
use segdebias::transforms::{colour_jitter, invert, to_greyscale, JitterParams};
use serde::Serialize;

use crate::args::{Cli, Command, CorruptArgs, EvaluateArgs, GenerateArgs, ReportArgs, TrainArgs, Variant};
use crate::manifest::{code_version, RunManifest, RUN_MANIFEST_SCHEMA_VERSION};
use crate::overlay::overlay;
use crate::plot::{plot, Series, Stroke};
use crate::tables::build_tables;

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Globals {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub force: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    let g = Globals {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        force: cli.force,
    };
    match cli.command {
        Command::Generate(a) => generate(&g, &a).map(drop),
        Command::Corrupt(a) => corrupt(&g, &a).map(drop),
        Command::Train(a) => train(&g, &a).map(drop),
        Command::Evaluate(a) => evaluate(&g, &a).map(drop),
        Command::Report(a) => report(&g, &a).map(drop),
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Creates `dir`, refusing to touch a non-empty directory unless `force`.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if non_empty {
            if !force {
                bail!("output directory {} is not empty; pass --force to replace it", dir.display());
            }
            fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))?;
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn relative(paths: Vec<PathBuf>, base: &Path) -> Vec<PathBuf> {
    paths
        .into_iter()
        .map(|p| p.strip_prefix(base).map(Path::to_path_buf).unwrap_or(p))
        .collect()
}

fn save_png(img: &image::RgbImage, path: &Path) -> Result<PathBuf> {
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(path.to_path_buf())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path.to_path_buf())
}

pub fn generate(g: &Globals, a: &GenerateArgs) -> Result<Vec<PathBuf>> {
    let mut cfg = match &g.config {
        Some(p) => toml::from_str::<BiasedShapesConfig>(&read_text(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => BiasedShapesConfig::default(),
    };
    if let Some(c) = a.count {
        cfg.count = c;
    }
    if let Some(r) = a.correlation {
        cfg.colour_correlation = r;
    }
    cfg.validate()?;
    let seed = g.seed.unwrap_or(0);
    let root = g.out.clone().unwrap_or_else(|| PathBuf::from("data/shapes"));
    let split_dir = root.join(a.split.as_str());
    prepare_out_dir(&split_dir, g.force)?;
    let samples = generate_biased_shapes(&cfg, seed)?;
    let written = write_folder_dataset(&split_dir, &samples, &cfg.manifest(seed))?;
    println!("wrote {} samples to {}", samples.len(), split_dir.display());
    print!("{}", frequency_summary(&samples, &cfg.class_names()));
    Ok(written)
}

fn frequency_summary(samples: &[Sample], names: &[String]) -> String {
    let mut counts = vec![0u64; names.len()];
    for s in samples {
        for (id, n) in class_histogram(s.mask.as_raw(), segdebias::datasets::IGNORE_ID) {
            if let Some(c) = counts.get_mut(id as usize) {
                *c += n;
            }
        }
    }
    let total: u64 = counts.iter().sum::<u64>().max(1);
    names
        .iter()
        .zip(&counts)
        .map(|(n, &c)| format!("  {n:<12} {c:>10} px {:>6.2}%\n", 100.0 * c as f64 / total as f64))
        .collect()
}

pub fn corrupt(g: &Globals, a: &CorruptArgs) -> Result<Vec<PathBuf>> {
    let spec = DatasetSpec::from_manifest(&a.dataset, a.split)?;
    let source_manifest = DatasetManifest::read(&spec.split_dir())?;
    let params = match &g.config {
        Some(p) => toml::from_str::<JitterParams>(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => JitterParams::default(),
    };
    params.validate()?;
    let Some(root) = g.out.clone() else {
        bail!("corrupt needs --out for the new dataset root");
    };
    let samples = load_folder_dataset(&spec)?;
    let split_dir = root.join(a.split.as_str());
    if split_dir.exists() && fs::canonicalize(&split_dir)? == fs::canonicalize(spec.split_dir())? {
        bail!("refusing to overwrite the source dataset");
    }
    prepare_out_dir(&split_dir, g.force)?;
    let (images, masks) = (split_dir.join("images"), split_dir.join("masks"));
    fs::create_dir_all(&images)?;
    fs::create_dir_all(&masks)?;

    let seed = g.seed.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut written = Vec::with_capacity(2 * samples.len() + 1);
    for s in &samples {
        let img = match a.variant {
            Variant::Greyscale => to_greyscale(&s.image),
            Variant::Invert => invert(&s.image),
            Variant::Jitter => colour_jitter(&s.image, &params, rng.random())?,
        };
        let name = format!("{}.png", s.id);
        written.push(save_png(&img, &images.join(&name))?);
        let dst = masks.join(&name);
        fs::copy(spec.split_dir().join("masks").join(&name), &dst)
            .with_context(|| format!("copying mask {name}"))?;
        written.push(dst);
    }
    let manifest = DatasetManifest {
        kind: "corrupted".into(),
        count: samples.len(),
        seed: Some(seed),
        generator: None,
        corruption: Some(CorruptionRecord {
            variant: a.variant.as_str().into(),
            seed,
            source: a.dataset.display().to_string(),
            source_manifest: Some(Box::new(source_manifest.clone())),
        }),
        ..source_manifest
    };
    written.push(manifest.write(&split_dir)?);
    println!("wrote {} {} images to {}", samples.len(), a.variant.as_str(), split_dir.display());
    Ok(written)
}

/// Run summary written next to the checkpoints.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub scheme: String,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_val_seg_loss: f64,
    pub final_val_seg_loss: f64,
    pub class_names: Vec<String>,
    pub class_weights: Vec<f64>,
    pub feature_extractor_params: usize,
    pub segmentation_head_params: usize,
    pub bias_head_params: usize,
    pub logs: Vec<EpochLog>,
}

/// Per-epoch losses without timings so reruns produce identical files.
pub fn epoch_csv(logs: &[EpochLog], cfg: &TrainConfig) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "epoch".to_string(),
        "lr".into(),
        "grl_scale".into(),
        "train_seg_loss".into(),
        "val_seg_loss".into(),
    ];
    header.extend(cfg.data.extra_val.iter().map(|d| format!("{}_val_seg_loss", d.name)));
    let lntl = cfg.scheme == Scheme::Lntl;
    if lntl {
        header.push("bias_loss".into());
    }
    w.write_record(&header)?;
    for log in logs {
        let mut row = vec![
            log.epoch.to_string(),
            log.lr.to_string(),
            log.grl_scale.to_string(),
            log.train_seg_loss.to_string(),
            log.val_seg_loss.to_string(),
        ];
        row.extend(log.extra_val.iter().map(|e| e.loss.to_string()));
        if lntl {
            let adversarial = log.epoch >= cfg.warmup_epochs;
            row.push(log.bias_loss.filter(|_| adversarial).map(|b| b.to_string()).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

const CURVE_COLOURS: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
];
const BIAS_COLOUR: [u8; 3] = [214, 39, 40];

/// Segmentation losses on top (train and val solid, extra sets dashed then
/// dotted); the bias-head loss in its own panel below for adversarial runs.
pub fn loss_curves(logs: &[EpochLog], lntl: bool) -> image::RgbImage {
    let solid = |values: Vec<Option<f64>>, colour| Series {
        values,
        colour,
        stroke: Stroke::Solid,
    };
    let mut seg = vec![
        solid(logs.iter().map(|l| Some(l.train_seg_loss)).collect(), CURVE_COLOURS[0]),
        solid(logs.iter().map(|l| Some(l.val_seg_loss)).collect(), CURVE_COLOURS[1]),
    ];
    let extra = logs.first().map_or(0, |l| l.extra_val.len());
    for k in 0..extra {
        seg.push(Series {
            values: logs.iter().map(|l| l.extra_val.get(k).map(|e| e.loss)).collect(),
            colour: CURVE_COLOURS[(2 + k) % CURVE_COLOURS.len()],
            stroke: if k % 2 == 0 { Stroke::Dashed } else { Stroke::Dotted },
        });
    }
    let mut panels = vec![seg];
    if lntl {
        panels.push(vec![solid(logs.iter().map(|l| l.bias_loss).collect(), BIAS_COLOUR)]);
    }
    plot(&panels, 640, if lntl { 560 } else { 360 })
}

fn dataset_manifests(cfg: &TrainConfig) -> Vec<DatasetManifest> {
    if cfg.data.format != DataFormat::Folder {
        return Vec::new();
    }
    let mut dirs = vec![cfg.data.root.join(cfg.data.train_split.as_str())];
    if cfg.data.train_fraction.is_none() {
        dirs.push(cfg.data.root.join(cfg.data.val_split.as_str()));
    }
    dirs.extend(cfg.data.extra_val.iter().map(|d| d.root.join(d.split.as_str())));
    dirs.iter().filter_map(|d| DatasetManifest::read(d).ok()).collect()
}

pub fn train(g: &Globals, a: &TrainArgs) -> Result<RunManifest> {
    let started_at = now();
    let mut cfg = match &g.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    a.apply(&mut cfg);
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    let data = load_train_data(&cfg)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let out = cfg.output_dir.clone();
    prepare_out_dir(&out, g.force)?;

    let trainer = match &resume {
        Some(ckpt) => Trainer::resume(ckpt, cfg.clone(), data)?,
        None => Trainer::new(cfg.clone(), data)?,
    };
    let model = trainer.model();
    let param_counts = [Part::FeatureExtractor, Part::SegmentationHead, Part::BiasHead].map(|p| model.param_count(p));
    let TrainOutcome { best, last, logs } = trainer.run()?;

    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let mut outputs = Vec::new();
    for (name, ckpt) in [("best.ckpt", &best), ("final.ckpt", &last)] {
        let path = ckpt_dir.join(name);
        ckpt.save(&path)?;
        outputs.push(path);
    }
    outputs.push(write_file(&out.join("epochs.csv"), epoch_csv(&logs, &cfg)?)?);
    let summary = RunSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        scheme: cfg.scheme.as_str().into(),
        epochs: cfg.epochs,
        best_epoch: best.header.epochs_completed.checked_sub(1),
        best_val_seg_loss: best.header.val_seg_loss,
        final_val_seg_loss: last.header.val_seg_loss,
        class_names: last.header.class_names.clone(),
        class_weights: last.header.class_weights.as_slice().to_vec(),
        feature_extractor_params: param_counts[0],
        segmentation_head_params: param_counts[1],
        bias_head_params: param_counts[2],
        logs: logs.clone(),
    };
    outputs.push(write_file(&out.join("run.json"), serde_json::to_string_pretty(&summary)? + "\n")?);
    outputs.push(save_png(&loss_curves(&logs, cfg.scheme == Scheme::Lntl), &out.join("loss_curves.png"))?);
    outputs.push(write_file(&out.join("config.toml"), cfg.to_toml_string()?)?);

    let manifest = RunManifest {
        schema_version: RUN_MANIFEST_SCHEMA_VERSION,
        run_id: format!(
            "{}-{}-s{}",
            cfg.scheme.as_str(),
            Utc::now().format("%Y%m%dT%H%M%SZ"),
            cfg.seed
        ),
        command: "train".into(),
        code_version: code_version(),
        seed: Some(cfg.seed),
        config: serde_json::to_value(&cfg)?,
        dataset_manifests: dataset_manifests(&cfg),
        started_at,
        finished_at: now(),
        outputs: relative(outputs, &out),
        output_dir: out.clone(),
    };
    manifest.write()?;
    println!(
        "trained {} for {} epochs; best val loss {:.4} at epoch {}; outputs in {}",
        cfg.scheme.as_str(),
        cfg.epochs,
        summary.best_val_seg_loss,
        summary.best_epoch.map_or("-".into(), |e| e.to_string()),
        out.display()
    );
    Ok(manifest)
}

fn dir_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Adds relative mIoU and category-average changes against `reference`.
fn compare(report: &mut MetricsReport, reference: &MetricsReport, variant: &str, ours: &MetricsReport) {
    let pairs = [
        ("miou", Some(reference.miou), Some(ours.miou)),
        ("category_average", reference.category_average, ours.category_average),
    ];
    for (metric, b, o) in pairs {
        let (Some(b), Some(o)) = (b, o) else { continue };
        match Comparison::new(variant, metric, b, o) {
            Ok(c) => report.comparisons.push(c),
            Err(e) => log::warn!("skipping {metric} comparison for {variant}: {e}"),
        }
    }
}

pub fn evaluate(g: &Globals, a: &EvaluateArgs) -> Result<RunManifest> {
    let started_at = now();
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let segmenter = ModelSegmenter::from_checkpoint(&ckpt)?;
    let mut sets = Vec::new();
    let mut manifests = Vec::new();
    for root in &a.datasets {
        let spec = DatasetSpec::from_manifest(root, a.split)?;
        if spec.num_classes != ckpt.num_classes() {
            bail!(
                "class-count mismatch: checkpoint predicts {} classes but {} has {}",
                ckpt.num_classes(),
                spec.split_dir().display(),
                spec.num_classes
            );
        }
        if spec.class_names != ckpt.header.class_names {
            bail!(
                "class names of {} ({:?}) differ from the checkpoint's ({:?})",
                spec.split_dir().display(),
                spec.class_names,
                ckpt.header.class_names
            );
        }
        let manifest = DatasetManifest::read(&spec.split_dir())?;
        let mut variant = manifest
            .corruption
            .as_ref()
            .map_or_else(|| "source".to_string(), |c| c.variant.clone());
        if sets.iter().any(|(v, _, _): &(String, _, _)| *v == variant) {
            variant = format!("{variant}-{}", sets.len());
        }
        let samples = load_folder_dataset(&spec)?;
        sets.push((variant, spec, samples));
        manifests.push(manifest);
    }
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("eval"));
    prepare_out_dir(&out, g.force)?;

    let mut evals: Vec<Evaluation> = Vec::new();
    for (variant, spec, samples) in &sets {
        let mut ev = evaluate_dataset(&segmenter, samples, &spec.class_names, &spec.category_map, spec.ignore_id)?;
        ev.report.variant = variant.clone();
        ev.report.scheme = ckpt.header.config.scheme.as_str().into();
        ev.report.dataset = format!("{}/{}", dir_name(&spec.root), spec.split.as_str());
        ev.report.checkpoint = dir_name(&a.checkpoint);
        evals.push(ev);
    }
    let reports: Vec<MetricsReport> = evals.iter().map(|e| e.report.clone()).collect();
    for (i, ev) in evals.iter_mut().enumerate() {
        if i == 0 {
            for other in &reports[1..] {
                compare(&mut ev.report, &reports[0], &other.variant, other);
            }
        } else {
            compare(&mut ev.report, &reports[0], &reports[i].variant, &reports[i]);
        }
    }

    let mut outputs = Vec::new();
    for ((variant, _, samples), ev) in sets.iter().zip(&evals) {
        let dir = out.join(variant);
        fs::create_dir_all(&dir)?;
        outputs.push(write_file(&dir.join("report.json"), ev.report.to_json()? + "\n")?);
        outputs.push(write_file(&dir.join("report.md"), ev.report.to_markdown())?);
        outputs.push(write_file(
            &dir.join("per_image.json"),
            serde_json::to_string_pretty(&ev.per_image)? + "\n",
        )?);
        if a.overlays > 0 {
            let odir = dir.join("overlays");
            fs::create_dir_all(&odir)?;
            for (rank, idx) in ev.worst(a.overlays).into_iter().enumerate() {
                let img = overlay(&samples[idx].image, &ev.predictions[idx], &a.rois);
                outputs.push(save_png(&img, &odir.join(format!("{rank:03}_{}.png", samples[idx].id)))?);
            }
        }
        println!(
            "{variant}: mIoU {:.2}% over {} images",
            100.0 * ev.report.miou,
            ev.report.num_images
        );
    }
    let manifest = RunManifest {
        schema_version: RUN_MANIFEST_SCHEMA_VERSION,
        run_id: format!("evaluate-{}", Utc::now().format("%Y%m%dT%H%M%SZ")),
        command: "evaluate".into(),
        code_version: code_version(),
        seed: None,
        config: serde_json::json!({
            "checkpoint": a.checkpoint,
            "datasets": a.datasets,
            "split": a.split.as_str(),
            "overlays": a.overlays,
            "rois": a.rois.iter().map(|r| [r.x, r.y, r.width, r.height]).collect::<Vec<_>>(),
        }),
        dataset_manifests: manifests,
        started_at,
        finished_at: now(),
        outputs: relative(outputs, &out),
        output_dir: out,
    };
    manifest.write()?;
    Ok(manifest)
}

pub fn report(g: &Globals, a: &ReportArgs) -> Result<RunManifest> {
    let started_at = now();
    let load = |paths: &[PathBuf]| -> Result<Vec<MetricsReport>> {
        paths
            .iter()
            .map(|p| MetricsReport::from_json(&read_text(p)?).with_context(|| format!("parsing {}", p.display())))
            .collect()
    };
    let tables = build_tables(&load(&a.baseline)?, &load(&a.ours)?)?;
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("report"));
    prepare_out_dir(&out, g.force)?;
    let md = tables.to_markdown();
    let outputs = vec![
        write_file(&out.join("tables.md"), &md)?,
        write_file(&out.join("tables.json"), serde_json::to_string_pretty(&tables)? + "\n")?,
    ];
    print!("{md}");
    let manifest = RunManifest {
        schema_version: RUN_MANIFEST_SCHEMA_VERSION,
        run_id: format!("report-{}", Utc::now().format("%Y%m%dT%H%M%SZ")),
        command: "report".into(),
        code_version: code_version(),
        seed: None,
        config: serde_json::json!({ "baseline": a.baseline, "ours": a.ours }),
        dataset_manifests: Vec::new(),
        started_at,
        finished_at: now(),
        outputs: relative(outputs, &out),
        output_dir: out,
    };
    manifest.write()?;
    Ok(manifest)
}
