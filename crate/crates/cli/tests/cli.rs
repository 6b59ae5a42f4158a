mod common;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use common::*;
use image::RgbImage;
use segdebias::datasets::{load_folder_dataset, DatasetManifest, DatasetSpec, Split};
use segdebias::evaluate::{evaluate_dataset, Segmenter};
use segdebias::metrics::MetricsReport;
use segdebias_cli::manifest::RunManifest;
use segdebias_cli::tables::ComparisonTables;

fn count_pngs(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count()
}

#[test]
fn generate_writes_the_requested_number_of_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("shapes");
    let cfg = write_shapes_config(tmp.path());
    cli(&["generate", "--config", path_str(&cfg), "--out", path_str(&root), "--count", "20", "--seed", "1"]).unwrap();
    let split = root.join("train");
    assert_eq!(count_pngs(&split.join("images")), 20);
    assert_eq!(count_pngs(&split.join("masks")), 20);
    let manifest = DatasetManifest::read(&split).unwrap();
    assert_eq!((manifest.count, manifest.seed, manifest.kind.as_str()), (20, Some(1), "biased_shapes"));
}

#[test]
fn generate_is_byte_identical_across_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_shapes_config(tmp.path());
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let root = tmp.path().join(name);
        cli(&["generate", "--config", path_str(&cfg), "--out", path_str(&root), "--count", "12", "--seed", "4"]).unwrap();
        trees.push(tree(&root));
    }
    assert_eq!(trees[0], trees[1]);
}

#[test]
fn generate_rejects_bad_correlation_and_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, format!("{SMALL_SHAPES}colour_correlation = 1.5\n")).unwrap();
    let err = cli(&["generate", "--config", path_str(&bad), "--out", path_str(&out)]).unwrap_err();
    assert!(format!("{err:#}").contains("colour_correlation"), "{err:#}");
    assert!(cli(&["generate", "--out", path_str(&out), "--correlation", "-0.1"]).is_err());
    fs::write(&bad, "colour_corelation = 0.5\n").unwrap();
    let err = cli(&["generate", "--config", path_str(&bad), "--out", path_str(&out)]).unwrap_err();
    assert!(format!("{err:#}").contains("colour_corelation"), "{err:#}");
}

#[test]
fn non_empty_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("shapes");
    let cfg = write_shapes_config(tmp.path());
    let args = ["generate", "--config", path_str(&cfg), "--out", path_str(&root), "--count", "3"];
    cli(&args).unwrap();
    let err = cli(&args).unwrap_err();
    assert!(format!("{err:#}").contains("--force"), "{err:#}");
    let mut forced = args.to_vec();
    forced.push("--force");
    cli(&forced).unwrap();
}

#[test]
fn invert_twice_restores_the_source_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    small_dataset(tmp.path(), &src, 4, 6);
    let once = tmp.path().join("inv1");
    let twice = tmp.path().join("inv2");
    cli(&["corrupt", "--dataset", path_str(&src), "--variant", "invert", "--out", path_str(&once)]).unwrap();
    cli(&["corrupt", "--dataset", path_str(&once), "--variant", "invert", "--out", path_str(&twice)]).unwrap();
    let images = |root: &Path| tree(&root.join("val/images"));
    assert_eq!(images(&src), images(&twice));
    assert_ne!(images(&src), images(&once));
    assert_eq!(tree(&src.join("val/masks")), tree(&once.join("val/masks")));
    let m = DatasetManifest::read(&once.join("val")).unwrap();
    let record = m.corruption.unwrap();
    assert_eq!((m.kind.as_str(), record.variant.as_str()), ("corrupted", "invert"));
    assert_eq!(record.source_manifest.unwrap().kind, "biased_shapes");
}

#[test]
fn greyscale_output_has_equal_channels() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    small_dataset(tmp.path(), &src, 4, 5);
    let grey = tmp.path().join("grey");
    cli(&["corrupt", "--dataset", path_str(&src), "--variant", "greyscale", "--out", path_str(&grey)]).unwrap();
    let spec = DatasetSpec::from_manifest(&grey, Split::Val).unwrap();
    let samples = load_folder_dataset(&spec).unwrap();
    assert_eq!(samples.len(), 5);
    for s in samples {
        assert!(s.image.pixels().all(|p| p.0[0] == p.0[1] && p.0[1] == p.0[2]));
    }
}

#[test]
fn jitter_is_deterministic_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    small_dataset(tmp.path(), &src, 4, 5);
    let run = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        cli(&["corrupt", "--dataset", path_str(&src), "--variant", "jitter", "--out", path_str(&out), "--seed", seed])
            .unwrap();
        tree(&out.join("val/images"))
    };
    let a = run("j1", "9");
    assert_eq!(a, run("j2", "9"));
    assert_ne!(a, run("j3", "10"));
    assert_ne!(a, tree(&src.join("val/images")));
}

#[test]
fn corrupt_refuses_to_run_without_an_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    small_dataset(tmp.path(), &src, 2, 2);
    assert!(cli(&["corrupt", "--dataset", path_str(&src), "--variant", "invert"]).is_err());
}

#[test]
fn baseline_training_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(tmp.path(), &data, 12, 6);
    let out = tmp.path().join("run");
    cli(&train_args(&data, &out, "baseline", "30")).unwrap();

    let manifest = RunManifest::read(&out).unwrap();
    let listed: Vec<String> = manifest.outputs.iter().map(|p| p.display().to_string()).collect();
    for f in [
        "checkpoints/best.ckpt",
        "checkpoints/final.ckpt",
        "epochs.csv",
        "run.json",
        "loss_curves.png",
        "config.toml",
    ] {
        assert!(listed.iter().any(|l| l == f), "{f} missing from {listed:?}");
        assert!(out.join(f).is_file(), "{f} not written");
    }
    assert_eq!(manifest.dataset_manifests.len(), 2);
    assert_eq!(manifest.seed, Some(3));

    let csv = fs::read_to_string(out.join("epochs.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "epoch,lr,grl_scale,train_seg_loss,val_seg_loss");
    assert_eq!(lines.count(), 30);
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["scheme"], "baseline");
}

#[test]
fn lntl_csv_has_a_bias_loss_column_from_warm_up_onward() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(tmp.path(), &data, 8, 4);
    let out = tmp.path().join("run");
    cli(&train_args(&data, &out, "lntl", "5")).unwrap();
    let mut reader = csv::Reader::from_path(out.join("epochs.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "bias_loss").expect("bias_loss column");
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 5);
    for (e, row) in rows.iter().enumerate() {
        let cell = &row[col];
        if e < 2 {
            assert!(cell.is_empty(), "epoch {e}: {cell}");
        } else {
            assert!(cell.parse::<f64>().unwrap() > 0.0);
        }
    }
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(tmp.path(), &data, 6, 3);
    let cfg = tmp.path().join("train.toml");
    fs::write(&cfg, "epochs = 50\nlr_step = 7\n[model]\nwidth = 4\ndepth = 1\n").unwrap();
    let out = tmp.path().join("run");
    let mut args = train_args(&data, &out, "baseline", "3");
    args.extend(["--config", path_str(&cfg)]);
    cli(&args).unwrap();
    let written = fs::read_to_string(out.join("config.toml")).unwrap();
    let back = segdebias::training::TrainConfig::from_toml_str(&written).unwrap();
    assert_eq!((back.epochs, back.lr_step, back.seed), (3, 7, 3));
}

#[test]
fn unknown_config_key_is_named_in_the_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("train.toml");
    fs::write(&cfg, "epochz = 3\n").unwrap();
    let err = cli(&["train", "--config", path_str(&cfg), "--out", path_str(&tmp.path().join("o"))]).unwrap_err();
    assert!(format!("{err:#}").contains("epochz"), "{err:#}");
}

#[test]
fn missing_dataset_fails_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let missing = tmp.path().join("nowhere");
    let err = cli(&train_args(&missing, &out, "baseline", "3")).unwrap_err();
    assert!(format!("{err:#}").contains("nowhere"), "{err:#}");
    assert!(!out.exists(), "no output should be created");
}

#[test]
fn binary_reports_errors_with_a_non_zero_exit() {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_segdebias"))
        .args(["corrupt", "--dataset", "d", "--variant", "blur"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("invert"), "{stderr}");
}

/// Looks up the ground truth by image content.
struct Oracle(HashMap<Vec<u8>, Vec<u8>>, usize);

impl Segmenter for Oracle {
    fn num_classes(&self) -> usize {
        self.1
    }

    fn predict(&self, image: &RgbImage) -> segdebias::Result<Vec<u8>> {
        Ok(self.0[image.as_raw()].clone())
    }
}

#[test]
fn oracle_segmenter_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(tmp.path(), &data, 2, 8);
    let spec = DatasetSpec::from_manifest(&data, Split::Val).unwrap();
    let samples = load_folder_dataset(&spec).unwrap();
    let oracle = Oracle(
        samples.iter().map(|s| (s.image.as_raw().clone(), s.mask.as_raw().clone())).collect(),
        spec.num_classes,
    );
    let ev = evaluate_dataset(&oracle, &samples, &spec.class_names, &spec.category_map, spec.ignore_id).unwrap();
    assert_eq!(ev.report.miou, 1.0);
    assert_eq!(ev.report.category_average, Some(1.0));
}

/// Trains a tiny model and returns `(data root, checkpoint path)`.
fn trained(tmp: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = tmp.join("data");
    small_dataset(tmp, &data, 8, 6);
    let out = tmp.join("run");
    cli(&train_args(&data, &out, "lntl", "3")).unwrap();
    (data, out.join("checkpoints/final.ckpt"))
}

#[test]
fn evaluation_on_a_corrupted_twin_fills_the_comparisons() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(tmp.path());
    let inv = tmp.path().join("inverted");
    cli(&["corrupt", "--dataset", path_str(&data), "--variant", "invert", "--out", path_str(&inv)]).unwrap();
    let eval = tmp.path().join("eval");
    cli(&[
        "evaluate",
        "--checkpoint",
        path_str(&ckpt),
        "--dataset",
        path_str(&data),
        "--dataset",
        path_str(&inv),
        "--out",
        path_str(&eval),
        "--overlays",
        "2",
        "--roi",
        "1,1,8,8",
    ])
    .unwrap();
    let read = |v: &str| MetricsReport::from_json(&fs::read_to_string(eval.join(v).join("report.json")).unwrap()).unwrap();
    let source = read("source");
    let inverted = read("invert");
    assert_eq!(source.num_images, 6);
    assert!(source.loss.is_some());
    let c = inverted.comparisons.iter().find(|c| c.metric == "miou").expect("miou comparison");
    let expected = segdebias::metrics::percent_change(source.miou, inverted.miou).unwrap();
    assert_eq!(c.percent_change, expected);
    assert!(source.comparisons.iter().any(|c| c.variant == "invert"));
    assert_eq!(count_pngs(&eval.join("invert/overlays")), 2);
    assert!(eval.join("source/report.md").is_file());
    let manifest = RunManifest::read(&eval).unwrap();
    assert!(manifest.outputs.iter().all(|p| eval.join(p).is_file()));
}

#[test]
fn repeated_evaluation_gives_identical_json() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(tmp.path());
    let mut reports = Vec::new();
    for name in ["e1", "e2"] {
        let out = tmp.path().join(name);
        cli(&["evaluate", "--checkpoint", path_str(&ckpt), "--dataset", path_str(&data), "--out", path_str(&out)]).unwrap();
        reports.push(fs::read(out.join("source/report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn evaluation_rejects_a_class_count_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, ckpt) = trained(tmp.path());
    let other = tmp.path().join("three");
    let cfg = tmp.path().join("three.toml");
    fs::write(
        &cfg,
        format!("{SMALL_SHAPES}num_shape_classes = 2\nsignature_colours = [[255, 0, 0], [0, 255, 0]]\n"),
    )
    .unwrap();
    cli(&["generate", "--config", path_str(&cfg), "--out", path_str(&other), "--split", "val", "--count", "2"]).unwrap();
    let err = cli(&[
        "evaluate",
        "--checkpoint",
        path_str(&ckpt),
        "--dataset",
        path_str(&other),
        "--out",
        path_str(&tmp.path().join("e")),
    ])
    .unwrap_err();
    assert!(format!("{err:#}").contains("class-count mismatch"), "{err:#}");
}

#[test]
fn report_builds_tables_from_evaluation_json() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(tmp.path());
    let eval = tmp.path().join("eval");
    cli(&["evaluate", "--checkpoint", path_str(&ckpt), "--dataset", path_str(&data), "--out", path_str(&eval)]).unwrap();
    let report = eval.join("source/report.json");
    let out = tmp.path().join("tables");
    cli(&["report", "--baseline", path_str(&report), "--ours", path_str(&report), "--out", path_str(&out)]).unwrap();
    let tables: ComparisonTables = serde_json::from_str(&fs::read_to_string(out.join("tables.json")).unwrap()).unwrap();
    assert_eq!(tables.summary.len(), 1);
    assert_eq!(tables.summary[0].miou_percent_change, Some(0.0));
    assert!(tables.categories[0].percent_change.iter().flatten().all(|&p| p == 0.0));
    let md = fs::read_to_string(out.join("tables.md")).unwrap();
    assert!(md.contains("+0.00%"), "{md}");
}
