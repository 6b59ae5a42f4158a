#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use segdebias_cli::{run, Cli};

/// Runs the command line `segdebias <args>` in-process.
pub fn cli(args: &[&str]) -> anyhow::Result<()> {
    run(Cli::try_parse_from(std::iter::once("segdebias").chain(args.iter().copied()))?)
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Small shapes so training stays fast.
pub const SMALL_SHAPES: &str = "image_size = [24, 24]\n\
                                shapes_per_image = [1, 2]\n\
                                shape_radius = [2, 4]\n";

pub fn write_shapes_config(dir: &Path) -> PathBuf {
    let path = dir.join("shapes.toml");
    fs::write(&path, SMALL_SHAPES).unwrap();
    path
}

/// Generates `root/train` and `root/val` biased-shapes splits.
pub fn small_dataset(dir: &Path, root: &Path, train: usize, val: usize) {
    let cfg = write_shapes_config(dir);
    for (split, count, seed) in [("train", train, "1"), ("val", val, "2")] {
        cli(&[
            "generate",
            "--config",
            path_str(&cfg),
            "--out",
            path_str(root),
            "--split",
            split,
            "--count",
            &count.to_string(),
            "--seed",
            seed,
        ])
        .unwrap();
    }
}

/// Training flags for a tiny network on `root`.
pub fn train_args<'a>(root: &'a Path, out: &'a Path, scheme: &'a str, epochs: &'a str) -> Vec<&'a str> {
    vec![
        "train",
        "--scheme",
        scheme,
        "--data-root",
        path_str(root),
        "--out",
        path_str(out),
        "--epochs",
        epochs,
        "--warmup-epochs",
        "2",
        "--width",
        "4",
        "--depth",
        "1",
        "--bias-hidden",
        "4",
        "--bias-bins",
        "2",
        "--batch-size",
        "4",
        "--base-lr",
        "0.01",
        "--seed",
        "3",
    ]
}

/// Every regular file under `dir`, relative to it, with its bytes.
pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
