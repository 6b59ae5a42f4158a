//! Trains a baseline and an adversarial model on colour-biased shapes and
//! compares their mIoU on biased and colour-randomised validation sets.
//!
//! Usage: `cargo run --release --example planted_bias -- [key=value ...]`
//! where keys are `epochs`, `warmup`, `width`, `lambda`, `mu`, `bins`,
//! `count`, `val_count`, `lr`, `batch`, `seed`, `hidden`, `fork`, `ramp`
//! and `skip_baseline`.

use std::collections::HashMap;

use segdebias::datasets::{generate_biased_shapes, BiasedShapesConfig};
use segdebias::evaluate::{evaluate_dataset, ModelSegmenter};
use segdebias::metrics::CategoryMap;
use segdebias::training::{Scheme, TrainConfig, TrainData, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: f64| args.get(k).map_or(d, |v| v.parse().expect("numeric argument"));

    let seed = get("seed", 7.0) as u64;
    let train_cfg = BiasedShapesConfig {
        count: get("count", 1000.0) as usize,
        colour_correlation: 0.95,
        ..Default::default()
    };
    let val_cfg = BiasedShapesConfig {
        count: get("val_count", 200.0) as usize,
        ..train_cfg.clone()
    };
    let unbiased_cfg = BiasedShapesConfig {
        colour_correlation: 0.0,
        ..val_cfg.clone()
    };
    let train = generate_biased_shapes(&train_cfg, seed)?;
    let val = generate_biased_shapes(&val_cfg, seed + 1)?;
    let unbiased = generate_biased_shapes(&unbiased_cfg, seed + 2)?;
    let class_names = train_cfg.class_names();
    let categories = CategoryMap::identity(&class_names);

    for scheme in [Scheme::Baseline, Scheme::Lntl] {
        if scheme == Scheme::Baseline && get("skip_baseline", 0.0) != 0.0 {
            continue;
        }
        let mut cfg = TrainConfig {
            scheme,
            epochs: get("epochs", 30.0) as usize,
            warmup_epochs: get("warmup", 5.0) as usize,
            grl_scale: get("lambda", 1.0),
            grl_ramp: get("ramp", 0.0) != 0.0,
            bias_loss_weight: get("mu", 1.0),
            bias_bins: get("bins", 4.0) as usize,
            base_lr: get("lr", 0.001),
            batch_size: get("batch", 8.0) as usize,
            seed,
            ..Default::default()
        };
        cfg.model.width = get("width", 8.0) as usize;
        cfg.model.bias_hidden = get("hidden", 32.0) as usize;
        cfg.model.fork_index = args.get("fork").map(|v| v.parse().expect("numeric fork index"));
        let data = TrainData {
            class_names: class_names.clone(),
            categories: categories.clone(),
            ignore_id: 255,
            train: train.clone(),
            val: val.clone(),
            extra_val: vec![("unbiased".into(), unbiased.clone())],
        };
        let start = std::time::Instant::now();
        let out = Trainer::new(cfg, data)?.run()?;
        for log in &out.logs {
            println!(
                "{} epoch {:2} train {:.4} val {:.4} unbiased {:.4} bias {} ({:.1}s)",
                scheme.as_str(),
                log.epoch,
                log.train_seg_loss,
                log.val_seg_loss,
                log.extra_val[0].loss,
                log.bias_loss.map_or("-".into(), |b| format!("{b:.4}")),
                log.wall_time
            );
        }
        let seg = ModelSegmenter::from_checkpoint(&out.last)?;
        let biased_miou = evaluate_dataset(&seg, &val, &class_names, &categories, 255)?.report.miou;
        let unbiased_miou = evaluate_dataset(&seg, &unbiased, &class_names, &categories, 255)?.report.miou;
        let gap = (biased_miou - unbiased_miou) / biased_miou;
        println!(
            "{}: biased mIoU {:.4} unbiased mIoU {:.4} relative gap {:.4} ({:.0}s)",
            scheme.as_str(),
            biased_miou,
            unbiased_miou,
            gap,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
