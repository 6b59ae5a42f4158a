mod common;

use common::*;
use image::GrayImage;
use segdebias::datasets::Sample;
use segdebias::model::Part;
use segdebias::training::{compute_class_weights, Checkpoint, EpochLog, Scheme, TrainConfig, Trainer};

/// Logs with the wall-clock column cleared.
fn timeless(logs: &[EpochLog]) -> Vec<EpochLog> {
    logs.iter()
        .map(|l| EpochLog {
            wall_time: 0.0,
            ..l.clone()
        })
        .collect()
}

#[test]
fn identical_seeds_give_identical_runs() {
    let cfg = tiny_config(Scheme::Lntl);
    let a = Trainer::new(cfg.clone(), tiny_data(1)).unwrap().run().unwrap();
    let b = Trainer::new(cfg, tiny_data(1)).unwrap().run().unwrap();
    assert_eq!(timeless(&a.logs), timeless(&b.logs));
    assert_eq!(a.last.params, b.last.params);
}

#[test]
fn different_seeds_give_different_runs() {
    let cfg = tiny_config(Scheme::Baseline);
    let a = Trainer::new(cfg.clone(), tiny_data(1)).unwrap().run().unwrap();
    let b = Trainer::new(TrainConfig { seed: 6, ..cfg }, tiny_data(1)).unwrap().run().unwrap();
    assert_ne!(a.last.params, b.last.params);
}

#[test]
fn baseline_training_reduces_the_loss() {
    let cfg = TrainConfig {
        epochs: 8,
        ..tiny_config(Scheme::Baseline)
    };
    let out = Trainer::new(cfg, tiny_data(2)).unwrap().run().unwrap();
    let first = &out.logs[0];
    let last = out.logs.last().unwrap();
    assert!(last.train_seg_loss < first.train_seg_loss, "{:?}", out.logs);
    assert!(out.best.header.val_seg_loss <= last.val_seg_loss);
    assert!(out.logs.iter().all(|l| l.bias_loss.is_none() && l.grl_scale == 0.0));
}

#[test]
fn lntl_without_reversal_or_bias_weight_matches_the_baseline_bit_for_bit() {
    let base_cfg = tiny_config(Scheme::Baseline);
    let lntl_cfg = TrainConfig {
        scheme: Scheme::Lntl,
        grl_scale: 0.0,
        bias_loss_weight: 0.0,
        ..base_cfg.clone()
    };
    let base = Trainer::new(base_cfg, tiny_data(3)).unwrap().run().unwrap();
    let lntl = Trainer::new(lntl_cfg, tiny_data(3)).unwrap().run().unwrap();
    let losses = |logs: &[EpochLog]| -> Vec<(u64, u64)> {
        logs.iter()
            .map(|l| (l.train_seg_loss.to_bits(), l.val_seg_loss.to_bits()))
            .collect()
    };
    assert_eq!(losses(&base.logs), losses(&lntl.logs));
    let backbone = |c: &Checkpoint| {
        let m = c.model().unwrap();
        let n = m.param_count(Part::FeatureExtractor) + m.param_count(Part::SegmentationHead);
        c.params[..n].to_vec()
    };
    assert_eq!(backbone(&base.last), backbone(&lntl.last));
}

#[test]
fn warm_up_keeps_the_bias_head_frozen() {
    let cfg = tiny_config(Scheme::Lntl);
    let mut t = Trainer::new(cfg.clone(), tiny_data(4)).unwrap();
    let head = |t: &Trainer| {
        t.model()
            .bias_head()
            .iter()
            .filter_map(|l| l.conv())
            .flat_map(|c| c.weight.iter().chain(&c.bias).copied())
            .collect::<Vec<f32>>()
    };
    let initial = head(&t);
    for e in 0..cfg.warmup_epochs {
        let log = t.run_epoch().unwrap();
        assert_eq!(log.grl_scale, 0.0);
        assert!(log.bias_loss.is_some(), "bias loss is logged during warm-up");
        assert_eq!(head(&t), initial, "head moved during warm-up epoch {e}");
    }
    let log = t.run_epoch().unwrap();
    assert_eq!(log.grl_scale, cfg.grl_scale);
    assert_ne!(head(&t), initial);
}

#[test]
fn ramped_reversal_scale_is_logged() {
    let cfg = TrainConfig {
        grl_ramp: true,
        grl_scale: 2.0,
        ..tiny_config(Scheme::Lntl)
    };
    let out = Trainer::new(cfg, tiny_data(4)).unwrap().run().unwrap();
    let scales: Vec<f64> = out.logs.iter().map(|l| l.grl_scale).collect();
    assert_eq!(scales, vec![0.0, 0.0, 1.0, 2.0]);
}

#[test]
fn class_weights_follow_inverse_frequency() {
    let mask = GrayImage::from_raw(4, 2, vec![0, 0, 0, 1, 0, 0, 0, 1]).unwrap();
    let samples = vec![Sample {
        id: "a".into(),
        image: image::RgbImage::new(4, 2),
        mask,
    }];
    let w = compute_class_weights(&samples, 2, 255).unwrap();
    assert!((w.as_slice()[0] - 0.5).abs() < 1e-9);
    assert!((w.as_slice()[1] - 1.5).abs() < 1e-9);
}

#[test]
fn checkpoint_bytes_round_trip() {
    let out = Trainer::new(tiny_config(Scheme::Lntl), tiny_data(5)).unwrap().run().unwrap();
    let bytes = out.last.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, out.last);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.ckpt");
    out.last.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.last);
    loaded.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let out = Trainer::new(tiny_config(Scheme::Baseline), tiny_data(5)).unwrap().run().unwrap();
    let bytes = out.last.to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut long = bytes;
    long.push(0);
    assert!(Checkpoint::from_bytes(&long).is_err());
}

#[test]
fn resumed_checkpoint_reproduces_validation_loss() {
    let cfg = tiny_config(Scheme::Lntl);
    let out = Trainer::new(cfg.clone(), tiny_data(6)).unwrap().run().unwrap();
    let restored = Checkpoint::from_bytes(&out.last.to_bytes().unwrap()).unwrap();
    let t = Trainer::resume(&restored, cfg, tiny_data(6)).unwrap();
    assert_eq!(t.validation_loss().unwrap().to_bits(), out.last.header.val_seg_loss.to_bits());
}

#[test]
fn resuming_mid_run_matches_an_uninterrupted_run() {
    let cfg = tiny_config(Scheme::Lntl);
    let full = Trainer::new(cfg.clone(), tiny_data(7)).unwrap().run().unwrap();

    let half = TrainConfig {
        epochs: 3,
        ..cfg.clone()
    };
    let first = Trainer::new(half, tiny_data(7)).unwrap().run().unwrap();
    let restored = Checkpoint::from_bytes(&first.last.to_bytes().unwrap()).unwrap();
    let second = Trainer::resume(&restored, cfg, tiny_data(7)).unwrap().run().unwrap();

    assert_eq!(timeless(&second.logs), timeless(&full.logs));
    assert_eq!(second.last.params, full.last.params);
}

#[test]
fn resume_rejects_a_shorter_schedule_or_other_classes() {
    let cfg = tiny_config(Scheme::Baseline);
    let out = Trainer::new(cfg.clone(), tiny_data(8)).unwrap().run().unwrap();
    let shorter = TrainConfig { epochs: 2, ..cfg.clone() };
    assert!(Trainer::resume(&out.last, shorter, tiny_data(8)).is_err());
    let mut data = tiny_data(8);
    data.class_names[1] = "disc".into();
    assert!(Trainer::resume(&out.last, cfg, data).is_err());
}

#[test]
fn invalid_configuration_is_rejected_before_training() {
    let cfg = TrainConfig {
        warmup_epochs: 4,
        ..tiny_config(Scheme::Lntl)
    };
    assert!(Trainer::new(cfg, tiny_data(9)).is_err());
}
