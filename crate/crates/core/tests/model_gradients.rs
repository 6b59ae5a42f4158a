mod common;

use common::*;
use segdebias::model::{fork_at, BackboneSpec, BiasHeadSpec, Part};
use segdebias::training::pixel_cross_entropy;

#[test]
fn composite_gradient_matches_finite_differences() {
    for (lambda, mu) in [(1.0, 1.0), (0.5, 2.0), (3.0, 0.25)] {
        let (f_err, h_err) = grl_gradient_errors(lambda, mu);
        assert!(f_err <= 1e-4, "lambda {lambda} mu {mu}: f relative error {f_err}");
        assert!(h_err <= 1e-4, "lambda {lambda} mu {mu}: h relative error {h_err}");
    }
}

#[test]
fn segmentation_head_sees_only_the_segmentation_loss() {
    let model = toy_model(2.0);
    let batch = toy_batch();
    let [_, ga, _] = toy_analytic(&model, &batch, 1.0);
    let nf = model.param_count(Part::FeatureExtractor);
    let ng = model.param_count(Part::SegmentationHead);
    let fd = central_differences(&model, nf..nf + ng, |m| toy_losses(m, &batch).0);
    assert!(relative_error(&ga, &fd) <= 1e-6);
}

#[test]
fn zero_reversal_scale_leaves_only_the_segmentation_gradient_in_f() {
    let model = toy_model(0.0);
    let batch = toy_batch();
    let [with_bias, _, _] = toy_analytic(&model, &batch, 1.0);

    let pass = model.forward_train(&batch.x, false).unwrap();
    let seg = pixel_cross_entropy(&pass.seg_logits, &batch.seg_targets, None, None, true).unwrap();
    let seg_only = model.backward(pass, seg.grad.unwrap(), None).unwrap();
    assert_eq!(with_bias, seg_only.flat(Part::FeatureExtractor));
}

#[test]
fn bias_head_gradient_does_not_depend_on_the_reversal_scale() {
    let batch = toy_batch();
    let heads: Vec<Vec<f64>> = [0.0, 0.1, 1.0, 7.5]
        .iter()
        .map(|&l| toy_analytic(&toy_model(l), &batch, 1.0)[2].clone())
        .collect();
    assert!(heads.iter().all(|h| h == &heads[0]));
    assert!(heads[0].iter().any(|&v| v != 0.0));
}

#[test]
fn reversal_flips_the_bias_contribution_in_f() {
    let batch = toy_batch();
    let seg_only = {
        let model = toy_model(0.0);
        let pass = model.forward_train(&batch.x, false).unwrap();
        let seg = pixel_cross_entropy(&pass.seg_logits, &batch.seg_targets, None, None, true).unwrap();
        model.backward(pass, seg.grad.unwrap(), None).unwrap().flat(Part::FeatureExtractor)
    };
    let contribution = |lambda: f64| -> Vec<f64> {
        let f = toy_analytic(&toy_model(lambda), &batch, 1.0)[0].clone();
        f.iter().zip(&seg_only).map(|(a, b)| a - b).collect()
    };
    let one = contribution(1.0);
    let two = contribution(2.0);
    for (a, b) in one.iter().zip(&two) {
        assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn moving_the_fork_does_not_change_the_segmentation_function() {
    let backbone = BackboneSpec::mini_seg(4, 2, 3).unwrap();
    let head = BiasHeadSpec { hidden: 4, bias_classes: 8 };
    let batch = segdebias::Tensor::from_vec(
        [1, 3, 8, 8],
        (0..192).map(|i| ((i * 37 % 101) as f32) / 50.0 - 1.0).collect(),
    )
    .unwrap();
    let reference = fork_at::<f32>(&backbone, backbone.default_fork(), head, 1.0, 9)
        .unwrap()
        .segment(&batch)
        .unwrap();
    let mut tried = 0;
    for fork in 1..backbone.layers.len() {
        if backbone.check_fork(fork).is_err() {
            continue;
        }
        let model = fork_at::<f32>(&backbone, fork, head, 1.0, 9).unwrap();
        assert_eq!(model.segment(&batch).unwrap(), reference, "fork {fork}");
        assert_eq!(model.forward_joint(&batch).unwrap().0, reference, "fork {fork}");
        tried += 1;
    }
    assert!(tried >= 3);
}

#[test]
fn segment_ignores_the_bias_head() {
    let batch = toy_batch();
    let a = toy_model(0.0);
    let mut b = toy_model(5.0);
    let nf = b.param_count(Part::FeatureExtractor) + b.param_count(Part::SegmentationHead);
    let mut p = b.flat_params();
    p[nf..].iter_mut().for_each(|v| *v = -*v * 3.0);
    b.load_flat_params(&p).unwrap();
    assert_eq!(a.segment(&batch.x).unwrap(), b.segment(&batch.x).unwrap());
}
