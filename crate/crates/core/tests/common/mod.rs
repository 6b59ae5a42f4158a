#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segdebias::datasets::{generate_biased_shapes, BiasedShapesConfig};
use segdebias::metrics::CategoryMap;
use segdebias::model::{fork_at, BackboneSpec, BiasHeadSpec, Part, SegmentationModel};
use segdebias::nn::LayerKind;
use segdebias::training::{pixel_cross_entropy, Scheme, TrainConfig, TrainData};
use segdebias::Tensor;

/// Two-layer `f` (3x3 conv + ReLU) with a 1x1 classifier as `g`.
pub fn toy_backbone() -> BackboneSpec {
    BackboneSpec::pluggable(
        3,
        3,
        vec![
            LayerKind::Conv { in_channels: 3, out_channels: 4, kernel: 3 },
            LayerKind::Relu,
            LayerKind::Conv { in_channels: 4, out_channels: 3, kernel: 1 },
        ],
    )
    .unwrap()
}

pub fn toy_model(lambda: f64) -> SegmentationModel<f64> {
    let head = BiasHeadSpec { hidden: 5, bias_classes: 8 };
    let mut model = fork_at::<f64>(&toy_backbone(), 2, head, lambda, 3).unwrap();
    // Non-zero biases so every parameter has a non-trivial gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let params: Vec<f64> = model
        .flat_params()
        .iter()
        .map(|&p| if p == 0.0 { rng.random_range(-0.3..0.3) } else { p })
        .collect();
    model.load_flat_params(&params).unwrap();
    model
}

pub struct ToyBatch {
    pub x: Tensor<f64>,
    pub seg_targets: Vec<u8>,
    pub bias_targets: Vec<u8>,
}

pub fn toy_batch() -> ToyBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let shape = [2, 3, 5, 5];
    let n: usize = shape.iter().product();
    let x = Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let px = 2 * 5 * 5;
    ToyBatch {
        x,
        seg_targets: (0..px).map(|_| rng.random_range(0..3)).collect(),
        bias_targets: (0..px).map(|_| rng.random_range(0..8)).collect(),
    }
}

/// `(seg loss, bias loss)` of `model` on `batch`.
pub fn toy_losses(model: &SegmentationModel<f64>, batch: &ToyBatch) -> (f64, f64) {
    let (seg, bias) = model.forward_joint(&batch.x).unwrap();
    let ls = pixel_cross_entropy(&seg, &batch.seg_targets, None, None, false).unwrap().loss;
    let lb = pixel_cross_entropy(&bias, &batch.bias_targets, None, None, false).unwrap().loss;
    (ls, lb)
}

/// Analytic gradients for `f`, `g`, `h` after one backward pass with the bias
/// gradient weighted by `mu`.
pub fn toy_analytic(model: &SegmentationModel<f64>, batch: &ToyBatch, mu: f64) -> [Vec<f64>; 3] {
    let pass = model.forward_train(&batch.x, true).unwrap();
    let seg = pixel_cross_entropy(&pass.seg_logits, &batch.seg_targets, None, None, true).unwrap();
    let bias = pixel_cross_entropy(pass.bias_logits.as_ref().unwrap(), &batch.bias_targets, None, None, true).unwrap();
    let bias_grad = bias.grad.unwrap().map(|v| v * mu);
    let grads = model.backward(pass, seg.grad.unwrap(), Some(bias_grad)).unwrap();
    [
        grads.flat(Part::FeatureExtractor),
        grads.flat(Part::SegmentationHead),
        grads.flat(Part::BiasHead),
    ]
}

/// Central differences of `objective` over the flat parameter range `range`.
pub fn central_differences(
    model: &SegmentationModel<f64>,
    range: std::ops::Range<usize>,
    objective: impl Fn(&SegmentationModel<f64>) -> f64,
) -> Vec<f64> {
    let eps = 1e-6;
    let base = model.flat_params();
    range
        .map(|i| {
            let mut m = model.clone();
            let mut p = base.clone();
            p[i] = base[i] + eps;
            m.load_flat_params(&p).unwrap();
            let plus = objective(&m);
            p[i] = base[i] - eps;
            m.load_flat_params(&p).unwrap();
            let minus = objective(&m);
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `|a - b| / |b|` over whole vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

/// Worst relative error of `f`'s gradient against `d/dθ_f (L_seg - λμ L_bias)`,
/// and of `h`'s gradient against `d/dθ_h (μ L_bias)`.
pub fn grl_gradient_errors(lambda: f64, mu: f64) -> (f64, f64) {
    let model = toy_model(lambda);
    let batch = toy_batch();
    let [fa, _, ha] = toy_analytic(&model, &batch, mu);
    let nf = model.param_count(Part::FeatureExtractor);
    let ng = model.param_count(Part::SegmentationHead);
    let nh = model.param_count(Part::BiasHead);
    let f_fd = central_differences(&model, 0..nf, |m| {
        let (ls, lb) = toy_losses(m, &batch);
        ls - lambda * mu * lb
    });
    let h_fd = central_differences(&model, nf + ng..nf + ng + nh, |m| mu * toy_losses(m, &batch).1);
    (relative_error(&fa, &f_fd), relative_error(&ha, &h_fd))
}

pub fn tiny_shapes_config(count: usize, correlation: f64) -> BiasedShapesConfig {
    BiasedShapesConfig {
        image_size: (24, 24),
        shapes_per_image: (1, 2),
        shape_radius: (2, 4),
        colour_correlation: correlation,
        count,
        ..Default::default()
    }
}

pub fn tiny_data(seed: u64) -> TrainData {
    let cfg = tiny_shapes_config(16, 0.95);
    let class_names = cfg.class_names();
    TrainData {
        categories: CategoryMap::identity(&class_names),
        class_names,
        ignore_id: 255,
        train: generate_biased_shapes(&cfg, seed).unwrap(),
        val: generate_biased_shapes(&tiny_shapes_config(6, 0.95), seed + 1).unwrap(),
        extra_val: vec![(
            "unbiased".into(),
            generate_biased_shapes(&tiny_shapes_config(6, 0.0), seed + 2).unwrap(),
        )],
    }
}

pub fn tiny_config(scheme: Scheme) -> TrainConfig {
    let mut cfg = TrainConfig {
        scheme,
        epochs: 4,
        warmup_epochs: 2,
        base_lr: 0.01,
        batch_size: 4,
        bias_bins: 2,
        seed: 5,
        ..Default::default()
    };
    cfg.model.width = 4;
    cfg.model.depth = 1;
    cfg.model.bias_hidden = 4;
    cfg
}
