//! Inverse-frequency class weights and pixel-wise cross-entropy.

use serde::{Deserialize, Serialize};

use crate::datasets::Sample;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-class loss weights with mean exactly 1 (up to rounding).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        ClassWeights(vec![1.0; num_classes])
    }

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "class weights must be positive and finite, got {weights:?}"
            )));
        }
        Ok(ClassWeights(weights))
    }

    /// `w_c ∝ 1 / freq_c`, mean-normalised. Classes without pixels get the
    /// largest weight among the present classes.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Dataset("no labelled pixels to compute class weights from".into()));
        }
        let inv: Vec<Option<f64>> = counts
            .iter()
            .map(|&n| (n > 0).then(|| total as f64 / n as f64))
            .collect();
        let max = inv.iter().flatten().copied().fold(0.0, f64::max);
        let missing: Vec<usize> = inv.iter().enumerate().filter(|(_, v)| v.is_none()).map(|(i, _)| i).collect();
        if !missing.is_empty() {
            log::warn!("classes {missing:?} have no training pixels; giving them the largest weight");
        }
        let raw: Vec<f64> = inv.into_iter().map(|v| v.unwrap_or(max)).collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        ClassWeights::new(raw.into_iter().map(|w| w / mean).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn pixel_counts(samples: &[Sample], num_classes: usize, ignore_id: u8) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; num_classes];
    for s in samples {
        for &v in s.mask.as_raw() {
            if v == ignore_id {
                continue;
            }
            *counts.get_mut(v as usize).ok_or_else(|| {
                Error::Dataset(format!("{}: class id {v} out of range for {num_classes} classes", s.id))
            })? += 1;
        }
    }
    Ok(counts)
}

pub fn compute_class_weights(samples: &[Sample], num_classes: usize, ignore_id: u8) -> Result<ClassWeights> {
    ClassWeights::from_counts(&pixel_counts(samples, num_classes, ignore_id)?)
}

/// Loss value and, when requested, its gradient w.r.t. the logits.
#[derive(Debug, Clone)]
pub struct LossOutput<T = f32> {
    pub loss: f64,
    pub valid_pixels: usize,
    pub grad: Option<Tensor<T>>,
}

/// Mean over non-ignored pixels of `w_target * -log softmax(logits)_target`.
///
/// `weights: None` is plain cross-entropy; `ignore_id: None` scores every pixel.
pub fn pixel_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u8],
    weights: Option<&ClassWeights>,
    ignore_id: Option<u8>,
    want_grad: bool,
) -> Result<LossOutput<T>> {
    let [n, c, h, w] = logits.shape();
    let plane = h * w;
    if targets.len() != n * plane {
        return Err(Error::Shape(format!(
            "{} targets for logits of shape {:?}",
            targets.len(),
            logits.shape()
        )));
    }
    if let Some(wts) = weights {
        if wts.len() != c {
            return Err(Error::Shape(format!("{} class weights for {c} classes", wts.len())));
        }
    }
    let valid = targets.iter().filter(|&&t| Some(t) != ignore_id).count();
    if valid == 0 {
        return Err(Error::InvalidArgument(
            "every pixel is ignored; cross-entropy is undefined".into(),
        ));
    }
    let mut grad = want_grad.then(|| Tensor::zeros(logits.shape()));
    let scale = 1.0 / valid as f64;
    let data = logits.data();
    let mut total = 0.0f64;
    let mut probs = vec![T::zero(); c];
    for s in 0..n {
        let base = s * c * plane;
        for p in 0..plane {
            let t = targets[s * plane + p];
            if Some(t) == ignore_id {
                continue;
            }
            let t = t as usize;
            if t >= c {
                return Err(Error::InvalidArgument(format!("target {t} out of range for {c} classes")));
            }
            let mut max = data[base + p];
            for k in 1..c {
                max = max.max(data[base + k * plane + p]);
            }
            let mut sum = T::zero();
            for k in 0..c {
                let e = (data[base + k * plane + p] - max).exp();
                probs[k] = e;
                sum += e;
            }
            let log_p = (data[base + t * plane + p] - max).as_f64() - sum.as_f64().ln();
            let wt = weights.map_or(1.0, |w| w.as_slice()[t]);
            total += -wt * log_p;
            if let Some(g) = grad.as_mut() {
                let gd = g.data_mut();
                let k_scale = T::from_f64(wt * scale) / sum;
                for k in 0..c {
                    gd[base + k * plane + p] = probs[k] * k_scale;
                }
                gd[base + t * plane + p] = gd[base + t * plane + p] - T::from_f64(wt * scale);
            }
        }
    }
    Ok(LossOutput {
        loss: total * scale,
        valid_pixels: valid,
        grad,
    })
}

pub fn weighted_pixel_ce<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[u8],
    weights: &ClassWeights,
    ignore_id: u8,
) -> Result<f64> {
    Ok(pixel_cross_entropy(logits, targets, Some(weights), Some(ignore_id), false)?.loss)
}
