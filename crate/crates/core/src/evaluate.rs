//! Running a segmenter over a dataset and turning the result into a report.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::datasets::Sample;
use crate::error::{Error, Result};
use crate::metrics::{mean_iou, CategoryMap, ConfusionMatrix, MetricsReport};
use crate::model::SegmentationModel;
use crate::training::{pixel_cross_entropy, Checkpoint, ClassWeights};
use crate::transforms::Normalization;

/// Anything that maps an image to one class id per pixel (row-major).
pub trait Segmenter {
    fn num_classes(&self) -> usize;

    fn predict(&self, image: &RgbImage) -> Result<Vec<u8>>;

    /// Summed loss and scored pixel count for one sample, if the segmenter has logits.
    fn loss(&self, _sample: &Sample, _ignore_id: u8) -> Result<Option<(f64, usize)>> {
        Ok(None)
    }
}

/// A trained network together with the input normalisation it was trained with.
pub struct ModelSegmenter {
    model: SegmentationModel<f32>,
    normalization: Normalization,
    weights: Option<ClassWeights>,
}

impl ModelSegmenter {
    pub fn new(model: SegmentationModel<f32>, normalization: Normalization, weights: Option<ClassWeights>) -> Self {
        ModelSegmenter {
            model,
            normalization,
            weights,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self::new(
            ckpt.model()?,
            ckpt.header.config.normalization,
            Some(ckpt.header.class_weights.clone()),
        ))
    }

    pub fn model(&self) -> &SegmentationModel<f32> {
        &self.model
    }
}

impl Segmenter for ModelSegmenter {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn predict(&self, image: &RgbImage) -> Result<Vec<u8>> {
        let x = self.normalization.apply::<f32>(image)?;
        let logits = self.model.segment(&x)?;
        Ok(logits.argmax_channels().into_iter().map(|c| c as u8).collect())
    }

    fn loss(&self, sample: &Sample, ignore_id: u8) -> Result<Option<(f64, usize)>> {
        let targets = sample.mask.as_raw();
        if targets.iter().all(|&t| t == ignore_id) {
            return Ok(Some((0.0, 0)));
        }
        let x = self.normalization.apply::<f32>(&sample.image)?;
        let logits = self.model.segment(&x)?;
        let out = pixel_cross_entropy(&logits, targets, self.weights.as_ref(), Some(ignore_id), false)?;
        Ok(Some((out.loss * out.valid_pixels as f64, out.valid_pixels)))
    }
}

/// mIoU of a single image; `None` when no class is present in either mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub per_image: Vec<ImageScore>,
    /// Predictions in sample order.
    pub predictions: Vec<Vec<u8>>,
}

impl Evaluation {
    /// Indices of the `n` lowest-scoring images, ties broken by sample order.
    /// Images without a defined score come last.
    pub fn worst(&self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.per_image.len()).collect();
        idx.sort_by(|&a, &b| {
            let key = |i: usize| self.per_image[i].miou.unwrap_or(f64::INFINITY);
            key(a).total_cmp(&key(b)).then(a.cmp(&b))
        });
        idx.truncate(n);
        idx
    }
}

/// Scores every sample, accumulating one confusion matrix over the dataset.
pub fn evaluate_dataset(
    segmenter: &dyn Segmenter,
    samples: &[Sample],
    class_names: &[String],
    categories: &CategoryMap,
    ignore_id: u8,
) -> Result<Evaluation> {
    let c = class_names.len();
    if segmenter.num_classes() != c {
        return Err(Error::InvalidArgument(format!(
            "segmenter predicts {} classes but the dataset has {c}",
            segmenter.num_classes()
        )));
    }
    if samples.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    let mut total = ConfusionMatrix::new(c);
    let mut per_image = Vec::with_capacity(samples.len());
    let mut predictions = Vec::with_capacity(samples.len());
    let (mut loss_sum, mut loss_px, mut has_loss) = (0.0f64, 0usize, true);
    for s in samples {
        s.validate(c, ignore_id)?;
        let pred = segmenter.predict(&s.image)?;
        let mut cm = ConfusionMatrix::new(c);
        cm.accumulate(&pred, s.mask.as_raw(), ignore_id)?;
        total.merge(&cm)?;
        per_image.push(ImageScore {
            id: s.id.clone(),
            miou: mean_iou(&cm).ok(),
        });
        predictions.push(pred);
        match segmenter.loss(s, ignore_id)? {
            Some((sum, px)) => {
                loss_sum += sum;
                loss_px += px;
            }
            None => has_loss = false,
        }
    }
    let mut report = MetricsReport::from_confusion(&total, class_names, categories)?;
    report.num_images = samples.len();
    report.loss = (has_loss && loss_px > 0).then(|| loss_sum / loss_px as f64);
    Ok(Evaluation {
        report,
        per_image,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::GrayImage;

    struct Fixed(Vec<u8>);

    impl Segmenter for Fixed {
        fn num_classes(&self) -> usize {
            2
        }

        fn predict(&self, _image: &RgbImage) -> Result<Vec<u8>> {
            Ok(self.0.clone())
        }
    }

    fn sample(id: &str, mask: Vec<u8>) -> Sample {
        Sample {
            id: id.into(),
            image: RgbImage::new(2, 2),
            mask: GrayImage::from_raw(2, 2, mask).unwrap(),
        }
    }

    #[test]
    fn per_image_scores_and_worst_ordering() {
        let names = vec!["a".to_string(), "b".to_string()];
        let cats = CategoryMap::identity(&names);
        let seg = Fixed(vec![0, 0, 1, 1]);
        let samples = [sample("good", vec![0, 0, 1, 1]), sample("bad", vec![1, 1, 0, 0])];
        let ev = evaluate_dataset(&seg, &samples, &names, &cats, 255).unwrap();
        assert_eq!(ev.per_image[0].miou, Some(1.0));
        assert_eq!(ev.per_image[1].miou, Some(0.0));
        assert_eq!(ev.worst(1), vec![1]);
        assert_eq!(ev.report.num_images, 2);
        assert_eq!(ev.report.loss, None);
        assert!((ev.report.miou - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let cats = CategoryMap::identity(&names);
        let err = evaluate_dataset(&Fixed(vec![0; 4]), &[sample("x", vec![0; 4])], &names, &cats, 255);
        assert!(err.is_err());
    }
}
