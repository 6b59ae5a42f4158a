//! Confusion-matrix IoU, category aggregation and percent-change comparisons.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Metrics("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix {
            num_classes: c,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.num_classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one pixel per non-ignored position: `counts[gt][pred] += 1`.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8], ignore_id: u8) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore_id {
                continue;
            }
            if g as usize >= c || p as usize >= c {
                return Err(Error::Metrics(format!(
                    "class id out of range for {c} classes (gt {g}, pred {p})"
                )));
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Metrics("cannot merge confusion matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Sums rows and columns of classes that share a group into a smaller matrix.
    pub fn collapse(&self, group_of: &[usize], num_groups: usize) -> Result<ConfusionMatrix> {
        if group_of.len() != self.num_classes || group_of.iter().any(|&g| g >= num_groups) {
            return Err(Error::Metrics("group assignment does not cover the classes".into()));
        }
        let mut out = ConfusionMatrix::new(num_groups);
        for gt in 0..self.num_classes {
            for pred in 0..self.num_classes {
                out.counts[group_of[gt] * num_groups + group_of[pred]] += self.get(gt, pred);
            }
        }
        Ok(out)
    }
}

pub fn confusion_accumulate(
    mut cm: ConfusionMatrix,
    pred_mask: &[u8],
    gt_mask: &[u8],
    ignore_id: u8,
) -> Result<ConfusionMatrix> {
    cm.accumulate(pred_mask, gt_mask, ignore_id)?;
    Ok(cm)
}

/// `TP / (row + col - TP)` per class; `None` where the class is absent from
/// both ground truth and prediction.
pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    let c = cm.num_classes;
    (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let row: u64 = (0..c).map(|j| cm.get(k, j)).sum();
            let col: u64 = (0..c).map(|i| cm.get(i, k)).sum();
            let denom = row + col - tp;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect()
}

/// Mean of the defined entries.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

pub fn mean_iou(cm: &ConfusionMatrix) -> Result<f64> {
    mean_defined(&iou_per_class(cm))
        .ok_or_else(|| Error::Metrics("no class has a defined IoU (empty confusion matrix)".into()))
}

/// Total assignment of classes to named categories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryMap {
    categories: Vec<String>,
    class_to_category: Vec<usize>,
}

pub const CITYSCAPES_CATEGORIES: [&str; 7] =
    ["flat", "construction", "object", "nature", "sky", "human", "vehicle"];

impl CategoryMap {
    pub fn new(categories: Vec<String>, class_to_category: Vec<usize>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Metrics("category map needs at least one category".into()));
        }
        if let Some(bad) = class_to_category.iter().find(|&&c| c >= categories.len()) {
            return Err(Error::Metrics(format!("category index {bad} out of range")));
        }
        Ok(CategoryMap {
            categories,
            class_to_category,
        })
    }

    /// Builds a map from `(class, category name)` pairs; categories keep first-seen order.
    pub fn from_names(assignments: &[&str]) -> Self {
        let mut categories: Vec<String> = Vec::new();
        let class_to_category = assignments
            .iter()
            .map(|name| match categories.iter().position(|c| c == name) {
                Some(i) => i,
                None => {
                    categories.push((*name).to_string());
                    categories.len() - 1
                }
            })
            .collect();
        CategoryMap {
            categories,
            class_to_category,
        }
    }

    /// Every class is its own category, named after the class.
    pub fn identity(class_names: &[String]) -> Self {
        CategoryMap {
            categories: class_names.to_vec(),
            class_to_category: (0..class_names.len()).collect(),
        }
    }

    /// The seven Cityscapes categories over the 19 train IDs.
    pub fn cityscapes() -> Self {
        let of = [0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 4, 5, 5, 6, 6, 6, 6, 6, 6];
        CategoryMap {
            categories: CITYSCAPES_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            class_to_category: of.to_vec(),
        }
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn num_classes(&self) -> usize {
        self.class_to_category.len()
    }

    pub fn category_of(&self, class: usize) -> Option<&str> {
        self.class_to_category.get(class).map(|&c| self.categories[c].as_str())
    }

    pub fn assignment(&self) -> &[usize] {
        &self.class_to_category
    }

    pub fn validate_for(&self, num_classes: usize) -> Result<()> {
        if self.class_to_category.len() != num_classes {
            return Err(Error::Metrics(format!(
                "category map covers {} classes, expected {num_classes}",
                self.class_to_category.len()
            )));
        }
        Ok(())
    }
}

/// IoU of each category after merging member classes in the confusion matrix.
pub fn category_iou(cm: &ConfusionMatrix, map: &CategoryMap) -> Result<Vec<Option<f64>>> {
    map.validate_for(cm.num_classes())?;
    let collapsed = cm.collapse(map.assignment(), map.categories().len())?;
    Ok(iou_per_class(&collapsed))
}

/// Relative change `100 * (ours - baseline) / baseline`.
pub fn percent_change(baseline: f64, ours: f64) -> Result<f64> {
    if baseline == 0.0 || !baseline.is_finite() || !ours.is_finite() {
        return Err(Error::Metrics(format!(
            "percent change undefined for baseline {baseline}, ours {ours}"
        )));
    }
    Ok(100.0 * (ours - baseline) / baseline)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub variant: String,
    pub metric: String,
    pub baseline: f64,
    pub ours: f64,
    pub percent_change: f64,
}

impl Comparison {
    pub fn new(variant: impl Into<String>, metric: impl Into<String>, baseline: f64, ours: f64) -> Result<Self> {
        Ok(Comparison {
            variant: variant.into(),
            metric: metric.into(),
            baseline,
            ours,
            percent_change: percent_change(baseline, ours)?,
        })
    }
}

/// Evaluation of one model on one dataset variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub variant: String,
    pub scheme: String,
    pub dataset: String,
    pub checkpoint: String,
    pub class_names: Vec<String>,
    /// `null` where the class is absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub excluded_classes: Vec<String>,
    pub miou: f64,
    pub category_names: Vec<String>,
    pub per_category_iou: Vec<Option<f64>>,
    pub excluded_categories: Vec<String>,
    pub category_average: Option<f64>,
    /// Mean weighted cross-entropy; absent for segmenters without logits.
    pub loss: Option<f64>,
    pub num_images: usize,
    pub num_pixels: u64,
    pub confusion: Vec<Vec<u64>>,
    pub comparisons: Vec<Comparison>,
}

impl MetricsReport {
    pub fn from_confusion(
        cm: &ConfusionMatrix,
        class_names: &[String],
        categories: &CategoryMap,
    ) -> Result<Self> {
        if class_names.len() != cm.num_classes() {
            return Err(Error::Metrics(format!(
                "{} class names for a {}-class confusion matrix",
                class_names.len(),
                cm.num_classes()
            )));
        }
        let per_class_iou = iou_per_class(cm);
        let per_category_iou = category_iou(cm, categories)?;
        let excluded = |names: &[String], vals: &[Option<f64>]| {
            names
                .iter()
                .zip(vals)
                .filter(|(_, v)| v.is_none())
                .map(|(n, _)| n.clone())
                .collect::<Vec<_>>()
        };
        Ok(MetricsReport {
            schema_version: REPORT_SCHEMA_VERSION,
            variant: String::new(),
            scheme: String::new(),
            dataset: String::new(),
            checkpoint: String::new(),
            class_names: class_names.to_vec(),
            excluded_classes: excluded(class_names, &per_class_iou),
            miou: mean_iou(cm)?,
            category_names: categories.categories().to_vec(),
            excluded_categories: excluded(categories.categories(), &per_category_iou),
            category_average: mean_defined(&per_category_iou),
            per_class_iou,
            per_category_iou,
            loss: None,
            num_images: 0,
            num_pixels: cm.total(),
            confusion: cm.rows(),
            comparisons: Vec::new(),
        })
    }

    pub fn confusion_matrix(&self) -> Result<ConfusionMatrix> {
        ConfusionMatrix::from_counts(&self.confusion)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: MetricsReport = serde_json::from_str(text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Metrics(format!(
                "unsupported report schema version {}",
                report.schema_version
            )));
        }
        Ok(report)
    }

    /// Per-class and per-category IoU tables in percent.
    pub fn to_markdown(&self) -> String {
        let fmt = |v: &Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut out = format!(
            "## {} ({})\n\nmIoU: {:.2}%",
            if self.variant.is_empty() { "report" } else { &self.variant },
            if self.scheme.is_empty() { "unknown scheme" } else { &self.scheme },
            100.0 * self.miou
        );
        if let Some(loss) = self.loss {
            out.push_str(&format!("  \nloss: {loss:.3}"));
        }
        out.push_str("\n\n| Class | IoU (%) |\n|---|---|\n");
        for (name, v) in self.class_names.iter().zip(&self.per_class_iou) {
            out.push_str(&format!("| {name} | {} |\n", fmt(v)));
        }
        out.push_str("\n| Category | IoU (%) |\n|---|---|\n");
        for (name, v) in self.category_names.iter().zip(&self.per_category_iou) {
            out.push_str(&format!("| {name} | {} |\n", fmt(v)));
        }
        out.push_str(&format!("| Average | {} |\n", fmt(&self.category_average)));
        if !self.comparisons.is_empty() {
            out.push_str("\n| Comparison | Metric | Reference | This | Change (%) |\n|---|---|---|---|---|\n");
            for c in &self.comparisons {
                out.push_str(&format!(
                    "| {} | {} | {:.4} | {:.4} | {:+.2} |\n",
                    c.variant, c.metric, c.baseline, c.ours, c.percent_change
                ));
            }
        }
        out
    }
}

/// Counts per class, ignoring `ignore_id`.
pub fn class_histogram(mask: &[u8], ignore_id: u8) -> BTreeMap<u8, u64> {
    let mut h = BTreeMap::new();
    for &v in mask {
        if v != ignore_id {
            *h.entry(v).or_insert(0) += 1;
        }
    }
    h
}
