//! Baseline-versus-ours comparison tables built from metrics reports.

use anyhow::{bail, Result};
use segdebias::metrics::{percent_change, MetricsReport};
use serde::{Deserialize, Serialize};

pub const TABLES_SCHEMA_VERSION: u32 = 1;

/// Per-variant mIoU and loss of both models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub baseline_miou: f64,
    pub ours_miou: f64,
    pub baseline_loss: Option<f64>,
    pub ours_loss: Option<f64>,
    pub miou_percent_change: Option<f64>,
}

/// Per-variant category IoU of both models and the relative change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRows {
    pub variant: String,
    pub baseline: Vec<Option<f64>>,
    pub ours: Vec<Option<f64>>,
    pub percent_change: Vec<Option<f64>>,
    pub baseline_average: Option<f64>,
    pub ours_average: Option<f64>,
    pub average_percent_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTables {
    pub schema_version: u32,
    pub class_names: Vec<String>,
    pub category_names: Vec<String>,
    pub summary: Vec<SummaryRow>,
    pub categories: Vec<CategoryRows>,
}

fn change(baseline: Option<f64>, ours: Option<f64>) -> Option<f64> {
    percent_change(baseline?, ours?).ok()
}

/// Pairs reports by variant. Every baseline needs a matching `ours` report.
pub fn build_tables(baseline: &[MetricsReport], ours: &[MetricsReport]) -> Result<ComparisonTables> {
    if baseline.is_empty() || baseline.len() + ours.len() < 2 {
        bail!("need at least one baseline and one comparison report");
    }
    let first = &baseline[0];
    for r in baseline.iter().chain(ours) {
        if r.class_names != first.class_names || r.category_names != first.category_names {
            bail!(
                "report `{}` has classes {:?}, expected {:?}",
                r.variant,
                r.class_names,
                first.class_names
            );
        }
    }
    if baseline.len() != ours.len() {
        bail!("{} baseline reports but {} comparison reports", baseline.len(), ours.len());
    }
    let mut summary = Vec::new();
    let mut categories = Vec::new();
    for b in baseline {
        let matches: Vec<_> = ours.iter().filter(|o| o.variant == b.variant).collect();
        let o = match matches[..] {
            [o] => o,
            [] => bail!("no comparison report for variant `{}`", b.variant),
            _ => bail!("several comparison reports for variant `{}`", b.variant),
        };
        summary.push(SummaryRow {
            variant: b.variant.clone(),
            baseline_miou: b.miou,
            ours_miou: o.miou,
            baseline_loss: b.loss,
            ours_loss: o.loss,
            miou_percent_change: change(Some(b.miou), Some(o.miou)),
        });
        categories.push(CategoryRows {
            variant: b.variant.clone(),
            percent_change: b.per_category_iou.iter().zip(&o.per_category_iou).map(|(&x, &y)| change(x, y)).collect(),
            baseline: b.per_category_iou.clone(),
            ours: o.per_category_iou.clone(),
            baseline_average: b.category_average,
            ours_average: o.category_average,
            average_percent_change: change(b.category_average, o.category_average),
        });
    }
    Ok(ComparisonTables {
        schema_version: TABLES_SCHEMA_VERSION,
        class_names: first.class_names.clone(),
        category_names: first.category_names.clone(),
        summary,
        categories,
    })
}

fn pct(v: Option<f64>, decimals: usize) -> String {
    v.map_or("n/a".into(), |x| format!("{:.*}", decimals, 100.0 * x))
}

fn signed(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:+.2}%"))
}

/// Formats both cells, bolding whichever is better (both on a tie).
fn pair(a: Option<f64>, b: Option<f64>, higher_is_better: bool, fmt: impl Fn(Option<f64>) -> String) -> [String; 2] {
    let (sa, sb) = (fmt(a), fmt(b));
    let (Some(x), Some(y)) = (a, b) else {
        return [sa, sb];
    };
    let (x, y) = if higher_is_better { (x, y) } else { (-x, -y) };
    let bold = |s: String| format!("**{s}**");
    match x.total_cmp(&y) {
        std::cmp::Ordering::Greater => [bold(sa), sb],
        std::cmp::Ordering::Less => [sa, bold(sb)],
        std::cmp::Ordering::Equal => [bold(sa), bold(sb)],
    }
}

impl ComparisonTables {
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("## mIoU and validation loss\n\n");
        out += "| Variant | Baseline mIoU | Ours mIoU | Baseline loss | Ours loss | mIoU change |\n";
        out += "|---|---|---|---|---|---|\n";
        for r in &self.summary {
            let [bm, om] = pair(Some(r.baseline_miou), Some(r.ours_miou), true, |v| pct(v, 2));
            let loss = |v: Option<f64>| v.map_or("n/a".into(), |x| format!("{x:.3}"));
            let [bl, ol] = pair(r.baseline_loss, r.ours_loss, false, loss);
            out += &format!(
                "| {} | {bm} | {om} | {bl} | {ol} | {} |\n",
                r.variant,
                signed(r.miou_percent_change)
            );
        }

        out += "\n## Category IoU\n\n| Variant | Model |";
        for c in &self.category_names {
            out += &format!(" {c} |");
        }
        out += " Average |\n|---|---|";
        out += &"---|".repeat(self.category_names.len() + 1);
        out += "\n";
        for r in &self.categories {
            let mut base_row = format!("| {} | Baseline |", r.variant);
            let mut ours_row = "| | Ours |".to_string();
            let mut change_row = "| | Ours ±% |".to_string();
            let cells = r
                .baseline
                .iter()
                .zip(&r.ours)
                .zip(&r.percent_change)
                .map(|((&b, &o), &c)| (b, o, c))
                .chain(std::iter::once((r.baseline_average, r.ours_average, r.average_percent_change)));
            for (b, o, c) in cells {
                let [sb, so] = pair(b, o, true, |v| pct(v, 1));
                base_row += &format!(" {sb} |");
                ours_row += &format!(" {so} |");
                change_row += &format!(" {} |", signed(c));
            }
            out += &format!("{base_row}\n{ours_row}\n{change_row}\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use segdebias::metrics::{CategoryMap, ConfusionMatrix};

    fn report(variant: &str, miou_matrix: &[Vec<u64>]) -> MetricsReport {
        let names: Vec<String> = (0..miou_matrix.len()).map(|i| format!("c{i}")).collect();
        let cm = ConfusionMatrix::from_counts(miou_matrix).unwrap();
        let mut r = MetricsReport::from_confusion(&cm, &names, &CategoryMap::identity(&names)).unwrap();
        r.variant = variant.into();
        r
    }

    #[test]
    fn identical_reports_change_nothing() {
        let r = report("rgb", &[vec![5, 1], vec![2, 7]]);
        let t = build_tables(&[r.clone()], &[r]).unwrap();
        assert_eq!(t.summary[0].miou_percent_change, Some(0.0));
        assert!(t.categories[0].percent_change.iter().all(|c| *c == Some(0.0)));
    }

    #[test]
    fn best_value_is_bolded() {
        let mut b = report("rgb", &[vec![5, 1], vec![2, 7]]);
        let mut o = b.clone();
        b.miou = 0.5850;
        o.miou = 0.5880;
        let md = build_tables(&[b], &[o]).unwrap().to_markdown();
        assert!(md.contains("| rgb | 58.50 | **58.80** |"), "{md}");
        assert!(md.contains("+0.51%"), "{md}");
    }

    #[test]
    fn mismatched_classes_are_rejected() {
        let a = report("rgb", &[vec![5, 1], vec![2, 7]]);
        let b = report("rgb", &[vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        assert!(build_tables(&[a.clone()], &[b]).is_err());
        let mut c = a.clone();
        c.variant = "invert".into();
        assert!(build_tables(&[a], &[c]).is_err());
    }
}
