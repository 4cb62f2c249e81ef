//! Confusion matrices, per-class IoU and the Base / Novel / Average /
//! Weighted mIoU aggregation protocol, plus transition-matrix heatmap export.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::ClassPartition;
use crate::tensor::Tensor;

/// K×K pixel counts; rows are ground truth, columns are predictions.
/// Matrices over the same class set form a monoid under addition, so
/// accumulation can be sharded and merged.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Ground-truth pixel count per class.
    pub fn gt_counts(&self) -> Vec<u64> {
        (0..self.k)
            .map(|r| self.counts[r * self.k..(r + 1) * self.k].iter().sum())
            .collect()
    }

    pub fn accumulate(&mut self, pred: &[u16], gt: &[u16], ignore: u16) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!(
                "prediction ({}) and ground truth ({}) lengths differ",
                pred.len(),
                gt.len()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if g >= self.k || p >= self.k {
                return Err(Error::Data(format!(
                    "label out of range: gt {g}, pred {p}, {} classes",
                    self.k
                )));
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.k != other.k {
            return Err(Error::shape(format!(
                "merging {}x{} into {}x{}",
                other.k, other.k, self.k, self.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// IoU per class; `None` when the class appears in neither ground truth nor
/// predictions (empty union).
pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    let k = cm.num_classes();
    (0..k)
        .map(|c| {
            let tp = cm.count(c, c);
            let gt: u64 = (0..k).map(|p| cm.count(c, p)).sum();
            let pred: u64 = (0..k).map(|g| cm.count(g, c)).sum();
            let union = gt + pred - tp;
            if union == 0 {
                None
            } else {
                Some(tp as f64 / union as f64)
            }
        })
        .collect()
}

/// Simple mean over the classes that are present (used for per-epoch traces).
pub fn mean_iou_present(iou: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregateConfig {
    /// Coefficient on base mIoU in the weighted mean.
    pub base_weight: f64,
    /// Coefficient on novel mIoU in the weighted mean.
    pub novel_weight: f64,
    /// Whether the background class joins the base mean.
    pub include_background: bool,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        AggregateConfig {
            base_weight: 0.4,
            novel_weight: 0.6,
            include_background: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub pixel_counts: Vec<u64>,
    pub base_miou: f64,
    pub novel_miou: f64,
    pub average_miou: f64,
    pub weighted_miou: f64,
}

/// Aggregate per-class IoU into the evaluation protocol's four numbers.
///
/// Base mIoU averages the base classes that are present (background joins
/// only when configured). Novel mIoU averages over all novel classes with
/// absent ones counted as zero. The weighted mean applies the configured
/// coefficients.
pub fn aggregate(
    per_class_iou: &[Option<f64>],
    pixel_counts: &[u64],
    partition: ClassPartition,
    cfg: &AggregateConfig,
) -> Result<MetricsReport> {
    if per_class_iou.len() != partition.num_classes() {
        return Err(Error::shape(format!(
            "{} IoU entries for {} classes",
            per_class_iou.len(),
            partition.num_classes()
        )));
    }
    let mut base_values = Vec::new();
    if cfg.include_background {
        if let Some(v) = per_class_iou[partition.background()] {
            base_values.push(v);
        }
    }
    for c in partition.base_classes() {
        if let Some(v) = per_class_iou[c] {
            base_values.push(v);
        }
    }
    let base_miou = if base_values.is_empty() {
        0.0
    } else {
        base_values.iter().sum::<f64>() / base_values.len() as f64
    };

    let novel_sum: f64 = partition
        .novel_classes()
        .map(|c| per_class_iou[c].unwrap_or(0.0))
        .sum();
    let novel_miou = novel_sum / partition.n_novel() as f64;

    Ok(MetricsReport {
        per_class_iou: per_class_iou.to_vec(),
        pixel_counts: pixel_counts.to_vec(),
        base_miou,
        novel_miou,
        average_miou: (base_miou + novel_miou) / 2.0,
        weighted_miou: cfg.base_weight * base_miou + cfg.novel_weight * novel_miou,
    })
}

/// Report computed straight from a confusion matrix.
pub fn report_from_confusion(
    cm: &ConfusionMatrix,
    partition: ClassPartition,
    cfg: &AggregateConfig,
) -> Result<MetricsReport> {
    aggregate(&iou_per_class(cm), &cm.gt_counts(), partition, cfg)
}

/// Flatten a mean transition matrix into `(row_class, col_class, value)`
/// records for tabular export.
pub fn heatmap_rows(mean_transition: &Tensor) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::with_capacity(mean_transition.numel());
    for r in 0..mean_transition.rows() {
        for c in 0..mean_transition.cols() {
            out.push((r, c, mean_transition.get(r, c)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2, 1], &[0, 1, 2, 1], u16::MAX)
            .unwrap();
        for g in 0..3 {
            for p in 0..3 {
                let expected = if g == p {
                    if g == 1 {
                        2
                    } else {
                        1
                    }
                } else {
                    0
                };
                assert_eq!(cm.count(g, p), expected);
            }
        }
    }

    #[test]
    fn all_ignored_is_zero_matrix() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1], &[9, 9], 9).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn toy_counting() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1], u16::MAX)
            .unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(1, 0), 0);
        assert_eq!(cm.count(1, 1), 2);
    }

    #[test]
    fn out_of_range_label_is_data_error() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(
            cm.accumulate(&[5], &[0], u16::MAX),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            cm.accumulate(&[0], &[5], u16::MAX),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn accumulation_is_additive() {
        let pred = [0u16, 1, 0, 1, 1, 0];
        let gt = [0u16, 1, 1, 1, 0, 0];
        let mut whole = ConfusionMatrix::new(2);
        whole.accumulate(&pred, &gt, u16::MAX).unwrap();

        let mut a = ConfusionMatrix::new(2);
        a.accumulate(&pred[..3], &gt[..3], u16::MAX).unwrap();
        let mut b = ConfusionMatrix::new(2);
        b.accumulate(&pred[3..], &gt[3..], u16::MAX).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a, whole);
    }

    #[test]
    fn iou_of_diagonal_matrix_is_one() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2], &[0, 1, 2], u16::MAX).unwrap();
        assert_eq!(iou_per_class(&cm), vec![Some(1.0), Some(1.0), Some(1.0)]);
    }

    #[test]
    fn iou_formula_arithmetic() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1], u16::MAX)
            .unwrap();
        let iou = iou_per_class(&cm);
        assert_close(iou[0].unwrap(), 0.5, 1e-15);
        assert_close(iou[1].unwrap(), 2.0 / 3.0, 1e-15);
    }

    #[test]
    fn absent_class_is_excluded() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1], &[0, 1], u16::MAX).unwrap();
        let iou = iou_per_class(&cm);
        assert_eq!(iou[2], None);
        assert_close(mean_iou_present(&iou), 1.0, 1e-15);
    }

    // Published aggregate pairs: base/novel inputs must reproduce the
    // average and weighted values to within a hundredth.
    #[test]
    fn aggregate_reproduces_reference_pairs() {
        let cases = [
            (37.41, 4.13, 20.77, 17.44),
            (55.46, 21.71, 38.58, 35.21),
            (37.37, 10.19, 23.78, 21.06),
        ];
        let p = ClassPartition::new(1, 1).unwrap();
        let cfg = AggregateConfig::default();
        for (base, novel, average, weighted) in cases {
            let iou = vec![None, Some(base / 100.0), Some(novel / 100.0)];
            let report = aggregate(&iou, &[0, 0, 0], p, &cfg).unwrap();
            assert_close(report.base_miou * 100.0, base, 1e-9);
            assert_close(report.novel_miou * 100.0, novel, 1e-9);
            assert_close(report.average_miou * 100.0, average, 0.01);
            assert_close(report.weighted_miou * 100.0, weighted, 0.01);
        }
    }

    #[test]
    fn aggregate_per_class_reference_table() {
        // Seven base classes and four novel classes; the novel zero entry
        // stays in the novel mean.
        let base = [60.22, 59.32, 35.98, 75.47, 55.06, 40.29, 61.86];
        let novel = [0.44, 39.13, 0.00, 47.28];
        let p = ClassPartition::new(7, 4).unwrap();
        let mut iou = vec![None];
        iou.extend(base.iter().map(|&v| Some(v / 100.0)));
        iou.extend(novel.iter().map(|&v| Some(v / 100.0)));
        let report = aggregate(&iou, &vec![0; 12], p, &AggregateConfig::default()).unwrap();
        assert_close(report.base_miou * 100.0, 55.46, 0.01);
        assert_close(report.novel_miou * 100.0, 21.71, 0.01);
        assert_close(report.average_miou * 100.0, 38.58, 0.01);
        assert_close(report.weighted_miou * 100.0, 35.21, 0.01);
    }

    #[test]
    fn absent_novel_counts_as_zero_in_novel_mean() {
        let p = ClassPartition::new(1, 2).unwrap();
        let iou = vec![Some(1.0), Some(0.8), Some(0.6), None];
        let report = aggregate(&iou, &[0; 4], p, &AggregateConfig::default()).unwrap();
        assert_close(report.novel_miou, 0.3, 1e-15);
    }

    #[test]
    fn weighted_is_convex_combination() {
        let p = ClassPartition::new(1, 1).unwrap();
        let iou = vec![None, Some(0.9), Some(0.2)];
        let report = aggregate(&iou, &[0; 3], p, &AggregateConfig::default()).unwrap();
        let lo = report.base_miou.min(report.novel_miou);
        let hi = report.base_miou.max(report.novel_miou);
        assert!(report.weighted_miou >= lo && report.weighted_miou <= hi);
    }

    #[test]
    fn background_flag_changes_base_mean() {
        let p = ClassPartition::new(1, 1).unwrap();
        let iou = vec![Some(1.0), Some(0.5), Some(0.0)];
        let without = aggregate(&iou, &[0; 3], p, &AggregateConfig::default()).unwrap();
        let with = aggregate(
            &iou,
            &[0; 3],
            p,
            &AggregateConfig {
                include_background: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_close(without.base_miou, 0.5, 1e-15);
        assert_close(with.base_miou, 0.75, 1e-15);
    }

    #[test]
    fn heatmap_rows_cover_all_cells() {
        let t = Tensor::from_rows(&[&[0.7, 0.1], &[0.2, 0.8], &[0.1, 0.1]]).unwrap();
        let rows = heatmap_rows(&t);
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0], (0, 0, 0.7));
        assert_eq!(rows[5], (2, 1, 0.1));
        // column sums of exported values match the matrix
        let col0: f64 = rows
            .iter()
            .filter(|(_, c, _)| *c == 0)
            .map(|(_, _, v)| v)
            .sum();
        assert_close(col0, 1.0, 1e-12);
    }
}
