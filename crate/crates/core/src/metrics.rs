//! Confusion-matrix evaluation: per-class IoU, mIoU, tail-mIoU, recall.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Real;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction and ground-truth lengths differ: {pred} vs {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("{which} label {label} at index {index} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        which: &'static str,
        index: usize,
        label: u32,
        num_classes: usize,
    },
    #[error("tail class {class} is out of range for {num_classes} classes")]
    InvalidTailClass { class: usize, num_classes: usize },
    #[error("every class is absent from both prediction and ground truth")]
    AllClassesUndefined,
    #[error("cannot merge confusion matrices with {left} and {right} classes")]
    ClassCountMismatch { left: usize, right: usize },
}

/// Rows are ground truth, columns are prediction; counts are instances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    cells: Vec<u64>,
    ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            cells: vec![0; num_classes * num_classes],
            ignored: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn cell(&self, gt: usize, pred: usize) -> u64 {
        self.cells[gt * self.num_classes + pred]
    }

    pub fn ignored(&self) -> u64 {
        self.ignored
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().sum::<u64>() + self.ignored
    }

    pub fn merge(&mut self, other: &Self) -> Result<(), MetricsError> {
        if self.num_classes != other.num_classes {
            return Err(MetricsError::ClassCountMismatch {
                left: self.num_classes,
                right: other.num_classes,
            });
        }
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }
}

/// Tally `cells[gt][pred]`; ground-truth ignore entries are excluded.
pub fn confusion(
    pred: &[u32],
    gt: &[u32],
    num_classes: usize,
    ignore_index: u32,
) -> Result<ConfusionMatrix, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (index, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if g == ignore_index {
            cm.ignored += 1;
            continue;
        }
        if g as usize >= num_classes {
            return Err(MetricsError::LabelOutOfRange {
                which: "ground-truth",
                index,
                label: g,
                num_classes,
            });
        }
        if p as usize >= num_classes {
            return Err(MetricsError::LabelOutOfRange {
                which: "prediction",
                index,
                label: p,
                num_classes,
            });
        }
        cm.cells[g as usize * num_classes + p as usize] += 1;
    }
    Ok(cm)
}

/// Evaluation summary; classes absent from both axes carry no IoU and are
/// listed in `absent_classes` instead of polluting the means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport<T> {
    pub per_class_iou: Vec<Option<T>>,
    pub per_class_recall: Vec<Option<T>>,
    pub miou: T,
    pub tail_miou: Option<T>,
    pub tail_classes: Vec<usize>,
    pub absent_classes: Vec<usize>,
}

/// Per-class IoU `TP / (TP + FP + FN)` plus means over all and tail classes.
pub fn iou_report<T: Real>(
    cm: &ConfusionMatrix,
    tail_classes: &[usize],
) -> Result<MetricsReport<T>, MetricsError> {
    let c = cm.num_classes();
    for &t in tail_classes {
        if t >= c {
            return Err(MetricsError::InvalidTailClass {
                class: t,
                num_classes: c,
            });
        }
    }
    let mut per_class_iou = Vec::with_capacity(c);
    let mut per_class_recall = Vec::with_capacity(c);
    let mut absent_classes = Vec::new();
    for k in 0..c {
        let tp = cm.cell(k, k);
        let row: u64 = (0..c).map(|j| cm.cell(k, j)).sum();
        let col: u64 = (0..c).map(|i| cm.cell(i, k)).sum();
        let denom = row + col - tp;
        if denom == 0 {
            per_class_iou.push(None);
            absent_classes.push(k);
        } else {
            per_class_iou.push(Some(T::from_count(tp) / T::from_count(denom)));
        }
        per_class_recall.push(if row == 0 {
            None
        } else {
            Some(T::from_count(tp) / T::from_count(row))
        });
    }
    let defined: Vec<T> = per_class_iou.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(MetricsError::AllClassesUndefined);
    }
    let miou = defined.iter().fold(T::zero(), |a, &b| a + b) / T::from_len(defined.len());
    let tail: Vec<T> = tail_classes
        .iter()
        .filter_map(|&k| per_class_iou[k])
        .collect();
    let tail_miou = if tail.is_empty() {
        None
    } else {
        Some(tail.iter().fold(T::zero(), |a, &b| a + b) / T::from_len(tail.len()))
    };
    Ok(MetricsReport {
        per_class_iou,
        per_class_recall,
        miou,
        tail_miou,
        tail_classes: tail_classes.to_vec(),
        absent_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_direct_tally() {
        let cm = confusion(&[0, 1, 1], &[0, 1, 0], 2, 255).unwrap();
        assert_eq!(cm.cell(0, 0), 1);
        assert_eq!(cm.cell(0, 1), 1);
        assert_eq!(cm.cell(1, 0), 0);
        assert_eq!(cm.cell(1, 1), 1);
    }

    #[test]
    fn confusion_all_ignored() {
        let cm = confusion(&[0, 1], &[255, 255], 2, 255).unwrap();
        assert_eq!(cm.ignored(), 2);
        assert_eq!(cm.total(), 2);
        assert!((0..2).all(|g| (0..2).all(|p| cm.cell(g, p) == 0)));
    }

    #[test]
    fn confusion_perfect_prediction_is_diagonal() {
        let cm = confusion(&[0, 1, 2, 2], &[0, 1, 2, 2], 3, 255).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.cell(g, p), if g == p { [1, 1, 2][g] } else { 0 });
            }
        }
        let report: MetricsReport<f64> = iou_report(&cm, &[2]).unwrap();
        assert_eq!(report.miou, 1.0);
        assert_eq!(report.tail_miou, Some(1.0));
    }

    #[test]
    fn confusion_rejects_length_mismatch() {
        assert_eq!(
            confusion(&[0], &[0, 1], 2, 255).unwrap_err(),
            MetricsError::LengthMismatch { pred: 1, gt: 2 }
        );
    }

    #[test]
    fn iou_hand_enumerated() {
        // cells [[1,1],[0,1]]: class 0 has TP=1 FP=0 FN=1, class 1 TP=1 FP=1 FN=0.
        let cm = confusion(&[0, 1, 1], &[0, 1, 0], 2, 255).unwrap();
        let report: MetricsReport<f64> = iou_report(&cm, &[1]).unwrap();
        assert_eq!(report.per_class_iou, vec![Some(0.5), Some(0.5)]);
        assert_eq!(report.miou, 0.5);
        assert_eq!(report.tail_miou, Some(0.5));
        assert_eq!(report.per_class_recall, vec![Some(0.5), Some(1.0)]);
    }

    #[test]
    fn absent_class_is_flagged_and_excluded() {
        let cm = confusion(&[0, 0], &[0, 0], 3, 255).unwrap();
        let report: MetricsReport<f64> = iou_report(&cm, &[2]).unwrap();
        assert_eq!(report.per_class_iou[1], None);
        assert_eq!(report.absent_classes, vec![1, 2]);
        assert_eq!(report.miou, 1.0);
        assert_eq!(report.tail_miou, None);
    }

    #[test]
    fn every_class_undefined_is_degenerate() {
        let cm = ConfusionMatrix::new(2);
        assert_eq!(
            iou_report::<f64>(&cm, &[]).unwrap_err(),
            MetricsError::AllClassesUndefined
        );
    }

    #[test]
    fn merge_matches_concatenation() {
        let a = confusion(&[0, 1], &[0, 0], 2, 255).unwrap();
        let b = confusion(&[1, 1], &[1, 0], 2, 255).unwrap();
        let whole = confusion(&[0, 1, 1, 1], &[0, 0, 1, 0], 2, 255).unwrap();
        let mut merged = a.clone();
        merged.merge(&b).unwrap();
        assert_eq!(merged, whole);
    }
}
