//! Confusion counts, IoU-family metrics and JSON-lines records.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{EMPTY, UNKNOWN};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `(TP, TP + FP + FN)`.
    pub fn iou_ratio(&self) -> (u64, u64) {
        (self.tp, self.tp + self.fp + self.fn_)
    }

    /// `(TP, TP + FP)`.
    pub fn precision_ratio(&self) -> (u64, u64) {
        (self.tp, self.tp + self.fp)
    }

    /// `(TP, TP + FN)`.
    pub fn recall_ratio(&self) -> (u64, u64) {
        (self.tp, self.tp + self.fn_)
    }
}

/// A ratio with an empty denominator evaluates to 0.
fn ratio((num, den): (u64, u64)) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub classes: Vec<ClassCounts>,
    pub valid: u64,
}

impl ConfusionCounts {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn iou(&self, c: usize) -> f64 {
        ratio(self.classes[c].iou_ratio())
    }

    pub fn precision(&self, c: usize) -> f64 {
        ratio(self.classes[c].precision_ratio())
    }

    pub fn recall(&self, c: usize) -> f64 {
        ratio(self.classes[c].recall_ratio())
    }

    /// Mean IoU over the non-empty classes `1..C`; a class absent from both
    /// prediction and ground truth scores 0 and is still averaged.
    pub fn miou(&self) -> f64 {
        let c = self.num_classes();
        if c < 2 {
            return 0.0;
        }
        (1..c).map(|k| self.iou(k)).sum::<f64>() / (c - 1) as f64
    }

    pub fn per_class_iou(&self) -> Vec<f64> {
        (0..self.num_classes()).map(|c| self.iou(c)).collect()
    }

    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::dim("confusion tables differ in class count"));
        }
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
            a.tn += b.tn;
        }
        self.valid += other.valid;
        Ok(())
    }
}

/// One-vs-rest counts over voxels whose `valid` flag is set and whose
/// ground truth is known.
pub fn confusion(pred: &[u8], gt: &[u8], valid: &[bool], num_classes: usize) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() || gt.len() != valid.len() {
        return Err(Error::dim("prediction, ground truth and mask differ in length"));
    }
    let mut table = vec![vec![0u64; num_classes]; num_classes];
    let mut total = 0u64;
    for v in 0..gt.len() {
        if !valid[v] || gt[v] == UNKNOWN {
            continue;
        }
        let (p, g) = (pred[v] as usize, gt[v] as usize);
        if p >= num_classes || g >= num_classes {
            return Err(Error::index(format!("label {} with {num_classes} classes", p.max(g))));
        }
        table[g][p] += 1;
        total += 1;
    }
    let classes = (0..num_classes)
        .map(|c| {
            let tp = table[c][c];
            let gt_c: u64 = table[c].iter().sum();
            let pred_c: u64 = table.iter().map(|r| r[c]).sum();
            ClassCounts {
                tp,
                fp: pred_c - tp,
                fn_: gt_c - tp,
                tn: total + tp - gt_c - pred_c,
            }
        })
        .collect();
    Ok(ConfusionCounts { classes, valid: total })
}

/// Binary completion counts: class 1 is "occupied" (any non-empty label).
pub fn occupancy_confusion(pred_occupied: &[bool], gt: &[u8], valid: &[bool]) -> Result<ConfusionCounts> {
    let pred: Vec<u8> = pred_occupied.iter().map(|&o| o as u8).collect();
    let gt: Vec<u8> = gt
        .iter()
        .map(|&g| match g {
            UNKNOWN => UNKNOWN,
            EMPTY => 0,
            _ => 1,
        })
        .collect();
    confusion(&pred, &gt, valid, 2)
}

/// One evaluation, serialized as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub split: String,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub miou: f64,
    pub per_class_iou: Vec<f64>,
}

impl MetricRecord {
    /// Completion metrics from `occupancy`, semantic ones from `semantic`
    /// when present (zeros otherwise).
    pub fn new(step: usize, split: &str, occupancy: &ConfusionCounts, semantic: Option<&ConfusionCounts>) -> Self {
        Self {
            step,
            split: split.to_string(),
            iou: occupancy.iou(1),
            precision: occupancy.precision(1),
            recall: occupancy.recall(1),
            miou: semantic.map_or(0.0, ConfusionCounts::miou),
            per_class_iou: semantic.map_or_else(Vec::new, ConfusionCounts::per_class_iou),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric records serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_arithmetic() {
        let c = ClassCounts {
            tp: 3,
            fp: 1,
            fn_: 1,
            tn: 5,
        };
        let t = ConfusionCounts {
            classes: vec![c, c],
            valid: 10,
        };
        assert_eq!(t.iou(1), 0.6);
        assert_eq!(t.precision(1), 0.75);
        assert_eq!(t.recall(1), 0.75);
    }

    #[test]
    fn perfect_and_absent_classes() {
        let gt = [0u8, 1, 2, 2, 1, UNKNOWN];
        let t = confusion(&gt, &gt, &[true; 6], 3).unwrap();
        assert_eq!(t.valid, 5);
        assert_eq!(t.miou(), 1.0);
        assert_eq!(t.iou(2), 1.0);
        let t = confusion(&gt, &gt, &[true; 6], 4).unwrap();
        assert_eq!(t.iou(3), 0.0);
        assert!((t.miou() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn unknown_and_mask_are_excluded() {
        let gt = [1u8, UNKNOWN, 0, 1];
        let pred = [1u8, 1, 1, 0];
        let t = occupancy_confusion(&[true, true, true, false], &gt, &[true, true, false, true]).unwrap();
        assert_eq!(t.valid, 2);
        assert_eq!(t.classes[1], ClassCounts { tp: 1, fp: 0, fn_: 1, tn: 0 });
        let t = confusion(&pred, &gt, &[true; 4], 2).unwrap();
        assert_eq!(t.valid, 3);
        assert!(confusion(&[5], &[0], &[true], 2).is_err());
    }

    #[test]
    fn empty_prediction_has_zero_recall() {
        let gt = [0u8, 1, 2, 1];
        let t = occupancy_confusion(&[false; 4], &gt, &[true; 4]).unwrap();
        assert_eq!(t.recall(1), 0.0);
        assert_eq!(t.iou(1), 0.0);
    }

    #[test]
    fn record_is_one_json_line() {
        let t = occupancy_confusion(&[true, false], &[1, 0], &[true, true]).unwrap();
        let s = confusion(&[1, 0], &[1, 0], &[true, true], 3).unwrap();
        let r = MetricRecord::new(7, "heldout", &t, Some(&s));
        let line = r.to_json_line();
        assert!(!line.contains('\n'));
        let back: MetricRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, r);
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        for key in ["step", "split", "iou", "precision", "recall", "miou", "per_class_iou"] {
            assert!(v.get(key).is_some());
        }
    }
}
