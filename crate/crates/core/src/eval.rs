//! Segmentation metrics and label statistics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::LabelArray;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prediction has {pred} labels, ground truth has {gt}")]
    Length { pred: usize, gt: usize },
    #[error("every ground-truth label is IGNORE")]
    AllIgnored,
    #[error("{what} label {value} at point {index} is not below {num_classes} classes")]
    OutOfRange {
        what: &'static str,
        index: usize,
        value: u32,
        num_classes: usize,
    },
    #[error("num_classes must be at least 1")]
    NoClasses,
}

/// Rows are ground truth, columns predictions. Points whose gt is IGNORE are
/// not counted; points with a gt label but no prediction go to `unpredicted`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    unpredicted: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn compute(pred: &LabelArray, gt: &LabelArray, num_classes: usize) -> Result<Self, EvalError> {
        if num_classes == 0 {
            return Err(EvalError::NoClasses);
        }
        if pred.len() != gt.len() {
            return Err(EvalError::Length {
                pred: pred.len(),
                gt: gt.len(),
            });
        }
        let check = |what, index, value: u32| {
            if value as usize >= num_classes {
                Err(EvalError::OutOfRange {
                    what,
                    index,
                    value,
                    num_classes,
                })
            } else {
                Ok(value as usize)
            }
        };
        let mut m = Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            unpredicted: vec![0; num_classes],
        };
        for (i, (p, g)) in pred.iter().zip(gt.iter()).enumerate() {
            let Some(g) = g else { continue };
            let g = check("ground-truth", i, g)?;
            match p {
                Some(p) => m.counts[g * num_classes + check("predicted", i, p)?] += 1,
                None => m.unpredicted[g] += 1,
            }
        }
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn unpredicted(&self, gt: usize) -> u64 {
        self.unpredicted[gt]
    }

    /// Number of evaluated points.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.unpredicted.iter().sum::<u64>()
    }

    /// `(tp, fp, fn)` for class `c`.
    pub fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let n = self.num_classes;
        let tp = self.get(c, c);
        let fp = (0..n).map(|g| self.get(g, c)).sum::<u64>() - tp;
        let row = (0..n).map(|p| self.get(c, p)).sum::<u64>();
        let fn_ = row - tp + self.unpredicted[c];
        (tp, fp, fn_)
    }

    /// Per-class IoU, `None` for classes with an empty union.
    pub fn ious(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let (tp, fp, fn_) = self.class_counts(c);
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub evaluated: u64,
}

/// Mean IoU over classes present in gt or prediction.
pub fn miou(pred: &LabelArray, gt: &LabelArray, num_classes: usize) -> Result<MiouReport, EvalError> {
    let cm = ConfusionMatrix::compute(pred, gt, num_classes)?;
    if cm.total() == 0 {
        return Err(EvalError::AllIgnored);
    }
    let per_class = cm.ious();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MiouReport {
        miou,
        per_class,
        evaluated: cm.total(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    /// Non-IGNORE labels.
    pub count: usize,
    /// Labels that also have a ground-truth label.
    pub evaluated: usize,
    /// Fraction of evaluated labels equal to gt; 0 when nothing is evaluated.
    pub accuracy: f64,
}

pub fn label_stats(labels: &LabelArray, gt: &LabelArray) -> Result<LabelStats, EvalError> {
    if labels.len() != gt.len() {
        return Err(EvalError::Length {
            pred: labels.len(),
            gt: gt.len(),
        });
    }
    let mut evaluated = 0;
    let mut correct = 0;
    for (l, g) in labels.iter().zip(gt.iter()) {
        if let (Some(l), Some(g)) = (l, g) {
            evaluated += 1;
            correct += usize::from(l == g);
        }
    }
    Ok(LabelStats {
        count: labels.count(),
        evaluated,
        accuracy: if evaluated == 0 {
            0.0
        } else {
            correct as f64 / evaluated as f64
        },
    })
}

/// Means across scenes, in the shape of an "average number and accuracy of
/// labels" table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanLabelStats {
    pub scenes: usize,
    pub mean_count: f64,
    pub mean_accuracy: f64,
}

pub fn mean_label_stats(stats: &[LabelStats]) -> MeanLabelStats {
    let n = stats.len();
    let mean = |f: &dyn Fn(&LabelStats) -> f64| {
        if n == 0 {
            0.0
        } else {
            stats.iter().map(f).sum::<f64>() / n as f64
        }
    };
    MeanLabelStats {
        scenes: n,
        mean_count: mean(&|s| s.count as f64),
        mean_accuracy: mean(&|s| s.accuracy),
    }
}

/// One row of an η sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaRow {
    pub eta: f64,
    pub reliable_masks: usize,
    pub count: usize,
    pub accuracy: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[i64]) -> LabelArray {
        v.iter().map(|&x| (x >= 0).then_some(x as u32)).collect()
    }

    #[test]
    fn identical_is_one() {
        let g = labels(&[0, 1, 2, 2, -1]);
        assert_eq!(miou(&g, &g, 3).unwrap().miou, 1.0);
    }

    #[test]
    fn hand_confusion() {
        let r = miou(&labels(&[0, 1, 1, 1]), &labels(&[0, 0, 1, 1]), 2).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_excluded() {
        let g = labels(&[0, 1, 1]);
        let r = miou(&g, &g, 3).unwrap();
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn unpredicted_points_are_false_negatives() {
        let r = miou(&labels(&[0, -1]), &labels(&[0, 0]), 1).unwrap();
        assert_eq!(r.miou, 0.5);
    }

    #[test]
    fn errors() {
        assert_eq!(
            miou(&labels(&[0]), &labels(&[-1]), 2).unwrap_err(),
            EvalError::AllIgnored
        );
        assert!(matches!(
            miou(&labels(&[0]), &labels(&[0, 1]), 2),
            Err(EvalError::Length { .. })
        ));
        assert!(matches!(
            miou(&labels(&[3]), &labels(&[0]), 2),
            Err(EvalError::OutOfRange { .. })
        ));
    }

    #[test]
    fn stats_examples() {
        let gt = labels(&[0; 12]);
        let mut l = vec![0i64; 7];
        l.extend([1, 1, 1, -1, -1]);
        let s = label_stats(&labels(&l), &gt).unwrap();
        assert_eq!((s.count, s.evaluated), (10, 10));
        assert!((s.accuracy - 0.7).abs() < 1e-15);
        let s = label_stats(&gt, &gt).unwrap();
        assert_eq!((s.count, s.accuracy), (12, 1.0));
        let s = label_stats(&labels(&[-1, -1]), &labels(&[0, 1])).unwrap();
        assert_eq!((s.count, s.accuracy), (0, 0.0));
    }

    #[test]
    fn means() {
        let a = LabelStats {
            count: 10,
            evaluated: 10,
            accuracy: 1.0,
        };
        let b = LabelStats {
            count: 20,
            evaluated: 20,
            accuracy: 0.5,
        };
        let m = mean_label_stats(&[a, b]);
        assert_eq!((m.mean_count, m.mean_accuracy), (15.0, 0.75));
        assert_eq!(mean_label_stats(&[]).mean_count, 0.0);
    }
}
