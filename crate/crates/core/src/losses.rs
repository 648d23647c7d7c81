//! Loss kernels over class probabilities with analytic gradients.
//!
//! All kernels take probabilities (not logits) and reduce by the mean over
//! participating points. Gradients are with respect to the probability
//! entries treated as free variables.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reliability::{PredictionStack, ReliabilitySplit};
use crate::scene::LabelArray;

/// Floor applied inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// Value substituted for `log 0` in the reverse cross-entropy.
pub const DEFAULT_LOG_ZERO: f64 = -4.0;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("no annotated points to average over")]
    NoLabels,
    #[error("selection is empty")]
    EmptySelection,
    #[error("{what}: expected {expected:?}, found {found:?}")]
    Shape {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("label {label} at point {index} is not below {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: u32,
        num_classes: usize,
    },
    #[error("loss weights must be finite and non-negative")]
    BadWeights,
}

/// Mean loss over participating points and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss {
    pub value: f64,
    pub grad: Array2<f64>,
    /// Points that contributed.
    pub count: usize,
}

impl Loss {
    fn zero(shape: (usize, usize)) -> Self {
        Self {
            value: 0.0,
            grad: Array2::zeros(shape),
            count: 0,
        }
    }
}

fn log_floor(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// d/dp of `log_floor(p)`.
fn dlog_floor(p: f64) -> f64 {
    if p > PROB_FLOOR {
        1.0 / p
    } else {
        0.0
    }
}

/// Annotated `(point, class)` pairs, checked against the prediction shape.
fn labelled(labels: &LabelArray, p: &ArrayView2<f64>) -> Result<Vec<(usize, usize)>, LossError> {
    let (n, c) = p.dim();
    if labels.len() != n {
        return Err(LossError::Shape {
            what: "labels vs predictions",
            expected: (n, c),
            found: (labels.len(), c),
        });
    }
    labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|l| (i, l)))
        .map(|(index, label)| {
            if label as usize >= c {
                Err(LossError::LabelOutOfRange {
                    index,
                    label,
                    num_classes: c,
                })
            } else {
                Ok((index, label as usize))
            }
        })
        .collect()
}

/// Cross-entropy `-log P[i, y_i]` averaged over annotated points.
pub fn ce(labels: &LabelArray, p: ArrayView2<f64>) -> Result<Loss, LossError> {
    let pts = labelled(labels, &p)?;
    if pts.is_empty() {
        return Err(LossError::NoLabels);
    }
    let inv = 1.0 / pts.len() as f64;
    let mut loss = Loss::zero(p.dim());
    for &(i, y) in &pts {
        let py = p[(i, y)];
        loss.value -= log_floor(py);
        loss.grad[(i, y)] = -inv * dlog_floor(py);
    }
    loss.value *= inv;
    loss.count = pts.len();
    Ok(loss)
}

/// `Σ_c Q log(Q / P)` averaged over selected points; `Q` is a constant target.
pub fn kl(q: ArrayView2<f64>, p: ArrayView2<f64>, select: &[bool]) -> Result<Loss, LossError> {
    if q.dim() != p.dim() {
        return Err(LossError::Shape {
            what: "targets vs predictions",
            expected: p.dim(),
            found: q.dim(),
        });
    }
    if select.len() != p.nrows() {
        return Err(LossError::Shape {
            what: "selection vs predictions",
            expected: p.dim(),
            found: (select.len(), p.ncols()),
        });
    }
    let count = select.iter().filter(|s| **s).count();
    if count == 0 {
        return Err(LossError::EmptySelection);
    }
    let inv = 1.0 / count as f64;
    let mut loss = Loss::zero(p.dim());
    for i in (0..p.nrows()).filter(|&i| select[i]) {
        for k in 0..p.ncols() {
            let (qk, pk) = (q[(i, k)], p[(i, k)]);
            if qk > 0.0 {
                loss.value += qk * (log_floor(qk) - log_floor(pk));
                loss.grad[(i, k)] = -inv * qk * dlog_floor(pk);
            }
        }
    }
    loss.value *= inv;
    loss.count = count;
    Ok(loss)
}

/// Normalized cross-entropy `-log P[y] / -Σ_j log P[j]` averaged over
/// annotated points.
pub fn nce(labels: &LabelArray, p: ArrayView2<f64>) -> Result<Loss, LossError> {
    let pts = labelled(labels, &p)?;
    if pts.is_empty() {
        return Err(LossError::NoLabels);
    }
    let inv = 1.0 / pts.len() as f64;
    let mut loss = Loss::zero(p.dim());
    for &(i, y) in &pts {
        let row = p.row(i);
        let num = -log_floor(row[y]);
        let den: f64 = -row.iter().map(|&v| log_floor(v)).sum::<f64>();
        if den == 0.0 {
            continue;
        }
        loss.value += num / den;
        let den2 = den * den;
        for (k, &pk) in row.iter().enumerate() {
            let g = dlog_floor(pk);
            let dnum = if k == y { -g } else { 0.0 };
            loss.grad[(i, k)] = inv * (dnum * den + num * g) / den2;
        }
    }
    loss.value *= inv;
    loss.count = pts.len();
    Ok(loss)
}

/// Reverse cross-entropy `-Σ_k P[k] log q(k)` against the one-hot label,
/// with `log 0` replaced by `log_zero`. Equals `-log_zero * (1 - P[y])` on
/// normalized rows.
pub fn rce(labels: &LabelArray, p: ArrayView2<f64>, log_zero: f64) -> Result<Loss, LossError> {
    let pts = labelled(labels, &p)?;
    if pts.is_empty() {
        return Err(LossError::NoLabels);
    }
    let inv = 1.0 / pts.len() as f64;
    let mut loss = Loss::zero(p.dim());
    for &(i, y) in &pts {
        for (k, &pk) in p.row(i).iter().enumerate() {
            if k != y {
                loss.value -= pk * log_zero;
                loss.grad[(i, k)] = -inv * log_zero;
            }
        }
    }
    loss.value *= inv;
    loss.count = pts.len();
    Ok(loss)
}

/// Loss summed over the augmented slices of a stack, with one gradient per
/// augmented slice (`K x N x C`).
#[derive(Debug, Clone, PartialEq)]
pub struct StackLoss {
    pub value: f64,
    pub grads: Array3<f64>,
    pub count: usize,
}

fn stack_loss<F>(stack: &PredictionStack, mut term: F) -> Result<StackLoss, LossError>
where
    F: FnMut(ArrayView2<f64>) -> Result<Loss, LossError>,
{
    let k = stack.augmentations();
    let (n, c) = (stack.num_points(), stack.num_classes());
    let mut out = StackLoss {
        value: 0.0,
        grads: Array3::zeros((k, n, c)),
        count: 0,
    };
    for j in 1..=k {
        match term(stack.slice(j)) {
            Ok(l) => {
                out.value += l.value;
                out.grads.index_axis_mut(Axis(0), j - 1).assign(&l.grad);
                out.count = l.count;
            }
            Err(LossError::NoLabels | LossError::EmptySelection) => return Ok(out),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn check_points(what: &'static str, n: usize, stack: &PredictionStack) -> Result<(), LossError> {
    if n != stack.num_points() {
        return Err(LossError::Shape {
            what,
            expected: (stack.num_points(), stack.num_classes()),
            found: (n, stack.num_classes()),
        });
    }
    Ok(())
}

/// Cross-entropy of the hard pseudo labels on reliable points against each
/// augmented slice, summed over slices. Zero when nothing is reliable.
pub fn loss_r(hard: &LabelArray, stack: &PredictionStack, reliable: &[bool]) -> Result<StackLoss, LossError> {
    check_points("reliable mask", reliable.len(), stack)?;
    let restricted: LabelArray = hard
        .iter()
        .zip(reliable)
        .map(|(l, &r)| if r { l } else { None })
        .collect();
    stack_loss(stack, |p| ce(&restricted, p))
}

/// KL from the soft pseudo labels to each augmented slice over ambiguous
/// points, summed over slices. Zero when every point is reliable.
pub fn loss_a(
    soft: ArrayView2<f64>,
    stack: &PredictionStack,
    reliable: &[bool],
) -> Result<StackLoss, LossError> {
    check_points("reliable mask", reliable.len(), stack)?;
    let ambiguous: Vec<bool> = reliable.iter().map(|r| !r).collect();
    stack_loss(stack, |p| kl(soft, p, &ambiguous))
}

/// `nce + rce` on the expanded labels; zero when there are none.
pub fn loss_m(labels: &LabelArray, p: ArrayView2<f64>, log_zero: f64) -> Result<Loss, LossError> {
    match (nce(labels, p), rce(labels, p, log_zero)) {
        (Ok(a), Ok(b)) => Ok(Loss {
            value: a.value + b.value,
            grad: a.grad + b.grad,
            count: a.count,
        }),
        (Err(LossError::NoLabels), _) => Ok(Loss::zero(p.dim())),
        (Err(e), _) | (_, Err(e)) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub seg: f64,
    pub reliable: f64,
    pub ambiguous: f64,
    pub expanded: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            seg: 1.0,
            reliable: 1.0,
            ambiguous: 1.0,
            expanded: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let all = [self.seg, self.reliable, self.ambiguous, self.expanded];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(LossError::BadWeights)
        }
    }
}

/// Unweighted term values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub seg: f64,
    pub reliable: f64,
    pub ambiguous: f64,
    pub expanded: f64,
}

/// Points participating in each term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCounts {
    pub annotated: usize,
    pub reliable: usize,
    pub ambiguous: usize,
    pub expanded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub value: f64,
    pub terms: LossTerms,
    pub weights: LossWeights,
    pub log_zero: f64,
    pub counts: LossCounts,
    /// Gradient with respect to the prediction on the original cloud.
    #[serde(skip)]
    pub gradient: Array2<f64>,
    /// Gradients with respect to the `K` augmented predictions.
    #[serde(skip)]
    pub augmented_gradient: Array3<f64>,
}

/// Weighted sum of the segmentation, reliable, ambiguous and expanded-label
/// terms.
pub fn total_loss(
    sparse: &LabelArray,
    expanded: &LabelArray,
    split: &ReliabilitySplit,
    stack: &PredictionStack,
    weights: &LossWeights,
    log_zero: f64,
) -> Result<LossReport, LossError> {
    weights.validate()?;
    check_points("split", split.reliable.len(), stack)?;
    let p = stack.slice(0);
    let seg = ce(sparse, p)?;
    let rel = loss_r(&split.hard, stack, &split.reliable)?;
    let amb = loss_a(split.soft.view(), stack, &split.reliable)?;
    let exp = loss_m(expanded, p, log_zero)?;

    let terms = LossTerms {
        seg: seg.value,
        reliable: rel.value,
        ambiguous: amb.value,
        expanded: exp.value,
    };
    let value = weights.seg * terms.seg
        + weights.reliable * terms.reliable
        + weights.ambiguous * terms.ambiguous
        + weights.expanded * terms.expanded;
    let gradient = seg.grad * weights.seg + exp.grad * weights.expanded;
    let augmented_gradient = rel.grads * weights.reliable + amb.grads * weights.ambiguous;
    let reliable = split.reliable_count();
    Ok(LossReport {
        value,
        terms,
        weights: *weights,
        log_zero,
        counts: LossCounts {
            annotated: seg.count,
            reliable,
            ambiguous: split.reliable.len() - reliable,
            expanded: exp.count,
        },
        gradient,
        augmented_gradient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn labels(v: &[i64]) -> LabelArray {
        v.iter().map(|&x| (x >= 0).then_some(x as u32)).collect()
    }

    #[test]
    fn ce_examples() {
        let p = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(ce(&labels(&[0, 1]), p.view()).unwrap().value, 0.0);
        let u = Array2::from_elem((3, 4), 0.25);
        let l = ce(&labels(&[0, 3, -1]), u.view()).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
        assert_eq!(l.count, 2);
        assert_eq!(ce(&labels(&[-1, -1, -1]), u.view()), Err(LossError::NoLabels));
        assert!(matches!(
            ce(&labels(&[4, 0, 0]), u.view()),
            Err(LossError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn kl_examples() {
        let p = array![[0.3, 0.7]];
        assert!(kl(p.view(), p.view(), &[true]).unwrap().value.abs() < 1e-15);
        let q = array![[1.0, 0.0]];
        let h = array![[0.5, 0.5]];
        assert!((kl(q.view(), h.view(), &[true]).unwrap().value - 2f64.ln()).abs() < 1e-12);
        assert_eq!(kl(q.view(), h.view(), &[false]), Err(LossError::EmptySelection));
    }

    #[test]
    fn nce_and_rce_uniform() {
        let u = Array2::from_elem((1, 4), 0.25);
        assert!((nce(&labels(&[2]), u.view()).unwrap().value - 0.25).abs() < 1e-12);
        assert!((rce(&labels(&[2]), u.view(), DEFAULT_LOG_ZERO).unwrap().value - 3.0).abs() < 1e-12);
        assert!((loss_m(&labels(&[2]), u.view(), DEFAULT_LOG_ZERO).unwrap().value - 3.25).abs() < 1e-12);
        let one_hot = array![[0.0, 1.0, 0.0]];
        assert_eq!(rce(&labels(&[1]), one_hot.view(), -4.0).unwrap().value, 0.0);
        assert_eq!(loss_m(&labels(&[-1]), one_hot.view(), -4.0).unwrap().value, 0.0);
    }

    #[test]
    fn one_hot_predictions_give_zero_expanded_loss() {
        let p = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let l = loss_m(&labels(&[0, 2]), p.view(), DEFAULT_LOG_ZERO).unwrap();
        assert!(l.value.abs() < 1e-8);
    }

    #[test]
    fn stack_terms_are_zero_on_empty_sets() {
        let st = PredictionStack::from_slices(&[array![[0.6, 0.4]], array![[0.5, 0.5]]]).unwrap();
        let r = loss_r(&labels(&[-1]), &st, &[false]).unwrap();
        assert_eq!(r.value, 0.0);
        let a = loss_a(array![[0.6, 0.4]].view(), &st, &[true]).unwrap();
        assert_eq!(a.value, 0.0);
        let exact = PredictionStack::from_slices(&[array![[0.6, 0.4]], array![[1.0, 0.0]]]).unwrap();
        assert_eq!(loss_r(&labels(&[0]), &exact, &[true]).unwrap().value, 0.0);
    }

    #[test]
    fn weights_validated() {
        let w = LossWeights {
            seg: -1.0,
            ..Default::default()
        };
        assert_eq!(w.validate(), Err(LossError::BadWeights));
    }
}
