//! Spreading sparse annotations and reliable pseudo labels over fused masks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lift::MaskSet3D;
use crate::scene::{ClassId, LabelArray};

pub const DEFAULT_ETA: f64 = 0.7;

#[derive(Debug, Error, PartialEq)]
pub enum LabelsError {
    #[error("{what} has {found} labels but the masks cover {expected} points")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("eta must lie in [0, 1], got {0}")]
    BadEta(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub eta: f64,
}

impl PropagationConfig {
    pub fn new(eta: f64) -> Result<Self, LabelsError> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(LabelsError::BadEta(eta));
        }
        Ok(Self { eta })
    }
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self { eta: DEFAULT_ETA }
    }
}

/// Most frequent value and its count; ties go to the smallest class id.
pub fn mode(values: impl IntoIterator<Item = ClassId>) -> Option<(ClassId, usize)> {
    let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    let mut best: Option<(ClassId, usize)> = None;
    for (c, n) in counts {
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((c, n));
        }
    }
    best
}

fn annotated_in<'a>(
    labels: &'a LabelArray,
    masks: &'a MaskSet3D,
    t: usize,
) -> impl Iterator<Item = ClassId> + 'a {
    masks.points(t).filter_map(|i| labels.get(i))
}

fn check_len(what: &'static str, labels: &LabelArray, masks: &MaskSet3D) -> Result<(), LabelsError> {
    if labels.len() != masks.num_points() {
        return Err(LabelsError::Length {
            what,
            expected: masks.num_points(),
            found: labels.len(),
        });
    }
    Ok(())
}

fn fill(out: &mut LabelArray, masks: &MaskSet3D, t: usize, label: ClassId) {
    for i in masks.points(t) {
        out.set(i, Some(label));
    }
}

/// Gives every point of a mask the mode of the annotations inside it.
/// Masks without annotations and points outside all masks keep `y`.
pub fn init_labels(y: &LabelArray, masks: &MaskSet3D) -> Result<LabelArray, LabelsError> {
    check_len("annotations", y, masks)?;
    let mut out = y.clone();
    for t in 0..masks.len() {
        if let Some((label, _)) = mode(annotated_in(y, masks, t)) {
            fill(&mut out, masks, t, label);
        }
    }
    Ok(out)
}

/// Which rule labelled a mask during [`propagate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "branch", content = "label", rename_all = "snake_case")]
pub enum MaskBranch {
    /// The modal reliable pseudo label covered more than `eta` of the mask.
    Reliable(ClassId),
    /// Fell back to the mode of the annotations inside the mask.
    Annotation(ClassId),
    Untouched,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    pub labels: LabelArray,
    pub branches: Vec<MaskBranch>,
}

impl Propagation {
    pub fn reliable_masks(&self) -> usize {
        self.branches
            .iter()
            .filter(|b| matches!(b, MaskBranch::Reliable(_)))
            .count()
    }
}

/// Fuses annotations `y` with hard reliable pseudo labels `yr` over the masks.
///
/// Output starts as `y`. For each mask, if the modal label of `yr` inside it
/// accounts for strictly more than `eta` of the mask's points, the whole
/// mask takes that label; otherwise, if the mask holds annotations, it takes
/// their mode.
pub fn propagate(
    y: &LabelArray,
    yr: &LabelArray,
    masks: &MaskSet3D,
    cfg: &PropagationConfig,
) -> Result<Propagation, LabelsError> {
    check_len("annotations", y, masks)?;
    check_len("reliable pseudo labels", yr, masks)?;
    let mut out = y.clone();
    let mut branches = Vec::with_capacity(masks.len());
    for t in 0..masks.len() {
        let size = masks.mask_size(t);
        let reliable =
            mode(annotated_in(yr, masks, t)).filter(|&(_, count)| count as f64 / size as f64 > cfg.eta);
        let branch = match reliable {
            Some((label, _)) => MaskBranch::Reliable(label),
            None => match mode(annotated_in(y, masks, t)) {
                Some((label, _)) => MaskBranch::Annotation(label),
                None => MaskBranch::Untouched,
            },
        };
        if let MaskBranch::Reliable(label) | MaskBranch::Annotation(label) = branch {
            fill(&mut out, masks, t, label);
        }
        branches.push(branch);
    }
    Ok(Propagation {
        labels: out,
        branches,
    })
}
