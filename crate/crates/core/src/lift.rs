//! Back-projection of per-view 2D mask sets onto the point cloud and
//! overlap-based fusion of the per-view 3D masks.

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::LinkMatrix;

pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.3;

#[derive(Debug, Error, PartialEq)]
pub enum LiftError {
    #[error("no views to sample from")]
    NoViews,
    #[error("number of views to sample must be at least 1")]
    ZeroSample,
    #[error("mask id map has {found} pixels, expected {width}x{height}")]
    MaskSize {
        width: usize,
        height: usize,
        found: usize,
    },
    #[error("mask ids are not contiguous: id {missing} is absent but {max} is present")]
    NonContiguous { missing: u32, max: u32 },
    #[error("link matrix is {lw}x{lh} but mask set is {mw}x{mh}")]
    ViewMismatch {
        lw: usize,
        lh: usize,
        mw: usize,
        mh: usize,
    },
    #[error("view set {index} covers {found} points, expected {expected}")]
    PointCountMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("overlap threshold must be finite and non-negative, got {0}")]
    BadThreshold(f64),
    #[error("mask {mask} is empty")]
    EmptyMask { mask: usize },
    #[error("point {point} belongs to masks {first} and {second}")]
    SharedPoint {
        point: usize,
        first: usize,
        second: usize,
    },
    #[error("mask {mask} has {found} bits, expected {expected}")]
    RowLength {
        mask: usize,
        expected: usize,
        found: usize,
    },
    #[error("{masks} masks but {provenance} provenance entries")]
    ProvenanceLength { masks: usize, provenance: usize },
}

/// Exclusive 2D masks of one view as an id map: 0 = unsegmented, 1..=M.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet2D {
    width: usize,
    height: usize,
    ids: Vec<u32>,
    num_masks: u32,
}

impl MaskSet2D {
    pub fn new(width: usize, height: usize, ids: Vec<u32>) -> Result<Self, LiftError> {
        if ids.len() != width * height {
            return Err(LiftError::MaskSize {
                width,
                height,
                found: ids.len(),
            });
        }
        let max = ids.iter().copied().max().unwrap_or(0);
        let mut seen = vec![false; max as usize + 1];
        for &id in &ids {
            seen[id as usize] = true;
        }
        if let Some(missing) = (1..=max).find(|&id| !seen[id as usize]) {
            return Err(LiftError::NonContiguous { missing, max });
        }
        Ok(Self {
            width,
            height,
            ids,
            num_masks: max,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_masks(&self) -> u32 {
        self.num_masks
    }

    /// Mask id at pixel `(u, v)`, 0 if unsegmented.
    pub fn id_at(&self, u: usize, v: usize) -> u32 {
        self.ids[v * self.width + u]
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }
}

/// One view's masks lifted onto the cloud. Each point carries at most one
/// mask index (0-based, i.e. 2D id - 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet3DView {
    num_masks: u32,
    assignment: Vec<Option<u32>>,
}

impl MaskSet3DView {
    pub fn num_masks(&self) -> u32 {
        self.num_masks
    }

    pub fn num_points(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[Option<u32>] {
        &self.assignment
    }

    /// Row bitmaps, one per 2D mask, including empty ones.
    pub fn rows(&self) -> Vec<FixedBitSet> {
        let mut rows = vec![FixedBitSet::with_capacity(self.num_points()); self.num_masks as usize];
        for (i, m) in self.assignment.iter().enumerate() {
            if let Some(m) = m {
                rows[*m as usize].insert(i);
            }
        }
        rows
    }
}

/// Where a fused mask came from: view position in the merge input and the
/// 2D mask id (1-based) within that view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSource {
    pub view: usize,
    pub mask_id: u32,
}

/// Fused class-agnostic 3D masks: `T` non-empty, point-disjoint rows over
/// `N` points, each with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet3D {
    num_points: usize,
    rows: Vec<FixedBitSet>,
    provenance: Vec<Vec<MaskSource>>,
}

impl MaskSet3D {
    pub fn new(
        num_points: usize,
        rows: Vec<FixedBitSet>,
        provenance: Vec<Vec<MaskSource>>,
    ) -> Result<Self, LiftError> {
        if rows.len() != provenance.len() {
            return Err(LiftError::ProvenanceLength {
                masks: rows.len(),
                provenance: provenance.len(),
            });
        }
        let mut owner: Vec<Option<usize>> = vec![None; num_points];
        for (t, row) in rows.iter().enumerate() {
            if row.len() != num_points {
                return Err(LiftError::RowLength {
                    mask: t,
                    expected: num_points,
                    found: row.len(),
                });
            }
            if row.is_clear() {
                return Err(LiftError::EmptyMask { mask: t });
            }
            for i in row.ones() {
                if let Some(first) = owner[i] {
                    return Err(LiftError::SharedPoint {
                        point: i,
                        first,
                        second: t,
                    });
                }
                owner[i] = Some(t);
            }
        }
        Ok(Self {
            num_points,
            rows,
            provenance,
        })
    }

    /// Builds from point index lists with empty provenance.
    pub fn from_point_lists(num_points: usize, lists: &[Vec<usize>]) -> Result<Self, LiftError> {
        let rows = lists
            .iter()
            .map(|l| {
                let mut b = FixedBitSet::with_capacity(num_points);
                for &i in l {
                    b.insert(i);
                }
                b
            })
            .collect();
        Self::new(num_points, rows, vec![Vec::new(); lists.len()])
    }

    pub fn empty(num_points: usize) -> Self {
        Self {
            num_points,
            rows: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn num_points(&self) -> usize {
        self.num_points
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, t: usize) -> &FixedBitSet {
        &self.rows[t]
    }

    pub fn rows(&self) -> &[FixedBitSet] {
        &self.rows
    }

    pub fn provenance(&self) -> &[Vec<MaskSource>] {
        &self.provenance
    }

    pub fn points(&self, t: usize) -> impl Iterator<Item = usize> + '_ {
        self.rows[t].ones()
    }

    pub fn mask_size(&self, t: usize) -> usize {
        self.rows[t].count_ones(..)
    }

    /// Mask index of each point, if any.
    pub fn point_masks(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.num_points];
        for (t, row) in self.rows.iter().enumerate() {
            for i in row.ones() {
                out[i] = Some(t);
            }
        }
        out
    }

    /// Number of points covered by some mask.
    pub fn covered(&self) -> usize {
        self.rows.iter().map(|r| r.count_ones(..)).sum()
    }
}

/// Evenly spaced indices into a list of `len` views.
///
/// Picks `round(j (len-1) / (n_view-1))` for `j = 0..n_view`, all views
/// when `n_view >= len`, and the middle view when `n_view == 1`.
pub fn sample_views(len: usize, n_view: usize) -> Result<Vec<usize>, LiftError> {
    if len == 0 {
        return Err(LiftError::NoViews);
    }
    if n_view == 0 {
        return Err(LiftError::ZeroSample);
    }
    if n_view >= len {
        return Ok((0..len).collect());
    }
    if n_view == 1 {
        return Ok(vec![len / 2]);
    }
    let span = (len - 1) as u64;
    let steps = (n_view - 1) as u64;
    let mut out: Vec<usize> = (0..n_view as u64)
        .map(|j| ((2 * j * span + steps) / (2 * steps)) as usize)
        .collect();
    out.dedup();
    Ok(out)
}

/// Lifts one view's 2D masks onto the points linked to it.
pub fn backproject_masks(mask2d: &MaskSet2D, link: &LinkMatrix) -> Result<MaskSet3DView, LiftError> {
    if link.width != mask2d.width || link.height != mask2d.height {
        return Err(LiftError::ViewMismatch {
            lw: link.width,
            lh: link.height,
            mw: mask2d.width,
            mh: mask2d.height,
        });
    }
    let assignment = (0..link.len())
        .map(|i| {
            link.pixel(i).and_then(|(u, v)| match mask2d.id_at(u, v) {
                0 => None,
                id => Some(id - 1),
            })
        })
        .collect();
    Ok(MaskSet3DView {
        num_masks: mask2d.num_masks,
        assignment,
    })
}

/// Fuses per-view 3D masks in order.
///
/// The first view's non-empty masks seed the accumulator. Each later mask
/// `v` is compared with every accumulated mask `a` by
/// `|v ∩ a| / min(|v|, |a|)`; if the best overlap exceeds `threshold` it is
/// unioned into that mask (lowest index on ties), otherwise appended.
/// Points claimed by several fused masks then go to the largest claimant
/// (lowest index on ties) and masks left empty are dropped.
pub fn merge_mask_sets(view_sets: &[MaskSet3DView], threshold: f64) -> Result<MaskSet3D, LiftError> {
    if !(threshold >= 0.0 && threshold.is_finite()) {
        return Err(LiftError::BadThreshold(threshold));
    }
    let Some(first) = view_sets.first() else {
        return Err(LiftError::NoViews);
    };
    let n = first.num_points();
    for (index, s) in view_sets.iter().enumerate() {
        if s.num_points() != n {
            return Err(LiftError::PointCountMismatch {
                index,
                expected: n,
                found: s.num_points(),
            });
        }
    }

    let (mut acc, provenance) = accumulate(view_sets, threshold);
    let acc_size: Vec<usize> = acc.iter().map(|r| r.count_ones(..)).collect();

    // Largest claimant wins a shared point.
    let mut order: Vec<usize> = (0..acc.len()).collect();
    order.sort_by(|&a, &b| acc_size[b].cmp(&acc_size[a]).then(a.cmp(&b)));
    let mut claimed = FixedBitSet::with_capacity(n);
    for &t in &order {
        acc[t].difference_with(&claimed);
        claimed.union_with(&acc[t]);
    }

    let (rows, provenance): (Vec<_>, Vec<_>) = acc
        .into_iter()
        .zip(provenance)
        .filter(|(row, _)| !row.is_clear())
        .unzip();
    MaskSet3D::new(n, rows, provenance)
}

/// Overlap merging without exclusivity resolution.
fn accumulate(view_sets: &[MaskSet3DView], threshold: f64) -> (Vec<FixedBitSet>, Vec<Vec<MaskSource>>) {
    let mut acc: Vec<FixedBitSet> = Vec::new();
    let mut acc_size: Vec<usize> = Vec::new();
    let mut provenance: Vec<Vec<MaskSource>> = Vec::new();

    for (view, set) in view_sets.iter().enumerate() {
        for (m, row) in set.rows().into_iter().enumerate() {
            let size = row.count_ones(..);
            if size == 0 {
                continue;
            }
            let source = MaskSource {
                view,
                mask_id: m as u32 + 1,
            };
            let mut best: Option<(usize, f64)> = None;
            if view > 0 {
                for (a, a_row) in acc.iter().enumerate() {
                    let inter = row.intersection_count(a_row);
                    if inter == 0 {
                        continue;
                    }
                    let overlap = inter as f64 / size.min(acc_size[a]) as f64;
                    if best.is_none_or(|(_, o)| overlap > o) {
                        best = Some((a, overlap));
                    }
                }
            }
            match best {
                Some((a, overlap)) if overlap > threshold => {
                    acc[a].union_with(&row);
                    acc_size[a] = acc[a].count_ones(..);
                    provenance[a].push(source);
                }
                _ => {
                    acc.push(row);
                    acc_size.push(size);
                    provenance.push(vec![source]);
                }
            }
        }
    }

    (acc, provenance)
}
