//! Scene data model shared by every stage.
//!
//! A [`SceneBundle`] holds one point cloud together with its labels and the
//! camera views used to lift 2D masks onto it. Everything here is immutable
//! after construction; constructors validate the cross-field invariants so
//! downstream stages can index without re-checking.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, CameraPose, DepthMap};
use crate::lift::MaskSet2D;

/// Class id type. Unannotated points are `None` in a [`LabelArray`].
pub type ClassId = u32;

/// On-disk encoding of an unannotated point.
pub const IGNORE_ON_DISK: i64 = -1;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("non-finite coordinate at point {index}")]
    NonFinite { index: usize },
    #[error("color at point {index} outside [0, 1]")]
    ColorRange { index: usize },
    #[error("{what}: expected {expected} entries, found {found}")]
    LengthMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("{what}: label {value} at index {index} is not below num_classes = {num_classes}")]
    LabelOutOfRange {
        what: String,
        index: usize,
        value: ClassId,
        num_classes: usize,
    },
    #[error("view {view}: {what} is {found_w}x{found_h}, intrinsics say {w}x{h}")]
    ViewDimensions {
        view: String,
        what: &'static str,
        w: usize,
        h: usize,
        found_w: usize,
        found_h: usize,
    },
    #[error("num_classes must be at least 1")]
    NoClasses,
}

/// Point positions in meters (world frame), optionally with RGB in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Point3<f64>>,
    colors: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn new(positions: Vec<Point3<f64>>, colors: Option<Vec<[f64; 3]>>) -> Result<Self, SceneError> {
        if positions.is_empty() {
            return Err(SceneError::EmptyCloud);
        }
        if let Some(index) = positions
            .iter()
            .position(|p| !p.coords.iter().all(|c| c.is_finite()))
        {
            return Err(SceneError::NonFinite { index });
        }
        if let Some(colors) = &colors {
            if colors.len() != positions.len() {
                return Err(SceneError::LengthMismatch {
                    what: "colors".into(),
                    expected: positions.len(),
                    found: colors.len(),
                });
            }
            if let Some(index) = colors
                .iter()
                .position(|c| !c.iter().all(|v| (0.0..=1.0).contains(v)))
            {
                return Err(SceneError::ColorRange { index });
            }
        }
        Ok(Self { positions, colors })
    }

    pub fn from_positions(positions: Vec<Point3<f64>>) -> Result<Self, SceneError> {
        Self::new(positions, None)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    /// Always false for a constructed cloud; present for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point3<f64>] {
        &self.positions
    }

    pub fn colors(&self) -> Option<&[[f64; 3]]> {
        self.colors.as_deref()
    }

    /// Same colors, new positions. Used by augmentations, which never change N.
    pub(crate) fn with_positions(&self, positions: Vec<Point3<f64>>) -> Self {
        debug_assert_eq!(positions.len(), self.positions.len());
        Self {
            positions,
            colors: self.colors.clone(),
        }
    }
}

/// Per-point class labels; `None` marks an unannotated (ignored) point.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct LabelArray(Vec<Option<ClassId>>);

impl LabelArray {
    pub fn new(values: Vec<Option<ClassId>>) -> Self {
        Self(values)
    }

    pub fn ignored(n: usize) -> Self {
        Self(vec![None; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<ClassId> {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, value: Option<ClassId>) {
        self.0[i] = value;
    }

    pub fn values(&self) -> &[Option<ClassId>] {
        &self.0
    }

    pub fn into_values(self) -> Vec<Option<ClassId>> {
        self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<ClassId>> + '_ {
        self.0.iter().copied()
    }

    /// Number of annotated points.
    pub fn count(&self) -> usize {
        self.0.iter().filter(|v| v.is_some()).count()
    }

    /// Checks every annotated value is a valid class id.
    pub fn validate(&self, what: &str, num_classes: usize) -> Result<(), SceneError> {
        for (index, v) in self.0.iter().enumerate() {
            if let Some(value) = *v {
                if value as usize >= num_classes {
                    return Err(SceneError::LabelOutOfRange {
                        what: what.to_string(),
                        index,
                        value,
                        num_classes,
                    });
                }
            }
        }
        Ok(())
    }

    pub(crate) fn check_len(&self, what: &str, n: usize) -> Result<(), SceneError> {
        if self.len() != n {
            return Err(SceneError::LengthMismatch {
                what: what.to_string(),
                expected: n,
                found: self.len(),
            });
        }
        Ok(())
    }
}

impl FromIterator<Option<ClassId>> for LabelArray {
    fn from_iter<I: IntoIterator<Item = Option<ClassId>>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Scene-level parameters stored in `meta.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub num_classes: usize,
    /// Depth PNG value per meter.
    pub depth_scale: f64,
    /// Depth matching tolerance in meters.
    #[serde(default = "default_delta_depth")]
    pub delta_depth: f64,
}

pub const DEFAULT_DELTA_DEPTH: f64 = 0.05;

fn default_delta_depth() -> f64 {
    DEFAULT_DELTA_DEPTH
}

/// One camera view of a scene: calibration, depth, and its 2D mask set.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewObservation {
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub depth: DepthMap,
    pub mask2d: MaskSet2D,
}

impl ViewObservation {
    pub fn new(
        name: impl Into<String>,
        intrinsics: CameraIntrinsics,
        pose: CameraPose,
        depth: DepthMap,
        mask2d: MaskSet2D,
    ) -> Result<Self, SceneError> {
        let name = name.into();
        let (w, h) = (intrinsics.width, intrinsics.height);
        if depth.width() != w || depth.height() != h {
            return Err(SceneError::ViewDimensions {
                view: name,
                what: "depth",
                w,
                h,
                found_w: depth.width(),
                found_h: depth.height(),
            });
        }
        if mask2d.width() != w || mask2d.height() != h {
            return Err(SceneError::ViewDimensions {
                view: name,
                what: "mask",
                w,
                h,
                found_w: mask2d.width(),
                found_h: mask2d.height(),
            });
        }
        Ok(Self {
            name,
            intrinsics,
            pose,
            depth,
            mask2d,
        })
    }
}

/// One scene: point cloud, labels, and views ordered by name.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub meta: SceneMeta,
    pub cloud: PointCloud,
    pub gt: Option<LabelArray>,
    pub sparse: LabelArray,
    pub views: Vec<ViewObservation>,
}

impl SceneBundle {
    /// Validates lengths and label ranges, then sorts views by name.
    pub fn new(
        meta: SceneMeta,
        cloud: PointCloud,
        gt: Option<LabelArray>,
        sparse: LabelArray,
        mut views: Vec<ViewObservation>,
    ) -> Result<Self, SceneError> {
        if meta.num_classes == 0 {
            return Err(SceneError::NoClasses);
        }
        let n = cloud.len();
        sparse.check_len("sparse labels", n)?;
        sparse.validate("sparse labels", meta.num_classes)?;
        if let Some(gt) = &gt {
            gt.check_len("gt labels", n)?;
            gt.validate("gt labels", meta.num_classes)?;
        }
        views.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(Self {
            meta,
            cloud,
            gt,
            sparse,
            views,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    pub fn num_points(&self) -> usize {
        self.cloud.len()
    }
}
