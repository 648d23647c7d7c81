//! Lifting 2D segmentation masks onto point clouds, expanding sparse
//! annotations over the lifted masks, and the losses and metrics used to
//! train and evaluate on the expanded labels.

pub mod eval;
pub mod geometry;
pub mod io;
pub mod labels;
pub mod lift;
pub mod losses;
pub mod reliability;
pub mod scene;
pub mod synth;

pub use scene::{ClassId, LabelArray, PointCloud, SceneBundle, SceneMeta, ViewObservation};
