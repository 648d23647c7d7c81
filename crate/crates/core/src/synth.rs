//! Seeded synthetic rooms and a point-splat z-buffer renderer.
//!
//! A room is a floor (class 0), four walls (class 1) and axis-aligned boxes
//! resting above the floor (classes 2..C). Every surface is one object.
//! Cameras sit on a ring inside the room looking at a common target.

use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    compose_projection, project_point, CameraIntrinsics, CameraPose, DepthMap, GeometryError,
};
use crate::io::{save_labels, save_scene, IoError};
use crate::lift::{LiftError, MaskSet2D};
use crate::scene::{ClassId, LabelArray, PointCloud, SceneBundle, SceneError, SceneMeta, ViewObservation};

pub const OBJECTS_FILE: &str = "objects.labels";

const BOX_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("degenerate spec: {0}")]
    Spec(String),
    #[error("requested {n} sparse labels from {available} points")]
    TooManyLabels { n: usize, available: usize },
    #[error("otoc sampling needs object ids for all {expected} points, got {found}")]
    ObjectIds { expected: usize, found: usize },
    #[error("depth {depth} m at view {view} exceeds the 16-bit range")]
    DepthRange { view: String, depth: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Lift(#[from] LiftError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum SparseScheme {
    /// `n` distinct points chosen uniformly.
    FixedN { n: usize },
    /// One point per object.
    Otoc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraRing {
    pub count: usize,
    /// Horizontal distance from the room center.
    pub radius: f64,
    pub height: f64,
    /// Height of the look-at point above the room center.
    pub target_height: f64,
}

impl Default for CameraRing {
    fn default() -> Self {
        Self {
            count: 6,
            radius: 1.2,
            height: 1.6,
            target_height: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageSpec {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
}

impl Default for ImageSpec {
    fn default() -> Self {
        Self {
            width: 80,
            height: 60,
            focal: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub seed: u64,
    /// Room size along x, y, z in meters; z is up.
    pub room: [f64; 3],
    pub num_boxes: usize,
    /// Range for each box side length.
    pub box_size: [f64; 2],
    pub points_per_m2: f64,
    /// Minimum clearance between distinct objects, and height of boxes above
    /// the floor.
    pub gap: f64,
    pub cameras: CameraRing,
    pub image: ImageSpec,
    pub depth_scale: f64,
    pub num_classes: usize,
    pub delta: f64,
    pub sparse: SparseScheme,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            room: [4.0, 4.0, 2.5],
            num_boxes: 4,
            box_size: [0.4, 0.8],
            points_per_m2: 250.0,
            gap: 0.0,
            cameras: CameraRing::default(),
            image: ImageSpec::default(),
            depth_scale: 1000.0,
            num_classes: 6,
            delta: 0.05,
            sparse: SparseScheme::FixedN { n: 20 },
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(m.to_string()));
        let [x, y, z] = self.room;
        if !(x > 0.0 && y > 0.0 && z > 0.0) || !self.room.iter().all(|v| v.is_finite()) {
            return bad("room extents must be positive");
        }
        if self.cameras.count == 0 {
            return bad("need at least one camera");
        }
        let r = self.cameras.radius;
        if !(r >= 0.0 && r < x.min(y) / 2.0) {
            return bad("camera ring must lie inside the room");
        }
        if !(self.cameras.height > 0.0 && self.cameras.height < z) {
            return bad("camera height must lie inside the room");
        }
        let [lo, hi] = self.box_size;
        if self.num_boxes > 0 && !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("box size range must be positive and ordered");
        }
        if self.num_boxes > 0 && self.num_classes < 3 {
            return bad("boxes need at least 3 classes");
        }
        if self.num_classes < 2 {
            return bad("need at least 2 classes");
        }
        if !(self.points_per_m2 > 0.0 && self.points_per_m2.is_finite()) {
            return bad("point density must be positive");
        }
        if !(self.gap >= 0.0 && 2.0 * self.gap < x.min(y).min(z)) {
            return bad("gap must be non-negative and smaller than the room");
        }
        if self.image.width == 0 || self.image.height == 0 || !(self.image.focal > 0.0) {
            return bad("image size and focal length must be positive");
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad("delta must be positive");
        }
        if !(self.depth_scale > 0.0) || 0.5 / self.depth_scale >= self.delta / 10.0 {
            return bad("depth quantization step must stay below delta / 10");
        }
        if let SparseScheme::FixedN { n: 0 } = self.sparse {
            return bad("fixed-n sparse sampling needs n >= 1");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics, GeometryError> {
        let ImageSpec { width, height, focal } = self.image;
        CameraIntrinsics::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn poses(&self) -> Result<Vec<CameraPose>, GeometryError> {
        let [x, y, _] = self.room;
        let c = &self.cameras;
        let target = Point3::new(x / 2.0, y / 2.0, c.target_height);
        (0..c.count)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / c.count as f64;
                let eye = Point3::new(
                    x / 2.0 + c.radius * a.cos(),
                    y / 2.0 + c.radius * a.sin(),
                    c.height,
                );
                let target = if c.radius == 0.0 {
                    Point3::new(x / 2.0 + a.cos(), y / 2.0 + a.sin(), c.target_height)
                } else {
                    target
                };
                CameraPose::look_at(eye, target, Vector3::z())
            })
            .collect()
    }
}

/// A rendered view and the renderer's own visibility verdict per point.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    /// Quantized depth as stored on disk.
    pub depth: DepthMap,
    /// Exact minimum camera depth per pixel; 0 where nothing projects.
    pub zbuf: Vec<f64>,
    /// Index of the nearest point per pixel.
    pub winner: Vec<Option<usize>>,
    pub mask: MaskSet2D,
    /// In frame, in front of the camera and within `delta` of the stored depth.
    pub visible: Vec<bool>,
}

/// Splats every point to its nearest pixel and keeps the nearest one per
/// pixel (lower index on exact ties). Mask ids number the objects that win
/// at least one pixel, in object order, from 1.
pub fn render_view(
    name: &str,
    cloud: &PointCloud,
    object_ids: &[u32],
    k: &CameraIntrinsics,
    pose: &CameraPose,
    depth_scale: f64,
    delta: f64,
) -> Result<RenderedView, SynthError> {
    let (w, h) = (k.width, k.height);
    let m = compose_projection(k, pose);
    let proj: Vec<_> = cloud.positions().iter().map(|p| project_point(&m, p)).collect();
    let mut zbuf = vec![0.0; w * h];
    let mut winner: Vec<Option<usize>> = vec![None; w * h];
    for (i, p) in proj.iter().enumerate() {
        if let Some((u, v)) = p.pixel_in(w, h) {
            let px = v * w + u;
            if winner[px].is_none() || p.z < zbuf[px] {
                zbuf[px] = p.z;
                winner[px] = Some(i);
            }
        }
    }

    let mut depth = Vec::with_capacity(w * h);
    for &z in &zbuf {
        let q = (z * depth_scale).round();
        if q > u16::MAX as f64 {
            return Err(SynthError::DepthRange {
                view: name.to_string(),
                depth: z,
            });
        }
        depth.push(q / depth_scale);
    }

    let mut present: Vec<u32> = winner.iter().flatten().map(|&i| object_ids[i]).collect();
    present.sort_unstable();
    present.dedup();
    let ids = winner
        .iter()
        .map(|wi| match wi {
            Some(i) => present.binary_search(&object_ids[*i]).map_or(0, |r| r as u32 + 1),
            None => 0,
        })
        .collect();

    let visible = proj
        .iter()
        .map(|p| {
            p.pixel_in(w, h).is_some_and(|(u, v)| {
                let d = depth[v * w + u];
                d > 0.0 && (d - p.z).abs() <= delta
            })
        })
        .collect();

    Ok(RenderedView {
        depth: DepthMap::new(w, h, depth)?,
        zbuf,
        winner,
        mask: MaskSet2D::new(w, h, ids)?,
        visible,
    })
}

/// A generated scene with its per-point object ids and renderer output.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub bundle: SceneBundle,
    pub object_ids: Vec<u32>,
    /// Class of each object, indexed by object id.
    pub object_classes: Vec<ClassId>,
    /// Renderer output per view, in view order.
    pub renders: Vec<RenderedView>,
}

impl SynthScene {
    pub fn num_objects(&self) -> usize {
        self.object_classes.len()
    }

    /// Points visible in at least one view according to the renderer.
    pub fn visible_anywhere(&self) -> Vec<bool> {
        let mut out = vec![false; self.object_ids.len()];
        for r in &self.renders {
            for (o, &v) in out.iter_mut().zip(&r.visible) {
                *o |= v;
            }
        }
        out
    }

    /// Writes the scene directory plus the per-point object ids.
    pub fn save(&self, dir: &Path) -> Result<(), SynthError> {
        save_scene(&self.bundle, dir)?;
        let objects: LabelArray = self.object_ids.iter().map(|&o| Some(o)).collect();
        save_labels(&objects, &dir.join(OBJECTS_FILE))?;
        Ok(())
    }
}

struct Surface {
    origin: Point3<f64>,
    e1: Vector3<f64>,
    e2: Vector3<f64>,
    object: u32,
}

#[derive(Clone, Copy)]
struct Footprint {
    x0: f64,
    y0: f64,
    sx: f64,
    sy: f64,
}

impl Footprint {
    fn clear_of(&self, o: &Footprint, gap: f64) -> bool {
        self.x0 + self.sx + gap <= o.x0
            || o.x0 + o.sx + gap <= self.x0
            || self.y0 + self.sy + gap <= o.y0
            || o.y0 + o.sy + gap <= self.y0
    }
}

fn room_surfaces(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<Surface>, Vec<ClassId>), SynthError> {
    let [x, y, z] = spec.room;
    let g = spec.gap;
    let p = Point3::new;
    let v = Vector3::new;
    let mut s = vec![
        Surface {
            origin: p(0.0, 0.0, 0.0),
            e1: v(x, 0.0, 0.0),
            e2: v(0.0, y, 0.0),
            object: 0,
        },
        Surface {
            origin: p(g, 0.0, g),
            e1: v(x - 2.0 * g, 0.0, 0.0),
            e2: v(0.0, 0.0, z - g),
            object: 1,
        },
        Surface {
            origin: p(g, y, g),
            e1: v(x - 2.0 * g, 0.0, 0.0),
            e2: v(0.0, 0.0, z - g),
            object: 2,
        },
        Surface {
            origin: p(0.0, g, g),
            e1: v(0.0, y - 2.0 * g, 0.0),
            e2: v(0.0, 0.0, z - g),
            object: 3,
        },
        Surface {
            origin: p(x, g, g),
            e1: v(0.0, y - 2.0 * g, 0.0),
            e2: v(0.0, 0.0, z - g),
            object: 4,
        },
    ];
    let mut classes = vec![0, 1, 1, 1, 1];

    let [lo, hi] = spec.box_size;
    let mut placed: Vec<Footprint> = Vec::new();
    for b in 0..spec.num_boxes {
        let object = 5 + b as u32;
        let mut fp = None;
        for _ in 0..BOX_ATTEMPTS {
            let sx = rng.random_range(lo..=hi);
            let sy = rng.random_range(lo..=hi);
            let (xmin, xmax) = (2.0 * g, x - 2.0 * g - sx);
            let (ymin, ymax) = (2.0 * g, y - 2.0 * g - sy);
            if xmax < xmin || ymax < ymin {
                continue;
            }
            let cand = Footprint {
                x0: rng.random_range(xmin..=xmax),
                y0: rng.random_range(ymin..=ymax),
                sx,
                sy,
            };
            if placed.iter().all(|o| cand.clear_of(o, g.max(1e-3))) {
                fp = Some(cand);
                break;
            }
        }
        let Some(f) = fp else {
            return Err(SynthError::Spec(format!(
                "could not place box {b} without overlap"
            )));
        };
        placed.push(f);
        let sz = rng.random_range(lo..=hi);
        let (x0, y0, z0) = (f.x0, f.y0, g);
        let (x1, y1, z1) = (x0 + f.sx, y0 + f.sy, z0 + sz);
        s.extend([
            Surface {
                origin: p(x0, y0, z1),
                e1: v(f.sx, 0.0, 0.0),
                e2: v(0.0, f.sy, 0.0),
                object,
            },
            Surface {
                origin: p(x0, y0, z0),
                e1: v(f.sx, 0.0, 0.0),
                e2: v(0.0, 0.0, sz),
                object,
            },
            Surface {
                origin: p(x0, y1, z0),
                e1: v(f.sx, 0.0, 0.0),
                e2: v(0.0, 0.0, sz),
                object,
            },
            Surface {
                origin: p(x0, y0, z0),
                e1: v(0.0, f.sy, 0.0),
                e2: v(0.0, 0.0, sz),
                object,
            },
            Surface {
                origin: p(x1, y0, z0),
                e1: v(0.0, f.sy, 0.0),
                e2: v(0.0, 0.0, sz),
                object,
            },
        ]);
        classes.push(2 + rng.random_range(0..spec.num_classes as u32 - 2));
    }
    Ok((s, classes))
}

fn class_color(c: ClassId) -> [f64; 3] {
    let h = (c as f64 * 0.618_033_988_75).fract();
    [h, (h + 0.33).fract(), (h + 0.67).fract()]
}

/// Builds the room, samples surface points, renders every camera and draws
/// the sparse annotations. Identical specs give identical scenes.
pub fn generate_scene(spec: &SynthSpec) -> Result<SynthScene, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (surfaces, object_classes) = room_surfaces(spec, &mut rng)?;

    let mut positions = Vec::new();
    let mut object_ids = Vec::new();
    for s in &surfaces {
        let area = s.e1.cross(&s.e2).norm();
        let n = (area * spec.points_per_m2).round() as usize;
        for _ in 0..n {
            let a: f64 = rng.random();
            let b: f64 = rng.random();
            positions.push(s.origin + s.e1 * a + s.e2 * b);
            object_ids.push(s.object);
        }
    }
    if positions.is_empty() {
        return Err(SynthError::Spec("no points sampled".into()));
    }
    let gt: LabelArray = object_ids
        .iter()
        .map(|&o| Some(object_classes[o as usize]))
        .collect();
    let colors = object_ids
        .iter()
        .map(|&o| class_color(object_classes[o as usize]))
        .collect();
    let cloud = PointCloud::new(positions, Some(colors))?;

    let sparse_seed = rng.random();
    let sparse = sample_sparse(&gt, spec.sparse, sparse_seed, Some(&object_ids))?;

    let k = spec.intrinsics()?;
    let poses = spec.poses()?;
    let renders: Vec<RenderedView> = poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| {
            render_view(
                &view_name(i),
                &cloud,
                &object_ids,
                &k,
                pose,
                spec.depth_scale,
                spec.delta,
            )
        })
        .collect::<Result<_, _>>()?;
    let views = renders
        .iter()
        .zip(&poses)
        .enumerate()
        .map(|(i, (r, pose))| ViewObservation::new(view_name(i), k, *pose, r.depth.clone(), r.mask.clone()))
        .collect::<Result<Vec<_>, _>>()?;

    let meta = SceneMeta {
        num_classes: spec.num_classes,
        depth_scale: spec.depth_scale,
        delta_depth: spec.delta,
    };
    let bundle = SceneBundle::new(meta, cloud, Some(gt), sparse, views)?;
    Ok(SynthScene {
        bundle,
        object_ids,
        object_classes,
        renders,
    })
}

fn view_name(i: usize) -> String {
    format!("view_{i:03}")
}

/// Keeps the gt label on a seeded subset of points and IGNOREs the rest.
pub fn sample_sparse(
    gt: &LabelArray,
    scheme: SparseScheme,
    seed: u64,
    object_ids: Option<&[u32]>,
) -> Result<LabelArray, SynthError> {
    let n_pts = gt.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = LabelArray::ignored(n_pts);
    match scheme {
        SparseScheme::FixedN { n } => {
            if n == 0 {
                return Err(SynthError::Spec("fixed-n sparse sampling needs n >= 1".into()));
            }
            if n > n_pts {
                return Err(SynthError::TooManyLabels { n, available: n_pts });
            }
            for i in sample(&mut rng, n_pts, n) {
                out.set(i, gt.get(i));
            }
        }
        SparseScheme::Otoc => {
            let ids = object_ids.ok_or(SynthError::ObjectIds {
                expected: n_pts,
                found: 0,
            })?;
            if ids.len() != n_pts {
                return Err(SynthError::ObjectIds {
                    expected: n_pts,
                    found: ids.len(),
                });
            }
            let mut members: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
            for (i, &o) in ids.iter().enumerate() {
                members.entry(o).or_default().push(i);
            }
            for pts in members.values() {
                let i = pts[rng.random_range(0..pts.len())];
                out.set(i, gt.get(i));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_link_matrix;

    fn small() -> SynthSpec {
        SynthSpec {
            points_per_m2: 60.0,
            cameras: CameraRing {
                count: 3,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_scene(&small()).unwrap();
        let b = generate_scene(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&SynthSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.bundle.cloud, c.bundle.cloud);
    }

    #[test]
    fn structure() {
        let s = generate_scene(&small()).unwrap();
        assert_eq!(s.bundle.views.len(), 3);
        assert_eq!(s.num_objects(), 9);
        assert_eq!(s.bundle.sparse.count(), 20);
        let gt = s.bundle.gt.as_ref().unwrap();
        for i in 0..gt.len() {
            if let Some(l) = s.bundle.sparse.get(i) {
                assert_eq!(Some(l), gt.get(i));
            }
        }
        assert!(s.renders.iter().all(|r| r.visible.iter().any(|v| *v)));
    }

    #[test]
    fn link_matrix_agrees_with_renderer() {
        let s = generate_scene(&small()).unwrap();
        for (view, r) in s.bundle.views.iter().zip(&s.renders) {
            let link = build_link_matrix(
                &s.bundle.cloud,
                &view.intrinsics,
                &view.pose,
                &view.depth,
                s.bundle.meta.delta_depth,
            )
            .unwrap();
            let ours: Vec<bool> = link.links.iter().map(|l| l.valid).collect();
            assert_eq!(ours, r.visible);
        }
    }

    #[test]
    fn mask_pixels_map_to_one_object() {
        let s = generate_scene(&small()).unwrap();
        for r in &s.renders {
            let mut owner = std::collections::HashMap::new();
            for (px, w) in r.winner.iter().enumerate() {
                if let Some(i) = w {
                    let id = r.mask.ids()[px];
                    assert!(id > 0);
                    assert_eq!(*owner.entry(id).or_insert(s.object_ids[*i]), s.object_ids[*i]);
                }
            }
        }
    }

    #[test]
    fn single_wall_camera() {
        let spec = SynthSpec {
            num_boxes: 0,
            cameras: CameraRing {
                count: 1,
                radius: 0.0,
                height: 1.2,
                target_height: 1.2,
            },
            points_per_m2: 80.0,
            ..Default::default()
        };
        let s = generate_scene(&spec).unwrap();
        let r = &s.renders[0];
        let view = &s.bundle.views[0];
        let m = compose_projection(&view.intrinsics, &view.pose);
        for (i, p) in s.bundle.cloud.positions().iter().enumerate() {
            // the camera faces +x, so the x = X wall is never occluded
            if s.object_ids[i] == 4 {
                let pr = project_point(&m, p);
                match pr.pixel_in(80, 60) {
                    Some(_) => {
                        let d = r.zbuf[pr.pixel_in(80, 60).map(|(u, v)| v * 80 + u).unwrap()];
                        assert!(r.visible[i] || (pr.z - d) > 0.0);
                    }
                    None => assert!(!r.visible[i]),
                }
            }
        }
    }

    #[test]
    fn sparse_schemes() {
        let gt: LabelArray = (0..50u32).map(|i| Some(i % 3)).collect();
        assert_eq!(
            sample_sparse(&gt, SparseScheme::FixedN { n: 50 }, 1, None).unwrap(),
            gt
        );
        let ids: Vec<u32> = (0..50).map(|i| i % 7).collect();
        assert_eq!(
            sample_sparse(&gt, SparseScheme::Otoc, 1, Some(&ids))
                .unwrap()
                .count(),
            7
        );
        assert!(matches!(
            sample_sparse(&gt, SparseScheme::FixedN { n: 51 }, 1, None),
            Err(SynthError::TooManyLabels { .. })
        ));
        assert!(sample_sparse(&gt, SparseScheme::Otoc, 1, None).is_err());
    }

    #[test]
    fn rejects_degenerate_specs() {
        for spec in [
            SynthSpec {
                room: [0.0, 4.0, 2.5],
                ..Default::default()
            },
            SynthSpec {
                cameras: CameraRing {
                    count: 0,
                    ..Default::default()
                },
                ..Default::default()
            },
            SynthSpec {
                depth_scale: 10.0,
                ..Default::default()
            },
            SynthSpec {
                num_classes: 2,
                ..Default::default()
            },
        ] {
            assert!(matches!(generate_scene(&spec), Err(SynthError::Spec(_))));
        }
    }
}
