//! Pinhole projection and the per-view point/pixel link matrix.
//!
//! Poses are world-to-camera: `x_cam = R * x_world + t`. Inputs given as
//! camera-to-world `(R_cw, c)` convert with `R = R_cwᵀ`, `t = -R_cwᵀ c`.

use nalgebra::{Matrix3, Matrix3x4, Point3, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::PointCloud;

/// Points with projected depth at or below this are behind the camera.
pub const BEHIND_CAMERA_EPS: f64 = 1e-9;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("rotation is not orthonormal (max |RᵀR - I| = {deviation:.3e}, det = {det:.6})")]
    NotOrthonormal { deviation: f64, det: f64 },
    #[error("non-finite pose entry")]
    NonFinitePose,
    #[error("depth map is {found_w}x{found_h}, camera is {w}x{h}")]
    DepthSize {
        w: usize,
        h: usize,
        found_w: usize,
        found_h: usize,
    },
    #[error("depth value at ({u}, {v}) is negative or non-finite")]
    BadDepth { u: usize, v: usize },
    #[error("depth tolerance must be positive and finite, got {0}")]
    BadDelta(f64),
}

/// Pinhole intrinsics in pixels plus the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeometryError::Intrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::Intrinsics("non-finite principal point".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::Intrinsics(format!(
                "image size must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinitePose);
        }
        let deviation = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if deviation > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(GeometryError::NotOrthonormal { deviation, det });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Pose of a camera at `eye` looking at `target`, image x right and y
    /// down, with `up` roughly opposite to image y.
    pub fn look_at(eye: Point3<f64>, target: Point3<f64>, up: Vector3<f64>) -> Result<Self, GeometryError> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 || !forward.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinitePose);
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye.coords);
        Self::new(rotation, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }
}

/// The 3x4 matrix `K [R | t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix(pub Matrix3x4<f64>);

pub fn compose_projection(k: &CameraIntrinsics, pose: &CameraPose) -> ProjectionMatrix {
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&pose.rotation);
    rt.set_column(3, &pose.translation);
    ProjectionMatrix(k.matrix() * rt)
}

/// Raw projection of one point: pixel coordinates before rounding and the
/// unnormalized depth `z'`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

impl Projection {
    pub fn behind_camera(&self) -> bool {
        !(self.z > BEHIND_CAMERA_EPS)
    }

    /// Integer pixel under round-to-nearest, ties toward +inf.
    pub fn pixel(&self) -> (i64, i64) {
        (round_half_up(self.u), round_half_up(self.v))
    }

    /// Pixel inside `[0, W) x [0, H)` for a point in front of the camera.
    pub fn pixel_in(&self, width: usize, height: usize) -> Option<(usize, usize)> {
        if self.behind_camera() {
            return None;
        }
        let (u, v) = self.pixel();
        if u >= 0 && v >= 0 && (u as u64) < width as u64 && (v as u64) < height as u64 {
            Some((u as usize, v as usize))
        } else {
            None
        }
    }
}

/// Round to nearest with ties toward positive infinity. Saturates on overflow.
pub fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

pub fn project_point(m: &ProjectionMatrix, p: &Point3<f64>) -> Projection {
    let h = m.0 * Vector4::new(p.x, p.y, p.z, 1.0);
    Projection {
        u: h.x / h.z,
        v: h.y / h.z,
        z: h.z,
    }
}

pub fn project_points(cloud: &PointCloud, m: &ProjectionMatrix) -> Vec<Projection> {
    cloud
        .positions()
        .par_iter()
        .map(|p| project_point(m, p))
        .collect()
}

/// Metric depth image, row-major, 0 = no measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, GeometryError> {
        if data.len() != width * height {
            return Err(GeometryError::DepthSize {
                w: width,
                h: height,
                found_w: data.len(),
                found_h: 1,
            });
        }
        if let Some(i) = data.iter().position(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(GeometryError::BadDepth {
                u: i % width.max(1),
                v: i / width.max(1),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Correspondence of one point with a pixel of one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub u: i64,
    pub v: i64,
    /// Projected camera-space depth, kept for diagnostics.
    pub z: f64,
    pub valid: bool,
}

/// Per-point links for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkMatrix {
    pub width: usize,
    pub height: usize,
    pub links: Vec<Link>,
}

impl LinkMatrix {
    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn visible_count(&self) -> usize {
        self.links.iter().filter(|l| l.valid).count()
    }

    /// Pixel of a valid link.
    pub fn pixel(&self, i: usize) -> Option<(usize, usize)> {
        let l = &self.links[i];
        l.valid.then_some((l.u as usize, l.v as usize))
    }
}

/// Links every point to its pixel, rejecting points outside the image,
/// behind the camera, on a depth hole, or further than `delta` meters from
/// the observed depth.
pub fn build_link_matrix(
    cloud: &PointCloud,
    k: &CameraIntrinsics,
    pose: &CameraPose,
    depth: &DepthMap,
    delta: f64,
) -> Result<LinkMatrix, GeometryError> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(GeometryError::BadDelta(delta));
    }
    if depth.width != k.width || depth.height != k.height {
        return Err(GeometryError::DepthSize {
            w: k.width,
            h: k.height,
            found_w: depth.width,
            found_h: depth.height,
        });
    }
    let m = compose_projection(k, pose);
    let links = cloud
        .positions()
        .par_iter()
        .map(|p| {
            let proj = project_point(&m, p);
            let (u, v) = proj.pixel();
            let valid = proj.pixel_in(k.width, k.height).is_some_and(|(pu, pv)| {
                let d = depth.get(pu, pv);
                d > 0.0 && (d - proj.z).abs() <= delta
            });
            Link {
                u,
                v,
                z: proj.z,
                valid,
            }
        })
        .collect();
    Ok(LinkMatrix {
        width: k.width,
        height: k.height,
        links,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_k(w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, w, h).unwrap()
    }

    #[test]
    fn identity_projection() {
        let m = compose_projection(&unit_k(1, 1), &CameraPose::identity());
        let mut expected = Matrix3x4::zeros();
        expected.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
        assert_eq!(m.0, expected);
    }

    #[test]
    fn translation_lands_in_last_column() {
        let pose = CameraPose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 2.0)).unwrap();
        let m = compose_projection(&unit_k(1, 1), &pose);
        assert_eq!(m.0.column(3).into_owned(), Vector3::new(0.0, 0.0, 2.0));
    }

    #[test]
    fn composed_matrix_matches_explicit_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let k = CameraIntrinsics::new(
                rng.random_range(10.0..900.0),
                rng.random_range(10.0..900.0),
                rng.random_range(-50.0..500.0),
                rng.random_range(-50.0..500.0),
                640,
                480,
            )
            .unwrap();
            let rot = Rotation3::from_euler_angles(
                rng.random_range(-3.0..3.0),
                rng.random_range(-1.5..1.5),
                rng.random_range(-3.0..3.0),
            );
            let t = Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let pose = CameraPose::new(*rot.matrix(), t).unwrap();
            let m = compose_projection(&k, &pose);

            // Entry-by-entry 3x3 * 3x4 product.
            let km = [[k.fx, 0.0, k.cx], [0.0, k.fy, k.cy], [0.0, 0.0, 1.0]];
            let mut rt = [[0.0; 4]; 3];
            for r in 0..3 {
                for c in 0..3 {
                    rt[r][c] = rot.matrix()[(r, c)];
                }
                rt[r][3] = t[r];
            }
            for r in 0..3 {
                for c in 0..4 {
                    let want: f64 = (0..3).map(|j| km[r][j] * rt[j][c]).sum();
                    assert!((m.0[(r, c)] - want).abs() <= 1e-12 * want.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = 1.01;
        assert!(matches!(
            CameraPose::new(r, Vector3::zeros()),
            Err(GeometryError::NotOrthonormal { .. })
        ));
        // reflection: orthonormal but det = -1
        let r = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(CameraPose::new(r, Vector3::zeros()).is_err());
    }

    #[test]
    fn projects_hand_examples() {
        let m = compose_projection(&unit_k(1, 1), &CameraPose::identity());
        let p = project_point(&m, &Point3::new(0.0, 0.0, 1.0));
        assert_eq!((p.u, p.v, p.z), (0.0, 0.0, 1.0));
        assert!(!p.behind_camera());

        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 200, 200).unwrap();
        let m = compose_projection(&k, &CameraPose::identity());
        let p = project_point(&m, &Point3::new(1.0, 0.0, 2.0));
        assert_eq!(p.u, 100.0);
        assert_eq!(p.z, 2.0);

        let m = compose_projection(&unit_k(1, 1), &CameraPose::identity());
        assert!(project_point(&m, &Point3::new(0.0, 0.0, -1.0)).behind_camera());
        assert!(project_point(&m, &Point3::new(0.0, 0.0, 0.0)).behind_camera());
    }

    #[test]
    fn rounding_ties_go_up() {
        assert_eq!(round_half_up(0.5), 1);
        assert_eq!(round_half_up(-0.5), 0);
        assert_eq!(round_half_up(1.49), 1);
        assert_eq!(round_half_up(-1.5), -1);
        assert_eq!(round_half_up(2.5), 3);
    }

    #[test]
    fn look_at_points_forward() {
        let pose = CameraPose::look_at(
            Point3::new(0.0, -3.0, 1.0),
            Point3::new(0.0, 0.0, 1.0),
            Vector3::z(),
        )
        .unwrap();
        let c = pose.transform(&Point3::new(0.0, 0.0, 1.0));
        assert!((c.z - 3.0).abs() < 1e-12 && c.x.abs() < 1e-12 && c.y.abs() < 1e-12);
        // world up maps to image up (negative y)
        assert!(pose.transform(&Point3::new(0.0, 0.0, 2.0)).y < 0.0);
    }

    fn link_setup() -> (PointCloud, CameraIntrinsics, DepthMap) {
        let k = CameraIntrinsics::new(10.0, 10.0, 2.0, 2.0, 4, 4).unwrap();
        let mut depth = vec![2.0; 16];
        depth[0] = 0.0; // hole at (0, 0)
        let depth = DepthMap::new(4, 4, depth).unwrap();
        let cloud = PointCloud::from_positions(vec![
            Point3::new(0.0, 0.0, 2.0),   // pixel (2,2), depth matches
            Point3::new(0.0, 0.0, 2.5),   // occluded: 0.5 behind surface
            Point3::new(1.0, 0.0, 2.0),   // u = 7, outside
            Point3::new(-0.4, -0.4, 2.0), // pixel (0,0), a depth hole
            Point3::new(0.0, 0.0, -2.0),  // behind
            Point3::new(0.0, 0.0, 2.04),  // within delta
        ])
        .unwrap();
        (cloud, k, depth)
    }

    #[test]
    fn link_matrix_rules() {
        let (cloud, k, depth) = link_setup();
        let lm = build_link_matrix(&cloud, &k, &CameraPose::identity(), &depth, 0.05).unwrap();
        let valid: Vec<bool> = lm.links.iter().map(|l| l.valid).collect();
        assert_eq!(valid, vec![true, false, false, false, false, true]);
        assert_eq!((lm.links[0].u, lm.links[0].v), (2, 2));
        assert_eq!((lm.links[3].u, lm.links[3].v), (0, 0));
        assert_eq!(lm.visible_count(), 2);
    }

    #[test]
    fn link_matrix_rejects_bad_inputs() {
        let (cloud, k, depth) = link_setup();
        let pose = CameraPose::identity();
        assert!(matches!(
            build_link_matrix(&cloud, &k, &pose, &depth, 0.0),
            Err(GeometryError::BadDelta(_))
        ));
        let small = DepthMap::zeros(2, 2);
        assert!(matches!(
            build_link_matrix(&cloud, &k, &pose, &small, 0.05),
            Err(GeometryError::DepthSize { .. })
        ));
    }

    proptest! {
        #[test]
        fn rigid_world_change_keeps_links(
            yaw in -3.1f64..3.1, pitch in -1.5f64..1.5, roll in -3.1f64..3.1,
            tx in -5.0f64..5.0, ty in -5.0f64..5.0, tz in -5.0f64..5.0,
            pts in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 1.0f64..4.0), 1..40),
        ) {
            let k = CameraIntrinsics::new(60.0, 60.0, 32.0, 24.0, 64, 48).unwrap();
            let positions: Vec<Point3<f64>> = pts.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect();
            let cloud = PointCloud::from_positions(positions.clone()).unwrap();
            let pose = CameraPose::identity();
            let m0 = compose_projection(&k, &pose);

            // world' = G world; pose' = pose * G⁻¹
            let g_rot = Rotation3::from_euler_angles(roll, pitch, yaw);
            let g_t = Vector3::new(tx, ty, tz);
            let moved: Vec<Point3<f64>> = positions.iter().map(|p| Point3::from(g_rot * p.coords + g_t)).collect();
            let inv_rot = g_rot.inverse();
            let pose2 = CameraPose::new(*inv_rot.matrix(), -(inv_rot * g_t)).unwrap();
            let m1 = compose_projection(&k, &pose2);
            for (a, b) in positions.iter().zip(&moved) {
                let pa = project_point(&m0, a);
                let pb = project_point(&m1, b);
                prop_assert!((pa.u - pb.u).abs() < 1e-6);
                prop_assert!((pa.v - pb.v).abs() < 1e-6);
            }
            let _ = cloud;
        }

        #[test]
        fn link_matrix_is_per_point(
            pts in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0.5f64..3.0), 2..60),
            seed in any::<u64>(),
        ) {
            let k = CameraIntrinsics::new(10.0, 10.0, 4.0, 4.0, 8, 8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let depth = DepthMap::new(8, 8, (0..64).map(|_| rng.random_range(0.0..3.0)).collect()).unwrap();
            let positions: Vec<Point3<f64>> = pts.iter().map(|&(x, y, z)| Point3::new(x, y, z)).collect();
            let cloud = PointCloud::from_positions(positions.clone()).unwrap();
            let lm = build_link_matrix(&cloud, &k, &CameraPose::identity(), &depth, 0.3).unwrap();
            let mut rev = positions.clone();
            rev.reverse();
            let lm_rev = build_link_matrix(&PointCloud::from_positions(rev).unwrap(), &k, &CameraPose::identity(), &depth, 0.3).unwrap();
            let n = positions.len();
            for i in 0..n {
                prop_assert_eq!(lm.links[i], lm_rev.links[n - 1 - i]);
            }
        }
    }
}
