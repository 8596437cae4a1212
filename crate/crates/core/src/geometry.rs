//! Pinhole camera model and the plane geometry PatchMatch is built on.
//!
//! Conventions: the camera frame is right-handed with `+z` pointing forward
//! and image `y` pointing down. Poses are world-to-camera,
//! `X_cam = R * X_world + t`. Integer pixel `(x, y)` has its center at the
//! continuous coordinate `(x, y)`. Depth always means camera-frame `z`, never
//! the distance along the ray.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Camera-frame `z` below which a point is treated as lying on or behind the
/// image plane.
pub const MIN_POINT_DEPTH: f64 = 1e-9;

/// Denominator magnitude below which a viewing ray counts as parallel to a
/// plane.
pub const PARALLEL_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point lies behind the camera (camera-frame z = {0})")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("vector is not unit length (norm = {0})")]
    NotUnit(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

/// Pinhole intrinsics plus a world-to-camera pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Builds a camera and checks its invariants.
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at the world origin looking down `+z`.
    pub fn identity_pose(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            width,
            height,
        }
    }

    /// Checks focal lengths, principal point and rotation.
    ///
    /// The principal point may sit on the image border (closed interval).
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(GeometryError::InvalidCamera(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera("empty image".into()));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        if !(0.0..=w).contains(&self.cx) || !(0.0..=h).contains(&self.cy) {
            return Err(GeometryError::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        let orth = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        let det = self.rotation.determinant();
        if orth > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidCamera(format!(
                "rotation is not a proper rotation (orthogonality error {orth:e}, det {det})"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidCamera("non-finite translation".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn intrinsics_inverse(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Optical axis in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation.transpose() * Vector3::z()
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Viewing ray of a pixel in the camera frame, scaled to unit `z`.
    #[inline]
    pub fn ray(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }

    /// Projects a camera-frame point, returning the pixel and its depth.
    #[inline]
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> Result<(Vector2<f64>, f64), GeometryError> {
        if p.z <= MIN_POINT_DEPTH {
            return Err(GeometryError::BehindCamera(p.z));
        }
        Ok((
            Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy),
            p.z,
        ))
    }

    /// Projects a world point. The pixel may fall outside the image.
    pub fn project(&self, p: &Vector3<f64>) -> Result<(Vector2<f64>, f64), GeometryError> {
        self.project_camera_point(&self.world_to_camera(p))
    }

    /// Camera-frame point imaged at `pixel` with depth `depth`.
    #[inline]
    pub fn unproject_camera(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        if !(depth > 0.0) {
            return Err(GeometryError::NonPositiveDepth(depth));
        }
        Ok(self.ray(pixel) * depth)
    }

    /// World point imaged at `pixel` with depth `depth`.
    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>, GeometryError> {
        Ok(self.camera_to_world(&self.unproject_camera(pixel, depth)?))
    }

    /// True when the pixel can be bilinearly sampled.
    #[inline]
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x <= (self.width - 1) as f64
            && pixel.y <= (self.height - 1) as f64
    }

    /// Nearest integer pixel, if it lies inside the image.
    #[inline]
    pub fn nearest_pixel(&self, pixel: &Vector2<f64>) -> Option<(usize, usize)> {
        let x = pixel.x.round();
        let y = pixel.y.round();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some((x as usize, y as usize))
    }

    /// Rescales the camera to an image resized by `factor`, keeping pixel
    /// centers aligned.
    pub fn scaled(&self, factor: f64, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        debug_assert!((sx - factor).abs() < 0.05 && (sy - factor).abs() < 0.05);
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            rotation: self.rotation,
            translation: self.translation,
            width,
            height,
        }
    }
}

/// Relative pose taking reference-camera coordinates to source-camera
/// coordinates.
#[derive(Debug, Clone, Copy)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    pub fn between(reference: &Camera, source: &Camera) -> Self {
        let rotation = source.rotation * reference.rotation.transpose();
        let translation = source.translation - rotation * reference.translation;
        Self {
            rotation,
            translation,
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn apply_inverse(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }
}

/// Per-pixel depth and camera-frame unit normal: a local 3D plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneHypothesis {
    pub depth: f64,
    pub normal: Vector3<f64>,
}

impl PlaneHypothesis {
    pub fn new(depth: f64, normal: Vector3<f64>) -> Self {
        Self { depth, normal }
    }

    /// Fronto-parallel plane at `depth`.
    pub fn fronto_parallel(depth: f64) -> Self {
        Self::new(depth, -Vector3::z())
    }

    /// Positive depth, unit normal, and a normal facing the pixel's ray.
    pub fn is_valid_for(&self, ray: &Vector3<f64>) -> bool {
        self.depth > 0.0
            && self.depth.is_finite()
            && (self.normal.norm() - 1.0).abs() <= 1e-6
            && self.normal.dot(ray) < 0.0
    }

    /// Plane offset `n . X` for the plane through the point seen at `pixel`.
    #[inline]
    pub fn plane_offset(&self, cam: &Camera, pixel: &Vector2<f64>) -> f64 {
        self.normal.dot(&cam.ray(pixel)) * self.depth
    }
}

/// Depth at `dst` of the plane passing through the point seen at `src` with
/// the hypothesis' depth and normal.
///
/// Returns `None` when the ray through `dst` is parallel to the plane or
/// meets it at non-positive depth.
pub fn plane_induced_depth(
    cam: &Camera,
    src: &Vector2<f64>,
    hyp: &PlaneHypothesis,
    dst: &Vector2<f64>,
) -> Option<f64> {
    if src == dst {
        return (hyp.depth > 0.0).then_some(hyp.depth);
    }
    let offset = hyp.plane_offset(cam, src);
    let denom = hyp.normal.dot(&cam.ray(dst));
    if denom.abs() < PARALLEL_EPS {
        return None;
    }
    let depth = offset / denom;
    (depth > 0.0 && depth.is_finite()).then_some(depth)
}

/// Homography induced by a reference-frame plane between two cameras.
#[derive(Debug, Clone, Copy)]
pub struct PlaneHomography {
    matrix: Matrix3<f64>,
    /// `K_ref^-T n`, so that `n . ray(p) = ray_coeffs . (p, 1)`.
    ray_coeffs: Vector3<f64>,
    offset: f64,
}

impl PlaneHomography {
    /// Plane with camera-frame normal `normal` and offset `n . X = offset`.
    /// `None` for planes through the reference center.
    pub fn new(
        ref_cam: &Camera,
        src_cam: &Camera,
        pose: &RelativePose,
        normal: &Vector3<f64>,
        offset: f64,
    ) -> Option<Self> {
        if offset.abs() < PARALLEL_EPS {
            return None;
        }
        let ref_kinv = ref_cam.intrinsics_inverse();
        let matrix = src_cam.intrinsics()
            * (pose.rotation + pose.translation * normal.transpose() / offset)
            * ref_kinv;
        Some(Self {
            matrix,
            ray_coeffs: ref_kinv.transpose() * normal,
            offset,
        })
    }

    /// Maps a reference pixel to the source image; `None` when the reference
    /// ray misses the plane or the point lies behind the source camera.
    #[inline]
    pub fn map(&self, pixel: &Vector2<f64>) -> Option<Vector2<f64>> {
        let h = Vector3::new(pixel.x, pixel.y, 1.0);
        // the reference ray must meet the plane in front of the camera
        let denom = self.ray_coeffs.dot(&h);
        if denom.abs() < PARALLEL_EPS || !(self.offset / denom > 0.0) {
            return None;
        }
        let q = self.matrix * h;
        if !(q.z > MIN_POINT_DEPTH) {
            return None;
        }
        Some(Vector2::new(q.x / q.z, q.y / q.z))
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    /// Coefficients `a` with `n . ray(p) = a . (p, 1)` in the reference view.
    #[inline]
    pub fn ray_coefficients(&self) -> &Vector3<f64> {
        &self.ray_coeffs
    }

    #[inline]
    pub fn offset(&self) -> f64 {
        self.offset
    }
}

/// Warps reference-patch pixels `center + offset` into the source image
/// through the plane-induced homography. Entries are `None` when out of
/// bounds or geometrically invalid.
pub fn warp_patch(
    ref_cam: &Camera,
    src_cam: &Camera,
    center: &Vector2<f64>,
    hyp: &PlaneHypothesis,
    offsets: &[Vector2<f64>],
) -> Vec<Option<Vector2<f64>>> {
    let pose = RelativePose::between(ref_cam, src_cam);
    let offset = hyp.plane_offset(ref_cam, center);
    let Some(homography) = PlaneHomography::new(ref_cam, src_cam, &pose, &hyp.normal, offset) else {
        return vec![None; offsets.len()];
    };
    offsets
        .iter()
        .map(|o| homography.map(&(center + o)).filter(|q| src_cam.contains(q)))
        .collect()
}

/// Normal encoded as polar angles: `theta = acos(-n_z)`, `phi = atan2(n_y, n_x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarNormal {
    pub theta: f64,
    pub phi: f64,
}

pub fn normal_to_polar(n: &Vector3<f64>) -> Result<PolarNormal, GeometryError> {
    let norm = n.norm();
    if (norm - 1.0).abs() > 1e-6 {
        return Err(GeometryError::NotUnit(norm));
    }
    let theta = (-n.z / norm).clamp(-1.0, 1.0).acos();
    // atan2(0, 0) is 0, which is the pole convention
    let phi = n.y.atan2(n.x);
    Ok(PolarNormal { theta, phi })
}

pub fn polar_to_normal(p: &PolarNormal) -> Vector3<f64> {
    let (st, ct) = p.theta.sin_cos();
    let (sp, cp) = p.phi.sin_cos();
    Vector3::new(st * cp, st * sp, -ct)
}

/// Result of mapping a reference pixel into a source depth map and back.
#[derive(Debug, Clone, Copy)]
pub struct Reprojection {
    /// Pixel distance between the reference pixel and its round trip.
    pub error: f64,
    /// Depth of the reference point in the source camera.
    pub projected_depth: f64,
    /// Depth read from the source map.
    pub source_depth: f64,
    /// Source pixel used for the lookup.
    pub source_pixel: (usize, usize),
}

/// Forward-backward check: the reference point at `pixel`/`depth` is
/// projected into the source, the source depth is read with nearest-neighbor
/// lookup, back-projected and projected again into the reference.
///
/// `lookup` returns the source depth at an integer pixel, if valid.
pub fn forward_backward<F>(
    ref_cam: &Camera,
    src_cam: &Camera,
    pose: &RelativePose,
    pixel: &Vector2<f64>,
    depth: f64,
    lookup: F,
) -> Option<Reprojection>
where
    F: Fn(usize, usize) -> Option<f64>,
{
    let x_ref = ref_cam.unproject_camera(pixel, depth).ok()?;
    let x_src = pose.apply(&x_ref);
    let (q, projected_depth) = src_cam.project_camera_point(&x_src).ok()?;
    let (qx, qy) = src_cam.nearest_pixel(&q)?;
    let source_depth = lookup(qx, qy)?;
    let back = src_cam.unproject_camera(&q, source_depth).ok()?;
    let (p2, _) = ref_cam.project_camera_point(&pose.apply_inverse(&back)).ok()?;
    Some(Reprojection {
        error: (p2 - pixel).norm(),
        projected_depth,
        source_depth,
        source_pixel: (qx, qy),
    })
}

/// Angle in radians between two unit vectors.
#[inline]
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_camera(rng: &mut ChaCha8Rng) -> Camera {
        let axis = Vector3::new(rng.random(), rng.random(), rng.random::<f64>()) - Vector3::repeat(0.5);
        let rot = Rotation3::new(axis * 0.6).into_inner();
        let t = Vector3::new(rng.random(), rng.random(), rng.random::<f64>()) * 2.0;
        Camera::new(
            rng.random_range(100.0..800.0),
            rng.random_range(100.0..800.0),
            rng.random_range(100.0..300.0),
            rng.random_range(80.0..200.0),
            rot,
            t,
            400,
            300,
        )
        .unwrap()
    }

    #[test]
    fn project_principal_ray() {
        let cam = Camera::identity_pose(1.0, 1.0, 0.0, 0.0, 4, 4);
        let (px, z) = cam.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(px, Vector2::new(0.0, 0.0));
        assert_eq!(z, 1.0);
    }

    #[test]
    fn project_hand_computed() {
        let cam = Camera::identity_pose(100.0, 100.0, 50.0, 50.0, 200, 100);
        let (px, z) = cam.project(&Vector3::new(0.5, 0.0, 1.0)).unwrap();
        // x' = 100 * 0.5 / 1 + 50
        assert!((px - Vector2::new(100.0, 50.0)).norm() < 1e-12);
        assert_eq!(z, 1.0);
    }

    #[test]
    fn project_behind_camera() {
        let cam = Camera::identity_pose(100.0, 100.0, 50.0, 50.0, 100, 100);
        assert!(matches!(
            cam.project(&Vector3::new(1.0, 1.0, 0.0)),
            Err(GeometryError::BehindCamera(_))
        ));
        assert!(cam.project(&Vector3::new(1.0, 1.0, -2.0)).is_err());
    }

    #[test]
    fn unproject_roundtrip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let cam = random_camera(&mut rng);
            let px = Vector2::new(rng.random_range(0.0..400.0), rng.random_range(0.0..300.0));
            let z = rng.random_range(0.1..50.0);
            let world = cam.unproject(&px, z).unwrap();
            let (back, bz) = cam.project(&world).unwrap();
            worst = worst
                .max((back - px).norm() / px.norm().max(1.0))
                .max((bz - z).abs() / z);
        }
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn unproject_principal_point() {
        let cam = Camera::identity_pose(200.0, 200.0, 50.0, 40.0, 100, 80);
        let p = cam.unproject(&Vector2::new(50.0, 40.0), 2.0).unwrap();
        assert!((p - Vector3::new(0.0, 0.0, 2.0)).norm() < 1e-15);
        assert!(matches!(
            cam.unproject(&Vector2::new(1.0, 1.0), 0.0),
            Err(GeometryError::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn camera_validation() {
        let bad_rot = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(10.0, 10.0, 5.0, 5.0, bad_rot, Vector3::zeros(), 10, 10).is_err());
        let reflection = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(10.0, 10.0, 5.0, 5.0, reflection, Vector3::zeros(), 10, 10).is_err());
        assert!(Camera::new(-1.0, 10.0, 5.0, 5.0, Matrix3::identity(), Vector3::zeros(), 10, 10).is_err());
        assert!(Camera::new(10.0, 10.0, 15.0, 5.0, Matrix3::identity(), Vector3::zeros(), 10, 10).is_err());
    }

    #[test]
    fn plane_depth_fronto_parallel_is_constant() {
        let cam = Camera::identity_pose(300.0, 300.0, 160.0, 120.0, 320, 240);
        let hyp = PlaneHypothesis::fronto_parallel(2.5);
        let i = Vector2::new(10.0, 20.0);
        for (x, y) in [(0.0, 0.0), (319.0, 239.0), (160.0, 5.0), (42.5, 200.25)] {
            let z = plane_induced_depth(&cam, &i, &hyp, &Vector2::new(x, y)).unwrap();
            assert!((z - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn plane_depth_slanted_matches_closed_form() {
        let cam = Camera::identity_pose(100.0, 100.0, 50.0, 50.0, 100, 100);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let hyp = PlaneHypothesis::new(1.0, Vector3::new(0.0, -s, -s));
        let i = Vector2::new(50.0, 50.0);
        let j = Vector2::new(50.0, 51.0);
        // Plane through (0,0,1) with normal (0,-s,-s): y + z = 1. The ray of j
        // is (0, 0.01, 1), so z * (0.01 + 1) = 1.
        let expected = 1.0 / 1.01;
        let z = plane_induced_depth(&cam, &i, &hyp, &j).unwrap();
        assert!((z - expected).abs() < 1e-12, "{z} vs {expected}");
    }

    #[test]
    fn plane_depth_parallel_ray_is_invalid() {
        let cam = Camera::identity_pose(100.0, 100.0, 50.0, 50.0, 100, 100);
        // plane x = 0.5 seen at pixel (100, 50); ray of pixel (50,50) is the
        // optical axis which is parallel to that plane
        let hyp = PlaneHypothesis::new(1.0, Vector3::new(-1.0, 0.0, 0.0));
        let i = Vector2::new(100.0, 50.0);
        assert!(plane_induced_depth(&cam, &i, &hyp, &Vector2::new(50.0, 50.0)).is_none());
        // a ray hitting the plane behind the camera
        assert!(plane_induced_depth(&cam, &i, &hyp, &Vector2::new(10.0, 50.0)).is_none());
    }

    #[test]
    fn plane_depth_self_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cam = random_camera(&mut rng);
        for _ in 0..100 {
            let i = Vector2::new(rng.random_range(0.0..400.0), rng.random_range(0.0..300.0));
            let n = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), -1.0).normalize();
            let z = rng.random_range(0.5..10.0);
            let hyp = PlaneHypothesis::new(z, n);
            assert_eq!(plane_induced_depth(&cam, &i, &hyp, &i), Some(z));
        }
    }

    #[test]
    fn warp_identity_cameras() {
        let cam = Camera::identity_pose(300.0, 300.0, 160.0, 120.0, 320, 240);
        let hyp = PlaneHypothesis::new(3.0, Vector3::new(0.2, -0.1, -1.0).normalize());
        let center = Vector2::new(100.0, 80.0);
        let offsets: Vec<_> = (-5..=5)
            .flat_map(|y| (-5..=5).map(move |x| Vector2::new(x as f64, y as f64)))
            .collect();
        let warped = warp_patch(&cam, &cam, &center, &hyp, &offsets);
        for (o, w) in offsets.iter().zip(&warped) {
            let w = w.expect("in bounds");
            assert!((w - (center + o)).norm() < 1e-6);
        }
    }

    #[test]
    fn warp_matches_unproject_project() {
        let ref_cam = Camera::identity_pose(300.0, 310.0, 160.0, 120.0, 320, 240);
        let rot = Rotation3::from_euler_angles(0.02, -0.08, 0.01).into_inner();
        let src_cam = Camera::new(280.0, 280.0, 158.0, 121.0, rot, Vector3::new(-0.3, 0.02, 0.05), 320, 240).unwrap();
        let hyp = PlaneHypothesis::new(4.0, Vector3::new(0.3, -0.2, -1.0).normalize());
        let center = Vector2::new(150.0, 110.0);
        let offsets: Vec<_> = (-5..=5)
            .flat_map(|y| (-5..=5).map(move |x| Vector2::new(x as f64, y as f64)))
            .collect();
        let warped = warp_patch(&ref_cam, &src_cam, &center, &hyp, &offsets);
        for (o, w) in offsets.iter().zip(&warped) {
            let p = center + o;
            let z = plane_induced_depth(&ref_cam, &center, &hyp, &p).unwrap();
            let world = ref_cam.unproject(&p, z).unwrap();
            let (expected, _) = src_cam.project(&world).unwrap();
            let w = w.expect("in bounds");
            assert!((w - expected).norm() < 1e-8, "{w} vs {expected}");
        }
    }

    #[test]
    fn warp_edge_on_plane_is_invalid() {
        let cam = Camera::identity_pose(300.0, 300.0, 160.0, 120.0, 320, 240);
        // plane containing the optical center: normal perpendicular to the
        // center ray
        let center = Vector2::new(160.0, 120.0);
        let hyp = PlaneHypothesis::new(2.0, Vector3::new(1.0, 0.0, 0.0));
        let offsets = [Vector2::new(0.0, 0.0), Vector2::new(1.0, 2.0), Vector2::new(-3.0, 1.0)];
        let src = Camera::new(300.0, 300.0, 160.0, 120.0, Matrix3::identity(), Vector3::new(-0.1, 0.0, 0.0), 320, 240).unwrap();
        assert!(warp_patch(&cam, &src, &center, &hyp, &offsets).iter().all(Option::is_none));
    }

    #[test]
    fn polar_conventions() {
        let p = normal_to_polar(&Vector3::new(0.0, 0.0, -1.0)).unwrap();
        assert_eq!((p.theta, p.phi), (0.0, 0.0));
        let p = normal_to_polar(&Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((p.theta - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert_eq!(p.phi, 0.0);
        assert!(matches!(
            normal_to_polar(&Vector3::new(1.0, 1.0, 0.0)),
            Err(GeometryError::NotUnit(_))
        ));
        // at the pole phi is irrelevant
        for phi in [-3.0, -1.0, 0.5, 2.9] {
            let n = polar_to_normal(&PolarNormal { theta: 0.0, phi });
            assert!((n - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn polar_roundtrip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm() < 1e-3 {
                continue;
            }
            let n = v.normalize();
            let back = polar_to_normal(&normal_to_polar(&n).unwrap());
            assert!((back - n).norm() < 1e-6);
        }
    }

    #[test]
    fn forward_backward_consistent_plane() {
        let ref_cam = Camera::identity_pose(200.0, 200.0, 80.0, 60.0, 160, 120);
        let src_cam = Camera::new(200.0, 200.0, 80.0, 60.0, Matrix3::identity(), Vector3::new(-0.2, 0.0, 0.0), 160, 120).unwrap();
        let pose = RelativePose::between(&ref_cam, &src_cam);
        // fronto-parallel wall at z = 2 in both cameras
        let r = forward_backward(&ref_cam, &src_cam, &pose, &Vector2::new(70.0, 40.0), 2.0, |_, _| Some(2.0)).unwrap();
        assert!(r.error < 1e-9);
        assert!((r.projected_depth - 2.0).abs() < 1e-12);
    }
}
