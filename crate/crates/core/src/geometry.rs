//! Pinhole camera, rigid poses and pose-error metrics.
//!
//! Poses are stored camera-to-world: `world = R * cam + t`. The inverse maps
//! world points into the camera frame, which is what every loss consumes.

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

/// Points with `|Z|` below this are classified as lying on the camera plane.
pub const NEAR_PLANE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(f: f64, cx: f64, cy: f64) -> Self {
        assert!(f > 0.0, "focal length must be positive, got {f}");
        Self { f, cx, cy }
    }

    /// The calibration matrix `C`.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.f, 0.0, self.cx, 0.0, self.f, self.cy, 0.0, 0.0, 1.0)
    }

    /// Intrinsics for an image resized by `scale` (e.g. 0.125 for 640x480 -> 80x60).
    pub fn scaled(&self, scale: f64) -> Self {
        Self::new(self.f * scale, self.cx * scale, self.cy * scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
}

impl PixelPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// A point expressed in the camera frame; `depth()` is its Z component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPoint(pub Vector3<f64>);

impl CameraPoint {
    pub fn depth(&self) -> f64 {
        self.0.z
    }
}

/// Pixel-scaled viewing ray `(x - cx, y - cy, f)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayVector(pub Vector3<f64>);

impl RayVector {
    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DepthStatus {
    InFront,
    Behind,
    NearPlane,
}

impl DepthStatus {
    pub fn classify(z: f64) -> Self {
        if z.abs() < NEAR_PLANE_EPS || z.is_nan() {
            DepthStatus::NearPlane
        } else if z > 0.0 {
            DepthStatus::InFront
        } else {
            DepthStatus::Behind
        }
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    /// Rotation by `angle` radians about `axis`, then translation `t`.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Self::new(*r.matrix(), t)
    }

    /// Camera at `eye` looking at `target`. Camera axes: x right, y down, z forward.
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(up);
        if x.norm() < 1e-9 {
            // up is parallel to the viewing direction
            let alt = if z.x.abs() < 0.9 {
                Vector3::x()
            } else {
                Vector3::y()
            };
            x = z.cross(&alt);
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_columns(&[x, y, z]);
        Self::new(r, *eye)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Builds a pose from the top 3x4 block of a homogeneous matrix, as-is.
    pub fn from_homogeneous(m: &Matrix4<f64>) -> Self {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }

    /// Checks the rotation block against `tol` for orthonormality and unit determinant.
    pub fn is_valid(&self, tol: f64) -> bool {
        self.rotation.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
            && self.orthonormality_error() < tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
    }

    /// Nearest rotation (Frobenius) to the stored rotation block.
    pub fn orthonormalized(&self) -> Self {
        Self::new(nearest_rotation(&self.rotation), self.translation)
    }
}

/// Projects an arbitrary 3x3 matrix onto SO(3) via SVD.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let d = (u * vt).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt
}

/// `h^{-1} y` for a camera-to-world pose `h`.
pub fn world_to_camera(pose: &PoseSE3, y: &Vector3<f64>) -> CameraPoint {
    CameraPoint(pose.rotation.transpose() * (y - pose.translation))
}

/// Pinhole projection. The raw pixel is returned for every depth, including
/// points behind the camera and on the camera plane.
pub fn project(intr: &CameraIntrinsics, d: &CameraPoint) -> (PixelPoint, DepthStatus) {
    let v = d.0;
    let px = PixelPoint::new(intr.f * v.x / v.z + intr.cx, intr.f * v.y / v.z + intr.cy);
    (px, DepthStatus::classify(v.z))
}

pub fn ray_vector(intr: &CameraIntrinsics, p: &PixelPoint) -> RayVector {
    RayVector(Vector3::new(p.x - intr.cx, p.y - intr.cy, intr.f))
}

/// Composition `a ∘ b`, or `a⁻¹` when `b` is absent.
pub fn pose_compose_inverse(a: &PoseSE3, b: Option<&PoseSE3>) -> PoseSE3 {
    match b {
        Some(b) => a.compose(b),
        None => a.inverse(),
    }
}

/// Rotation error in degrees and distance between camera centers.
pub fn pose_error(est: &PoseSE3, gt: &PoseSE3) -> (f64, f64) {
    let rel = est.rotation.transpose() * gt.rotation;
    let c = (rel.trace() - 1.0) / 2.0;
    let s = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    )
    .norm()
        / 2.0;
    let rot_deg = s.atan2(c).to_degrees();
    let trans = (est.center() - gt.center()).norm();
    (rot_deg, trans)
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues exponential map.
pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    if theta < 1e-12 {
        return Matrix3::identity() + skew(w);
    }
    *Rotation3::from_axis_angle(&Unit::new_normalize(*w), theta).matrix()
}
