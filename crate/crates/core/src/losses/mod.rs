//! Reprojection, angle-based, multi-view and photometric losses with analytic
//! gradients with respect to the scene-coordinate predictions.
//!
//! Every per-point loss is a plain Euclidean norm (not squared). Pathologies of
//! the pixel-space reprojection loss are reported through [`LossReport`]
//! diagnostics and never clamped away.

mod photometric;

pub use photometric::{
    bilinear_sample, photometric_image_loss, ssim3x3, ssim3x3_masked, BilinearSample, SsimMap,
    SSIM_C1, SSIM_C2,
};

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    project, ray_vector, world_to_camera, CameraIntrinsics, DepthStatus, PixelPoint, PoseSE3,
};
use crate::scenegen::{CoVisibilityGraph, ImageId, Observation, PointId};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("prediction and observation point sets differ: {0}")]
    IndexMismatch(String),
    #[error("no pose for image {0}")]
    MissingPose(ImageId),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReprojectionMode {
    /// Pixel-space reprojection error.
    Reproj,
    /// Chord distance between prediction and observation rays.
    Angle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_multiview: f64,
    pub lambda_photo: f64,
    pub alpha_ssim: f64,
    /// Lower bound on `‖D‖` in the angle loss.
    pub epsilon_norm: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_multiview: 60.0,
            lambda_photo: 20.0,
            alpha_ssim: 0.85,
            epsilon_norm: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lambda_multiview >= 0.0 && self.lambda_photo >= 0.0 && self.alpha_ssim >= 0.0) {
            return Err("loss weights must be non-negative".into());
        }
        if self.alpha_ssim > 1.0 {
            return Err(format!(
                "alpha_ssim must lie in [0, 1], got {}",
                self.alpha_ssim
            ));
        }
        if !(self.epsilon_norm > 0.0) {
            return Err("epsilon_norm must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointLossTerm {
    pub value: f64,
    /// Gradient of `value` with respect to the world-frame prediction.
    pub grad: Vector3<f64>,
    pub depth_status: DepthStatus,
    /// Angle between the prediction ray and the observation ray, radians.
    pub angle_theta: f64,
}

impl PointLossTerm {
    pub fn zero(depth_status: DepthStatus) -> Self {
        Self {
            value: 0.0,
            grad: Vector3::zeros(),
            depth_status,
            angle_theta: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// Sum of the finite term values, in index order.
    pub total: f64,
    /// One term per prediction, aligned with the prediction order.
    pub terms: Vec<PointLossTerm>,
    pub behind_count: usize,
    pub nonfinite: bool,
    /// Number of points that contributed (all of them, except for the
    /// photometric loss which masks invalid samples).
    pub valid_count: usize,
}

impl LossReport {
    pub fn from_terms(terms: Vec<PointLossTerm>) -> Self {
        let n = terms.len();
        Self::from_terms_with_valid(terms, n)
    }

    fn from_terms_with_valid(terms: Vec<PointLossTerm>, valid_count: usize) -> Self {
        let mut total = 0.0;
        let mut behind_count = 0;
        let mut nonfinite = false;
        for t in &terms {
            if t.value.is_finite() {
                total += t.value;
            }
            if !t.is_finite() {
                nonfinite = true;
            }
            if t.depth_status == DepthStatus::Behind {
                behind_count += 1;
            }
        }
        Self {
            total,
            terms,
            behind_count,
            nonfinite,
            valid_count,
        }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.terms.is_empty() {
            0.0
        } else {
            self.valid_count as f64 / self.terms.len() as f64
        }
    }

    /// Number of terms with a non-finite value or gradient.
    pub fn nonfinite_count(&self) -> usize {
        self.terms.iter().filter(|t| !t.is_finite()).count()
    }
}

/// Per-point scene-coordinate predictions `y_k(I_i; w)` for one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictionGrid {
    pub point_ids: Vec<PointId>,
    pub coords: Vec<Vector3<f64>>,
}

impl PredictionGrid {
    pub fn new(point_ids: Vec<PointId>, coords: Vec<Vector3<f64>>) -> Self {
        assert_eq!(point_ids.len(), coords.len());
        Self { point_ids, coords }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn check_against(&self, observations: &[Observation]) -> Result<(), LossError> {
        if self.len() != observations.len() {
            return Err(LossError::IndexMismatch(format!(
                "{} predictions vs {} observations",
                self.len(),
                observations.len()
            )));
        }
        for (idx, (k, o)) in self.point_ids.iter().zip(observations).enumerate() {
            if *k != o.point_id {
                return Err(LossError::IndexMismatch(format!(
                    "entry {idx}: prediction for point {k}, observation of point {}",
                    o.point_id
                )));
            }
        }
        Ok(())
    }
}

/// Pixel-space reprojection error `‖C h⁻¹ y − p‖`. No guard at `Z = 0`.
pub fn reproj_point(
    intr: &CameraIntrinsics,
    pose: &PoseSE3,
    y: &Vector3<f64>,
    p: &PixelPoint,
) -> PointLossTerm {
    let d = world_to_camera(pose, y);
    let (q, status) = project(intr, &d);
    let (x, yy, z) = (d.0.x, d.0.y, d.0.z);
    let u = q.x - p.x;
    let v = q.y - p.y;
    let value = u.hypot(v);
    let grad = if value == 0.0 {
        Vector3::zeros()
    } else {
        let f = intr.f;
        let inv_z = 1.0 / z;
        let g_d = Vector3::new(
            u * f * inv_z,
            v * f * inv_z,
            -(u * f * x + v * f * yy) * inv_z * inv_z,
        ) / value;
        pose.rotation * g_d
    };
    let ray = ray_vector(intr, p);
    PointLossTerm {
        value,
        grad,
        depth_status: status,
        angle_theta: angle_between(&d.0, &ray.0),
    }
}

/// Angle-based reprojection loss `‖ (‖d‖/‖D‖)·D − d ‖`, with `‖D‖` bounded
/// below by `cfg.epsilon_norm`.
pub fn angle_point(
    intr: &CameraIntrinsics,
    pose: &PoseSE3,
    y: &Vector3<f64>,
    p: &PixelPoint,
    cfg: &LossConfig,
) -> PointLossTerm {
    let d_cam = world_to_camera(pose, y);
    let big_d = d_cam.0;
    let ray = ray_vector(intr, p).0;
    let ray_norm = ray.norm();
    let n = big_d.norm();
    let guarded = n.max(cfg.epsilon_norm);
    let s = ray_norm / guarded;
    let r = s * big_d - ray;
    let value = r.norm();
    let grad = if value == 0.0 {
        Vector3::zeros()
    } else {
        let jac = if n > cfg.epsilon_norm {
            s * (Matrix3::identity() - big_d * big_d.transpose() / (n * n))
        } else {
            s * Matrix3::identity()
        };
        pose.rotation * (jac * r / value)
    };
    PointLossTerm {
        value,
        grad,
        depth_status: DepthStatus::classify(big_d.z),
        angle_theta: angle_between(&big_d, &ray),
    }
}

fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

fn point_term(
    mode: ReprojectionMode,
    intr: &CameraIntrinsics,
    pose: &PoseSE3,
    y: &Vector3<f64>,
    p: &PixelPoint,
    cfg: &LossConfig,
) -> PointLossTerm {
    match mode {
        ReprojectionMode::Reproj => reproj_point(intr, pose, y, p),
        ReprojectionMode::Angle => angle_point(intr, pose, y, p, cfg),
    }
}

/// Single-view loss summed over all points of one image.
pub fn image_loss(
    mode: ReprojectionMode,
    intr: &CameraIntrinsics,
    pose: &PoseSE3,
    predictions: &PredictionGrid,
    observations: &[Observation],
    cfg: &LossConfig,
) -> Result<LossReport, LossError> {
    predictions.check_against(observations)?;
    let terms = predictions
        .coords
        .iter()
        .zip(observations)
        .map(|(y, o)| point_term(mode, intr, pose, y, &o.pixel, cfg))
        .collect();
    Ok(LossReport::from_terms(terms))
}

/// Multi-view angle loss for image `image_id`: points without correspondences
/// get the single-view angle term; covisible points get `λ` times the sum of
/// the angle terms in this image and in one other image drawn uniformly from
/// the point's track.
#[allow(clippy::too_many_arguments)]
pub fn multiview_image_loss<R: Rng + ?Sized>(
    intr: &CameraIntrinsics,
    poses: &BTreeMap<ImageId, PoseSE3>,
    image_id: ImageId,
    predictions: &PredictionGrid,
    observations: &[Observation],
    covis: &CoVisibilityGraph,
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossReport, LossError> {
    predictions.check_against(observations)?;
    let pose_i = poses
        .get(&image_id)
        .ok_or(LossError::MissingPose(image_id))?;
    let mut terms = Vec::with_capacity(predictions.len());
    for (y, o) in predictions.coords.iter().zip(observations) {
        let own = angle_point(intr, pose_i, y, &o.pixel, cfg);
        let others = covis.others(image_id, o.point_id);
        if others.is_empty() {
            terms.push(own);
            continue;
        }
        let (m, p_m) = others[rng.random_range(0..others.len())];
        let pose_m = poses.get(&m).ok_or(LossError::MissingPose(m))?;
        let other = angle_point(intr, pose_m, y, &p_m, cfg);
        let lambda = cfg.lambda_multiview;
        terms.push(PointLossTerm {
            value: lambda * (own.value + other.value),
            grad: lambda * (own.grad + other.grad),
            ..own
        });
    }
    Ok(LossReport::from_terms(terms))
}

/// `L_ang + λ_photo · L_pr`, term by term.
pub fn combined_loss(
    angle: &LossReport,
    photo: &LossReport,
    cfg: &LossConfig,
) -> Result<LossReport, LossError> {
    if angle.len() != photo.len() {
        return Err(LossError::IndexMismatch(format!(
            "{} angle terms vs {} photometric terms",
            angle.len(),
            photo.len()
        )));
    }
    let lambda = cfg.lambda_photo;
    if lambda == 0.0 {
        return Ok(angle.clone());
    }
    let terms = angle
        .terms
        .iter()
        .zip(&photo.terms)
        .map(|(a, p)| PointLossTerm {
            value: a.value + lambda * p.value,
            grad: a.grad + lambda * p.grad,
            ..*a
        })
        .collect();
    let mut report = LossReport::from_terms_with_valid(terms, angle.valid_count);
    report.nonfinite |= angle.nonfinite || photo.nonfinite;
    Ok(report)
}
