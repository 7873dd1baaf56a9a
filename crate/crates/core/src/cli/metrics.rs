use std::collections::BTreeMap;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use super::CliError;
use crate::geometry::{pose_error, PoseSE3};
use crate::ransac::{ransac, Correspondence2D3D, EstimateStatus, RansacConfig, RansacError};
use crate::regressor::{FrameSet, RegressorError, SceneModel};
use crate::scenegen::ImageId;
use crate::stats;

/// One line of an estimates file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub image_id: ImageId,
    /// Camera-to-world, row-major.
    pub pose: [[f64; 4]; 4],
    pub inlier_count: usize,
    pub status: EstimateStatus,
}

impl EstimateRecord {
    pub fn new(
        image_id: ImageId,
        pose: &PoseSE3,
        inlier_count: usize,
        status: EstimateStatus,
    ) -> Self {
        let m = pose.to_homogeneous();
        let pose = std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]));
        Self {
            image_id,
            pose,
            inlier_count,
            status,
        }
    }

    pub fn pose(&self) -> PoseSE3 {
        PoseSE3::from_homogeneous(&Matrix4::from_fn(|r, c| self.pose[r][c]))
    }
}

pub fn estimates_to_jsonl(records: &[EstimateRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub fn estimates_from_jsonl(text: &str, context: &str) -> Result<Vec<EstimateRecord>, CliError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Input(format!("{context}:{}: {e}", i + 1)))
        })
        .collect()
}

/// Runs the model on every frame and estimates each pose with RANSAC.
/// Frames with fewer than four predictions are reported as `TooFewInliers`.
pub fn localize_frames(
    model: &SceneModel,
    set: &FrameSet,
    cfg: &RansacConfig,
) -> Result<Vec<EstimateRecord>, RegressorError> {
    set.frames
        .iter()
        .map(|f| {
            let preds = model.predict(f, None)?;
            let corrs: Vec<Correspondence2D3D> = f
                .observations
                .iter()
                .zip(&preds)
                .filter(|(_, y)| y.iter().all(|v| v.is_finite()))
                .map(|(o, y)| Correspondence2D3D::new(o.point_id, o.pixel, *y))
                .collect();
            Ok(match ransac(&corrs, &set.intrinsics, cfg) {
                Ok(est) => EstimateRecord::new(f.image_id, &est.pose, est.inlier_count, est.status),
                Err(RansacError::TooFewCorrespondences { .. }) => EstimateRecord::new(
                    f.image_id,
                    &PoseSE3::identity(),
                    0,
                    EstimateStatus::TooFewInliers,
                ),
                Err(e) => return Err(RegressorError::Config(e.to_string())),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub image_id: ImageId,
    pub rot_err_deg: f64,
    pub trans_err: f64,
    pub status: EstimateStatus,
    pub accurate: bool,
}

/// Localization errors against ground truth. Errors are measured from the
/// reported pose whatever its status; only `Ok` estimates can count as
/// accurate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub median_rot_deg: f64,
    pub median_trans: f64,
    pub accuracy: f64,
    pub rot_thresh_deg: f64,
    pub trans_thresh: f64,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "image_id,rot_err_deg,trans_err,status,accurate";

    /// Every estimate needs a ground-truth pose and vice versa.
    pub fn compute(
        estimates: &[EstimateRecord],
        gt: &BTreeMap<ImageId, PoseSE3>,
        rot_thresh_deg: f64,
        trans_thresh: f64,
    ) -> Result<Self, CliError> {
        let mut seen = std::collections::BTreeSet::new();
        let mut rows = Vec::with_capacity(estimates.len());
        for e in estimates {
            let g = gt.get(&e.image_id).ok_or_else(|| {
                CliError::Input(format!("no ground-truth pose for image {}", e.image_id))
            })?;
            if !seen.insert(e.image_id) {
                return Err(CliError::Input(format!(
                    "duplicate estimate for image {}",
                    e.image_id
                )));
            }
            let (r, t) = pose_error(&e.pose(), g);
            rows.push(MetricsRow {
                image_id: e.image_id,
                rot_err_deg: r,
                trans_err: t,
                status: e.status,
                accurate: e.status == EstimateStatus::Ok && r < rot_thresh_deg && t < trans_thresh,
            });
        }
        if let Some(missing) = gt.keys().find(|k| !seen.contains(k)) {
            return Err(CliError::Input(format!("no estimate for image {missing}")));
        }
        if rows.is_empty() {
            return Err(CliError::Input("no estimates to evaluate".into()));
        }
        let rot: Vec<f64> = rows.iter().map(|r| r.rot_err_deg).collect();
        let trans: Vec<f64> = rows.iter().map(|r| r.trans_err).collect();
        let accuracy = rows.iter().filter(|r| r.accurate).count() as f64 / rows.len() as f64;
        Ok(Self {
            median_rot_deg: stats::median(&rot).expect("non-empty"),
            median_trans: stats::median(&trans).expect("non-empty"),
            accuracy,
            rot_thresh_deg,
            trans_thresh,
            rows,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            s += &format!(
                "{},{},{},{:?},{}\n",
                r.image_id, r.rot_err_deg, r.trans_err, r.status, r.accurate
            );
        }
        s
    }
}
