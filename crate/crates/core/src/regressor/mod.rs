//! Scene-coordinate models and their training loop.

mod adam;
mod mlp;
mod train;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{world_to_camera, CameraIntrinsics, PoseSE3};
use crate::losses::LossError;
use crate::scenegen::{CoVisibilityGraph, Dataset, Image, ImageId, Observation, PointId, Split};
use crate::stats;

pub use adam::{adam_step, AdamState, LrSchedule};
pub use mlp::{Activation, MlpCache, PatchMlp, DEFAULT_SIZES};
pub use train::{
    init_model, train, train_from, LossMode, ModelKind, TrainConfig, TrainLog, TrainOutcome,
    TrainRecord,
};

#[derive(Debug, Error)]
pub enum RegressorError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("model has no entry for point {point} in image {image}")]
    MissingEntry { image: ImageId, point: PointId },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

impl PartialEq for RegressorError {
    fn eq(&self, other: &Self) -> bool {
        self.to_string() == other.to_string()
    }
}

/// One free 3-vector per (image, point) observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeTable {
    keys: Vec<(ImageId, PointId)>,
    params: Vec<f64>,
}

impl FreeTable {
    pub fn new(entries: impl IntoIterator<Item = ((ImageId, PointId), Vector3<f64>)>) -> Self {
        let sorted: BTreeMap<_, _> = entries.into_iter().collect();
        let keys = sorted.keys().copied().collect();
        let params = sorted.values().flat_map(|v| [v.x, v.y, v.z]).collect();
        Self { keys, params }
    }

    /// Entries uniform in the box `[lo, hi]` expanded 2× about its center.
    pub fn random<R: Rng + ?Sized>(
        keys: impl IntoIterator<Item = (ImageId, PointId)>,
        lo: &Vector3<f64>,
        hi: &Vector3<f64>,
        rng: &mut R,
    ) -> Self {
        let c = (lo + hi) / 2.0;
        let half = hi - lo;
        let keys: Vec<_> = keys
            .into_iter()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let entries: Vec<_> = keys
            .into_iter()
            .map(|k| {
                let v = Vector3::from_fn(|i, _| c[i] + rng.random_range(-1.0..=1.0) * half[i]);
                (k, v)
            })
            .collect();
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn index_of(&self, image: ImageId, point: PointId) -> Option<usize> {
        self.keys.binary_search(&(image, point)).ok()
    }

    pub fn get(&self, image: ImageId, point: PointId) -> Option<Vector3<f64>> {
        self.index_of(image, point)
            .map(|i| Vector3::from_column_slice(&self.params[3 * i..3 * i + 3]))
    }

    pub fn set(&mut self, image: ImageId, point: PointId, v: Vector3<f64>) -> bool {
        match self.index_of(image, point) {
            Some(i) => {
                self.params[3 * i..3 * i + 3].copy_from_slice(v.as_slice());
                true
            }
            None => false,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
}

/// Anything that maps an observation to a predicted scene coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneModel {
    Mlp(PatchMlp),
    Table(FreeTable),
    /// Returns the ground-truth coordinate of each observation.
    Oracle,
    Constant {
        value: Vector3<f64>,
    },
}

impl SceneModel {
    pub fn params(&self) -> Option<&[f64]> {
        match self {
            SceneModel::Mlp(m) => Some(m.params()),
            SceneModel::Table(t) => Some(t.params()),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut [f64]> {
        match self {
            SceneModel::Mlp(m) => Some(m.params_mut()),
            SceneModel::Table(t) => Some(t.params_mut()),
            _ => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params()
            .is_none_or(|p| p.iter().all(|v| v.is_finite()))
    }

    /// Predictions for the listed observations of `frame` (all when `subset` is None).
    pub fn predict(
        &self,
        frame: &FrameData,
        subset: Option<&[usize]>,
    ) -> Result<Vec<Vector3<f64>>, RegressorError> {
        let all: Vec<usize>;
        let idx = match subset {
            Some(s) => s,
            None => {
                all = (0..frame.observations.len()).collect();
                &all
            }
        };
        match self {
            SceneModel::Mlp(m) => {
                let x = frame.descriptor_columns(idx);
                let out = m.forward_batch(&x)?;
                Ok(out
                    .output()
                    .column_iter()
                    .map(|c| Vector3::new(c[0], c[1], c[2]))
                    .collect())
            }
            SceneModel::Table(t) => idx
                .iter()
                .map(|&i| {
                    let k = frame.observations[i].point_id;
                    t.get(frame.image_id, k)
                        .ok_or(RegressorError::MissingEntry {
                            image: frame.image_id,
                            point: k,
                        })
                })
                .collect(),
            SceneModel::Oracle => Ok(idx
                .iter()
                .map(|&i| frame.observations[i].gt_world)
                .collect()),
            SceneModel::Constant { value } => Ok(vec![*value; idx.len()]),
        }
    }
}

/// One image's observations together with their descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub image_id: ImageId,
    pub sequence: u32,
    pub index: usize,
    pub split: Split,
    pub pose: PoseSE3,
    pub observations: Vec<Observation>,
    /// One descriptor per column.
    pub descriptors: DMatrix<f64>,
    pub image: Option<Image>,
}

impl FrameData {
    pub fn descriptor_columns(&self, idx: &[usize]) -> DMatrix<f64> {
        if idx.len() == self.descriptors.ncols() && idx.iter().enumerate().all(|(a, b)| a == *b) {
            return self.descriptors.clone();
        }
        self.descriptors.select_columns(idx)
    }
}

/// Frames of a dataset prepared for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSet {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<FrameData>,
    pub covis: CoVisibilityGraph,
    pub descriptor_dim: usize,
    pub bbox_min: Vector3<f64>,
    pub bbox_max: Vector3<f64>,
}

impl FrameSet {
    /// Frames of `split` (all when None); `dense` selects the per-pixel grid
    /// instead of the sparse scene points.
    pub fn from_dataset(ds: &Dataset, split: Option<Split>, dense: bool) -> Self {
        let dim = ds.descriptors.dim();
        let frames = ds
            .frames
            .iter()
            .filter(|f| split.is_none_or(|s| f.split == s))
            .map(|f| {
                let observations = if dense {
                    ds.dense_observations(f)
                } else {
                    f.observations.clone()
                };
                let mut descriptors = DMatrix::zeros(dim, observations.len());
                for (c, o) in observations.iter().enumerate() {
                    descriptors.set_column(
                        c,
                        &nalgebra::DVector::from_vec(ds.descriptor(f.image_id, o)),
                    );
                }
                FrameData {
                    image_id: f.image_id,
                    sequence: f.sequence,
                    index: f.index,
                    split: f.split,
                    pose: f.pose,
                    observations,
                    descriptors,
                    image: f.image.clone(),
                }
            })
            .collect();
        Self {
            intrinsics: ds.intrinsics(),
            frames,
            covis: ds.covis.clone(),
            descriptor_dim: dim,
            bbox_min: ds.scene.bbox_min,
            bbox_max: ds.scene.bbox_max,
        }
    }

    pub fn poses(&self) -> BTreeMap<ImageId, PoseSE3> {
        self.frames.iter().map(|f| (f.image_id, f.pose)).collect()
    }

    pub fn observation_count(&self) -> usize {
        self.frames.iter().map(|f| f.observations.len()).sum()
    }
}

/// World points at camera depth `d` along each observation's viewing ray.
pub fn constant_depth_targets(
    intr: &CameraIntrinsics,
    pose: &PoseSE3,
    observations: &[Observation],
    d: f64,
) -> Vec<Vector3<f64>> {
    observations
        .iter()
        .map(|o| {
            let ray = Vector3::new(o.pixel.x - intr.cx, o.pixel.y - intr.cy, intr.f);
            pose.transform_point(&(ray * (d / intr.f)))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordErrors {
    pub median: f64,
    pub mean: f64,
    pub count: usize,
    /// Fraction of predictions behind the camera that observed them.
    pub behind_fraction: f64,
}

/// 3D error of the model's predictions against ground-truth coordinates.
pub fn evaluate_coords(model: &SceneModel, set: &FrameSet) -> Result<CoordErrors, RegressorError> {
    let mut errs = Vec::with_capacity(set.observation_count());
    let mut behind = 0usize;
    for f in &set.frames {
        let preds = model.predict(f, None)?;
        for (y, o) in preds.iter().zip(&f.observations) {
            errs.push((y - o.gt_world).norm());
            if world_to_camera(&f.pose, y).depth() <= 0.0 {
                behind += 1;
            }
        }
    }
    let n = errs.len();
    Ok(CoordErrors {
        median: stats::median(&errs).unwrap_or(f64::NAN),
        mean: stats::mean(&errs).unwrap_or(f64::NAN),
        count: n,
        behind_fraction: if n == 0 {
            0.0
        } else {
            behind as f64 / n as f64
        },
    })
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub descriptor_dim: usize,
    pub config: TrainConfig,
    pub model: SceneModel,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, descriptor_dim: usize, model: SceneModel) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            descriptor_dim,
            config,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), RegressorError> {
        let text =
            serde_json::to_string(self).map_err(|e| RegressorError::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| RegressorError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, RegressorError> {
        let text = std::fs::read_to_string(path).map_err(|source| RegressorError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let ck: Self =
            serde_json::from_str(&text).map_err(|e| RegressorError::Format(e.to_string()))?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(RegressorError::Format(format!(
                "unsupported checkpoint version {}",
                ck.format_version
            )));
        }
        Ok(ck)
    }
}
