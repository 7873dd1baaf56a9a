//! Synthetic multi-view ground truth: scenes, orbits, observations,
//! photo-consistent renders, co-visibility and dataset persistence.

mod covis;
mod dataset;
mod descriptors;
mod image;
pub mod io;
mod scene;
mod views;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::PixelPoint;

pub use covis::{build_covis, CoVisibilityGraph};
pub use dataset::{Dataset, DatasetConfig, Frame, Split, WorldFrame};
pub use descriptors::{DescriptorBank, DescriptorConfig};
pub use image::Image;
pub use io::{
    format_7scenes_pose, load_dataset, parse_7scenes_pose, save_dataset, IoError, PoseParseOptions,
};
pub use scene::{
    gen_scene, quantize, render_image, SceneBounds, ScenePoint, SyntheticScene, TexturedPlane,
    BACKGROUND,
};
pub use views::{
    dense_observations, dense_point_id, gen_trajectory, observe, visible_count, OrbitConfig,
    Trajectory, DENSE_ID_BASE,
};

pub type PointId = u32;
pub type ImageId = u32;

#[derive(Debug, Error, PartialEq)]
pub enum SceneGenError {
    #[error("scene has no textured planes to render")]
    NoGeometry,
    #[error("frame {frame}: no viewpoint sees {min_visible} points")]
    InfeasibleViewpoint { frame: usize, min_visible: usize },
}

/// A point `k` observed at `pixel` in some image, with its ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub point_id: PointId,
    pub pixel: PixelPoint,
    pub gt_world: Vector3<f64>,
    pub gt_depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageObservations {
    pub image_id: ImageId,
    pub width: usize,
    pub height: usize,
    pub observations: Vec<Observation>,
}
