use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ImageId, Observation, PointId, SceneGenError, SyntheticScene};
use crate::geometry::{
    project, ray_vector, world_to_camera, CameraIntrinsics, DepthStatus, PixelPoint, PoseSE3,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub sequence_id: u32,
    pub frames: Vec<(ImageId, PoseSE3)>,
}

/// Orbit parameters, relative to the scene's bounding-box center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrbitConfig {
    pub radius: f64,
    pub radius_jitter: f64,
    pub height: f64,
    pub height_jitter: f64,
    pub arc_degrees: f64,
    pub target_jitter: f64,
    pub min_visible: usize,
    pub max_attempts: usize,
}

impl Default for OrbitConfig {
    fn default() -> Self {
        Self {
            radius: 5.5,
            radius_jitter: 0.5,
            height: 1.5,
            height_jitter: 0.5,
            arc_degrees: 180.0,
            target_jitter: 0.3,
            min_visible: 30,
            max_attempts: 50,
        }
    }
}

/// Number of scene points in front of `pose` and inside the image.
pub fn visible_count(
    scene: &SyntheticScene,
    pose: &PoseSE3,
    intr: &CameraIntrinsics,
    width: usize,
    height: usize,
) -> usize {
    scene
        .points
        .iter()
        .filter(|p| {
            let (q, st) = project(intr, &world_to_camera(pose, &p.position));
            st == DepthStatus::InFront && in_image(&q, width, height)
        })
        .count()
}

pub(crate) fn in_image(q: &PixelPoint, width: usize, height: usize) -> bool {
    q.x >= 0.0 && q.y >= 0.0 && q.x <= (width - 1) as f64 && q.y <= (height - 1) as f64
}

/// Look-at poses orbiting the scene center with jittered radius, height and
/// target. Every pose sees at least `orbit.min_visible` scene points.
pub fn gen_trajectory(
    scene: &SyntheticScene,
    seed: u64,
    n_images: usize,
    intr: &CameraIntrinsics,
    width: usize,
    height: usize,
    orbit: &OrbitConfig,
) -> Result<Trajectory, SceneGenError> {
    assert!(n_images > 0, "n_images must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = scene.center();
    let arc = orbit.arc_degrees.to_radians();
    let start: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut frames = Vec::with_capacity(n_images);
    for k in 0..n_images {
        let phi = start
            + if n_images > 1 {
                arc * k as f64 / (n_images - 1) as f64
            } else {
                0.0
            };
        let mut found = None;
        for _ in 0..orbit.max_attempts {
            let r = orbit.radius + orbit.radius_jitter * rng.random_range(-1.0..=1.0);
            let h = orbit.height + orbit.height_jitter * rng.random_range(-1.0..=1.0);
            let eye = center + Vector3::new(r * phi.cos(), r * phi.sin(), h);
            let target = center
                + orbit.target_jitter
                    * Vector3::new(
                        rng.random_range(-1.0..=1.0),
                        rng.random_range(-1.0..=1.0),
                        rng.random_range(-1.0..=1.0),
                    );
            let pose = PoseSE3::look_at(&eye, &target, &Vector3::z());
            if visible_count(scene, &pose, intr, width, height) >= orbit.min_visible {
                found = Some(pose);
                break;
            }
        }
        let pose = found.ok_or(SceneGenError::InfeasibleViewpoint {
            frame: k,
            min_visible: orbit.min_visible,
        })?;
        frames.push((k as ImageId, pose));
    }
    Ok(Trajectory {
        sequence_id: 0,
        frames,
    })
}

/// Projects every scene point, keeps those in front of the camera and inside
/// the image, then adds Gaussian pixel noise (clamped to the image).
#[allow(clippy::too_many_arguments)]
pub fn observe(
    scene: &SyntheticScene,
    pose: &PoseSE3,
    intr: &CameraIntrinsics,
    width: usize,
    height: usize,
    pixel_noise_sigma: f64,
    seed: u64,
) -> Vec<Observation> {
    assert!(pixel_noise_sigma >= 0.0, "noise sigma must be non-negative");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, pixel_noise_sigma.max(f64::MIN_POSITIVE)).expect("normal");
    let mut out = Vec::new();
    for p in &scene.points {
        let d = world_to_camera(pose, &p.position);
        let (q, st) = project(intr, &d);
        if st != DepthStatus::InFront || !in_image(&q, width, height) {
            continue;
        }
        let pixel = if pixel_noise_sigma > 0.0 {
            PixelPoint::new(
                (q.x + noise.sample(&mut rng)).clamp(0.0, (width - 1) as f64),
                (q.y + noise.sample(&mut rng)).clamp(0.0, (height - 1) as f64),
            )
        } else {
            q
        };
        out.push(Observation {
            point_id: p.id,
            pixel,
            gt_world: p.position,
            gt_depth: d.depth(),
        });
    }
    out
}

/// Id of the dense grid observation at `cell` of `image`; disjoint from scene
/// point ids as long as those stay below `DENSE_ID_BASE`.
pub const DENSE_ID_BASE: PointId = 1 << 30;

pub fn dense_point_id(image: ImageId, cell: usize, width: usize, height: usize) -> PointId {
    DENSE_ID_BASE + image * (width * height) as PointId + cell as PointId
}

/// One observation per pixel center whose ray hits a plane, with the hit as
/// ground truth.
pub fn dense_observations(
    scene: &SyntheticScene,
    image: ImageId,
    pose: &PoseSE3,
    intr: &CameraIntrinsics,
    width: usize,
    height: usize,
) -> Vec<Observation> {
    let origin = pose.center();
    let mut out = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let pixel = PixelPoint::new(x as f64, y as f64);
            let dir = pose.rotation * ray_vector(intr, &pixel).0;
            if let Some((t, ..)) = scene.cast(&origin, &dir) {
                let hit = origin + t * dir;
                out.push(Observation {
                    point_id: dense_point_id(image, y * width + x, width, height),
                    pixel,
                    gt_world: hit,
                    gt_depth: world_to_camera(pose, &hit).depth(),
                });
            }
        }
    }
    out
}
