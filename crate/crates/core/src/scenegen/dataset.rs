use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    build_covis, dense_observations, gen_scene, gen_trajectory, observe, render_image,
    CoVisibilityGraph, DescriptorBank, DescriptorConfig, Image, ImageId, ImageObservations,
    Observation, OrbitConfig, SceneBounds, SceneGenError, SyntheticScene,
};
use crate::geometry::{CameraIntrinsics, PoseSE3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Which frame the world coordinates are expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldFrame {
    /// World = first camera's frame, as in KinectFusion-tracked sequences.
    FirstCamera,
    /// World = the generator's frame, with the scene box at the origin.
    SceneCentered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub point_count: usize,
    pub plane_count: usize,
    pub bounds: SceneBounds,
    pub n_images: usize,
    /// Every `test_every`-th frame (1-based) is held out for testing.
    pub test_every: usize,
    pub width: usize,
    pub height: usize,
    pub intrinsics: CameraIntrinsics,
    pub pixel_noise_sigma: f64,
    pub descriptors: DescriptorConfig,
    /// Fraction of scene points that enter the co-visibility model.
    pub covis_fraction: f64,
    pub render: bool,
    pub world_frame: WorldFrame,
    pub orbit: OrbitConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            point_count: 500,
            plane_count: 6,
            bounds: SceneBounds::default(),
            n_images: 40,
            test_every: 4,
            width: 80,
            height: 60,
            // 7-Scenes Kinect intrinsics (f = 585, c = (320, 240)) resized to 80x60
            intrinsics: CameraIntrinsics {
                f: 585.0 / 8.0,
                cx: 40.0,
                cy: 30.0,
            },
            pixel_noise_sigma: 0.0,
            descriptors: DescriptorConfig::default(),
            covis_fraction: 0.2,
            render: true,
            world_frame: WorldFrame::FirstCamera,
            orbit: OrbitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image_id: ImageId,
    pub sequence: u32,
    /// Position within the sequence.
    pub index: usize,
    pub split: Split,
    pub pose: PoseSE3,
    pub observations: Vec<Observation>,
    pub image: Option<Image>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub scene: SyntheticScene,
    pub descriptors: DescriptorBank,
    pub frames: Vec<Frame>,
    pub covis: CoVisibilityGraph,
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.random()
}

impl Dataset {
    pub fn generate(config: &DatasetConfig) -> Result<Self, SceneGenError> {
        let cfg = config;
        let intr = cfg.intrinsics;
        let scene = gen_scene(
            derive_seed(cfg.seed, 1),
            cfg.point_count,
            cfg.plane_count,
            cfg.bounds,
        );
        let traj = gen_trajectory(
            &scene,
            derive_seed(cfg.seed, 2),
            cfg.n_images,
            &intr,
            cfg.width,
            cfg.height,
            &cfg.orbit,
        )?;
        let (scene, poses): (SyntheticScene, Vec<PoseSE3>) = match cfg.world_frame {
            WorldFrame::SceneCentered => (scene, traj.frames.iter().map(|(_, p)| *p).collect()),
            WorldFrame::FirstCamera => {
                let to_first = traj.frames[0].1.inverse();
                let poses = traj
                    .frames
                    .iter()
                    .map(|(_, p)| to_first.compose(p))
                    .collect();
                (scene.transformed(&to_first), poses)
            }
        };
        let noise_seed = derive_seed(cfg.seed, 3);
        let mut frames = Vec::with_capacity(poses.len());
        for (idx, pose) in poses.into_iter().enumerate() {
            let image_id = idx as ImageId;
            let observations = observe(
                &scene,
                &pose,
                &intr,
                cfg.width,
                cfg.height,
                cfg.pixel_noise_sigma,
                noise_seed.wrapping_add(idx as u64),
            );
            let image = if cfg.render && !scene.planes.is_empty() {
                Some(render_image(&scene, &pose, &intr, cfg.width, cfg.height)?)
            } else {
                None
            };
            let split = if cfg.test_every > 0 && (idx + 1) % cfg.test_every == 0 {
                Split::Test
            } else {
                Split::Train
            };
            frames.push(Frame {
                image_id,
                sequence: traj.sequence_id,
                index: idx,
                split,
                pose,
                observations,
                image,
            });
        }

        let train: Vec<ImageObservations> = frames
            .iter()
            .filter(|f| f.split == Split::Train)
            .map(|f| ImageObservations {
                image_id: f.image_id,
                width: cfg.width,
                height: cfg.height,
                observations: f.observations.clone(),
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 4));
        let in_model: BTreeMap<_, bool> = scene
            .points
            .iter()
            .map(|p| (p.id, rng.random::<f64>() < cfg.covis_fraction))
            .collect();
        let covis = build_covis(&train).restrict(|k| in_model.get(&k).copied().unwrap_or(false));

        let desc_cfg = DescriptorConfig {
            seed: derive_seed(cfg.seed, 5) ^ cfg.descriptors.seed,
            ..cfg.descriptors
        };
        let descriptors =
            DescriptorBank::generate(desc_cfg, scene.points.iter().map(|p| p.id), scene.diameter);
        Ok(Self {
            config: cfg.clone(),
            scene,
            descriptors,
            frames,
            covis,
        })
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        self.config.intrinsics
    }

    pub fn frame(&self, id: ImageId) -> Option<&Frame> {
        self.frames.iter().find(|f| f.image_id == id)
    }

    pub fn frames_in(&self, split: Split) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(move |f| f.split == split)
    }

    pub fn poses(&self) -> BTreeMap<ImageId, PoseSE3> {
        self.frames.iter().map(|f| (f.image_id, f.pose)).collect()
    }

    pub fn has_images(&self) -> bool {
        self.frames.iter().all(|f| f.image.is_some())
    }

    /// Dense per-pixel observations of `frame` (recomputed from the scene).
    pub fn dense_observations(&self, frame: &Frame) -> Vec<Observation> {
        dense_observations(
            &self.scene,
            frame.image_id,
            &frame.pose,
            &self.config.intrinsics,
            self.config.width,
            self.config.height,
        )
    }

    pub fn descriptor(&self, image: ImageId, obs: &Observation) -> Vec<f64> {
        self.descriptors.observe(image, obs)
    }
}
