use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{views::DENSE_ID_BASE, ImageId, Observation, PointId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescriptorConfig {
    pub dim: usize,
    /// Per-observation Gaussian noise added to the base descriptor.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

/// View-invariant appearance stand-in. Scene points carry a fixed random unit
/// vector; dense surface samples use a smooth random-Fourier field of their
/// world position so that the same surface spot looks alike from every view.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorBank {
    pub config: DescriptorConfig,
    pub base: BTreeMap<PointId, Vec<f64>>,
    field: Vec<(Vector3<f64>, f64)>,
}

impl DescriptorBank {
    pub fn generate(
        config: DescriptorConfig,
        point_ids: impl IntoIterator<Item = PointId>,
        diameter: f64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut base = BTreeMap::new();
        for k in point_ids {
            base.insert(k, random_unit(&mut rng, config.dim));
        }
        Self::with_base(config, base, diameter)
    }

    /// Rebuilds the bank around stored base descriptors.
    pub fn with_base(
        config: DescriptorConfig,
        base: BTreeMap<PointId, Vec<f64>>,
        diameter: f64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xD1B5_4A32_D192_ED03);
        let field = (0..config.dim)
            .map(|_| {
                let dir = Vector3::from_iterator(random_unit(&mut rng, 3));
                let freq = std::f64::consts::TAU / diameter * rng.random_range(0.5..1.5);
                (dir * freq, rng.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        Self {
            config,
            base,
            field,
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Noise-free field value at a world position.
    pub fn field_at(&self, x: &Vector3<f64>) -> Vec<f64> {
        let scale = (2.0 / self.config.dim as f64).sqrt();
        self.field
            .iter()
            .map(|(w, b)| scale * (w.dot(x) + b).sin())
            .collect()
    }

    /// Descriptor of observation `obs` as seen in `image`, including the
    /// deterministic per-observation noise.
    pub fn observe(&self, image: ImageId, obs: &Observation) -> Vec<f64> {
        let mut v = if obs.point_id >= DENSE_ID_BASE {
            self.field_at(&obs.gt_world)
        } else {
            self.base
                .get(&obs.point_id)
                .cloned()
                .unwrap_or_else(|| vec![0.0; self.config.dim])
        };
        if self.config.noise_sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, image, obs.point_id));
            for x in &mut v {
                let n: f64 = StandardNormal.sample(&mut rng);
                *x += self.config.noise_sigma * n;
            }
        }
        v
    }
}

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn mix(seed: u64, image: ImageId, point: PointId) -> u64 {
    let mut h = seed ^ ((image as u64) << 32 | point as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^ (h >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PixelPoint;

    fn obs(k: PointId, x: Vector3<f64>) -> Observation {
        Observation {
            point_id: k,
            pixel: PixelPoint::new(0.0, 0.0),
            gt_world: x,
            gt_depth: 1.0,
        }
    }

    #[test]
    fn base_descriptors_are_unit_and_shared_across_views() {
        let cfg = DescriptorConfig {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let bank = DescriptorBank::generate(cfg, 0..20, 10.0);
        for k in 0..20 {
            let a = bank.observe(0, &obs(k, Vector3::zeros()));
            let b = bank.observe(7, &obs(k, Vector3::zeros()));
            assert_eq!(a, b);
            let n: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_is_deterministic_per_observation() {
        let bank = DescriptorBank::generate(DescriptorConfig::default(), 0..5, 10.0);
        let a = bank.observe(3, &obs(2, Vector3::zeros()));
        assert_eq!(a, bank.observe(3, &obs(2, Vector3::zeros())));
        assert_ne!(a, bank.observe(4, &obs(2, Vector3::zeros())));
    }

    #[test]
    fn dense_descriptors_follow_the_field() {
        let cfg = DescriptorConfig {
            noise_sigma: 0.0,
            ..Default::default()
        };
        let bank = DescriptorBank::generate(cfg, 0..5, 10.0);
        let x = Vector3::new(0.3, -1.0, 2.0);
        assert_eq!(
            bank.observe(1, &obs(DENSE_ID_BASE + 3, x)),
            bank.field_at(&x)
        );
        assert_eq!(
            bank.observe(1, &obs(DENSE_ID_BASE + 3, x)),
            bank.observe(9, &obs(DENSE_ID_BASE + 99, x))
        );
    }
}
