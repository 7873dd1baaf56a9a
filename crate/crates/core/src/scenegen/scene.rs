use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Image, PointId, SceneGenError};
use crate::geometry::{ray_vector, CameraIntrinsics, PixelPoint, PoseSE3};

/// Intensity returned for rays that miss every plane: mid-grey on the
/// 16-bit lattice, so images survive a save/load unchanged.
pub const BACKGROUND: f64 = 32768.0 / 65535.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenePoint {
    pub id: PointId,
    pub position: Vector3<f64>,
}

/// Rectangle `origin + u·edge_u + v·edge_v`, `u, v ∈ [0, 1]`, carrying a
/// value-noise texture keyed by `texture_seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TexturedPlane {
    pub origin: Vector3<f64>,
    pub edge_u: Vector3<f64>,
    pub edge_v: Vector3<f64>,
    pub texture_seed: u64,
}

impl TexturedPlane {
    pub fn normal(&self) -> Vector3<f64> {
        self.edge_u.cross(&self.edge_v).normalize()
    }

    /// Ray parameter and plane coordinates (metric, along each edge) of the
    /// hit, if the ray `origin + t·dir` (`t > 0`) hits the rectangle.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let n = self.edge_u.cross(&self.edge_v);
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(self.origin - origin)) / denom;
        if t <= 1e-9 {
            return None;
        }
        let rel = origin + t * dir - self.origin;
        let (u, v) = self.plane_coords(&rel)?;
        Some((t, u * self.edge_u.norm(), v * self.edge_v.norm()))
    }

    fn plane_coords(&self, rel: &Vector3<f64>) -> Option<(f64, f64)> {
        // Solve rel = u·eu + v·ev in least squares (edges need not be orthogonal).
        let uu = self.edge_u.dot(&self.edge_u);
        let uv = self.edge_u.dot(&self.edge_v);
        let vv = self.edge_v.dot(&self.edge_v);
        let ru = rel.dot(&self.edge_u);
        let rv = rel.dot(&self.edge_v);
        let det = uu * vv - uv * uv;
        let u = (ru * vv - rv * uv) / det;
        let v = (rv * uu - ru * uv) / det;
        let tol = 1e-12;
        if (-tol..=1.0 + tol).contains(&u) && (-tol..=1.0 + tol).contains(&v) {
            Some((u, v))
        } else {
            None
        }
    }

    /// Texture intensity at metric plane coordinates.
    pub fn texture(&self, s: f64, t: f64) -> f64 {
        value_noise(self.texture_seed, s, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub points: Vec<ScenePoint>,
    pub planes: Vec<TexturedPlane>,
    pub bbox_min: Vector3<f64>,
    pub bbox_max: Vector3<f64>,
    pub diameter: f64,
}

impl SyntheticScene {
    pub fn center(&self) -> Vector3<f64> {
        (self.bbox_min + self.bbox_max) / 2.0
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.bbox_min[i] - 1e-9 && p[i] <= self.bbox_max[i] + 1e-9)
    }

    /// Nearest plane hit along a ray: `(t, plane index, s, t_plane)`.
    pub fn cast(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
    ) -> Option<(f64, usize, f64, f64)> {
        let mut best: Option<(f64, usize, f64, f64)> = None;
        for (i, pl) in self.planes.iter().enumerate() {
            if let Some((t, s, tt)) = pl.intersect(origin, dir) {
                if best.is_none_or(|b| t < b.0) {
                    best = Some((t, i, s, tt));
                }
            }
        }
        best
    }

    /// Applies a rigid transform to every point, plane and the bounding box.
    pub fn transformed(&self, tf: &PoseSE3) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| ScenePoint {
                id: p.id,
                position: tf.transform_point(&p.position),
            })
            .collect();
        let planes = self
            .planes
            .iter()
            .map(|pl| TexturedPlane {
                origin: tf.transform_point(&pl.origin),
                edge_u: tf.rotation * pl.edge_u,
                edge_v: tf.rotation * pl.edge_v,
                texture_seed: pl.texture_seed,
            })
            .collect();
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for corner in 0..8 {
            let c = Vector3::new(
                if corner & 1 == 0 {
                    self.bbox_min.x
                } else {
                    self.bbox_max.x
                },
                if corner & 2 == 0 {
                    self.bbox_min.y
                } else {
                    self.bbox_max.y
                },
                if corner & 4 == 0 {
                    self.bbox_min.z
                } else {
                    self.bbox_max.z
                },
            );
            let w = tf.transform_point(&c);
            lo = lo.inf(&w);
            hi = hi.sup(&w);
        }
        Self {
            points,
            planes,
            bbox_min: lo,
            bbox_max: hi,
            diameter: self.diameter,
        }
    }
}

/// Axis-aligned bounds for scene generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Default for SceneBounds {
    /// A 6 × 6 × 2√7 box: diagonal of exactly 10 units.
    fn default() -> Self {
        Self {
            min: Vector3::new(-3.0, -3.0, 0.0),
            max: Vector3::new(3.0, 3.0, 28f64.sqrt()),
        }
    }
}

/// Fraction of points placed on plane surfaces when planes exist.
const ON_PLANE_FRACTION: f64 = 0.7;

/// Deterministic scene: a floor, a back wall and free-standing panels, with
/// points sampled on the planes and in free space. Point ids are `0..point_count`.
pub fn gen_scene(
    seed: u64,
    point_count: usize,
    plane_count: usize,
    bounds: SceneBounds,
) -> SyntheticScene {
    assert!(point_count > 0, "point_count must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = bounds.min;
    let hi = bounds.max;
    let ext = hi - lo;
    let mut planes = Vec::with_capacity(plane_count);
    for i in 0..plane_count {
        let texture_seed = rng.random::<u64>();
        let pl = match i {
            0 => TexturedPlane {
                origin: lo,
                edge_u: Vector3::new(ext.x, 0.0, 0.0),
                edge_v: Vector3::new(0.0, ext.y, 0.0),
                texture_seed,
            },
            1 => TexturedPlane {
                origin: Vector3::new(lo.x, hi.y, lo.z),
                edge_u: Vector3::new(ext.x, 0.0, 0.0),
                edge_v: Vector3::new(0.0, 0.0, ext.z),
                texture_seed,
            },
            _ => {
                // vertical panel inside the box
                let half_w = rng.random_range(0.15..0.3) * ext.x.min(ext.y);
                let height = rng.random_range(0.3..0.8) * ext.z;
                let yaw: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let dir = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
                let cx = rng.random_range(lo.x + half_w..hi.x - half_w);
                let cy = rng.random_range(lo.y + half_w..hi.y - half_w);
                let base_z = rng.random_range(lo.z..hi.z - height);
                TexturedPlane {
                    origin: Vector3::new(cx, cy, base_z) - half_w * dir,
                    edge_u: 2.0 * half_w * dir,
                    edge_v: Vector3::new(0.0, 0.0, height),
                    texture_seed,
                }
            }
        };
        planes.push(pl);
    }

    let mut points = Vec::with_capacity(point_count);
    for id in 0..point_count {
        let on_plane = !planes.is_empty() && rng.random::<f64>() < ON_PLANE_FRACTION;
        let position = if on_plane {
            let pl = &planes[rng.random_range(0..planes.len())];
            let (u, v): (f64, f64) = (rng.random(), rng.random());
            let p = pl.origin + u * pl.edge_u + v * pl.edge_v;
            p.sup(&lo).inf(&hi)
        } else {
            Vector3::new(
                rng.random_range(lo.x..=hi.x),
                rng.random_range(lo.y..=hi.y),
                rng.random_range(lo.z..=hi.z),
            )
        };
        points.push(ScenePoint {
            id: id as PointId,
            position,
        });
    }
    SyntheticScene {
        points,
        planes,
        bbox_min: lo,
        bbox_max: hi,
        diameter: ext.norm(),
    }
}

/// Renders the nearest-plane texture for every pixel center. View independent:
/// the intensity depends only on the surface point hit.
pub fn render_image(
    scene: &SyntheticScene,
    pose: &PoseSE3,
    intr: &CameraIntrinsics,
    width: usize,
    height: usize,
) -> Result<Image, SceneGenError> {
    if scene.planes.is_empty() {
        return Err(SceneGenError::NoGeometry);
    }
    let origin = pose.center();
    Ok(Image::from_fn(width, height, |x, y| {
        let dir = pose.rotation * ray_vector(intr, &PixelPoint::new(x as f64, y as f64)).0;
        match scene.cast(&origin, &dir) {
            Some((_, i, s, t)) => quantize(scene.planes[i].texture(s, t)),
            None => BACKGROUND,
        }
    }))
}

/// Rounds to the 16-bit grid used by the on-disk image format.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

/// Size of the coarsest texture lattice cell, in scene units.
const TEXTURE_CELL: f64 = 0.8;
const TEXTURE_OCTAVES: u32 = 2;

fn value_noise(seed: u64, s: f64, t: f64) -> f64 {
    let mut sum = 0.0;
    let mut norm = 0.0;
    let mut amp = 1.0;
    let mut freq = 1.0 / TEXTURE_CELL;
    for octave in 0..TEXTURE_OCTAVES {
        sum += amp
            * lattice_noise(
                seed.wrapping_add(octave as u64 * 0x9E37_79B9),
                s * freq,
                t * freq,
            );
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    0.1 + 0.8 * sum / norm
}

fn lattice_noise(seed: u64, s: f64, t: f64) -> f64 {
    let (i, j) = (s.floor(), t.floor());
    let (fs, ft) = (smooth(s - i), smooth(t - j));
    let (i, j) = (i as i64, j as i64);
    let v00 = hash01(seed, i, j);
    let v10 = hash01(seed, i + 1, j);
    let v01 = hash01(seed, i, j + 1);
    let v11 = hash01(seed, i + 1, j + 1);
    let a = v00 + fs * (v10 - v00);
    let b = v01 + fs * (v11 - v01);
    a + ft * (b - a)
}

fn smooth(x: f64) -> f64 {
    x * x * (3.0 - 2.0 * x)
}

fn hash01(seed: u64, i: i64, j: i64) -> f64 {
    let mut h = seed
        ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, world_to_camera};

    #[test]
    fn same_seed_same_scene() {
        let a = gen_scene(5, 100, 6, SceneBounds::default());
        let b = gen_scene(5, 100, 6, SceneBounds::default());
        assert_eq!(a, b);
        assert_eq!(a.points.len(), 100);
        assert!(a.points.iter().all(|p| a.contains(&p.position)));
        assert!((a.diameter - 10.0).abs() < 1e-12);
    }

    #[test]
    fn no_planes_means_no_render() {
        let s = gen_scene(1, 10, 0, SceneBounds::default());
        assert_eq!(s.points.len(), 10);
        let intr = CameraIntrinsics::new(50.0, 20.0, 15.0);
        assert!(matches!(
            render_image(&s, &PoseSE3::identity(), &intr, 40, 30),
            Err(SceneGenError::NoGeometry)
        ));
    }

    #[test]
    fn ray_missing_all_planes_is_background() {
        let s = gen_scene(1, 10, 2, SceneBounds::default());
        let intr = CameraIntrinsics::new(50.0, 20.0, 15.0);
        // looking straight up from far above the box
        let pose = PoseSE3::look_at(
            &Vector3::new(0.0, 0.0, 50.0),
            &Vector3::new(0.0, 0.0, 100.0),
            &Vector3::x(),
        );
        let img = render_image(&s, &pose, &intr, 40, 30).unwrap();
        assert!(img.data().iter().all(|&v| v == BACKGROUND));
    }

    #[test]
    fn renders_are_view_independent() {
        let s = gen_scene(3, 10, 6, SceneBounds::default());
        let intr = CameraIntrinsics::new(60.0, 40.0, 30.0);
        let a = PoseSE3::look_at(&Vector3::new(6.0, -1.0, 2.0), &s.center(), &Vector3::z());
        let b = PoseSE3::look_at(&Vector3::new(-2.0, -6.0, 3.0), &s.center(), &Vector3::z());
        assert_eq!(
            render_image(&s, &a, &intr, 80, 60).unwrap(),
            render_image(&s, &a, &intr, 80, 60).unwrap()
        );
        // a surface point hit from view a, re-hit from view b
        let mut checked = 0;
        for px in [(10.0, 10.0), (40.0, 30.0), (70.0, 50.0), (25.0, 45.0)] {
            let dir = a.rotation * ray_vector(&intr, &PixelPoint::new(px.0, px.1)).0;
            let Some((t, i, s1, t1)) = s.cast(&a.center(), &dir) else {
                continue;
            };
            let hit = a.center() + t * dir;
            let (q, _) = project(&intr, &world_to_camera(&b, &hit));
            let dir_b = b.rotation * ray_vector(&intr, &q).0;
            if let Some((tb, ib, s2, t2)) = s.cast(&b.center(), &dir_b) {
                let hit_b = b.center() + tb * dir_b;
                if ib == i && (hit_b - hit).norm() < 1e-9 {
                    let pl = &s.planes[i];
                    assert!((pl.texture(s1, t1) - pl.texture(s2, t2)).abs() < 1e-12);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }
}
