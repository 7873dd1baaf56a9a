//! Central finite-difference checks of every loss gradient.
//!
//! Each suite draws random configurations, evaluates the analytic gradient of
//! the loss total with respect to each prediction, and compares it with a
//! central difference of the total. The pixel-space reprojection loss excludes
//! configurations with `|Z| < 1e-3` (flagged, not failed).

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::geometry::{project, world_to_camera, CameraIntrinsics, PixelPoint, PoseSE3};
use crate::losses::{
    angle_point, combined_loss, image_loss, multiview_image_loss, photometric_image_loss,
    reproj_point, LossConfig, LossReport, PredictionGrid, ReprojectionMode,
};
use crate::scenegen::{CoVisibilityGraph, Image, ImageId, Observation};

pub const FD_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Reprojection-loss configurations closer than this to the camera plane are excluded.
pub const REPROJ_EXCLUSION_BAND: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Suite {
    Reprojection,
    Angle,
    MultiView,
    Photometric,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::Reprojection,
        Suite::Angle,
        Suite::MultiView,
        Suite::Photometric,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Reprojection => "reprojection",
            Suite::Angle => "angle",
            Suite::MultiView => "multiview",
            Suite::Photometric => "photometric",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub suite: Suite,
    pub config: usize,
    pub max_rel_error: f64,
    pub excluded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuiteSummary {
    pub suite: Suite,
    pub configs: usize,
    pub excluded: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Knobs for the suites; `corrupt` scales the analytic gradient of one suite
/// to verify that failures are detected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub configs: usize,
    pub tolerance: f64,
    pub corrupt: Option<Suite>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            configs: 100,
            tolerance: DEFAULT_TOLERANCE,
            corrupt: None,
        }
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &Vector3<f64>, numeric: &Vector3<f64>) -> f64 {
    let scale = analytic.norm().max(numeric.norm());
    if scale < 1e-300 {
        0.0
    } else {
        (analytic - numeric).norm() / scale
    }
}

/// Central difference of `f` at `y`.
pub fn central_difference(
    mut f: impl FnMut(&Vector3<f64>) -> f64,
    y: &Vector3<f64>,
    h: f64,
) -> Vector3<f64> {
    let mut g = Vector3::zeros();
    for i in 0..3 {
        let mut yp = *y;
        let mut ym = *y;
        yp[i] += h;
        ym[i] -= h;
        g[i] = (f(&yp) - f(&ym)) / (2.0 * h);
    }
    g
}

fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

pub fn random_pose<R: Rng>(rng: &mut R, max_translation: f64) -> PoseSE3 {
    let t = Vector3::new(
        rng.random_range(-max_translation..=max_translation),
        rng.random_range(-max_translation..=max_translation),
        rng.random_range(-max_translation..=max_translation),
    );
    PoseSE3::from_axis_angle(
        &random_unit(rng),
        rng.random_range(0.0..std::f64::consts::PI),
        t,
    )
}

fn random_intrinsics<R: Rng>(rng: &mut R) -> CameraIntrinsics {
    CameraIntrinsics::new(
        rng.random_range(50.0..600.0),
        rng.random_range(20.0..320.0),
        rng.random_range(15.0..240.0),
    )
}

fn scale(g: Vector3<f64>, corrupt: bool) -> Vector3<f64> {
    if corrupt {
        g * 1.01
    } else {
        g
    }
}

/// Pixel-space reprojection loss.
pub fn check_reprojection(opts: &GradCheckOptions) -> Vec<GradCheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x11);
    let corrupt = opts.corrupt == Some(Suite::Reprojection);
    (0..opts.configs)
        .map(|config| {
            let intr = random_intrinsics(&mut rng);
            let pose = random_pose(&mut rng, 5.0);
            // camera-frame point anywhere, including behind the camera
            let d = Vector3::new(
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-8.0..8.0),
            );
            let y = pose.transform_point(&d);
            let p = PixelPoint::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            if d.z.abs() < REPROJ_EXCLUSION_BAND {
                return GradCheckRow {
                    suite: Suite::Reprojection,
                    config,
                    max_rel_error: 0.0,
                    excluded: true,
                };
            }
            let analytic = scale(reproj_point(&intr, &pose, &y, &p).grad, corrupt);
            let numeric =
                central_difference(|yy| reproj_point(&intr, &pose, yy, &p).value, &y, FD_STEP);
            GradCheckRow {
                suite: Suite::Reprojection,
                config,
                max_rel_error: relative_error(&analytic, &numeric),
                excluded: false,
            }
        })
        .collect()
}

/// Angle-based loss, with predictions in front of, beside and behind the camera.
pub fn check_angle(opts: &GradCheckOptions) -> Vec<GradCheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x22);
    let corrupt = opts.corrupt == Some(Suite::Angle);
    let cfg = LossConfig::default();
    (0..opts.configs)
        .map(|config| {
            let intr = random_intrinsics(&mut rng);
            let pose = random_pose(&mut rng, 5.0);
            let d = random_unit(&mut rng) * rng.random_range(1e-2..20.0);
            let y = pose.transform_point(&d);
            let p = PixelPoint::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let analytic = scale(angle_point(&intr, &pose, &y, &p, &cfg).grad, corrupt);
            let numeric = central_difference(
                |yy| angle_point(&intr, &pose, yy, &p, &cfg).value,
                &y,
                FD_STEP,
            );
            GradCheckRow {
                suite: Suite::Angle,
                config,
                max_rel_error: relative_error(&analytic, &numeric),
                excluded: false,
            }
        })
        .collect()
}

/// Multi-view loss on a small random rig: three cameras looking at a cloud,
/// every other point tracked across views.
pub fn check_multiview(opts: &GradCheckOptions) -> Vec<GradCheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x33);
    let corrupt = opts.corrupt == Some(Suite::MultiView);
    let cfg = LossConfig::default();
    let intr = CameraIntrinsics::new(100.0, 40.0, 30.0);
    (0..opts.configs)
        .map(|config| {
            let poses: BTreeMap<ImageId, PoseSE3> = (0..3)
                .map(|i| {
                    let eye = Vector3::new(
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-3.0..3.0),
                        rng.random_range(-6.0..-4.0),
                    );
                    (
                        i,
                        PoseSE3::look_at(&eye, &Vector3::zeros(), &Vector3::new(0.0, -1.0, 0.0)),
                    )
                })
                .collect();
            let n_points = 6;
            let gt: Vec<Vector3<f64>> = (0..n_points)
                .map(|_| {
                    Vector3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect();
            let pixel = |img: ImageId, x: &Vector3<f64>| {
                project(&intr, &world_to_camera(&poses[&img], x)).0
            };
            let mut tracks = BTreeMap::new();
            for (k, x) in gt.iter().enumerate().filter(|(k, _)| k % 2 == 0) {
                tracks.insert(
                    k as u32,
                    (0..3).map(|i| (i, pixel(i, x))).collect::<Vec<_>>(),
                );
            }
            let covis = CoVisibilityGraph::from_tracks(tracks);
            let obs: Vec<Observation> = gt
                .iter()
                .enumerate()
                .map(|(k, x)| Observation {
                    point_id: k as u32,
                    pixel: pixel(0, x),
                    gt_world: *x,
                    gt_depth: 1.0,
                })
                .collect();
            let coords: Vec<Vector3<f64>> = gt
                .iter()
                .map(|x| x + random_unit(&mut rng) * rng.random_range(0.05..2.0))
                .collect();
            let ids: Vec<u32> = (0..n_points as u32).collect();
            let rng_seed: u64 = rng.random();
            let eval = |coords: &[Vector3<f64>]| -> LossReport {
                let grid = PredictionGrid::new(ids.clone(), coords.to_vec());
                let mut r = ChaCha8Rng::seed_from_u64(rng_seed);
                multiview_image_loss(&intr, &poses, 0, &grid, &obs, &covis, &cfg, &mut r)
                    .expect("valid inputs")
            };
            let report = eval(&coords);
            let mut worst: f64 = 0.0;
            for k in 0..n_points {
                let numeric = central_difference(
                    |yk| {
                        let mut c = coords.clone();
                        c[k] = *yk;
                        eval(&c).terms[k].value
                    },
                    &coords[k],
                    FD_STEP,
                );
                worst = worst.max(relative_error(
                    &scale(report.terms[k].grad, corrupt),
                    &numeric,
                ));
            }
            GradCheckRow {
                suite: Suite::MultiView,
                config,
                max_rel_error: worst,
                excluded: false,
            }
        })
        .collect()
}

/// Smooth synthetic texture for photometric checks.
fn smooth_image<R: Rng>(rng: &mut R, w: usize, h: usize) -> Image {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.1..0.6),
                rng.random_range(0.1..0.6),
                rng.random_range(0.0..6.0),
                rng.random_range(0.05..0.1),
            )
        })
        .collect();
    Image::from_fn(w, h, |x, y| {
        let v: f64 = waves
            .iter()
            .map(|(a, b, ph, amp)| amp * (a * x as f64 + b * y as f64 + ph).sin())
            .sum();
        (0.5 + v).clamp(0.0, 1.0)
    })
}

/// Photometric loss combined with the angle loss (`L_ang + λ·L_pr`) on a
/// small dense grid.
pub fn check_photometric(opts: &GradCheckOptions) -> Vec<GradCheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x44);
    let corrupt = opts.corrupt == Some(Suite::Photometric);
    let cfg = LossConfig::default();
    let (w, h) = (12usize, 10usize);
    let intr = CameraIntrinsics::new(15.0, 5.5, 4.5);
    (0..opts.configs)
        .map(|config| {
            let pose_i = PoseSE3::identity();
            let pose_j = PoseSE3::from_axis_angle(
                &random_unit(&mut rng),
                rng.random_range(0.0..0.05),
                Vector3::new(
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.1..0.1),
                ),
            );
            let img_i = smooth_image(&mut rng, w, h);
            let img_j = smooth_image(&mut rng, w, h);
            let mut obs = Vec::new();
            let mut coords = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    let p = PixelPoint::new(x as f64, y as f64);
                    let depth = rng.random_range(3.0..5.0);
                    let ray = crate::geometry::ray_vector(&intr, &p).0 / intr.f;
                    let gt = pose_i.transform_point(&(ray * depth));
                    obs.push(Observation {
                        point_id: (y * w + x) as u32,
                        pixel: p,
                        gt_world: gt,
                        gt_depth: depth,
                    });
                    coords.push(gt + random_unit(&mut rng) * rng.random_range(0.0..0.3));
                }
            }
            let ids: Vec<u32> = obs.iter().map(|o| o.point_id).collect();
            let eval = |coords: &[Vector3<f64>]| -> LossReport {
                let grid = PredictionGrid::new(ids.clone(), coords.to_vec());
                let ang = image_loss(ReprojectionMode::Angle, &intr, &pose_i, &grid, &obs, &cfg)
                    .expect("valid");
                let pr = photometric_image_loss(&intr, &pose_j, &grid, &obs, &img_i, &img_j, &cfg)
                    .expect("valid");
                combined_loss(&ang, &pr, &cfg).expect("aligned")
            };
            let report = eval(&coords);
            let mut worst: f64 = 0.0;
            // a subset of points per configuration keeps the suite fast
            for _ in 0..8 {
                let k = rng.random_range(0..coords.len());
                let numeric = central_difference(
                    |yk| {
                        let mut c = coords.clone();
                        c[k] = *yk;
                        eval(&c).total
                    },
                    &coords[k],
                    FD_STEP,
                );
                worst = worst.max(relative_error(
                    &scale(report.terms[k].grad, corrupt),
                    &numeric,
                ));
            }
            GradCheckRow {
                suite: Suite::Photometric,
                config,
                max_rel_error: worst,
                excluded: false,
            }
        })
        .collect()
}

pub fn run_suite(suite: Suite, opts: &GradCheckOptions) -> Vec<GradCheckRow> {
    match suite {
        Suite::Reprojection => check_reprojection(opts),
        Suite::Angle => check_angle(opts),
        Suite::MultiView => check_multiview(opts),
        Suite::Photometric => check_photometric(opts),
    }
}

pub fn summarize(suite: Suite, rows: &[GradCheckRow], tolerance: f64) -> SuiteSummary {
    let checked: Vec<&GradCheckRow> = rows.iter().filter(|r| !r.excluded).collect();
    let max_rel_error = checked.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let all_finite = checked.iter().all(|r| r.max_rel_error.is_finite());
    SuiteSummary {
        suite,
        configs: checked.len(),
        excluded: rows.len() - checked.len(),
        max_rel_error,
        passed: all_finite && max_rel_error < tolerance && !checked.is_empty(),
    }
}

/// Runs every suite; returns per-configuration rows and per-suite summaries.
pub fn run_all(opts: &GradCheckOptions) -> (Vec<GradCheckRow>, Vec<SuiteSummary>) {
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for suite in Suite::ALL {
        let r = run_suite(suite, opts);
        summaries.push(summarize(suite, &r, opts.tolerance));
        rows.extend(r);
    }
    (rows, summaries)
}
