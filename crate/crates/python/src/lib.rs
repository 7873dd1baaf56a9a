//! Python bindings: per-point losses, RANSAC-PnP and scene generation.
//!
//! Poses cross the boundary as row-major 4×4 nested lists (camera-to-world),
//! intrinsics as `(f, cx, cy)`.

use nalgebra::{Matrix4, Vector3};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ::anglereloc::geometry::{pose_error as pose_error_rs, CameraIntrinsics, PixelPoint, PoseSE3};
use ::anglereloc::losses::{angle_point, reproj_point, LossConfig};
use ::anglereloc::ransac::{ransac, Correspondence2D3D, RansacConfig};
use ::anglereloc::scenegen::{save_dataset, Dataset, DatasetConfig};

type Pose4 = [[f64; 4]; 4];

fn to_pose(m: Pose4) -> PyResult<PoseSE3> {
    let pose = PoseSE3::from_homogeneous(&Matrix4::from_fn(|r, c| m[r][c]));
    if !pose.is_valid(1e-6) {
        return Err(PyValueError::new_err(
            "pose rotation block is not a rotation",
        ));
    }
    Ok(pose)
}

fn from_pose(p: &PoseSE3) -> Pose4 {
    let m = p.to_homogeneous();
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

fn intrinsics(k: (f64, f64, f64)) -> CameraIntrinsics {
    CameraIntrinsics::new(k.0, k.1, k.2)
}

/// Angle-based loss of one prediction: `(value, gradient)`.
#[pyfunction]
#[pyo3(signature = (pose, k, y, pixel, epsilon_norm = 1e-8))]
fn angle_loss(
    pose: Pose4,
    k: (f64, f64, f64),
    y: [f64; 3],
    pixel: [f64; 2],
    epsilon_norm: f64,
) -> PyResult<(f64, [f64; 3])> {
    let cfg = LossConfig {
        epsilon_norm,
        ..LossConfig::default()
    };
    let t = angle_point(
        &intrinsics(k),
        &to_pose(pose)?,
        &Vector3::from(y),
        &PixelPoint::new(pixel[0], pixel[1]),
        &cfg,
    );
    Ok((t.value, t.grad.into()))
}

/// Pixel reprojection loss of one prediction: `(value, gradient)`.
#[pyfunction]
fn reproj_loss(
    pose: Pose4,
    k: (f64, f64, f64),
    y: [f64; 3],
    pixel: [f64; 2],
) -> PyResult<(f64, [f64; 3])> {
    let t = reproj_point(
        &intrinsics(k),
        &to_pose(pose)?,
        &Vector3::from(y),
        &PixelPoint::new(pixel[0], pixel[1]),
    );
    Ok((t.value, t.grad.into()))
}

/// Rotation error in degrees and camera-center distance.
#[pyfunction]
fn pose_error(est: Pose4, gt: Pose4) -> PyResult<(f64, f64)> {
    Ok(pose_error_rs(&to_pose(est)?, &to_pose(gt)?))
}

/// RANSAC-PnP on `(pixel, world point)` pairs. Returns
/// `(pose, inlier_count, status)`.
#[pyfunction]
#[pyo3(signature = (pixels, points, k, seed = 0, threshold = 10.0, hypotheses = 256))]
fn localize(
    pixels: Vec<[f64; 2]>,
    points: Vec<[f64; 3]>,
    k: (f64, f64, f64),
    seed: u64,
    threshold: f64,
    hypotheses: usize,
) -> PyResult<(Pose4, usize, String)> {
    if pixels.len() != points.len() {
        return Err(PyValueError::new_err(format!(
            "{} pixels but {} points",
            pixels.len(),
            points.len()
        )));
    }
    let corrs: Vec<Correspondence2D3D> = pixels
        .iter()
        .zip(&points)
        .enumerate()
        .map(|(i, (p, w))| {
            Correspondence2D3D::new(i as u32, PixelPoint::new(p[0], p[1]), Vector3::from(*w))
        })
        .collect();
    let cfg = RansacConfig {
        seed,
        threshold,
        hypotheses,
        ..RansacConfig::default()
    };
    let est =
        ransac(&corrs, &intrinsics(k), &cfg).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((
        from_pose(&est.pose),
        est.inlier_count,
        format!("{:?}", est.status),
    ))
}

/// Generates the default synthetic dataset for `seed` into `out_dir`;
/// returns the number of frames written.
#[pyfunction]
#[pyo3(signature = (seed, out_dir, render = true))]
fn generate_scene(seed: u64, out_dir: &str, render: bool) -> PyResult<usize> {
    let ds = Dataset::generate(&DatasetConfig {
        seed,
        render,
        ..DatasetConfig::default()
    })
    .map_err(|e| PyValueError::new_err(e.to_string()))?;
    save_dataset(&ds, std::path::Path::new(out_dir))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(ds.frames.len())
}

#[pymodule]
fn anglereloc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(angle_loss, m)?)?;
    m.add_function(wrap_pyfunction!(reproj_loss, m)?)?;
    m.add_function(wrap_pyfunction!(pose_error, m)?)?;
    m.add_function(wrap_pyfunction!(localize, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    Ok(())
}
