//! Pose from 2D-3D correspondences: P3P hypotheses inside RANSAC, scored by
//! inlier count, then Gauss-Newton refinement.

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    exp_so3, project, skew, world_to_camera, CameraIntrinsics, DepthStatus, PixelPoint, PoseSE3,
};
use crate::scenegen::io::CorrespondenceRow;
use crate::scenegen::PointId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RansacError {
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("need at least {needed} correspondences, got {got}")]
    TooFewCorrespondences { needed: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence2D3D {
    pub point_id: PointId,
    pub pixel: PixelPoint,
    pub world: Vector3<f64>,
}

impl Correspondence2D3D {
    pub fn new(point_id: PointId, pixel: PixelPoint, world: Vector3<f64>) -> Self {
        Self {
            point_id,
            pixel,
            world,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pixel.is_finite() && self.world.iter().all(|v| v.is_finite())
    }
}

impl From<CorrespondenceRow> for Correspondence2D3D {
    fn from((k, p, w): CorrespondenceRow) -> Self {
        Self::new(k, p, w)
    }
}

impl From<&Correspondence2D3D> for CorrespondenceRow {
    fn from(c: &Correspondence2D3D) -> Self {
        (c.point_id, c.pixel, c.world)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub hypotheses: usize,
    /// Inlier threshold in pixels.
    pub threshold: f64,
    pub max_refinement: usize,
    pub seed: u64,
    pub min_inliers: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            hypotheses: 256,
            threshold: 10.0,
            max_refinement: 8,
            seed: 0,
            min_inliers: 10,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), RansacError> {
        if self.hypotheses == 0 || self.max_refinement == 0 || self.min_inliers == 0 {
            return Err(RansacError::Config(
                "hypotheses, max_refinement and min_inliers must be positive".into(),
            ));
        }
        if !(self.threshold > 0.0) {
            return Err(RansacError::Config(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimateStatus {
    Ok,
    Degenerate,
    TooFewInliers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    /// Camera-to-world.
    pub pose: PoseSE3,
    pub inlier_count: usize,
    pub inliers: Vec<PointId>,
    /// Inlier count after each refinement round.
    pub trace: Vec<usize>,
    pub status: EstimateStatus,
}

fn bearing(intr: &CameraIntrinsics, p: &PixelPoint) -> Vector3<f64> {
    Vector3::new(p.x - intr.cx, p.y - intr.cy, intr.f).normalize()
}

/// Real roots of `c[0] x^n + ... + c[n]` from the companion matrix, polished
/// with Newton steps.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let lead = coeffs
        .iter()
        .position(|c| c.abs() > 1e-14 * scale)
        .unwrap_or(coeffs.len());
    let c = &coeffs[lead..];
    let n = c.len().saturating_sub(1);
    if n == 0 {
        return Vec::new();
    }
    let mut comp = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        comp[(0, j)] = -c[j + 1] / c[0];
    }
    for i in 1..n {
        comp[(i, i - 1)] = 1.0;
    }
    let eval = |x: f64| {
        c.iter()
            .fold((0.0, 0.0), |(p, dp), &a| (p * x + a, dp * x + p))
    };
    let mut roots: Vec<f64> = comp
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            let mut px = eval(x).0.abs();
            for _ in 0..60 {
                let (p, dp) = eval(x);
                if dp == 0.0 || p == 0.0 {
                    break;
                }
                let nx = x - p / dp;
                let pn = eval(nx).0.abs();
                if !nx.is_finite() || pn >= px {
                    break;
                }
                x = nx;
                px = pn;
            }
            x
        })
        .collect();
    roots.sort_by(|a, b| a.total_cmp(b));
    roots.dedup_by(|a, b| (*a - *b).abs() <= 1e-10 * (1.0 + b.abs()));
    roots
}

/// Rigid transform `(R, t)` with `b ≈ R a + t` (Arun / Kabsch).
fn align(a: &[Vector3<f64>; 3], b: &[Vector3<f64>; 3]) -> (Matrix3<f64>, Vector3<f64>) {
    let ca = (a[0] + a[1] + a[2]) / 3.0;
    let cb = (b[0] + b[1] + b[2]) / 3.0;
    let mut h = Matrix3::zeros();
    for i in 0..3 {
        h += (a[i] - ca) * (b[i] - cb).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = vt.transpose();
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, (v * u.transpose()).determinant()));
    let r = v * d * u.transpose();
    (r, cb - r * ca)
}

fn reprojection_error(
    intr: &CameraIntrinsics,
    pose: &PoseSE3,
    c: &Correspondence2D3D,
) -> (f64, DepthStatus) {
    let (q, status) = project(intr, &world_to_camera(pose, &c.world));
    (q.distance(&c.pixel), status)
}

/// All poses consistent with three correspondences (Grunert's quartic).
pub fn p3p_solve(
    c1: &Correspondence2D3D,
    c2: &Correspondence2D3D,
    c3: &Correspondence2D3D,
    intr: &CameraIntrinsics,
) -> Result<Vec<PoseSE3>, RansacError> {
    let (p1, p2, p3) = (c1.world, c2.world, c3.world);
    let span = (p2 - p1).norm().max((p3 - p1).norm()).max((p3 - p2).norm());
    if !(span > 0.0) || (p2 - p1).cross(&(p3 - p1)).norm() <= 1e-10 * span * span {
        return Err(RansacError::Degenerate("collinear world points".into()));
    }
    let pix_eps = 1e-9;
    if c1.pixel.distance(&c2.pixel) < pix_eps
        || c1.pixel.distance(&c3.pixel) < pix_eps
        || c2.pixel.distance(&c3.pixel) < pix_eps
    {
        return Err(RansacError::Degenerate("coincident pixels".into()));
    }
    let (j1, j2, j3) = (
        bearing(intr, &c1.pixel),
        bearing(intr, &c2.pixel),
        bearing(intr, &c3.pixel),
    );
    let a2 = (p2 - p3).norm_squared();
    let b2 = (p1 - p3).norm_squared();
    let c2s = (p1 - p2).norm_squared();
    let (ca, cb, cg) = (j2.dot(&j3), j1.dot(&j3), j1.dot(&j2));

    let amc = (a2 - c2s) / b2;
    let apc = (a2 + c2s) / b2;
    let bmc = (b2 - c2s) / b2;
    let bma = (b2 - a2) / b2;
    let k4 = (amc - 1.0).powi(2) - 4.0 * c2s / b2 * ca * ca;
    let k3 = 4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2s / b2 * ca * ca * cb);
    let k2 = 2.0
        * (amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * bmc * ca * ca
            - 4.0 * apc * ca * cb * cg
            + 2.0 * bma * cg * cg);
    let k1 = 4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - apc) * ca * cg);
    let k0 = (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cg * cg;

    let world = [p1, p2, p3];
    let mut out = Vec::new();
    for v in real_roots(&[k4, k3, k2, k1, k0]) {
        let den = 2.0 * (cg - v * ca);
        if den.abs() < 1e-14 {
            continue;
        }
        let u = ((amc - 1.0) * v * v - 2.0 * amc * cb * v + 1.0 + amc) / den;
        let q = 1.0 + u * u - 2.0 * u * cg;
        if !(q > 0.0) || u <= 0.0 || v <= 0.0 {
            continue;
        }
        let s1 = (c2s / q).sqrt();
        let cam = [s1 * j1, u * s1 * j2, v * s1 * j3];
        let (r, t) = align(&world, &cam);
        if !(r.iter().all(|x| x.is_finite()) && t.iter().all(|x| x.is_finite())) {
            continue;
        }
        let mut pose_wc = PoseSE3::new(r, t);
        let three = [*c1, *c2, *c3];
        if three
            .iter()
            .any(|c| reprojection_error(intr, &pose_wc.inverse(), c).0 > 1e-9)
        {
            if let Ok((p, _)) = gauss_newton(&pose_wc, &three, &[0, 1, 2], intr) {
                pose_wc = p;
            }
        }
        let pose = pose_wc.inverse();
        let ok = [c1, c2, c3].iter().all(|c| {
            let (e, st) = reprojection_error(intr, &pose, c);
            st == DepthStatus::InFront && e < 1e-6
        });
        if ok {
            out.push(pose);
        }
    }
    Ok(out)
}

/// P3P on the first three correspondences; the fourth picks the candidate.
pub fn pnp_minimal(
    corrs: &[Correspondence2D3D; 4],
    intr: &CameraIntrinsics,
) -> Result<PoseSE3, RansacError> {
    let candidates = p3p_solve(&corrs[0], &corrs[1], &corrs[2], intr)?;
    candidates
        .into_iter()
        .map(|p| {
            let (e, st) = reprojection_error(intr, &p, &corrs[3]);
            (
                if st == DepthStatus::InFront {
                    e
                } else {
                    f64::INFINITY
                },
                p,
            )
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(
            |(_, p)| match gauss_newton(&p.inverse(), corrs, &[0, 1, 2, 3], intr) {
                Ok((polished, _)) => polished.inverse(),
                Err(_) => p,
            },
        )
        .ok_or_else(|| RansacError::Degenerate("no real P3P solution".into()))
}

/// Inliers: in front of the camera with reprojection error below `tau`.
/// Returns their indices and mean error.
pub fn score_indices(
    pose: &PoseSE3,
    corrs: &[Correspondence2D3D],
    intr: &CameraIntrinsics,
    tau: f64,
) -> (Vec<usize>, f64) {
    let mut idx = Vec::new();
    let mut sum = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        let (e, st) = reprojection_error(intr, pose, c);
        if st == DepthStatus::InFront && e < tau {
            idx.push(i);
            sum += e;
        }
    }
    let mean = if idx.is_empty() {
        f64::INFINITY
    } else {
        sum / idx.len() as f64
    };
    (idx, mean)
}

/// Inlier count and inlier point ids.
pub fn score(
    pose: &PoseSE3,
    corrs: &[Correspondence2D3D],
    intr: &CameraIntrinsics,
    tau: f64,
) -> (usize, Vec<PointId>) {
    let (idx, _) = score_indices(pose, corrs, intr, tau);
    (idx.len(), idx.iter().map(|&i| corrs[i].point_id).collect())
}

fn sample4(rng: &mut ChaCha8Rng, n: usize) -> [usize; 4] {
    let v = rand::seq::index::sample(rng, n, 4);
    [v.index(0), v.index(1), v.index(2), v.index(3)]
}

/// Inlier count, mean inlier error, pose and inlier indices of one hypothesis.
type Scored = (usize, f64, PoseSE3, Vec<usize>);

/// Hypothesize-and-verify pose estimation followed by refinement.
pub fn ransac(
    corrs: &[Correspondence2D3D],
    intr: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<PoseEstimate, RansacError> {
    cfg.validate()?;
    if corrs.len() < 4 {
        return Err(RansacError::TooFewCorrespondences {
            needed: 4,
            got: corrs.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples: Vec<[usize; 4]> = (0..cfg.hypotheses)
        .map(|_| sample4(&mut rng, corrs.len()))
        .collect();
    let scored: Vec<Option<Scored>> = samples
        .par_iter()
        .map(|s| {
            let pose =
                pnp_minimal(&[corrs[s[0]], corrs[s[1]], corrs[s[2]], corrs[s[3]]], intr).ok()?;
            let (idx, mean) = score_indices(&pose, corrs, intr, cfg.threshold);
            Some((idx.len(), mean, pose, idx))
        })
        .collect();

    let mut best: Option<(usize, f64, PoseSE3, Vec<usize>)> = None;
    for cand in scored.into_iter().flatten() {
        let better = match &best {
            None => true,
            Some(b) => cand.0 > b.0 || (cand.0 == b.0 && cand.1 < b.1),
        };
        if better {
            best = Some(cand);
        }
    }
    // Every sample degenerate: the best hypothesis has no inliers at all.
    let Some((count, _, pose, idx)) = best else {
        return Ok(PoseEstimate {
            pose: PoseSE3::identity(),
            inlier_count: 0,
            inliers: Vec::new(),
            trace: Vec::new(),
            status: EstimateStatus::TooFewInliers,
        });
    };
    if count < cfg.min_inliers || count < 4 {
        return Ok(PoseEstimate {
            pose,
            inlier_count: count,
            inliers: idx.iter().map(|&i| corrs[i].point_id).collect(),
            trace: Vec::new(),
            status: EstimateStatus::TooFewInliers,
        });
    }
    refine_indices(&pose, corrs, &idx, intr, cfg)
}

fn residual_cost(
    pose_wc: &PoseSE3,
    corrs: &[Correspondence2D3D],
    idx: &[usize],
    intr: &CameraIntrinsics,
) -> f64 {
    idx.iter()
        .map(|&i| {
            let c = &corrs[i];
            let pc = pose_wc.transform_point(&c.world);
            let u = intr.f * pc.x / pc.z + intr.cx - c.pixel.x;
            let v = intr.f * pc.y / pc.z + intr.cy - c.pixel.y;
            u * u + v * v
        })
        .sum()
}

/// Smallest-to-largest eigenvalue ratio below which the normal matrix is
/// treated as singular.
const RANK_TOL: f64 = 1e-12;

/// Gauss-Newton on the world-to-camera pose with step halving. Returns the
/// refined world-to-camera pose and the cost after every accepted step.
fn gauss_newton(
    pose_wc: &PoseSE3,
    corrs: &[Correspondence2D3D],
    idx: &[usize],
    intr: &CameraIntrinsics,
) -> Result<(PoseSE3, Vec<f64>), RansacError> {
    let mut cur = *pose_wc;
    let mut cost = residual_cost(&cur, corrs, idx, intr);
    let mut history = vec![cost];
    for _ in 0..50 {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for &i in idx {
            let c = &corrs[i];
            let rx = cur.rotation * c.world;
            let pc = rx + cur.translation;
            let (x, y, z) = (pc.x, pc.y, pc.z);
            let f = intr.f;
            let r = nalgebra::Vector2::new(
                f * x / z + intr.cx - c.pixel.x,
                f * y / z + intr.cy - c.pixel.y,
            );
            let jp = Matrix2x3::new(f / z, 0.0, -f * x / (z * z), 0.0, f / z, -f * y / (z * z));
            let mut j = nalgebra::Matrix2x6::<f64>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * -skew(&rx)));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&jp);
            h += j.transpose() * j;
            g += j.transpose() * r;
        }
        let eig = SymmetricEigen::new(h);
        let (lo, hi) = eig
            .eigenvalues
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| {
                (lo.min(e), hi.max(e.abs()))
            });
        if !(hi > 0.0) || lo <= RANK_TOL * hi {
            return Err(RansacError::Degenerate(
                "rank-deficient normal equations".into(),
            ));
        }
        let Some(delta) = h.cholesky().map(|ch| -ch.solve(&g)) else {
            return Err(RansacError::Degenerate(
                "normal equations not positive definite".into(),
            ));
        };
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let d = delta * step;
            let w = Vector3::new(d[0], d[1], d[2]);
            let dr = exp_so3(&w);
            let cand = PoseSE3::new(
                dr * cur.rotation,
                cur.translation + Vector3::new(d[3], d[4], d[5]),
            );
            let c = residual_cost(&cand, corrs, idx, intr);
            if c.is_finite() && c <= cost {
                accepted = Some((cand, c));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, c)) = accepted else { break };
        let improvement = cost - c;
        let small_step = delta.norm() * step < 1e-14;
        cur = cand;
        cost = c;
        history.push(c);
        if small_step || improvement <= 1e-15 * cost.max(1e-300) {
            break;
        }
    }
    Ok((cur.orthonormalized(), history))
}

/// Refinement from indices into `corrs`.
pub fn refine_indices(
    pose: &PoseSE3,
    corrs: &[Correspondence2D3D],
    inliers: &[usize],
    intr: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<PoseEstimate, RansacError> {
    if inliers.len() < 4 {
        return Err(RansacError::TooFewCorrespondences {
            needed: 4,
            got: inliers.len(),
        });
    }
    let ids = |idx: &[usize]| idx.iter().map(|&i| corrs[i].point_id).collect::<Vec<_>>();
    let mut current = inliers.to_vec();
    let mut pose_wc = pose.inverse();
    let mut trace = Vec::new();
    for _ in 0..cfg.max_refinement {
        pose_wc = match gauss_newton(&pose_wc, corrs, &current, intr) {
            Ok((p, _)) => p,
            Err(_) => {
                return Ok(PoseEstimate {
                    pose: *pose,
                    inlier_count: inliers.len(),
                    inliers: ids(inliers),
                    trace,
                    status: EstimateStatus::Degenerate,
                });
            }
        };
        let (next, _) = score_indices(&pose_wc.inverse(), corrs, intr, cfg.threshold);
        trace.push(next.len());
        if next.len() < 4 {
            break;
        }
        let fixed = next == current;
        current = next;
        if fixed {
            break;
        }
    }
    let status = if current.len() >= cfg.min_inliers {
        EstimateStatus::Ok
    } else {
        EstimateStatus::TooFewInliers
    };
    Ok(PoseEstimate {
        pose: pose_wc.inverse(),
        inlier_count: current.len(),
        inliers: ids(&current),
        trace,
        status,
    })
}

/// Refinement over the correspondences whose point ids are in `inliers`.
pub fn refine(
    pose: &PoseSE3,
    corrs: &[Correspondence2D3D],
    inliers: &[PointId],
    intr: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<PoseEstimate, RansacError> {
    let idx: Vec<usize> = corrs
        .iter()
        .enumerate()
        .filter(|(_, c)| inliers.contains(&c.point_id))
        .map(|(i, _)| i)
        .collect();
    refine_indices(pose, corrs, &idx, intr, cfg)
}
