use nalgebra::{Matrix2x3, Vector2, Vector3};

use super::{LossConfig, LossError, LossReport, PointLossTerm, PredictionGrid};
use crate::geometry::{project, world_to_camera, CameraIntrinsics, DepthStatus, PoseSE3};
use crate::scenegen::{Image, Observation};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearSample {
    pub value: f64,
    /// `(∂value/∂x, ∂value/∂y)`.
    pub grad: Vector2<f64>,
    pub valid: bool,
}

/// Weighted sum of the four pixels around `(x, y)`. Samples outside
/// `[0, W−1] × [0, H−1]` are invalid and return zero.
pub fn bilinear_sample(img: &Image, x: f64, y: f64, channel: usize) -> BilinearSample {
    let w = img.width();
    let h = img.height();
    let inside = x.is_finite()
        && y.is_finite()
        && x >= 0.0
        && y >= 0.0
        && x <= (w - 1) as f64
        && y <= (h - 1) as f64;
    if !inside {
        return BilinearSample {
            value: 0.0,
            grad: Vector2::zeros(),
            valid: false,
        };
    }
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = x - x0 as f64;
    let ty = y - y0 as f64;
    let v00 = img.get(x0, y0, channel);
    let v10 = img.get(x1, y0, channel);
    let v01 = img.get(x0, y1, channel);
    let v11 = img.get(x1, y1, channel);
    let top = v00 + tx * (v10 - v00);
    let bottom = v01 + tx * (v11 - v01);
    let value = top + ty * (bottom - top);
    let gx = if x1 == x0 {
        0.0
    } else {
        (1.0 - ty) * (v10 - v00) + ty * (v11 - v01)
    };
    let gy = if y1 == y0 { 0.0 } else { bottom - top };
    BilinearSample {
        value,
        grad: Vector2::new(gx, gy),
        valid: true,
    }
}

/// Per-pixel SSIM over 3x3 box windows, with enough state to back-propagate
/// into the first image.
#[derive(Debug, Clone)]
pub struct SsimMap {
    width: usize,
    height: usize,
    /// SSIM per pixel; zero where the center pixel is masked.
    pub values: Vec<f64>,
    mask: Vec<bool>,
    a: Vec<f64>,
    b: Vec<f64>,
    stats: Vec<WindowStats>,
}

#[derive(Debug, Clone, Copy, Default)]
struct WindowStats {
    n: f64,
    mu_a: f64,
    mu_b: f64,
    n1: f64,
    n2: f64,
    d1: f64,
    d2: f64,
}

impl SsimMap {
    fn window(&self, cx: usize, cy: usize) -> impl Iterator<Item = usize> + '_ {
        let x0 = cx.saturating_sub(1);
        let y0 = cy.saturating_sub(1);
        let x1 = (cx + 1).min(self.width - 1);
        let y1 = (cy + 1).min(self.height - 1);
        (y0..=y1)
            .flat_map(move |y| (x0..=x1).map(move |x| y * self.width + x))
            .filter(|&i| self.mask[i])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `Σ_c upstream[c] · ∂SSIM[c]/∂a[m]` for every pixel `m`.
    pub fn vjp(&self, upstream: &[f64]) -> Vec<f64> {
        assert_eq!(upstream.len(), self.values.len());
        let mut out = vec![0.0; self.values.len()];
        for cy in 0..self.height {
            for cx in 0..self.width {
                let c = cy * self.width + cx;
                if !self.mask[c] || upstream[c] == 0.0 {
                    continue;
                }
                let st = self.stats[c];
                let s = self.values[c] * upstream[c];
                for m in self.window(cx, cy) {
                    let dn1 = 2.0 * st.mu_b / st.n;
                    let dn2 = 2.0 * (self.b[m] - st.mu_b) / st.n;
                    let dd1 = 2.0 * st.mu_a / st.n;
                    let dd2 = 2.0 * (self.a[m] - st.mu_a) / st.n;
                    out[m] += s * (dn1 / st.n1 + dn2 / st.n2 - dd1 / st.d1 - dd2 / st.d2);
                }
            }
        }
        out
    }
}

/// SSIM map of single-channel images `a` and `b` over 3x3 windows clipped to
/// the image border.
pub fn ssim3x3(a: &Image, b: &Image) -> Result<SsimMap, LossError> {
    let mask = vec![true; a.width() * a.height()];
    ssim3x3_masked(a, b, &mask)
}

/// Masked variant: windows only aggregate pixels with `mask == true`, and
/// masked centers get no SSIM value.
pub fn ssim3x3_masked(a: &Image, b: &Image, mask: &[bool]) -> Result<SsimMap, LossError> {
    if a.dims() != b.dims() {
        return Err(LossError::DimensionMismatch(format!(
            "{:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if a.channels() != 1 {
        return Err(LossError::DimensionMismatch(
            "ssim3x3 expects single-channel images".into(),
        ));
    }
    let (w, h) = (a.width(), a.height());
    if mask.len() != w * h {
        return Err(LossError::DimensionMismatch(format!(
            "mask of {} for {}x{} image",
            mask.len(),
            w,
            h
        )));
    }
    let mut map = SsimMap {
        width: w,
        height: h,
        values: vec![0.0; w * h],
        mask: mask.to_vec(),
        a: a.data().to_vec(),
        b: b.data().to_vec(),
        stats: vec![WindowStats::default(); w * h],
    };
    for cy in 0..h {
        for cx in 0..w {
            let c = cy * w + cx;
            if !mask[c] {
                continue;
            }
            let (mut n, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for m in map.window(cx, cy) {
                let (va, vb) = (map.a[m], map.b[m]);
                n += 1.0;
                sa += va;
                sb += vb;
                saa += va * va;
                sbb += vb * vb;
                sab += va * vb;
            }
            let mu_a = sa / n;
            let mu_b = sb / n;
            let var_a = saa / n - mu_a * mu_a;
            let var_b = sbb / n - mu_b * mu_b;
            let cov = sab / n - mu_a * mu_b;
            let st = WindowStats {
                n,
                mu_a,
                mu_b,
                n1: 2.0 * mu_a * mu_b + SSIM_C1,
                n2: 2.0 * cov + SSIM_C2,
                d1: mu_a * mu_a + mu_b * mu_b + SSIM_C1,
                d2: var_a + var_b + SSIM_C2,
            };
            map.values[c] = (st.n1 * st.n2) / (st.d1 * st.d2);
            map.stats[c] = st;
        }
    }
    Ok(map)
}

/// Photometric reconstruction loss for image `I_i` against neighbor `I_j`.
///
/// Each prediction is projected into `I_j` and bilinearly sampled to build
/// the reconstruction `Î_i`, which is compared with `I_i` at the observation's
/// pixel cell: `(1−α)·|Î−I| + α·(1−SSIM)/2`. Predictions behind `I_j` or
/// projecting outside it are masked out.
#[allow(clippy::too_many_arguments)]
pub fn photometric_image_loss(
    intr: &CameraIntrinsics,
    pose_j: &PoseSE3,
    predictions: &PredictionGrid,
    observations: &[Observation],
    img_i: &Image,
    img_j: &Image,
    cfg: &LossConfig,
) -> Result<LossReport, LossError> {
    predictions.check_against(observations)?;
    if img_i.dims() != img_j.dims() {
        return Err(LossError::DimensionMismatch(format!(
            "{:?} vs {:?}",
            img_i.dims(),
            img_j.dims()
        )));
    }
    let (w, h, channels) = img_i.dims();
    let alpha = cfg.alpha_ssim;

    struct Sample {
        cell: usize,
        status: DepthStatus,
        valid: bool,
        // d(pixel in I_j)/d(world point)
        jac: Matrix2x3<f64>,
    }

    let mut owner = vec![usize::MAX; w * h];
    let mut samples = Vec::with_capacity(predictions.len());
    let mut recon: Vec<Vec<f64>> = vec![vec![0.0; w * h]; channels];
    let mut recon_grad: Vec<Vec<Vector2<f64>>> = vec![vec![Vector2::zeros(); w * h]; channels];
    let mut mask = vec![false; w * h];

    for (idx, (y, o)) in predictions.coords.iter().zip(observations).enumerate() {
        let (px, py) = (o.pixel.x.round(), o.pixel.y.round());
        if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 {
            return Err(LossError::DimensionMismatch(format!(
                "observation pixel ({}, {}) outside {}x{}",
                o.pixel.x, o.pixel.y, w, h
            )));
        }
        let cell = py as usize * w + px as usize;
        if owner[cell] != usize::MAX {
            return Err(LossError::DimensionMismatch(format!(
                "two predictions share pixel cell {cell}"
            )));
        }
        owner[cell] = idx;

        let d = world_to_camera(pose_j, y);
        let (q, status) = project(intr, &d);
        let mut valid = status == DepthStatus::InFront;
        let mut jac = Matrix2x3::zeros();
        if valid {
            for c in 0..channels {
                let s = bilinear_sample(img_j, q.x, q.y, c);
                if !s.valid {
                    valid = false;
                    break;
                }
                recon[c][cell] = s.value;
                recon_grad[c][cell] = s.grad;
            }
        }
        if valid {
            let (x, yy, z) = (d.0.x, d.0.y, d.0.z);
            let f = intr.f;
            let proj = Matrix2x3::new(f / z, 0.0, -f * x / (z * z), 0.0, f / z, -f * yy / (z * z));
            jac = proj * pose_j.rotation.transpose();
            mask[cell] = true;
        }
        samples.push(Sample {
            cell,
            status,
            valid,
            jac,
        });
    }

    let chan = channels as f64;
    let mut values = vec![0.0; samples.len()];
    let mut d_recon: Vec<Vec<f64>> = vec![vec![0.0; w * h]; channels];
    for c in 0..channels {
        let target = img_i.channel(c);
        let recon_img = Image::new(w, h, 1, recon[c].clone());
        let ssim = ssim3x3_masked(&recon_img, &target, &mask)?;
        let mut upstream = vec![0.0; w * h];
        for (s, v) in samples.iter().zip(values.iter_mut()) {
            if !s.valid {
                continue;
            }
            let diff = recon[c][s.cell] - target.data()[s.cell];
            *v += ((1.0 - alpha) * diff.abs() + alpha * (1.0 - ssim.values[s.cell]) / 2.0) / chan;
            d_recon[c][s.cell] += (1.0 - alpha) * sign(diff) / chan;
            upstream[s.cell] = -alpha / (2.0 * chan);
        }
        let g = ssim.vjp(&upstream);
        for (dst, src) in d_recon[c].iter_mut().zip(g) {
            *dst += src;
        }
    }

    let mut valid_count = 0;
    let terms = samples
        .iter()
        .zip(values)
        .map(|(s, value)| {
            if !s.valid {
                return PointLossTerm::zero(s.status);
            }
            valid_count += 1;
            let mut g_q = Vector2::zeros();
            for c in 0..channels {
                g_q += d_recon[c][s.cell] * recon_grad[c][s.cell];
            }
            let grad: Vector3<f64> = s.jac.transpose() * g_q;
            PointLossTerm {
                value,
                grad,
                depth_status: s.status,
                angle_theta: 0.0,
            }
        })
        .collect();
    Ok(LossReport::from_terms_with_valid(terms, valid_count))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
