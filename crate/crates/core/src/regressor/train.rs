use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, constant_depth_targets, evaluate_coords, Activation, AdamState, FrameData, FrameSet,
    FreeTable, LrSchedule, PatchMlp, RegressorError, SceneModel,
};
use crate::geometry::{DepthStatus, PixelPoint};
use crate::losses::{
    combined_loss, image_loss, multiview_image_loss, photometric_image_loss, LossConfig,
    LossReport, PointLossTerm, PredictionGrid, ReprojectionMode,
};
use crate::scenegen::{Dataset, Observation, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    Reproj,
    Angle,
    AngleMulti,
    AnglePhoto,
    ConstDepthInitThenReproj,
}

impl LossMode {
    pub const ALL: [LossMode; 5] = [
        LossMode::Reproj,
        LossMode::ConstDepthInitThenReproj,
        LossMode::Angle,
        LossMode::AngleMulti,
        LossMode::AnglePhoto,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossMode::Reproj => "reproj",
            LossMode::Angle => "angle",
            LossMode::AngleMulti => "angle-multi",
            LossMode::AnglePhoto => "angle-photo",
            LossMode::ConstDepthInitThenReproj => "const-depth-init-then-reproj",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = LossMode::ALL.iter().map(|m| m.name()).collect();
                format!(
                    "unknown loss mode '{s}' (expected one of {})",
                    names.join(", ")
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    PatchMlp,
    FreeTable,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "patch-mlp" => Ok(ModelKind::PatchMlp),
            "free-table" => Ok(ModelKind::FreeTable),
            _ => Err(format!(
                "unknown model kind '{s}' (expected patch-mlp or free-table)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: LossMode,
    pub iterations: usize,
    pub lr: f64,
    /// Fractions of `iterations` at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub hidden: Vec<usize>,
    pub lambda_multiview: f64,
    pub lambda_photo: f64,
    pub alpha_ssim: f64,
    /// Constant camera depth of the initialization targets.
    pub init_depth: f64,
    /// Share of the iterations spent fitting the constant-depth targets.
    pub init_fraction: f64,
    pub seed: u64,
    pub jitter: bool,
    pub log_every: usize,
    pub photo_max_offset: usize,
    /// Train on the per-pixel grid instead of the sparse scene points.
    pub dense: bool,
    /// Observations sampled per iteration; 0 uses the whole image.
    pub points_per_iter: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::Angle,
            iterations: 20_000,
            lr: 1e-4,
            lr_milestones: vec![0.6, 0.8, 0.9],
            lr_decay: 0.5,
            hidden: vec![64, 64],
            lambda_multiview: 60.0,
            lambda_photo: 20.0,
            alpha_ssim: 0.85,
            init_depth: 5.0,
            init_fraction: 0.25,
            seed: 0,
            jitter: false,
            log_every: 500,
            photo_max_offset: 10,
            dense: false,
            points_per_iter: 0,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_multiview: self.lambda_multiview,
            lambda_photo: self.lambda_photo,
            alpha_ssim: self.alpha_ssim,
            ..LossConfig::default()
        }
    }

    /// AnglePhoto always needs the dense grid.
    pub fn uses_dense(&self) -> bool {
        self.dense || self.mode == LossMode::AnglePhoto
    }

    pub fn validate(&self) -> Result<(), RegressorError> {
        let bad = |m: String| Err(RegressorError::Config(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.mode == LossMode::ConstDepthInitThenReproj {
            if !(self.init_depth > 0.0) {
                return bad(format!(
                    "init_depth must be positive, got {}",
                    self.init_depth
                ));
            }
            if !(0.0..=1.0).contains(&self.init_fraction) {
                return bad(format!(
                    "init_fraction must lie in [0, 1], got {}",
                    self.init_fraction
                ));
            }
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        if self.hidden.contains(&0) {
            return bad(format!(
                "hidden layer sizes must be positive, got {:?}",
                self.hidden
            ));
        }
        self.loss_config()
            .validate()
            .map_err(RegressorError::Config)
    }

    fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            milestones: self.lr_milestones.clone(),
            factor: self.lr_decay,
            total: self.iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    /// Mean per-point loss since the previous record.
    pub loss: f64,
    pub behind_frac: f64,
    pub nonfinite_events: usize,
    pub median_err: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str =
        "iter,loss,behind_frac,nonfinite_events,median_err,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.3}",
                r.iter, r.loss, r.behind_frac, r.nonfinite_events, r.median_err, r.seconds
            );
        }
        s
    }

    /// Same rows without the wall-time column, so reruns compare byte for byte.
    pub fn to_csv_untimed(&self) -> String {
        let mut s = String::from("iter,loss,behind_frac,nonfinite_events,median_err\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.iter, r.loss, r.behind_frac, r.nonfinite_events, r.median_err
            );
        }
        s
    }

    /// Equality of everything except wall time.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.iter == b.iter
                    && a.loss.to_bits() == b.loss.to_bits()
                    && a.behind_frac.to_bits() == b.behind_frac.to_bits()
                    && a.nonfinite_events == b.nonfinite_events
                    && a.median_err.to_bits() == b.median_err.to_bits()
            })
    }

    pub fn last(&self) -> Option<&TrainRecord> {
        self.records.last()
    }

    pub fn total_nonfinite(&self) -> usize {
        self.last().map_or(0, |r| r.nonfinite_events)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: SceneModel,
    pub log: TrainLog,
    /// Parameters or the final loss became non-finite.
    pub diverged: bool,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Random initial model for `set`, seeded from `cfg.seed`.
pub fn init_model(
    kind: ModelKind,
    set: &FrameSet,
    cfg: &TrainConfig,
) -> Result<SceneModel, RegressorError> {
    let mut rng = rng_stream(cfg.seed, 1);
    Ok(match kind {
        ModelKind::PatchMlp => {
            let mut sizes = vec![set.descriptor_dim];
            sizes.extend(&cfg.hidden);
            sizes.push(3);
            SceneModel::Mlp(PatchMlp::random(&sizes, Activation::Tanh, &mut rng)?)
        }
        ModelKind::FreeTable => {
            let keys = set
                .frames
                .iter()
                .flat_map(|f| f.observations.iter().map(move |o| (f.image_id, o.point_id)));
            SceneModel::Table(FreeTable::random(
                keys,
                &set.bbox_min,
                &set.bbox_max,
                &mut rng,
            ))
        }
    })
}

/// Initializes a `kind` model and trains it on the training split.
pub fn train(
    ds: &Dataset,
    kind: ModelKind,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, RegressorError> {
    cfg.validate()?;
    let set = FrameSet::from_dataset(ds, Some(Split::Train), cfg.uses_dense());
    let model = init_model(kind, &set, cfg)?;
    train_from(&set, model, cfg)
}

/// Trains `model` on every frame of `set` for `cfg.iterations` iterations.
pub fn train_from(
    set: &FrameSet,
    mut model: SceneModel,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, RegressorError> {
    cfg.validate()?;
    if set.frames.is_empty() {
        return Err(RegressorError::Config("no training frames".into()));
    }
    let n_params = model
        .params()
        .map(|p| p.len())
        .ok_or_else(|| RegressorError::Config("model has no trainable parameters".into()))?;
    if cfg.mode == LossMode::AnglePhoto && set.frames.iter().any(|f| f.image.is_none()) {
        return Err(RegressorError::Config(
            "angle-photo needs rendered images for every training frame".into(),
        ));
    }
    if let SceneModel::Mlp(m) = &model {
        if m.input_dim() != set.descriptor_dim {
            return Err(RegressorError::DimensionMismatch {
                expected: m.input_dim(),
                got: set.descriptor_dim,
            });
        }
    }

    let start = Instant::now();
    let loss_cfg = cfg.loss_config();
    let poses = set.poses();
    let mut rng = rng_stream(cfg.seed, 2);
    let mut adam = AdamState::new(n_params, cfg.schedule());
    let init_iters = if cfg.mode == LossMode::ConstDepthInitThenReproj {
        (cfg.init_fraction * cfg.iterations as f64).round() as usize
    } else {
        0
    };

    let mut log = TrainLog::default();
    let mut nonfinite_events = 0usize;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut diverged = false;
    let mut last_loss = f64::NAN;

    let checkpoint = |model: &SceneModel,
                      iter: usize,
                      loss: f64,
                      nonfinite: usize|
     -> Result<TrainRecord, RegressorError> {
        let e = evaluate_coords(model, set)?;
        Ok(TrainRecord {
            iter,
            loss,
            behind_frac: e.behind_fraction,
            nonfinite_events: nonfinite,
            median_err: e.median,
            seconds: start.elapsed().as_secs_f64(),
        })
    };
    log.records.push(checkpoint(&model, 0, f64::NAN, 0)?);

    let mut done = 0;
    for it in 0..cfg.iterations {
        let fi = rng.random_range(0..set.frames.len());
        let frame = &set.frames[fi];
        let n_obs = frame.observations.len();
        if n_obs == 0 {
            done = it + 1;
            continue;
        }
        let idx: Vec<usize> = if cfg.points_per_iter > 0
            && cfg.points_per_iter < n_obs
            && cfg.mode != LossMode::AnglePhoto
        {
            let mut v = rand::seq::index::sample(&mut rng, n_obs, cfg.points_per_iter).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..n_obs).collect()
        };
        let exact: Vec<Observation> = idx.iter().map(|&i| frame.observations[i]).collect();
        let jittered: Vec<Observation> = if cfg.jitter {
            exact
                .iter()
                .map(|o| Observation {
                    pixel: PixelPoint::new(
                        o.pixel.x + rng.random_range(-0.5..0.5),
                        o.pixel.y + rng.random_range(-0.5..0.5),
                    ),
                    ..*o
                })
                .collect()
        } else {
            exact.clone()
        };

        let (coords, cache) = match &model {
            SceneModel::Mlp(m) => {
                let cache = m.forward_batch(&frame.descriptor_columns(&idx))?;
                let coords: Vec<Vector3<f64>> = cache
                    .output()
                    .column_iter()
                    .map(|c| Vector3::new(c[0], c[1], c[2]))
                    .collect();
                (coords, Some(cache))
            }
            other => (other.predict(frame, Some(&idx))?, None),
        };
        let grid = PredictionGrid::new(exact.iter().map(|o| o.point_id).collect(), coords);

        let report = match cfg.mode {
            LossMode::ConstDepthInitThenReproj if it < init_iters => {
                let targets =
                    constant_depth_targets(&set.intrinsics, &frame.pose, &exact, cfg.init_depth);
                squared_distance_report(&grid.coords, &targets)
            }
            LossMode::Reproj | LossMode::ConstDepthInitThenReproj => image_loss(
                ReprojectionMode::Reproj,
                &set.intrinsics,
                &frame.pose,
                &grid,
                &jittered,
                &loss_cfg,
            )?,
            LossMode::Angle => image_loss(
                ReprojectionMode::Angle,
                &set.intrinsics,
                &frame.pose,
                &grid,
                &jittered,
                &loss_cfg,
            )?,
            LossMode::AngleMulti => multiview_image_loss(
                &set.intrinsics,
                &poses,
                frame.image_id,
                &grid,
                &jittered,
                &set.covis,
                &loss_cfg,
                &mut rng,
            )?,
            LossMode::AnglePhoto => {
                let angle = image_loss(
                    ReprojectionMode::Angle,
                    &set.intrinsics,
                    &frame.pose,
                    &grid,
                    &jittered,
                    &loss_cfg,
                )?;
                match pick_neighbor(set, fi, cfg.photo_max_offset, &mut rng) {
                    Some(j) => {
                        let nb = &set.frames[j];
                        let photo = photometric_image_loss(
                            &set.intrinsics,
                            &nb.pose,
                            &grid,
                            &exact,
                            frame.image.as_ref().expect("checked above"),
                            nb.image.as_ref().expect("checked above"),
                            &loss_cfg,
                        )?;
                        combined_loss(&angle, &photo, &loss_cfg)?
                    }
                    None => angle,
                }
            }
        };

        nonfinite_events += report.nonfinite_count();
        let n = report.len() as f64;
        let mean_loss = report.terms.iter().map(|t| t.value).sum::<f64>() / n;
        last_loss = mean_loss;
        loss_sum += mean_loss;
        loss_count += 1;

        let grads = match (&model, cache) {
            (SceneModel::Mlp(m), Some(cache)) => {
                let up = DMatrix::from_fn(3, report.len(), |r, c| report.terms[c].grad[r] / n);
                m.backward_batch(&cache, &up)
            }
            (SceneModel::Table(t), _) => {
                let mut g = vec![0.0; n_params];
                for (term, o) in report.terms.iter().zip(&exact) {
                    let k = t
                        .index_of(frame.image_id, o.point_id)
                        .expect("predict succeeded for this key");
                    for r in 0..3 {
                        g[3 * k + r] += term.grad[r] / n;
                    }
                }
                g
            }
            _ => unreachable!("only trainable models reach here"),
        };
        adam_step(&mut adam, model.params_mut().expect("trainable"), &grads)?;
        done = it + 1;

        if !model.is_finite() {
            diverged = true;
            break;
        }
        if done % cfg.log_every == 0 && done < cfg.iterations {
            log.records.push(checkpoint(
                &model,
                done,
                loss_sum / loss_count as f64,
                nonfinite_events,
            )?);
            loss_sum = 0.0;
            loss_count = 0;
        }
    }

    if done > 0 && log.last().is_none_or(|r| r.iter != done) {
        let loss = if loss_count > 0 {
            loss_sum / loss_count as f64
        } else {
            last_loss
        };
        log.records
            .push(checkpoint(&model, done, loss, nonfinite_events)?);
    }
    if cfg.iterations > 0 && !last_loss.is_finite() {
        diverged = true;
    }
    Ok(TrainOutcome {
        model,
        log,
        diverged,
    })
}

fn squared_distance_report(coords: &[Vector3<f64>], targets: &[Vector3<f64>]) -> LossReport {
    LossReport::from_terms(
        coords
            .iter()
            .zip(targets)
            .map(|(y, t)| {
                let r = y - t;
                PointLossTerm {
                    value: r.norm_squared(),
                    grad: 2.0 * r,
                    depth_status: DepthStatus::InFront,
                    angle_theta: 0.0,
                }
            })
            .collect(),
    )
}

/// A different frame of the same sequence at most `max_offset` positions away.
fn pick_neighbor<R: Rng>(
    set: &FrameSet,
    i: usize,
    max_offset: usize,
    rng: &mut R,
) -> Option<usize> {
    let f: &FrameData = &set.frames[i];
    let candidates: Vec<usize> = set
        .frames
        .iter()
        .enumerate()
        .filter(|(j, g)| {
            *j != i && g.sequence == f.sequence && g.index.abs_diff(f.index) <= max_offset
        })
        .map(|(j, _)| j)
        .collect();
    if candidates.is_empty() {
        None
    } else {
        Some(candidates[rng.random_range(0..candidates.len())])
    }
}
