use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{
    estimates_from_jsonl, estimates_to_jsonl, localize_frames, EstimateRecord, MetricsReport,
};
use super::{CliError, Outcome, RunConfig, RUN_CONFIG_FILE};
use crate::gradcheck::{run_all, Suite, SuiteSummary};
use crate::ransac::EstimateStatus;
use crate::regressor::{
    evaluate_coords, train, Checkpoint, FrameSet, LossMode, RegressorError, SceneModel, TrainConfig,
};
use crate::scenegen::io::Manifest;
use crate::scenegen::{load_dataset, save_dataset, Dataset, IoError, Split};

fn input_err(e: IoError) -> CliError {
    CliError::Input(e.to_string())
}

fn regressor_err(e: RegressorError) -> CliError {
    match e {
        RegressorError::Config(_)
        | RegressorError::Architecture(_)
        | RegressorError::DimensionMismatch { .. } => CliError::Config(e.to_string()),
        other => CliError::Input(other.to_string()),
    }
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::Input(format!(
            "cannot create output directory {}: {e}",
            dir.display()
        ))
    })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write(
        path,
        &(serde_json::to_string_pretty(value).expect("serializable") + "\n"),
    )
}

fn write_run_config(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    write(&dir.join(RUN_CONFIG_FILE), &(cfg.to_json() + "\n"))
}

fn load(data: &Path) -> Result<Dataset, CliError> {
    load_dataset(data).map_err(input_err)
}

/// Generates `cfg.scene` and saves it into `cfg.out`.
pub fn cmd_gen_scene(cfg: &RunConfig) -> Result<Manifest, CliError> {
    prepare_out(&cfg.out)?;
    let ds = Dataset::generate(&cfg.scene).map_err(|e| CliError::Config(e.to_string()))?;
    let manifest = save_dataset(&ds, &cfg.out).map_err(input_err)?;
    write_run_config(cfg, &cfg.out)?;
    log::info!(
        "wrote {} frames and {} points to {}",
        ds.frames.len(),
        ds.scene.points.len(),
        cfg.out.display()
    );
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: LossMode,
    pub iterations: usize,
    pub diverged: bool,
    pub nonfinite_events: usize,
    pub final_loss: f64,
    pub train_median_err: f64,
    pub test_median_err: f64,
    pub test_behind_fraction: f64,
}

/// Trains on the training split; writes the checkpoint, the log and a summary.
pub fn cmd_train(cfg: &RunConfig, data: &Path) -> Result<Outcome, CliError> {
    let ds = load(data)?;
    prepare_out(&cfg.out)?;
    write_run_config(cfg, &cfg.out)?;
    let start = Instant::now();
    let out = train(&ds, cfg.model, &cfg.train).map_err(regressor_err)?;
    let seconds = start.elapsed().as_secs_f64();

    Checkpoint::new(cfg.train.clone(), ds.descriptors.dim(), out.model.clone())
        .save(&cfg.out.join("checkpoint.json"))
        .map_err(regressor_err)?;
    write(&cfg.out.join("train_log.csv"), &out.log.to_csv_untimed())?;

    let test = FrameSet::from_dataset(&ds, Some(Split::Test), cfg.train.uses_dense());
    let test_err = match &out.model {
        SceneModel::Mlp(_) => Some(evaluate_coords(&out.model, &test).map_err(regressor_err)?),
        _ => None,
    };
    let last = out.log.last().expect("log has an initial row");
    let summary = TrainSummary {
        mode: cfg.train.mode,
        iterations: last.iter,
        diverged: out.diverged,
        nonfinite_events: last.nonfinite_events,
        final_loss: last.loss,
        train_median_err: last.median_err,
        test_median_err: test_err.map_or(f64::NAN, |e| e.median),
        test_behind_fraction: test_err.map_or(f64::NAN, |e| e.behind_fraction),
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    write_json(
        &cfg.out.join("timing.json"),
        &serde_json::json!({ "seconds": seconds }),
    )?;
    log::info!(
        "{} after {} iterations: train median error {:.4}, non-finite events {}",
        cfg.train.mode.name(),
        summary.iterations,
        summary.train_median_err,
        summary.nonfinite_events
    );
    Ok(if out.diverged {
        Outcome::Diverged
    } else {
        Outcome::Success
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizeSummary {
    pub images: usize,
    pub ok: usize,
    pub degenerate: usize,
    pub too_few_inliers: usize,
    pub median_rot_deg: f64,
    pub median_trans: f64,
    pub accuracy: f64,
}

/// Localizes every image of `split` and writes JSON-lines estimates.
pub fn cmd_localize(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    split: Option<Split>,
) -> Result<Vec<EstimateRecord>, CliError> {
    let ck = Checkpoint::load(checkpoint).map_err(|e| CliError::Input(e.to_string()))?;
    let ds = load(data)?;
    if ck.descriptor_dim != ds.descriptors.dim() {
        return Err(CliError::Config(format!(
            "checkpoint expects {}-dimensional descriptors, dataset has {}",
            ck.descriptor_dim,
            ds.descriptors.dim()
        )));
    }
    if let SceneModel::Mlp(m) = &ck.model {
        if m.input_dim() != ck.descriptor_dim {
            return Err(CliError::Config(
                "checkpoint network does not match its descriptor size".into(),
            ));
        }
    }
    let set = FrameSet::from_dataset(&ds, split, ck.config.uses_dense());
    let records = localize_frames(&ck.model, &set, &cfg.ransac).map_err(|e| match e {
        RegressorError::MissingEntry { .. } => {
            CliError::Config(format!("checkpoint does not cover this dataset: {e}"))
        }
        other => regressor_err(other),
    })?;
    prepare_out(&cfg.out)?;
    write_run_config(cfg, &cfg.out)?;
    write(
        &cfg.out.join("estimates.jsonl"),
        &estimates_to_jsonl(&records),
    )?;

    let count = |s: EstimateStatus| records.iter().filter(|r| r.status == s).count();
    let gt: BTreeMap<_, _> = set.frames.iter().map(|f| (f.image_id, f.pose)).collect();
    let (median_rot_deg, median_trans, accuracy) = if records.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let m = MetricsReport::compute(
            &records,
            &gt,
            cfg.eval.rot_thresh_deg,
            cfg.eval.trans_threshold(ds.scene.diameter),
        )?;
        (m.median_rot_deg, m.median_trans, m.accuracy)
    };
    let summary = LocalizeSummary {
        images: records.len(),
        ok: count(EstimateStatus::Ok),
        degenerate: count(EstimateStatus::Degenerate),
        too_few_inliers: count(EstimateStatus::TooFewInliers),
        median_rot_deg,
        median_trans,
        accuracy,
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    log::info!(
        "localized {} images, {} ok, accuracy {:.3}",
        summary.images,
        summary.ok,
        summary.accuracy
    );
    Ok(records)
}

/// Scores an estimates file against the dataset's ground-truth poses.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    estimates: &Path,
    data: &Path,
) -> Result<MetricsReport, CliError> {
    let text = std::fs::read_to_string(estimates)
        .map_err(|e| CliError::Input(format!("{}: {e}", estimates.display())))?;
    let records = estimates_from_jsonl(&text, &estimates.display().to_string())?;
    let ds = load(data)?;
    let all = ds.poses();
    let mut gt = BTreeMap::new();
    for r in &records {
        let pose = all.get(&r.image_id).ok_or_else(|| {
            CliError::Input(format!("image {} is not in the dataset", r.image_id))
        })?;
        gt.insert(r.image_id, *pose);
    }
    let report = MetricsReport::compute(
        &records,
        &gt,
        cfg.eval.rot_thresh_deg,
        cfg.eval.trans_threshold(ds.scene.diameter),
    )?;
    prepare_out(&cfg.out)?;
    write_run_config(cfg, &cfg.out)?;
    write_json(&cfg.out.join("metrics.json"), &report)?;
    write(&cfg.out.join("metrics.csv"), &report.to_csv())?;
    log::info!(
        "median rotation {:.4} deg, median translation {:.4}, accuracy {:.3}",
        report.median_rot_deg,
        report.median_trans,
        report.accuracy
    );
    Ok(report)
}

/// Runs all finite-difference suites. Fails when any suite does.
pub fn cmd_gradcheck(
    cfg: &RunConfig,
    corrupt: Option<Suite>,
) -> Result<Vec<SuiteSummary>, CliError> {
    let opts = crate::gradcheck::GradCheckOptions {
        corrupt,
        ..cfg.gradcheck_options()
    };
    let (rows, summaries) = run_all(&opts);
    prepare_out(&cfg.out)?;
    write_run_config(cfg, &cfg.out)?;
    let mut csv = String::from("suite,config,max_rel_error,excluded\n");
    for r in &rows {
        csv += &format!(
            "{},{},{},{}\n",
            r.suite.name(),
            r.config,
            r.max_rel_error,
            r.excluded
        );
    }
    write(&cfg.out.join("gradcheck.csv"), &csv)?;
    write_json(&cfg.out.join("summary.json"), &summaries)?;
    println!(
        "{:<14} {:>8} {:>9} {:>14}  result",
        "suite", "configs", "excluded", "max_rel_error"
    );
    for s in &summaries {
        println!(
            "{:<14} {:>8} {:>9} {:>14.3e}  {}",
            s.suite.name(),
            s.configs,
            s.excluded,
            s.max_rel_error,
            if s.passed { "PASS" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = summaries
        .iter()
        .filter(|s| !s.passed)
        .map(|s| s.suite.name())
        .collect();
    if failed.is_empty() {
        Ok(summaries)
    } else {
        Err(CliError::Failed(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: LossMode,
    pub seed: u64,
    pub converged: bool,
    pub diverged: bool,
    pub nonfinite_events: usize,
    pub behind_frac: f64,
    pub median_coord_err: f64,
    pub median_rot_deg: f64,
    pub median_trans: f64,
    pub accuracy: f64,
    /// Set when the cell could not run at all.
    pub error: Option<String>,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str =
        "mode,seed,converged,diverged,nonfinite_events,behind_frac,median_coord_err,median_rot_deg,median_trans,accuracy,error";

    fn failed(mode: LossMode, seed: u64, error: String) -> Self {
        Self {
            mode,
            seed,
            converged: false,
            diverged: false,
            nonfinite_events: 0,
            behind_frac: f64::NAN,
            median_coord_err: f64::NAN,
            median_rot_deg: f64::NAN,
            median_trans: f64::NAN,
            accuracy: 0.0,
            error: Some(error),
        }
    }

    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            self.mode.name(),
            self.seed,
            self.converged,
            self.diverged,
            self.nonfinite_events,
            self.behind_frac,
            self.median_coord_err,
            self.median_rot_deg,
            self.median_trans,
            self.accuracy,
            self.error
                .as_deref()
                .unwrap_or("")
                .replace([',', '\n'], ";")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: LossMode,
    pub runs: usize,
    pub converged: usize,
    pub failed: usize,
    pub mean_accuracy: f64,
    pub mean_median_coord_err: f64,
    pub mean_median_trans: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub modes: Vec<ModeSummary>,
    /// `1 − trans(angle-multi) / trans(angle)` on seed-averaged median
    /// translation errors; absent unless both modes ran.
    pub multiview_trans_reduction: Option<f64>,
    /// `1 − coord(angle-photo) / coord(angle)` on seed-averaged median
    /// coordinate errors.
    pub photometric_coord_reduction: Option<f64>,
}

impl AblationSummary {
    pub fn from_rows(rows: &[AblationRow], modes: &[LossMode]) -> Self {
        let mean = |v: Vec<f64>| crate::stats::mean(&v).unwrap_or(f64::NAN);
        let modes: Vec<ModeSummary> = modes
            .iter()
            .map(|&mode| {
                let r: Vec<&AblationRow> = rows.iter().filter(|r| r.mode == mode).collect();
                let converged = r.iter().filter(|r| r.converged).count();
                ModeSummary {
                    mode,
                    runs: r.len(),
                    converged,
                    failed: r.len() - converged,
                    mean_accuracy: mean(r.iter().map(|r| r.accuracy).collect()),
                    mean_median_coord_err: mean(r.iter().map(|r| r.median_coord_err).collect()),
                    mean_median_trans: mean(r.iter().map(|r| r.median_trans).collect()),
                }
            })
            .collect();
        let find = |m: LossMode| modes.iter().find(|s| s.mode == m);
        let reduction =
            |a: f64, b: f64| (a.is_finite() && b.is_finite() && a > 0.0).then(|| 1.0 - b / a);
        let multiview_trans_reduction = match (find(LossMode::Angle), find(LossMode::AngleMulti)) {
            (Some(a), Some(m)) => reduction(a.mean_median_trans, m.mean_median_trans),
            _ => None,
        };
        let photometric_coord_reduction = match (find(LossMode::Angle), find(LossMode::AnglePhoto))
        {
            (Some(a), Some(p)) => reduction(a.mean_median_coord_err, p.mean_median_coord_err),
            _ => None,
        };
        Self {
            modes,
            multiview_trans_reduction,
            photometric_coord_reduction,
        }
    }
}

/// Trains, localizes and evaluates one (mode, seed) cell; artifacts go to `dir`.
pub fn run_cell(
    cfg: &RunConfig,
    ds: &Dataset,
    mode: LossMode,
    seed: u64,
    dir: &Path,
) -> Result<AblationRow, CliError> {
    let tcfg = TrainConfig {
        mode,
        seed,
        ..cfg.train.clone()
    };
    let out = train(ds, cfg.model, &tcfg).map_err(regressor_err)?;
    prepare_out(dir)?;
    write(&dir.join("train_log.csv"), &out.log.to_csv_untimed())?;
    let test = FrameSet::from_dataset(ds, Some(Split::Test), tcfg.uses_dense());
    let diameter = ds.scene.diameter;
    let last = out.log.last().expect("log has an initial row");
    let mut row = AblationRow {
        mode,
        seed,
        converged: false,
        diverged: out.diverged,
        nonfinite_events: last.nonfinite_events,
        behind_frac: last.behind_frac,
        median_coord_err: f64::NAN,
        median_rot_deg: f64::NAN,
        median_trans: f64::NAN,
        accuracy: 0.0,
        error: None,
    };
    if !out.model.is_finite() {
        return Ok(row);
    }
    // Free tables have no entries for unseen images, so test coordinates
    // and localization only exist for the network.
    if let SceneModel::Mlp(_) = out.model {
        let e = evaluate_coords(&out.model, &test).map_err(regressor_err)?;
        row.median_coord_err = e.median;
        row.behind_frac = e.behind_fraction;
        let ransac = crate::ransac::RansacConfig {
            seed,
            ..cfg.ransac.clone()
        };
        let records = localize_frames(&out.model, &test, &ransac).map_err(regressor_err)?;
        write(&dir.join("estimates.jsonl"), &estimates_to_jsonl(&records))?;
        let gt: BTreeMap<_, _> = test.frames.iter().map(|f| (f.image_id, f.pose)).collect();
        if !records.is_empty() {
            let m = MetricsReport::compute(
                &records,
                &gt,
                cfg.eval.rot_thresh_deg,
                cfg.eval.trans_threshold(diameter),
            )?;
            row.median_rot_deg = m.median_rot_deg;
            row.median_trans = m.median_trans;
            row.accuracy = m.accuracy;
        }
    } else {
        row.median_coord_err = last.median_err;
    }
    row.converged = !row.diverged && row.median_coord_err < cfg.ablate.fail_fraction * diameter;
    Ok(row)
}

/// Every mode × seed cell. Seed `k` uses training seed `train.seed + k` and,
/// without `data`, a dataset generated with scene seed `scene.seed + k`.
/// Cells that fail become rows with an error message.
pub fn cmd_ablate(
    cfg: &RunConfig,
    data: Option<&Path>,
) -> Result<(Vec<AblationRow>, AblationSummary), CliError> {
    prepare_out(&cfg.out)?;
    write_run_config(cfg, &cfg.out)?;
    let seeds: Vec<u64> = (0..cfg.ablate.seeds as u64).collect();
    let needs_images = cfg.ablate.modes.contains(&LossMode::AnglePhoto);
    let datasets: Vec<Result<Dataset, String>> = match data {
        Some(d) => {
            let ds = load(d)?;
            seeds.iter().map(|_| Ok(ds.clone())).collect()
        }
        None => seeds
            .par_iter()
            .map(|k| {
                let scene = crate::scenegen::DatasetConfig {
                    seed: cfg.scene.seed + k,
                    render: cfg.scene.render && needs_images,
                    ..cfg.scene.clone()
                };
                Dataset::generate(&scene).map_err(|e| e.to_string())
            })
            .collect(),
    };
    let cells: Vec<(LossMode, usize)> = cfg
        .ablate
        .modes
        .iter()
        .flat_map(|&m| (0..seeds.len()).map(move |k| (m, k)))
        .collect();
    let rows: Vec<AblationRow> = cells
        .par_iter()
        .map(|&(mode, k)| {
            let seed = cfg.train.seed + seeds[k];
            let dir: PathBuf = cfg.out.join(format!("{}-seed{}", mode.name(), seeds[k]));
            let row = match &datasets[k] {
                Ok(ds) => run_cell(cfg, ds, mode, seed, &dir)
                    .unwrap_or_else(|e| AblationRow::failed(mode, seed, e.to_string())),
                Err(e) => AblationRow::failed(mode, seed, e.clone()),
            };
            log::info!(
                "{} seed {}: converged {} median coord error {:.4} accuracy {:.2}",
                mode.name(),
                seed,
                row.converged,
                row.median_coord_err,
                row.accuracy
            );
            row
        })
        .collect();
    let mut csv = format!("{}\n", AblationRow::CSV_HEADER);
    for r in &rows {
        csv += &r.csv_line();
    }
    write(&cfg.out.join("ablation.csv"), &csv)?;
    let summary = AblationSummary::from_rows(&rows, &cfg.ablate.modes);
    write_json(&cfg.out.join("summary.json"), &summary)?;
    Ok((rows, summary))
}
