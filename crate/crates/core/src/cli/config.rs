use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::gradcheck::{GradCheckOptions, DEFAULT_TOLERANCE};
use crate::ransac::RansacConfig;
use crate::regressor::{LossMode, ModelKind, TrainConfig};
use crate::scenegen::DatasetConfig;

/// Thresholds for the localization accuracy metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub rot_thresh_deg: f64,
    /// Absolute translation threshold; when absent, `trans_thresh_fraction`
    /// of the scene diameter is used.
    pub trans_thresh: Option<f64>,
    pub trans_thresh_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rot_thresh_deg: 5.0,
            trans_thresh: None,
            trans_thresh_fraction: 0.05,
        }
    }
}

impl EvalConfig {
    pub fn trans_threshold(&self, diameter: f64) -> f64 {
        self.trans_thresh
            .unwrap_or(self.trans_thresh_fraction * diameter)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: usize,
    pub modes: Vec<LossMode>,
    /// Median test coordinate error above this fraction of the diameter
    /// counts as not converged.
    pub fail_fraction: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: 10,
            modes: LossMode::ALL.to_vec(),
            fail_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub configs: usize,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            configs: 100,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

/// Every knob of every subcommand. Parsed from one JSON file, patched by
/// command-line flags, and written back in resolved form into each run
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, overrides the scene, training and RANSAC seeds.
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub model: ModelKind,
    pub scene: DatasetConfig,
    pub train: TrainConfig,
    pub ransac: RansacConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out: PathBuf::from("run"),
            model: ModelKind::PatchMlp,
            scene: DatasetConfig::default(),
            train: TrainConfig::default(),
            ransac: RansacConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<LossMode>,
    pub iters: Option<usize>,
    pub lambda_multi: Option<f64>,
    pub lambda_photo: Option<f64>,
    pub rot_thresh_deg: Option<f64>,
    pub trans_thresh: Option<f64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults, then the file (if any), then the flags; validated.
    pub fn resolve(file: Option<&Path>, ov: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(ov);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(s) = ov.seed {
            self.seed = Some(s);
        }
        if let Some(s) = self.seed {
            self.scene.seed = s;
            self.train.seed = s;
            self.ransac.seed = s;
        }
        if let Some(o) = &ov.out {
            self.out = o.clone();
        }
        if let Some(m) = ov.mode {
            self.train.mode = m;
        }
        if let Some(n) = ov.iters {
            self.train.iterations = n;
        }
        if let Some(l) = ov.lambda_multi {
            self.train.lambda_multiview = l;
        }
        if let Some(l) = ov.lambda_photo {
            self.train.lambda_photo = l;
        }
        if let Some(r) = ov.rot_thresh_deg {
            self.eval.rot_thresh_deg = r;
        }
        if let Some(t) = ov.trans_thresh {
            self.eval.trans_thresh = Some(t);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.ransac
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let e = &self.eval;
        if !(e.rot_thresh_deg > 0.0)
            || !(e.trans_thresh_fraction > 0.0)
            || e.trans_thresh.is_some_and(|t| !(t > 0.0))
        {
            return Err(CliError::Config(
                "accuracy thresholds must be positive".into(),
            ));
        }
        if self.scene.n_images == 0
            || self.scene.test_every == 0
            || self.scene.width < 2
            || self.scene.height < 2
        {
            return Err(CliError::Config(
                "scene needs images, a positive test_every and at least 2x2 pixels".into(),
            ));
        }
        if self.ablate.seeds == 0 || self.ablate.modes.is_empty() {
            return Err(CliError::Config(
                "ablation needs at least one seed and one mode".into(),
            ));
        }
        if self.gradcheck.configs == 0 || !(self.gradcheck.tolerance > 0.0) {
            return Err(CliError::Config(
                "gradcheck needs configurations and a positive tolerance".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn gradcheck_options(&self) -> GradCheckOptions {
        GradCheckOptions {
            seed: self.seed.unwrap_or(0),
            configs: self.gradcheck.configs,
            tolerance: self.gradcheck.tolerance,
            corrupt: None,
        }
    }
}
