//! Run configuration: a TOML file with one table per stage. Every field has
//! a default, and command-line flags override the file.

use std::fs;
use std::path::{Path, PathBuf};

use nerfaug::augment::AugmentSpec;
use nerfaug::field::FieldConfig;
use nerfaug::geometry::{CameraIntrinsics, DEFAULT_DIST_MAX, DEFAULT_DIST_MIN};
use nerfaug::probe::{ProbeConfig, ProbeTrainConfig};
use nerfaug::rng::derive_seed;
use nerfaug::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub distance_range: [f64; 2],
    pub intrinsics: CameraIntrinsics,
    /// Seed of the procedural target's geometry jitter.
    pub scene_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_source: 500,
            n_target: 200,
            distance_range: [DEFAULT_DIST_MIN, DEFAULT_DIST_MAX],
            intrinsics: CameraIntrinsics::desk_default(),
            scene_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub model: ProbeConfig,
    pub train: ProbeTrainConfig,
    pub seeds: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            model: ProbeConfig::default(),
            train: ProbeTrainConfig::default(),
            seeds: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub diversity_poses: usize,
    pub diversity_draws: usize,
    pub sweep_alphas: Vec<f64>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            diversity_poses: 4,
            diversity_draws: 50,
            sweep_alphas: vec![-4.0, -2.0, -1.0, 0.0, 0.5, 1.0, 2.0, 3.0, 4.0],
        }
    }
}

/// Seeds inside the stage tables are ignored: every stage seed is derived
/// from the global `seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub workspace: Option<PathBuf>,
    pub seed: u64,
    pub synth: SynthConfig,
    pub field: FieldConfig,
    pub train: TrainConfig,
    pub augment: AugmentSpec,
    pub probe: ProbeSection,
    pub report: ReportConfig,
}

#[derive(Clone, Copy, Debug)]
pub enum Stage {
    Source = 1,
    DiffuseTarget = 2,
    DirectTarget = 3,
    Train = 10,
    Augment = 20,
    Probe = 30,
    Render = 40,
    Report = 50,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        // Relative workspace paths are taken relative to the config file.
        if let (Some(ws), Some(dir)) = (&cfg.workspace, path.parent()) {
            if ws.is_relative() {
                cfg.workspace = Some(dir.join(ws));
            }
        }
        Ok(cfg)
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.seed, &[stage as u64])
    }

    /// Copies the derived stage seeds into the stage configs.
    pub fn apply_seeds(&mut self) {
        self.train.seed = self.stage_seed(Stage::Train);
        self.augment.seed = self.stage_seed(Stage::Augment);
        self.probe.train.seed = self.stage_seed(Stage::Probe);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let s = &self.synth;
        if s.n_source < 2 || s.n_target == 0 {
            return Err(CliError::Config(format!(
                "synth needs n_source ≥ 2 and n_target ≥ 1, got {} and {}",
                s.n_source, s.n_target
            )));
        }
        s.intrinsics.validate()?;
        self.field.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.probe.model.validate()?;
        self.probe.train.validate()?;
        if self.probe.seeds == 0 {
            return Err(CliError::Config("probe.seeds must be at least 1".into()));
        }
        if self.report.diversity_poses == 0 || self.report.diversity_draws < 2 {
            return Err(CliError::Config("report needs ≥ 1 diversity pose and ≥ 2 draws".into()));
        }
        Ok(())
    }
}
