use std::path::Path;

use ego3d_core::body_fit::MeshFitWeights;
use ego3d_core::optim::OptimConfig;
use ego3d_core::pose_refine::RefineWeights;
use ego3d_core::tracker::AssociationConfig;
use ego3d_core::triangulation::RansacConfig;
use ego3d_sim::{NoiseConfig, SceneConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ScenePreset {
    /// Two walkers crossing in front of a stationary observer.
    Crossing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub preset: Option<ScenePreset>,
    pub scene: SceneConfig,
    pub noise: NoiseConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub weights: RefineWeights,
    pub optim: OptimConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub weights: MeshFitWeights,
    pub optim: OptimConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// IoU above which a prediction may match a ground-truth box.
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5 }
    }
}

/// Every tunable of every subcommand. Unset fields take their defaults; the
/// resolved value is echoed into each run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub simulate: SimulateConfig,
    pub ransac: RansacConfig,
    pub refine: RefineConfig,
    pub fit: FitConfig,
    pub tracker: AssociationConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            simulate: SimulateConfig::default(),
            ransac: RansacConfig::default(),
            refine: RefineConfig::default(),
            fit: FitConfig::default(),
            tracker: AssociationConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a TOML or JSON config, chosen by extension (TOML otherwise).
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::missing(format!("config file {} does not exist", path.display()), vec![]),
            _ => CliError::Io { path: path.to_path_buf(), source: e },
        })?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).map_err(|e| CliError::parse(path, e))
        } else {
            toml::from_str(&text).map_err(|e| CliError::parse(path, e))
        }
    }

    /// Applies the seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.simulate.scene.seed = seed;
        self.ransac.rng_seed = seed;
        self
    }

    /// Replaces the scene by its preset, if one is selected, so the echoed
    /// config shows what actually ran.
    pub fn resolve_preset(mut self) -> Self {
        if let Some(ScenePreset::Crossing) = self.simulate.preset {
            self.simulate.scene = SceneConfig::crossing(self.seed);
        }
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: &dyn std::fmt::Display| CliError::Usage { message: format!("invalid config: {e}") };
        self.simulate.scene.validate().map_err(|e| usage(&e))?;
        self.simulate.noise.validate().map_err(|e| usage(&e))?;
        self.ransac.validate().map_err(|e| usage(&e))?;
        self.refine.weights.validate().map_err(|e| usage(&e))?;
        self.fit.weights.validate().map_err(|e| usage(&e))?;
        self.tracker.validate().map_err(|e| usage(&e))?;
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold < 1.0) {
            return Err(usage(&format!("eval.iou_threshold must lie in (0, 1), got {}", self.eval.iou_threshold)));
        }
        Ok(())
    }
}
