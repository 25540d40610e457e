//! The single JSON document that configures a run.

use std::path::Path;

use cfsim::layers::{ClassifierArch, OutputMode, SimulatorArch};
use cfsim::synthdata::{DatasetParams, Split};
use cfsim::training::{ClassifierConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetParams,
    pub classifier: ClassifierConfig,
    /// Derived from the dataset shape when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classifier_arch: Option<ClassifierArch>,
    pub simulator: TrainConfig,
    /// Derived from the dataset shape and simulator mode when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulator_arch: Option<SimulatorArch>,
    pub explain: ExplainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub split: Split,
    /// Feature map used by Grad-CAM; the last conv stack when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cam_layer: Option<usize>,
    /// Occlusion window edge per axis.
    pub occlusion_window: usize,
    pub occlusion_stride: usize,
    pub occlusion_fill: f64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            cam_layer: None,
            occlusion_window: 8,
            occlusion_stride: 4,
            occlusion_fill: 0.0,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Sets every seed in the document.
    pub fn override_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.classifier.seed = seed;
        self.simulator.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.classifier.validate()?;
        self.simulator.validate()?;
        if self.explain.occlusion_window == 0 || self.explain.occlusion_stride == 0 {
            return Err(CliError::Config("occlusion window and stride must be positive".into()));
        }
        Ok(())
    }

    pub fn classifier_arch(&self, shape: &[usize]) -> ClassifierArch {
        self.classifier_arch.clone().unwrap_or_else(|| {
            let base = match shape.len() {
                3 => ClassifierArch::default_3d(shape[0]),
                _ => ClassifierArch::default_2d(),
            };
            ClassifierArch {
                input_shape: shape.to_vec(),
                ..base
            }
        })
    }

    pub fn simulator_arch(&self, shape: &[usize]) -> SimulatorArch {
        let mode: OutputMode = self.simulator.mode;
        self.simulator_arch.clone().unwrap_or_else(|| {
            let base = match shape.len() {
                3 => SimulatorArch::default_3d(mode, shape[0]),
                _ => SimulatorArch::default_2d(mode),
            };
            SimulatorArch {
                input_shape: shape.to_vec(),
                ..base
            }
        })
    }

    pub fn occlusion_window(&self, dims: usize) -> Vec<usize> {
        vec![self.explain.occlusion_window; dims]
    }
}
