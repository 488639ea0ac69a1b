//! TOML run configuration for `train`.
//!
//! Every section is optional and falls back to the library defaults:
//!
//! ```toml
//! [data]
//! dir = "data/train"
//!
//! [output]
//! dir = "runs/exp1"
//!
//! [model]            # ModelConfig; [model.backbone] and [model.neck] nest inside
//! [train]            # TrainConfig
//! [loss]             # LossConfig; [loss.weights] alpha = [ ...9 values ]
//! [assign]           # AssignConfig
//! [postprocess]      # PostprocessConfig
//! [eval]             # EvalConfig
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use transrad::assignment::AssignConfig;
use transrad::detmodel::ModelConfig;
use transrad::evalmetrics::EvalConfig;
use transrad::losses::LossConfig;
use transrad::postprocess::PostprocessConfig;
use transrad::train::TrainConfig;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/latest") }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub output: OutputSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub assign: AssignConfig,
    pub postprocess: PostprocessConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        // relative paths are taken from the config file's directory
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.dir, &mut cfg.output.dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(ck) = cfg.train.init_checkpoint.as_mut() {
            if ck.is_relative() {
                *ck = base.join(&*ck);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.data.dir.as_os_str().is_empty() {
            return Err("[data] dir is required".into());
        }
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        self.loss.weights.validate().map_err(|e| e.to_string())?;
        self.loss.focal.validate().map_err(|e| e.to_string())?;
        self.assign.validate().map_err(|e| e.to_string())?;
        self.postprocess.validate().map_err(|e| e.to_string())?;
        self.eval.validate().map_err(|e| e.to_string())
    }
}
