//! Declarative experiment configuration: one TOML document drives synth,
//! train, eval and ablate. CLI flags override individual fields and the
//! resolved result is snapshotted next to the outputs.

use std::path::{Path, PathBuf};

use camloc_core::data::SynthConfig;
use camloc_core::error::{CoreError, Result};
use camloc_core::model::ModelConfig;
use camloc_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const OUT_ROOT_ENV: &str = "CAMLOC_OUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Synthetic dataset parameters; used when `dataset` is not given.
    pub synth: Option<SynthConfig>,
    /// Path to an existing dataset manifest. Takes precedence over `synth`.
    pub dataset: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Threshold regimes evaluated, e.g. "fixed:0.5", "op", "percentile:95".
    pub regimes: Vec<String>,
    /// Scoring method for eval: attention, inverted_attention or residual.
    pub method: String,
    pub outdir: PathBuf,
    /// Trained seeds are seed, seed+1, ..., seed+repetitions-1.
    pub repetitions: usize,
    /// Number of qualitative panel images emitted by eval.
    pub panels: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synth: Some(SynthConfig::default()),
            dataset: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            regimes: vec![
                "fixed:0.5".to_string(),
                "op".to_string(),
                "percentile:95".to_string(),
            ],
            method: "attention".to_string(),
            outdir: PathBuf::from("runs/exp"),
            repetitions: 3,
            panels: 4,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::Data {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.repetitions == 0 {
            return Err(CoreError::Config("repetitions must be at least 1".to_string()));
        }
        for r in &self.regimes {
            r.parse::<camloc_core::eval::ThresholdRegime>()?;
        }
        parse_method(&self.method)?;
        if let Some(s) = &self.synth {
            if s.image_size != self.model.input_size {
                return Err(CoreError::Config(format!(
                    "synth image_size {} does not match model input_size {}",
                    s.image_size, self.model.input_size
                )));
            }
        }
        Ok(())
    }

    /// Output directory with the optional root env prefix applied.
    pub fn resolved_outdir(&self, out_flag: Option<&Path>) -> PathBuf {
        let dir = out_flag.unwrap_or(&self.outdir);
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
            _ => dir.to_path_buf(),
        }
    }

    pub fn snapshot(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CoreError::Config(format!("config snapshot: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

pub fn parse_method(name: &str) -> Result<camloc_core::eval::ScoringMethod> {
    use camloc_core::eval::ScoringMethod::*;
    match name {
        "attention" => Ok(Attention),
        "inverted_attention" => Ok(InvertedAttention),
        "residual" => Ok(Residual),
        other => Err(CoreError::Config(format!(
            "unknown scoring method {other:?}; expected attention, inverted_attention or residual"
        ))),
    }
}

/// Refuses to reuse an existing output path unless forced.
pub fn guard_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(CoreError::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}
