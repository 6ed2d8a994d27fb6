//! Pipeline configuration: defaults, then the JSON file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sepseg_core::infer::{EnsembleSpec, PredictOptions};
use sepseg_core::metrics::weight_preset;
use sepseg_core::xform::{Preset, TransformRef};
use sepseg_core::{LossConfig, NetworkSpec, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Training cases: `*.vol.json` volumes with matching `*.lab.json` labels.
    pub data: Option<PathBuf>,
    /// Validation cases, same layout.
    pub val: Option<PathBuf>,
    pub checkpoints: PathBuf,
    pub outputs: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: None,
            val: None,
            checkpoints: PathBuf::from("runs"),
            outputs: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub transform: TransformRef,
    /// Unset means a separable network sized from the data's class count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkSpec>,
    pub train: TrainConfig,
    /// Replaces `train.loss_config` when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleSpec>,
    pub predict: PredictOptions,
    /// `uniform` or `structseg22`.
    pub metric_preset: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            transform: Preset::Slf1.into(),
            network: None,
            train: TrainConfig::default(),
            loss: None,
            ensemble: None,
            predict: PredictOptions::default(),
            metric_preset: "uniform".into(),
        }
    }
}

impl PipelineConfig {
    /// Defaults overlaid with `path` when given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Training settings with the top-level loss override applied.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if let Some(l) = &self.loss {
            t.loss_config = l.clone();
        }
        t
    }

    /// Every problem with the configuration, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, p) in [
            ("paths.data", &self.paths.data),
            ("paths.val", &self.paths.val),
        ] {
            if let Some(p) = p {
                if !p.is_dir() {
                    v.push(format!("{name} {} is not a directory", p.display()));
                }
            }
        }
        if let Some(n) = &self.network {
            v.extend(n.violations().into_iter().map(|m| format!("network: {m}")));
        }
        v.extend(
            self.effective_train()
                .violations()
                .into_iter()
                .map(|m| format!("train: {m}")),
        );
        if let Some(e) = &self.ensemble {
            v.extend(e.violations().into_iter().map(|m| format!("ensemble: {m}")));
            for m in &e.members {
                if !m.checkpoint.is_file() {
                    v.push(format!(
                        "ensemble: checkpoint {} does not exist",
                        m.checkpoint.display()
                    ));
                }
            }
        }
        if !["uniform", "structseg22"].contains(&self.metric_preset.to_ascii_lowercase().as_str()) {
            v.push(format!(
                "metric_preset {:?} is unknown (expected uniform or structseg22)",
                self.metric_preset
            ));
        }
        if self.predict.tile_depth == 0 || self.predict.window.contains(&0) {
            v.push("predict: tile_depth and window must be positive".into());
        }
        v
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(v.join("; ")))
        }
    }

    pub fn metric_weights(&self, num_classes: usize) -> Result<Vec<f64>, CliError> {
        weight_preset(&self.metric_preset, num_classes).map_err(|e| CliError::Config(e.to_string()))
    }
}
