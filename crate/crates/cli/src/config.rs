//! Run configuration read from a TOML file. Every section is optional and
//! falls back to the library defaults.

use std::path::Path;

use anyhow::{Context, Result};
use maod_core::acquisition::geometry::Calibration;
use maod_core::acquisition::sim::SimConfig;
use maod_core::backbone::ProxyConfig;
use maod_core::model::SystemConfig;
use maod_core::scenegen::SceneConfig;
use maod_core::train::{AlphaSource, HeadKind, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub system: SystemConfig,
    pub proxy: ProxySettings,
    pub train: TrainSettings,
    pub eval: EvalSettings,
    pub sim: SimConfig,
    pub calibration: Calibration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxySettings {
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for ProxySettings {
    fn default() -> Self {
        let c = ProxyConfig::default();
        Self {
            samples: 400,
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            momentum: c.momentum,
        }
    }
}

impl ProxySettings {
    pub fn config(&self) -> ProxyConfig {
        ProxyConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
        }
    }
}

/// Overrides on top of [`TrainConfig::for_head`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub meta: HeadOverrides,
    pub rough: HeadOverrides,
    pub fine: HeadOverrides,
}

impl TrainSettings {
    pub fn resolve(&self, kind: HeadKind, seed: u64) -> TrainConfig {
        let o = match kind {
            HeadKind::Meta => &self.meta,
            HeadKind::Rough => &self.rough,
            HeadKind::Fine => &self.fine,
        };
        let base = TrainConfig::for_head(kind);
        TrainConfig {
            learning_rate: o.learning_rate.unwrap_or(base.learning_rate),
            momentum: o.momentum.unwrap_or(base.momentum),
            epochs: o.epochs.unwrap_or(base.epochs),
            batch_size: o.batch_size.unwrap_or(base.batch_size),
            seed,
            alpha: o.alpha.clone().map_or(AlphaSource::Auto, AlphaSource::Explicit),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub rough_threshold: f64,
    pub iou_threshold: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            rough_threshold: 0.5,
            iou_threshold: 0.5,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: Self =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.calibration.validate()?;
        maod_core::model::Architecture::new(self.system.clone())?;
        if self.proxy.samples == 0 {
            anyhow::bail!(maod_core::Error::Config("proxy.samples must be positive".into()));
        }
        for t in [self.eval.rough_threshold, self.eval.iou_threshold] {
            if !(t > 0.0 && t < 1.0) {
                anyhow::bail!(maod_core::Error::Config(format!(
                    "evaluation thresholds must lie in (0, 1), got {t}"
                )));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        maod_core::checkpoint::hex(&Sha256::digest(json))
    }
}
