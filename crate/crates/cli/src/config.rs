use std::path::{Path, PathBuf};

use rxeend::metrics::EvalParams;
use rxeend::model::{AuxMode, HeadSharing, ModelConfig};
use rxeend::trainer::TrainConfig;
use rxeend::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_units: usize,
    pub speakers: usize,
    pub residual: bool,
    pub aux_mode: String,
    pub lambda: f64,
    pub input_dim: usize,
    pub dropout: f64,
    pub head_sharing: String,
}

impl From<&ModelConfig> for ModelSection {
    fn from(c: &ModelConfig) -> Self {
        Self {
            blocks: c.blocks,
            d_model: c.d_model,
            heads: c.heads,
            ffn_units: c.ffn_units,
            speakers: c.speakers,
            residual: c.residual,
            aux_mode: c.aux_mode.to_string(),
            lambda: c.lambda,
            input_dim: c.input_dim,
            dropout: c.dropout,
            head_sharing: c.head_sharing.to_string(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        (&ModelConfig::base()).into()
    }
}

impl ModelSection {
    pub fn to_config(&self) -> Result<ModelConfig> {
        let c = ModelConfig {
            blocks: self.blocks,
            d_model: self.d_model,
            heads: self.heads,
            ffn_units: self.ffn_units,
            speakers: self.speakers,
            residual: self.residual,
            aux_mode: self.aux_mode.parse::<AuxMode>()?,
            lambda: self.lambda,
            input_dim: self.input_dim,
            dropout: self.dropout,
            head_sharing: self.head_sharing.parse::<HeadSharing>()?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub chunk_frames: usize,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub val_fraction: f64,
}

impl From<&TrainConfig> for TrainSection {
    fn from(c: &TrainConfig) -> Self {
        Self {
            epochs: c.epochs,
            chunk_frames: c.chunk_frames,
            batch_size: c.batch_size,
            warmup_steps: c.warmup_steps,
            lr_scale: c.lr_scale,
            beta1: c.beta1,
            beta2: c.beta2,
            adam_eps: c.adam_eps,
            grad_clip: c.grad_clip,
            seed: c.seed,
            val_fraction: c.val_fraction,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        (&TrainConfig::default()).into()
    }
}

impl TrainSection {
    pub fn to_config(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            epochs: self.epochs,
            chunk_frames: self.chunk_frames,
            batch_size: self.batch_size,
            warmup_steps: self.warmup_steps,
            lr_scale: self.lr_scale,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            grad_clip: self.grad_clip,
            seed: self.seed,
            val_fraction: self.val_fraction,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub threshold: f64,
    pub median_window: usize,
    pub collar: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let p = EvalParams::default();
        Self {
            threshold: p.threshold,
            median_window: p.median_window,
            collar: p.collar_sec,
        }
    }
}

impl EvalSection {
    pub fn to_params(&self) -> Result<EvalParams> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if self.median_window % 2 == 0 {
            return Err(Error::Config(format!(
                "median window must be odd, got {}",
                self.median_window
            )));
        }
        if !(self.collar >= 0.0) {
            return Err(Error::Config(format!("collar must be >= 0, got {}", self.collar)));
        }
        Ok(EvalParams {
            threshold: self.threshold,
            median_window: self.median_window,
            collar_sec: self.collar,
        })
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub corpus: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn parse(source: &str, text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::Parse {
                path: source.to_string(),
                line,
                msg: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&path.display().to_string(), &rxeend::io::read_text(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
