//! Run configuration: a flat key-value file with one section per concern,
//! parsed strictly (unknown keys are rejected, naming the offender).

use crate::depthnet::{EncoderKind, ScaleMode};
use crate::graph::Activation;
use crate::trainer::{DataSpec, ModelSpec, TrainConfig};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_encoder")]
    pub encoder: String,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_height")]
    pub height: usize,
    /// Normalize adjacency rows inside the graph convolutions.
    #[serde(default)]
    pub row_normalize: bool,
}

fn default_encoder() -> String {
    "full".into()
}
fn default_width() -> usize {
    1024
}
fn default_height() -> usize {
    320
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            encoder: default_encoder(),
            width: default_width(),
            height: default_height(),
            row_normalize: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_drop_frac")]
    pub lr_drop_fraction: f64,
    #[serde(default = "d_drop_factor")]
    pub lr_drop_factor: f64,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_p", rename = "P")]
    pub p: f64,
    #[serde(default = "d_scale_mode")]
    pub scale_mode: String,
    #[serde(default = "d_activation")]
    pub gcn_activation: String,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_alpha")]
    pub beta: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub augment: bool,
}

fn d_epochs() -> usize {
    20
}
fn d_batch() -> usize {
    10
}
fn d_lr() -> f64 {
    1e-4
}
fn d_drop_frac() -> f64 {
    0.75
}
fn d_drop_factor() -> f64 {
    0.5
}
fn d_seed() -> u64 {
    1
}
fn d_p() -> f64 {
    0.7
}
fn d_scale_mode() -> String {
    "ms".into()
}
fn d_activation() -> String {
    "log_softmax".into()
}
fn d_lambda() -> f64 {
    0.5
}
fn d_alpha() -> f64 {
    1e-3
}

impl Default for TrainSection {
    fn default() -> Self {
        toml::from_str("").expect("empty section has defaults")
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub root: PathBuf,
    #[serde(default)]
    pub train_split: PathBuf,
    #[serde(default)]
    pub val_split: PathBuf,
    #[serde(default)]
    pub test_split: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "d_dataset")]
    pub dataset: String,
    #[serde(default = "d_min_depth")]
    pub min_depth: f64,
    #[serde(default)]
    pub max_depth: Option<f64>,
    #[serde(default = "d_true")]
    pub median_scaling: bool,
    #[serde(default = "d_crop")]
    pub crop: String,
}

fn d_dataset() -> String {
    "kitti".into()
}
fn d_min_depth() -> f64 {
    1e-3
}
fn d_true() -> bool {
    true
}
fn d_crop() -> String {
    "none".into()
}

impl Default for EvalSection {
    fn default() -> Self {
        toml::from_str("").expect("empty section has defaults")
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: PathBuf,
}

/// The full run configuration.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_kind()?;
        self.scale_mode()?;
        self.gcn_activation()?;
        self.eval_crop()?;
        self.eval_dataset()?;
        if self.model.width % 32 != 0 || self.model.height % 32 != 0 {
            return Err(Error::InvalidConfig(
                "model.width and model.height must be multiples of 32".into(),
            ));
        }
        self.train_config().validate()
    }

    pub fn encoder_kind(&self) -> Result<EncoderKind> {
        match self.model.encoder.as_str() {
            "full" => Ok(EncoderKind::Full),
            "toy" => Ok(EncoderKind::Toy),
            other => Err(Error::InvalidConfig(format!(
                "model.encoder must be \"full\" or \"toy\", got {other:?}"
            ))),
        }
    }

    pub fn scale_mode(&self) -> Result<ScaleMode> {
        match self.train.scale_mode.to_ascii_lowercase().as_str() {
            "ms" => Ok(ScaleMode::MultiScale),
            "ss" => Ok(ScaleMode::SingleScale),
            other => Err(Error::InvalidConfig(format!(
                "train.scale_mode must be \"MS\" or \"SS\", got {other:?}"
            ))),
        }
    }

    pub fn gcn_activation(&self) -> Result<Activation> {
        match self.train.gcn_activation.as_str() {
            "log_softmax" => Ok(Activation::LogSoftmax),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidConfig(format!(
                "train.gcn_activation must be \"relu\" or \"log_softmax\", got {other:?}"
            ))),
        }
    }

    pub fn eval_crop(&self) -> Result<EvalCrop> {
        match self.eval.crop.as_str() {
            "none" => Ok(EvalCrop::None),
            "garg" => Ok(EvalCrop::Garg),
            other => Err(Error::InvalidConfig(format!(
                "eval.crop must be \"none\" or \"garg\", got {other:?}"
            ))),
        }
    }

    pub fn eval_dataset(&self) -> Result<crate::data::EvalDatasetKind> {
        match self.eval.dataset.as_str() {
            "kitti" => Ok(crate::data::EvalDatasetKind::Kitti),
            "make3d" => Ok(crate::data::EvalDatasetKind::Make3d),
            other => Err(Error::InvalidConfig(format!(
                "eval.dataset must be \"kitti\" or \"make3d\", got {other:?}"
            ))),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            lr_drop_fraction: self.train.lr_drop_fraction,
            lr_drop_factor: self.train.lr_drop_factor,
            seed: self.train.seed,
            p_threshold: self.train.p,
            scale_mode: self.scale_mode().unwrap_or(ScaleMode::MultiScale),
            gcn_activation: self.gcn_activation().unwrap_or(Activation::LogSoftmax),
            lambda: self.train.lambda,
            alpha: self.train.alpha,
            beta: self.train.beta,
            grad_clip: self.train.grad_clip,
            augment: self.train.augment,
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        Ok(ModelSpec {
            encoder: self.encoder_kind()?,
            width: self.model.width,
            height: self.model.height,
            row_normalize: self.model.row_normalize,
        })
    }

    pub fn data_spec(&self) -> DataSpec {
        DataSpec {
            root: self.data.root.clone(),
            train_split: self.data.train_split.clone(),
            val_split: self.data.val_split.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalCrop {
    None,
    Garg,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.train.epochs, 20);
        assert_eq!(cfg.train.batch_size, 10);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.p, 0.7);
        assert_eq!(cfg.model.width, 1024);
        assert_eq!(cfg.model.height, 320);
        assert_eq!(cfg.eval.min_depth, 1e-3);
        assert!(cfg.eval.median_scaling);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = RunConfig::parse("[train]\nleraning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("leraning_rate"), "{err}");
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::parse("").unwrap();
        cfg.train.p = 0.3;
        cfg.model.encoder = "toy".into();
        let cfg2 = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg2.train.p, 0.3);
        assert_eq!(cfg2.model.encoder, "toy");
    }

    #[test]
    fn invalid_enumerations_are_rejected() {
        let mut cfg = RunConfig::parse("").unwrap();
        cfg.train.scale_mode = "xxl".into();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::parse("").unwrap();
        cfg.eval.crop = "center".into();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::parse("").unwrap();
        cfg.model.width = 100;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn uppercase_p_key_is_accepted() {
        let cfg = RunConfig::parse("[train]\nP = 0.3\n").unwrap();
        assert_eq!(cfg.train.p, 0.3);
    }
}
