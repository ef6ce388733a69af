//! Experiment configuration: a TOML file of flat `key = value` pairs grouped
//! into sections. Unknown keys are rejected so a typo cannot silently fall
//! back to a default, and the parsed form is echoed into every run summary so
//! an archived run re-parses to the exact configuration that produced it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use normlab_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub contexts: ContextConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            contexts: ContextConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Where samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// `synthetic`, `idx`, `cifar10`, `cifar100`, or `blended`.
    pub kind: String,
    /// Synthetic: number of generating contexts.
    pub contexts: usize,
    pub per_context: usize,
    pub classes: usize,
    pub pixel_noise: f64,
    pub data_seed: u64,
    /// IDX: paths to the images and labels files.
    pub images: String,
    pub labels: String,
    /// CIFAR: directory holding the binary batch files.
    pub dir: String,
    /// Keep only the first N samples after loading (0 = all).
    pub limit: usize,
    /// Blended: the constituent datasets, in label-offset order.
    pub sources: Vec<DatasetConfig>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: "synthetic".into(),
            contexts: 3,
            per_context: 2000,
            classes: 3,
            pixel_noise: 0.5,
            data_seed: 0,
            images: String::new(),
            labels: String::new(),
            dir: String::new(),
            limit: 0,
            sources: Vec::new(),
        }
    }
}

/// How samples are assigned to contexts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    /// `none`, `synthetic` (generator's own ids), `superclass`, `dataset`,
    /// `gmm`, or `file`.
    pub rule: String,
    /// Component count for the `gmm` rule.
    pub k: usize,
    pub seed: u64,
    /// Assignment CSV for the `file` rule.
    pub file: String,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig { rule: "synthetic".into(), k: 3, seed: 0, file: String::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `cifar` or `compact`. Input geometry is taken from the dataset.
    pub arch: String,
    /// Normalization in the conv blocks: `batch`, `layer`, `instance`,
    /// `group:<g>`, or `mixture:<k>` (placed at the designated slot).
    pub conv_norm: String,
    /// Put a context-normalization layer on the input.
    pub input_cn: bool,
    /// `channels` or `patches:<h>x<w>`.
    pub cn_mode: String,
    pub embed_dim: usize,
    pub epsilon: f64,
    pub momentum: f64,
    pub affine: bool,
    pub model_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: "compact".into(),
            conv_norm: "batch".into(),
            input_cn: false,
            cn_mode: "channels".into(),
            embed_dim: 64,
            epsilon: 1e-5,
            momentum: 0.1,
            affine: true,
            model_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub rms_decay: f64,
    pub opt_epsilon: f64,
    pub seed: u64,
    /// Early-stopping patience in epochs; 0 disables it.
    pub patience: usize,
    /// Random crop/flip padding; 0 disables augmentation.
    pub augment_pad: usize,
    /// Train-accuracy level for the epochs-to-threshold figure.
    pub threshold: f64,
    /// `plain`, `cn`, or `cn+`.
    pub inference: String,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Standardize channels by training-split statistics before training.
    pub standardize: bool,
    /// Most stage activations sampled for the mixture-normalization fit.
    pub mixture_fit_cap: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 10,
            batch_size: 256,
            lr: 1e-3,
            weight_decay: 0.0,
            momentum: 0.9,
            rms_decay: 0.9,
            opt_epsilon: 1e-8,
            seed: 0,
            patience: 0,
            augment_pad: 0,
            threshold: 0.95,
            inference: "plain".into(),
            val_fraction: 0.1,
            test_fraction: 0.1,
            standardize: true,
            mixture_fit_cap: 2048,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "run".into() }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config encode: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        match self.dataset.kind.as_str() {
            "synthetic" | "idx" | "cifar10" | "cifar100" | "blended" => {}
            other => {
                return Err(Error::Config(format!("unknown dataset kind '{other}'")));
            }
        }
        if self.dataset.kind == "blended" {
            if self.dataset.sources.len() < 2 {
                return Err(Error::Config("a blend needs at least two sources".into()));
            }
            for s in &self.dataset.sources {
                if s.kind == "blended" {
                    return Err(Error::Config("blends cannot nest".into()));
                }
            }
        }
        match self.contexts.rule.as_str() {
            "none" | "synthetic" | "superclass" | "dataset" | "gmm" | "file" => {}
            other => return Err(Error::Config(format!("unknown context rule '{other}'"))),
        }
        if self.contexts.rule == "synthetic" && self.dataset.kind != "synthetic" {
            return Err(Error::Config(
                "context rule 'synthetic' only applies to the synthetic dataset".into(),
            ));
        }
        if self.contexts.rule == "dataset" && self.dataset.kind != "blended" {
            return Err(Error::Config(
                "context rule 'dataset' needs a blended dataset".into(),
            ));
        }
        match self.model.arch.as_str() {
            "cifar" | "compact" => {}
            other => return Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
        self.model.conv_norm.parse::<normlab_core::norm::NormMode>()?;
        self.model.cn_mode.parse::<normlab_core::context::CnMode>()?;
        if self.model.input_cn && self.contexts.rule == "none" {
            return Err(Error::Config(
                "an input context layer needs a context rule".into(),
            ));
        }
        self.train.inference.parse::<normlab_core::model::InferenceChoice>()?;
        if !(self.train.val_fraction >= 0.0
            && self.train.test_fraction >= 0.0
            && self.train.val_fraction + self.train.test_fraction < 1.0)
        {
            return Err(Error::Config(format!(
                "val ({}) + test ({}) fractions must leave room for training data",
                self.train.val_fraction, self.train.test_fraction
            )));
        }
        if self.output.dir.is_empty() {
            return Err(Error::Config("output dir must not be empty".into()));
        }
        Ok(())
    }
}
