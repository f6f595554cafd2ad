//! The run configuration: one JSON document driving every command.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clseg_core::adam::AdamConfig;
use clseg_core::eval::EvalConfig;
use clseg_core::loss::LossConfig;
use clseg_core::phantom::PhantomSpec;
use clseg_core::sampling::SamplerConfig;
use clseg_core::unet::{InferenceOptions, NetworkConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

/// Which of the three compared networks a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Lesion head only, no channel dropout.
    Baseline,
    /// Lesion and tissue heads, no channel dropout.
    Multitask,
    /// Both heads with input-channel dropout.
    MultitaskIcd,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 3] = [ModelVariant::Baseline, ModelVariant::Multitask, ModelVariant::MultitaskIcd];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Baseline => "baseline",
            ModelVariant::Multitask => "multitask",
            ModelVariant::MultitaskIcd => "multitask_icd",
        }
    }

    fn uses_tissue_head(self) -> bool {
        self != ModelVariant::Baseline
    }

    fn uses_icd(self) -> bool {
        self == ModelVariant::MultitaskIcd
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub iterations: u64,
    pub checkpoint_every: u64,
    pub batch_size: usize,
    /// Master seed: network initialization, sampling streams and folds.
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            checkpoint_every: 500,
            batch_size: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortConfig {
    /// Subjects written by `phantom`.
    pub subjects: usize,
    /// Folds of `xval`.
    pub folds: usize,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self { subjects: 12, folds: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub cohort_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            cohort_dir: PathBuf::from("cohort"),
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default = "default_variant")]
    pub model_variant: ModelVariant,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub loss: LossConfig,
    /// Its `seed` is replaced by one derived from `training.seed`.
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub inference: InferenceOptions,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub phantom: PhantomSpec,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub cohort: CohortConfig,
    #[serde(default)]
    pub paths: Paths,
}

fn default_variant() -> ModelVariant {
    ModelVariant::MultitaskIcd
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            model_variant: default_variant(),
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            adam: AdamConfig::default(),
            inference: InferenceOptions::default(),
            eval: EvalConfig::default(),
            phantom: PhantomSpec::default(),
            training: TrainingConfig::default(),
            cohort: CohortConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Usage(reason) => CliError::Config {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Switches to `variant` and rewires the tissue-head weight and the
    /// dropout probability to match it.
    pub fn set_variant(&mut self, variant: ModelVariant) {
        self.model_variant = variant;
        if !variant.uses_tissue_head() {
            self.loss.tissue_head_weight = 0.0;
        } else if self.loss.tissue_head_weight == 0.0 {
            self.loss.tissue_head_weight = 1.0;
        }
        if !variant.uses_icd() {
            self.sampler.icd_probability = 0.0;
        } else if self.sampler.icd_probability == 0.0 {
            self.sampler.icd_probability = 0.5;
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Usage(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.network.validate()?;
        self.loss.validate()?;
        self.sampler.validate()?;
        self.adam.validate()?;
        self.eval.validate()?;
        self.phantom.validate()?;
        if let Some(w) = self.inference.window {
            clseg_core::unet::output_shape(w)?;
        }
        let t = &self.training;
        if t.iterations == 0 || t.checkpoint_every == 0 || t.batch_size == 0 {
            return Err(CliError::Usage(
                "training.iterations, checkpoint_every and batch_size must be ≥ 1".into(),
            ));
        }
        if self.cohort.folds < 2 {
            return Err(CliError::Usage("cohort.folds must be ≥ 2".into()));
        }
        let v = self.model_variant;
        let tissue_on = self.loss.tissue_head_weight > 0.0;
        let icd_on = self.sampler.icd_probability > 0.0;
        if tissue_on != v.uses_tissue_head() {
            return Err(CliError::Usage(format!(
                "variant {v} needs loss.tissue_head_weight {} 0, got {}",
                if v.uses_tissue_head() { ">" } else { "=" },
                self.loss.tissue_head_weight
            )));
        }
        if icd_on != v.uses_icd() {
            return Err(CliError::Usage(format!(
                "variant {v} needs sampler.icd_probability {} 0, got {}",
                if v.uses_icd() { ">" } else { "=" },
                self.sampler.icd_probability
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// SHA-256 of the canonical JSON form.
    pub fn sha256(&self) -> String {
        hex(&Sha256::digest(self.to_json().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
