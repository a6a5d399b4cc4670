//! Run configuration, read from TOML. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xfer::adapt::AdaptConfig;
use xfer::data::SplitRatios;
use xfer::lm::MlmConfig;
use xfer::meta::MetaConfig;
use xfer::nn::{ClassifierConfig, Encoder};

use crate::error::CliError;
use crate::synth::SynthSpec;

/// Classifier architecture minus the vocabulary size, which comes from the
/// built vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierBlock {
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_encoder")]
    pub encoder: Encoder,
    #[serde(default = "default_conv_widths")]
    pub conv_widths: Vec<usize>,
    #[serde(default = "default_conv_maps")]
    pub conv_maps: usize,
}

fn default_embed_dim() -> usize {
    32
}
fn default_hidden() -> usize {
    384
}
fn default_encoder() -> Encoder {
    Encoder::MeanPool
}
fn default_conv_widths() -> Vec<usize> {
    vec![1, 2, 3]
}
fn default_conv_maps() -> usize {
    16
}

impl Default for ClassifierBlock {
    fn default() -> Self {
        ClassifierBlock {
            embed_dim: default_embed_dim(),
            hidden: default_hidden(),
            encoder: default_encoder(),
            conv_widths: default_conv_widths(),
            conv_maps: default_conv_maps(),
        }
    }
}

impl ClassifierBlock {
    pub fn with_vocab(&self, vocab_size: usize) -> ClassifierConfig {
        ClassifierConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            encoder: self.encoder,
            conv_widths: self.conv_widths.clone(),
            conv_maps: self.conv_maps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitBlock {
    #[serde(default = "default_ratio")]
    pub val: f64,
    #[serde(default = "default_ratio")]
    pub test: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_ratio() -> f64 {
    0.1
}

impl Default for SplitBlock {
    fn default() -> Self {
        SplitBlock {
            val: default_ratio(),
            test: default_ratio(),
            seed: 0,
        }
    }
}

impl SplitBlock {
    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            val: self.val,
            test: self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Root of run directories; relative paths resolve against the config
    /// file's directory.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub target: String,
    /// Domain name → JSONL path.
    pub datasets: BTreeMap<String, PathBuf>,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Leave the target domain out of general-model training.
    #[serde(default)]
    pub exclude_target: bool,
    #[serde(default)]
    pub split: SplitBlock,
    #[serde(default)]
    pub classifier: ClassifierBlock,
    #[serde(default)]
    pub meta: MetaConfig,
    #[serde(default)]
    pub mlm: MlmConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_max_len() -> usize {
    170
}
fn default_min_count() -> usize {
    2
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// A parsed config plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        let config = Self::from_toml(&text)?;
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(LoadedConfig { config, base_dir })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |m: String| Err(CliError::validation(m));
        if self.name.trim().is_empty() || self.name.contains(['/', '\\']) {
            return v(format!("invalid run name {:?}", self.name));
        }
        if self.datasets.is_empty() {
            return v("no datasets configured".into());
        }
        if !self.datasets.contains_key(&self.target) {
            return v(format!("unknown domain {:?}: target is not in datasets", self.target));
        }
        if self.datasets.len() < 2 {
            return v("need at least one source domain besides the target".into());
        }
        if self.max_len < 3 {
            return v("max_len must be >= 3".into());
        }
        if self.min_count == 0 {
            return v("min_count must be >= 1".into());
        }
        if self.seeds.is_empty() {
            return v("seeds must not be empty".into());
        }
        let c = &self.classifier;
        if c.embed_dim == 0 || c.hidden == 0 {
            return v("classifier embed_dim and hidden must be >= 1".into());
        }
        if c.encoder == Encoder::Conv && (c.conv_widths.is_empty() || c.conv_maps == 0) {
            return v("conv encoder needs conv_widths and conv_maps >= 1".into());
        }
        let s = &self.split;
        if !(s.val >= 0.0 && s.test > 0.0 && s.val + s.test < 1.0) {
            return v(format!("invalid split ratios val={} test={}", s.val, s.test));
        }
        self.meta.validate()?;
        self.mlm.validate()?;
        self.adapt.validate()?;
        if let Some(synth) = &self.synth {
            synth.validate()?;
        }
        Ok(())
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.datasets.keys().map(String::as_str).filter(move |d| *d != self.target)
    }
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn dataset_path(&self, domain: &str) -> Option<PathBuf> {
        self.config.datasets.get(domain).map(|p| self.resolve(p))
    }

    pub fn runs_root(&self) -> PathBuf {
        self.resolve(&self.config.output_dir).join(&self.config.name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "demo"
target = "health"

[datasets]
health = "data/health.jsonl"
politics = "data/politics.jsonl"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.max_len, 170);
        assert_eq!(c.meta.inner_lr, 1e-2);
        assert_eq!(c.mlm.mask_ratio, 0.15);
        assert_eq!(c.sources().collect::<Vec<_>>(), vec!["politics"]);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = format!("{MINIMAL}\n[meta]\nbogus = 1\n");
        assert!(RunConfig::from_toml(&text).is_err());
        let text = format!("colour = \"red\"\n{MINIMAL}");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn unknown_target_is_rejected() {
        let c = RunConfig::from_toml(&MINIMAL.replace("target = \"health\"", "target = \"sports\"")).unwrap();
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("unknown domain"));
    }

    #[test]
    fn invalid_rates_are_rejected() {
        let text = format!("{MINIMAL}\n[mlm]\nmask_ratio = 1.5\n");
        assert!(RunConfig::from_toml(&text).unwrap().validate().is_err());
        let text = format!("{MINIMAL}\n[meta]\ninner_steps = 0\n");
        assert!(RunConfig::from_toml(&text).unwrap().validate().is_err());
    }
}
