//! Run directories, the artifact manifest and shared data loading.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xfer::data::{self, split_stratified, DomainSplit, Example, IngestMode, Vocabulary};
use xfer::util;

use crate::config::{LoadedConfig, RunConfig};
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const VOCAB: &str = "vocab.txt";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    /// File name → SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

/// One seed's run directory under a fixed configuration.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: LoadedConfig,
    pub seed: u64,
    pub dir: PathBuf,
    pub config_hash: String,
}

/// Digest of everything that determines the artifacts, except the seed and
/// the choices that only select among artifacts (target name, weight
/// normalisation) or only concern other commands (synthesis, output path).
pub fn config_hash(cfg: &LoadedConfig) -> Result<String, CliError> {
    let mut c: RunConfig = cfg.config.clone();
    c.seeds.clear();
    c.target.clear();
    c.synth = None;
    c.output_dir = PathBuf::new();
    c.adapt.normalize = Default::default();
    let mut digests = BTreeMap::new();
    for domain in c.datasets.keys() {
        let path = cfg.dataset_path(domain).expect("domain comes from the map");
        let bytes = fs::read(&path).map_err(|e| {
            CliError::validation(format!("dataset {domain:?}: cannot read {}: {e}", path.display()))
        })?;
        digests.insert(domain.clone(), util::sha256_hex(&bytes));
    }
    c.datasets.clear();
    let doc = serde_json::json!({ "config": c, "datasets": digests });
    Ok(util::sha256_hex(doc.to_string().as_bytes()))
}

impl Run {
    pub fn open(cfg: &LoadedConfig, seed: u64) -> Result<Self, CliError> {
        cfg.config.validate()?;
        let config_hash = config_hash(cfg)?;
        Ok(Run {
            dir: cfg.runs_root().join(format!("seed-{seed}")),
            cfg: cfg.clone(),
            seed,
            config_hash,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg.config
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn read_manifest(&self) -> Result<Option<Manifest>, CliError> {
        let path = self.path(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
    }

    /// Writes `bytes` as artifact `name` and records its checksum. A manifest
    /// from a different configuration is discarded first, so its artifacts
    /// are no longer considered part of this run.
    pub fn write_artifact(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        util::write_atomic(&self.path(name), bytes)?;
        self.record(name)
    }

    /// Records the checksum of an artifact already written to the run dir.
    pub fn record(&self, name: &str) -> Result<(), CliError> {
        let bytes = fs::read(self.path(name)).map_err(|e| CliError::runtime(format!("{name}: {e}")))?;
        let mut m = match self.read_manifest()? {
            Some(m) if m.config_hash == self.config_hash && m.seed == self.seed => m,
            _ => Manifest {
                config_hash: self.config_hash.clone(),
                seed: self.seed,
                artifacts: BTreeMap::new(),
            },
        };
        m.artifacts.insert(name.to_string(), util::sha256_hex(&bytes));
        let mut text = serde_json::to_string_pretty(&m).map_err(|e| CliError::runtime(e.to_string()))?;
        text.push('\n');
        util::write_atomic(&self.path(MANIFEST), text.as_bytes())?;
        Ok(())
    }

    /// Path of an input artifact after checking it was produced under this
    /// configuration and is unchanged since. `hint` names the command that
    /// produces it.
    pub fn require(&self, name: &str, hint: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        if !path.exists() {
            return Err(CliError::validation(format!(
                "{} not found; run `xfer {hint}` first",
                path.display()
            )));
        }
        let m = self.read_manifest()?.ok_or_else(|| {
            CliError::validation(format!("{} has no manifest; rerun `xfer {hint}`", self.dir.display()))
        })?;
        if m.config_hash != self.config_hash {
            return Err(CliError::validation(format!(
                "artifacts in {} were produced with a different configuration (hash {} vs {}); rerun `xfer {hint}`",
                self.dir.display(),
                m.config_hash,
                self.config_hash
            )));
        }
        let recorded = m.artifacts.get(name).ok_or_else(|| {
            CliError::validation(format!("{name} is not part of this run's manifest; rerun `xfer {hint}`"))
        })?;
        let bytes = fs::read(&path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        if &util::sha256_hex(&bytes) != recorded {
            return Err(CliError::validation(format!(
                "{} changed since it was recorded in the manifest",
                path.display()
            )));
        }
        Ok(path)
    }

    pub fn load_vocab(&self) -> Result<Vocabulary, CliError> {
        let path = self.require(VOCAB, "train-general")?;
        Ok(Vocabulary::load(&path)?)
    }
}

/// All configured corpora, split per domain.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub splits: BTreeMap<String, DomainSplit>,
}

pub fn load_corpora(cfg: &LoadedConfig) -> Result<Corpora, CliError> {
    let mut items = Vec::new();
    let mut ids = BTreeSet::new();
    for domain in cfg.config.datasets.keys() {
        let path = cfg.dataset_path(domain).expect("domain comes from the map");
        let only = BTreeSet::from([domain.clone()]);
        let report = data::ingest_with(&path, IngestMode::Strict, Some(&only))
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        for item in report.items {
            if !ids.insert(item.id.clone()) {
                return Err(CliError::validation(format!(
                    "id {:?} appears in more than one dataset",
                    item.id
                )));
            }
            items.push(item);
        }
    }
    let splits = split_stratified(&items, cfg.config.split.ratios(), cfg.config.split.seed)?;
    Ok(Corpora { splits })
}

impl Corpora {
    pub fn domain(&self, name: &str) -> Result<&DomainSplit, CliError> {
        self.splits
            .get(name)
            .ok_or_else(|| CliError::validation(format!("unknown domain {name:?}")))
    }

    pub fn train_items(&self) -> Vec<data::NewsItem> {
        self.splits.values().flat_map(|s| s.train.iter().cloned()).collect()
    }
}

/// Tokenized splits of one domain.
pub struct DomainExamples {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl DomainExamples {
    pub fn new(split: &DomainSplit, vocab: &Vocabulary, max_len: usize) -> Result<Self, CliError> {
        Ok(DomainExamples {
            train: data::examples(&split.train, vocab, max_len)?,
            val: data::examples(&split.val, vocab, max_len)?,
            test: data::examples(&split.test, vocab, max_len)?,
        })
    }

    /// Every split, train first.
    pub fn all(&self) -> impl Iterator<Item = &Example> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

pub fn tokenize_all(
    corpora: &Corpora,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<BTreeMap<String, DomainExamples>, CliError> {
    corpora
        .splits
        .iter()
        .map(|(d, s)| Ok((d.clone(), DomainExamples::new(s, vocab, max_len)?)))
        .collect()
}

pub fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}
