//! Target-domain adaptation with transferability-weighted source instances.
//!
//! The objective sums two expectations, each normalised by its own
//! population: `λ · mean_source(w · ℓ) + mean_target(ℓ)` where `ℓ` is the
//! per-item binary cross-entropy and `w` the instance's transferability
//! weight. `λ` defaults to 1.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::eval;
use crate::lm::TransferabilityRecord;
use crate::nn::{bce_item, Classifier, Differentiable, LabeledBatch, OptimizerConfig, ParamSet};
use crate::util;

/// Which population an item belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Origin {
    Source { weight: f64 },
    Target,
}

fn population_sizes(origins: &[Origin]) -> (usize, usize) {
    let n_src = origins.iter().filter(|o| matches!(o, Origin::Source { .. })).count();
    (n_src, origins.len() - n_src)
}

/// Per-item coefficients `c_i` such that the objective is `Σ c_i ℓ_i`.
pub fn loss_coefficients(origins: &[Origin], source_coef: f64) -> Result<Vec<f64>> {
    let (n_src, n_tgt) = population_sizes(origins);
    origins
        .iter()
        .map(|o| match *o {
            Origin::Source { weight } => {
                if !(weight.is_finite() && weight >= 0.0) {
                    return Err(Error::InvalidInput(format!("source weight {weight} must be finite and >= 0")));
                }
                Ok(source_coef * weight / n_src as f64)
            }
            Origin::Target => Ok(1.0 / n_tgt as f64),
        })
        .collect()
}

/// The two-expectation objective on predicted probabilities, with its
/// gradient with respect to each prediction.
pub fn weighted_loss(predictions: &[f64], labels: &[f64], origins: &[Origin], source_coef: f64) -> Result<(f64, Vec<f64>)> {
    for (what, len) in [("labels", labels.len()), ("origins", origins.len())] {
        if len != predictions.len() {
            return Err(Error::LengthMismatch {
                what,
                left: predictions.len(),
                right: len,
            });
        }
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput("prediction batch".into()));
    }
    let coefs = loss_coefficients(origins, source_coef)?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(predictions.len());
    for ((&p, &y), c) in predictions.iter().zip(labels).zip(coefs) {
        let (l, g) = bce_item(p, y)?;
        total += c * l;
        grads.push(c * g);
    }
    Ok((total, grads))
}

/// Optional per-domain rescaling of raw weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightNorm {
    #[default]
    None,
    /// Divide by the domain's mean weight so each domain averages 1.
    Mean1,
}

impl FromStr for WeightNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(WeightNorm::None),
            "mean1" => Ok(WeightNorm::Mean1),
            other => Err(Error::Config(format!("unknown weight normalization {other:?}"))),
        }
    }
}

/// Instance id → weight, after optional normalisation.
pub fn source_weights(records: &[TransferabilityRecord], norm: WeightNorm) -> Result<BTreeMap<String, f64>> {
    let means = crate::lm::mean_weight_by_domain(records);
    let mut out = BTreeMap::new();
    for r in records {
        if !(r.weight.is_finite() && r.weight >= 0.0) {
            return Err(Error::InvalidInput(format!("weight of {:?} is {}", r.id, r.weight)));
        }
        let w = match norm {
            WeightNorm::None => r.weight,
            WeightNorm::Mean1 if means[&r.domain] > 0.0 => r.weight / means[&r.domain],
            WeightNorm::Mean1 => 0.0,
        };
        if out.insert(r.id.clone(), w).is_some() {
            return Err(Error::InvalidInput(format!("duplicate weight record for {:?}", r.id)));
        }
    }
    Ok(out)
}

/// Pipeline variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Meta-trained general model, weighted sources plus target.
    Full,
    /// General model from pooled multi-domain training instead.
    WoMeta,
    /// Meta-trained general model adapted on target data only.
    WoSources,
    /// Freshly initialised model trained on target data only.
    TargetOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::WoMeta, Ablation::WoSources, Ablation::TargetOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::WoMeta => "wo-meta",
            Ablation::WoSources => "wo-sources",
            Ablation::TargetOnly => "target-only",
        }
    }

    pub fn uses_sources(self) -> bool {
        matches!(self, Ablation::Full | Ablation::WoMeta)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Epochs without a better validation F1 before stopping; 0 disables.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Target items per mini-batch.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Source items drawn per target item in each mini-batch.
    #[serde(default = "default_source_ratio")]
    pub source_ratio: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    /// λ, the multiplier on the source expectation.
    #[serde(default = "default_source_coef")]
    pub source_coef: f64,
    #[serde(default)]
    pub normalize: WeightNorm,
}

fn default_epochs() -> usize {
    50
}
fn default_patience() -> usize {
    5
}
fn default_batch_size() -> usize {
    16
}
fn default_source_ratio() -> f64 {
    1.0
}
fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::adam(1e-3)
}
fn default_source_coef() -> f64 {
    1.0
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epochs: default_epochs(),
            patience: default_patience(),
            batch_size: default_batch_size(),
            source_ratio: default_source_ratio(),
            optimizer: default_optimizer(),
            source_coef: default_source_coef(),
            normalize: WeightNorm::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("adapt batch_size must be >= 1".into()));
        }
        if !(self.source_ratio.is_finite() && self.source_ratio >= 0.0) {
            return Err(Error::Config("source_ratio must be finite and >= 0".into()));
        }
        if !(self.source_coef.is_finite() && self.source_coef >= 0.0) {
            return Err(Error::Config("source_coef must be finite and >= 0".into()));
        }
        self.optimizer.validate()?;
        if self.optimizer.lr() <= 0.0 {
            return Err(Error::Config("adapt learning rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub val_auc: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Adapted {
    pub params: ParamSet,
    pub trace: Vec<AdaptEpoch>,
    /// Epoch of the returned parameters; 0 is the starting point.
    pub best_epoch: usize,
}

pub fn trace_csv(trace: &[AdaptEpoch]) -> String {
    let mut out = String::from("epoch,train_loss,val_f1,val_auc,val_loss\n");
    for e in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.train_loss, e.val_f1, e.val_auc, e.val_loss
        ));
    }
    out
}

/// Data for one adaptation run.
pub struct AdaptData<'a> {
    pub target_train: &'a [Example],
    pub target_val: &'a [Example],
    /// Source instances; empty drops the source term.
    pub sources: &'a [Example],
    pub weights: &'a BTreeMap<String, f64>,
}

struct Validation {
    f1: f64,
    auc: f64,
    loss: f64,
}

fn validate(model: &Classifier, params: &ParamSet, val: &[Example]) -> Result<Validation> {
    let batch = LabeledBatch::from_examples(val)?;
    let seqs: Vec<&[usize]> = batch.seqs.iter().map(Vec::as_slice).collect();
    let scores = model.predict(params, &seqs)?;
    let labels: Vec<u8> = val.iter().map(|e| u8::from(e.label)).collect();
    Ok(Validation {
        f1: eval::f1_acc(&scores, &labels, eval::DEFAULT_THRESHOLD)?.f1_macro,
        auc: eval::roc_auc(&scores, &labels).unwrap_or(f64::NAN),
        loss: model.loss(params, &batch)?,
    })
}

/// Mini-batch descent on the weighted objective starting from `general`.
///
/// Every batch holds `batch_size` target items and `source_ratio` times as
/// many source items, drawn from a reshuffled cycle over the sources. The
/// returned parameters are the epoch (0 included) with the best validation
/// macro F1, ties broken by lower validation loss. `general` is not touched.
pub fn adapt_to_target(
    model: &Classifier,
    general: &ParamSet,
    data: &AdaptData<'_>,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<Adapted> {
    cfg.validate()?;
    model.validate(general)?;
    if data.target_train.is_empty() {
        return Err(Error::EmptyInput("target training split".into()));
    }
    if data.target_val.is_empty() {
        return Err(Error::EmptyInput("target validation split".into()));
    }
    let source_weights: Vec<f64> = data
        .sources
        .iter()
        .map(|s| {
            data.weights
                .get(&s.id)
                .copied()
                .ok_or_else(|| Error::MissingWeight(s.id.clone()))
        })
        .collect::<Result<_>>()?;

    let mut params = general.clone();
    let mut trace = Vec::new();
    let start = validate(model, &params, data.target_val)?;
    let mut best = (start.f1, start.loss, params.clone(), 0usize);
    if cfg.epochs == 0 {
        return Ok(Adapted {
            params,
            trace,
            best_epoch: 0,
        });
    }

    let mut rng = util::rng(seed, 0xada7);
    let mut opt = cfg.optimizer.build();
    let mut target_order: Vec<usize> = (0..data.target_train.len()).collect();
    let mut source_order: Vec<usize> = (0..data.sources.len()).collect();
    let mut source_cursor = source_order.len();
    let per_batch_sources = if data.sources.is_empty() {
        0
    } else {
        (cfg.batch_size as f64 * cfg.source_ratio).round() as usize
    };
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        target_order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in target_order.chunks(cfg.batch_size) {
            let mut items: Vec<&Example> = chunk.iter().map(|&i| &data.target_train[i]).collect();
            let mut origins = vec![Origin::Target; items.len()];
            for _ in 0..per_batch_sources {
                if source_cursor == source_order.len() {
                    source_order.shuffle(&mut rng);
                    source_cursor = 0;
                }
                let s = source_order[source_cursor];
                source_cursor += 1;
                items.push(&data.sources[s]);
                origins.push(Origin::Source {
                    weight: source_weights[s],
                });
            }
            let coefs = loss_coefficients(&origins, cfg.source_coef)?;
            let batch = LabeledBatch::weighted(
                items.iter().map(|e| e.seq.ids.clone()).collect(),
                items.iter().map(|e| e.label.as_f64()).collect(),
                coefs,
            )?;
            let (loss, grad) = model.loss_and_grad(&params, &batch)?;
            opt.step(&mut params, &grad)?;
            loss_sum += loss;
            batches += 1;
        }
        let v = validate(model, &params, data.target_val)?;
        trace.push(AdaptEpoch {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_f1: v.f1,
            val_auc: v.auc,
            val_loss: v.loss,
        });
        if v.f1 > best.0 || (v.f1 == best.0 && v.loss < best.1) {
            best = (v.f1, v.loss, params.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(Adapted {
        params: best.2,
        trace,
        best_epoch: best.3,
    })
}
