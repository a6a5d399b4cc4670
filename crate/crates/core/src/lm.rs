//! Target-domain masked language model and pseudo-perplexity scoring.
//!
//! The model predicts a token from the position-tagged sum of its
//! neighbours' embeddings (`radius` on each side, the centre included),
//! passed through `tanh` and a softmax head over the vocabulary. Source
//! instances are scored by masking each content position once and taking
//! the geometric mean of the inverse true-token probabilities.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Example, TokenSequence, MASK, NUM_RESERVED, PAD};
use crate::error::{Error, Result};
use crate::nn::{
    checkpoint, collect_grads, log_softmax_parts, CheckpointMeta, Differentiable, Dual, Graph,
    GradientMap, OptimizerConfig, ParamSet, Real, Tensor, Var,
};
use crate::util;

/// Architecture of a [`MaskedLm`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskedLmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub radius: usize,
}

#[derive(Debug, Clone)]
pub struct MaskedLm {
    config: MaskedLmConfig,
}

/// Prediction problems for the LM: each context is a `2·radius + 1` window
/// whose centre is the (replaced) position, and `target` the original id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MlmBatch {
    pub contexts: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
}

impl MlmBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

impl MaskedLm {
    pub fn new(config: MaskedLmConfig) -> Result<Self> {
        if config.vocab_size <= NUM_RESERVED {
            return Err(Error::Config(format!(
                "vocab_size must exceed the {NUM_RESERVED} reserved tokens"
            )));
        }
        if config.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        Ok(MaskedLm { config })
    }

    pub fn config(&self) -> &MaskedLmConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        2 * self.config.radius + 1
    }

    fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let c = &self.config;
        vec![
            ("embedding", vec![c.vocab_size, c.embed_dim]),
            ("position_tags", vec![self.width(), c.embed_dim]),
            ("output.weight", vec![c.embed_dim, c.vocab_size]),
            ("output.bias", vec![c.vocab_size]),
        ]
    }

    /// Embeddings and head uniform in ±1/√d; position tags start at one so
    /// the initial encoder is a plain window sum.
    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = util::rng(seed, 0x1417);
        let bound = 1.0 / (self.config.embed_dim as f64).sqrt();
        let mut params = ParamSet::new();
        for (name, shape) in self.layout() {
            let t = match name {
                "position_tags" => Tensor::filled(&shape, 1.0),
                "output.bias" => Tensor::zeros(&shape),
                _ => Tensor::uniform(&shape, bound, &mut rng),
            };
            params.insert(name, t).expect("layout names are unique");
        }
        params
    }

    pub fn validate(&self, params: &ParamSet) -> Result<()> {
        let mut expected = ParamSet::new();
        for (name, shape) in self.layout() {
            expected.insert(name, Tensor::zeros(&shape))?;
        }
        expected.check_same_layout(params)
    }

    /// Context window around `pos` in `ids`, PAD outside the sequence.
    pub fn context(&self, ids: &[usize], pos: usize) -> Vec<usize> {
        let r = self.config.radius as isize;
        (-r..=r)
            .map(|o| {
                let at = pos as isize + o;
                if at < 0 || at as usize >= ids.len() {
                    PAD
                } else {
                    ids[at as usize]
                }
            })
            .collect()
    }

    fn logits<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet,
        tangent: Option<&ParamSet>,
        contexts: &[&[usize]],
    ) -> Result<Var> {
        let leaf = |g: &mut Graph<T>, name: &str| -> Result<Var> {
            let t = params.get(name)?;
            let d = tangent.map(|tp| tp.get(name)).transpose()?;
            Ok(g.param(name, t, d))
        };
        let emb = leaf(g, "embedding")?;
        let tags = leaf(g, "position_tags")?;
        let h = g.window_sum(emb, tags, contexts)?;
        let h = g.tanh(h);
        let w = leaf(g, "output.weight")?;
        let b = leaf(g, "output.bias")?;
        g.linear(h, w, b)
    }

    /// Full output distribution for each context; rows sum to one.
    pub fn distributions(&self, params: &ParamSet, contexts: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::<f64>::new();
        let z = self.logits(&mut g, params, None, contexts)?;
        let v = self.config.vocab_size;
        g.value(z)
            .chunks(v)
            .map(|row| {
                let (_, p) = log_softmax_parts(row);
                if p.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("output distribution".into()));
                }
                Ok(p)
            })
            .collect()
    }

    /// `log p(target | context)` for each pair.
    pub fn log_probs(&self, params: &ParamSet, contexts: &[&[usize]], targets: &[usize]) -> Result<Vec<f64>> {
        if contexts.len() != targets.len() {
            return Err(Error::LengthMismatch {
                what: "contexts and targets",
                left: contexts.len(),
                right: targets.len(),
            });
        }
        if contexts.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::<f64>::new();
        let z = self.logits(&mut g, params, None, contexts)?;
        let v = self.config.vocab_size;
        let mut out = Vec::with_capacity(targets.len());
        for (row, &t) in g.value(z).chunks(v).zip(targets) {
            if t >= v {
                return Err(Error::TokenOutOfRange { id: t, vocab_size: v });
            }
            let (logz, _) = log_softmax_parts(row);
            let lp = row[t] - logz;
            if !lp.is_finite() {
                return Err(Error::NonFinite("token log-probability".into()));
            }
            out.push(lp);
        }
        Ok(out)
    }

    fn run<T: Real>(
        &self,
        params: &ParamSet,
        tangent: Option<&ParamSet>,
        batch: &MlmBatch,
    ) -> Result<(T, Graph<T>, Var)> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("masked batch".into()));
        }
        let contexts: Vec<&[usize]> = batch.contexts.iter().map(Vec::as_slice).collect();
        let mut g = Graph::<T>::new();
        let z = self.logits(&mut g, params, tangent, &contexts)?;
        let coef = vec![1.0 / batch.len() as f64; batch.len()];
        let loss = g.softmax_ce(z, &batch.targets, &coef)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(g.first_non_finite().unwrap_or("loss").into()));
        }
        Ok((value, g, loss))
    }
}

impl Differentiable for MaskedLm {
    type Batch = MlmBatch;

    /// Mean cross-entropy over the batch's masked positions.
    fn loss(&self, params: &ParamSet, batch: &MlmBatch) -> Result<f64> {
        Ok(self.run::<f64>(params, None, batch)?.0)
    }

    fn loss_and_grad(&self, params: &ParamSet, batch: &MlmBatch) -> Result<(f64, GradientMap)> {
        let (loss, g, root) = self.run::<f64>(params, None, batch)?;
        Ok((loss, collect_grads(params, g.backward(root)?, |v| v)?))
    }

    fn hessian_vector(&self, params: &ParamSet, batch: &MlmBatch, direction: &ParamSet) -> Result<GradientMap> {
        params.check_same_layout(direction)?;
        let (_, g, root) = self.run::<Dual>(params, Some(direction), batch)?;
        collect_grads(params, g.backward(root)?, Real::tangent)
    }
}

/// What a selected position is replaced with in the model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Replacement {
    Mask,
    /// A uniformly drawn non-reserved token.
    Random(usize),
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedPosition {
    pub position: usize,
    pub original: usize,
    pub replacement: Replacement,
}

/// Selected positions of one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskingPlan {
    pub positions: Vec<MaskedPosition>,
}

/// Probabilities of the three replacement outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplacementMix {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for ReplacementMix {
    fn default() -> Self {
        ReplacementMix {
            mask: 0.8,
            random: 0.1,
            keep: 0.1,
        }
    }
}

impl MaskingPlan {
    /// Selects `ratio · n` content positions, rounded stochastically so the
    /// expected fraction is exactly `ratio`. CLS and SEP are never chosen.
    pub fn sample(
        seq: &TokenSequence,
        ratio: f64,
        mix: &ReplacementMix,
        vocab_size: usize,
        rng: &mut util::Rng,
    ) -> MaskingPlan {
        let n = seq.content_len();
        let exact = ratio * n as f64;
        let mut k = exact.floor() as usize;
        if rng.gen::<f64>() < exact - k as f64 {
            k += 1;
        }
        let k = k.min(n);
        let mut chosen = index::sample(rng, n, k).into_vec();
        chosen.sort_unstable();
        let positions = chosen
            .into_iter()
            .map(|c| {
                let position = c + 1;
                let u: f64 = rng.gen();
                let replacement = if u < mix.mask {
                    Replacement::Mask
                } else if u < mix.mask + mix.random {
                    Replacement::Random(rng.gen_range(NUM_RESERVED..vocab_size))
                } else {
                    Replacement::Keep
                };
                MaskedPosition {
                    position,
                    original: seq.ids[position],
                    replacement,
                }
            })
            .collect();
        MaskingPlan { positions }
    }

    /// The corrupted input sequence.
    pub fn apply(&self, ids: &[usize]) -> Vec<usize> {
        let mut out = ids.to_vec();
        for p in &self.positions {
            out[p.position] = match p.replacement {
                Replacement::Mask => MASK,
                Replacement::Random(id) => id,
                Replacement::Keep => p.original,
            };
        }
        out
    }

    /// Appends this plan's prediction problems to `batch`.
    pub fn extend_batch(&self, lm: &MaskedLm, ids: &[usize], batch: &mut MlmBatch) {
        let corrupted = self.apply(ids);
        for p in &self.positions {
            batch.contexts.push(lm.context(&corrupted, p.position));
            batch.targets.push(p.original);
        }
    }
}

/// Training settings, plus the two architecture knobs that do not come from
/// the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlmConfig {
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
    #[serde(default)]
    pub mix: ReplacementMix,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Sequences per mini-batch.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_radius")]
    pub radius: usize,
}

fn default_mask_ratio() -> f64 {
    0.15
}
fn default_epochs() -> usize {
    20
}
fn default_batch_size() -> usize {
    16
}
fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::adam(1e-2)
}
fn default_embed_dim() -> usize {
    32
}
fn default_radius() -> usize {
    3
}

impl Default for MlmConfig {
    fn default() -> Self {
        MlmConfig {
            mask_ratio: default_mask_ratio(),
            mix: ReplacementMix::default(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            optimizer: default_optimizer(),
            embed_dim: default_embed_dim(),
            radius: default_radius(),
        }
    }
}

impl MlmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask_ratio must be in (0, 1), got {}", self.mask_ratio)));
        }
        let m = &self.mix;
        let parts = [m.mask, m.random, m.keep];
        if parts.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("replacement mix must be non-negative and sum to 1".into()));
        }
        if self.batch_size == 0 || self.embed_dim == 0 {
            return Err(Error::Config("batch_size and embed_dim must be >= 1".into()));
        }
        self.optimizer.validate()?;
        if self.optimizer.lr() <= 0.0 {
            return Err(Error::Config("LM learning rate must be > 0".into()));
        }
        Ok(())
    }

    pub fn architecture(&self, vocab_size: usize) -> MaskedLmConfig {
        MaskedLmConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            radius: self.radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub masked_tokens: usize,
}

/// Fits a masked LM on `corpus` with fresh masking plans every epoch.
pub fn train_mlm(
    lm: &MaskedLm,
    corpus: &[TokenSequence],
    cfg: &MlmConfig,
    seed: u64,
) -> Result<(ParamSet, Vec<MlmEpoch>)> {
    cfg.validate()?;
    let usable: Vec<&TokenSequence> = corpus.iter().filter(|s| s.content_len() >= 1).collect();
    if usable.is_empty() {
        return Err(Error::EmptyInput("LM corpus (no sequence has content tokens)".into()));
    }
    let vocab_size = lm.config().vocab_size;
    let mut params = lm.init(seed);
    let mut opt = cfg.optimizer.build();
    let mut rng = util::rng(seed, 0x3a5c);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut weighted, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = MlmBatch::default();
            for &i in chunk {
                let seq = usable[i];
                MaskingPlan::sample(seq, cfg.mask_ratio, &cfg.mix, vocab_size, &mut rng)
                    .extend_batch(lm, &seq.ids, &mut batch);
            }
            if batch.is_empty() {
                continue;
            }
            let (loss, grad) = lm.loss_and_grad(&params, &batch)?;
            opt.step(&mut params, &grad)?;
            weighted += loss * batch.len() as f64;
            count += batch.len();
        }
        trace.push(MlmEpoch {
            epoch,
            mean_loss: if count > 0 { weighted / count as f64 } else { f64::NAN },
            masked_tokens: count,
        });
    }
    Ok((params, trace))
}

/// Every content position of `seq` masked in turn with the pure MASK token.
pub fn scoring_batch(lm: &MaskedLm, seq: &TokenSequence) -> MlmBatch {
    let mut batch = MlmBatch::default();
    let mut ids = seq.ids.clone();
    for pos in 1..=seq.content_len() {
        let original = ids[pos];
        ids[pos] = MASK;
        batch.contexts.push(lm.context(&ids, pos));
        batch.targets.push(original);
        ids[pos] = original;
    }
    batch
}

/// `log p(w_i | sentence with only w_i masked)` for each content position.
pub fn token_log_probs(lm: &MaskedLm, params: &ParamSet, seq: &TokenSequence) -> Result<Vec<f64>> {
    let batch = scoring_batch(lm, seq);
    let contexts: Vec<&[usize]> = batch.contexts.iter().map(Vec::as_slice).collect();
    lm.log_probs(params, &contexts, &batch.targets)
}

/// `exp(−mean log p)` over per-position log-probabilities.
pub fn perplexity_from_log_probs(log_probs: &[f64]) -> Result<f64> {
    if log_probs.is_empty() {
        return Err(Error::EmptyInput("sequence content".into()));
    }
    let pp = (-log_probs.iter().sum::<f64>() / log_probs.len() as f64).exp();
    if !(pp.is_finite() && pp > 0.0) {
        return Err(Error::NonFinite("pseudo-perplexity".into()));
    }
    Ok(pp)
}

/// Pseudo-perplexity of one sequence; CLS and SEP are neither masked nor
/// counted.
pub fn pseudo_perplexity(lm: &MaskedLm, params: &ParamSet, seq: &TokenSequence) -> Result<f64> {
    if seq.content_len() == 0 {
        return Err(Error::EmptyInput(format!("content of {:?}", seq.item_id)));
    }
    perplexity_from_log_probs(&token_log_probs(lm, params, seq)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferabilityRecord {
    pub id: String,
    pub domain: String,
    pub pp: f64,
    #[serde(rename = "w")]
    pub weight: f64,
}

impl TransferabilityRecord {
    pub fn new(id: String, domain: String, pp: f64) -> Self {
        TransferabilityRecord {
            id,
            domain,
            pp,
            weight: 1.0 / pp,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFailure {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreReport {
    pub records: Vec<TransferabilityRecord>,
    pub failures: Vec<ScoreFailure>,
}

/// Scores each instance independently, fanning out over threads; output
/// follows input order.
pub fn score_sources(lm: &MaskedLm, params: &ParamSet, sources: &[Example]) -> Result<ScoreReport> {
    lm.validate(params)?;
    let pps = parallel_pp(lm, params, sources);
    let mut report = ScoreReport::default();
    for (ex, pp) in sources.iter().zip(pps) {
        match pp {
            Ok(pp) => report
                .records
                .push(TransferabilityRecord::new(ex.id.clone(), ex.domain.clone(), pp)),
            Err(e) => report.failures.push(ScoreFailure {
                id: ex.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    Ok(report)
}

fn parallel_pp(lm: &MaskedLm, params: &ParamSet, items: &[Example]) -> Vec<Result<f64>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(16);
    let chunk = items.len().div_ceil(threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|ex| pseudo_perplexity(lm, params, &ex.seq))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("scoring thread panicked"))
            .collect()
    })
}

pub fn write_records(path: &Path, records: &[TransferabilityRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(["id", "domain", "pp", "w"])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    util::write_atomic(path, &bytes)
}

pub fn read_records(path: &Path) -> Result<Vec<TransferabilityRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let rec: TransferabilityRecord = row?;
        if !(rec.pp.is_finite() && rec.pp > 0.0 && rec.weight.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "{}: invalid pp/w for {:?}",
                path.display(),
                rec.id
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

/// A trained LM with the provenance needed to compare and reload it.
#[derive(Debug, Clone)]
pub struct ScoringLm {
    pub model: MaskedLm,
    pub params: ParamSet,
    pub vocab_fingerprint: String,
    pub target: Option<String>,
}

impl ScoringLm {
    pub fn save(&self, path: &Path, seed: u64, config_hash: &str) -> Result<()> {
        let meta = CheckpointMeta {
            kind: "mlm".into(),
            model: serde_json::to_value(self.model.config())?,
            seed,
            config_hash: config_hash.into(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
            tag: self.target.clone(),
        };
        checkpoint::save(path, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (meta, params) = checkpoint::load(path)?;
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if meta.kind != "mlm" {
            return Err(bad(format!("expected an mlm checkpoint, found {:?}", meta.kind)));
        }
        let cfg: MaskedLmConfig = serde_json::from_value(meta.model.clone())?;
        let model = MaskedLm::new(cfg)?;
        model.validate(&params).map_err(|e| bad(e.to_string()))?;
        Ok((
            ScoringLm {
                model,
                params,
                vocab_fingerprint: meta.vocab_fingerprint.clone(),
                target: meta.tag.clone(),
            },
            meta,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DValueRow {
    pub id: String,
    pub pp_t1: f64,
    pub pp_t2: f64,
    pub dvalue: f64,
}

/// `pp(lm_1, x) − pp(lm_2, x)` for each instance of `batch`.
pub fn dvalue_report(lm_1: &ScoringLm, lm_2: &ScoringLm, batch: &[Example]) -> Result<Vec<DValueRow>> {
    if lm_1.vocab_fingerprint != lm_2.vocab_fingerprint || lm_1.model.config().vocab_size != lm_2.model.config().vocab_size {
        return Err(Error::VocabMismatch(
            "the two language models were trained on different vocabularies".into(),
        ));
    }
    let a = parallel_pp(&lm_1.model, &lm_1.params, batch);
    let b = parallel_pp(&lm_2.model, &lm_2.params, batch);
    batch
        .iter()
        .zip(a.into_iter().zip(b))
        .map(|(ex, (a, b))| {
            let (pp_t1, pp_t2) = (a?, b?);
            Ok(DValueRow {
                id: ex.id.clone(),
                pp_t1,
                pp_t2,
                dvalue: pp_t1 - pp_t2,
            })
        })
        .collect()
}

pub fn write_dvalues(path: &Path, rows: &[DValueRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["id", "pp_t1", "pp_t2", "dvalue"])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    util::write_atomic(path, &bytes)
}

/// Mean weight per source domain.
pub fn mean_weight_by_domain(records: &[TransferabilityRecord]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.domain.clone()).or_default();
        e.0 += r.weight;
        e.1 += 1;
    }
    acc.into_iter().map(|(d, (s, n))| (d, s / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CLS, SEP};
    use crate::nn::testing::fd_check;
    use proptest::prelude::*;

    fn tiny(vocab: usize) -> MaskedLm {
        MaskedLm::new(MaskedLmConfig {
            vocab_size: vocab,
            embed_dim: 3,
            radius: 1,
        })
        .unwrap()
    }

    fn seq(content: &[usize]) -> TokenSequence {
        let mut ids = vec![CLS];
        ids.extend_from_slice(content);
        ids.push(SEP);
        TokenSequence {
            item_id: "x".into(),
            ids,
        }
    }

    fn random_corpus(vocab: usize, n: usize, seed: u64) -> Vec<TokenSequence> {
        let mut r = util::rng(seed, 0xfd);
        (0..n)
            .map(|_| {
                let len = r.gen_range(1..12);
                let c: Vec<usize> = (0..len).map(|_| r.gen_range(NUM_RESERVED..vocab)).collect();
                seq(&c)
            })
            .collect()
    }

    fn uniform(lm: &MaskedLm, seed: u64) -> ParamSet {
        let mut p = lm.init(seed);
        for name in ["output.weight", "output.bias"] {
            for v in p.get_mut(name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        p
    }

    #[test]
    fn context_pads_and_centres() {
        let lm = MaskedLm::new(MaskedLmConfig {
            vocab_size: 10,
            embed_dim: 2,
            radius: 2,
        })
        .unwrap();
        assert_eq!(lm.context(&[2, 7, 3], 0), vec![PAD, PAD, 2, 7, 3]);
        assert_eq!(lm.context(&[2, 7, 3], 1), vec![PAD, 2, 7, 3, PAD]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let lm = tiny(9);
        for seed in 0..5 {
            let p = lm.init(seed);
            let mut batch = MlmBatch::default();
            let mut r = util::rng(seed, 9);
            for s in random_corpus(9, 4, seed) {
                MaskingPlan::sample(&s, 0.5, &ReplacementMix::default(), 9, &mut r).extend_batch(&lm, &s.ids, &mut batch);
            }
            if batch.is_empty() {
                continue;
            }
            assert!(fd_check(&lm, &p, &batch, 1e-5).unwrap() < 1e-4);
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let lm = tiny(12);
        let p = lm.init(3);
        let ctx: Vec<usize> = vec![CLS, MASK, 7];
        for row in lm.distributions(&p, &[&ctx, &[PAD, 5, 6]]).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_head_gives_vocab_size() {
        let lm = tiny(10);
        let p = uniform(&lm, 1);
        for c in [&[5usize][..], &[5, 6, 7, 8, 9, 5]] {
            let pp = pseudo_perplexity(&lm, &p, &seq(c)).unwrap();
            assert!((pp - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn hand_perplexity() {
        let pp = perplexity_from_log_probs(&[0.5f64.ln(), 0.25f64.ln()]).unwrap();
        assert!((pp - 8f64.sqrt()).abs() < 1e-12);
        assert_eq!(perplexity_from_log_probs(&[0.0, 0.0]).unwrap(), 1.0);
        assert!(perplexity_from_log_probs(&[]).is_err());
    }

    #[test]
    fn weight_is_inverse_pp() {
        let a = TransferabilityRecord::new("a".into(), "d".into(), 2.0);
        let b = TransferabilityRecord::new("b".into(), "d".into(), 4.0);
        assert_eq!((a.weight, b.weight), (0.5, 0.25));
        assert!((a.weight * a.pp - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_content_is_error() {
        let lm = tiny(8);
        let p = lm.init(0);
        assert!(pseudo_perplexity(&lm, &p, &seq(&[])).is_err());
        assert!(train_mlm(&lm, &[seq(&[])], &MlmConfig::default(), 0).is_err());
    }

    #[test]
    fn empty_sources_score_empty() {
        let lm = tiny(8);
        let r = score_sources(&lm, &lm.init(0), &[]).unwrap();
        assert!(r.records.is_empty() && r.failures.is_empty());
    }

    #[test]
    fn masking_statistics() {
        let vocab = 50;
        let corpus = random_corpus(vocab, 10_000, 11);
        let mix = ReplacementMix::default();
        let mut r = util::rng(5, 1);
        let (mut total, mut masked) = (0usize, 0usize);
        let mut kinds = [0usize; 3];
        for s in &corpus {
            let plan = MaskingPlan::sample(s, 0.15, &mix, vocab, &mut r);
            let expected = 0.15 * s.content_len() as f64;
            assert!((plan.positions.len() as f64 - expected).abs() <= 1.0);
            for p in &plan.positions {
                assert!(p.position >= 1 && p.position <= s.content_len());
                kinds[match p.replacement {
                    Replacement::Mask => 0,
                    Replacement::Random(id) => {
                        assert!(id >= NUM_RESERVED);
                        1
                    }
                    Replacement::Keep => 2,
                }] += 1;
            }
            total += s.content_len();
            masked += plan.positions.len();
        }
        let frac = masked as f64 / total as f64;
        assert!((0.14..=0.16).contains(&frac), "{frac}");
        let m = masked as f64;
        for (k, want) in kinds.iter().zip([0.8, 0.1, 0.1]) {
            assert!((*k as f64 / m - want).abs() <= 0.02);
        }
    }

    #[test]
    fn training_reduces_held_out_loss() {
        // tokens follow a cyclic pattern, so neighbours predict the centre
        let vocab = 20;
        let make = |n: usize, seed: u64| -> Vec<TokenSequence> {
            let mut r = util::rng(seed, 2);
            (0..n)
                .map(|_| {
                    let start = r.gen_range(0..15);
                    let c: Vec<usize> = (0..10).map(|i| NUM_RESERVED + (start + i) % 15).collect();
                    seq(&c)
                })
                .collect()
        };
        let lm = MaskedLm::new(MaskedLmConfig {
            vocab_size: vocab,
            embed_dim: 8,
            radius: 2,
        })
        .unwrap();
        let cfg = MlmConfig {
            epochs: 10,
            ..MlmConfig::default()
        };
        for seed in 0..5 {
            let (p, _) = train_mlm(&lm, &make(60, seed), &cfg, seed).unwrap();
            let mut held = MlmBatch::default();
            for s in make(20, seed + 100) {
                held.extend(scoring_batch(&lm, &s));
            }
            let before = lm.loss(&lm.init(seed), &held).unwrap();
            let after = lm.loss(&p, &held).unwrap();
            assert!(after < before, "seed {seed}: {after} !< {before}");
        }
    }

    #[test]
    fn single_token_vocabulary_converges() {
        let lm = MaskedLm::new(MaskedLmConfig {
            vocab_size: NUM_RESERVED + 1,
            embed_dim: 4,
            radius: 1,
        })
        .unwrap();
        let corpus: Vec<TokenSequence> = (1..20).map(|n| seq(&vec![NUM_RESERVED; n % 7 + 1])).collect();
        let cfg = MlmConfig {
            epochs: 100,
            batch_size: 4,
            ..MlmConfig::default()
        };
        let (p, trace) = train_mlm(&lm, &corpus, &cfg, 0).unwrap();
        let last = trace.last().unwrap().mean_loss;
        assert!(last < 0.01, "{last}");
        let pp = pseudo_perplexity(&lm, &p, &seq(&[NUM_RESERVED; 4])).unwrap();
        assert!(pp < 1.01);
    }

    #[test]
    fn training_is_deterministic() {
        let lm = tiny(15);
        let corpus = random_corpus(15, 30, 4);
        let cfg = MlmConfig {
            epochs: 3,
            ..MlmConfig::default()
        };
        let a = train_mlm(&lm, &corpus, &cfg, 9).unwrap();
        let b = train_mlm(&lm, &corpus, &cfg, 9).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    fn example(id: &str, content: &[usize]) -> Example {
        Example {
            id: id.into(),
            domain: "d".into(),
            label: crate::data::Label::Real,
            seq: seq(content),
        }
    }

    #[test]
    fn dvalues_identity_and_mismatch() {
        let lm = tiny(12);
        let a = ScoringLm {
            model: lm.clone(),
            params: lm.init(1),
            vocab_fingerprint: "f".into(),
            target: None,
        };
        let batch = vec![example("e1", &[5, 6, 7])];
        let rows = dvalue_report(&a, &a, &batch).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].dvalue, 0.0);
        let b = ScoringLm {
            vocab_fingerprint: "g".into(),
            ..a.clone()
        };
        assert!(matches!(dvalue_report(&a, &b, &batch), Err(Error::VocabMismatch(_))));
    }

    #[test]
    fn checkpoint_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lm = tiny(12);
        let s = ScoringLm {
            model: lm.clone(),
            params: lm.init(2),
            vocab_fingerprint: "abc".into(),
            target: Some("health".into()),
        };
        let path = dir.path().join("lm.ckpt");
        s.save(&path, 2, "h").unwrap();
        let (back, meta) = ScoringLm::load(&path).unwrap();
        assert_eq!(back.params, s.params);
        assert_eq!(meta.tag.as_deref(), Some("health"));

        let report = score_sources(&lm, &s.params, &[example("a", &[5, 6]), example("b", &[7, 8, 9])]).unwrap();
        let csv_path = dir.path().join("w.csv");
        write_records(&csv_path, &report.records).unwrap();
        assert_eq!(read_records(&csv_path).unwrap(), report.records);
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.starts_with("id,domain,pp,w\n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn log_space_matches_direct_product(content in prop::collection::vec(NUM_RESERVED..12usize, 1..9), seed in 0u64..1000) {
            let lm = tiny(12);
            let p = lm.init(seed);
            let lps = token_log_probs(&lm, &p, &seq(&content)).unwrap();
            let direct = lps.iter().map(|l| 1.0 / l.exp()).product::<f64>().powf(1.0 / lps.len() as f64);
            let pp = perplexity_from_log_probs(&lps).unwrap();
            prop_assert!((pp - direct).abs() / direct < 1e-9);
        }

        #[test]
        fn scoring_order_is_irrelevant(content in prop::collection::vec(NUM_RESERVED..12usize, 1..9), seed in 0u64..1000) {
            let lm = tiny(12);
            let p = lm.init(seed);
            let s = seq(&content);
            let mut lps = token_log_probs(&lm, &p, &s).unwrap();
            let mut one_at_a_time: Vec<f64> = scoring_batch(&lm, &s)
                .contexts
                .iter()
                .zip(&scoring_batch(&lm, &s).targets)
                .rev()
                .map(|(c, &t)| lm.log_probs(&p, &[c.as_slice()], &[t]).unwrap()[0])
                .collect();
            one_at_a_time.reverse();
            prop_assert_eq!(&lps, &one_at_a_time);
            lps.reverse();
            let a = perplexity_from_log_probs(&lps).unwrap();
            let b = pseudo_perplexity(&lm, &p, &s).unwrap();
            prop_assert!((a - b).abs() / b < 1e-12);
        }

        #[test]
        fn weight_decreases_in_pp(a in 0.01f64..1e6, b in 0.01f64..1e6) {
            prop_assume!(a < b);
            prop_assert!(1.0 / a > 1.0 / b);
        }
    }

    impl MlmBatch {
        fn extend(&mut self, other: MlmBatch) {
            self.contexts.extend(other.contexts);
            self.targets.extend(other.targets);
        }
    }
}
