//! General-model training by episodic bilevel optimization.
//!
//! Each episode adapts a copy of θ on its support set with plain SGD
//! (`θ_d = θ − α∇L_s(θ)`) and scores the adapted copy on its query set. The
//! outer update sums the query-loss gradients over episodes. In second-order
//! mode the gradient is carried back through the inner updates with exact
//! Hessian-vector products: `g ← (I − α∇²L_s(θ_j)) g` for each inner step
//! in reverse.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{Example, TaskBatch, TaskSampler};
use crate::error::{Error, Result};
use crate::eval;
use crate::util;
use crate::nn::{
    sgd_step, Classifier, Differentiable, GradientMap, LabeledBatch, Optimizer, OptimizerConfig,
    ParamSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaOrder {
    First,
    Second,
}

impl std::str::FromStr for MetaOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(MetaOrder::First),
            "second" => Ok(MetaOrder::Second),
            other => Err(Error::Config(format!("unknown order {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    /// α, the inner-loop SGD rate. Zero disables adaptation.
    #[serde(default = "default_inner_lr")]
    pub inner_lr: f64,
    /// Outer update rule; its `lr` is β.
    #[serde(default = "default_outer")]
    pub outer: OptimizerConfig,
    /// Tasks per meta-iteration; defaults to the number of sampled domains.
    #[serde(default)]
    pub tasks_per_iteration: Option<usize>,
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
    #[serde(default = "default_order")]
    pub order: MetaOrder,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    /// Iterations without a new best validation loss before stopping;
    /// zero disables early stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_episode_size")]
    pub support_size: usize,
    #[serde(default = "default_episode_size")]
    pub query_size: usize,
}

fn default_inner_lr() -> f64 {
    1e-2
}
fn default_outer() -> OptimizerConfig {
    OptimizerConfig::adam(1e-3)
}
fn default_inner_steps() -> usize {
    1
}
fn default_order() -> MetaOrder {
    MetaOrder::First
}
fn default_max_iterations() -> usize {
    200
}
fn default_patience() -> usize {
    10
}
fn default_episode_size() -> usize {
    8
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: default_inner_lr(),
            outer: default_outer(),
            tasks_per_iteration: None,
            inner_steps: default_inner_steps(),
            order: default_order(),
            max_iterations: default_max_iterations(),
            patience: default_patience(),
            support_size: default_episode_size(),
            query_size: default_episode_size(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr >= 0.0 && self.inner_lr.is_finite()) {
            return Err(Error::Config(format!("inner_lr must be >= 0, got {}", self.inner_lr)));
        }
        self.outer.validate()?;
        if self.outer.lr() <= 0.0 {
            return Err(Error::Config("outer learning rate must be > 0".into()));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be >= 1".into()));
        }
        if self.tasks_per_iteration == Some(0) {
            return Err(Error::Config("tasks_per_iteration must be >= 1".into()));
        }
        if self.support_size == 0 || self.query_size == 0 {
            return Err(Error::Config("support_size and query_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One task's data in model form.
#[derive(Debug, Clone)]
pub struct Episode<B> {
    pub domain: String,
    pub support: B,
    pub query: B,
}

/// `inner_steps` SGD steps on the support loss, returning the adapted copy.
/// `params` is never modified.
pub fn inner_adapt<M: Differentiable>(
    model: &M,
    params: &ParamSet,
    support: &M::Batch,
    inner_lr: f64,
    inner_steps: usize,
) -> Result<ParamSet> {
    Ok(inner_trajectory(model, params, support, inner_lr, inner_steps)?.adapted)
}

struct Trajectory {
    /// θ_0 … θ_{k-1}: the points at which support gradients were taken.
    visited: Vec<ParamSet>,
    adapted: ParamSet,
    first_support_loss: f64,
}

fn inner_trajectory<M: Differentiable>(
    model: &M,
    params: &ParamSet,
    support: &M::Batch,
    inner_lr: f64,
    inner_steps: usize,
) -> Result<Trajectory> {
    if inner_steps == 0 {
        return Err(Error::Config("inner_steps must be >= 1".into()));
    }
    let mut visited = Vec::with_capacity(inner_steps);
    let mut current = params.clone();
    let mut first_support_loss = f64::NAN;
    for step in 0..inner_steps {
        let (loss, grad) = model.loss_and_grad(&current, support)?;
        if step == 0 {
            first_support_loss = loss;
        }
        let next = sgd_step(&current, &grad, inner_lr)?;
        visited.push(std::mem::replace(&mut current, next));
    }
    Ok(Trajectory {
        visited,
        adapted: current,
        first_support_loss,
    })
}

/// Losses observed during one meta-iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub mean_support_loss: f64,
    pub mean_query_loss: f64,
}

/// Sum over episodes of the query-loss gradient with respect to θ.
pub fn meta_gradient<M: Differentiable>(
    model: &M,
    params: &ParamSet,
    episodes: &[Episode<M::Batch>],
    cfg: &MetaConfig,
) -> Result<(GradientMap, StepLosses)> {
    if episodes.is_empty() {
        return Err(Error::EmptyInput("task list".into()));
    }
    let mut total = params.zeros_like();
    let (mut support_sum, mut query_sum) = (0.0, 0.0);
    for ep in episodes {
        let traj = inner_trajectory(model, params, &ep.support, cfg.inner_lr, cfg.inner_steps)?;
        let (query_loss, mut g) = model
            .loss_and_grad(&traj.adapted, &ep.query)
            .map_err(|e| Error::NonFinite(format!("query loss of task {:?}: {e}", ep.domain)))?;
        if !query_loss.is_finite() {
            return Err(Error::NonFinite(format!("query loss of task {:?}", ep.domain)));
        }
        if cfg.order == MetaOrder::Second && cfg.inner_lr != 0.0 {
            for theta_j in traj.visited.iter().rev() {
                let hv = model.hessian_vector(theta_j, &ep.support, &g)?;
                g.add_scaled(&hv, -cfg.inner_lr)?;
            }
        }
        total.add_scaled(&g, 1.0)?;
        support_sum += traj.first_support_loss;
        query_sum += query_loss;
    }
    if let Some(bad) = total.first_non_finite() {
        return Err(Error::NonFinite(format!("meta-gradient of {bad}")));
    }
    let n = episodes.len() as f64;
    Ok((
        total,
        StepLosses {
            mean_support_loss: support_sum / n,
            mean_query_loss: query_sum / n,
        },
    ))
}

/// One outer update. On error `params` is left as it was.
pub fn meta_step<M: Differentiable>(
    model: &M,
    params: &mut ParamSet,
    episodes: &[Episode<M::Batch>],
    cfg: &MetaConfig,
    outer: &mut Optimizer,
) -> Result<StepLosses> {
    let (grad, losses) = meta_gradient(model, params, episodes, cfg)?;
    outer.step(params, &grad)?;
    Ok(losses)
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaRecord {
    pub iteration: usize,
    pub mean_support_loss: f64,
    pub mean_query_loss: f64,
    pub val_loss: f64,
    pub val_f1: f64,
    pub val_auc: f64,
    pub task_domains: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetaTrace {
    pub records: Vec<MetaRecord>,
}

impl MetaTrace {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("iteration,mean_support_loss,mean_query_loss,val_f1,val_auc,val_loss,tasks\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.iteration,
                r.mean_support_loss,
                r.mean_query_loss,
                r.val_f1,
                r.val_auc,
                r.val_loss,
                r.task_domains.join(";")
            );
        }
        out
    }

    pub fn query_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_query_loss).collect()
    }
}

/// How the pooled (non-episodic) baseline builds its per-task batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PooledData {
    /// Only the query half, which makes α = 0 meta-training identical.
    QueryOnly,
    /// Support and query together.
    SupportAndQuery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Trainer {
    Meta,
    Pooled(PooledData),
}

#[derive(Debug, Clone)]
pub struct TrainedGeneral {
    pub params: ParamSet,
    pub trace: MetaTrace,
    /// Iteration of the returned checkpoint (0 = initialization).
    pub best_iteration: usize,
}

/// Per-domain training and validation examples.
pub type DomainExamples = BTreeMap<String, Vec<Example>>;

/// Episodic bilevel training of a freshly initialised classifier.
///
/// Returns the parameters with the lowest mean per-domain validation loss,
/// the initialization included. Each domain's validation loss is taken
/// after one inner adaptation on a fixed support batch from its training
/// split, since that is the quantity the episodes optimise.
pub fn train_general(
    model: &Classifier,
    train: &DomainExamples,
    val: &DomainExamples,
    cfg: &MetaConfig,
    exclude: &[String],
    seed: u64,
) -> Result<TrainedGeneral> {
    run_training(Trainer::Meta, model, train, val, cfg, exclude, seed)
}

/// Classical multi-domain training on the same episode stream: each
/// iteration takes one summed gradient step on the tasks' pooled batches.
pub fn train_pooled(
    model: &Classifier,
    train: &DomainExamples,
    val: &DomainExamples,
    cfg: &MetaConfig,
    data: PooledData,
    exclude: &[String],
    seed: u64,
) -> Result<TrainedGeneral> {
    run_training(Trainer::Pooled(data), model, train, val, cfg, exclude, seed)
}

fn episode(train: &DomainExamples, task: &TaskBatch) -> Result<Episode<LabeledBatch>> {
    let items = &train[&task.domain];
    Ok(Episode {
        domain: task.domain.clone(),
        support: LabeledBatch::from_examples(task.support.iter().map(|&i| &items[i]))?,
        query: LabeledBatch::from_examples(task.query.iter().map(|&i| &items[i]))?,
    })
}

struct Validation {
    loss: f64,
    f1: f64,
    auc: f64,
}

/// Mean per-domain validation loss plus pooled F1/AUC. With `adapt`, each
/// domain is scored after the inner update on its fixed support batch.
fn validate(
    model: &Classifier,
    params: &ParamSet,
    val: &DomainExamples,
    exclude: &[String],
    adapt: Option<(&BTreeMap<String, LabeledBatch>, &MetaConfig)>,
) -> Result<Validation> {
    let mut losses = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (domain, items) in val {
        if items.is_empty() || exclude.contains(domain) {
            continue;
        }
        let adapted;
        let at = match adapt.and_then(|(s, cfg)| s.get(domain).map(|b| (b, cfg))) {
            Some((support, cfg)) if cfg.inner_lr > 0.0 => {
                adapted = inner_adapt(model, params, support, cfg.inner_lr, cfg.inner_steps)?;
                &adapted
            }
            _ => params,
        };
        let batch = LabeledBatch::from_examples(items)?;
        losses.push(model.loss(at, &batch)?);
        let seqs: Vec<&[usize]> = batch.seqs.iter().map(Vec::as_slice).collect();
        scores.extend(model.predict(at, &seqs)?);
        labels.extend(items.iter().map(|e| u8::from(e.label)));
    }
    if losses.is_empty() {
        return Ok(Validation {
            loss: f64::NAN,
            f1: f64::NAN,
            auc: f64::NAN,
        });
    }
    let f1 = eval::f1_acc(&scores, &labels, eval::DEFAULT_THRESHOLD)?.f1_macro;
    let auc = eval::roc_auc(&scores, &labels).unwrap_or(f64::NAN);
    Ok(Validation {
        loss: util::mean(&losses),
        f1,
        auc,
    })
}

fn run_training(
    trainer: Trainer,
    model: &Classifier,
    train: &DomainExamples,
    val: &DomainExamples,
    cfg: &MetaConfig,
    exclude: &[String],
    seed: u64,
) -> Result<TrainedGeneral> {
    cfg.validate()?;
    let mut params = model.init(seed);
    let mut trace = MetaTrace::default();
    if cfg.max_iterations == 0 {
        return Ok(TrainedGeneral {
            params,
            trace,
            best_iteration: 0,
        });
    }
    let sizes: BTreeMap<String, usize> = train.iter().map(|(d, v)| (d.clone(), v.len())).collect();
    let mut sampler = TaskSampler::new(&sizes, cfg.support_size, cfg.query_size, exclude, seed)?;
    let n_tasks = cfg
        .tasks_per_iteration
        .unwrap_or_else(|| sampler.domains().count());
    let mut outer = cfg.outer.build();
    let val_support = match trainer {
        Trainer::Meta => validation_support(train, cfg.support_size, seed)?,
        Trainer::Pooled(_) => BTreeMap::new(),
    };
    let adapt = Some((&val_support, cfg));

    let initial = validate(model, &params, val, exclude, adapt)?;
    let mut best = (initial.loss, params.clone(), 0usize);
    let mut since_best = 0;

    for iteration in 1..=cfg.max_iterations {
        let tasks = sampler.next_batch(n_tasks);
        let episodes = tasks
            .iter()
            .map(|t| episode(train, t))
            .collect::<Result<Vec<_>>>()?;
        let losses = match trainer {
            Trainer::Meta => meta_step(model, &mut params, &episodes, cfg, &mut outer)?,
            Trainer::Pooled(data) => pooled_step(model, &mut params, &episodes, data, &mut outer)?,
        };
        let v = validate(model, &params, val, exclude, adapt)?;
        trace.records.push(MetaRecord {
            iteration,
            mean_support_loss: losses.mean_support_loss,
            mean_query_loss: losses.mean_query_loss,
            val_loss: v.loss,
            val_f1: v.f1,
            val_auc: v.auc,
            task_domains: tasks.iter().map(|t| t.domain.clone()).collect(),
        });
        if v.loss < best.0 || best.0.is_nan() {
            best = (v.loss, params.clone(), iteration);
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok(TrainedGeneral {
        params: best.1,
        trace,
        best_iteration: best.2,
    })
}

/// A fixed support batch per domain, drawn once from its training split.
fn validation_support(train: &DomainExamples, size: usize, seed: u64) -> Result<BTreeMap<String, LabeledBatch>> {
    let mut rng = util::rng(seed, 0x7a11);
    let mut out = BTreeMap::new();
    for (domain, items) in train {
        if items.is_empty() {
            continue;
        }
        let picked = index::sample(&mut rng, items.len(), size.min(items.len()));
        out.insert(
            domain.clone(),
            LabeledBatch::from_examples(picked.iter().map(|i| &items[i]))?,
        );
    }
    Ok(out)
}

fn pooled_step(
    model: &Classifier,
    params: &mut ParamSet,
    episodes: &[Episode<LabeledBatch>],
    data: PooledData,
    outer: &mut Optimizer,
) -> Result<StepLosses> {
    let mut total = params.zeros_like();
    let (mut support_sum, mut query_sum) = (0.0, 0.0);
    for ep in episodes {
        support_sum += model.loss(params, &ep.support)?;
        let (query_loss, grad) = match data {
            PooledData::QueryOnly => model.loss_and_grad(params, &ep.query)?,
            PooledData::SupportAndQuery => {
                let mut seqs = ep.support.seqs.clone();
                seqs.extend(ep.query.seqs.iter().cloned());
                let mut labels = ep.support.labels.clone();
                labels.extend(&ep.query.labels);
                let (_, g) = model.loss_and_grad(params, &LabeledBatch::mean(seqs, labels)?)?;
                (model.loss(params, &ep.query)?, g)
            }
        };
        total.add_scaled(&grad, 1.0)?;
        query_sum += query_loss;
    }
    outer.step(params, &total)?;
    let n = episodes.len() as f64;
    Ok(StepLosses {
        mean_support_loss: support_sum / n,
        mean_query_loss: query_sum / n,
    })
}
