//! The pipeline stages. Each takes an opened [`Run`] and writes its
//! artifacts into the run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use xfer::adapt::{self, Ablation, AdaptData, WeightNorm};
use xfer::data::{Example, Vocabulary};
use xfer::eval::{self, MetricsRow, PredictionRow};
use xfer::lm::{self, MaskedLm, ScoringLm};
use xfer::meta::{self, PooledData};
use xfer::nn::{checkpoint, CheckpointMeta, Classifier, ParamSet};

use crate::config::LoadedConfig;
use crate::error::CliError;
use crate::run::{load_corpora, tokenize_all, Corpora, DomainExamples, Run, VOCAB};
use crate::synth;

pub const METRICS: &str = "metrics.csv";

pub fn general_ckpt(pooled: bool) -> &'static str {
    if pooled {
        "general-pooled.ckpt"
    } else {
        "general.ckpt"
    }
}

pub fn lm_ckpt(target: &str) -> String {
    format!("lm-{target}.ckpt")
}

pub fn weights_csv(target: &str) -> String {
    format!("weights-{target}.csv")
}

pub fn adapted_ckpt(target: &str, ablation: Ablation) -> String {
    format!("adapted-{target}-{ablation}.ckpt")
}

/// Writes the configured synthetic corpora.
pub fn synth(cfg: &LoadedConfig) -> Result<Vec<PathBuf>, CliError> {
    let spec = cfg
        .config
        .synth
        .as_ref()
        .ok_or_else(|| CliError::validation("config has no [synth] block"))?;
    let corpus = synth::generate(spec)?;
    synth::write(&corpus, &cfg.resolve(&spec.dir))
}

/// Per-domain item counts, as `domain fake real total` lines.
pub fn ingest_stats(cfg: &LoadedConfig) -> Result<String, CliError> {
    let mut out = String::from("domain\tfake\treal\ttotal\n");
    let (mut fake, mut real) = (0, 0);
    for domain in cfg.config.datasets.keys() {
        let path = cfg.dataset_path(domain).expect("domain comes from the map");
        let r = xfer::data::ingest(&path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        for (d, c) in &r.counts {
            out.push_str(&format!("{d}\t{}\t{}\t{}\n", c.fake, c.real, c.total()));
            fake += c.fake;
            real += c.real;
        }
    }
    out.push_str(&format!("all\t{fake}\t{real}\t{}\n", fake + real));
    Ok(out)
}

fn classifier(run: &Run, vocab: &Vocabulary) -> Result<Classifier, CliError> {
    Ok(Classifier::new(run.config().classifier.with_vocab(vocab.len()))?)
}

fn classifier_meta(run: &Run, model: &Classifier, vocab: &Vocabulary, tag: Option<String>) -> Result<CheckpointMeta, CliError> {
    Ok(CheckpointMeta {
        kind: "classifier".into(),
        model: serde_json::to_value(model.config()).map_err(|e| CliError::runtime(e.to_string()))?,
        seed: run.seed,
        config_hash: run.config_hash.clone(),
        vocab_fingerprint: vocab.fingerprint(),
        tag,
    })
}

fn save_checkpoint(run: &Run, name: &str, meta: &CheckpointMeta, params: &ParamSet) -> Result<(), CliError> {
    let bytes = checkpoint::encode(meta, params)?;
    run.write_artifact(name, &bytes)
}

/// Loads a classifier checkpoint and checks it belongs to this run.
fn load_classifier(run: &Run, name: &str, hint: &str, vocab: &Vocabulary) -> Result<(Classifier, ParamSet), CliError> {
    let path = run.require(name, hint)?;
    let (meta, params) = checkpoint::load(&path)?;
    check_meta(&path, &meta, "classifier", run, vocab)?;
    let model = classifier(run, vocab)?;
    if serde_json::to_value(model.config()).ok() != Some(meta.model.clone()) {
        return Err(CliError::validation(format!(
            "{}: architecture differs from the configured classifier",
            path.display()
        )));
    }
    model.validate(&params)?;
    Ok((model, params))
}

fn check_meta(path: &Path, meta: &CheckpointMeta, kind: &str, run: &Run, vocab: &Vocabulary) -> Result<(), CliError> {
    if meta.kind != kind {
        return Err(CliError::validation(format!(
            "{}: expected a {kind} checkpoint, found {:?}",
            path.display(),
            meta.kind
        )));
    }
    if meta.config_hash != run.config_hash {
        return Err(CliError::validation(format!(
            "{}: produced under a different configuration",
            path.display()
        )));
    }
    if meta.vocab_fingerprint != vocab.fingerprint() {
        return Err(CliError::validation(format!(
            "{}: vocabulary mismatch with {VOCAB}",
            path.display()
        )));
    }
    Ok(())
}

pub struct GeneralOutcome {
    pub checkpoint: PathBuf,
    pub iterations: usize,
    pub best_iteration: usize,
}

/// Builds the vocabulary from every domain's training split and trains the
/// general model episodically, or by pooled multi-domain training when
/// `pooled` is set.
pub fn train_general(run: &Run, pooled: bool) -> Result<GeneralOutcome, CliError> {
    let c = run.config();
    let corpora = load_corpora(&run.cfg)?;
    let vocab = Vocabulary::build(&corpora.train_items(), c.min_count)?;
    run.write_artifact(VOCAB, vocab.to_text().as_bytes())?;
    let ex = tokenize_all(&corpora, &vocab, c.max_len)?;
    let train: BTreeMap<String, Vec<Example>> = ex.iter().map(|(d, e)| (d.clone(), e.train.clone())).collect();
    let val: BTreeMap<String, Vec<Example>> = ex.iter().map(|(d, e)| (d.clone(), e.val.clone())).collect();
    let exclude: Vec<String> = if c.exclude_target { vec![c.target.clone()] } else { vec![] };

    let model = classifier(run, &vocab)?;
    let trained = if pooled {
        meta::train_pooled(&model, &train, &val, &c.meta, PooledData::SupportAndQuery, &exclude, run.seed)?
    } else {
        meta::train_general(&model, &train, &val, &c.meta, &exclude, run.seed)?
    };
    let name = general_ckpt(pooled);
    let meta = classifier_meta(run, &model, &vocab, Some(if pooled { "pooled" } else { "meta" }.into()))?;
    save_checkpoint(run, name, &meta, &trained.params)?;
    let trace_name = if pooled { "general-pooled-trace.csv" } else { "general-trace.csv" };
    run.write_artifact(trace_name, trained.trace.to_csv().as_bytes())?;
    Ok(GeneralOutcome {
        checkpoint: run.path(name),
        iterations: trained.trace.records.len(),
        best_iteration: trained.best_iteration,
    })
}

/// Trains the target LM on the target's training split.
pub fn train_lm(run: &Run, target: &str) -> Result<PathBuf, CliError> {
    let c = run.config();
    let vocab = run.load_vocab()?;
    let corpora = load_corpora(&run.cfg)?;
    let split = corpora.domain(target)?;
    let examples = xfer::data::examples(&split.train, &vocab, c.max_len)?;
    let seqs: Vec<_> = examples.into_iter().map(|e| e.seq).collect();
    let model = MaskedLm::new(c.mlm.architecture(vocab.len()))?;
    let (params, trace) = lm::train_mlm(&model, &seqs, &c.mlm, run.seed)?;
    let scoring = ScoringLm {
        model,
        params,
        vocab_fingerprint: vocab.fingerprint(),
        target: Some(target.to_string()),
    };
    let name = lm_ckpt(target);
    let meta = CheckpointMeta {
        kind: "mlm".into(),
        model: serde_json::to_value(scoring.model.config()).map_err(|e| CliError::runtime(e.to_string()))?,
        seed: run.seed,
        config_hash: run.config_hash.clone(),
        vocab_fingerprint: scoring.vocab_fingerprint.clone(),
        tag: scoring.target.clone(),
    };
    save_checkpoint(run, &name, &meta, &scoring.params)?;
    let mut csv = String::from("epoch,mean_loss,masked_tokens\n");
    for e in &trace {
        csv.push_str(&format!("{},{},{}\n", e.epoch, e.mean_loss, e.masked_tokens));
    }
    run.write_artifact(&format!("lm-{target}-trace.csv"), csv.as_bytes())?;
    Ok(run.path(&name))
}

fn load_lm(run: &Run, target: &str, vocab: &Vocabulary) -> Result<ScoringLm, CliError> {
    let path = run.require(&lm_ckpt(target), &format!("train-lm --target {target}"))?;
    let (lm, meta) = ScoringLm::load(&path)?;
    check_meta(&path, &meta, "mlm", run, vocab)?;
    if meta.tag.as_deref() != Some(target) {
        return Err(CliError::validation(format!("{}: not tagged with target {target:?}", path.display())));
    }
    Ok(lm)
}

/// Every item of every non-target domain, in domain then split order.
fn source_examples(target: &str, ex: &BTreeMap<String, DomainExamples>) -> Vec<Example> {
    ex.iter()
        .filter(|(d, _)| d.as_str() != target)
        .flat_map(|(_, e)| e.all().cloned())
        .collect()
}

pub struct ScoreOutcome {
    pub records: usize,
    pub failures: usize,
    pub mean_weight: BTreeMap<String, f64>,
    pub dvalues: Option<PathBuf>,
}

/// Scores every source instance with the target LM; with `compare`, also
/// writes the per-instance perplexity difference against that target's LM.
pub fn score(run: &Run, target: &str, compare: Option<&str>) -> Result<ScoreOutcome, CliError> {
    let c = run.config();
    let vocab = run.load_vocab()?;
    let lm_t = load_lm(run, target, &vocab)?;
    let corpora = load_corpora(&run.cfg)?;
    corpora.domain(target)?;
    let ex = tokenize_all(&corpora, &vocab, c.max_len)?;
    let sources = source_examples(target, &ex);
    let report = lm::score_sources(&lm_t.model, &lm_t.params, &sources)?;
    for f in &report.failures {
        eprintln!("warning: could not score {}: {}", f.id, f.reason);
    }
    let name = weights_csv(target);
    lm::write_records(&run.path(&name), &report.records)?;
    run.record(&name)?;

    let dvalues = match compare {
        None => None,
        Some(other) => {
            let lm_o = load_lm(run, other, &vocab)?;
            let rows = lm::dvalue_report(&lm_t, &lm_o, &sources)?;
            let name = format!("dvalue-{target}-{other}.csv");
            lm::write_dvalues(&run.path(&name), &rows)?;
            run.record(&name)?;
            Some(run.path(&name))
        }
    };
    Ok(ScoreOutcome {
        records: report.records.len(),
        failures: report.failures.len(),
        mean_weight: lm::mean_weight_by_domain(&report.records),
        dvalues,
    })
}

fn evaluate_params(model: &Classifier, params: &ParamSet, test: &[Example]) -> Result<(eval::MetricsReport, Vec<PredictionRow>), CliError> {
    let seqs: Vec<&[usize]> = test.iter().map(|e| e.seq.ids.as_slice()).collect();
    let scores = model.predict(params, &seqs)?;
    let labels: Vec<u8> = test.iter().map(|e| u8::from(e.label)).collect();
    let metrics = eval::evaluate(&scores, &labels)?;
    let rows = test
        .iter()
        .zip(&scores)
        .map(|(e, &score)| PredictionRow {
            id: e.id.clone(),
            domain: e.domain.clone(),
            label: u8::from(e.label),
            score,
        })
        .collect();
    Ok((metrics, rows))
}

fn metrics_row(model: &str, target: &str, m: &eval::MetricsReport) -> MetricsRow {
    MetricsRow {
        model: model.into(),
        target: target.into(),
        f1: m.f1_macro,
        acc: m.accuracy,
        auc: m.auc,
        spauc: m.spauc,
    }
}

/// Replaces the (model, target) row of the run's metrics file.
fn upsert_metrics(run: &Run, row: MetricsRow) -> Result<(), CliError> {
    let path = run.path(METRICS);
    let mut rows = if path.exists() {
        eval::read_metrics_csv(&path)?
    } else {
        Vec::new()
    };
    rows.retain(|r| !(r.model == row.model && r.target == row.target));
    rows.push(row);
    eval::write_metrics_csv(&path, &rows)?;
    run.record(METRICS)
}

pub struct AdaptOutcome {
    pub checkpoint: PathBuf,
    pub metrics: MetricsRow,
    pub best_epoch: usize,
}

/// Adapts to the target under one ablation and evaluates on its test split.
pub fn adapt_eval(run: &Run, target: &str, ablation: Ablation, normalize: WeightNorm) -> Result<AdaptOutcome, CliError> {
    let c = run.config();
    let vocab = run.load_vocab()?;
    let corpora: Corpora = load_corpora(&run.cfg)?;
    corpora.domain(target)?;
    let ex = tokenize_all(&corpora, &vocab, c.max_len)?;
    let tgt = &ex[target];

    let (model, general) = match ablation {
        Ablation::Full | Ablation::WoSources => load_classifier(run, general_ckpt(false), "train-general", &vocab)?,
        Ablation::WoMeta => load_classifier(run, general_ckpt(true), "train-general --ablation wo-meta", &vocab)?,
        Ablation::TargetOnly => {
            let m = classifier(run, &vocab)?;
            let p = m.init(run.seed);
            (m, p)
        }
    };
    let (sources, weights) = if ablation.uses_sources() {
        let path = run.require(&weights_csv(target), &format!("score --target {target}"))?;
        let records = lm::read_records(&path)?;
        (source_examples(target, &ex), adapt::source_weights(&records, normalize)?)
    } else {
        (Vec::new(), BTreeMap::new())
    };
    let data = AdaptData {
        target_train: &tgt.train,
        target_val: &tgt.val,
        sources: &sources,
        weights: &weights,
    };
    let adapted = adapt::adapt_to_target(&model, &general, &data, &c.adapt, run.seed)?;

    let name = adapted_ckpt(target, ablation);
    let meta = classifier_meta(run, &model, &vocab, Some(format!("{target}/{ablation}")))?;
    save_checkpoint(run, &name, &meta, &adapted.params)?;
    run.write_artifact(
        &format!("adapt-trace-{target}-{ablation}.csv"),
        adapt::trace_csv(&adapted.trace).as_bytes(),
    )?;
    let (metrics, preds) = evaluate_params(&model, &adapted.params, &tgt.test)?;
    let pred_name = format!("predictions-{target}-{ablation}.csv");
    eval::write_predictions(&run.path(&pred_name), &preds)?;
    run.record(&pred_name)?;
    let row = metrics_row(ablation.as_str(), target, &metrics);
    upsert_metrics(run, row.clone())?;
    Ok(AdaptOutcome {
        checkpoint: run.path(&name),
        metrics: row,
        best_epoch: adapted.best_epoch,
    })
}

/// Evaluates the general models and every adapted model present on the
/// target's test split, refreshing their rows in the metrics file.
pub fn evaluate(run: &Run, target: &str) -> Result<Vec<MetricsRow>, CliError> {
    let c = run.config();
    let vocab = run.load_vocab()?;
    let corpora = load_corpora(&run.cfg)?;
    let split = corpora.domain(target)?;
    let test = xfer::data::examples(&split.test, &vocab, c.max_len)?;
    let mut candidates: Vec<(String, String)> = vec![
        ("general".into(), general_ckpt(false).into()),
        ("general-pooled".into(), general_ckpt(true).into()),
    ];
    candidates.extend(Ablation::ALL.iter().map(|a| (a.as_str().to_string(), adapted_ckpt(target, *a))));
    let mut rows = Vec::new();
    for (label, file) in candidates {
        if !run.path(&file).exists() {
            continue;
        }
        let (model, params) = load_classifier(run, &file, "train-general", &vocab)?;
        let (m, _) = evaluate_params(&model, &params, &test)?;
        let row = metrics_row(&label, target, &m);
        upsert_metrics(run, row.clone())?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::validation(format!(
            "no classifier checkpoints in {}; run `xfer train-general` first",
            run.dir.display()
        )));
    }
    Ok(rows)
}

pub struct ReportOutcome {
    pub table: String,
    pub summary: PathBuf,
    pub runs: usize,
}

/// Aggregates the metrics files of `runs` into mean/std per model.
pub fn report(cfg: &LoadedConfig, runs: &[Run]) -> Result<ReportOutcome, CliError> {
    let mut rows = Vec::new();
    let mut found = 0;
    for run in runs {
        let path = run.path(METRICS);
        if !path.exists() {
            continue;
        }
        run.require(METRICS, "adapt")?;
        rows.extend(eval::read_metrics_csv(&path)?);
        found += 1;
    }
    if found == 0 {
        return Err(CliError::validation("no metrics found for the selected seeds; run `xfer adapt` first"));
    }
    let summary = eval::aggregate_seeds(&rows);
    let root = cfg.runs_root();
    let path = root.join("summary.csv");
    xfer::util::write_atomic(&path, &eval::SeedSummary::to_csv(&summary)?)?;
    let mut table = String::new();
    table.push_str(&format!(
        "{:<16} {:<12} {:>4} {:>15} {:>15} {:>15} {:>15}\n",
        "model", "target", "runs", "f1", "acc", "auc", "spauc"
    ));
    for s in &summary {
        let cell = |m: f64, sd: f64| format!("{m:.4}±{sd:.4}");
        table.push_str(&format!(
            "{:<16} {:<12} {:>4} {:>15} {:>15} {:>15} {:>15}\n",
            s.model,
            s.target,
            s.runs,
            cell(s.f1_mean, s.f1_std),
            cell(s.acc_mean, s.acc_std),
            cell(s.auc_mean, s.auc_std),
            cell(s.spauc_mean, s.spauc_std)
        ));
    }
    Ok(ReportOutcome {
        table,
        summary: path,
        runs: found,
    })
}
