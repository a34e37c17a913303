//! Workflows shared by the CLI and the job runner.
//!
//! Each workflow is split into a read-only compute step and a publish step
//! that performs every write, so the server can compute on a snapshot and
//! hold the writer only while publishing.

use annoprop::classifier::{SoftmaxModel, TrainingMeta};
use annoprop::dataprep::{build_dataset, Corpus, DatasetConfig, DatasetSplit};
use annoprop::evaluation::ConfusionMetrics;
use annoprop::pipeline::{evaluate_store, propose_all, train_from_store, EvaluationRun, TrainOutcome};
use annoprop::ranking::{rank_unannotated, RankedQueue, ScoreTable};
use annoprop::segmenter::ProposedSegment;
use annoprop::store::{JsonKind, Store};
use annoprop::synthgen::CorpusSummary;
use annoprop::{Error, Result};
use serde::{Deserialize, Serialize};

pub const LATEST_REPORT: &str = "latest";

/// Stored summary of a training run, `reports/train-<version>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model_version: String,
    pub meta: TrainingMeta,
    pub dataset: DatasetConfig,
    pub class_roster: Vec<String>,
    pub class_counts: std::collections::BTreeMap<String, usize>,
    pub epoch_losses: Vec<f64>,
    pub validation: Option<ConfusionMetrics>,
}

/// Image ids of a stored synthetic corpus, or every image when `corpus` is `None`.
pub fn select_images(store: &Store, corpus: Option<&str>) -> Result<Vec<String>> {
    match corpus {
        None => Ok(store.list_images().iter().map(|e| e.id.clone()).collect()),
        Some(name) => {
            let summary: CorpusSummary = store
                .get_json(JsonKind::Dataset, name)?
                .ok_or_else(|| Error::NotFound(format!("dataset {name}")))?;
            Ok(summary.scenes.into_iter().map(|s| s.image_id).collect())
        }
    }
}

pub fn current_model(store: &Store) -> Result<(String, SoftmaxModel<f64>)> {
    store
        .current_model()?
        .ok_or_else(|| Error::NotFound("no model has been trained".into()))
}

pub fn prepare(store: &Store, ids: &[String], dataset: &DatasetConfig) -> Result<DatasetSplit> {
    build_dataset(&Corpus::from_store(store, Some(ids))?, dataset)
}

pub fn publish_split(store: &mut Store, split: &DatasetSplit) -> Result<String> {
    let name = format!("split-{}", split.seed);
    store.put_json(JsonKind::Dataset, &name, split)?;
    Ok(format!("datasets/{name}.json"))
}

pub fn train(store: &Store, ids: &[String], dataset: &DatasetConfig, meta: TrainingMeta) -> Result<TrainOutcome> {
    train_from_store(store, Some(ids), dataset, meta)
}

pub fn publish_training(store: &mut Store, outcome: &TrainOutcome) -> Result<TrainSummary> {
    let version = store.publish_model(&outcome.model)?;
    let summary = TrainSummary {
        model_version: version.clone(),
        meta: *outcome.model.meta(),
        dataset: outcome.split.config.clone(),
        class_roster: outcome.split.class_roster.clone(),
        class_counts: outcome.split.class_counts.clone(),
        epoch_losses: outcome.report.epoch_losses.clone(),
        validation: outcome.validation.clone(),
    };
    store.put_json(JsonKind::Report, &format!("train-{version}"), &summary)?;
    Ok(summary)
}

pub fn segment(
    store: &Store,
    model: &SoftmaxModel<f64>,
    ids: &[String],
    threshold: f64,
) -> Result<Vec<(String, Vec<ProposedSegment>)>> {
    propose_all(store, model, ids, threshold)
}

/// Replaces pending proposals image by image; returns the proposal count.
pub fn publish_segments(store: &mut Store, results: Vec<(String, Vec<ProposedSegment>)>) -> Result<usize> {
    let mut n = 0;
    for (id, segs) in results {
        n += segs.len();
        store.replace_proposals(&id, segs)?;
    }
    Ok(n)
}

pub fn score(store: &Store, model: &SoftmaxModel<f64>, version: &str, ids: &[String], threshold: f64) -> Result<ScoreTable> {
    let mut table = ScoreTable::new(version, model.roster().to_vec(), threshold);
    table.fill(model, ids, |id| store.load_image(id))?;
    Ok(table)
}

pub fn publish_scores(store: &mut Store, table: &ScoreTable) -> Result<String> {
    let name = format!("scores-{}", table.model_version);
    store.put_json(JsonKind::Report, &name, table)?;
    Ok(format!("reports/{name}.json"))
}

pub fn queue(store: &Store, table: &ScoreTable, class: &str, k: usize) -> Result<RankedQueue> {
    Ok(RankedQueue {
        model_version: table.model_version.clone(),
        class_id: class.to_owned(),
        entries: rank_unannotated(store, table, class, k)?,
    })
}

pub fn publish_queue(store: &mut Store, queue: &RankedQueue) -> Result<String> {
    let name = format!("queue-{}", queue.class_id);
    store.put_json(JsonKind::Report, &name, queue)?;
    Ok(format!("reports/{name}.json"))
}

/// Evaluates the images that carry ground-truth masks.
pub fn evaluate(
    store: &Store,
    model: &SoftmaxModel<f64>,
    ids: &[String],
    threshold: f64,
    classifier: Option<ConfusionMetrics>,
) -> Result<EvaluationRun> {
    let with_masks: Vec<String> = ids.iter().filter(|id| store.has_masks(id)).cloned().collect();
    if with_masks.is_empty() {
        return Err(Error::Validation("no selected image has ground-truth masks".into()));
    }
    evaluate_store(store, model, &with_masks, threshold, "reference", classifier)
}

/// Validation metrics recorded when `version` was trained, if any.
pub fn training_validation(store: &Store, version: &str) -> Result<Option<ConfusionMetrics>> {
    Ok(store
        .get_json::<TrainSummary>(JsonKind::Report, &format!("train-{version}"))?
        .and_then(|s| s.validation))
}

pub fn publish_evaluation(store: &mut Store, run: &EvaluationRun) -> Result<String> {
    store.put_json(JsonKind::Report, &format!("eval-{}", run.model_version), run)?;
    store.put_json(JsonKind::Report, LATEST_REPORT, run)?;
    Ok(format!("reports/{LATEST_REPORT}.json"))
}
