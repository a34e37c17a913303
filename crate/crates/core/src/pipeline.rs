//! Store-level workflows: train a model from stored annotations, propose
//! segments for stored images, and score proposals against stored masks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{model_version, train, Example, SoftmaxModel, TrainReport, TrainingMeta};
use crate::dataprep::{build_dataset, featurize_refs, Corpus, DatasetConfig, DatasetSplit};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_image, ConfusionMetrics, EvalReport};
use crate::segmenter::{segment_image, ProposedSegment};
use crate::store::Store;

/// Everything produced by [`train_from_store`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SoftmaxModel<f64>,
    pub report: TrainReport,
    pub split: DatasetSplit,
    pub validation: Option<ConfusionMetrics>,
}

/// Train and validation examples.
pub type ExampleSets = (Vec<Example<f64>>, Vec<Example<f64>>);

/// Featurised train and validation sets of `split`.
pub fn featurize_split(store: &Store, split: &DatasetSplit) -> Result<ExampleSets> {
    let load = |id: &str| store.load_image(id);
    let train = featurize_refs(&split.train, &split.class_roster, load)?;
    let validation = featurize_refs(&split.validation, &split.class_roster, load)?;
    Ok((train, validation))
}

/// Builds a dataset from the annotations on `image_ids` (all images when
/// `None`) and fits the reference classifier.
pub fn train_from_store(
    store: &Store,
    image_ids: Option<&[String]>,
    dataset: &DatasetConfig,
    meta: TrainingMeta,
) -> Result<TrainOutcome> {
    let corpus = Corpus::from_store(store, image_ids)?;
    let split = build_dataset(&corpus, dataset)?;
    let (train_set, validation_set) = featurize_split(store, &split)?;
    let (model, report) = train(split.class_roster.clone(), &train_set, &validation_set, meta)?;
    let validation = if validation_set.is_empty() {
        None
    } else {
        let mut predicted = Vec::with_capacity(validation_set.len());
        for ex in &validation_set {
            predicted.push(model.predict_features(&ex.features)?.top_class);
        }
        let truth: Vec<usize> = validation_set.iter().map(|e| e.label).collect();
        Some(ConfusionMetrics::from_labels(&truth, &predicted, split.class_roster.len())?)
    };
    Ok(TrainOutcome {
        model,
        report,
        split,
        validation,
    })
}

/// Proposals for one stored image.
pub fn propose(store: &Store, model: &SoftmaxModel<f64>, image_id: &str, threshold: f64) -> Result<Vec<ProposedSegment>> {
    let image = store.load_image(image_id)?;
    segment_image(model, &image, threshold)
}

/// Proposals for many stored images, in input order.
pub fn propose_all(
    store: &Store,
    model: &SoftmaxModel<f64>,
    image_ids: &[String],
    threshold: f64,
) -> Result<Vec<(String, Vec<ProposedSegment>)>> {
    image_ids
        .par_iter()
        .map(|id| Ok((id.clone(), propose(store, model, id, threshold)?)))
        .collect()
}

/// Metadata attached to a stored evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRun {
    pub model_version: String,
    pub threshold: f64,
    pub images: Vec<String>,
    pub report: EvalReport,
}

/// Segments every image in `image_ids` and compares the proposals with the
/// stored ground-truth masks.
pub fn evaluate_store(
    store: &Store,
    model: &SoftmaxModel<f64>,
    image_ids: &[String],
    threshold: f64,
    method: &str,
    classifier: Option<ConfusionMetrics>,
) -> Result<EvaluationRun> {
    let classes: Vec<String> = model.roster().to_vec();
    let cells: Vec<Vec<_>> = image_ids
        .par_iter()
        .map(|id| {
            if !store.has_masks(id) {
                return Err(Error::Validation(format!("image {id} has no ground-truth masks")));
            }
            let entry = store.image(id).ok_or_else(|| Error::NotFound(format!("image {id}")))?;
            let truth = store.load_masks(id)?;
            let segments = propose(store, model, id, threshold)?;
            evaluate_image(
                id,
                entry.width,
                entry.height,
                segments.iter().map(|s| (s.class_id.as_str(), &s.hull)),
                &truth,
                &classes,
            )
        })
        .collect::<Result<_>>()?;
    Ok(EvaluationRun {
        model_version: model_version(model),
        threshold,
        images: image_ids.to_vec(),
        report: EvalReport::new(method, cells.into_iter().flatten().collect(), classifier)?,
    })
}
