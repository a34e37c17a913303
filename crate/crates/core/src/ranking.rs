//! Per-class presence scores for unlabelled images and the review queue
//! built from them.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{PatchClassifier, BACKGROUND};
use crate::error::{Error, Result};
use crate::imaging::Raster;
use crate::segmenter::{segment_with_scan, Segmentation};
use crate::store::{AnnotationFilter, Origin, Store};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageClassScore {
    pub image_id: String,
    pub class_id: String,
    /// Highest proposal score for the class, 0 when there is none.
    pub presence_score: f64,
    /// Windows of the class at or above the threshold.
    pub support: usize,
    /// Fraction of all windows predicted as the class, before thresholding.
    pub coverage: f64,
}

/// Scores every non-background roster class from a finished segmentation.
pub fn score_segmentation(
    image_id: &str,
    roster: &[String],
    segmentation: &Segmentation,
    threshold: f64,
) -> Vec<ImageClassScore> {
    let total = segmentation.scanned.len();
    roster
        .iter()
        .filter(|c| c.as_str() != BACKGROUND)
        .map(|class| {
            let of_class = || segmentation.scanned.iter().filter(|w| &w.class_id == class);
            let presence_score = segmentation
                .segments
                .iter()
                .filter(|s| &s.class_id == class)
                .map(|s| s.score)
                .fold(0.0, f64::max);
            ImageClassScore {
                image_id: image_id.to_owned(),
                class_id: class.clone(),
                presence_score,
                support: of_class().filter(|w| w.confidence >= threshold).count(),
                coverage: if total == 0 {
                    0.0
                } else {
                    of_class().count() as f64 / total as f64
                },
            }
        })
        .collect()
}

pub fn score_image<C: PatchClassifier + ?Sized>(
    classifier: &C,
    image: &Raster,
    threshold: f64,
) -> Result<Vec<ImageClassScore>> {
    let seg = segment_with_scan(classifier, image, threshold)?;
    Ok(score_segmentation(image.id(), classifier.roster(), &seg, threshold))
}

/// Scores from one model version, keyed by image id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub model_version: String,
    pub threshold: f64,
    pub roster: Vec<String>,
    pub scores: BTreeMap<String, Vec<ImageClassScore>>,
}

impl ScoreTable {
    pub fn new(model_version: impl Into<String>, roster: Vec<String>, threshold: f64) -> Self {
        ScoreTable {
            model_version: model_version.into(),
            threshold,
            roster,
            scores: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, image_id: &str, scores: Vec<ImageClassScore>) {
        self.scores.insert(image_id.to_owned(), scores);
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.scores.contains_key(image_id)
    }

    /// Scores `image_ids` not yet in the table, in parallel.
    pub fn fill<C, L>(&mut self, classifier: &C, image_ids: &[String], load: L) -> Result<()>
    where
        C: PatchClassifier + ?Sized,
        L: Fn(&str) -> Result<Raster> + Sync,
    {
        let threshold = self.threshold;
        let missing: Vec<&String> = image_ids.iter().filter(|id| !self.contains(id)).collect();
        let fresh: Vec<(String, Vec<ImageClassScore>)> = missing
            .par_iter()
            .map(|id| {
                let image = load(id)?.with_id(id.as_str());
                Ok(((*id).clone(), score_image(classifier, &image, threshold)?))
            })
            .collect::<Result<_>>()?;
        self.scores.extend(fresh);
        Ok(())
    }

    /// Top `k` images for `class_id`, skipping `excluded` images.
    ///
    /// Order: descending presence score, then descending support, then image id.
    pub fn rank(&self, class_id: &str, k: usize, excluded: &HashSet<String>) -> Result<Vec<ImageClassScore>> {
        if class_id == BACKGROUND || !self.roster.iter().any(|c| c == class_id) {
            return Err(Error::UnknownClass(class_id.to_owned()));
        }
        let mut rows: Vec<ImageClassScore> = self
            .scores
            .iter()
            .filter(|(id, _)| !excluded.contains(*id))
            .filter_map(|(_, s)| s.iter().find(|s| s.class_id == class_id).cloned())
            .collect();
        rows.sort_by(rank_order);
        rows.truncate(k);
        Ok(rows)
    }
}

/// Queue ordering over scores of the same class.
pub fn rank_order(a: &ImageClassScore, b: &ImageClassScore) -> std::cmp::Ordering {
    b.presence_score
        .total_cmp(&a.presence_score)
        .then_with(|| b.support.cmp(&a.support))
        .then_with(|| a.image_id.cmp(&b.image_id))
}

/// Images carrying a manual annotation of `class_id`.
pub fn manually_annotated(store: &Store, class_id: &str) -> HashSet<String> {
    store
        .list_annotations(&AnnotationFilter {
            class: Some(class_id),
            origin: Some(Origin::Manual),
            ..Default::default()
        })
        .into_iter()
        .map(|a| a.image_id.clone())
        .collect()
}

/// Top-`k` images of the store lacking manual `class_id` annotations.
pub fn rank_unannotated(store: &Store, table: &ScoreTable, class_id: &str, k: usize) -> Result<Vec<ImageClassScore>> {
    table.rank(class_id, k, &manually_annotated(store, class_id))
}

/// Exported queue file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedQueue {
    pub model_version: String,
    pub class_id: String,
    pub entries: Vec<ImageClassScore>,
}

/// Score tables keyed by model version; a new version replaces the old table.
#[derive(Debug, Default)]
pub struct ScoreCache {
    table: Option<ScoreTable>,
}

impl ScoreCache {
    pub fn new() -> Self {
        ScoreCache::default()
    }

    /// Table for `model_version`, discarding any table of another version.
    pub fn table_for(&mut self, model_version: &str, roster: &[String], threshold: f64) -> &mut ScoreTable {
        let stale = self
            .table
            .as_ref()
            .is_none_or(|t| t.model_version != model_version || t.threshold != threshold);
        if stale {
            self.table = Some(ScoreTable::new(model_version, roster.to_vec(), threshold));
        }
        self.table.as_mut().expect("table set above")
    }

    pub fn current(&self) -> Option<&ScoreTable> {
        self.table.as_ref()
    }

    pub fn is_stale(&self, model_version: &str) -> bool {
        self.table.as_ref().is_none_or(|t| t.model_version != model_version)
    }
}
