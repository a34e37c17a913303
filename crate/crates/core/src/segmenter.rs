//! Sliding-window segmentation.
//!
//! Every window of an image is classified; windows whose confidence reaches
//! the threshold are grouped per class by positive-area overlap, and each
//! connected group becomes one proposal: the convex hull of its windows,
//! scored by the mean member confidence.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{PatchClassifier, BACKGROUND};
use crate::error::{Error, Result};
use crate::geometry::{build_adjacency, connected_components, hull_of_rects, Polygon};
use crate::imaging::{crop, generate_windows, resize, Raster, Rect, PATCH_SIZE, WINDOW_STRIDE};

/// Confidence a window classification must reach to be kept.
pub const DEFAULT_THRESHOLD: f64 = 0.85;

/// The classifier's verdict on one window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowClassification {
    pub rect: Rect,
    pub class_id: String,
    pub confidence: f64,
    /// False for background windows, which never become proposals.
    pub proposable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalStatus {
    Proposed,
    Accepted,
    Declined,
}

/// A machine-generated annotation offered for review.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposedSegment {
    pub id: String,
    pub image_id: String,
    pub class_id: String,
    pub hull: Polygon,
    pub score: f64,
    pub member_windows: Vec<WindowClassification>,
    pub status: ProposalStatus,
}

/// Window geometry used by the segmenter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub size: u32,
    pub stride: u32,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            size: PATCH_SIZE,
            stride: WINDOW_STRIDE,
        }
    }
}

/// Classifies every window of `image` without thresholding, in window order.
pub fn scan_windows<C: PatchClassifier + ?Sized>(
    classifier: &C,
    image: &Raster,
    windows: WindowConfig,
) -> Result<Vec<WindowClassification>> {
    let roster = classifier.roster();
    if roster.is_empty() {
        return Err(Error::Incompatible("classifier has an empty roster".into()));
    }
    let rects = generate_windows(image.width(), image.height(), windows.size, windows.stride)?;
    rects
        .par_iter()
        .map(|&rect| {
            let patch = crop(image, rect)?;
            let patch = resize(&patch, PATCH_SIZE, PATCH_SIZE)?;
            let dist = classifier.predict(&patch)?;
            if dist.probabilities.len() != roster.len() || dist.top_class >= roster.len() {
                return Err(Error::Incompatible(format!(
                    "classifier returned {} probabilities for a {}-class roster",
                    dist.probabilities.len(),
                    roster.len()
                )));
            }
            let class_id = roster[dist.top_class].clone();
            Ok(WindowClassification {
                rect,
                proposable: class_id != BACKGROUND,
                class_id,
                confidence: dist.confidence,
            })
        })
        .collect()
}

/// Keeps windows whose confidence is at least `threshold`.
pub fn apply_threshold(scanned: &[WindowClassification], threshold: f64) -> Vec<WindowClassification> {
    scanned
        .iter()
        .filter(|w| w.confidence >= threshold)
        .cloned()
        .collect()
}

pub fn classify_windows<C: PatchClassifier + ?Sized>(
    classifier: &C,
    image: &Raster,
    threshold: f64,
) -> Result<Vec<WindowClassification>> {
    Ok(apply_threshold(
        &scan_windows(classifier, image, WindowConfig::default())?,
        threshold,
    ))
}

/// Groups same-class overlapping windows of one image into proposals.
///
/// Output is sorted by descending score, then class name, then hull.
pub fn group_segments(image_id: &str, windows: &[WindowClassification]) -> Result<Vec<ProposedSegment>> {
    let mut by_class: BTreeMap<&str, Vec<&WindowClassification>> = BTreeMap::new();
    for w in windows.iter().filter(|w| w.proposable && w.class_id != BACKGROUND) {
        by_class.entry(w.class_id.as_str()).or_default().push(w);
    }
    let mut segments = Vec::new();
    for (class, members) in by_class {
        let rects: Vec<Rect> = members.iter().map(|w| w.rect).collect();
        let adjacency = build_adjacency(&rects);
        for component in connected_components(&adjacency) {
            let member_windows: Vec<WindowClassification> =
                component.iter().map(|&i| members[i].clone()).collect();
            let hull = hull_of_rects(member_windows.iter().map(|w| &w.rect))?;
            let score = member_windows.iter().map(|w| w.confidence).sum::<f64>() / member_windows.len() as f64;
            segments.push(ProposedSegment {
                id: segment_id(image_id, class, &member_windows),
                image_id: image_id.to_owned(),
                class_id: class.to_owned(),
                hull,
                score,
                member_windows,
                status: ProposalStatus::Proposed,
            });
        }
    }
    segments.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.class_id.cmp(&b.class_id))
            .then_with(|| a.hull.vertices().cmp(b.hull.vertices()))
    });
    Ok(segments)
}

fn segment_id(image_id: &str, class: &str, members: &[WindowClassification]) -> String {
    let mut h = Sha256::new();
    h.update(image_id.as_bytes());
    h.update([0]);
    h.update(class.as_bytes());
    for w in members {
        for v in [w.rect.x0, w.rect.y0, w.rect.x1, w.rect.y1] {
            h.update(v.to_le_bytes());
        }
    }
    format!("seg-{}", hex::encode(&h.finalize()[..8]))
}

/// Full scan plus the proposals derived from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    /// Every window, before thresholding.
    pub scanned: Vec<WindowClassification>,
    pub segments: Vec<ProposedSegment>,
}

pub fn segment_with_scan<C: PatchClassifier + ?Sized>(
    classifier: &C,
    image: &Raster,
    threshold: f64,
) -> Result<Segmentation> {
    let scanned = scan_windows(classifier, image, WindowConfig::default())?;
    let segments = group_segments(image.id(), &apply_threshold(&scanned, threshold))?;
    Ok(Segmentation { scanned, segments })
}

pub fn segment_image<C: PatchClassifier + ?Sized>(
    classifier: &C,
    image: &Raster,
    threshold: f64,
) -> Result<Vec<ProposedSegment>> {
    Ok(segment_with_scan(classifier, image, threshold)?.segments)
}
