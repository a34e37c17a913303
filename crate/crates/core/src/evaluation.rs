//! Pixel-level segmentation metrics and patch-level classifier metrics.
//!
//! Segmentation precision for a class on an image is correct predicted
//! pixels over predicted pixels; recall is correct predicted pixels over
//! ground-truth pixels. Both are averaged per class over images, then over
//! classes, to give mAP and mAR. Cells where a ratio is undefined (nothing
//! predicted, or no ground truth) are skipped rather than scored.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::classifier::{PatchClassifier, BACKGROUND};
use crate::error::{Error, Result};
use crate::geometry::{Point, Polygon};
use crate::imaging::Raster;

/// Bitset of member pixels for one class on one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMask {
    pub class_id: String,
    width: u32,
    height: u32,
    words: Vec<u64>,
}

impl ClassMask {
    pub fn empty(class_id: impl Into<String>, width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        ClassMask {
            class_id: class_id.into(),
            width,
            height,
            words: vec![0; n.div_ceil(64)],
        }
    }

    pub fn from_bools(class_id: impl Into<String>, width: u32, height: u32, bits: &[bool]) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::InvalidDimensions(format!(
                "{} mask bits for a {width}x{height} image",
                bits.len()
            )));
        }
        let mut m = ClassMask::empty(class_id, width, height);
        for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            m.words[i / 64] |= 1 << (i % 64);
        }
        Ok(m)
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.width as usize * self.height as usize)
            .map(|i| self.words[i / 64] >> (i % 64) & 1 == 1)
            .collect()
    }

    pub fn with_class(mut self, class_id: impl Into<String>) -> Self {
        self.class_id = class_id.into();
        self
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        let i = y as usize * self.width as usize + x as usize;
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32) {
        let i = y as usize * self.width as usize + x as usize;
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn count(&self) -> u64 {
        self.words.iter().map(|w| u64::from(w.count_ones())).sum()
    }

    fn check_same_shape(&self, other: &ClassMask) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::InvalidDimensions(format!(
                "mask {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &ClassMask) -> Result<u64> {
        self.check_same_shape(other)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| u64::from((a & b).count_ones()))
            .sum())
    }

    pub fn union_with(&mut self, other: &ClassMask) -> Result<()> {
        self.check_same_shape(other)?;
        self.words.iter_mut().zip(&other.words).for_each(|(a, b)| *a |= b);
        Ok(())
    }

    pub fn is_disjoint(&self, other: &ClassMask) -> Result<bool> {
        Ok(self.intersection_count(other)? == 0)
    }
}

/// Pixels whose centre `(x + 0.5, y + 0.5)` lies inside or on a convex polygon.
///
/// Evaluated exactly by doubling all coordinates. Parts of the polygon outside
/// the canvas are clipped.
pub fn rasterize_hull(polygon: &Polygon, width: u32, height: u32) -> ClassMask {
    rasterize_with(polygon, width, height, Polygon::convex_contains)
}

/// Same pixel-centre rule as [`rasterize_hull`] for any simple polygon.
pub fn rasterize_polygon(polygon: &Polygon, width: u32, height: u32) -> ClassMask {
    rasterize_with(polygon, width, height, Polygon::contains)
}

fn rasterize_with(
    polygon: &Polygon,
    width: u32,
    height: u32,
    inside: impl Fn(&Polygon, Point) -> bool,
) -> ClassMask {
    let mut mask = ClassMask::empty("", width, height);
    let Some(bounds) = polygon.pixel_bounds(width, height) else {
        return mask;
    };
    let doubled = polygon.scaled(2);
    for y in bounds.y0..bounds.y1 {
        for x in bounds.x0..bounds.x1 {
            let centre = Point::new(2 * i64::from(x) + 1, 2 * i64::from(y) + 1);
            if inside(&doubled, centre) {
                mask.set(x, y);
            }
        }
    }
    mask
}

/// Raw counts and ratios for one (image, class) comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelScore {
    pub predicted: u64,
    pub truth: u64,
    pub correct: u64,
    /// `None` when nothing was predicted.
    pub precision: Option<f64>,
    /// `None` when the class is absent from ground truth.
    pub recall: Option<f64>,
}

impl PixelScore {
    pub fn from_counts(predicted: u64, truth: u64, correct: u64) -> Self {
        assert!(
            correct <= predicted && correct <= truth,
            "correct pixels {correct} exceed predicted {predicted} or truth {truth}"
        );
        PixelScore {
            predicted,
            truth,
            correct,
            precision: (predicted > 0).then(|| correct as f64 / predicted as f64),
            recall: (truth > 0).then(|| correct as f64 / truth as f64),
        }
    }
}

pub fn pixel_precision_recall(predicted: &ClassMask, truth: &ClassMask) -> Result<PixelScore> {
    let correct = predicted.intersection_count(truth)?;
    Ok(PixelScore::from_counts(predicted.count(), truth.count(), correct))
}

/// One row of the per-cell table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub image_id: String,
    pub class_id: String,
    #[serde(flatten)]
    pub score: PixelScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAggregate {
    pub class_id: String,
    pub mean_precision: Option<f64>,
    pub mean_recall: Option<f64>,
    pub precision_cells: usize,
    pub recall_cells: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub map: Option<f64>,
    pub mar: Option<f64>,
    pub per_class: Vec<ClassAggregate>,
}

/// Folds cells into per-class means and the overall mAP / mAR.
///
/// Background cells are ignored. Classes are reported in name order so the
/// result does not depend on cell order.
pub fn aggregate(cells: &[EvalCell]) -> Result<Aggregate> {
    #[derive(Default)]
    struct Acc {
        precisions: Vec<f64>,
        recalls: Vec<f64>,
    }
    // Values are sorted before summing so the result is bit-identical under
    // any permutation of the input cells.
    fn sorted_mean(mut v: Vec<f64>) -> Option<f64> {
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
    let mut by_class: BTreeMap<&str, Acc> = BTreeMap::new();
    for cell in cells.iter().filter(|c| c.class_id != BACKGROUND) {
        let acc = by_class.entry(cell.class_id.as_str()).or_default();
        acc.precisions.extend(cell.score.precision);
        acc.recalls.extend(cell.score.recall);
    }
    let per_class: Vec<ClassAggregate> = by_class
        .into_iter()
        .map(|(class, a)| ClassAggregate {
            class_id: class.to_owned(),
            precision_cells: a.precisions.len(),
            recall_cells: a.recalls.len(),
            mean_precision: sorted_mean(a.precisions),
            mean_recall: sorted_mean(a.recalls),
        })
        .collect();
    let map = sorted_mean(per_class.iter().filter_map(|c| c.mean_precision).collect());
    let mar = sorted_mean(per_class.iter().filter_map(|c| c.mean_recall).collect());
    if map.is_none() && mar.is_none() {
        return Err(Error::EmptyReport);
    }
    Ok(Aggregate { map, mar, per_class })
}

/// Compares predicted polygons against ground-truth masks for one image.
///
/// Same-class polygons are OR-ed into one predicted mask. A cell is emitted
/// for every non-background class in `classes`.
pub fn evaluate_image<'a>(
    image_id: &str,
    width: u32,
    height: u32,
    predictions: impl IntoIterator<Item = (&'a str, &'a Polygon)>,
    truth: &HashMap<String, ClassMask>,
    classes: &[String],
) -> Result<Vec<EvalCell>> {
    let mut predicted: HashMap<&str, ClassMask> = HashMap::new();
    for (class, poly) in predictions {
        let m = rasterize_hull(poly, width, height);
        match predicted.get_mut(class) {
            Some(acc) => acc.union_with(&m)?,
            None => {
                predicted.insert(class, m);
            }
        }
    }
    let empty = ClassMask::empty("", width, height);
    let mut cells = Vec::new();
    for class in classes.iter().filter(|c| c.as_str() != BACKGROUND) {
        let p = predicted.get(class.as_str()).unwrap_or(&empty);
        let t = truth.get(class).unwrap_or(&empty);
        cells.push(EvalCell {
            image_id: image_id.to_owned(),
            class_id: class.clone(),
            score: pixel_precision_recall(p, t)?,
        });
    }
    Ok(cells)
}

/// Top-1 metrics over labelled validation patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    /// `confusion[t][p]`: patches of true class `t` predicted as `p`.
    pub confusion: Vec<Vec<u64>>,
    /// Correct predictions of a class over all predictions of it; `None`
    /// for classes that were never predicted.
    pub per_class_precision: Vec<Option<f64>>,
    pub accuracy: f64,
    /// Mean of the defined per-class precisions.
    pub mean_precision: Option<f64>,
}

impl ConfusionMetrics {
    pub fn from_labels(truth: &[usize], predicted: &[usize], k: usize) -> Result<Self> {
        if truth.is_empty() || truth.len() != predicted.len() {
            return Err(Error::Validation(format!(
                "need matching non-empty label lists, got {} and {}",
                truth.len(),
                predicted.len()
            )));
        }
        let mut confusion = vec![vec![0u64; k]; k];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(Error::Validation(format!("label outside 0..{k}")));
            }
            confusion[t][p] += 1;
        }
        let per_class_precision: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let predicted_as: u64 = (0..k).map(|t| confusion[t][c]).sum();
                (predicted_as > 0).then(|| confusion[c][c] as f64 / predicted_as as f64)
            })
            .collect();
        let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
        let defined: Vec<f64> = per_class_precision.iter().flatten().copied().collect();
        Ok(ConfusionMetrics {
            confusion,
            accuracy: correct as f64 / truth.len() as f64,
            mean_precision: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
            per_class_precision,
        })
    }
}

/// Runs `classifier` over labelled patches and tabulates top-1 metrics.
pub fn classifier_metrics<'a, C: PatchClassifier + ?Sized>(
    classifier: &C,
    patches: impl IntoIterator<Item = (&'a Raster, usize)>,
) -> Result<ConfusionMetrics> {
    let mut truth = Vec::new();
    let mut predicted = Vec::new();
    for (patch, label) in patches {
        predicted.push(classifier.predict(patch)?.top_class);
        truth.push(label);
    }
    ConfusionMetrics::from_labels(&truth, &predicted, classifier.roster().len())
}

/// Everything one evaluation run produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub cells: Vec<EvalCell>,
    pub aggregate: Aggregate,
    pub classifier: Option<ConfusionMetrics>,
}

impl EvalReport {
    pub fn new(method: impl Into<String>, cells: Vec<EvalCell>, classifier: Option<ConfusionMetrics>) -> Result<Self> {
        let aggregate = aggregate(&cells)?;
        Ok(EvalReport {
            method: method.into(),
            cells,
            aggregate,
            classifier,
        })
    }
}

/// Plain-text table with segmentation mAP / mAR and the classification
/// metric (mean per-class precision, with accuracy alongside).
pub fn summary_table(reports: &[EvalReport]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
    let width = reports.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$} | {:>5} {:>5} | {:>5} {:>5}", "", "Segmentation", "", "Classification", "");
    let _ = writeln!(out, "{:<width$} | {:>5} {:>5} | {:>5} {:>5}", "Method", "mAP", "mAR", "mAP", "acc");
    let _ = writeln!(out, "{}", "-".repeat(width + 29));
    for r in reports {
        let (cm, acc) = match &r.classifier {
            Some(c) => (c.mean_precision, Some(c.accuracy)),
            None => (None, None),
        };
        let _ = writeln!(
            out,
            "{:<width$} | {:>5} {:>5} | {:>5} {:>5}",
            r.method,
            fmt(r.aggregate.map),
            fmt(r.aggregate.mar),
            fmt(cm),
            fmt(acc)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Rect;

    fn cell(image: &str, class: &str, p: u64, t: u64, c: u64) -> EvalCell {
        EvalCell {
            image_id: image.into(),
            class_id: class.into(),
            score: PixelScore::from_counts(p, t, c),
        }
    }

    #[test]
    fn rect_polygon_rasterizes_to_100_pixels() {
        let poly = Polygon::from_rect(&Rect { x0: 0, y0: 0, x1: 10, y1: 10 });
        assert_eq!(rasterize_hull(&poly, 20, 20).count(), 100);
    }

    #[test]
    fn polygon_outside_canvas_is_empty() {
        let poly = Polygon::from_rect(&Rect { x0: 50, y0: 50, x1: 60, y1: 60 });
        assert_eq!(rasterize_hull(&poly, 20, 20).count(), 0);
    }

    #[test]
    fn ratio_arithmetic() {
        let s = PixelScore::from_counts(100, 120, 60);
        assert_eq!((s.precision, s.recall), (Some(0.6), Some(0.5)));
        let none = PixelScore::from_counts(0, 0, 0);
        assert_eq!((none.precision, none.recall), (None, None));
    }

    #[test]
    fn identical_and_disjoint_masks() {
        let mut a = ClassMask::empty("x", 8, 8);
        a.set(1, 1);
        a.set(2, 5);
        let s = pixel_precision_recall(&a, &a).unwrap();
        assert_eq!((s.precision, s.recall), (Some(1.0), Some(1.0)));
        let mut b = ClassMask::empty("x", 8, 8);
        b.set(7, 7);
        let s = pixel_precision_recall(&a, &b).unwrap();
        assert_eq!((s.precision, s.recall), (Some(0.0), Some(0.0)));
        assert!(pixel_precision_recall(&a, &ClassMask::empty("x", 8, 9)).is_err());
    }

    #[test]
    fn aggregate_averages_defined_cells() {
        let cells = vec![
            cell("i1", "eggs", 10, 10, 10),
            cell("i2", "eggs", 10, 0, 0),
            cell("i1", "mold", 0, 30, 0),
            cell("i1", "plastic", 0, 0, 0),
        ];
        let a = aggregate(&cells).unwrap();
        let eggs = &a.per_class[0];
        assert_eq!(eggs.mean_precision, Some(0.5));
        assert_eq!(eggs.mean_recall, Some(1.0));
        // mold: recall only; plastic: nothing defined.
        assert_eq!(a.per_class[1].mean_precision, None);
        assert_eq!(a.map, Some(0.5));
        assert_eq!(a.mar, Some(0.5));
    }

    #[test]
    fn two_image_precisions_average() {
        let a = aggregate(&[cell("a", "eggs", 10, 10, 10), cell("b", "eggs", 10, 10, 5)]).unwrap();
        assert_eq!(a.map, Some(0.75));
    }

    #[test]
    fn background_and_empty_reports() {
        assert!(matches!(
            aggregate(&[cell("a", BACKGROUND, 5, 5, 5)]),
            Err(Error::EmptyReport)
        ));
        assert!(matches!(aggregate(&[]), Err(Error::EmptyReport)));
    }

    #[test]
    fn constant_predictor_metrics() {
        let m = ConfusionMetrics::from_labels(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.per_class_precision, vec![Some(0.5), None]);
        assert_eq!(m.mean_precision, Some(0.5));
    }

    #[test]
    fn summary_has_a_row_per_report() {
        let r = EvalReport::new("ref", vec![cell("a", "eggs", 10, 10, 10)], None).unwrap();
        let s = summary_table(&[r]);
        assert!(s.contains("ref"));
        assert!(s.contains("1.00"));
        assert_eq!(s.lines().count(), 4);
    }
}
