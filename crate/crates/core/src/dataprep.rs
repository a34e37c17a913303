//! Training-set construction from partially annotated images.
//!
//! Each annotation becomes a class patch; windows that touch no annotation
//! become background patches. Classes with too few instances are dropped,
//! each class is split into train and validation by a seeded shuffle, and
//! only training patches receive augmented variants.
//!
//! A [`DatasetSplit`] stores provenance only. Pixels are re-derived on demand
//! by [`materialize`].

use std::collections::{BTreeMap, HashMap};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{featurize, Example, BACKGROUND};
use crate::error::{Error, Result};
use crate::geometry::rects_overlap;
use crate::imaging::{augment, crop, generate_windows, resize, AugmentSpec, Raster, Rect, PATCH_SIZE, WINDOW_STRIDE};
use crate::num::Scalar;
use crate::store::{AnnotationFilter, AnnotationRecord, Nomenclature, Store};

pub const DEFAULT_MIN_INSTANCES: usize = 100;
pub const DEFAULT_AUGMENT_PER_PATCH: u32 = 4;

/// Where a patch comes from; enough to rebuild its pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchRef {
    pub image_id: String,
    pub rect: Rect,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_annotation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<AugmentSpec>,
}

impl PatchRef {
    /// Augmentation tag, `"none"` for base patches.
    pub fn augmentation_tag(&self) -> String {
        self.augmentation.map_or_else(|| "none".to_owned(), |a| a.to_string())
    }
}

/// A labelled `PATCH_SIZE`-square training patch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPatch {
    pub pixels: Raster,
    pub label: String,
    pub source_annotation: Option<String>,
    pub augmentation: Option<AugmentSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub min_instances: usize,
    pub val_fraction: f64,
    pub augment_per_patch: u32,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            min_instances: DEFAULT_MIN_INSTANCES,
            val_fraction: 1.0 / 3.0,
            augment_per_patch: DEFAULT_AUGMENT_PER_PATCH,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction >= 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("validation fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Validation share of a class with `n` base patches: the floored
    /// fraction, raised to one when the class has at least three patches.
    pub fn validation_count(&self, n: usize) -> usize {
        let v = (n as f64 * self.val_fraction + 1e-9).floor() as usize;
        if n >= 3 && self.val_fraction > 0.0 {
            v.max(1)
        } else {
            v
        }
    }
}

/// Class-filtered, stratified train/validation split of patch references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<PatchRef>,
    pub validation: Vec<PatchRef>,
    /// Background first, then surviving classes in nomenclature order.
    pub class_roster: Vec<String>,
    pub seed: u64,
    /// Base patch count per class before filtering.
    pub class_counts: BTreeMap<String, usize>,
    pub config: DatasetConfig,
}

impl DatasetSplit {
    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.class_roster.iter().position(|c| c == label)
    }
}

/// One image's extent and annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusImage {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<AnnotationRecord>,
}

/// Annotated images in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub nomenclature: Nomenclature,
    pub images: Vec<CorpusImage>,
}

impl Corpus {
    /// Images of the store, optionally restricted to `ids` (in that order).
    pub fn from_store(store: &Store, ids: Option<&[String]>) -> Result<Self> {
        let entries: Vec<_> = match ids {
            Some(ids) => ids
                .iter()
                .map(|id| {
                    store
                        .image(id)
                        .cloned()
                        .ok_or_else(|| Error::DanglingReference(format!("image {id}")))
                })
                .collect::<Result<_>>()?,
            None => store.list_images().to_vec(),
        };
        let images = entries
            .into_iter()
            .map(|e| CorpusImage {
                annotations: store
                    .list_annotations(&AnnotationFilter {
                        image_id: Some(&e.id),
                        ..Default::default()
                    })
                    .into_iter()
                    .cloned()
                    .collect(),
                id: e.id,
                width: e.width,
                height: e.height,
            })
            .collect();
        Ok(Corpus {
            nomenclature: store.nomenclature().clone(),
            images,
        })
    }
}

fn annotation_rect(a: &AnnotationRecord, width: u32, height: u32) -> Result<Rect> {
    a.geometry
        .bounding_rect(width, height)
        .filter(|r| r.is_valid() && r.fits_within(width, height))
        .ok_or_else(|| Error::Validation(format!("annotation {} lies outside its image", a.id)))
}

/// One patch per annotation: crop to the annotation's box, resize to patch size.
pub fn extract_class_patches(
    images: &HashMap<String, Raster>,
    annotations: &[AnnotationRecord],
) -> Result<Vec<TrainingPatch>> {
    annotations
        .par_iter()
        .map(|a| {
            let image = images
                .get(&a.image_id)
                .ok_or_else(|| Error::DanglingReference(format!("annotation {} cites image {}", a.id, a.image_id)))?;
            let rect = annotation_rect(a, image.width(), image.height())?;
            Ok(TrainingPatch {
                pixels: resize(&crop(image, rect)?, PATCH_SIZE, PATCH_SIZE)?,
                label: a.class_name.clone(),
                source_annotation: Some(a.id.clone()),
                augmentation: None,
            })
        })
        .collect()
}

/// Windows of a `width` x `height` image sharing no area with any of `annotated`.
pub fn background_windows(width: u32, height: u32, annotated: &[Rect], win: u32, stride: u32) -> Vec<Rect> {
    generate_windows(width, height, win, stride)
        .map(|ws| {
            ws.into_iter()
                .filter(|w| !annotated.iter().any(|a| rects_overlap(w, a)))
                .collect()
        })
        .unwrap_or_default()
}

/// Background patches from the windows of `image` that touch no annotation.
pub fn extract_background_patches(
    image: &Raster,
    annotations: &[AnnotationRecord],
    win: u32,
    stride: u32,
) -> Result<Vec<TrainingPatch>> {
    let rects = annotations
        .iter()
        .filter(|a| a.image_id == image.id())
        .map(|a| annotation_rect(a, image.width(), image.height()))
        .collect::<Result<Vec<_>>>()?;
    background_windows(image.width(), image.height(), &rects, win, stride)
        .into_iter()
        .map(|r| {
            Ok(TrainingPatch {
                pixels: resize(&crop(image, r)?, PATCH_SIZE, PATCH_SIZE)?,
                label: BACKGROUND.to_owned(),
                source_annotation: None,
                augmentation: None,
            })
        })
        .collect()
}

/// Filters classes, splits per class and adds augmented training variants.
pub fn build_dataset(corpus: &Corpus, config: &DatasetConfig) -> Result<DatasetSplit> {
    config.validate()?;
    if corpus.images.is_empty() {
        return Err(Error::Config("corpus has no images".into()));
    }
    let mut by_class: BTreeMap<String, Vec<PatchRef>> = BTreeMap::new();
    for img in &corpus.images {
        let mut rects = Vec::with_capacity(img.annotations.len());
        for a in &img.annotations {
            if !corpus.nomenclature.contains(&a.class_name) {
                return Err(Error::UnknownClass(a.class_name.clone()));
            }
            let rect = annotation_rect(a, img.width, img.height)?;
            rects.push(rect);
            by_class.entry(a.class_name.clone()).or_default().push(PatchRef {
                image_id: img.id.clone(),
                rect,
                label: a.class_name.clone(),
                source_annotation: Some(a.id.clone()),
                augmentation: None,
            });
        }
        let bg = by_class.entry(BACKGROUND.to_owned()).or_default();
        for rect in background_windows(img.width, img.height, &rects, PATCH_SIZE, WINDOW_STRIDE) {
            bg.push(PatchRef {
                image_id: img.id.clone(),
                rect,
                label: BACKGROUND.to_owned(),
                source_annotation: None,
                augmentation: None,
            });
        }
    }
    let class_counts: BTreeMap<String, usize> = by_class.iter().map(|(c, v)| (c.clone(), v.len())).collect();

    let mut class_roster = vec![BACKGROUND.to_owned()];
    class_roster.extend(
        corpus
            .nomenclature
            .forensic()
            .filter(|c| class_counts.get(*c).copied().unwrap_or(0) >= config.min_instances)
            .cloned(),
    );
    if class_roster.len() < 2 {
        return Err(Error::Config(format!(
            "no class reaches {} instances",
            config.min_instances
        )));
    }
    if class_counts.get(BACKGROUND).copied().unwrap_or(0) == 0 {
        return Err(Error::Config("corpus yields no background windows".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for class in &class_roster {
        let mut refs = by_class.remove(class).unwrap_or_default();
        refs.shuffle(&mut rng);
        let v = config.validation_count(refs.len());
        let rest = refs.split_off(v);
        validation.extend(refs);
        for base in rest {
            for _ in 0..config.augment_per_patch {
                train.push(PatchRef {
                    augmentation: Some(AugmentSpec::sample(&mut rng)),
                    ..base.clone()
                });
            }
            train.push(base);
        }
    }
    Ok(DatasetSplit {
        train,
        validation,
        class_roster,
        seed: config.seed,
        class_counts,
        config: config.clone(),
    })
}

/// Rebuilds the pixels of `patch` from its source image.
pub fn materialize(image: &Raster, patch: &PatchRef) -> Result<TrainingPatch> {
    let base = resize(&crop(image, patch.rect)?, PATCH_SIZE, PATCH_SIZE)?;
    let pixels = match patch.augmentation {
        Some(spec) => augment(&base, spec)?,
        None => base,
    };
    Ok(TrainingPatch {
        pixels,
        label: patch.label.clone(),
        source_annotation: patch.source_annotation.clone(),
        augmentation: patch.augmentation,
    })
}

/// Materialises and featurises `patches`, loading each source image once.
/// Output order matches input order.
pub fn featurize_refs<F, L>(patches: &[PatchRef], roster: &[String], load: L) -> Result<Vec<Example<F>>>
where
    F: Scalar,
    L: Fn(&str) -> Result<Raster> + Sync,
{
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in patches.iter().enumerate() {
        groups.entry(p.image_id.as_str()).or_default().push(i);
    }
    let groups: Vec<(&str, Vec<usize>)> = groups.into_iter().collect();
    let done: Vec<Vec<(usize, Example<F>)>> = groups
        .par_iter()
        .map(|(image_id, idx)| {
            let image = load(image_id)?;
            idx.iter()
                .map(|&i| {
                    let p = &patches[i];
                    let label = roster
                        .iter()
                        .position(|c| *c == p.label)
                        .ok_or_else(|| Error::UnknownClass(p.label.clone()))?;
                    let features = featurize::<F>(&materialize(&image, p)?.pixels)?;
                    Ok((i, Example { features, label }))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<Option<Example<F>>> = (0..patches.len()).map(|_| None).collect();
    for (i, ex) in done.into_iter().flatten() {
        out[i] = Some(ex);
    }
    Ok(out.into_iter().map(|e| e.expect("every index featurised")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{Geometry, Origin};
    use chrono::Utc;

    fn ann(id: &str, image: &str, class: &str, rect: Rect) -> AnnotationRecord {
        AnnotationRecord {
            id: id.into(),
            image_id: image.into(),
            geometry: Geometry::Rect { rect },
            class_name: class.into(),
            annotator: "t".into(),
            created_at: Utc::now(),
            origin: Origin::Manual,
            source_proposal: None,
        }
    }

    fn corpus(per_class: &[(&str, usize)]) -> Corpus {
        let mut images = Vec::new();
        let mut k = 0;
        for &(class, n) in per_class {
            for _ in 0..n {
                images.push(CorpusImage {
                    id: format!("img{k}"),
                    width: 500,
                    height: 300,
                    annotations: vec![ann(&format!("a{k}"), &format!("img{k}"), class, Rect { x0: 0, y0: 0, x1: 50, y1: 50 })],
                });
                k += 1;
            }
        }
        Corpus {
            nomenclature: Nomenclature::default(),
            images,
        }
    }

    #[test]
    fn one_annotation_one_patch() {
        let img = Raster::filled("i", 100, 80, [9, 8, 7]).unwrap();
        let images = HashMap::from([("i".to_string(), img)]);
        let p = extract_class_patches(&images, &[ann("a", "i", "mold", Rect { x0: 10, y0: 10, x1: 60, y1: 40 })]).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].label, "mold");
        assert_eq!((p[0].pixels.width(), p[0].pixels.height()), (224, 224));
        assert!(p[0].pixels.pixels().chunks(3).all(|c| c == [9, 8, 7]));
    }

    #[test]
    fn missing_image_is_dangling() {
        let r = extract_class_patches(&HashMap::new(), &[ann("a", "gone", "mold", Rect { x0: 0, y0: 0, x1: 5, y1: 5 })]);
        assert!(matches!(r, Err(Error::DanglingReference(_))));
    }

    #[test]
    fn background_patch_counts() {
        let img = Raster::filled("i", 424, 224, [0, 0, 0]).unwrap();
        assert_eq!(extract_background_patches(&img, &[], 224, 200).unwrap().len(), 2);
        let full = ann("a", "i", "mold", Rect { x0: 0, y0: 0, x1: 424, y1: 224 });
        assert!(extract_background_patches(&img, &[full], 224, 200).unwrap().is_empty());
    }

    #[test]
    fn validation_counts() {
        let c = DatasetConfig::default();
        assert_eq!(c.validation_count(102), 34);
        assert_eq!(c.validation_count(99), 33);
        assert_eq!(c.validation_count(3), 1);
        assert_eq!(c.validation_count(2), 0);
        assert_eq!(c.validation_count(4), 1);
    }

    #[test]
    fn class_with_99_instances_is_excluded() {
        let split = build_dataset(&corpus(&[("mold", 99), ("eggs", 100)]), &DatasetConfig::default()).unwrap();
        assert_eq!(split.class_roster, vec![BACKGROUND.to_string(), "eggs".to_string()]);
        assert_eq!(split.class_counts["mold"], 99);
    }

    #[test]
    fn split_of_102() {
        let cfg = DatasetConfig {
            augment_per_patch: 0,
            ..DatasetConfig::default()
        };
        let split = build_dataset(&corpus(&[("eggs", 102)]), &cfg).unwrap();
        let val = split.validation.iter().filter(|p| p.label == "eggs").count();
        let train = split.train.iter().filter(|p| p.label == "eggs").count();
        assert_eq!((val, train), (34, 68));
    }

    #[test]
    fn augmented_variants_stay_in_train() {
        let split = build_dataset(&corpus(&[("eggs", 102)]), &DatasetConfig::default()).unwrap();
        let train_eggs: Vec<_> = split.train.iter().filter(|p| p.label == "eggs").collect();
        assert_eq!(train_eggs.len(), 68 * 5);
        for v in &split.validation {
            assert!(v.augmentation.is_none());
            assert!(!split
                .train
                .iter()
                .any(|t| t.image_id == v.image_id && t.rect == v.rect && t.label == v.label));
        }
    }

    #[test]
    fn same_seed_same_split() {
        let c = corpus(&[("eggs", 120)]);
        let a = build_dataset(&c, &DatasetConfig::default()).unwrap();
        let b = build_dataset(&c, &DatasetConfig::default()).unwrap();
        assert_eq!(a, b);
        let other = build_dataset(&c, &DatasetConfig { seed: 1, ..DatasetConfig::default() }).unwrap();
        assert_ne!(a.validation, other.validation);
    }

    #[test]
    fn nothing_survives_is_config_error() {
        assert!(matches!(
            build_dataset(&corpus(&[("eggs", 5)]), &DatasetConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
