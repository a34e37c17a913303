//! Seeded synthetic texture scenes with exact ground truth.
//!
//! A scene is a background texture with non-overlapping blob instances, each
//! filled with its class's procedural texture. Masks are rasterised from the
//! instance polygons and the same masks decide which pixels get painted, so
//! they agree exactly. A seeded subset of instances is emitted as bounding-box
//! annotations to mimic incomplete manual labelling.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use chrono::{TimeZone, Utc};
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::BACKGROUND;
use crate::error::{Error, Result};
use crate::evaluation::{rasterize_polygon, ClassMask};
use crate::geometry::{Point, Polygon};
use crate::imaging::{Raster, Rect};
use crate::store::{AnnotationRecord, Geometry, JsonKind, Origin, Store, REFERENCE_CLASS_COUNTS};

/// Annotator id recorded on generated annotations.
pub const SYNTH_ANNOTATOR: &str = "synthgen";

/// Placement attempts per instance before it is dropped.
const PLACEMENT_ATTEMPTS: usize = 200;
/// Minimum gap between instance bounding boxes.
const PLACEMENT_MARGIN: u32 = 4;
const BLOB_VERTICES: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recipe {
    DotField,
    Stripe,
    ValueNoise,
    Marbled,
    Checker,
    Gradient,
    Speckle,
    Crosshatch,
}

/// Procedural texture of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    pub recipe: Recipe,
    pub primary: [u8; 3],
    pub secondary: [u8; 3],
    /// Characteristic feature size in pixels.
    pub period: f64,
    /// Per-pixel noise amplitude.
    pub grain: u8,
}

impl TextureParams {
    fn new(recipe: Recipe, primary: [u8; 3], secondary: [u8; 3], period: f64) -> Self {
        TextureParams {
            recipe,
            primary,
            secondary,
            period,
            grain: 10,
        }
    }

    fn validate(&self, class: &str) -> Result<()> {
        if !(self.period.is_finite() && self.period >= 1.0) {
            return Err(Error::Config(format!("texture period for `{class}` must be >= 1")));
        }
        Ok(())
    }
}

/// Built-in textures for the reference classes and the background.
pub fn default_textures() -> BTreeMap<String, TextureParams> {
    use Recipe::*;
    [
        (BACKGROUND, TextureParams::new(ValueNoise, [62, 88, 44], [128, 104, 64], 42.0)),
        ("maggots", TextureParams::new(DotField, [236, 226, 190], [140, 112, 84], 20.0)),
        ("scale", TextureParams::new(Stripe, [206, 194, 172], [112, 104, 96], 16.0)),
        ("purge", TextureParams::new(ValueNoise, [92, 28, 40], [168, 72, 58], 14.0)),
        ("mummification", TextureParams::new(Gradient, [104, 66, 36], [186, 146, 92], 150.0)),
        ("eggs", TextureParams::new(Speckle, [252, 250, 236], [172, 152, 118], 5.0)),
        ("mold", TextureParams::new(Crosshatch, [226, 230, 236], [118, 112, 140], 16.0)),
        ("marbling", TextureParams::new(Marbled, [78, 88, 142], [172, 152, 164], 22.0)),
        ("plastic", TextureParams::new(Checker, [40, 120, 204], [222, 222, 232], 24.0)),
    ]
    .into_iter()
    .map(|(c, p)| (c.to_owned(), p))
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeight {
    pub class: String,
    pub weight: f64,
}

/// Class weights proportional to the reference instance counts.
pub fn reference_class_mix() -> Vec<ClassWeight> {
    REFERENCE_CLASS_COUNTS
        .iter()
        .map(|&(class, n)| ClassWeight {
            class: class.to_owned(),
            weight: f64::from(n),
        })
        .collect()
}

/// Equal weight for each reference class.
pub fn uniform_class_mix() -> Vec<ClassWeight> {
    REFERENCE_CLASS_COUNTS
        .iter()
        .map(|&(class, _)| ClassWeight {
            class: class.to_owned(),
            weight: 1.0,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub class_mix: Vec<ClassWeight>,
    pub annotation_completeness: f64,
    pub texture_params: BTreeMap<String, TextureParams>,
    /// Inclusive range of instances attempted per scene.
    pub instances: (u32, u32),
    /// Inclusive range of instance bounding-box side lengths.
    pub instance_size: (u32, u32),
    /// Classes placed first in every scene, one instance each.
    pub required_classes: Vec<String>,
    /// Classes never sampled.
    pub excluded_classes: Vec<String>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            width: 800,
            height: 600,
            class_mix: reference_class_mix(),
            annotation_completeness: 0.7,
            texture_params: default_textures(),
            instances: (2, 4),
            instance_size: (240, 380),
            required_classes: Vec::new(),
            excluded_classes: Vec::new(),
        }
    }
}

impl SceneSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        SceneSpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("scene dimensions must be positive".into()));
        }
        if self.class_mix.iter().any(|w| !(w.weight.is_finite() && w.weight >= 0.0)) {
            return Err(Error::Config("class weights must be finite and non-negative".into()));
        }
        if self.sampling_weights().iter().all(|&(_, w)| w == 0.0) && self.required_classes.is_empty() {
            return Err(Error::Config("class weights are all zero".into()));
        }
        if !(self.annotation_completeness > 0.0 && self.annotation_completeness <= 1.0) {
            return Err(Error::Config("annotation completeness must lie in (0, 1]".into()));
        }
        let (lo, hi) = self.instances;
        if lo > hi {
            return Err(Error::Config("instance count range is empty".into()));
        }
        let (smin, smax) = self.instance_size;
        if smin < 16 || smin > smax {
            return Err(Error::Config("instance size range must be ordered and at least 16px".into()));
        }
        for class in self
            .class_mix
            .iter()
            .map(|w| w.class.as_str())
            .chain(self.required_classes.iter().map(String::as_str))
            .chain([BACKGROUND])
        {
            if class != BACKGROUND && self.class_mix.iter().all(|w| w.class != class) {
                return Err(Error::Config(format!("required class `{class}` is not in the class mix")));
            }
            self.texture_params
                .get(class)
                .ok_or_else(|| Error::Config(format!("no texture for class `{class}`")))?
                .validate(class)?;
        }
        if self.class_mix.iter().any(|w| w.class == BACKGROUND) {
            return Err(Error::Config("background cannot be an instance class".into()));
        }
        Ok(())
    }

    fn sampling_weights(&self) -> Vec<(&str, f64)> {
        self.class_mix
            .iter()
            .filter(|w| !self.excluded_classes.contains(&w.class))
            .map(|w| (w.class.as_str(), w.weight))
            .collect()
    }

    /// Forensic classes that receive a mask, in mix order.
    pub fn mask_classes(&self) -> Vec<String> {
        self.class_mix.iter().map(|w| w.class.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class_id: String,
    pub polygon: Polygon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmittedAnnotation {
    pub class_id: String,
    pub rect: Rect,
    /// Index into the instance list.
    pub instance: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub width: u32,
    pub height: u32,
    /// One mask per class in the mix, empty when the class is absent.
    pub masks: BTreeMap<String, ClassMask>,
    pub instances: Vec<Instance>,
    pub annotations: Vec<EmittedAnnotation>,
}

impl GroundTruth {
    pub fn contains_class(&self, class: &str) -> bool {
        self.instances.iter().any(|i| i.class_id == class)
    }
}

/// Per-instance random variation of a class texture.
#[derive(Clone, Copy, Debug)]
struct Variation {
    seed: u64,
    cos: f64,
    sin: f64,
    period: f64,
    dx: f64,
    dy: f64,
    brightness: i32,
}

impl Variation {
    fn sample(rng: &mut ChaCha8Rng, base_period: f64) -> Self {
        let angle = rng.gen_range(0.0..TAU);
        Variation {
            seed: rng.gen(),
            cos: angle.cos(),
            sin: angle.sin(),
            period: base_period * rng.gen_range(0.85..1.15),
            dx: rng.gen_range(0.0..1000.0),
            dy: rng.gen_range(0.0..1000.0),
            brightness: rng.gen_range(-14..=14),
        }
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, x: i64, y: i64) -> u64 {
    mix64(seed ^ mix64((x as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (y as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)))
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (ix, iy) = (fx as i64, fy as i64);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty) = (smooth(x - fx), smooth(y - fy));
    let v = |dx, dy| unit(lattice(seed, ix + dx, iy + dy));
    let top = v(0, 0) + (v(1, 0) - v(0, 0)) * tx;
    let bottom = v(0, 1) + (v(1, 1) - v(0, 1)) * tx;
    top + (bottom - top) * ty
}

fn fbm(seed: u64, x: f64, y: f64) -> f64 {
    let mut total = 0.0;
    let mut amp = 0.5;
    let mut freq = 1.0;
    for octave in 0..3u64 {
        total += amp * value_noise(seed.wrapping_add(octave), x * freq, y * freq);
        amp *= 0.5;
        freq *= 2.0;
    }
    total / 0.875
}

/// Colour of texture `p` with variation `v` at pixel `(x, y)`.
fn shade(p: &TextureParams, v: &Variation, x: u32, y: u32) -> [u8; 3] {
    let (px, py) = (f64::from(x) + v.dx, f64::from(y) + v.dy);
    let u = px * v.cos + py * v.sin;
    let w = -px * v.sin + py * v.cos;
    let period = v.period;
    let t = match p.recipe {
        Recipe::DotField => {
            let (cx, cy) = ((u / period).floor(), (w / period).floor());
            let h = lattice(v.seed, cx as i64, cy as i64);
            let jx = 0.25 + 0.5 * unit(h);
            let jy = 0.25 + 0.5 * unit(mix64(h));
            let (du, dw) = (u / period - cx - jx, w / period - cy - jy);
            if du * du + dw * dw < 0.09 {
                1.0
            } else {
                0.0
            }
        }
        Recipe::Stripe => ((u / period * TAU).sin() * 3.0).clamp(-1.0, 1.0) * 0.5 + 0.5,
        Recipe::ValueNoise => fbm(v.seed, u / period, w / period),
        Recipe::Marbled => {
            let turb = fbm(v.seed, u / (2.0 * period), w / (2.0 * period));
            0.5 + 0.5 * (u / period * TAU * 0.5 + 6.0 * turb).sin()
        }
        Recipe::Checker => {
            let parity = ((u / period).floor() as i64 + (w / period).floor() as i64).rem_euclid(2);
            parity as f64
        }
        Recipe::Gradient => {
            let base = 0.5 + 0.5 * (u / period * TAU).sin();
            0.85 * base + 0.15 * value_noise(v.seed, u / 6.0, w / 6.0)
        }
        Recipe::Speckle => {
            let h = lattice(v.seed, (px / period).floor() as i64, (py / period).floor() as i64);
            if unit(h) > 0.82 {
                1.0
            } else {
                0.0
            }
        }
        Recipe::Crosshatch => {
            let a = (u + w) / std::f64::consts::SQRT_2;
            let b = (u - w) / std::f64::consts::SQRT_2;
            if a.rem_euclid(period) < 4.0 || b.rem_euclid(period) < 4.0 {
                1.0
            } else {
                0.0
            }
        }
    };
    let grain = i32::from(p.grain);
    let noise = if grain == 0 {
        0
    } else {
        (lattice(v.seed ^ 0x5eed, i64::from(x), i64::from(y)) % (2 * grain as u64 + 1)) as i32 - grain
    };
    std::array::from_fn(|c| {
        let base = f64::from(p.secondary[c]) + (f64::from(p.primary[c]) - f64::from(p.secondary[c])) * t;
        (base.round() as i32 + v.brightness + noise).clamp(0, 255) as u8
    })
}

/// Star-shaped blob inscribed in the square at `(x0, y0)` with side `size`.
fn blob(rng: &mut ChaCha8Rng, x0: u32, y0: u32, size: u32) -> Result<Polygon> {
    let r = f64::from(size) / 2.0 - 1.0;
    let (cx, cy) = (f64::from(x0) + f64::from(size) / 2.0, f64::from(y0) + f64::from(size) / 2.0);
    let step = TAU / BLOB_VERTICES as f64;
    let mut pts: Vec<Point> = Vec::with_capacity(BLOB_VERTICES);
    for k in 0..BLOB_VERTICES {
        let theta = step * k as f64 + rng.gen_range(-0.3..0.3) * step;
        let rho = r * rng.gen_range(0.8..=1.0);
        let p = Point::new((cx + rho * theta.cos()).round() as i64, (cy + rho * theta.sin()).round() as i64);
        if pts.last() != Some(&p) {
            pts.push(p);
        }
    }
    if pts.first() == pts.last() {
        pts.pop();
    }
    Polygon::new(pts).map_err(|e| Error::Generation(format!("blob polygon: {e}")))
}

fn mask_bbox(mask: &ClassMask) -> Option<Rect> {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 < x1).then_some(Rect { x0, y0, x1, y1 })
}

fn overlaps_with_margin(a: &Rect, b: &Rect) -> bool {
    a.x0 < b.x1 + PLACEMENT_MARGIN
        && b.x0 < a.x1 + PLACEMENT_MARGIN
        && a.y0 < b.y1 + PLACEMENT_MARGIN
        && b.y0 < a.y1 + PLACEMENT_MARGIN
}

/// Generates one scene; identical specs give identical output.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Raster, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let (smin, smax) = spec.instance_size;
    if smin > w || smin > h {
        return Err(Error::Generation(format!("{w}x{h} canvas cannot hold a {smin}px instance")));
    }

    let bg_params = &spec.texture_params[BACKGROUND];
    let bg = Variation::sample(&mut rng, bg_params.period);

    let weights = spec.sampling_weights();
    let sampler = weights
        .iter()
        .any(|&(_, w)| w > 0.0)
        .then(|| WeightedIndex::new(weights.iter().map(|&(_, w)| w)))
        .transpose()
        .map_err(|e| Error::Config(format!("class weights: {e}")))?;
    let attempted = rng.gen_range(spec.instances.0..=spec.instances.1) as usize;
    let mut classes: Vec<&str> = spec.required_classes.iter().map(String::as_str).collect();
    while classes.len() < attempted.max(spec.required_classes.len()) {
        match &sampler {
            Some(s) => classes.push(weights[s.sample(&mut rng)].0),
            None => break,
        }
    }

    let mut placed: Vec<Rect> = Vec::new();
    let mut instances = Vec::new();
    let mut instance_masks = Vec::new();
    for (k, class) in classes.into_iter().enumerate() {
        let size = rng.gen_range(smin..=smax.min(w).min(h));
        let slot = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
            let x0 = rng.gen_range(0..=w - size);
            let y0 = rng.gen_range(0..=h - size);
            let r = Rect { x0, y0, x1: x0 + size, y1: y0 + size };
            (!placed.iter().any(|p| overlaps_with_margin(p, &r))).then_some(r)
        });
        let Some(slot) = slot else {
            if k < spec.required_classes.len() {
                return Err(Error::Generation(format!("could not place required class `{class}`")));
            }
            continue;
        };
        let polygon = blob(&mut rng, slot.x0, slot.y0, size)?;
        let mask = rasterize_polygon(&polygon, w, h).with_class(class);
        if mask.count() == 0 {
            continue;
        }
        placed.push(slot);
        instances.push(Instance {
            class_id: class.to_owned(),
            polygon,
        });
        instance_masks.push(mask);
    }
    if instances.is_empty() && attempted > 0 {
        return Err(Error::Generation(format!("no instance fits on a {w}x{h} canvas")));
    }

    let variations: Vec<Variation> = instances
        .iter()
        .map(|i| Variation::sample(&mut rng, spec.texture_params[&i.class_id].period))
        .collect();
    let mut raster = Raster::from_fn("", w, h, |x, y| shade(bg_params, &bg, x, y))?;
    let mut masks: BTreeMap<String, ClassMask> = spec
        .mask_classes()
        .into_iter()
        .map(|c| (c.clone(), ClassMask::empty(c, w, h)))
        .collect();
    for ((inst, mask), var) in instances.iter().zip(&instance_masks).zip(&variations) {
        let params = &spec.texture_params[&inst.class_id];
        let bbox = inst.polygon.pixel_bounds(w, h).expect("mask is nonempty");
        for y in bbox.y0..bbox.y1 {
            for x in bbox.x0..bbox.x1 {
                if mask.get(x, y) {
                    raster.put(x, y, shade(params, var, x, y));
                }
            }
        }
        masks
            .get_mut(&inst.class_id)
            .expect("instance classes come from the mix")
            .union_with(mask)?;
    }

    let n = instances.len();
    let keep = ((spec.annotation_completeness * n as f64).round() as usize).min(n);
    let mut chosen = rand::seq::index::sample(&mut rng, n, keep).into_vec();
    chosen.sort_unstable();
    let annotations = chosen
        .into_iter()
        .map(|i| EmittedAnnotation {
            class_id: instances[i].class_id.clone(),
            rect: mask_bbox(&instance_masks[i]).expect("mask is nonempty"),
            instance: i,
        })
        .collect();

    Ok((
        raster,
        GroundTruth {
            width: w,
            height: h,
            masks,
            instances,
            annotations,
        },
    ))
}

/// Summary of one stored scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub image_id: String,
    pub seed: u64,
    pub instances: Vec<Instance>,
    pub annotation_ids: Vec<String>,
}

impl SceneRecord {
    pub fn contains_class(&self, class: &str) -> bool {
        self.instances.iter().any(|i| i.class_id == class)
    }
}

/// Stored corpus descriptor, written to `datasets/synth-<seed>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub seed: u64,
    pub template: SceneSpec,
    pub scenes: Vec<SceneRecord>,
}

/// Persists a generated scene: image, every class mask and the emitted
/// annotations. Annotation ids and timestamps are derived from content so
/// rewriting a scene is reproducible.
pub fn store_scene(store: &mut Store, seed: u64, raster: &Raster, truth: &GroundTruth) -> Result<SceneRecord> {
    let entry = store.put_image(raster)?;
    let masks: Vec<ClassMask> = truth.masks.values().cloned().collect();
    store.put_masks(&entry.id, &masks)?;
    let epoch = Utc.timestamp_opt(0, 0).single().expect("epoch is representable");
    let records: Vec<AnnotationRecord> = truth
        .annotations
        .iter()
        .map(|a| AnnotationRecord {
            id: format!("ann-{}-{}", &entry.id[4..], a.instance),
            image_id: entry.id.clone(),
            geometry: Geometry::Rect { rect: a.rect },
            class_name: a.class_id.clone(),
            annotator: SYNTH_ANNOTATOR.to_owned(),
            created_at: epoch,
            origin: Origin::Manual,
            source_proposal: None,
        })
        .filter(|r| store.annotation(&r.id).is_none())
        .collect();
    let annotation_ids = truth
        .annotations
        .iter()
        .map(|a| format!("ann-{}-{}", &entry.id[4..], a.instance))
        .collect();
    store.put_annotations(records)?;
    Ok(SceneRecord {
        image_id: entry.id,
        seed,
        instances: truth.instances.clone(),
        annotation_ids,
    })
}

/// Per-scene seeds drawn from the corpus seed.
pub fn scene_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen()).collect()
}

/// Generates `n` scenes from `template` and writes them to `store`.
pub fn generate_corpus(store: &mut Store, n: usize, template: &SceneSpec, seed: u64) -> Result<CorpusSummary> {
    if n == 0 {
        return Err(Error::Config("corpus needs at least one scene".into()));
    }
    template.validate()?;
    for class in template.mask_classes() {
        if !store.nomenclature().contains(&class) {
            return Err(Error::UnknownClass(class));
        }
    }
    let seeds = scene_seeds(seed, n);
    let mut scenes = Vec::with_capacity(n);
    for chunk in seeds.chunks(16) {
        let generated: Vec<(u64, Raster, GroundTruth)> = chunk
            .par_iter()
            .map(|&s| generate_scene(&template.with_seed(s)).map(|(r, g)| (s, r, g)))
            .collect::<Result<_>>()?;
        for (s, raster, truth) in &generated {
            scenes.push(store_scene(store, *s, raster, truth)?);
        }
    }
    let summary = CorpusSummary {
        seed,
        template: template.clone(),
        scenes,
    };
    store.put_json(JsonKind::Dataset, &format!("synth-{seed}"), &summary)?;
    Ok(summary)
}
