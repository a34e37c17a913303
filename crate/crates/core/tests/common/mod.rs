//! Independent oracles and fixtures shared by the integration targets.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use annoprop::classifier::{Example, FeatureScaler, FeatureVector, SoftmaxModel, TrainingMeta};
use annoprop::dataprep::DatasetConfig;
use annoprop::evaluation::EvalCell;
use annoprop::geometry::Point;
use annoprop::imaging::Rect;
use annoprop::segmenter::WindowClassification;
use annoprop::synthgen::{uniform_class_mix, SceneSpec};
use rand::Rng;

/// Positive-area overlap, written independently of the library.
pub fn overlap_oracle(a: &Rect, b: &Rect) -> bool {
    let w = a.x1.min(b.x1) as i64 - a.x0.max(b.x0) as i64;
    let h = a.y1.min(b.y1) as i64 - a.y0.max(b.y0) as i64;
    w > 0 && h > 0
}

/// Reachability by Floyd-Warshall over the overlap relation; returns the
/// components as sorted index sets.
pub fn closure_components(rects: &[Rect]) -> BTreeSet<Vec<usize>> {
    let n = rects.len();
    let mut reach = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            reach[i][j] = i == j || overlap_oracle(&rects[i], &rects[j]);
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    (0..n)
        .map(|i| (0..n).filter(|&j| reach[i][j]).collect::<Vec<_>>())
        .collect()
}

/// Per-class closure over windows, as `(class, sorted member rects)`.
pub fn grouping_oracle(windows: &[WindowClassification]) -> BTreeSet<(String, Vec<Rect>)> {
    let mut by_class: BTreeMap<&str, Vec<Rect>> = BTreeMap::new();
    for w in windows.iter().filter(|w| w.proposable) {
        by_class.entry(&w.class_id).or_default().push(w.rect);
    }
    let mut out = BTreeSet::new();
    for (class, rects) in by_class {
        for comp in closure_components(&rects) {
            let mut members: Vec<Rect> = comp.iter().map(|&i| rects[i]).collect();
            members.sort();
            out.insert((class.to_owned(), members));
        }
    }
    out
}

fn cross(o: Point, a: Point, b: Point) -> i128 {
    (a.x - o.x) as i128 * (b.y - o.y) as i128 - (a.y - o.y) as i128 * (b.x - o.x) as i128
}

/// Extreme points of a point set: `p` is a vertex when some line through it
/// has every other point strictly on one side or on the line beyond `p`.
/// Implemented as: `p` is an endpoint of a hull edge `(a, b)` such that no
/// point lies to the right of `a -> b` and every collinear point lies
/// between `a` and `b`.
pub fn hull_vertex_oracle(points: &[Point]) -> BTreeSet<(i64, i64)> {
    let pts: Vec<Point> = points
        .iter()
        .map(|p| (p.x, p.y))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|(x, y)| Point::new(x, y))
        .collect();
    let mut out = BTreeSet::new();
    for &a in &pts {
        for &b in &pts {
            if a == b {
                continue;
            }
            let ok = pts.iter().all(|&p| {
                let c = cross(a, b, p);
                if c < 0 {
                    return false;
                }
                if c == 0 {
                    let dot = (p.x - a.x) as i128 * (b.x - a.x) as i128 + (p.y - a.y) as i128 * (b.y - a.y) as i128;
                    let len = (b.x - a.x) as i128 * (b.x - a.x) as i128 + (b.y - a.y) as i128 * (b.y - a.y) as i128;
                    return (0..=len).contains(&dot);
                }
                true
            });
            if ok {
                out.insert((a.x, a.y));
                out.insert((b.x, b.y));
            }
        }
    }
    out
}

/// Straightforward point-in-convex-polygon by sign agreement.
pub fn inside_convex_oracle(vertices: &[Point], p: Point) -> bool {
    let n = vertices.len();
    (0..n).all(|i| cross(vertices[i], vertices[(i + 1) % n], p) >= 0)
}

/// mAP / mAR recomputed from raw counts with plain loops.
pub fn recount_oracle(cells: &[(String, String, u64, u64, u64)]) -> (Option<f64>, Option<f64>) {
    let mut classes: Vec<&str> = cells.iter().map(|c| c.1.as_str()).filter(|c| *c != "background").collect();
    classes.sort();
    classes.dedup();
    let mut ps = Vec::new();
    let mut rs = Vec::new();
    for class in classes {
        let (mut psum, mut pn, mut rsum, mut rn) = (0.0, 0usize, 0.0, 0usize);
        for (_, c, predicted, truth, correct) in cells {
            if c != class {
                continue;
            }
            if *predicted > 0 {
                psum += *correct as f64 / *predicted as f64;
                pn += 1;
            }
            if *truth > 0 {
                rsum += *correct as f64 / *truth as f64;
                rn += 1;
            }
        }
        if pn > 0 {
            ps.push(psum / pn as f64);
        }
        if rn > 0 {
            rs.push(rsum / rn as f64);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    (mean(&ps), mean(&rs))
}

pub fn cells_from_counts(cells: &[(String, String, u64, u64, u64)]) -> Vec<EvalCell> {
    cells
        .iter()
        .map(|(image, class, p, t, c)| EvalCell {
            image_id: image.clone(),
            class_id: class.clone(),
            score: annoprop::evaluation::PixelScore::from_counts(*p, *t, *c),
        })
        .collect()
}

/// Random model with a random scaler and a random batch.
pub fn random_model<R: Rng>(rng: &mut R) -> (SoftmaxModel<f64>, Vec<Example<f64>>) {
    let k = rng.gen_range(2..=5);
    let d = rng.gen_range(2..=8);
    let roster = (0..k).map(|i| format!("c{i}")).collect();
    let weights = (0..k * (d + 1)).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let scaler = FeatureScaler {
        mean: (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        inv_std: (0..d).map(|_| rng.gen_range(0.5..2.0)).collect(),
    };
    let model = SoftmaxModel::from_parts(roster, d, weights, scaler, TrainingMeta::default()).unwrap();
    let batch = (0..rng.gen_range(1..=6))
        .map(|_| Example {
            features: FeatureVector::from_values((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            label: rng.gen_range(0..k),
        })
        .collect();
    (model, batch)
}

/// Largest relative error between the analytic gradient and central
/// differences of the loss at step `h`.
pub fn gradient_check(model: &SoftmaxModel<f64>, batch: &[Example<f64>], h: f64) -> f64 {
    let analytic = model.gradient_of_loss(batch).unwrap();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = model.clone();
        plus.weights_mut()[i] += h;
        let mut minus = model.clone();
        minus.weights_mut()[i] -= h;
        let numeric = (plus.loss(batch).unwrap() - minus.loss(batch).unwrap()) / (2.0 * h);
        let scale = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / scale);
    }
    worst
}

/// Scene template of the synthetic benchmark.
pub fn benchmark_template() -> SceneSpec {
    SceneSpec {
        width: 1024,
        height: 768,
        class_mix: uniform_class_mix(),
        annotation_completeness: 1.0,
        instances: (3, 5),
        instance_size: (360, 460),
        ..SceneSpec::default()
    }
}

/// Dataset settings of the synthetic benchmark.
pub fn benchmark_dataset(seed: u64) -> DatasetConfig {
    DatasetConfig {
        min_instances: 10,
        augment_per_patch: 10,
        seed,
        ..DatasetConfig::default()
    }
}

pub fn random_window<R: Rng>(rng: &mut R, classes: &[&str], threshold_floor: f64) -> WindowClassification {
    let x0 = rng.gen_range(0..40u32) * 8;
    let y0 = rng.gen_range(0..40u32) * 8;
    let w = rng.gen_range(1..12u32) * 8;
    let h = rng.gen_range(1..12u32) * 8;
    let class = classes[rng.gen_range(0..classes.len())];
    WindowClassification {
        rect: Rect { x0, y0, x1: x0 + w, y1: y0 + h },
        class_id: class.to_owned(),
        confidence: rng.gen_range(threshold_floor..=1.0),
        proposable: class != "background",
    }
}
