//! Multinomial logistic regression over texture features, trained with
//! mini-batch SGD on mean cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{featurize, FeatureVector, FEATURE_DIM};
use super::{ClassDistribution, PatchClassifier};
use crate::error::{Error, Result};
use crate::imaging::Raster;
use crate::num::{softmax_into, Scalar};

/// One labelled feature vector; `label` indexes the model roster.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<F> {
    pub features: FeatureVector<F>,
    pub label: usize,
}

/// Per-feature affine standardisation applied before the linear layer.
///
/// Fitted once on the training set; histogram features have very different
/// scales across blocks and the fixed learning rate would otherwise barely
/// move the rarer bins.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureScaler<F> {
    pub mean: Vec<F>,
    pub inv_std: Vec<F>,
}

impl<F: Scalar> FeatureScaler<F> {
    pub fn identity(dim: usize) -> Self {
        FeatureScaler {
            mean: vec![F::zero(); dim],
            inv_std: vec![F::one(); dim],
        }
    }

    /// Mean/std over `examples`; constant features keep unit scale.
    pub fn fit(examples: &[Example<F>], dim: usize) -> Self {
        if examples.is_empty() {
            return Self::identity(dim);
        }
        let n = F::of_usize(examples.len());
        let mut mean = vec![F::zero(); dim];
        for ex in examples {
            for (m, &v) in mean.iter_mut().zip(ex.features.values()) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![F::zero(); dim];
        for ex in examples {
            for ((s, &v), &m) in var.iter_mut().zip(ex.features.values()).zip(&mean) {
                *s = *s + (v - m) * (v - m);
            }
        }
        let floor = F::of(1e-6);
        let inv_std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > floor {
                    F::one() / sd
                } else {
                    F::one()
                }
            })
            .collect();
        FeatureScaler { mean, inv_std }
    }

    fn apply_into(&self, x: &[F], out: &mut [F]) {
        for (((o, &v), &m), &s) in out.iter_mut().zip(x).zip(&self.mean).zip(&self.inv_std) {
            *o = (v - m) * s;
        }
    }
}

/// Hyper-parameters recorded with a trained model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: u32,
    pub batch_size: u32,
    pub learning_rate: f64,
}

impl Default for TrainingMeta {
    fn default() -> Self {
        TrainingMeta {
            seed: 0,
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.001,
        }
    }
}

/// `K x (D + 1)` weight matrix, bias in the last column, rows aligned with
/// the class roster.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxModel<F> {
    roster: Vec<String>,
    dim: usize,
    weights: Vec<F>,
    scaler: FeatureScaler<F>,
    meta: TrainingMeta,
}

impl<F: Scalar> SoftmaxModel<F> {
    /// All-zero weights with an identity scaler.
    pub fn zeros(roster: Vec<String>, dim: usize) -> Result<Self> {
        Self::from_parts(
            roster,
            dim,
            Vec::new(),
            FeatureScaler::identity(dim),
            TrainingMeta {
                epochs: 0,
                ..TrainingMeta::default()
            },
        )
    }

    /// Assembles a model; an empty `weights` vector means zero weights.
    pub fn from_parts(
        roster: Vec<String>,
        dim: usize,
        weights: Vec<F>,
        scaler: FeatureScaler<F>,
        meta: TrainingMeta,
    ) -> Result<Self> {
        let k = roster.len();
        if k < 2 {
            return Err(Error::Config(format!("a classifier needs at least 2 classes, got {k}")));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = roster.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(Error::Config(format!("duplicate class `{dup}` in roster")));
        }
        let weights = if weights.is_empty() {
            vec![F::zero(); k * (dim + 1)]
        } else {
            weights
        };
        if weights.len() != k * (dim + 1) {
            return Err(Error::Incompatible(format!(
                "weight matrix has {} entries, expected {k}x{}",
                weights.len(),
                dim + 1
            )));
        }
        if scaler.mean.len() != dim || scaler.inv_std.len() != dim {
            return Err(Error::Incompatible("scaler length differs from feature dimension".into()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Validation("non-finite weight".into()));
        }
        Ok(SoftmaxModel {
            roster,
            dim,
            weights,
            scaler,
            meta,
        })
    }

    pub fn roster(&self) -> &[String] {
        &self.roster
    }

    pub fn num_classes(&self) -> usize {
        self.roster.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row-major `K x (D + 1)` weights.
    pub fn weights(&self) -> &[F] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [F] {
        &mut self.weights
    }

    pub fn scaler(&self) -> &FeatureScaler<F> {
        &self.scaler
    }

    pub fn meta(&self) -> &TrainingMeta {
        &self.meta
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.roster.iter().position(|c| c == name)
    }

    fn check_dim(&self, features: &FeatureVector<F>) -> Result<()> {
        if features.len() != self.dim {
            return Err(Error::Incompatible(format!(
                "model expects {} features, got {}",
                self.dim,
                features.len()
            )));
        }
        Ok(())
    }

    fn logits_into(&self, scaled: &[F], logits: &mut [F]) {
        let stride = self.dim + 1;
        for (k, l) in logits.iter_mut().enumerate() {
            let row = &self.weights[k * stride..(k + 1) * stride];
            let dot = row[..self.dim]
                .iter()
                .zip(scaled)
                .fold(F::zero(), |acc, (&w, &x)| acc + w * x);
            *l = dot + row[self.dim];
        }
    }

    /// Class probabilities for an already-extracted feature vector.
    pub fn probabilities(&self, features: &FeatureVector<F>) -> Result<Vec<F>> {
        self.check_dim(features)?;
        let mut scaled = vec![F::zero(); self.dim];
        self.scaler.apply_into(features.values(), &mut scaled);
        let mut logits = vec![F::zero(); self.num_classes()];
        self.logits_into(&scaled, &mut logits);
        let mut probs = vec![F::zero(); self.num_classes()];
        softmax_into(&logits, &mut probs);
        Ok(probs)
    }

    pub fn predict_features(&self, features: &FeatureVector<F>) -> Result<ClassDistribution> {
        let probs = self.probabilities(features)?;
        Ok(ClassDistribution::from_probabilities(
            probs.into_iter().map(Scalar::as_f64).collect(),
        ))
    }

    /// Mean cross-entropy over `batch`.
    pub fn loss(&self, batch: &[Example<F>]) -> Result<F> {
        if batch.is_empty() {
            return Err(Error::Validation("loss over an empty batch".into()));
        }
        let mut total = F::zero();
        for ex in batch {
            let probs = self.probabilities(&ex.features)?;
            let p = probs
                .get(ex.label)
                .copied()
                .ok_or_else(|| Error::Validation(format!("label {} out of range", ex.label)))?;
            total = total - p.max(F::min_positive_value()).ln();
        }
        Ok(total / F::of_usize(batch.len()))
    }

    /// Analytic gradient of the mean cross-entropy with respect to the
    /// weights, laid out like [`SoftmaxModel::weights`].
    pub fn gradient_of_loss(&self, batch: &[Example<F>]) -> Result<Vec<F>> {
        if batch.is_empty() {
            return Err(Error::Validation("gradient over an empty batch".into()));
        }
        let k = self.num_classes();
        let stride = self.dim + 1;
        let mut grad = vec![F::zero(); k * stride];
        let mut scaled = vec![F::zero(); self.dim];
        let mut logits = vec![F::zero(); k];
        let mut probs = vec![F::zero(); k];
        for ex in batch {
            self.check_dim(&ex.features)?;
            if ex.label >= k {
                return Err(Error::Validation(format!("label {} out of range", ex.label)));
            }
            self.scaler.apply_into(ex.features.values(), &mut scaled);
            self.logits_into(&scaled, &mut logits);
            softmax_into(&logits, &mut probs);
            for c in 0..k {
                let delta = probs[c] - if c == ex.label { F::one() } else { F::zero() };
                if delta == F::zero() {
                    continue;
                }
                let row = &mut grad[c * stride..(c + 1) * stride];
                for (g, &x) in row[..self.dim].iter_mut().zip(&scaled) {
                    *g = *g + delta * x;
                }
                row[self.dim] = row[self.dim] + delta;
            }
        }
        let n = F::of_usize(batch.len());
        grad.iter_mut().for_each(|g| *g = *g / n);
        Ok(grad)
    }
}

impl<F: Scalar> PatchClassifier for SoftmaxModel<F> {
    fn roster(&self) -> &[String] {
        &self.roster
    }

    fn predict(&self, patch: &Raster) -> Result<ClassDistribution> {
        if self.dim != FEATURE_DIM {
            return Err(Error::Incompatible(format!(
                "model built for {} features, featurizer yields {FEATURE_DIM}",
                self.dim
            )));
        }
        self.predict_features(&featurize::<F>(patch)?)
    }
}

/// Outcome of [`train`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full training-set loss before the first epoch and after each epoch.
    pub epoch_losses: Vec<f64>,
    pub final_train_loss: f64,
    pub validation_loss: Option<f64>,
    /// Per roster class; `None` when the class was never predicted.
    pub validation_precision: Vec<Option<f64>>,
    pub validation_accuracy: Option<f64>,
}

/// Fits a zero-initialised model by mini-batch SGD.
///
/// The batch order is a fresh ChaCha8 shuffle per epoch from `meta.seed`, so
/// the result is bit-identical for identical inputs.
pub fn train<F: Scalar>(
    roster: Vec<String>,
    train_set: &[Example<F>],
    validation: &[Example<F>],
    meta: TrainingMeta,
) -> Result<(SoftmaxModel<F>, TrainReport)> {
    let k = roster.len();
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {k}")));
    }
    let mut per_class = vec![0usize; k];
    for ex in train_set {
        *per_class
            .get_mut(ex.label)
            .ok_or_else(|| Error::Config(format!("label {} outside roster", ex.label)))? += 1;
    }
    if let Some(c) = per_class.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!(
            "class `{}` has no training examples",
            roster[c]
        )));
    }
    if meta.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !(meta.learning_rate.is_finite() && meta.learning_rate > 0.0) {
        return Err(Error::Config("learning rate must be positive".into()));
    }
    let dim = train_set[0].features.len();
    if train_set.iter().chain(validation).any(|e| e.features.len() != dim) {
        return Err(Error::Config("examples have inconsistent feature dimensions".into()));
    }

    let scaler = FeatureScaler::fit(train_set, dim);
    let mut model = SoftmaxModel::from_parts(roster, dim, Vec::new(), scaler, meta)?;
    let lr = F::of(meta.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(meta.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epoch_losses = vec![model.loss(train_set)?.as_f64()];
    let mut batch = Vec::with_capacity(meta.batch_size as usize);

    for _ in 0..meta.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(meta.batch_size as usize) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i].clone()));
            let grad = model.gradient_of_loss(&batch)?;
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                *w = *w - lr * *g;
            }
        }
        epoch_losses.push(model.loss(train_set)?.as_f64());
    }

    let final_train_loss = *epoch_losses.last().expect("initial loss recorded");
    let report = if validation.is_empty() {
        TrainReport {
            epoch_losses,
            final_train_loss,
            validation_loss: None,
            validation_precision: vec![None; k],
            validation_accuracy: None,
        }
    } else {
        let mut predicted = Vec::with_capacity(validation.len());
        for ex in validation {
            predicted.push(model.predict_features(&ex.features)?.top_class);
        }
        let truth: Vec<usize> = validation.iter().map(|e| e.label).collect();
        let metrics = crate::evaluation::ConfusionMetrics::from_labels(&truth, &predicted, k)?;
        TrainReport {
            epoch_losses,
            final_train_loss,
            validation_loss: Some(model.loss(validation)?.as_f64()),
            validation_precision: metrics.per_class_precision.clone(),
            validation_accuracy: Some(metrics.accuracy),
        }
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roster(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    fn ex(values: &[f64], label: usize) -> Example<f64> {
        Example {
            features: FeatureVector::from_values(values.to_vec()),
            label,
        }
    }

    #[test]
    fn zero_model_is_uniform_with_log_k_loss() {
        let m = SoftmaxModel::<f64>::zeros(roster(4), 3).unwrap();
        let batch = [ex(&[0.3, -1.0, 2.0], 2), ex(&[1.0, 1.0, 1.0], 0)];
        let d = m.predict_features(&batch[0].features).unwrap();
        assert!(d.probabilities.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!((d.confidence - 0.25).abs() < 1e-15);
        assert_eq!(d.top_class, 0);
        assert!((m.loss(&batch).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn epochs_zero_returns_initial_model() {
        let data = vec![ex(&[1.0, 0.0], 0), ex(&[0.0, 1.0], 1)];
        let meta = TrainingMeta {
            epochs: 0,
            ..TrainingMeta::default()
        };
        let (m, report) = train(roster(2), &data, &[], meta).unwrap();
        assert!(m.weights().iter().all(|&w| w == 0.0));
        assert_eq!(report.epoch_losses.len(), 1);
        assert!((report.final_train_loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_class_has_zero_gradient_row() {
        let mut m = SoftmaxModel::<f64>::zeros(roster(3), 2).unwrap();
        // Bias of class 1 so large that p(1) rounds to exactly 1.
        m.weights_mut()[3 + 2] = 800.0;
        let g = m.gradient_of_loss(&[ex(&[0.5, -0.5], 1)]).unwrap();
        assert!(g[3..6].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_batch_gives_identical_gradient() {
        let mut m = SoftmaxModel::<f64>::zeros(roster(3), 2).unwrap();
        m.weights_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, w)| *w = (i as f64 * 0.37).sin());
        let batch = vec![ex(&[0.2, 0.9], 0), ex(&[-0.4, 0.1], 2)];
        let doubled: Vec<_> = batch.iter().chain(&batch).cloned().collect();
        let a = m.gradient_of_loss(&batch).unwrap();
        let b = m.gradient_of_loss(&doubled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_splits_are_rejected() {
        assert!(matches!(
            train(roster(1), &[ex(&[1.0], 0)], &[], TrainingMeta::default()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            train(roster(2), &[ex(&[1.0], 0)], &[], TrainingMeta::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dimension_mismatch_is_incompatible() {
        let m = SoftmaxModel::<f64>::zeros(roster(2), 5).unwrap();
        assert!(matches!(
            m.probabilities(&FeatureVector::from_values(vec![0.0; 4])),
            Err(Error::Incompatible(_))
        ));
        let patch = Raster::filled("p", 224, 224, [0, 0, 0]).unwrap();
        assert!(matches!(m.predict(&patch), Err(Error::Incompatible(_))));
    }

    #[test]
    fn works_in_f32() {
        let data = vec![
            Example { features: FeatureVector::from_values(vec![1.0f32, 0.0]), label: 0 },
            Example { features: FeatureVector::from_values(vec![0.0f32, 1.0]), label: 1 },
        ];
        let meta = TrainingMeta { epochs: 200, batch_size: 2, learning_rate: 0.1, seed: 1 };
        let (m, _) = train(roster(2), &data, &[], meta).unwrap();
        assert_eq!(m.predict_features(&data[1].features).unwrap().top_class, 1);
    }
}
