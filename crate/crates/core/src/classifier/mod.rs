//! Patch classification.
//!
//! [`PatchClassifier`] is the seam the segmenter and ranking code drive; the
//! reference implementation is [`SoftmaxModel`] over [`featurize`]d texture
//! descriptors.

mod features;
mod io;
mod softmax;

pub use features::{
    featurize, uniform_lbp_table, FeatureVector, COLOR_BINS, COLOR_BLOCKS, FEATURE_DIM, LBP_BINS,
    LBP_BLOCK, ORIENTATION_BINS, ORIENTATION_BLOCK,
};
pub use io::{load_model, model_version, save_model, MODEL_FORMAT_VERSION};
pub use softmax::{train, Example, FeatureScaler, SoftmaxModel, TrainReport, TrainingMeta};

use crate::error::Result;
use crate::imaging::Raster;

/// Name of the catch-all class that absorbs non-target content.
pub const BACKGROUND: &str = "background";

/// Output of a classifier for one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    pub probabilities: Vec<f64>,
    pub top_class: usize,
    pub confidence: f64,
}

impl ClassDistribution {
    /// Picks the most probable class; ties go to the lowest roster index.
    pub fn from_probabilities(probabilities: Vec<f64>) -> Self {
        let mut top_class = 0;
        for (i, &p) in probabilities.iter().enumerate() {
            if p > probabilities[top_class] {
                top_class = i;
            }
        }
        let confidence = probabilities.get(top_class).copied().unwrap_or(0.0);
        ClassDistribution {
            probabilities,
            top_class,
            confidence,
        }
    }
}

/// Anything that maps a 224x224 patch to a distribution over a fixed roster.
pub trait PatchClassifier: Sync {
    fn roster(&self) -> &[String];

    fn predict(&self, patch: &Raster) -> Result<ClassDistribution>;
}

impl<C: PatchClassifier + ?Sized> PatchClassifier for &C {
    fn roster(&self) -> &[String] {
        (**self).roster()
    }

    fn predict(&self, patch: &Raster) -> Result<ClassDistribution> {
        (**self).predict(patch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_lowest_index() {
        let d = ClassDistribution::from_probabilities(vec![0.2, 0.4, 0.4]);
        assert_eq!(d.top_class, 1);
        assert_eq!(d.confidence, 0.4);
    }
}
