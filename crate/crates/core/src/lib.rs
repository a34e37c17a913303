//! Machine-assisted annotation proposals for texture-dominated image
//! collections.
//!
//! A patch classifier is slid over each image; confident windows are merged
//! per class into convex-hull proposals that annotators accept or decline.
//! The same scores rank unlabelled images so annotators open the most
//! promising ones first.
//!
//! The numeric core is generic over [`num::Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`.

pub mod classifier;
pub mod dataprep;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod imaging;
pub mod num;
pub mod pipeline;
pub mod ranking;
pub mod segmenter;
pub mod store;
pub mod synthgen;

pub use error::{Error, Result};

/// Reference classifier in double precision.
pub type Model = classifier::SoftmaxModel<f64>;
pub type Features = classifier::FeatureVector<f64>;
pub type TrainingExample = classifier::Example<f64>;
pub type Scaler = classifier::FeatureScaler<f64>;
