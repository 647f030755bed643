//! Incremental ingestion, classification and search for scholarly articles.
//!
//! Articles land in a content-addressed [`store`], are staged by [`ingest`],
//! processed in batches by workers of the [`sched`] master (clean, classify
//! with a [`classifier`] model, add to the [`index`], archive), and then
//! served through search and aggregations. [`pipeline`] wires these together
//! and [`bench`] measures how processing time scales.

pub mod bench;
pub mod classifier;
pub mod error;
pub mod features;
pub mod index;
pub mod ingest;
pub mod num;
pub mod pipeline;
pub mod sched;
pub mod store;

pub use error::{Error, Result};
pub use num::Scalar;

/// Model with `f64` weights, the type used by the pipeline.
pub type Model = classifier::ModelArtifact<f64>;
pub type Features = features::FeatureVector<f64>;
pub type ModelPrediction = classifier::Prediction<f64>;
