//! Land-use mapping from geotagged ground-level image records.
//!
//! The crate is organised as a pipeline:
//!
//! - [`taxonomy`]: the 3-level land-use class hierarchy and roll-up maps.
//! - [`geodata`]: parcel polygons, containment, metric boundary distance,
//!   and dilated image-to-parcel assignment.
//! - [`dataset`]: image manifests, feature sidecars and mixed-domain batching.
//! - [`classifier`]: per-stream linear softmax heads trained with SGD.
//! - [`adaptive`]: confidence-gated second-stage fine-tuning.
//! - [`fusion`]: late fusion of stream scores and per-parcel majority votes.
//! - [`evaluation`]: image accuracy and parcel-level mapping metrics.
//! - [`synth`]: synthetic Gaussian-blob datasets and parcel grids.

pub mod adaptive;
pub mod classifier;
pub mod dataset;
mod error;
pub mod evaluation;
pub mod fusion;
pub mod geodata;
pub mod synth;
pub mod taxonomy;

pub use adaptive::{adaptive_finetune, discard_probability, gate, GateConfig, GateDecision, GateMode};
pub use classifier::{LossGrad, Schedule, ScoreVector, SoftmaxModel, TrainOutcome};
pub use dataset::{Batch, Domain, ImageRecord, StratifiedSampler};
pub use error::{Error, Result};
pub use evaluation::{ClassMetrics, Counting, MappingOptions, MappingReport};
pub use fusion::{FusionWeights, ParcelPrediction};
pub use geodata::{Assignment, Containment, GeoPoint, Parcel, ParcelHit};
pub use taxonomy::{Level, Taxonomy};
