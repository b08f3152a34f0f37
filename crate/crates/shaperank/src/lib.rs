//! Fine-grained 3D shape retrieval over point-cloud databases.
//!
//! Given a partial, noisy query scan and a database of clean model clouds,
//! the engine retrieves the geometrically most similar model in two steps:
//!
//! 1. **Feature-based ranking** — exact k-nearest-neighbor search over
//!    global shape descriptors narrows the database to a candidate
//!    neighborhood ([`index`], [`descriptor`]).
//! 2. **Geometry-based re-ranking** — a robust point-set distance (MSCD,
//!    the mean unsquared nearest-neighbor distance from scan to model)
//!    re-orders the candidates by actual shape agreement ([`metrics`],
//!    [`pipeline`]).
//!
//! [`eval`] implements the retrieval quality measures (top-k accuracy,
//! top-1 geometric distance, ground-truth ranking, category ratio) and
//! [`synthetic`] manufactures desk-scale benchmark datasets with known
//! ground truth.
//!
//! All geometry is generic over the floating-point scalar via [`Scalar`];
//! the concrete aliases below fix the default `f64` working precision used
//! by the CLI and all file formats.

pub mod descriptor;
pub mod eval;
mod kdtree;
pub mod metrics;
pub mod pipeline;
pub mod pointcloud;
mod scalar;
pub mod synthetic;

pub mod index;

pub use scalar::Scalar;

pub use descriptor::{FeatureSet, FeatureSource, FeatureVector, DEFAULT_D2_BINS, DEFAULT_D2_PAIRS};
pub use eval::{EvalReport, GroundTruth};
pub use index::{CandidateSet, FeatureIndex, ScoreKind};
pub use metrics::{DistanceVector, Metric, SpatialIndex};
pub use pipeline::{RetrievalConfig, RetrievalResult};
pub use pointcloud::{CloudFormat, Database, PointCloud};
pub use synthetic::SyntheticSpec;

/// Default working resolution: clouds are resampled down to this many
/// points before normalization and retrieval.
pub const DEFAULT_RESOLUTION: usize = 2048;

/// Default minimum point count; smaller clouds are considered too poor to
/// retrieve against and are filtered out.
pub const DEFAULT_MIN_POINTS: usize = 64;

/// Point cloud at the default `f64` working precision.
pub type PointCloud64 = PointCloud<f64>;
/// Database at the default `f64` working precision.
pub type Database64 = Database<f64>;
/// Feature vector at the default `f64` working precision.
pub type FeatureVector64 = FeatureVector<f64>;
/// Feature set at the default `f64` working precision.
pub type FeatureSet64 = FeatureSet<f64>;
/// Feature index at the default `f64` working precision.
pub type FeatureIndex64 = FeatureIndex<f64>;
/// Spatial index at the default `f64` working precision.
pub type SpatialIndex64 = SpatialIndex<f64>;
/// Candidate set at the default `f64` working precision.
pub type CandidateSet64 = CandidateSet<f64>;
/// Retrieval result at the default `f64` working precision.
pub type RetrievalResult64 = RetrievalResult<f64>;

/// Single-precision aliases for memory-constrained embedding.
pub type PointCloud32 = PointCloud<f32>;
pub type FeatureVector32 = FeatureVector<f32>;
pub type FeatureIndex32 = FeatureIndex<f32>;
