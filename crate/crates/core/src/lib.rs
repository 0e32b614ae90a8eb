//! Coarse-to-fine point cloud registration with hybrid geometric/image
//! attention, dustbin Sinkhorn matching and local-to-global pose selection.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the `*64` aliases
//! below name the double-precision instantiations used by the CLI.

pub mod attention;
pub mod correspondence;
pub mod embedding;
pub mod error;
pub mod estimation;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod matching;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use correspondence::{Correspondence, CorrespondenceSet, Level};
pub use error::{Error, Result};
pub use geometry::metrics::MetricsReport;
pub use geometry::{apply_transform, transform_errors, PointCloud, RigidTransform, SuperpointSet};
pub use pipeline::{register, PipelineConfig, RunReport};
pub use rng::SceneRng;
pub use scalar::Real;
pub use tensor::{matmul, softmax_rows, svd3, Matrix, ProjectionSet};

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type PointCloud64 = PointCloud<f64>;
pub type PointCloud32 = PointCloud<f32>;
pub type RigidTransform64 = RigidTransform<f64>;
pub type RigidTransform32 = RigidTransform<f32>;
pub type SuperpointSet64 = SuperpointSet<f64>;
pub type CorrespondenceSet64 = CorrespondenceSet<f64>;
