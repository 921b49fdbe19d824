//! Coarse-to-fine rigid registration of outdoor point clouds with
//! hierarchical soft matching.

pub mod cloud;
pub mod coarse;
pub mod config;
pub mod error;
pub mod eval;
pub mod fine;
pub mod geom;
pub mod io;
pub mod learned;
pub mod neural;
pub mod pipeline;
pub mod pyramid;
pub mod sampling;
pub mod train;

pub use cloud::{Descriptors, PointCloud};
pub use coarse::CorrespondenceSet;
pub use config::{AblationFlags, LevelConfig, Mode, PipelineConfig};
pub use error::{Error, Result};
pub use eval::{BenchmarkReport, EvalThresholds};
pub use geom::{compose, weighted_kabsch, RigidTransform, WeightedCorrespondences};
pub use learned::Model;
pub use pipeline::{run_pipeline, Registration};
