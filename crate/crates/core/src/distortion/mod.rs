//! Seeded image degradations: level sampling, the distortion catalog,
//! random composites and fixed evaluation profiles.

mod catalog;
mod config;
mod jpeg;
mod ops;
mod pipeline;
mod profile;
mod sampler;

pub use catalog::{DistortionKind, DistortionSpec, DistortionTables, Family};
pub use config::DistortionConfig;
pub use jpeg::jpeg_compress;
pub use ops::Distortion;
pub use pipeline::{apply_distortion, compose_fixed_level, compose_pipeline, distort, DistortionPipeline, KRange};
pub use profile::{EvalProfile, ProfileKind};
pub use sampler::LevelSampler;
