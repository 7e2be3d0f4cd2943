//! Radar branch of a neural-rendering sensor simulator.
//!
//! Rays are cast over the radar field of view into an analytic scene field,
//! volume rendered into per-ray features and expected depths, and decoded into
//! either a thresholded point cloud or a Multi-Bernoulli random finite set.
//! Decoders are trained with assignment-based set losses and evaluated with
//! Chamfer, EMD and GOSPA.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cloud;
pub mod decoder;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod matching;
pub mod rendering;
pub mod rfs;
pub mod rng;
pub mod scene;
pub mod synth;

pub use cloud::{PointAttributes, PointCloud};
pub use decoder::{
    Decoder, DecoderConfig, DecoderVariant, DecoderWeights, FitResult, TrainConfig,
};
pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentReport};
pub use geometry::{
    build_ray_grid, cartesian_to_spherical, spherical_to_cartesian, RadarConfig, Ray, RayBundle,
    SensorPose, Vec3,
};
pub use losses::{deterministic_loss, probabilistic_loss, LossReport, PredictionParams};
pub use matching::{chamfer, emd, gospa, solve_assignment, Assignment, CostMatrix, GospaParams};
pub use rendering::{render_bundle, render_ray, sample_ray, OpacityParams, RayRender, RenderParams};
pub use rfs::{AxisDensity, BernoulliComponent, DensityFamily, MultiBernoulli};
pub use scene::{Actor, Primitive, Scene, Shape};
