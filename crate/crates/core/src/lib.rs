//! Motion-blur-aware dense RGB SLAM on a 3D Gaussian map.
//!
//! The library models each input frame as the average of sharp renders taken
//! along a continuous camera trajectory inside the exposure window. Tracking
//! recovers per-frame sub-trajectories and exposure against the current map,
//! a flow-driven factor graph maintains keyframe poses and dense disparities,
//! and mapping optimizes the Gaussian map against the blurry observations so
//! that the map itself stays sharp.
//!
//! Module map:
//! - [`geom`]: quaternions, poses, sub-frame trajectories, camera models,
//!   trajectory alignment and error metrics.
//! - [`img`]: small float image containers plus PNG/PFM I/O.
//! - [`quality`]: PSNR and differentiable SSIM kernels.
//! - [`gaussians`]: the Gaussian map, proxy depth fusion, deformation and
//!   adaptive density control.
//! - [`render`]: the differentiable CPU rasterizer (forward + backward).
//! - [`blur`]: exposure model and virtual-view averaging.
//! - [`track`]: frame-to-model sub-frame tracking and exposure-gap search.
//! - [`graph`]: flow-driven factor graph (bundle adjustment, disparity and
//!   scale/shift optimization, loop closure).
//! - [`mapping`]: keyframe window management and map optimization.
//! - [`synth`]: synthetic scene and blurry sequence generation.
//! - [`dataset`]: on-disk dataset layout plus TUM-style ingestion.
//! - [`config`]: TOML run configuration.
//! - [`metrics`]: run evaluation and reports.
//! - [`pipeline`]: full SLAM orchestration used by the CLI.

pub mod blur;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gaussians;
pub mod geom;
pub mod graph;
pub mod img;
pub mod mapping;
pub mod metrics;
pub mod pipeline;
pub mod quality;
pub mod render;
pub mod synth;
pub mod track;

pub use error::{Error, Result};
