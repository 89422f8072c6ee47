//! Self-supervised continuous 3D occupancy fields at desk scale.
//!
//! The pipeline: procedural scenes are ray-cast into LiDAR sweeps and
//! multi-view depth rasters; rays become balanced occupancy query labels; a
//! calibration-free transformer maps the rasters to a bird's-eye-view feature
//! grid decoded point-wise into occupancy probabilities; renderers turn the
//! field into depths, point clouds and voxel grids; the evaluation suite
//! scores them against the analytic scene oracle.

pub mod diffcore;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod model;
pub mod rendering;
pub mod rng;
pub mod simulator;
pub mod training;
pub mod supervision;
