//! Detection and tracking of moving objects (DATMO) from LiDAR point
//! clouds, built around dense optical flow on bird's-eye-view grids.
//!
//! Pipeline stages:
//!
//! 1. [`bev`]: point cloud -> 2.5D grayscale grid, ground removal.
//! 2. [`flow`]: Farneback dense optical flow between consecutive grids.
//! 3. [`vfield`]: per-cell velocity/yaw-rate field, rigid-body continuity
//!    and temporal propagation masks, ego-motion compensation.
//! 4. [`cluster`]: moving cells -> per-object measurements.
//! 5. [`track`]: EKF multi-object tracker with GNN association and
//!    M-of-N lifecycle.
//!
//! [`sim`] generates synthetic LiDAR scenarios with exact ground truth,
//! [`eval`] computes the evaluation metrics, [`kitti`] ingests KITTI
//! tracking sequences, and [`pipeline`] wires everything together for the
//! `datmo` CLI.

pub mod assign;
pub mod bev;
pub mod cluster;
pub mod error;
pub mod eval;
pub mod flow;
pub mod grid;
pub mod io;
pub mod kitti;
pub mod pipeline;
pub mod sim;
pub mod track;
pub mod vfield;

pub use error::{Error, Result};
