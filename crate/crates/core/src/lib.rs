//! Desk-scale multi-teacher feature distillation for open-vocabulary 3D
//! segmentation.
//!
//! The pipeline generates synthetic labelled scenes, renders per-view 2D
//! feature maps from a set of heterogeneous synthetic teachers, fuses them
//! into per-point supervision targets, trains a coordinate-based student
//! with one projection head per teacher under an uncertainty-weighted
//! objective, and evaluates segmentation quality by embedding similarity
//! against a class vocabulary.
//!
//! Heavy inner loops (teacher rendering, multi-view fusion, student
//! forward/backward, k-means assignment) run data-parallel when the
//! `parallel` feature is enabled. Parallel and serial execution produce
//! bit-identical results: reductions use fixed chunk boundaries and
//! order-independent combining, and all randomness is counter-seeded per
//! work item. [`exec::force_serial`] switches to serial execution at
//! runtime.

pub mod config;
pub mod error;
pub mod evalsuite;
pub mod exec;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod objective;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod student;
pub mod teachers;
pub mod trainer;

pub use error::{Error, Result};
