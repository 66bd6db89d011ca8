//! Paddy growth stage classification from 7-band multispectral reflectance.
//!
//! The library covers the full pipeline: spectral feature extraction
//! (EVI, NDVI, ARVI, LSWI on top of the raw bands), a classifier family
//! (one-vs-rest logistic regression, its fast-dropout variant, and small
//! dense/convolutional networks with composable dropout and batch norm),
//! the evaluation protocol (class balancing, stratified splitting,
//! confusion matrices, versioned reports), a phenology module that detects
//! flooding, heading, and harvest from EVI/LSWI time series, and a
//! phenology-driven synthetic data generator. The `paddy-stages` binary
//! exposes all of it on the command line.

pub mod cli;
pub mod error;
pub mod eval;
pub mod fastdropout;
pub mod features;
pub mod ingest;
pub mod lr;
pub mod model;
pub mod nn;
pub mod phenology;
pub mod stage;

pub use error::{Error, Result};
pub use stage::{Stage, ALL_STAGES, STAGE_COUNT};
