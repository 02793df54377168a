//! Core algorithms for explainable semantic navigation over aerial rasters.
//!
//! The pipeline runs in four stages that share one raster model and one
//! per-pixel feature extractor:
//!
//! - [`frugal`]: per-pixel classification trained only on labeled pixels.
//! - [`fewshot`]: new-class segmentation from K masked support examples.
//! - [`irl`]: maximum-entropy inverse RL turning route demonstrations into
//!   traversability cost maps.
//! - [`planner`]: grid routing over cost maps with per-class cost attribution.
//!
//! All randomness flows through [`rng::SplitMix64`].

pub mod features;
pub mod mlp;
pub mod raster;
pub mod rng;
pub mod fewshot;
pub mod frugal;
pub mod irl;
pub mod planner;
pub mod synthetic;
