//! revoxf: a differentiable voxel radiance field engine for few-shot scene
//! reconstruction from 3-4 posed images.
//!
//! The pipeline: render color and depth from a dense voxel grid, warp input
//! views to pseudo-novel poses guided by rendered depth, split the warps
//! into reliable and unreliable regions, and train with color supervision
//! on reliable pixels, relative depth ordering on unreliable ones, and
//! reliability-aware voxel smoothing.

pub mod data;
pub mod geometry;
pub mod img;
pub mod losses;
pub mod metrics;
pub mod render;
pub mod train;
pub mod voxel;
pub mod warp;
