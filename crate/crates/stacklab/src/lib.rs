//! Block-tower stability laboratory.
//!
//! The pipeline runs end to end on a desk: procedurally generate cuboid
//! tower scenes, simulate them with a deterministic fixed-step rigid-body
//! engine to label stability, render binary foreground masks, train a small
//! convolutional classifier on those masks, inspect it with class activation
//! maps, and use it to plan stable block placements. An independent
//! quasi-static equilibrium oracle cross-checks the dynamic labels.
//!
//! Everything is seeded: a scene, a simulation trace, a dataset, a trained
//! model, and a placement report are all pure functions of their inputs.

pub mod cli;
pub mod dataset;
pub mod geometry;
pub mod imaging;
pub mod learning;
pub mod physics;
pub mod planning;
pub mod scenegen;
pub mod seeds;
pub mod stability;
