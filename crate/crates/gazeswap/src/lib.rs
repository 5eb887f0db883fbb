//! Desk-scale face-swap training lab with gaze-aware reconstruction losses.
//!
//! The crate renders a procedural face dataset with exact gaze ground truth,
//! trains a LIAE-style autoencoder under five loss conditions (structural
//! similarity, pixel error, eyes/mouth priority, and a gaze-angle-scaled
//! eye-region term), swaps identities, and evaluates reconstructed gaze with
//! a mixed-effects comparison across conditions.
//!
//! The `book/` directory at the workspace root walks through each subsystem;
//! its code snippets run as doctests of the `guide` crate.

pub mod cli;
pub mod dataset;
pub mod faces;
pub mod gaze;
pub mod losses;
pub mod model;
pub mod plot;
pub mod stats;
pub mod synth;
pub mod trainer;

pub use faces::{FaceImage, GazeAngles, MaskSet};
pub use losses::{ConditionId, LossBreakdown, LossWeights, SsimConfig};
pub use synth::{FrameSample, SyntheticIdentity};
