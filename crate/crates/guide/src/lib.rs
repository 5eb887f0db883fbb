//! The book's chapters, compiled as rustdoc so every fenced Rust block in
//! `book/src/*.md` runs under `cargo test -p guide --doc`. A failing
//! snippet fails the build, which keeps the narrative and the library in
//! lockstep.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod chapter_1_introduction {}

#[doc = include_str!("../../../book/src/synthetic-faces.md")]
pub mod chapter_2_synthetic_faces {}

#[doc = include_str!("../../../book/src/structural-similarity.md")]
pub mod chapter_3_structural_similarity {}

#[doc = include_str!("../../../book/src/gaze-geometry.md")]
pub mod chapter_4_gaze_geometry {}

#[doc = include_str!("../../../book/src/composite-loss.md")]
pub mod chapter_5_composite_loss {}

#[doc = include_str!("../../../book/src/autoencoder.md")]
pub mod chapter_6_autoencoder {}

#[doc = include_str!("../../../book/src/training-conditions.md")]
pub mod chapter_7_training_conditions {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod chapter_8_evaluation {}

#[doc = include_str!("../../../book/src/command-line.md")]
pub mod chapter_9_command_line {}
