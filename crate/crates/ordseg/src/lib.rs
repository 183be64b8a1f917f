//! Ordinal semantic segmentation at desk scale.
//!
//! Dense labeling where the classes form a totally ordered set: losses that
//! push per-pixel distributions toward (quasi-)unimodal shapes, spatial
//! losses that charge ordinally distant classes for touching or overlapping
//! geometry, the matching evaluation metrics, a statistical comparison rule
//! for cross-validated runs, and a small fully self-contained training
//! harness on synthetic ordinal scenes.
//!
//! A narrative guide with runnable snippets lives in `book/`; its chapters
//! are also compiled as doctests (see [`guide`]).

pub mod autodiff;
pub mod distance;
pub mod error;
pub mod loss;
pub mod io;
pub mod metrics;
pub mod model;
pub mod stats;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
