//! Synthetic skin-condition imagery from structured prompts, and the
//! training and evaluation machinery to measure what it buys a classifier.
//!
//! Pipeline stages map onto modules:
//! [`prompt`] → [`generation`] → [`data`] → [`training`] → [`evaluation`],
//! orchestrated by [`experiment`].

pub mod data;
pub mod evaluation;
pub mod experiment;
pub mod generation;
pub mod manifest;
pub mod nn;
pub mod prompt;
pub mod seed;
pub mod training;

pub use manifest::{DatasetManifest, ImageRecord, Source};
pub use prompt::{ConditionSpec, FitzpatrickGrade, PromptInstantiation, PromptSlots, SkinTone};
