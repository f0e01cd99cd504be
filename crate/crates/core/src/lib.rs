//! Saliency-guided teacher-student training on small image classifiers.
//!
//! A teacher is trained with ground-truth salience, then annotates a larger
//! split that has labels but no salience, using CAM or RISE. Students are
//! trained on those maps with the guided loss. Baselines, the
//! cross-architecture transfer matrix, and AUC reporting live in
//! [`pipeline`] and [`eval`].

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod io_util;
pub mod loss;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod saliency;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
