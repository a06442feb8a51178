//! A single contextual ranker for query search, more-like-this and pre-query
//! recommendations.

pub mod datagen;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod features;
pub mod model;
pub mod personalization;
pub mod ranker;
pub mod training;

pub use error::{Error, Result};
