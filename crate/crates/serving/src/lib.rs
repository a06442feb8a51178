//! Low-latency ranking service over a hot-swappable unified ranker.

pub mod cache;
pub mod error;
pub mod http;
pub mod index;
pub mod loadgen;
pub mod request;
pub mod service;
pub mod stats;

pub use cache::{CacheKey, ResultCache};
pub use error::ServeError;
pub use index::CandidateIndex;
pub use request::{infer_task, RankRequest};
pub use service::{RankResponse, Ranker, ServeConfig};
pub use stats::StatsSnapshot;
