use serde::{Deserialize, Serialize};
use unirank::domain::{validate_context, Context, CountryCode, EntityId, TaskKind, UserId};

use crate::error::ServeError;

pub const DEFAULT_K: usize = 10;
pub const MAX_K: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_id: Option<UserId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    pub country: CountryCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_entity_id: Option<EntityId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

impl RankRequest {
    pub fn new(country: CountryCode) -> Self {
        RankRequest { task: None, user_id: None, query: None, country, source_entity_id: None, k: None }
    }

    pub fn k(&self) -> Result<usize, ServeError> {
        match self.k.unwrap_or(DEFAULT_K) {
            k @ 1..=MAX_K => Ok(k),
            k => Err(ServeError::InvalidRequest(format!("k must be in [1, {MAX_K}], got {k}"))),
        }
    }

    /// The validated context this request ranks for.
    pub fn to_context(&self) -> Result<Context, ServeError> {
        let ctx = Context {
            user_id: self.user_id.clone(),
            query: self.query.clone(),
            country: self.country,
            source_entity_id: self.source_entity_id.clone(),
            task: infer_task(self)?,
        };
        Ok(validate_context(ctx)?)
    }
}

/// An explicit task wins; otherwise a non-blank query means search, a source
/// entity means more-like-this and a bare user means pre-query.
pub fn infer_task(req: &RankRequest) -> Result<TaskKind, ServeError> {
    if let Some(task) = req.task {
        return Ok(task);
    }
    if req.query.as_deref().is_some_and(|q| !q.trim().is_empty()) {
        Ok(TaskKind::QuerySearch)
    } else if req.source_entity_id.is_some() {
        Ok(TaskKind::MoreLikeThis)
    } else if req.user_id.is_some() {
        Ok(TaskKind::PreQuery)
    } else {
        Err(ServeError::Unroutable)
    }
}
