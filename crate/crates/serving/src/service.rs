use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use unirank::domain::{Catalog, Context, RankedList, ScoredItem};
use unirank::personalization::PersonalizationMode;
use unirank::ranker::RankingModel;

use crate::cache::{CacheKey, CachedList, ResultCache};
use crate::error::ServeError;
use crate::index::{CandidateIndex, MAX_CANDIDATES};
use crate::request::RankRequest;
use crate::stats::{Stats, StatsSnapshot};

#[derive(Debug, Clone, PartialEq)]
pub struct ServeConfig {
    pub max_candidates: usize,
    pub cache_size: usize,
    pub cache_ttl: Duration,
    /// When set, only checkpoints trained for this mode are accepted.
    pub mode: Option<PersonalizationMode>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig { max_candidates: MAX_CANDIDATES, cache_size: 10_000, cache_ttl: Duration::from_secs(300), mode: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResponse {
    pub items: Vec<ScoredItem>,
    pub model_version: String,
    pub cache_hit: bool,
    pub latency_ms: f64,
}

impl RankResponse {
    pub fn ranked_list(&self) -> RankedList {
        RankedList { items: self.items.clone(), model_version: self.model_version.clone(), cache_hit: self.cache_hit }
    }
}

/// Shared state behind every request handler.
pub struct Ranker {
    catalog: Arc<Catalog>,
    index: CandidateIndex,
    snapshot: RwLock<Option<Arc<RankingModel>>>,
    cache: ResultCache,
    stats: Stats,
    config: ServeConfig,
}

impl Ranker {
    pub fn new(catalog: Catalog, config: ServeConfig) -> Self {
        Ranker {
            index: CandidateIndex::build(&catalog),
            catalog: Arc::new(catalog),
            snapshot: RwLock::new(None),
            cache: ResultCache::new(config.cache_size, config.cache_ttl),
            stats: Stats::default(),
            config,
        }
    }

    pub fn with_model(catalog: Catalog, config: ServeConfig, model: RankingModel) -> Result<Self, ServeError> {
        let ranker = Ranker::new(catalog, config);
        ranker.install(model)?;
        Ok(ranker)
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn config(&self) -> &ServeConfig {
        &self.config
    }

    pub fn snapshot(&self) -> Option<Arc<RankingModel>> {
        self.snapshot.read().clone()
    }

    pub fn model_version(&self) -> Option<String> {
        self.snapshot().map(|m| m.version().to_owned())
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    pub fn cache_lookups(&self) -> u64 {
        self.stats.cache_lookups()
    }

    pub fn stats(&self) -> StatsSnapshot {
        let model = self.snapshot();
        self.stats.snapshot(
            model.as_ref().map(|m| m.version().to_owned()),
            model.as_ref().map(|m| m.mode().map_or_else(|| "BASE".to_owned(), |p| p.as_str().to_owned())),
            model.as_ref().is_some_and(|m| m.is_cacheable()),
        )
    }

    /// Replaces the live model. The new checkpoint must match the live
    /// feature schema; on any error the old model keeps serving.
    pub fn install(&self, model: RankingModel) -> Result<String, ServeError> {
        if let Some(want) = self.config.mode {
            if model.mode() != Some(want) {
                return Err(ServeError::InvalidCheckpoint(format!(
                    "checkpoint mode {} does not match serving mode {want}",
                    model.mode().map_or("BASE", |m| m.as_str())
                )));
            }
        }
        let mut live = self.snapshot.write();
        if let Some(current) = live.as_ref() {
            let (expected, found) = (current.schema().hash(), model.schema().hash());
            if expected != found {
                return Err(ServeError::SchemaMismatch { expected, found });
            }
        }
        let version = model.version().to_owned();
        *live = Some(Arc::new(model));
        Ok(version)
    }

    pub fn swap_model(&self, dir: &Path) -> Result<String, ServeError> {
        let model = RankingModel::load(dir).map_err(|e| match e {
            unirank::Error::SchemaMismatch { expected, found } => ServeError::SchemaMismatch { expected, found },
            other => ServeError::InvalidCheckpoint(other.to_string()),
        })?;
        self.install(model)
    }

    /// Cache key for a prepared context, or `None` when the live mode lets
    /// scores depend on who is asking.
    fn cache_key(model: &RankingModel, prepared: &Context) -> Option<CacheKey> {
        if !model.is_cacheable() {
            return None;
        }
        let personalizer = model.personalizer.as_ref()?;
        let cluster = match personalizer.mode {
            PersonalizationMode::Cluster => Some(personalizer.clusters.as_ref()?.cluster_of(prepared.user_id.as_ref())),
            _ => None,
        };
        Some(CacheKey::new(
            prepared.task,
            prepared.query.as_deref(),
            prepared.country,
            prepared.source_entity_id.as_ref(),
            cluster,
            model.version(),
        ))
    }

    /// Every candidate scored and sorted, ignoring the cache.
    pub fn score_all(&self, model: &RankingModel, prepared: &Context) -> Result<Vec<ScoredItem>, ServeError> {
        let items = self
            .index
            .candidates(prepared, self.config.max_candidates)
            .into_iter()
            .map(|id| {
                let score = model.params.score(&model.bundle(prepared, &id, &self.catalog)?)?;
                Ok(ScoredItem { entity_id: id, score })
            })
            .collect::<Result<Vec<_>, unirank::Error>>()?;
        Ok(RankedList::from_scores(items, usize::MAX, model.version().to_owned()).items)
    }

    pub fn rank(&self, req: &RankRequest) -> Result<RankResponse, ServeError> {
        let out = self.rank_inner(req);
        if out.is_err() {
            self.stats.record_error();
        }
        out
    }

    fn rank_inner(&self, req: &RankRequest) -> Result<RankResponse, ServeError> {
        let start = Instant::now();
        let model = self.snapshot().ok_or(ServeError::NoModel)?;
        let k = req.k()?;
        let ctx = req.to_context()?;
        let prepared = model.prepare_context(&ctx, &self.catalog)?;
        let key = Self::cache_key(&model, &prepared);
        let (list, hit): (CachedList, bool) = match &key {
            Some(key) => match self.cache.get(key) {
                Some(list) => (list, true),
                None => {
                    let list = Arc::new(self.score_all(&model, &prepared)?);
                    self.cache.put(key.clone(), list.clone());
                    (list, false)
                }
            },
            None => (Arc::new(self.score_all(&model, &prepared)?), false),
        };
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        self.stats.record(key.is_some(), hit, latency_ms);
        Ok(RankResponse {
            items: list.iter().take(k).cloned().collect(),
            model_version: model.version().to_owned(),
            cache_hit: hit,
            latency_ms,
        })
    }

    /// The response `rank` would give with an empty cache.
    pub fn rank_fresh(&self, req: &RankRequest) -> Result<RankResponse, ServeError> {
        let model = self.snapshot().ok_or(ServeError::NoModel)?;
        let prepared = model.prepare_context(&req.to_context()?, &self.catalog)?;
        let items = self.score_all(&model, &prepared)?.into_iter().take(req.k()?).collect();
        Ok(RankResponse { items, model_version: model.version().to_owned(), cache_hit: false, latency_ms: 0.0 })
    }
}
