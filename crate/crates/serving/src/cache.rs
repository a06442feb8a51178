//! Cross-request result cache.
//!
//! Keys are built only from the request-independent parts of an imputed
//! context, an optional cluster id and the model version, so a cached list
//! can be shared by every caller in the same cluster.

use std::num::NonZeroUsize;
use std::sync::Arc;
use std::time::{Duration, Instant};

use lru::LruCache;
use parking_lot::Mutex;
use unirank::domain::{CountryCode, EntityId, ScoredItem, TaskKind};
use unirank::features::normalize_query;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub task: TaskKind,
    pub query: String,
    pub country: CountryCode,
    pub source_entity_id: Option<EntityId>,
    pub cluster_id: Option<u32>,
    pub model_version: String,
}

impl CacheKey {
    pub fn new(
        task: TaskKind,
        query: Option<&str>,
        country: CountryCode,
        source_entity_id: Option<&EntityId>,
        cluster_id: Option<u32>,
        model_version: &str,
    ) -> Self {
        CacheKey {
            task,
            query: query.map(|q| normalize_query(q).join(" ")).unwrap_or_default(),
            country,
            source_entity_id: source_entity_id.cloned(),
            cluster_id,
            model_version: model_version.to_owned(),
        }
    }
}

pub type CachedList = Arc<Vec<ScoredItem>>;

/// Bounded LRU with a per-entry time to live.
pub struct ResultCache {
    entries: Mutex<LruCache<CacheKey, (Instant, CachedList)>>,
    ttl: Duration,
}

impl ResultCache {
    pub fn new(capacity: usize, ttl: Duration) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("nonzero");
        ResultCache { entries: Mutex::new(LruCache::new(cap)), ttl }
    }

    pub fn get(&self, key: &CacheKey) -> Option<CachedList> {
        let mut entries = self.entries.lock();
        match entries.get(key) {
            Some((at, list)) if at.elapsed() < self.ttl => Some(list.clone()),
            Some(_) => {
                entries.pop(key);
                None
            }
            None => None,
        }
    }

    pub fn put(&self, key: CacheKey, list: CachedList) {
        self.entries.lock().put(key, (Instant::now(), list));
    }

    pub fn len(&self) -> usize {
        self.entries.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        self.entries.lock().clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(q: &str, version: &str) -> CacheKey {
        CacheKey::new(TaskKind::QuerySearch, Some(q), CountryCode::new("US").unwrap(), None, Some(3), version)
    }

    fn list(score: f64) -> CachedList {
        Arc::new(vec![ScoredItem { entity_id: EntityId::new("e1").unwrap(), score }])
    }

    #[test]
    fn query_is_normalized_in_the_key() {
        assert_eq!(key("Dark  Matter!", "v1"), key("dark matter", "v1"));
        assert_ne!(key("dark", "v1"), key("dark", "v2"));
    }

    #[test]
    fn lru_eviction() {
        let cache = ResultCache::new(2, Duration::from_secs(60));
        cache.put(key("a", "v"), list(1.0));
        cache.put(key("b", "v"), list(2.0));
        assert!(cache.get(&key("a", "v")).is_some());
        cache.put(key("c", "v"), list(3.0));
        assert!(cache.get(&key("b", "v")).is_none());
        assert!(cache.get(&key("a", "v")).is_some());
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn entries_expire() {
        let cache = ResultCache::new(8, Duration::ZERO);
        cache.put(key("a", "v"), list(1.0));
        assert!(cache.get(&key("a", "v")).is_none());
        assert!(cache.is_empty());
    }
}
