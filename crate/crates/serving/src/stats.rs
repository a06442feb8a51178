use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

const WINDOW: usize = 10_000;

/// Request counters and a sliding window of recent latencies.
#[derive(Default)]
pub struct Stats {
    requests: AtomicU64,
    errors: AtomicU64,
    cache_lookups: AtomicU64,
    cache_hits: AtomicU64,
    latencies_ms: Mutex<VecDeque<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub requests: u64,
    pub errors: u64,
    pub cache_lookups: u64,
    pub cache_hits: u64,
    pub cache_hit_rate: f64,
    pub p50_latency_ms: f64,
    pub p95_latency_ms: f64,
    pub model_version: Option<String>,
    pub mode: Option<String>,
    pub cacheable: bool,
}

impl Stats {
    pub fn record(&self, looked_up: bool, hit: bool, latency_ms: f64) {
        self.requests.fetch_add(1, Ordering::Relaxed);
        if looked_up {
            self.cache_lookups.fetch_add(1, Ordering::Relaxed);
        }
        if hit {
            self.cache_hits.fetch_add(1, Ordering::Relaxed);
        }
        let mut lat = self.latencies_ms.lock();
        if lat.len() == WINDOW {
            lat.pop_front();
        }
        lat.push_back(latency_ms);
    }

    pub fn record_error(&self) {
        self.errors.fetch_add(1, Ordering::Relaxed);
    }

    pub fn cache_lookups(&self) -> u64 {
        self.cache_lookups.load(Ordering::Relaxed)
    }

    pub fn snapshot(&self, model_version: Option<String>, mode: Option<String>, cacheable: bool) -> StatsSnapshot {
        let lookups = self.cache_lookups.load(Ordering::Relaxed);
        let hits = self.cache_hits.load(Ordering::Relaxed);
        let lat: Vec<f64> = self.latencies_ms.lock().iter().copied().collect();
        StatsSnapshot {
            requests: self.requests.load(Ordering::Relaxed),
            errors: self.errors.load(Ordering::Relaxed),
            cache_lookups: lookups,
            cache_hits: hits,
            cache_hit_rate: if lookups == 0 { 0.0 } else { hits as f64 / lookups as f64 },
            p50_latency_ms: percentile(&lat, 50.0),
            p95_latency_ms: percentile(&lat, 95.0),
            model_version,
            mode,
            cacheable,
        }
    }
}

/// Nearest-rank percentile; 0 for an empty sample.
pub fn percentile(samples: &[f64], p: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}
