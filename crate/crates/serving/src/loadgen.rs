//! Closed-loop HTTP load generator for `/rank`.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unirank::domain::{Catalog, UserProfile};
use unirank::features::normalize_query;

use crate::request::RankRequest;
use crate::stats::percentile;

/// A seeded mix of keystroke prefixes, more-like-this pivots and pre-query
/// visits, in roughly 6:3:1 proportion.
pub fn sample_requests(catalog: &Catalog, users: &[UserProfile], n: usize, seed: u64) -> Vec<RankRequest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entities = catalog.entities();
    if entities.is_empty() || users.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let user = users.choose(&mut rng).expect("users");
            let mut req = RankRequest::new(user.country);
            req.user_id = Some(user.user_id.clone());
            let entity = entities.choose(&mut rng).expect("entities");
            match rng.random_range(0..10) {
                0..6 => {
                    let tokens = normalize_query(&entity.display_name);
                    let tok = tokens.first().map_or("a", String::as_str);
                    let cut = rng.random_range(1..=tok.chars().count().max(1));
                    req.query = Some(tok.chars().take(cut).collect());
                }
                6..9 => req.source_entity_id = Some(entity.id.clone()),
                _ => {}
            }
            req
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub requests: usize,
    pub errors: usize,
    pub cache_hits: usize,
    pub clients: usize,
    pub wall_secs: f64,
    pub throughput_rps: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    pub server_p95_ms: f64,
}

/// Sends every request once, split round-robin over `clients` concurrent
/// connections, and measures end-to-end latency per request.
pub async fn run(base_url: &str, requests: Vec<RankRequest>, clients: usize) -> reqwest::Result<LoadReport> {
    let client = reqwest::Client::new();
    let url = Arc::new(format!("{}/rank", base_url.trim_end_matches('/')));
    let requests = Arc::new(requests);
    let clients = clients.max(1);
    let start = Instant::now();
    let mut tasks = Vec::with_capacity(clients);
    for c in 0..clients {
        let (client, url, requests) = (client.clone(), url.clone(), requests.clone());
        tasks.push(tokio::spawn(async move {
            let mut out = Vec::new();
            for req in requests.iter().skip(c).step_by(clients) {
                let t = Instant::now();
                let resp = client.post(url.as_str()).json(req).send().await?;
                let ok = resp.status().is_success();
                let body: serde_json::Value = resp.json().await?;
                let ms = t.elapsed().as_secs_f64() * 1e3;
                let server_ms = body.get("latency_ms").and_then(serde_json::Value::as_f64).unwrap_or(0.0);
                let hit = body.get("cache_hit").and_then(serde_json::Value::as_bool).unwrap_or(false);
                out.push((ok, hit, ms, server_ms));
            }
            Ok::<_, reqwest::Error>(out)
        }));
    }
    let mut samples = Vec::new();
    for t in tasks {
        samples.extend(t.await.expect("load client panicked")?);
    }
    let wall = start.elapsed().as_secs_f64();
    let lat: Vec<f64> = samples.iter().map(|s| s.2).collect();
    let server: Vec<f64> = samples.iter().filter(|s| s.0).map(|s| s.3).collect();
    Ok(LoadReport {
        requests: samples.len(),
        errors: samples.iter().filter(|s| !s.0).count(),
        cache_hits: samples.iter().filter(|s| s.1).count(),
        clients,
        wall_secs: wall,
        throughput_rps: samples.len() as f64 / wall.max(1e-9),
        p50_ms: percentile(&lat, 50.0),
        p95_ms: percentile(&lat, 95.0),
        max_ms: lat.iter().copied().fold(0.0, f64::max),
        server_p95_ms: percentile(&server, 95.0),
    })
}
