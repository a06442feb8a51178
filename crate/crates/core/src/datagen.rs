//! Synthetic world and engagement-log generator.
//!
//! A world is a catalog whose entities carry hidden attribute vectors, a user
//! population with hidden preference vectors, and a set of queries drawn from
//! display-name tokens. One [`GroundTruth`] drives all three tasks, so signal
//! learned on one task transfers to the others in a known way.
//!
//! Entity attributes are the normalized mean of per-token direction vectors
//! plus isotropic noise, which makes display-name tokens informative about
//! what an entity is. Queries and more-like-this sources therefore share a
//! token space with the catalog.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domain::{
    read_jsonl, write_jsonl, Catalog, Context, CountryCode, EngagementEvent, Entity, EntityId, EntityKind,
    TaskKind, UserId, UserProfile,
};
use crate::error::{Error, Result};
use crate::features::normalize_query;

/// Display-name vocabulary. Fixed so catalogs read the same across seeds.
pub const TOKEN_VOCAB: &[&str] = &[
    "stranger", "things", "dark", "crown", "witcher", "ozark", "narcos", "mindhunter", "squid", "game",
    "money", "heist", "lupin", "bridgerton", "queen", "gambit", "black", "mirror", "wednesday", "umbrella",
    "academy", "sex", "education", "cobra", "kai", "ginny", "georgia", "outer", "banks", "emily",
    "paris", "tiger", "king", "house", "cards", "orange", "new", "glow", "russian", "doll",
    "midnight", "mass", "haunting", "hill", "bly", "manor", "arcane", "castlevania", "love", "death",
    "robots", "blue", "eye", "samurai", "last", "kingdom", "vikings", "valhalla", "peaky", "blinders",
    "sherlock", "office", "friends", "breaking", "bad", "better", "call", "saul", "lost", "fire",
    "ice", "ocean", "mountain", "river", "storm", "shadow", "light", "city", "night", "day",
    "secret", "island", "wild", "space", "star", "moon", "sun", "planet", "ghost", "dragon",
    "wolf", "lion", "eagle", "red", "green", "silver", "golden", "iron", "steel", "glass",
    "heart", "mind", "soul", "dream", "rise", "fall", "war", "peace", "road", "bridge",
    "tower", "garden", "forest", "desert", "winter", "summer", "spring", "autumn", "chef", "table",
    "cook", "bake", "race", "drive", "speed", "rally", "quest", "legend", "hero", "villain",
    "spy", "agent", "detective", "crime", "murder", "mystery", "comedy", "stand", "up", "live",
    "world", "cup", "football", "tennis", "chess", "puzzle", "farm", "city", "builder", "tetris",
    "kids", "family", "school", "college", "music", "dance", "idol", "voice", "talent", "show",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_entities: usize,
    pub n_users: usize,
    pub n_queries: usize,
    pub attr_dim: usize,
    pub n_search: usize,
    pub n_mlt: usize,
    pub n_prequery: usize,
    /// Weight of the user-preference term in relevance.
    pub alpha: f64,
    /// Label noise temperature.
    pub tau: f64,
    /// Label-0 impressions logged alongside every positive.
    pub neg_ratio: usize,
    /// Candidates shown per request; impressions and negatives come from it.
    pub pool_size: usize,
    /// Target positive rate among primary impressions.
    pub positive_rate: f64,
    /// Scale of the per-entity noise added to token directions.
    pub attr_noise: f64,
    /// Share of searches issued from an entity page; that entity is logged as
    /// the source but plays no part in search relevance.
    pub search_source_rate: f64,
    /// Taste clusters shared by tokens, entities and users.
    pub n_genres: usize,
    /// Spread of token and user vectors around their genre center.
    pub genre_spread: f64,
    pub seed: u64,
    pub countries: Vec<CountryCode>,
}

impl Default for WorldConfig {
    /// The default imbalanced-volume world: 60% search, 30% more-like-this,
    /// 10% pre-query.
    fn default() -> Self {
        WorldConfig {
            n_entities: 400,
            n_users: 150,
            n_queries: 300,
            attr_dim: 8,
            n_search: 30_000,
            n_mlt: 15_000,
            n_prequery: 5_000,
            alpha: 0.5,
            tau: 0.1,
            neg_ratio: 4,
            pool_size: 30,
            positive_rate: 0.25,
            attr_noise: 0.4,
            search_source_rate: 0.3,
            n_genres: 4,
            genre_spread: 0.3,
            seed: 7,
            countries: ["US", "GB", "DE", "BR"].iter().map(|c| CountryCode::new(c).unwrap()).collect(),
        }
    }
}

impl WorldConfig {
    /// The curated demo world used by the console and CI.
    pub fn demo() -> Self {
        WorldConfig {
            n_entities: 2000,
            n_users: 500,
            n_queries: 500,
            n_search: 120_000,
            n_mlt: 60_000,
            n_prequery: 20_000,
            ..WorldConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_owned()));
        if self.n_entities == 0 || self.n_users == 0 || self.n_queries == 0 || self.attr_dim == 0 {
            return bad("entity, user, query counts and attr_dim must be > 0");
        }
        if self.n_search == 0 || self.n_mlt == 0 || self.n_prequery == 0 {
            return bad("per-task event counts must be > 0");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be > 0");
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return bad("positive_rate must lie in (0, 1)");
        }
        if self.pool_size < self.neg_ratio + 2 {
            return bad("pool_size must exceed neg_ratio + 1");
        }
        if self.n_entities < self.pool_size + 1 {
            return bad("n_entities must exceed pool_size");
        }
        if self.countries.is_empty() {
            return bad("at least one country is required");
        }
        if self.attr_noise < 0.0 || self.genre_spread < 0.0 {
            return bad("attr_noise and genre_spread must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.search_source_rate) {
            return bad("search_source_rate must lie in [0, 1]");
        }
        if self.n_genres == 0 {
            return bad("n_genres must be > 0");
        }
        Ok(())
    }

    pub fn task_count(&self, task: TaskKind) -> usize {
        match task {
            TaskKind::QuerySearch => self.n_search,
            TaskKind::MoreLikeThis => self.n_mlt,
            TaskKind::PreQuery => self.n_prequery,
        }
    }
}

/// Hidden preferences and query topics behind the generated labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub alpha: f64,
    pub user_prefs: BTreeMap<UserId, Vec<f64>>,
    pub query_topics: BTreeMap<String, Vec<f64>>,
}

impl GroundTruth {
    pub fn user_affinity(&self, user: Option<&UserId>, target: &Entity) -> f64 {
        user.and_then(|u| self.user_prefs.get(u))
            .map_or(0.0, |prefs| dot(prefs, &target.latent_attrs).max(0.0))
    }

    /// The task-specific, user-independent part of relevance.
    pub fn context_relevance(&self, ctx: &Context, target: &Entity, catalog: &Catalog) -> f64 {
        match ctx.task {
            TaskKind::QuerySearch => {
                let tokens = normalize_query(ctx.query.as_deref().unwrap_or(""));
                if tokens.is_empty() {
                    return 0.0;
                }
                let name: BTreeSet<String> = normalize_query(&target.display_name).into_iter().collect();
                let overlap = tokens.iter().filter(|t| name.contains(*t)).count() as f64 / tokens.len() as f64;
                let topic = self
                    .query_topics
                    .get(&tokens.join(" "))
                    .map_or(0.0, |t| dot(t, &target.latent_attrs).max(0.0));
                0.5 * overlap + 0.5 * topic
            }
            TaskKind::MoreLikeThis => ctx
                .source_entity_id
                .as_ref()
                .and_then(|s| catalog.get(s))
                .map_or(0.0, |src| dot(&src.latent_attrs, &target.latent_attrs).max(0.0)),
            TaskKind::PreQuery => self.user_affinity(ctx.user_id.as_ref(), target),
        }
    }

    /// Relevance in [0, 1]: `(1 - alpha) * context + alpha * user`.
    pub fn relevance(&self, ctx: &Context, target: &Entity, catalog: &Catalog) -> f64 {
        let s_user = self.user_affinity(ctx.user_id.as_ref(), target);
        let s_ctx = self.context_relevance(ctx, target, catalog);
        (1.0 - self.alpha) * s_ctx + self.alpha * s_user
    }
}

/// One line of `groundtruth.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundTruthRecord {
    Params { alpha: f64 },
    User { id: UserId, vector: Vec<f64> },
    Query { query: String, vector: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub catalog: Catalog,
    pub users: Vec<UserProfile>,
    pub truth: GroundTruth,
}

impl World {
    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.truth.query_topics.keys().map(String::as_str)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = dot(&v, &v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Independent RNG stream for one purpose of one seed.
fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

fn capitalize(token: &str) -> String {
    let mut chars = token.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let g = cfg.attr_dim;
    let mut rng = stream(cfg.seed, 1);

    let vocab: Vec<&str> = {
        let mut seen = BTreeSet::new();
        TOKEN_VOCAB.iter().copied().filter(|t| seen.insert(*t)).collect()
    };
    let spread = cfg.genre_spread / (g as f64).sqrt();
    let around = |center: &[f64], rng: &mut ChaCha8Rng| {
        let z = gaussian(rng, g);
        normalized(center.iter().zip(&z).map(|(c, z)| c + spread * z).collect())
    };
    let centers: Vec<Vec<f64>> = (0..cfg.n_genres).map(|_| normalized(gaussian(&mut rng, g))).collect();
    let mut token_genre: Vec<usize> = (0..vocab.len()).map(|t| t % cfg.n_genres).collect();
    token_genre.shuffle(&mut rng);
    let token_dirs: Vec<Vec<f64>> = token_genre.iter().map(|&k| around(&centers[k], &mut rng)).collect();
    let genre_tokens: Vec<Vec<usize>> =
        (0..cfg.n_genres).map(|k| (0..vocab.len()).filter(|&t| token_genre[t] == k).collect()).collect();

    let mut entities = Vec::with_capacity(cfg.n_entities);
    for i in 0..cfg.n_entities {
        let n_tokens = rng.random_range(1..=3);
        // Titles mostly use words of the entity's own genre.
        let genre = &genre_tokens[rng.random_range(0..cfg.n_genres)];
        let mut picks: Vec<usize> = Vec::with_capacity(n_tokens);
        while picks.len() < n_tokens {
            let t = if genre.is_empty() || rng.random_bool(0.2) {
                rng.random_range(0..vocab.len())
            } else {
                genre[rng.random_range(0..genre.len())]
            };
            if !picks.contains(&t) {
                picks.push(t);
            }
        }
        let mut mean = vec![0.0; g];
        for &t in &picks {
            mean.iter_mut().zip(&token_dirs[t]).for_each(|(m, d)| *m += d / n_tokens as f64);
        }
        let noise = gaussian(&mut rng, g);
        let scale = cfg.attr_noise / (g as f64).sqrt();
        let attrs = normalized(mean.iter().zip(&noise).map(|(m, z)| m + scale * z).collect());
        let display_name = picks.iter().map(|&t| capitalize(vocab[t])).collect::<Vec<_>>().join(" ");
        let mut countries: BTreeSet<CountryCode> =
            cfg.countries.iter().copied().filter(|_| rng.random_bool(0.6)).collect();
        if countries.is_empty() {
            countries.insert(cfg.countries[rng.random_range(0..cfg.countries.len())]);
        }
        let popularity = rng.sample::<f64, _>(StandardNormal).exp();
        let kind = if rng.random_bool(0.1) { EntityKind::Game } else { EntityKind::Video };
        entities.push(Entity {
            id: EntityId::new(format!("e{i:05}"))?,
            kind,
            display_name,
            countries,
            popularity,
            latent_attrs: attrs,
        });
    }
    let catalog = Catalog::new(entities)?;

    let mut users = Vec::with_capacity(cfg.n_users);
    let mut user_prefs = BTreeMap::new();
    for i in 0..cfg.n_users {
        let id = UserId::new(format!("u{i:04}"))?;
        let country = cfg.countries[rng.random_range(0..cfg.countries.len())];
        let genre = rng.random_range(0..cfg.n_genres);
        user_prefs.insert(id.clone(), around(&centers[genre], &mut rng));
        users.push(UserProfile { user_id: id, country });
    }

    let name_tokens: Vec<Vec<String>> =
        catalog.entities().iter().map(|e| normalize_query(&e.display_name)).collect();
    let mut query_topics = BTreeMap::new();
    let max_attempts = cfg.n_queries * 50;
    let mut attempts = 0;
    while query_topics.len() < cfg.n_queries && attempts < max_attempts {
        attempts += 1;
        let tokens = &name_tokens[rng.random_range(0..name_tokens.len())];
        let len = if tokens.len() >= 2 && rng.random_bool(0.5) { 2 } else { 1 };
        let start = rng.random_range(0..=tokens.len() - len);
        let query_tokens = &tokens[start..start + len];
        let query = query_tokens.join(" ");
        if query_topics.contains_key(&query) {
            continue;
        }
        let mut topic = vec![0.0; g];
        for (e, toks) in catalog.entities().iter().zip(&name_tokens) {
            if query_tokens.iter().all(|q| toks.contains(q)) {
                topic.iter_mut().zip(&e.latent_attrs).for_each(|(t, a)| *t += a);
            }
        }
        query_topics.insert(query, normalized(topic));
    }

    Ok(World {
        config: cfg.clone(),
        catalog,
        users,
        truth: GroundTruth { alpha: cfg.alpha, user_prefs, query_topics },
    })
}

/// A request before its label is decided.
struct Impression {
    context: Context,
    target: usize,
    /// Pool members other than the target, in random order, each with its
    /// relevance and its own uniform draw.
    others: Vec<(usize, f64, f64)>,
    relevance: f64,
    draw: f64,
}

struct Sampler<'a> {
    world: &'a World,
    by_country: HashMap<CountryCode, (Vec<usize>, WeightedIndex<f64>)>,
    name_tokens: Vec<BTreeSet<String>>,
    queries: Vec<&'a str>,
    query_weights: WeightedIndex<f64>,
}

impl<'a> Sampler<'a> {
    fn new(world: &'a World) -> Result<Self> {
        let mut by_country = HashMap::new();
        for &c in &world.config.countries {
            let members: Vec<usize> = world
                .catalog
                .entities()
                .iter()
                .enumerate()
                .filter(|(_, e)| e.countries.contains(&c))
                .map(|(i, _)| i)
                .collect();
            if members.len() <= world.config.pool_size {
                return Err(Error::InvalidConfig(format!(
                    "country {c} has {} entities, fewer than the pool size",
                    members.len()
                )));
            }
            let weights = WeightedIndex::new(members.iter().map(|&i| world.catalog.entities()[i].popularity))
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            by_country.insert(c, (members, weights));
        }
        let queries: Vec<&str> = world.queries().collect();
        // Zipf-like query frequencies.
        let query_weights = WeightedIndex::new((0..queries.len()).map(|r| 1.0 / (r as f64 + 1.0).powf(0.8)))
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let name_tokens = world
            .catalog
            .entities()
            .iter()
            .map(|e| normalize_query(&e.display_name).into_iter().collect())
            .collect();
        Ok(Sampler { world, by_country, name_tokens, queries, query_weights })
    }

    fn popular_in(&self, rng: &mut impl Rng, country: CountryCode) -> usize {
        let (members, weights) = &self.by_country[&country];
        members[weights.sample(rng)]
    }

    /// Fills `pool` up to the pool size with distinct popularity-weighted draws.
    fn fill_pool(&self, rng: &mut impl Rng, country: CountryCode, pool: &mut Vec<usize>, exclude: Option<usize>) {
        let size = self.world.config.pool_size;
        let mut seen: BTreeSet<usize> = pool.iter().copied().chain(exclude).collect();
        let (members, _) = &self.by_country[&country];
        let mut attempts = 0;
        while pool.len() < size {
            let e = if attempts < size * 20 {
                self.popular_in(rng, country)
            } else {
                members[rng.random_range(0..members.len())]
            };
            attempts += 1;
            if seen.insert(e) {
                pool.push(e);
            }
        }
    }

    fn impression(&self, rng: &mut impl Rng, task: TaskKind) -> Result<Impression> {
        let world = self.world;
        let user = &world.users[rng.random_range(0..world.users.len())];
        let country = user.country;
        let mut pool = Vec::with_capacity(world.config.pool_size);
        let context = match task {
            TaskKind::QuerySearch => {
                let query = self.queries[self.query_weights.sample(rng)];
                let tokens: Vec<&str> = query.split(' ').collect();
                let (members, _) = &self.by_country[&country];
                let mut matching: Vec<usize> = members
                    .iter()
                    .copied()
                    .filter(|&e| tokens.iter().any(|t| self.name_tokens[e].contains(*t)))
                    .collect();
                matching.shuffle(rng);
                matching.truncate(world.config.pool_size / 2);
                pool.extend(matching);
                self.fill_pool(rng, country, &mut pool, None);
                let mut ctx = Context::search(Some(user.user_id.clone()), query, country);
                if rng.random_bool(world.config.search_source_rate) {
                    let page = self.popular_in(rng, country);
                    ctx.source_entity_id = Some(world.catalog.entities()[page].id.clone());
                }
                ctx
            }
            TaskKind::MoreLikeThis => {
                let source = self.popular_in(rng, country);
                self.fill_pool(rng, country, &mut pool, Some(source));
                let source_id = world.catalog.entities()[source].id.clone();
                Context::more_like_this(Some(user.user_id.clone()), source_id, country)
            }
            TaskKind::PreQuery => {
                self.fill_pool(rng, country, &mut pool, None);
                Context::pre_query(user.user_id.clone(), country)
            }
        };
        pool.shuffle(rng);
        let target = pool[0];
        let entities = world.catalog.entities();
        let relevance = world.truth.relevance(&context, &entities[target], &world.catalog);
        let draw = rng.random::<f64>();
        let others = pool[1..]
            .iter()
            .map(|&e| (e, world.truth.relevance(&context, &entities[e], &world.catalog), rng.random::<f64>()))
            .collect();
        Ok(Impression { context, target, others, relevance, draw })
    }
}

/// Finds the logit offset that makes the expected positive rate hit `rate`.
fn calibrate_offset(relevances: &[f64], tau: f64, rate: f64) -> f64 {
    let expected = |b: f64| relevances.iter().map(|r| sigmoid(r / tau - b)).sum::<f64>() / relevances.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0 + 1.0 / tau);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected(mid) > rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Base timestamp for generated logs (seconds).
pub const LOG_EPOCH: i64 = 1_700_000_000;

#[derive(Debug, Clone)]
pub struct EventLog {
    pub events: Vec<EngagementEvent>,
    /// Logit offset applied before the Bernoulli draw.
    pub offset: f64,
    /// Positive rate among primary impressions.
    pub positive_rate: f64,
}

/// Generates the mixed-task log: one primary impression per request with a
/// Bernoulli label, plus `neg_ratio` label-0 pool members for each positive.
/// All rows of one request share a timestamp; timestamps never decrease.
pub fn generate_events(world: &World) -> Result<EventLog> {
    let cfg = &world.config;
    cfg.validate()?;
    let sampler = Sampler::new(world)?;

    let mut per_task: Vec<std::vec::IntoIter<Impression>> = Vec::new();
    for (i, task) in TaskKind::ALL.into_iter().enumerate() {
        let mut rng = stream(cfg.seed, 10 + i as u64);
        let imps = (0..cfg.task_count(task))
            .map(|_| sampler.impression(&mut rng, task))
            .collect::<Result<Vec<_>>>()?;
        per_task.push(imps.into_iter());
    }

    // Interleave the task streams in a seeded order.
    let mut schedule: Vec<usize> = TaskKind::ALL
        .iter()
        .enumerate()
        .flat_map(|(i, &t)| std::iter::repeat_n(i, cfg.task_count(t)))
        .collect();
    schedule.shuffle(&mut stream(cfg.seed, 20));
    let impressions: Vec<Impression> =
        schedule.into_iter().map(|i| per_task[i].next().expect("schedule matches counts")).collect();

    let relevances: Vec<f64> = impressions.iter().map(|imp| imp.relevance).collect();
    let offset = calibrate_offset(&relevances, cfg.tau, cfg.positive_rate);

    let entities = world.catalog.entities();
    let mut events = Vec::with_capacity(impressions.len() * (1 + cfg.neg_ratio / 3));
    let mut positives = 0usize;
    for (slot, imp) in impressions.into_iter().enumerate() {
        let timestamp = LOG_EPOCH + 10 * slot as i64;
        let label = u8::from(imp.draw < sigmoid(imp.relevance / cfg.tau - offset));
        events.push(EngagementEvent {
            context: imp.context.clone(),
            target_entity_id: entities[imp.target].id.clone(),
            label,
            timestamp,
        });
        if label == 1 {
            positives += 1;
            // Negatives are pool impressions whose own draw came out 0.
            let skipped = imp.others.iter().filter(|(_, r, u)| *u >= sigmoid(r / cfg.tau - offset));
            for &(neg, _, _) in skipped.take(cfg.neg_ratio) {
                events.push(EngagementEvent {
                    context: imp.context.clone(),
                    target_entity_id: entities[neg].id.clone(),
                    label: 0,
                    timestamp,
                });
            }
        }
    }
    let requests = relevances.len();
    Ok(EventLog { events, offset, positive_rate: positives as f64 / requests as f64 })
}

impl World {
    /// Writes `catalog.jsonl`, `users.jsonl` and `groundtruth.jsonl`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(dir.join("catalog.jsonl"), self.catalog.entities())?;
        write_jsonl(dir.join("users.jsonl"), &self.users)?;
        let mut records = vec![GroundTruthRecord::Params { alpha: self.truth.alpha }];
        records.extend(
            self.truth.user_prefs.iter().map(|(id, v)| GroundTruthRecord::User { id: id.clone(), vector: v.clone() }),
        );
        records.extend(
            self.truth
                .query_topics
                .iter()
                .map(|(q, v)| GroundTruthRecord::Query { query: q.clone(), vector: v.clone() }),
        );
        write_jsonl(dir.join("groundtruth.jsonl"), &records)?;
        std::fs::write(dir.join("world.json"), serde_json::to_vec_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let catalog = Catalog::new(read_jsonl(dir.join("catalog.jsonl"))?)?;
        let users = read_jsonl(dir.join("users.jsonl"))?;
        let mut truth = GroundTruth { alpha: 0.0, user_prefs: BTreeMap::new(), query_topics: BTreeMap::new() };
        for rec in read_jsonl::<GroundTruthRecord>(dir.join("groundtruth.jsonl"))? {
            match rec {
                GroundTruthRecord::Params { alpha } => truth.alpha = alpha,
                GroundTruthRecord::User { id, vector } => {
                    truth.user_prefs.insert(id, vector);
                }
                GroundTruthRecord::Query { query, vector } => {
                    truth.query_topics.insert(query, vector);
                }
            }
        }
        let config = serde_json::from_slice(&std::fs::read(dir.join("world.json"))?)?;
        Ok(World { config, catalog, users, truth })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            n_entities: 300,
            n_users: 60,
            n_queries: 80,
            n_search: 1200,
            n_mlt: 600,
            n_prequery: 200,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn same_seed_same_catalog_bytes() {
        let a = generate_world(&small()).unwrap();
        let b = generate_world(&small()).unwrap();
        let enc = |w: &World| serde_json::to_string(w.catalog.entities()).unwrap();
        assert_eq!(enc(&a), enc(&b));
        let ea = generate_events(&a).unwrap();
        let eb = generate_events(&b).unwrap();
        assert_eq!(ea.events, eb.events);
    }

    #[test]
    fn zero_entities_is_invalid() {
        let cfg = WorldConfig { n_entities: 0, ..small() };
        assert!(matches!(generate_world(&cfg), Err(Error::InvalidConfig(_))));
        let cfg = WorldConfig { alpha: 1.5, ..small() };
        assert!(matches!(generate_world(&cfg), Err(Error::InvalidConfig(_))));
        let cfg = WorldConfig { tau: 0.0, ..small() };
        assert!(matches!(generate_world(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn vectors_are_unit_norm_and_names_are_short() {
        let w = generate_world(&small()).unwrap();
        for e in w.catalog.entities() {
            assert!((dot(&e.latent_attrs, &e.latent_attrs) - 1.0).abs() < 1e-12);
            let n = e.display_name.split(' ').count();
            assert!((1..=3).contains(&n));
        }
        for v in w.truth.user_prefs.values().chain(w.truth.query_topics.values()) {
            assert!((dot(v, v) - 1.0).abs() < 1e-12);
        }
        assert_eq!(w.truth.query_topics.len(), 80);
    }

    #[test]
    fn queries_are_substrings_of_display_names() {
        let w = generate_world(&small()).unwrap();
        for q in w.queries() {
            let found = w.catalog.entities().iter().any(|e| {
                let toks = normalize_query(&e.display_name);
                let q: Vec<&str> = q.split(' ').collect();
                toks.windows(q.len()).any(|win| win.iter().zip(&q).all(|(a, b)| a == b))
            });
            assert!(found, "query {q} is not part of any name");
        }
    }

    #[test]
    fn orthogonal_prefs_give_zero_affinity() {
        let user = UserId::new("u").unwrap();
        let truth = GroundTruth {
            alpha: 0.5,
            user_prefs: [(user.clone(), vec![1.0, 0.0, 0.0, 0.0])].into_iter().collect(),
            query_topics: BTreeMap::new(),
        };
        let us = CountryCode::new("US").unwrap();
        for attrs in [[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.6, 0.8], [0.0, 0.0, 0.0, 1.0]] {
            let e = Entity {
                id: EntityId::new("e").unwrap(),
                kind: EntityKind::Video,
                display_name: "x".into(),
                countries: [us].into_iter().collect(),
                popularity: 1.0,
                latent_attrs: attrs.to_vec(),
            };
            assert_eq!(truth.user_affinity(Some(&user), &e), 0.0);
        }
    }

    #[test]
    fn alpha_zero_removes_user_signal_from_search_and_mlt() {
        let w = generate_world(&WorldConfig { alpha: 0.0, ..small() }).unwrap();
        let us = w.users[0].country;
        let q = w.queries().next().unwrap().to_owned();
        let src = w.catalog.entities()[0].id.clone();
        let u1 = Some(w.users[0].user_id.clone());
        let u2 = Some(w.users[1].user_id.clone());
        for target in w.catalog.entities() {
            for (a, b) in [
                (Context::search(u1.clone(), q.clone(), us), Context::search(u2.clone(), q.clone(), us)),
                (
                    Context::more_like_this(u1.clone(), src.clone(), us),
                    Context::more_like_this(u2.clone(), src.clone(), us),
                ),
            ] {
                assert_eq!(w.truth.relevance(&a, target, &w.catalog), w.truth.relevance(&b, target, &w.catalog));
            }
        }
    }

    #[test]
    fn exact_title_query_is_positive_in_the_sharp_limit() {
        let cfg = WorldConfig { alpha: 0.0, tau: 1e-4, n_search: 6000, ..small() };
        let w = generate_world(&cfg).unwrap();
        let log = generate_events(&w).unwrap();
        let mut hits = 0;
        let mut positives = 0;
        // Primary impressions are the first row of each timestamp.
        let mut last_ts = None;
        for ev in &log.events {
            if last_ts == Some(ev.timestamp) {
                continue;
            }
            last_ts = Some(ev.timestamp);
            if ev.context.task != TaskKind::QuerySearch {
                continue;
            }
            let target = w.catalog.get(&ev.target_entity_id).unwrap();
            let q = ev.context.query.as_deref().unwrap();
            if normalize_query(&target.display_name).join(" ") == q {
                hits += 1;
                positives += ev.label as usize;
            }
        }
        assert!(hits > 20, "too few exact-title impressions: {hits}");
        assert_eq!(positives, hits);
    }

    #[test]
    fn timestamps_are_monotone_and_tasks_mixed() {
        let w = generate_world(&small()).unwrap();
        let log = generate_events(&w).unwrap();
        assert!(log.events.windows(2).all(|p| p[0].timestamp <= p[1].timestamp));
        let mut counts = BTreeMap::new();
        let mut last_ts = None;
        for ev in &log.events {
            if last_ts != Some(ev.timestamp) {
                *counts.entry(ev.context.task).or_insert(0) += 1;
                last_ts = Some(ev.timestamp);
            }
        }
        assert_eq!(counts[&TaskKind::QuerySearch], 1200);
        assert_eq!(counts[&TaskKind::MoreLikeThis], 600);
        assert_eq!(counts[&TaskKind::PreQuery], 200);
        for ev in &log.events {
            assert!(w.catalog.get(&ev.target_entity_id).is_some());
            assert!(crate::domain::validate_context(ev.context.clone()).is_ok());
        }
    }

    #[test]
    fn every_positive_has_its_negatives() {
        let w = generate_world(&small()).unwrap();
        let log = generate_events(&w).unwrap();
        let mut by_ts: BTreeMap<i64, Vec<&EngagementEvent>> = BTreeMap::new();
        for ev in &log.events {
            by_ts.entry(ev.timestamp).or_default().push(ev);
        }
        for rows in by_ts.values() {
            let pos = rows.iter().filter(|e| e.label == 1).count();
            if pos == 1 {
                assert_eq!(rows.len(), 1 + w.config.neg_ratio);
                let ids: BTreeSet<_> = rows.iter().map(|e| &e.target_entity_id).collect();
                assert_eq!(ids.len(), rows.len());
            } else {
                assert_eq!(rows.len(), 1);
            }
        }
    }

    #[test]
    fn world_round_trips_through_files() {
        let w = generate_world(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        w.write_dir(dir.path()).unwrap();
        let back = World::read_dir(dir.path()).unwrap();
        assert_eq!(back.truth, w.truth);
        assert_eq!(back.catalog.entities(), w.catalog.entities());
        assert_eq!(back.users, w.users);
        assert_eq!(back.config, w.config);
    }
}
