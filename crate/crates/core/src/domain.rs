//! Shared vocabulary: tasks, request contexts, catalog entities, engagement
//! events and ranked results.
//!
//! Every type here is an immutable value. Identifiers are validated on
//! construction and on deserialization, so a value that exists is valid.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The canvas a request is served on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    QuerySearch,
    MoreLikeThis,
    PreQuery,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::QuerySearch, TaskKind::MoreLikeThis, TaskKind::PreQuery];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::QuerySearch => "query_search",
            TaskKind::MoreLikeThis => "more_like_this",
            TaskKind::PreQuery => "pre_query",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query_search" => Ok(TaskKind::QuerySearch),
            "more_like_this" => Ok(TaskKind::MoreLikeThis),
            "pre_query" => Ok(TaskKind::PreQuery),
            other => Err(Error::InvalidValue(format!("unknown task `{other}`"))),
        }
    }
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Result<Self> {
                let id = id.into();
                if id.is_empty() {
                    return Err(Error::InvalidValue(concat!(stringify!($name), " must be non-empty").into()));
                }
                Ok(Self(id))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl TryFrom<String> for $name {
            type Error = Error;
            fn try_from(s: String) -> Result<Self> {
                Self::new(s)
            }
        }

        impl From<$name> for String {
            fn from(id: $name) -> String {
                id.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
    };
}

string_id!(
    /// Identifier of a video or game.
    EntityId
);
string_id!(UserId);

/// Two-letter uppercase country code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CountryCode([u8; 2]);

impl CountryCode {
    pub fn new(code: &str) -> Result<Self> {
        match code.as_bytes() {
            [a, b] if a.is_ascii_uppercase() && b.is_ascii_uppercase() => Ok(Self([*a, *b])),
            _ => Err(Error::InvalidValue(format!("bad country code `{code}`"))),
        }
    }

    pub fn as_str(&self) -> &str {
        // Both bytes are ASCII uppercase by construction.
        std::str::from_utf8(&self.0).expect("ascii")
    }
}

impl TryFrom<String> for CountryCode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Self::new(&s)
    }
}

impl From<CountryCode> for String {
    fn from(c: CountryCode) -> String {
        c.as_str().to_owned()
    }
}

impl fmt::Display for CountryCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Video,
    Game,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEntity")]
pub struct Entity {
    pub id: EntityId,
    pub kind: EntityKind,
    pub display_name: String,
    pub countries: BTreeSet<CountryCode>,
    pub popularity: f64,
    /// Generator ground truth; never read by the ranker.
    pub latent_attrs: Vec<f64>,
}

#[derive(Deserialize)]
struct RawEntity {
    id: EntityId,
    kind: EntityKind,
    display_name: String,
    countries: BTreeSet<CountryCode>,
    popularity: f64,
    latent_attrs: Vec<f64>,
}

impl TryFrom<RawEntity> for Entity {
    type Error = Error;

    fn try_from(raw: RawEntity) -> Result<Self> {
        if raw.display_name.trim().is_empty() {
            return Err(Error::InvalidValue(format!("entity {} has an empty display name", raw.id)));
        }
        if raw.countries.is_empty() {
            return Err(Error::InvalidValue(format!("entity {} has no countries", raw.id)));
        }
        if !(raw.popularity >= 0.0 && raw.popularity.is_finite()) {
            return Err(Error::InvalidValue(format!("entity {} has bad popularity", raw.id)));
        }
        Ok(Entity {
            id: raw.id,
            kind: raw.kind,
            display_name: raw.display_name,
            countries: raw.countries,
            popularity: raw.popularity,
            latent_attrs: raw.latent_attrs,
        })
    }
}

/// The entity catalog with an id index.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    entities: Vec<Entity>,
    index: HashMap<EntityId, usize>,
}

impl Catalog {
    pub fn new(entities: Vec<Entity>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entities.len());
        let dim = entities.first().map_or(0, |e| e.latent_attrs.len());
        for (i, e) in entities.iter().enumerate() {
            if e.latent_attrs.len() != dim {
                return Err(Error::InvalidValue(format!("entity {} has attr dim {}, expected {dim}", e.id, e.latent_attrs.len())));
            }
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::InvalidValue(format!("duplicate entity id {}", e.id)));
            }
        }
        Ok(Catalog { entities, index })
    }

    pub fn get(&self, id: &EntityId) -> Option<&Entity> {
        self.index.get(id).map(|&i| &self.entities[i])
    }

    pub fn require(&self, id: &EntityId) -> Result<&Entity> {
        self.get(id).ok_or_else(|| Error::UnknownEntity(id.to_string()))
    }

    pub fn position(&self, id: &EntityId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }
}

/// A known user and their home country.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: UserId,
    pub country: CountryCode,
}

/// The unified request descriptor shared by search and recommendations.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Context {
    pub user_id: Option<UserId>,
    pub query: Option<String>,
    pub country: CountryCode,
    pub source_entity_id: Option<EntityId>,
    pub task: TaskKind,
}

impl Context {
    pub fn search(user: Option<UserId>, query: impl Into<String>, country: CountryCode) -> Self {
        Context {
            user_id: user,
            query: Some(query.into()),
            country,
            source_entity_id: None,
            task: TaskKind::QuerySearch,
        }
    }

    pub fn more_like_this(user: Option<UserId>, source: EntityId, country: CountryCode) -> Self {
        Context {
            user_id: user,
            query: None,
            country,
            source_entity_id: Some(source),
            task: TaskKind::MoreLikeThis,
        }
    }

    pub fn pre_query(user: UserId, country: CountryCode) -> Self {
        Context {
            user_id: Some(user),
            query: None,
            country,
            source_entity_id: None,
            task: TaskKind::PreQuery,
        }
    }
}

/// Checks that the fields mandatory for the context's task are present.
pub fn validate_context(ctx: Context) -> Result<Context> {
    let missing = |field| Err(Error::MissingRequiredContext { task: ctx.task, field });
    match ctx.task {
        TaskKind::QuerySearch if ctx.query.as_deref().is_none_or(str::is_empty) => missing("query"),
        TaskKind::MoreLikeThis if ctx.source_entity_id.is_none() => missing("source_entity_id"),
        TaskKind::PreQuery if ctx.user_id.is_none() => missing("user_id"),
        _ => Ok(ctx),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEvent")]
pub struct EngagementEvent {
    pub context: Context,
    pub target_entity_id: EntityId,
    pub label: u8,
    pub timestamp: i64,
}

#[derive(Deserialize)]
struct RawEvent {
    context: Context,
    target_entity_id: EntityId,
    label: u8,
    timestamp: i64,
}

impl TryFrom<RawEvent> for EngagementEvent {
    type Error = Error;

    fn try_from(raw: RawEvent) -> Result<Self> {
        if raw.label > 1 {
            return Err(Error::InvalidValue(format!("label must be 0 or 1, got {}", raw.label)));
        }
        Ok(EngagementEvent {
            context: raw.context,
            target_entity_id: raw.target_entity_id,
            label: raw.label,
            timestamp: raw.timestamp,
        })
    }
}

impl EngagementEvent {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub entity_id: EntityId,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub items: Vec<ScoredItem>,
    pub model_version: String,
    pub cache_hit: bool,
}

impl RankedList {
    /// Sorts scored candidates by descending score, breaking ties by ascending
    /// entity id, and keeps the first `k`.
    pub fn from_scores(mut items: Vec<ScoredItem>, k: usize, model_version: String) -> Self {
        items.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.entity_id.cmp(&b.entity_id)));
        items.truncate(k);
        RankedList { items, model_version, cache_hit: false }
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: impl AsRef<Path>,
    rows: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
