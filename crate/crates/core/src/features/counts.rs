use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{read_jsonl, write_jsonl, EngagementEvent, EntityId};
use crate::error::{Error, Result};
use crate::features::normalize_query;

/// Engagement counts from a window that ends strictly before the rows they
/// decorate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CountTables {
    window_end: i64,
    query_target: HashMap<String, HashMap<EntityId, u32>>,
    cooccur: HashMap<EntityId, HashMap<EntityId, u32>>,
    popularity: HashMap<EntityId, u32>,
}

/// Counts positive events with `timestamp < window_end`. Query keys are the
/// space-joined normalized tokens of the logged (not imputed) query.
pub fn build_count_tables(events: &[EngagementEvent], window_end: i64) -> CountTables {
    let mut tables = CountTables { window_end, ..CountTables::default() };
    for ev in events.iter().filter(|e| e.is_positive() && e.timestamp < window_end) {
        let target = &ev.target_entity_id;
        if let Some(q) = ev.context.query.as_deref() {
            let key = normalize_query(q).join(" ");
            if !key.is_empty() {
                *tables.query_target.entry(key).or_default().entry(target.clone()).or_default() += 1;
            }
        }
        if let Some(src) = &ev.context.source_entity_id {
            *tables.cooccur.entry(src.clone()).or_default().entry(target.clone()).or_default() += 1;
        }
        *tables.popularity.entry(target.clone()).or_default() += 1;
    }
    tables
}

#[derive(Serialize, Deserialize)]
struct PairLine {
    a: String,
    b: String,
    count: u32,
}

#[derive(Serialize, Deserialize)]
struct SingleLine {
    key: String,
    count: u32,
}

#[derive(Serialize, Deserialize)]
struct WindowLine {
    window_end: i64,
}

impl CountTables {
    pub fn window_end(&self) -> i64 {
        self.window_end
    }

    pub fn query_clicks(&self, query_key: &str, target: &EntityId) -> u32 {
        self.query_target.get(query_key).and_then(|m| m.get(target)).copied().unwrap_or(0)
    }

    pub fn cooccurrence(&self, source: &EntityId, target: &EntityId) -> u32 {
        self.cooccur.get(source).and_then(|m| m.get(target)).copied().unwrap_or(0)
    }

    pub fn popularity(&self, target: &EntityId) -> u32 {
        self.popularity.get(target).copied().unwrap_or(0)
    }

    pub fn totals(&self) -> (u64, u64, u64) {
        fn nested<K>(m: &HashMap<K, HashMap<EntityId, u32>>) -> u64 {
            m.values().flat_map(|m| m.values()).map(|&c| c as u64).sum()
        }
        (nested(&self.query_target), nested(&self.cooccur), self.popularity.values().map(|&c| c as u64).sum())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_jsonl(dir.join("counts.window.jsonl"), &[WindowLine { window_end: self.window_end }])?;
        fn pairs<K: ToString + Ord>(m: &HashMap<K, HashMap<EntityId, u32>>) -> Vec<PairLine> {
            let sorted: BTreeMap<(&K, &EntityId), u32> =
                m.iter().flat_map(|(a, inner)| inner.iter().map(move |(b, &c)| ((a, b), c))).collect();
            sorted.into_iter().map(|((a, b), count)| PairLine { a: a.to_string(), b: b.to_string(), count }).collect()
        }
        write_jsonl(dir.join("counts.query_target.jsonl"), &pairs(&self.query_target))?;
        write_jsonl(dir.join("counts.cooccur.jsonl"), &pairs(&self.cooccur))?;
        let pop: BTreeMap<_, _> = self.popularity.iter().collect();
        let pop: Vec<SingleLine> = pop.into_iter().map(|(k, &count)| SingleLine { key: k.to_string(), count }).collect();
        write_jsonl(dir.join("counts.popularity.jsonl"), &pop)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let window: Vec<WindowLine> = read_jsonl(dir.join("counts.window.jsonl"))?;
        let window_end = window.first().ok_or_else(|| Error::InvalidValue("empty counts.window.jsonl".into()))?.window_end;
        let mut tables = CountTables { window_end, ..CountTables::default() };
        for l in read_jsonl::<PairLine>(dir.join("counts.query_target.jsonl"))? {
            tables.query_target.entry(l.a).or_default().insert(EntityId::new(l.b)?, l.count);
        }
        for l in read_jsonl::<PairLine>(dir.join("counts.cooccur.jsonl"))? {
            tables.cooccur.entry(EntityId::new(l.a)?).or_default().insert(EntityId::new(l.b)?, l.count);
        }
        for l in read_jsonl::<SingleLine>(dir.join("counts.popularity.jsonl"))? {
            tables.popularity.insert(EntityId::new(l.key)?, l.count);
        }
        Ok(tables)
    }
}
