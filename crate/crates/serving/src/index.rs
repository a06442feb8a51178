//! Candidate generation: a prefix-searchable inverted index over display-name
//! tokens plus popularity-ordered entity lists per country.

use std::collections::{BTreeMap, BTreeSet};

use unirank::domain::{Catalog, Context, CountryCode, EntityId, TaskKind};
use unirank::features::normalize_query;

pub const MAX_CANDIDATES: usize = 500;

#[derive(Debug, Clone)]
pub struct CandidateIndex {
    ids: Vec<EntityId>,
    countries: Vec<BTreeSet<CountryCode>>,
    /// Position in the global popularity order, per entity.
    rank: Vec<u32>,
    tokens: BTreeMap<String, Vec<u32>>,
    by_country: BTreeMap<CountryCode, Vec<u32>>,
}

impl CandidateIndex {
    pub fn build(catalog: &Catalog) -> Self {
        let entities = catalog.entities();
        let mut order: Vec<u32> = (0..entities.len() as u32).collect();
        order.sort_by(|&a, &b| {
            let (a, b) = (&entities[a as usize], &entities[b as usize]);
            b.popularity.total_cmp(&a.popularity).then_with(|| a.id.cmp(&b.id))
        });
        let mut rank = vec![0; entities.len()];
        for (r, &e) in order.iter().enumerate() {
            rank[e as usize] = r as u32;
        }
        let mut tokens: BTreeMap<String, Vec<u32>> = BTreeMap::new();
        let mut by_country: BTreeMap<CountryCode, Vec<u32>> = BTreeMap::new();
        for &e in &order {
            let entity = &entities[e as usize];
            for tok in normalize_query(&entity.display_name).into_iter().collect::<BTreeSet<_>>() {
                tokens.entry(tok).or_default().push(e);
            }
            for c in &entity.countries {
                by_country.entry(*c).or_default().push(e);
            }
        }
        CandidateIndex {
            ids: entities.iter().map(|e| e.id.clone()).collect(),
            countries: entities.iter().map(|e| e.countries.clone()).collect(),
            rank,
            tokens,
            by_country,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Candidates for an imputed context, most popular first, at most `max_n`.
    pub fn candidates(&self, ctx: &Context, max_n: usize) -> Vec<EntityId> {
        let in_country = |e: &u32| self.countries[*e as usize].contains(&ctx.country);
        let picked: Vec<u32> = match ctx.task {
            TaskKind::QuerySearch => {
                let toks = normalize_query(ctx.query.as_deref().unwrap_or(""));
                let Some((last, earlier)) = toks.split_last() else { return Vec::new() };
                let mut hits: BTreeSet<u32> = BTreeSet::new();
                for (_, list) in self.tokens.range(last.clone()..).take_while(|(t, _)| t.starts_with(last.as_str())) {
                    hits.extend(list);
                }
                for tok in earlier {
                    hits.extend(self.tokens.get(tok).into_iter().flatten());
                }
                let mut hits: Vec<u32> = hits.into_iter().filter(in_country).collect();
                hits.sort_by_key(|&e| self.rank[e as usize]);
                hits.truncate(max_n);
                hits
            }
            TaskKind::MoreLikeThis | TaskKind::PreQuery => {
                let source = ctx.source_entity_id.as_ref().filter(|_| ctx.task == TaskKind::MoreLikeThis);
                self.by_country
                    .get(&ctx.country)
                    .into_iter()
                    .flatten()
                    .filter(|&&e| source != Some(&self.ids[e as usize]))
                    .take(max_n)
                    .copied()
                    .collect()
            }
        };
        picked.into_iter().map(|e| self.ids[e as usize].clone()).collect()
    }
}
