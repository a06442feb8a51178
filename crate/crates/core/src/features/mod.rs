//! Feature pipeline: query normalization, context imputation, vocabularies,
//! time-windowed count tables and the per-(context, target) feature bundle.
//!
//! Two feature families reach the model. Context features describe the
//! request alone (query length, query tokens, source entity). Context-target
//! features describe the pair (clicks of the target for this query, source
//! co-engagement, target popularity).

mod counts;
mod vocab;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use counts::{build_count_tables, CountTables};
pub use vocab::{Vocabulary, NULL_ID, OOV_ID};

use crate::domain::{Catalog, Context, EntityId, TaskKind};
use crate::error::{Error, Result};

/// Maximum number of query tokens fed to the model.
pub const QUERY_LEN: usize = 4;
/// query_length, ctx_target_click_count, target_popularity, source_target_cooccur.
pub const DENSE_LEN: usize = 4;

/// Lowercases, splits on whitespace and strips non-alphanumeric characters
/// from both ends of every token. Tokens that strip to nothing are dropped.
pub fn normalize_query(q: &str) -> Vec<String> {
    q.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Fills context fields a task does not carry.
///
/// Search rows keep an absent source as the null sentinel. More-like-this
/// rows without a query get the normalized display-name tokens of their
/// source entity. Pre-query rows keep the query as the null sentinel. Fields
/// that are present are never touched.
pub fn impute_context(ctx: &Context, catalog: &Catalog) -> Result<Context> {
    let mut out = ctx.clone();
    let source = match &ctx.source_entity_id {
        Some(id) => Some(catalog.require(id)?),
        None => None,
    };
    if ctx.task == TaskKind::MoreLikeThis && ctx.query.is_none() {
        if let Some(src) = source {
            out.query = Some(normalize_query(&src.display_name).join(" "));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub user_id_idx: u32,
    pub country_idx: u32,
    pub task_idx: u32,
    pub source_entity_idx: u32,
    pub target_entity_idx: u32,
    /// Padded with [`NULL_ID`].
    pub query_token_idxs: [u32; QUERY_LEN],
    /// Present only for models trained with user clusters.
    pub cluster_idx: Option<u32>,
    /// `[query_length, ln(1+clicks), ln(1+popularity), ln(1+cooccur)]`.
    pub dense: [f64; DENSE_LEN],
    pub extra_dense: Vec<f64>,
}

/// Embedding-table sizes and input widths a model is built for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub user_rows: usize,
    pub country_rows: usize,
    pub task_rows: usize,
    pub entity_rows: usize,
    pub token_rows: usize,
    pub cluster_rows: Option<usize>,
    pub query_len: usize,
    pub dense_len: usize,
    pub extra_dense_len: usize,
}

impl FeatureSchema {
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("schema serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Rejects bundles that would index outside the embedding tables.
    pub fn check(&self, b: &FeatureBundle) -> Result<()> {
        let check = |table, index: u32, rows: usize| {
            if (index as usize) < rows {
                Ok(())
            } else {
                Err(Error::IndexOutOfBounds { table, index: index as usize, rows })
            }
        };
        check("user", b.user_id_idx, self.user_rows)?;
        check("country", b.country_idx, self.country_rows)?;
        check("task", b.task_idx, self.task_rows)?;
        check("entity", b.source_entity_idx, self.entity_rows)?;
        check("entity", b.target_entity_idx, self.entity_rows)?;
        for &t in &b.query_token_idxs {
            check("query_token", t, self.token_rows)?;
        }
        match (b.cluster_idx, self.cluster_rows) {
            (Some(c), Some(rows)) => check("cluster", c, rows)?,
            (None, None) => {}
            _ => return Err(Error::ShapeMismatch("cluster feature presence differs from schema".into())),
        }
        if b.extra_dense.len() != self.extra_dense_len {
            return Err(Error::ShapeMismatch(format!(
                "extra_dense has {} values, schema expects {}",
                b.extra_dense.len(),
                self.extra_dense_len
            )));
        }
        Ok(())
    }
}

/// The five categorical vocabularies, built from training rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabularies {
    pub user: Vocabulary,
    pub country: Vocabulary,
    pub task: Vocabulary,
    pub entity: Vocabulary,
    pub query_token: Vocabulary,
}

impl Vocabularies {
    pub const NAMES: [&'static str; 5] = ["user", "country", "task", "entity", "query_token"];

    /// Builds from (already imputed) contexts and their targets.
    pub fn build<'a>(rows: impl IntoIterator<Item = (&'a Context, &'a EntityId)> + Clone) -> Self {
        let rows: Vec<(&Context, &EntityId)> = rows.into_iter().collect();
        Vocabularies {
            user: Vocabulary::build("user", rows.iter().filter_map(|(c, _)| c.user_id.as_ref().map(|u| u.as_str()))),
            country: Vocabulary::build("country", rows.iter().map(|(c, _)| c.country.as_str())),
            task: Vocabulary::build("task", rows.iter().map(|(c, _)| c.task.as_str())),
            entity: Vocabulary::build(
                "entity",
                rows.iter().flat_map(|(c, t)| c.source_entity_id.iter().chain(std::iter::once(*t)).map(|e| e.as_str())),
            ),
            query_token: Vocabulary::build(
                "query_token",
                rows.iter().flat_map(|(c, _)| c.query.as_deref().map(normalize_query).unwrap_or_default()),
            ),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for v in [&self.user, &self.country, &self.task, &self.entity, &self.query_token] {
            v.save(dir)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Vocabularies {
            user: Vocabulary::load(dir, "user")?,
            country: Vocabulary::load(dir, "country")?,
            task: Vocabulary::load(dir, "task")?,
            entity: Vocabulary::load(dir, "entity")?,
            query_token: Vocabulary::load(dir, "query_token")?,
        })
    }

    /// Schema of bundles produced directly by [`FeatureSpace::featurize`].
    pub fn base_schema(&self) -> FeatureSchema {
        FeatureSchema {
            user_rows: self.user.size(),
            country_rows: self.country.size(),
            task_rows: self.task.size(),
            entity_rows: self.entity.size(),
            token_rows: self.query_token.size(),
            cluster_rows: None,
            query_len: QUERY_LEN,
            dense_len: DENSE_LEN,
            extra_dense_len: 0,
        }
    }
}

/// Frozen vocabularies and count tables; featurization is a pure function of
/// these plus the catalog.
#[derive(Debug, Clone)]
pub struct FeatureSpace {
    pub vocabs: Vocabularies,
    pub tables: CountTables,
}

impl FeatureSpace {
    pub fn featurize(&self, ctx: &Context, target: &EntityId, catalog: &Catalog) -> Result<FeatureBundle> {
        catalog.require(target)?;
        let v = &self.vocabs;
        let tokens = ctx.query.as_deref().map(normalize_query).unwrap_or_default();
        let mut query_token_idxs = [NULL_ID; QUERY_LEN];
        for (slot, tok) in query_token_idxs.iter_mut().zip(&tokens) {
            *slot = v.query_token.lookup(tok);
        }
        let clicks = if tokens.is_empty() { 0 } else { self.tables.query_clicks(&tokens.join(" "), target) };
        let cooccur = ctx.source_entity_id.as_ref().map_or(0, |s| self.tables.cooccurrence(s, target));
        let popularity = self.tables.popularity(target);
        Ok(FeatureBundle {
            user_id_idx: v.user.lookup_opt(ctx.user_id.as_ref().map(|u| u.as_str())),
            country_idx: v.country.lookup(ctx.country.as_str()),
            task_idx: v.task.lookup(ctx.task.as_str()),
            source_entity_idx: v.entity.lookup_opt(ctx.source_entity_id.as_ref().map(|e| e.as_str())),
            target_entity_idx: v.entity.lookup(target.as_str()),
            query_token_idxs,
            cluster_idx: None,
            dense: [
                tokens.len() as f64,
                (clicks as f64).ln_1p(),
                (popularity as f64).ln_1p(),
                (cooccur as f64).ln_1p(),
            ],
            extra_dense: Vec::new(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.vocabs.save(dir)?;
        self.tables.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(FeatureSpace { vocabs: Vocabularies::load(dir)?, tables: CountTables::load(dir)? })
    }
}
