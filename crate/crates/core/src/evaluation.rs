//! Ranking metrics and grouped evaluation over logged impressions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{Context, EntityId, TaskKind};
use crate::error::Result;
use crate::training::Example;

pub const EVAL_K: usize = 10;

/// DCG@k with gain = label and discount `1 / log2(rank + 1)`, divided by the
/// ideal DCG@k. Zero when the list has no positives.
pub fn ndcg_at_k(ranked_labels: &[u8], k: usize) -> f64 {
    let dcg = |labels: &mut dyn Iterator<Item = u8>| -> f64 {
        labels.take(k).enumerate().map(|(i, l)| f64::from(l) / ((i + 2) as f64).log2()).sum()
    };
    let mut ideal: Vec<u8> = ranked_labels.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(&mut ideal.into_iter());
    if idcg == 0.0 {
        return 0.0;
    }
    dcg(&mut ranked_labels.iter().copied()) / idcg
}

/// Reciprocal rank of the first positive.
pub fn mrr(ranked_labels: &[u8]) -> f64 {
    ranked_labels.iter().position(|&l| l > 0).map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

pub fn recall_at_k(ranked_labels: &[u8], k: usize) -> f64 {
    let total = ranked_labels.iter().filter(|&&l| l > 0).count();
    if total == 0 {
        return 0.0;
    }
    ranked_labels.iter().take(k).filter(|&&l| l > 0).count() as f64 / total as f64
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. 0.5 when either class is absent.
pub fn auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&l| l > 0).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return 0.5;
    }
    // Midranks over tied blocks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&o| labels[o] > 0).count() as f64 * mid;
        i = j + 1;
    }
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// Candidate order used everywhere: score descending, then EntityId ascending.
pub fn rank_order(ids: &[EntityId], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(&ids[b])));
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalGroup {
    /// Imputed context shared by every candidate.
    pub context: Context,
    /// The logged context before imputation.
    pub raw_context: Context,
    pub candidates: Vec<(EntityId, u8)>,
}

impl EvalGroup {
    pub fn ids(&self) -> Vec<EntityId> {
        self.candidates.iter().map(|(id, _)| id.clone()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub kept: usize,
    pub dropped_too_small: usize,
    pub dropped_no_positive: usize,
}

/// Groups rows by imputed context. Duplicate candidates keep their maximum
/// label. Groups with fewer than two candidates or no positive are dropped.
pub fn build_eval_groups(rows: &[Example]) -> (Vec<EvalGroup>, GroupStats) {
    let mut grouped: BTreeMap<&Context, (&Context, BTreeMap<&EntityId, u8>)> = BTreeMap::new();
    for ex in rows {
        let entry = grouped.entry(&ex.prepared).or_insert_with(|| (&ex.context, BTreeMap::new()));
        let label = entry.1.entry(&ex.target).or_insert(0);
        *label = (*label).max(ex.label);
    }
    let mut stats = GroupStats::default();
    let mut groups = Vec::new();
    for (ctx, (raw, cands)) in grouped {
        if cands.len() < 2 {
            stats.dropped_too_small += 1;
        } else if cands.values().all(|&l| l == 0) {
            stats.dropped_no_positive += 1;
        } else {
            stats.kept += 1;
            groups.push(EvalGroup {
                context: ctx.clone(),
                raw_context: raw.clone(),
                candidates: cands.into_iter().map(|(id, l)| (id.clone(), l)).collect(),
            });
        }
    }
    (groups, stats)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub ndcg_at_10: f64,
    pub mrr: f64,
    pub recall_at_10: f64,
    pub groups: usize,
}

#[derive(Debug, Default)]
struct Accumulator {
    ndcg: f64,
    mrr: f64,
    recall: f64,
    groups: usize,
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl Accumulator {
    fn add(&mut self, ranked_labels: &[u8], scores: &[f64], labels: &[u8]) {
        self.ndcg += ndcg_at_k(ranked_labels, EVAL_K);
        self.mrr += mrr(ranked_labels);
        self.recall += recall_at_k(ranked_labels, EVAL_K);
        self.groups += 1;
        self.scores.extend_from_slice(scores);
        self.labels.extend_from_slice(labels);
    }

    fn finish(&self) -> Metrics {
        let n = self.groups.max(1) as f64;
        Metrics {
            auc: auc(&self.scores, &self.labels),
            ndcg_at_10: self.ndcg / n,
            mrr: self.mrr / n,
            recall_at_10: self.recall / n,
            groups: self.groups,
        }
    }
}

/// AUC pools every candidate of the covered groups; the ranking metrics are
/// means over groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Metrics,
    pub per_task: BTreeMap<TaskKind, Metrics>,
    pub model_version: String,
    pub seed: Option<u64>,
}

impl EvalReport {
    pub fn task(&self, task: TaskKind) -> Metrics {
        self.per_task.get(&task).copied().unwrap_or_default()
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<16} {:>7} {:>8} {:>8} {:>8} {:>9}\n", "task", "groups", "auc", "ndcg@10", "mrr", "recall@10");
        let rows = self.per_task.iter().map(|(t, m)| (t.as_str(), m)).chain([("overall", &self.overall)]);
        for (name, m) in rows {
            out.push_str(&format!(
                "{:<16} {:>7} {:>8.4} {:>8.4} {:>8.4} {:>9.4}\n",
                name, m.groups, m.auc, m.ndcg_at_10, m.mrr, m.recall_at_10
            ));
        }
        out
    }
}

/// Scores every group with `score` (one score per candidate, in candidate
/// order) and aggregates the metrics.
pub fn evaluate_with(
    groups: &[EvalGroup],
    model_version: &str,
    mut score: impl FnMut(&EvalGroup) -> Result<Vec<f64>>,
) -> Result<EvalReport> {
    let mut overall = Accumulator::default();
    let mut per_task: BTreeMap<TaskKind, Accumulator> = BTreeMap::new();
    for g in groups {
        let scores = score(g)?;
        let ids = g.ids();
        let labels: Vec<u8> = g.candidates.iter().map(|(_, l)| *l).collect();
        let ranked: Vec<u8> = rank_order(&ids, &scores).into_iter().map(|i| labels[i]).collect();
        overall.add(&ranked, &scores, &labels);
        per_task.entry(g.context.task).or_default().add(&ranked, &scores, &labels);
    }
    Ok(EvalReport {
        overall: overall.finish(),
        per_task: per_task.into_iter().map(|(t, a)| (t, a.finish())).collect(),
        model_version: model_version.to_owned(),
        seed: None,
    })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}
