//! Multi-seed experiments: unified versus specialist models, enabler
//! ablations and the personalization ladder.
//!
//! Every seed regenerates the world and log, and seeds the model and the
//! shuffling. Trained variants are memoized per seed, so the full unified run
//! is shared by the comparison and the ablations.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::{generate_events, generate_world, World, WorldConfig};
use crate::domain::{EngagementEvent, TaskKind};
use crate::error::Result;
use crate::evaluation::{build_eval_groups, median, EvalGroup, EvalReport, GroupStats, Metrics};
use crate::model::ModelConfig;
use crate::personalization::{
    build_user_vectors, kmeans, pretrain_mf, MfConfig, PersonalizationMode, Personalizer, PretrainedRepr,
    UserClusterModel,
};
use crate::ranker::{train_ranker, RankingModel};
use crate::training::{assemble_dataset, History, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mf: MfConfig,
    pub k: usize,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            mf: MfConfig::default(),
            k: crate::personalization::DEFAULT_K,
            seeds: (1..=5).collect(),
        }
    }
}

/// User weight of the personalization-heavy world used for the ladder.
pub const LADDER_ALPHA: f64 = 0.8;

impl ExperimentConfig {
    pub fn ladder() -> Self {
        let mut cfg = Self::default();
        cfg.world.alpha = LADDER_ALPHA;
        cfg
    }

    /// The world and hyperparameters for one seed.
    pub fn for_seed(&self, seed: u64) -> (WorldConfig, ModelConfig, TrainConfig, MfConfig) {
        (
            WorldConfig { seed, ..self.world.clone() },
            ModelConfig { seed, ..self.model.clone() },
            TrainConfig { seed, ..self.train.clone() },
            MfConfig { seed, ..self.mf.clone() },
        )
    }
}

/// One training run's switches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Variant {
    pub task_filter: Option<TaskKind>,
    pub no_task_feature: bool,
    pub no_imputation: bool,
    pub no_crossing: bool,
    /// `None` trains on the base features, user id included.
    pub mode: Option<PersonalizationMode>,
}

impl Variant {
    pub const FULL: Variant =
        Variant { task_filter: None, no_task_feature: false, no_imputation: false, no_crossing: false, mode: None };

    pub fn specialist(task: TaskKind) -> Self {
        Variant { task_filter: Some(task), ..Self::FULL }
    }

    pub fn ladder(mode: PersonalizationMode) -> Self {
        Variant { mode: Some(mode), ..Self::FULL }
    }

    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            task_filter: self.task_filter,
            disable_task_feature: self.no_task_feature,
            disable_imputation: self.no_imputation,
            disable_crossing: self.no_crossing,
            ..base.clone()
        }
    }

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if let Some(t) = self.task_filter {
            parts.push(format!("specialist:{}", t.as_str()));
        }
        if self.no_task_feature {
            parts.push("-task-feature".to_owned());
        }
        if self.no_imputation {
            parts.push("-imputation".to_owned());
        }
        if self.no_crossing {
            parts.push("-crossing".to_owned());
        }
        if let Some(m) = self.mode {
            parts.push(m.to_string());
        }
        if parts.is_empty() {
            "unified".to_owned()
        } else {
            parts.join(" ")
        }
    }
}

/// Generated data shared by every run of one seed.
pub struct SeedData {
    pub seed: u64,
    pub world: World,
    pub events: Vec<EngagementEvent>,
    /// Evaluation groups from the default split; identical for all variants.
    pub groups: Vec<EvalGroup>,
    pub group_stats: GroupStats,
    /// Events of the count window, before any training row; personalization
    /// artifacts are built from these only.
    pub history: Vec<EngagementEvent>,
    repr: Option<PretrainedRepr>,
    clusters: Option<UserClusterModel>,
}

type Progress = Box<dyn Fn(&str)>;

pub struct ExperimentRunner {
    pub config: ExperimentConfig,
    seeds: BTreeMap<u64, SeedData>,
    reports: BTreeMap<(u64, Variant), (EvalReport, History)>,
    progress: Option<Progress>,
}

impl ExperimentRunner {
    pub fn new(config: ExperimentConfig) -> Self {
        ExperimentRunner { config, seeds: BTreeMap::new(), reports: BTreeMap::new(), progress: None }
    }

    pub fn with_progress(mut self, f: impl Fn(&str) + 'static) -> Self {
        self.progress = Some(Box::new(f));
        self
    }

    fn note(&self, msg: &str) {
        if let Some(f) = &self.progress {
            f(msg);
        }
    }

    pub fn seed_data(&mut self, seed: u64) -> Result<&SeedData> {
        if !self.seeds.contains_key(&seed) {
            let (world_cfg, _, train_cfg, _) = self.config.for_seed(seed);
            let world = generate_world(&world_cfg)?;
            let events = generate_events(&world)?.events;
            let base = assemble_dataset(&events, &world.catalog, &TrainConfig { task_filter: None, ..train_cfg })?;
            let (groups, group_stats) = build_eval_groups(&base.eval);
            let history = events.iter().filter(|e| e.timestamp < base.count_window_end).cloned().collect();
            self.seeds.insert(
                seed,
                SeedData { seed, world, events, groups, group_stats, history, repr: None, clusters: None },
            );
        }
        Ok(&self.seeds[&seed])
    }

    /// Pretrained representations and clusters for a seed, built once.
    pub fn artifacts(&mut self, seed: u64) -> Result<(PretrainedRepr, UserClusterModel)> {
        let (_, _, _, mf_cfg) = self.config.for_seed(seed);
        let k = self.config.k;
        self.seed_data(seed)?;
        let data = self.seeds.get_mut(&seed).expect("seed data");
        if data.repr.is_none() {
            data.repr = Some(pretrain_mf(&data.history, &data.world.catalog, &mf_cfg)?);
        }
        if data.clusters.is_none() {
            let vectors = build_user_vectors(&data.history, data.repr.as_ref(), mf_cfg.dim);
            data.clusters = Some(kmeans(&vectors, k, seed, 100, 1e-6)?);
        }
        Ok((data.repr.clone().expect("repr"), data.clusters.clone().expect("clusters")))
    }

    /// Trains one variant from scratch.
    pub fn train_variant(&mut self, seed: u64, variant: Variant) -> Result<(RankingModel, History)> {
        let (_, model_cfg, train_cfg, _) = self.config.for_seed(seed);
        let personalizer = match variant.mode {
            Some(mode) => {
                let (repr, clusters) = self.artifacts(seed)?;
                Some(Personalizer::new(mode, Some(clusters), Some(repr))?)
            }
            None => None,
        };
        let data = self.seed_data(seed)?;
        let dataset = assemble_dataset(&data.events, &data.world.catalog, &variant.train_config(&train_cfg))?;
        train_ranker(&dataset, &model_cfg, &variant.train_config(&train_cfg), personalizer)
    }

    /// Evaluation report of a variant, trained on first request.
    pub fn report(&mut self, seed: u64, variant: Variant) -> Result<EvalReport> {
        if let Some((r, _)) = self.reports.get(&(seed, variant)) {
            return Ok(r.clone());
        }
        self.note(&format!("seed {seed}: training {}", variant.name()));
        let (model, history) = self.train_variant(seed, variant)?;
        let data = &self.seeds[&seed];
        let groups: Vec<EvalGroup> = match variant.task_filter {
            Some(t) => data.groups.iter().filter(|g| g.context.task == t).cloned().collect(),
            None => data.groups.clone(),
        };
        let mut report = model.evaluate(&groups, &data.world.catalog)?;
        report.seed = Some(seed);
        self.reports.insert((seed, variant), (report.clone(), history));
        Ok(report)
    }

    pub fn history(&self, seed: u64, variant: Variant) -> Option<&History> {
        self.reports.get(&(seed, variant)).map(|(_, h)| h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auc,
    NdcgAt10,
    Mrr,
    RecallAt10,
}

impl Metric {
    pub fn of(self, m: &Metrics) -> f64 {
        match self {
            Metric::Auc => m.auc,
            Metric::NdcgAt10 => m.ndcg_at_10,
            Metric::Mrr => m.mrr,
            Metric::RecallAt10 => m.recall_at_10,
        }
    }
}

/// Metrics of a report for one task, or overall when `task` is `None`.
pub fn scope(report: &EvalReport, task: Option<TaskKind>) -> Metrics {
    task.map_or(report.overall, |t| report.task(t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub task: TaskKind,
    pub unified: f64,
    pub specialist: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub metric: Metric,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    /// Median over seeds of `unified - specialist`.
    pub fn median_delta(&self, task: TaskKind) -> f64 {
        median(&self.rows.iter().filter(|r| r.task == task).map(|r| r.unified - r.specialist).collect::<Vec<_>>())
    }

    pub fn median_unified(&self, task: TaskKind) -> f64 {
        median(&self.rows.iter().filter(|r| r.task == task).map(|r| r.unified).collect::<Vec<_>>())
    }

    pub fn median_specialist(&self, task: TaskKind) -> f64 {
        median(&self.rows.iter().filter(|r| r.task == task).map(|r| r.specialist).collect::<Vec<_>>())
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<16} {:>10} {:>11} {:>9}   (median ndcg@10 over seeds)\n", "task", "unified", "specialist", "delta");
        for t in TaskKind::ALL {
            let _ = writeln!(
                out,
                "{:<16} {:>10.4} {:>11.4} {:>+9.4}",
                t.as_str(),
                self.median_unified(t),
                self.median_specialist(t),
                self.median_delta(t)
            );
        }
        out
    }
}

/// Trains one unified model and one specialist per task for every seed and
/// scores each on its task's groups.
pub fn compare_unified_vs_specialists(runner: &mut ExperimentRunner) -> Result<ComparisonTable> {
    let mut rows = Vec::new();
    for seed in runner.config.seeds.clone() {
        let unified = runner.report(seed, Variant::FULL)?;
        for task in TaskKind::ALL {
            let specialist = runner.report(seed, Variant::specialist(task))?;
            rows.push(ComparisonRow {
                seed,
                task,
                unified: unified.task(task).ndcg_at_10,
                specialist: specialist.task(task).ndcg_at_10,
            });
        }
    }
    Ok(ComparisonTable { metric: Metric::NdcgAt10, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    TaskFeature,
    Imputation,
    Crossing,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::TaskFeature, Ablation::Imputation, Ablation::Crossing];

    pub fn variant(self) -> Variant {
        match self {
            Ablation::TaskFeature => Variant { no_task_feature: true, ..Variant::FULL },
            Ablation::Imputation => Variant { no_imputation: true, ..Variant::FULL },
            Ablation::Crossing => Variant { no_crossing: true, ..Variant::FULL },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::TaskFeature => "-task-feature",
            Ablation::Imputation => "-imputation",
            Ablation::Crossing => "-crossing",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub ablation: Ablation,
    pub full: EvalReport,
    pub ablated: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Median over seeds of `ablated - full`.
    pub fn median_delta(&self, ablation: Ablation, task: Option<TaskKind>, metric: Metric) -> f64 {
        let deltas: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.ablation == ablation)
            .map(|r| metric.of(&scope(&r.ablated, task)) - metric.of(&scope(&r.full, task)))
            .collect();
        median(&deltas)
    }

    pub fn table(&self) -> String {
        let scopes: Vec<(String, Option<TaskKind>)> = TaskKind::ALL
            .iter()
            .map(|t| (t.as_str().to_owned(), Some(*t)))
            .chain([("overall".to_owned(), None)])
            .collect();
        let mut out = String::from("median delta vs full model over seeds\n");
        let _ = writeln!(out, "{:<14} {:<16} {:>9} {:>9} {:>9} {:>9}", "ablation", "scope", "auc", "ndcg@10", "mrr", "recall@10");
        for a in Ablation::ALL {
            for (name, task) in &scopes {
                let _ = writeln!(
                    out,
                    "{:<14} {:<16} {:>+9.4} {:>+9.4} {:>+9.4} {:>+9.4}",
                    a.as_str(),
                    name,
                    self.median_delta(a, *task, Metric::Auc),
                    self.median_delta(a, *task, Metric::NdcgAt10),
                    self.median_delta(a, *task, Metric::Mrr),
                    self.median_delta(a, *task, Metric::RecallAt10),
                );
            }
        }
        out
    }
}

/// Full unified model against each single-enabler ablation, every seed.
pub fn ablate_enablers(runner: &mut ExperimentRunner) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for seed in runner.config.seeds.clone() {
        let full = runner.report(seed, Variant::FULL)?;
        for ablation in Ablation::ALL {
            let ablated = runner.report(seed, ablation.variant())?;
            rows.push(AblationRow { seed, ablation, full: full.clone(), ablated });
        }
    }
    Ok(AblationTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub seed: u64,
    pub mode: PersonalizationMode,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderTable {
    pub rows: Vec<LadderRow>,
}

impl LadderTable {
    pub fn median(&self, mode: PersonalizationMode, task: Option<TaskKind>, metric: Metric) -> f64 {
        median(
            &self.rows.iter().filter(|r| r.mode == mode).map(|r| metric.of(&scope(&r.report, task))).collect::<Vec<_>>(),
        )
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<14} {:>9} {:>9} {:>9} {:>9}   (median over seeds)\n", "mode", "auc", "ndcg@10", "mrr", "pre_query");
        for m in PersonalizationMode::LADDER {
            let _ = writeln!(
                out,
                "{:<14} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                m.as_str(),
                self.median(m, None, Metric::Auc),
                self.median(m, None, Metric::NdcgAt10),
                self.median(m, None, Metric::Mrr),
                self.median(m, Some(TaskKind::PreQuery), Metric::NdcgAt10),
            );
        }
        out
    }
}

/// One unified model per ladder mode, every seed.
pub fn personalization_ladder(runner: &mut ExperimentRunner) -> Result<LadderTable> {
    let mut rows = Vec::new();
    for seed in runner.config.seeds.clone() {
        for mode in PersonalizationMode::LADDER {
            rows.push(LadderRow { seed, mode, report: runner.report(seed, Variant::ladder(mode))? });
        }
    }
    Ok(LadderTable { rows })
}
