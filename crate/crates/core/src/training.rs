//! Dataset assembly and minibatch training.
//!
//! The log is cut in time twice. The first half only feeds count tables;
//! the second half becomes rows, split again into an earlier training part
//! and a later evaluation tail. Rows never see counts from their own future.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Catalog, Context, EngagementEvent, EntityId, TaskKind};
use crate::error::{Error, Result};
use crate::evaluation::auc;
use crate::features::{
    build_count_tables, impute_context, FeatureBundle, FeatureSchema, FeatureSpace, Vocabularies, NULL_ID,
};
use crate::model::{AdamConfig, Gradients, ModelConfig, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Train a specialist on one task only.
    pub task_filter: Option<TaskKind>,
    pub disable_task_feature: bool,
    pub disable_imputation: bool,
    pub disable_crossing: bool,
    /// Time-ordered tail of the decorated rows held out for evaluation.
    pub eval_fraction: f64,
    /// Leading share of the log used only to build count tables.
    pub count_fraction: f64,
    /// Stop once eval loss has not improved for two epochs.
    pub early_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 10,
            lr: 2e-3,
            seed: 7,
            task_filter: None,
            disable_task_feature: false,
            disable_imputation: false,
            disable_crossing: false,
            eval_fraction: 0.2,
            count_fraction: 0.5,
            early_stop: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::InvalidConfig("eval_fraction must lie in (0, 1)".into()));
        }
        if !(self.count_fraction > 0.0 && self.count_fraction < 1.0) {
            return Err(Error::InvalidConfig("count_fraction must lie in (0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be > 0".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("lr must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// The architecture actually trained under the ablation switches.
    pub fn effective_model_config(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        if self.disable_crossing {
            cfg.n_cross_layers = 0;
        }
        cfg
    }

    pub fn feature_options(&self) -> FeatureOptions {
        FeatureOptions { impute: !self.disable_imputation, task_feature: !self.disable_task_feature }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureOptions {
    pub impute: bool,
    pub task_feature: bool,
}

/// Frozen feature space plus the switches it was trained with; turns raw
/// contexts into bundles the same way at training and serving time.
#[derive(Debug, Clone)]
pub struct Featurizer {
    pub space: FeatureSpace,
    pub options: FeatureOptions,
}

impl Featurizer {
    pub fn prepare_context(&self, ctx: &Context, catalog: &Catalog) -> Result<Context> {
        if self.options.impute {
            impute_context(ctx, catalog)
        } else {
            if let Some(src) = &ctx.source_entity_id {
                catalog.require(src)?;
            }
            Ok(ctx.clone())
        }
    }

    /// Featurizes an already prepared context.
    pub fn bundle(&self, prepared: &Context, target: &EntityId, catalog: &Catalog) -> Result<FeatureBundle> {
        let mut b = self.space.featurize(prepared, target, catalog)?;
        if !self.options.task_feature {
            b.task_idx = NULL_ID;
        }
        Ok(b)
    }

    pub fn schema(&self) -> FeatureSchema {
        self.space.vocabs.base_schema()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.space.save(dir)?;
        std::fs::write(dir.join("feature_options.json"), serde_json::to_vec_pretty(&self.options)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let options = serde_json::from_slice(&std::fs::read(dir.join("feature_options.json"))?)?;
        Ok(Featurizer { space: FeatureSpace::load(dir)?, options })
    }
}

/// One labeled row.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub context: Context,
    /// Context after imputation (or unchanged when imputation is off).
    pub prepared: Context,
    pub target: EntityId,
    pub label: u8,
    pub timestamp: i64,
    pub bundle: FeatureBundle,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub featurizer: Featurizer,
    pub schema: FeatureSchema,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
    pub count_window_end: i64,
    pub eval_start: i64,
}

/// Timestamp `t` such that rows with `timestamp < t` are the leading
/// `fraction` of the log, rounded to whole timestamps.
pub fn time_boundary(events: &[EngagementEvent], fraction: f64) -> i64 {
    let idx = ((events.len() as f64 * fraction).floor() as usize).min(events.len().saturating_sub(1));
    events.get(idx).map_or(i64::MIN, |e| e.timestamp)
}

/// The count-window end and the evaluation start for a time-sorted log.
/// Both are computed on the full log, before any task filter.
pub fn split_boundaries(events: &[EngagementEvent], cfg: &TrainConfig) -> (i64, i64) {
    let count_window_end = time_boundary(events, cfg.count_fraction);
    let decorated: Vec<&EngagementEvent> = events.iter().filter(|e| e.timestamp >= count_window_end).collect();
    let idx = ((decorated.len() as f64 * (1.0 - cfg.eval_fraction)).floor() as usize).min(decorated.len().saturating_sub(1));
    (count_window_end, decorated.get(idx).map_or(i64::MAX, |e| e.timestamp))
}

pub fn assemble_dataset(events: &[EngagementEvent], catalog: &Catalog, cfg: &TrainConfig) -> Result<Dataset> {
    cfg.validate()?;
    if events.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
        return Err(Error::InvalidValue("events must be sorted by timestamp".into()));
    }
    let (count_window_end, eval_start) = split_boundaries(events, cfg);
    let tables = build_count_tables(events, count_window_end);
    let decorated: Vec<&EngagementEvent> = events.iter().filter(|e| e.timestamp >= count_window_end).collect();
    let keep = |e: &&&EngagementEvent| cfg.task_filter.is_none_or(|t| e.context.task == t);
    let options = cfg.feature_options();
    fn prepare<'a>(e: &'a EngagementEvent, impute: bool, catalog: &Catalog) -> Result<(Context, &'a EngagementEvent)> {
        let prepared = if impute { impute_context(&e.context, catalog)? } else { e.context.clone() };
        Ok((prepared, e))
    }
    let train_raw = decorated
        .iter()
        .filter(|e| e.timestamp < eval_start)
        .filter(keep)
        .map(|e| prepare(e, options.impute, catalog))
        .collect::<Result<Vec<_>>>()?;
    let eval_raw =
        decorated.iter().filter(|e| e.timestamp >= eval_start).filter(keep).map(|e| prepare(e, options.impute, catalog)).collect::<Result<Vec<_>>>()?;
    if train_raw.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if eval_raw.is_empty() {
        return Err(Error::EmptySplit("eval"));
    }

    let vocabs = Vocabularies::build(train_raw.iter().map(|(c, e)| (c, &e.target_entity_id)));
    let featurizer = Featurizer { space: FeatureSpace { vocabs, tables }, options };
    let to_examples = |raw: Vec<(Context, &EngagementEvent)>| -> Result<Vec<Example>> {
        raw.into_iter()
            .map(|(prepared, e)| {
                let bundle = featurizer.bundle(&prepared, &e.target_entity_id, catalog)?;
                Ok(Example {
                    context: e.context.clone(),
                    prepared,
                    target: e.target_entity_id.clone(),
                    label: e.label,
                    timestamp: e.timestamp,
                    bundle,
                })
            })
            .collect()
    };
    let train = to_examples(train_raw)?;
    let eval = to_examples(eval_raw)?;
    let schema = featurizer.schema();
    Ok(Dataset { featurizer, schema, train, eval, count_window_end, eval_start })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub eval_auc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

impl History {
    pub fn first_train_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.train_loss)
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

/// Mean loss and row-level AUC of a model on labeled rows.
pub fn loss_and_auc(params: &ModelParams, rows: &[Example]) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut scores = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for ex in rows {
        let tape = params.forward(&ex.bundle)?;
        total += crate::model::bce_with_logit(tape.logit, f64::from(ex.label));
        scores.push(tape.p);
        labels.push(ex.label);
    }
    Ok((total / rows.len().max(1) as f64, auc(&scores, &labels)))
}

/// Deterministic row order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Runs minibatch Adam on `params` in place.
pub fn fit(params: &mut ModelParams, train: &[Example], eval: Option<&[Example]>, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let mut adam = params.new_adam(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut grads: Gradients = params.weights.zeros_like();
    let mut history = History::default();
    let mut losses = vec![0.0; train.len()];
    let mut best_eval = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let tape = params.forward(&train[i].bundle)?;
                let loss = params.backward_into(&tape, train[i].label, scale, &mut grads);
                losses[i] = loss;
                batch_loss += loss;
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_no, loss: batch_loss });
            }
            params.adam_step(&grads, &mut adam)?;
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let (eval_loss, eval_auc) = match eval {
            Some(rows) if !rows.is_empty() => {
                let (l, a) = loss_and_auc(params, rows)?;
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        history.epochs.push(EpochStats { epoch, train_loss, eval_loss, eval_auc });
        if cfg.early_stop {
            if let Some(l) = eval_loss {
                if l < best_eval {
                    best_eval = l;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= 2 {
                        break;
                    }
                }
            }
        }
    }
    params.version = params.fingerprint();
    Ok(history)
}

pub fn train(
    train_rows: &[Example],
    eval_rows: Option<&[Example]>,
    schema: FeatureSchema,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelParams, History)> {
    let mut params = ModelParams::init(cfg.effective_model_config(model_cfg), schema)?;
    let history = fit(&mut params, train_rows, eval_rows, cfg)?;
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_events, generate_world, WorldConfig};

    fn world_cfg() -> WorldConfig {
        WorldConfig {
            n_entities: 300,
            n_users: 60,
            n_queries: 80,
            n_search: 1500,
            n_mlt: 900,
            n_prequery: 300,
            ..WorldConfig::default()
        }
    }

    fn small_model() -> ModelConfig {
        ModelConfig { embed_dim: 8, hidden_dim: 16, ..ModelConfig::default() }
    }

    fn data() -> (Catalog, Vec<EngagementEvent>) {
        let w = generate_world(&world_cfg()).unwrap();
        let log = generate_events(&w).unwrap();
        (w.catalog, log.events)
    }

    #[test]
    fn specialist_keeps_only_its_task() {
        let (cat, events) = data();
        let cfg = TrainConfig { task_filter: Some(TaskKind::MoreLikeThis), ..TrainConfig::default() };
        let ds = assemble_dataset(&events, &cat, &cfg).unwrap();
        assert!(ds.train.iter().chain(&ds.eval).all(|e| e.context.task == TaskKind::MoreLikeThis));
    }

    #[test]
    fn no_imputation_leaves_mlt_tokens_null() {
        let (cat, events) = data();
        let cfg = TrainConfig { disable_imputation: true, ..TrainConfig::default() };
        let ds = assemble_dataset(&events, &cat, &cfg).unwrap();
        let mlt: Vec<_> = ds.train.iter().filter(|e| e.context.task == TaskKind::MoreLikeThis).collect();
        assert!(!mlt.is_empty());
        assert!(mlt.iter().all(|e| e.bundle.query_token_idxs == [NULL_ID; 4]));

        let ds = assemble_dataset(&events, &cat, &TrainConfig::default()).unwrap();
        for e in ds.train.iter().filter(|e| e.context.task == TaskKind::MoreLikeThis) {
            assert_ne!(e.bundle.query_token_idxs, [NULL_ID; 4]);
        }
    }

    #[test]
    fn no_task_feature_nulls_task() {
        let (cat, events) = data();
        let cfg = TrainConfig { disable_task_feature: true, ..TrainConfig::default() };
        let ds = assemble_dataset(&events, &cat, &cfg).unwrap();
        assert!(ds.train.iter().chain(&ds.eval).all(|e| e.bundle.task_idx == NULL_ID));
    }

    #[test]
    fn split_counts_match_a_timestamp_recount() {
        let (cat, events) = data();
        let cfg = TrainConfig::default();
        let ds = assemble_dataset(&events, &cat, &cfg).unwrap();
        // Recount straight from the sorted log.
        let n = events.len();
        let count_end = events[(n as f64 * 0.5) as usize].timestamp;
        let tail: Vec<_> = events.iter().filter(|e| e.timestamp >= count_end).collect();
        let eval_start = tail[(tail.len() as f64 * 0.8) as usize].timestamp;
        let n_train = tail.iter().filter(|e| e.timestamp < eval_start).count();
        let n_eval = tail.len() - n_train;
        assert_eq!((ds.train.len(), ds.eval.len()), (n_train, n_eval));
        assert!(ds.train.iter().all(|e| e.timestamp < ds.eval_start));
        assert!(ds.eval.iter().all(|e| e.timestamp >= ds.eval_start));
    }

    #[test]
    fn counts_never_come_from_the_future() {
        let (cat, events) = data();
        let ds = assemble_dataset(&events, &cat, &TrainConfig::default()).unwrap();
        assert_eq!(ds.featurizer.space.tables.window_end(), ds.count_window_end);
        assert!(ds.train.iter().chain(&ds.eval).all(|e| e.timestamp >= ds.count_window_end));
    }

    #[test]
    fn unsorted_events_are_rejected() {
        let (cat, mut events) = data();
        events.swap(0, 100);
        assert!(assemble_dataset(&events, &cat, &TrainConfig::default()).is_err());
    }

    #[test]
    fn eval_fraction_is_validated() {
        let (cat, events) = data();
        let cfg = TrainConfig { eval_fraction: 1.0, ..TrainConfig::default() };
        assert!(matches!(assemble_dataset(&events, &cat, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (cat, events) = data();
        let cfg = TrainConfig { lr: 0.0, epochs: 3, ..TrainConfig::default() };
        let ds = assemble_dataset(&events, &cat, &cfg).unwrap();
        let init = ModelParams::init(small_model(), ds.schema.clone()).unwrap();
        let (params, history) = train(&ds.train, None, ds.schema.clone(), &small_model(), &cfg).unwrap();
        assert_eq!(params.weights, init.weights);
        let first = history.epochs[0].train_loss;
        assert!(history.epochs.iter().all(|e| e.train_loss == first));
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (cat, events) = data();
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
        let ds = assemble_dataset(&events, &cat, &cfg).unwrap();
        let (a, ha) = train(&ds.train, Some(&ds.eval), ds.schema.clone(), &small_model(), &cfg).unwrap();
        let (b, hb) = train(&ds.train, Some(&ds.eval), ds.schema.clone(), &small_model(), &cfg).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(ha, hb);
    }

    #[test]
    fn eval_rows_never_feed_gradients() {
        let (cat, events) = data();
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let ds = assemble_dataset(&events, &cat, &cfg).unwrap();
        let (with_eval, _) = train(&ds.train, Some(&ds.eval), ds.schema.clone(), &small_model(), &cfg).unwrap();
        let (without, _) = train(&ds.train, None, ds.schema.clone(), &small_model(), &cfg).unwrap();
        assert_eq!(with_eval.weights, without.weights);
    }

    #[test]
    fn shuffling_depends_only_on_seed_and_epoch() {
        assert_eq!(epoch_order(100, 3, 1), epoch_order(100, 3, 1));
        assert_ne!(epoch_order(100, 3, 1), epoch_order(100, 3, 2));
        assert_ne!(epoch_order(100, 3, 1), epoch_order(100, 4, 1));
    }

    #[test]
    fn crossing_switch_removes_cross_layers() {
        let cfg = TrainConfig { disable_crossing: true, ..TrainConfig::default() };
        let eff = cfg.effective_model_config(&ModelConfig::default());
        assert_eq!(eff.n_cross_layers, 0);
        assert_eq!(eff.n_residual_blocks, ModelConfig::default().n_residual_blocks);
    }

    #[test]
    fn featurizer_round_trips() {
        let (cat, events) = data();
        let ds = assemble_dataset(&events, &cat, &TrainConfig { disable_task_feature: true, ..TrainConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.featurizer.save(dir.path()).unwrap();
        let back = Featurizer::load(dir.path()).unwrap();
        assert_eq!(back.options, ds.featurizer.options);
        let ex = &ds.eval[0];
        let prepared = back.prepare_context(&ex.context, &cat).unwrap();
        assert_eq!(back.bundle(&prepared, &ex.target, &cat).unwrap(), ex.bundle);
    }
}
