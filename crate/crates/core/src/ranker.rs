//! A trained ranker: parameters plus everything needed to featurize a
//! request exactly as during training.

use std::path::Path;

use crate::domain::{Catalog, Context, EntityId};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_with, EvalGroup, EvalReport};
use crate::features::{FeatureBundle, FeatureSchema};
use crate::model::{ModelConfig, ModelParams};
use crate::personalization::{PersonalizationMode, Personalizer};
use crate::training::{fit, Dataset, Example, Featurizer, History, TrainConfig};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.json";

#[derive(Debug, Clone)]
pub struct RankingModel {
    pub params: ModelParams,
    pub featurizer: Featurizer,
    /// `None` keeps the base features, user id included.
    pub personalizer: Option<Personalizer>,
}

impl RankingModel {
    pub fn version(&self) -> &str {
        &self.params.version
    }

    pub fn mode(&self) -> Option<PersonalizationMode> {
        self.personalizer.as_ref().map(|p| p.mode)
    }

    /// True when scores cannot depend on anything about the user beyond the
    /// cluster id.
    pub fn is_cacheable(&self) -> bool {
        self.mode().is_some_and(PersonalizationMode::is_cacheable)
    }

    pub fn schema(&self) -> FeatureSchema {
        expected_schema(&self.featurizer, self.personalizer.as_ref())
    }

    pub fn prepare_context(&self, ctx: &Context, catalog: &Catalog) -> Result<Context> {
        self.featurizer.prepare_context(ctx, catalog)
    }

    /// The model input for one candidate under an already prepared context.
    pub fn bundle(&self, prepared: &Context, target: &EntityId, catalog: &Catalog) -> Result<FeatureBundle> {
        let base = self.featurizer.bundle(prepared, target, catalog)?;
        match &self.personalizer {
            Some(p) => p.apply(base, prepared, target),
            None => Ok(base),
        }
    }

    /// Scores candidates for a raw request context.
    pub fn score_candidates(&self, ctx: &Context, candidates: &[EntityId], catalog: &Catalog) -> Result<Vec<f64>> {
        let prepared = self.prepare_context(ctx, catalog)?;
        candidates.iter().map(|id| self.params.score(&self.bundle(&prepared, id, catalog)?)).collect()
    }

    pub fn evaluate(&self, groups: &[EvalGroup], catalog: &Catalog) -> Result<EvalReport> {
        let mut report = evaluate_with(groups, self.version(), |g| {
            let ids: Vec<EntityId> = g.ids();
            self.score_candidates(&g.raw_context, &ids, catalog)
        })?;
        report.seed = Some(self.params.config.seed);
        Ok(report)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.featurizer.save(dir)?;
        if let Some(p) = &self.personalizer {
            p.save(dir)?;
        } else {
            let stale = dir.join("personalization.json");
            if stale.exists() {
                std::fs::remove_file(stale)?;
            }
        }
        self.params.save(&dir.join(CHECKPOINT_FILE))
    }

    /// Loads a saved ranker, refusing a checkpoint whose schema does not
    /// match the stored feature space and personalization artifacts.
    pub fn load(dir: &Path) -> Result<Self> {
        let ckpt = dir.join(CHECKPOINT_FILE);
        if !ckpt.exists() {
            return Err(Error::MissingArtifact(ckpt.display().to_string()));
        }
        let featurizer = Featurizer::load(dir)?;
        let personalizer =
            if dir.join("personalization.json").exists() { Some(Personalizer::load(dir)?) } else { None };
        let expected = expected_schema(&featurizer, personalizer.as_ref());
        let params = ModelParams::load(&ckpt, Some(&expected.hash()))?;
        Ok(RankingModel { params, featurizer, personalizer })
    }
}

fn expected_schema(featurizer: &Featurizer, personalizer: Option<&Personalizer>) -> FeatureSchema {
    let base = featurizer.schema();
    personalizer.map_or_else(|| base.clone(), |p| p.schema(&base))
}

/// Rewrites every row of a dataset for a personalization mode.
pub fn personalize_rows(rows: &[Example], personalizer: Option<&Personalizer>) -> Result<Vec<Example>> {
    let Some(p) = personalizer else { return Ok(rows.to_vec()) };
    rows.iter()
        .map(|ex| {
            let mut out = ex.clone();
            out.bundle = p.apply(ex.bundle.clone(), &ex.prepared, &ex.target)?;
            Ok(out)
        })
        .collect()
}

/// Trains a ranker on an assembled dataset.
pub fn train_ranker(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    personalizer: Option<Personalizer>,
) -> Result<(RankingModel, History)> {
    let train_rows = personalize_rows(&dataset.train, personalizer.as_ref())?;
    let eval_rows = personalize_rows(&dataset.eval, personalizer.as_ref())?;
    let mut config = train_cfg.effective_model_config(model_cfg);
    let schema = match &personalizer {
        Some(p) => {
            config = p.model_config(&config);
            p.schema(&dataset.schema)
        }
        None => dataset.schema.clone(),
    };
    let mut params = ModelParams::init(config, schema)?;
    if let Some(p) = &personalizer {
        p.init_params(&mut params, &dataset.featurizer.space.vocabs)?;
    }
    let history = fit(&mut params, &train_rows, Some(&eval_rows), train_cfg)?;
    Ok((RankingModel { params, featurizer: dataset.featurizer.clone(), personalizer }, history))
}
