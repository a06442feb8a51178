//! The personalization ladder: no user signal, user clusters, pretrained
//! user/item representations as features, and fine-tuned representations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Catalog, Context, EngagementEvent, EntityId, UserId};
use crate::error::{Error, Result};
use crate::features::{FeatureBundle, FeatureSchema, Vocabularies, NULL_ID};
use crate::model::checkpoint::{read_container, write_container};
use crate::model::{dot, sigmoid, AdamConfig, AdamState, ModelConfig, ModelParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PersonalizationMode {
    None,
    Cluster,
    ReprFeatures,
    ReprFinetune,
}

impl PersonalizationMode {
    pub const LADDER: [PersonalizationMode; 4] = [
        PersonalizationMode::None,
        PersonalizationMode::Cluster,
        PersonalizationMode::ReprFeatures,
        PersonalizationMode::ReprFinetune,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PersonalizationMode::None => "NONE",
            PersonalizationMode::Cluster => "CLUSTER",
            PersonalizationMode::ReprFeatures => "REPR_FEATURES",
            PersonalizationMode::ReprFinetune => "REPR_FINETUNE",
        }
    }

    /// Whether scores are shared by every user with the same cluster and
    /// context, which is what makes result caching sound.
    pub fn is_cacheable(self) -> bool {
        matches!(self, PersonalizationMode::None | PersonalizationMode::Cluster)
    }

    pub fn needs_clusters(self) -> bool {
        self == PersonalizationMode::Cluster
    }

    pub fn needs_repr(self) -> bool {
        matches!(self, PersonalizationMode::ReprFeatures | PersonalizationMode::ReprFinetune)
    }
}

impl fmt::Display for PersonalizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PersonalizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::LADDER
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s) || m.as_str().replace('_', "-").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidValue(format!("unknown personalization mode `{s}`")))
    }
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normalize(v: &mut [f64]) {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Default width of the count-based user profile.
pub const PROFILE_DIM: usize = 32;

/// One vector per user seen in `events`, built from that user's positives.
///
/// With `repr`, the vector is the normalized sum of the item vectors the user
/// engaged with. Without it, it is the user's positive counts over the
/// `dim` most engaged entities, normalized. Users without positives get the
/// zero vector.
pub fn build_user_vectors(
    events: &[EngagementEvent],
    repr: Option<&PretrainedRepr>,
    dim: usize,
) -> BTreeMap<UserId, Vec<f64>> {
    let mut per_user: BTreeMap<&UserId, BTreeMap<&EntityId, u32>> = BTreeMap::new();
    let mut totals: BTreeMap<&EntityId, u32> = BTreeMap::new();
    for e in events {
        let Some(user) = &e.context.user_id else { continue };
        let counts = per_user.entry(user).or_default();
        if e.is_positive() {
            *counts.entry(&e.target_entity_id).or_default() += 1;
            *totals.entry(&e.target_entity_id).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&EntityId, u32)> = totals.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let top: BTreeMap<&EntityId, usize> = ranked.iter().take(dim).enumerate().map(|(j, (id, _))| (*id, j)).collect();

    per_user
        .into_iter()
        .map(|(user, counts)| {
            let mut v = match repr {
                Some(r) => {
                    let mut v = vec![0.0; r.dim()];
                    for (id, &c) in &counts {
                        if let Some(item) = r.item_vector(id) {
                            v.iter_mut().zip(item).for_each(|(a, b)| *a += f64::from(c) * b);
                        }
                    }
                    v
                }
                None => {
                    let mut v = vec![0.0; dim];
                    for (id, &c) in &counts {
                        if let Some(&j) = top.get(id) {
                            v[j] += f64::from(c);
                        }
                    }
                    v
                }
            };
            normalize(&mut v);
            (user.clone(), v)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignment: BTreeMap<UserId, u32>,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    /// Cluster of users without a usable profile.
    pub cold_cluster: u32,
}

impl UserClusterModel {
    /// Nearest centroid, ties to the lowest cluster id.
    pub fn nearest(&self, v: &[f64]) -> u32 {
        nearest(&self.centroids, v).0 as u32
    }

    pub fn cluster_of(&self, user: Option<&UserId>) -> u32 {
        user.and_then(|u| self.assignment.get(u)).copied().unwrap_or(self.cold_cluster)
    }

    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: UserClusterModel = serde_json::from_slice(&std::fs::read(path)?)?;
        if model.k == 0 || model.centroids.len() != model.k {
            return Err(Error::Corrupt("cluster model has an inconsistent k".into()));
        }
        if model.centroids.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Corrupt("non-finite centroid".into()));
        }
        Ok(model)
    }
}

fn nearest(centroids: &[Vec<f64>], v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(centroid, v);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

pub const DEFAULT_K: usize = 32;

/// k-means++ seeding followed by Lloyd iterations until no centroid moves by
/// `tol` or more, or `max_iters` is reached.
pub fn kmeans(
    vectors: &BTreeMap<UserId, Vec<f64>>,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<UserClusterModel> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let points: Vec<&Vec<f64>> = vectors.values().collect();
    let distinct: BTreeSet<Vec<u64>> = points.iter().map(|p| p.iter().map(|x| x.to_bits()).collect()).collect();
    if distinct.len() < k {
        return Err(Error::DegenerateInput { k, distinct: distinct.len() });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::ShapeMismatch("user vectors differ in length".into()));
    }

    let mut rng = seeded(seed, 40);
    let mut centroids: Vec<Vec<f64>> = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < k {
        let weights: Vec<f64> = points.iter().map(|p| nearest(&centroids, p).1).collect();
        let pick = WeightedIndex::new(&weights).map_err(|e| Error::InvalidValue(e.to_string()))?.sample(&mut rng);
        centroids.push(points[pick].clone());
    }

    let mut labels = vec![0usize; points.len()];
    let mut inertia_history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut inertia = 0.0;
        for (label, p) in labels.iter_mut().zip(&points) {
            let (c, d) = nearest(&centroids, p);
            *label = c;
            inertia += d;
        }
        inertia_history.push(inertia);
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&label, p) in labels.iter().zip(&points) {
            counts[label] += 1;
            sums[label].iter_mut().zip(p.iter()).for_each(|(s, x)| *s += x);
        }
        let mut movement: f64 = 0.0;
        for c in 0..k {
            // An empty cluster keeps its centroid.
            if counts[c] == 0 {
                continue;
            }
            let updated: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            movement = movement.max(sq_dist(&updated, &centroids[c]).sqrt());
            centroids[c] = updated;
        }
        if movement < tol {
            break;
        }
    }
    // Final assignment against the final centroids.
    let mut inertia = 0.0;
    for (label, p) in labels.iter_mut().zip(&points) {
        let (c, d) = nearest(&centroids, p);
        *label = c;
        inertia += d;
    }
    inertia_history.push(inertia);

    let cold_cluster = nearest(&centroids, &vec![0.0; dim]).0 as u32;
    let assignment = vectors.keys().cloned().zip(labels.into_iter().map(|l| l as u32)).collect();
    Ok(UserClusterModel { k, centroids, assignment, inertia_history, cold_cluster })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Uniform catalog negatives drawn per positive, each epoch.
    pub neg_ratio: usize,
    /// Also train on the logged label-0 impressions.
    pub logged_negatives: bool,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for MfConfig {
    fn default() -> Self {
        MfConfig { dim: 16, epochs: 5, lr: 0.01, batch_size: 256, neg_ratio: 0, logged_negatives: true, init_scale: 0.1, seed: 7 }
    }
}

/// Logistic matrix factorization: `p(u, i) = σ(U_u · V_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedRepr {
    pub users: Vec<UserId>,
    pub items: Vec<EntityId>,
    pub u: Tensor,
    pub v: Tensor,
    pub config: MfConfig,
    pub loss_curve: Vec<f64>,
    user_index: BTreeMap<UserId, usize>,
    item_index: BTreeMap<EntityId, usize>,
}

impl PretrainedRepr {
    fn new(users: Vec<UserId>, items: Vec<EntityId>, u: Tensor, v: Tensor, config: MfConfig, loss_curve: Vec<f64>) -> Self {
        let user_index = users.iter().cloned().enumerate().map(|(i, id)| (id, i)).collect();
        let item_index = items.iter().cloned().enumerate().map(|(i, id)| (id, i)).collect();
        PretrainedRepr { users, items, u, v, config, loss_curve, user_index, item_index }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn user_vector(&self, user: &UserId) -> Option<&[f64]> {
        self.user_index.get(user).map(|&i| self.u.row(i))
    }

    pub fn item_vector(&self, item: &EntityId) -> Option<&[f64]> {
        self.item_index.get(item).map(|&i| self.v.row(i))
    }

    /// `σ(U_u · V_i)`, or 0.5 when either side is unknown.
    pub fn score(&self, user: Option<&UserId>, item: &EntityId) -> f64 {
        match (user.and_then(|u| self.user_vector(u)), self.item_vector(item)) {
            (Some(u), Some(v)) => sigmoid(dot(u, v)),
            _ => 0.5,
        }
    }

    /// `[σ(U_u · V_i), U_u ⊙ V_i]`, zeros standing in for unknown vectors.
    pub fn features(&self, user: Option<&UserId>, item: &EntityId) -> Vec<f64> {
        let mut out = Vec::with_capacity(1 + self.dim());
        match (user.and_then(|u| self.user_vector(u)), self.item_vector(item)) {
            (Some(u), Some(v)) => {
                out.push(sigmoid(dot(u, v)));
                out.extend(u.iter().zip(v).map(|(a, b)| a * b));
            }
            _ => {
                out.push(0.5);
                out.extend(std::iter::repeat_n(0.0, self.dim()));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "users": self.users,
            "items": self.items,
            "config": self.config,
            "loss_curve": self.loss_curve,
        });
        write_container(path, "repr", meta, &[("U".to_owned(), &self.u), ("V".to_owned(), &self.v)])
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            users: Vec<UserId>,
            items: Vec<EntityId>,
            config: MfConfig,
            loss_curve: Vec<f64>,
        }
        let (meta, tensors) = read_container(path, "repr")?;
        let meta: Meta = serde_json::from_value(meta)?;
        let mut tensors = tensors.into_iter();
        let (Some((nu, u)), Some((nv, v)), None) = (tensors.next(), tensors.next(), tensors.next()) else {
            return Err(Error::Corrupt("repr container must hold exactly U and V".into()));
        };
        let d = meta.config.dim;
        if nu != "U" || nv != "V" || u.rows != meta.users.len() || v.rows != meta.items.len() || u.cols != d || v.cols != d {
            return Err(Error::Corrupt("repr tensors do not match their metadata".into()));
        }
        if !u.is_finite() || !v.is_finite() {
            return Err(Error::Corrupt("non-finite representation".into()));
        }
        Ok(PretrainedRepr::new(meta.users, meta.items, u, v, meta.config, meta.loss_curve))
    }
}

/// Fits logistic MF on the labeled events of known users. Positives also get
/// `neg_ratio` uniform catalog negatives, fresh each epoch; logged label-0
/// impressions join when `logged_negatives` is set.
pub fn pretrain_mf(events: &[EngagementEvent], catalog: &Catalog, cfg: &MfConfig) -> Result<PretrainedRepr> {
    if cfg.dim == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("mf dim and batch_size must be > 0".into()));
    }
    let users: Vec<UserId> =
        events.iter().filter_map(|e| e.context.user_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let items: Vec<EntityId> = catalog.entities().iter().map(|e| e.id.clone()).collect();
    let user_index: BTreeMap<&UserId, usize> = users.iter().enumerate().map(|(i, u)| (u, i)).collect();
    let labeled: Vec<(usize, usize, f64)> = events
        .iter()
        .filter(|e| e.is_positive() || cfg.logged_negatives)
        .filter_map(|e| {
            let u = *user_index.get(e.context.user_id.as_ref()?)?;
            Some((u, catalog.position(&e.target_entity_id)?, f64::from(e.label)))
        })
        .collect();
    if !labeled.iter().any(|r| r.2 > 0.0) {
        return Err(Error::EmptySplit("mf positives"));
    }

    let mut init_rng = seeded(cfg.seed, 50);
    let mut u = Tensor::uniform(users.len(), cfg.dim, cfg.init_scale, &mut init_rng);
    let mut v = Tensor::uniform(items.len(), cfg.dim, cfg.init_scale, &mut init_rng);
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, [&u, &v]);
    let mut gu = Tensor::zeros(u.rows, u.cols);
    let mut gv = Tensor::zeros(v.rows, v.cols);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = seeded(cfg.seed, 100 + epoch as u64);
        let mut rows: Vec<(usize, usize, f64)> = Vec::with_capacity(labeled.len() * (1 + cfg.neg_ratio));
        for &(ui, ii, y) in &labeled {
            rows.push((ui, ii, y));
            if y > 0.0 {
                for _ in 0..cfg.neg_ratio {
                    rows.push((ui, rng.random_range(0..items.len()), 0.0));
                }
            }
        }
        rows.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch_no, batch) in rows.chunks(cfg.batch_size).enumerate() {
            gu.fill(0.0);
            gv.fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &(ui, ii, y) in batch {
                let s = dot(u.row(ui), v.row(ii));
                batch_loss += crate::model::bce_with_logit(s, y);
                let g = (sigmoid(s) - y) * scale;
                for k in 0..cfg.dim {
                    gu.row_mut(ui)[k] += g * v.row(ii)[k];
                    gv.row_mut(ii)[k] += g * u.row(ui)[k];
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_no, loss: batch_loss });
            }
            total += batch_loss;
            adam.step(&mut [&mut u, &mut v], &[&gu, &gv])?;
        }
        loss_curve.push(total / rows.len() as f64);
    }
    Ok(PretrainedRepr::new(users, items, u, v, cfg.clone(), loss_curve))
}

/// Offset of cluster ids inside the cluster vocabulary, past NULL and OOV.
pub const CLUSTER_ID_OFFSET: u32 = 2;

/// A ladder mode together with the artifacts it needs.
#[derive(Debug, Clone)]
pub struct Personalizer {
    pub mode: PersonalizationMode,
    pub clusters: Option<UserClusterModel>,
    pub repr: Option<PretrainedRepr>,
}

impl Personalizer {
    pub fn none() -> Self {
        Personalizer { mode: PersonalizationMode::None, clusters: None, repr: None }
    }

    pub fn new(
        mode: PersonalizationMode,
        clusters: Option<UserClusterModel>,
        repr: Option<PretrainedRepr>,
    ) -> Result<Self> {
        if mode.needs_clusters() && clusters.is_none() {
            return Err(Error::MissingArtifact(mode.to_string()));
        }
        if mode.needs_repr() && repr.is_none() {
            return Err(Error::MissingArtifact(mode.to_string()));
        }
        Ok(Personalizer { mode, clusters, repr })
    }

    /// The model input layout under this mode.
    pub fn schema(&self, base: &FeatureSchema) -> FeatureSchema {
        let mut schema = base.clone();
        match self.mode {
            PersonalizationMode::Cluster => {
                let k = self.clusters.as_ref().map_or(0, |c| c.k);
                schema.cluster_rows = Some(k + CLUSTER_ID_OFFSET as usize);
            }
            PersonalizationMode::ReprFeatures => {
                schema.extra_dense_len = 1 + self.repr.as_ref().map_or(0, |r| r.dim());
            }
            PersonalizationMode::None | PersonalizationMode::ReprFinetune => {}
        }
        schema
    }

    /// The model architecture under this mode.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.affinity_inputs = self.mode == PersonalizationMode::ReprFinetune;
        cfg
    }

    /// Rewrites a base bundle for this mode.
    pub fn apply(&self, mut bundle: FeatureBundle, ctx: &Context, target: &EntityId) -> Result<FeatureBundle> {
        let missing = || Error::MissingArtifact(self.mode.to_string());
        match self.mode {
            PersonalizationMode::None => {
                bundle.user_id_idx = NULL_ID;
            }
            PersonalizationMode::Cluster => {
                let clusters = self.clusters.as_ref().ok_or_else(missing)?;
                bundle.user_id_idx = NULL_ID;
                bundle.cluster_idx = Some(clusters.cluster_of(ctx.user_id.as_ref()) + CLUSTER_ID_OFFSET);
            }
            PersonalizationMode::ReprFeatures => {
                let repr = self.repr.as_ref().ok_or_else(missing)?;
                bundle.extra_dense.extend(repr.features(ctx.user_id.as_ref(), target));
            }
            PersonalizationMode::ReprFinetune => {
                self.repr.as_ref().ok_or_else(missing)?;
            }
        }
        Ok(bundle)
    }

    /// Copies pretrained vectors into the user and entity tables of a freshly
    /// initialized model.
    pub fn init_params(&self, params: &mut ModelParams, vocabs: &Vocabularies) -> Result<()> {
        if self.mode != PersonalizationMode::ReprFinetune {
            return Ok(());
        }
        let repr = self.repr.as_ref().ok_or_else(|| Error::MissingArtifact(self.mode.to_string()))?;
        if repr.dim() != params.config.embed_dim {
            return Err(Error::InvalidConfig(format!(
                "fine-tuning needs repr dim {} to equal embed_dim {}",
                repr.dim(),
                params.config.embed_dim
            )));
        }
        let user_rows = repr.users.iter().filter_map(|u| {
            let idx = vocabs.user.lookup(u.as_str());
            (idx >= 2).then(|| (idx as usize, repr.user_vector(u).expect("known user").to_vec()))
        });
        ModelParams::set_rows(&mut params.weights.e_user, user_rows.collect::<Vec<_>>())?;
        let item_rows = repr.items.iter().filter_map(|e| {
            let idx = vocabs.entity.lookup(e.as_str());
            (idx >= 2).then(|| (idx as usize, repr.item_vector(e).expect("known item").to_vec()))
        });
        ModelParams::set_rows(&mut params.weights.e_entity, item_rows.collect::<Vec<_>>())?;
        params.version = params.fingerprint();
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("personalization.json"), serde_json::to_vec_pretty(&serde_json::json!({ "mode": self.mode }))?)?;
        if let Some(c) = &self.clusters {
            c.save(&dir.join("clusters.json"))?;
        }
        if let Some(r) = &self.repr {
            r.save(&dir.join("repr.bin"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Stored {
            mode: PersonalizationMode,
        }
        let path = dir.join("personalization.json");
        let mode = if path.exists() {
            serde_json::from_slice::<Stored>(&std::fs::read(&path)?)?.mode
        } else {
            PersonalizationMode::None
        };
        let clusters_path = dir.join("clusters.json");
        let repr_path = dir.join("repr.bin");
        let clusters = if mode.needs_clusters() { Some(UserClusterModel::load(&clusters_path)?) } else { None };
        let repr = if mode.needs_repr() { Some(PretrainedRepr::load(&repr_path)?) } else { None };
        Personalizer::new(mode, clusters, repr)
    }
}
