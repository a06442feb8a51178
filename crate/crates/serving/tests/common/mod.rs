#![allow(dead_code)]

use unirank::datagen::{generate_events, generate_world, World, WorldConfig};
use unirank::model::ModelConfig;
use unirank::personalization::{
    build_user_vectors, kmeans, pretrain_mf, MfConfig, PersonalizationMode, Personalizer,
};
use unirank::ranker::{train_ranker, RankingModel};
use unirank::training::{assemble_dataset, TrainConfig};
use unirank_serving::{Ranker, ServeConfig};

pub fn world(n_entities: usize) -> World {
    let cfg = WorldConfig {
        n_entities,
        n_users: 60,
        n_queries: 80,
        n_search: 1500,
        n_mlt: 750,
        n_prequery: 250,
        ..WorldConfig::default()
    };
    generate_world(&cfg).unwrap()
}

/// A one-epoch model for `mode`; `seed` only changes the initialization.
pub fn model(world: &World, mode: Option<PersonalizationMode>, seed: u64) -> RankingModel {
    let events = generate_events(world).unwrap().events;
    let tc = TrainConfig { epochs: 1, seed, ..TrainConfig::default() };
    let ds = assemble_dataset(&events, &world.catalog, &tc).unwrap();
    let history: Vec<_> = events.iter().filter(|e| e.timestamp < ds.count_window_end).cloned().collect();
    let mc = ModelConfig { embed_dim: 8, hidden_dim: 16, seed, ..ModelConfig::default() };
    let personalizer = mode.map(|m| {
        let repr = pretrain_mf(&history, &world.catalog, &MfConfig { dim: 8, epochs: 2, ..MfConfig::default() }).unwrap();
        let clusters = kmeans(&build_user_vectors(&history, Some(&repr), 8), 6, 1, 100, 1e-6).unwrap();
        Personalizer::new(m, Some(clusters), Some(repr)).unwrap()
    });
    train_ranker(&ds, &mc, &tc, personalizer).unwrap().0
}

pub fn ranker(world: &World, model: RankingModel) -> Ranker {
    Ranker::with_model(world.catalog.clone(), ServeConfig::default(), model).unwrap()
}
