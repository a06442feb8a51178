mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use unirank::domain::{CountryCode, EntityId, UserId};
use unirank::personalization::PersonalizationMode;
use unirank_serving::loadgen::sample_requests;
use unirank_serving::{RankRequest, Ranker, ServeConfig, ServeError};

fn users_by_cluster(ranker: &Ranker) -> BTreeMap<u32, Vec<(UserId, CountryCode)>> {
    let model = ranker.snapshot().unwrap();
    let clusters = model.personalizer.as_ref().unwrap().clusters.as_ref().unwrap();
    let mut out: BTreeMap<u32, Vec<(UserId, CountryCode)>> = BTreeMap::new();
    for (user, &c) in &clusters.assignment {
        out.entry(c).or_default().push((user.clone(), CountryCode::new("US").unwrap()));
    }
    out
}

#[test]
fn same_cluster_users_share_cached_lists() {
    let world = common::world(200);
    let ranker = common::ranker(&world, common::model(&world, Some(PersonalizationMode::Cluster), 1));
    let groups = users_by_cluster(&ranker);
    let (_, members) = groups.iter().find(|(_, m)| m.len() >= 2).expect("a cluster with two users");
    let (a, b) = (&members[0], &members[1]);
    let req = |u: &UserId| RankRequest { user_id: Some(u.clone()), query: Some("a".into()), ..RankRequest::new(a.1) };
    let first = ranker.rank(&req(&a.0)).unwrap();
    let second = ranker.rank(&req(&b.0)).unwrap();
    assert!(!first.cache_hit);
    assert!(second.cache_hit);
    assert_eq!(first.items, second.items);
    assert_eq!(serde_json::to_vec(&first.items).unwrap(), serde_json::to_vec(&second.items).unwrap());
}

#[test]
fn cached_and_fresh_lists_agree() {
    let world = common::world(200);
    for mode in [PersonalizationMode::None, PersonalizationMode::Cluster] {
        let ranker = common::ranker(&world, common::model(&world, Some(mode), 1));
        let reqs = sample_requests(&world.catalog, &world.users, 150, 3);
        for req in reqs.iter().chain(&reqs) {
            let Ok(served) = ranker.rank(req) else { continue };
            let fresh = ranker.rank_fresh(req).unwrap();
            assert_eq!(served.items.len(), fresh.items.len());
            for (s, f) in served.items.iter().zip(&fresh.items) {
                assert_eq!(s.entity_id, f.entity_id);
                assert!((s.score - f.score).abs() <= 1e-9);
            }
        }
        assert!(ranker.stats().cache_hits > 0);
    }
}

#[test]
fn per_user_modes_never_touch_the_cache() {
    let world = common::world(200);
    for mode in [PersonalizationMode::ReprFeatures, PersonalizationMode::ReprFinetune] {
        let ranker = common::ranker(&world, common::model(&world, Some(mode), 1));
        for req in sample_requests(&world.catalog, &world.users, 200, 5) {
            if let Ok(r) = ranker.rank(&req) {
                assert!(!r.cache_hit);
            }
        }
        assert_eq!(ranker.cache_lookups(), 0);
        assert_eq!(ranker.cache_len(), 0);
    }
}

#[test]
fn finetuned_orders_depend_on_the_user() {
    let world = common::world(200);
    let ranker = common::ranker(&world, common::model(&world, Some(PersonalizationMode::ReprFinetune), 1));
    let country = world.users[0].country;
    let orders: Vec<Vec<EntityId>> = world
        .users
        .iter()
        .filter(|u| u.country == country)
        .map(|u| {
            let req = RankRequest { user_id: Some(u.user_id.clone()), ..RankRequest::new(country) };
            ranker.rank(&req).unwrap().items.into_iter().map(|i| i.entity_id).collect()
        })
        .collect();
    assert!(orders.iter().any(|o| o != &orders[0]));
}

#[test]
fn k_beyond_candidates_returns_everything() {
    let world = common::world(200);
    let ranker = common::ranker(&world, common::model(&world, Some(PersonalizationMode::None), 1));
    let name = &world.catalog.entities()[0].display_name;
    let token = unirank::features::normalize_query(name).join(" ");
    let country = *world.catalog.entities()[0].countries.iter().next().unwrap();
    let req = RankRequest { query: Some(token), k: Some(100), ..RankRequest::new(country) };
    let resp = ranker.rank(&req).unwrap();
    assert!(!resp.items.is_empty() && resp.items.len() < 100);
    assert!(resp.items.windows(2).all(|w| w[0].score > w[1].score || (w[0].score == w[1].score && w[0].entity_id < w[1].entity_id)));
}

#[test]
fn request_errors() {
    let world = common::world(200);
    let empty = Ranker::new(world.catalog.clone(), ServeConfig::default());
    let us = CountryCode::new("US").unwrap();
    let pre = RankRequest { user_id: Some(world.users[0].user_id.clone()), ..RankRequest::new(us) };
    assert!(matches!(empty.rank(&pre), Err(ServeError::NoModel)));

    let ranker = common::ranker(&world, common::model(&world, Some(PersonalizationMode::None), 1));
    assert!(matches!(ranker.rank(&RankRequest::new(us)), Err(ServeError::Unroutable)));
    let ghost = RankRequest { source_entity_id: Some(EntityId::new("ghost").unwrap()), ..RankRequest::new(us) };
    assert!(matches!(ranker.rank(&ghost), Err(ServeError::UnknownEntity(_))));
    assert!(matches!(ranker.rank(&RankRequest { k: Some(0), ..pre }), Err(ServeError::InvalidRequest(_))));
    assert_eq!(ranker.stats().errors, 3);
}

#[test]
fn swap_changes_version_and_refuses_mismatched_schema() {
    let world = common::world(200);
    let ranker = common::ranker(&world, common::model(&world, Some(PersonalizationMode::None), 1));
    let req = RankRequest { user_id: Some(world.users[0].user_id.clone()), ..RankRequest::new(world.users[0].country) };
    let before = ranker.rank(&req).unwrap();
    assert!(ranker.rank(&req).unwrap().cache_hit);

    let dir = tempfile::tempdir().unwrap();
    common::model(&world, Some(PersonalizationMode::None), 2).save(dir.path()).unwrap();
    let v2 = ranker.swap_model(dir.path()).unwrap();
    assert_ne!(v2, before.model_version);
    let after = ranker.rank(&req).unwrap();
    assert_eq!(after.model_version, v2);
    assert!(!after.cache_hit);

    let other_world = common::world(120);
    let bad = tempfile::tempdir().unwrap();
    common::model(&other_world, Some(PersonalizationMode::None), 1).save(bad.path()).unwrap();
    assert!(matches!(ranker.swap_model(bad.path()), Err(ServeError::SchemaMismatch { .. })));
    assert!(matches!(ranker.swap_model(&dir.path().join("missing")), Err(ServeError::InvalidCheckpoint(_))));
    assert_eq!(ranker.rank(&req).unwrap().model_version, v2);
}

#[test]
fn serving_mode_flag_is_enforced() {
    let world = common::world(200);
    let cfg = ServeConfig { mode: Some(PersonalizationMode::Cluster), ..ServeConfig::default() };
    let model = common::model(&world, Some(PersonalizationMode::None), 1);
    assert!(matches!(Ranker::with_model(world.catalog.clone(), cfg, model), Err(ServeError::InvalidCheckpoint(_))));
}

#[test]
fn concurrent_requests_see_exactly_one_version() {
    let world = common::world(200);
    let m1 = common::model(&world, Some(PersonalizationMode::None), 1);
    let m2 = common::model(&world, Some(PersonalizationMode::None), 2);
    let (v1, v2) = (m1.version().to_owned(), m2.version().to_owned());
    let ranker = Arc::new(common::ranker(&world, m1.clone()));
    // Reference answers per version, computed without the cache.
    let reqs = sample_requests(&world.catalog, &world.users, 40, 9);
    let solo1 = common::ranker(&world, m1.clone());
    let solo2 = common::ranker(&world, m2.clone());
    let expect: Vec<_> = reqs.iter().map(|r| (solo1.rank_fresh(r).ok(), solo2.rank_fresh(r).ok())).collect();

    std::thread::scope(|s| {
        for t in 0..4 {
            let (ranker, reqs, expect, v1, v2) = (&ranker, &reqs, &expect, &v1, &v2);
            s.spawn(move || {
                for round in 0..5 {
                    for (i, req) in reqs.iter().enumerate().skip((t + round) % 3) {
                        let Ok(resp) = ranker.rank(req) else { continue };
                        let reference = if &resp.model_version == v1 {
                            expect[i].0.as_ref()
                        } else {
                            assert_eq!(&resp.model_version, v2);
                            expect[i].1.as_ref()
                        };
                        assert_eq!(resp.items, reference.unwrap().items);
                    }
                }
            });
        }
        for i in 0..6 {
            let m = if i % 2 == 0 { m2.clone() } else { m1.clone() };
            ranker.install(m).unwrap();
        }
    });
}

#[test]
fn cache_code_never_sees_user_identity() {
    let src = include_str!("../src/cache.rs");
    assert!(!src.to_lowercase().contains("user"), "cache.rs mentions user identity");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn non_personal_mode_ignores_who_asks(seed in 0u64..1000, a in 0usize..60, b in 0usize..60) {
        static RANKER: std::sync::OnceLock<(unirank::datagen::World, Ranker)> = std::sync::OnceLock::new();
        let (world, ranker) = RANKER.get_or_init(|| {
            let w = common::world(200);
            let r = common::ranker(&w, common::model(&w, Some(PersonalizationMode::None), 1));
            (w, r)
        });
        let mut req = sample_requests(&world.catalog, &world.users, 1, seed).remove(0);
        req.user_id = Some(world.users[a].user_id.clone());
        let first = ranker.rank(&req);
        req.user_id = Some(world.users[b].user_id.clone());
        let second = ranker.rank(&req);
        if let (Ok(x), Ok(y)) = (first, second) {
            prop_assert!(y.cache_hit);
            prop_assert_eq!(x.items, y.items);
        }
    }
}
