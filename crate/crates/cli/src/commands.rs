use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context as _, Result};
use serde::Serialize;
use unirank::datagen::{generate_events, generate_world, World, WorldConfig};
use unirank::domain::{read_jsonl, write_jsonl, EngagementEvent, TaskKind};
use unirank::evaluation::build_eval_groups;
use unirank::experiments::{
    ablate_enablers, compare_unified_vs_specialists, personalization_ladder, ExperimentConfig, ExperimentRunner,
};
use unirank::model::ModelConfig;
use unirank::personalization::{
    build_user_vectors, kmeans, pretrain_mf, MfConfig, PersonalizationMode, Personalizer, PretrainedRepr,
    UserClusterModel, PROFILE_DIM,
};
use unirank::ranker::{train_ranker, RankingModel, HISTORY_FILE};
use unirank::training::{assemble_dataset, split_boundaries, TrainConfig};
use unirank_serving::{Ranker, ServeConfig};

use crate::args::*;
use crate::manifest::{manifest_path, Recorder};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const CLUSTERS_FILE: &str = "clusters.json";
pub const REPR_FILE: &str = "repr.bin";

pub fn run(cli: Cli) -> Result<()> {
    let wd = cli.work_dir;
    match cli.command {
        Command::Datagen(a) => datagen(&wd, &a),
        Command::DemoData(a) => demo_data(&wd, &a),
        Command::BuildFeatures(a) => build_features(&wd, &a),
        Command::Train(a) => train(&wd, &a),
        Command::Personalize(PersonalizeCommand::BuildClusters(a)) => build_clusters(&wd, &a),
        Command::Personalize(PersonalizeCommand::Pretrain(a)) => pretrain(&wd, &a),
        Command::Personalize(PersonalizeCommand::Ladder(a)) => experiment(&wd, "ladder", &a),
        Command::Eval(a) => eval(&wd, &a),
        Command::Compare(a) => experiment(&wd, "compare", &a),
        Command::Ablate(a) => experiment(&wd, "ablate", &a),
        Command::Serve(a) => serve(&wd, &a),
    }
}

fn write_world(world: &World, dir: &Path) -> Result<()> {
    let log = generate_events(world)?;
    world.write_dir(dir)?;
    write_jsonl(dir.join(EVENTS_FILE), &log.events)?;
    println!(
        "wrote {} entities, {} users, {} events (positive rate {:.3}) to {}",
        world.catalog.len(),
        world.users.len(),
        log.events.len(),
        log.positive_rate,
        dir.display()
    );
    Ok(())
}

fn datagen(wd: &Path, a: &DatagenArgs) -> Result<()> {
    let rec = Recorder::start("datagen", a, vec![a.seed], vec![]);
    let mut cfg = WorldConfig { seed: a.seed, ..WorldConfig::default() };
    if let Some(n) = a.entities {
        cfg.n_entities = n;
    }
    if let Some(n) = a.users {
        cfg.n_users = n;
    }
    if let Some(v) = &a.events_per_task {
        (cfg.n_search, cfg.n_mlt, cfg.n_prequery) = (v[0], v[1], v[2]);
    }
    if let Some(x) = a.alpha {
        cfg.alpha = x;
    }
    if let Some(x) = a.tau {
        cfg.tau = x;
    }
    if let Some(n) = a.neg_ratio {
        cfg.neg_ratio = n;
    }
    let out = wd.join(&a.out_dir);
    write_world(&generate_world(&cfg)?, &out)?;
    rec.finish(&manifest_path(&out), vec![out.clone()])
}

fn demo_data(wd: &Path, a: &DemoDataArgs) -> Result<()> {
    let rec = Recorder::start("demo-data", a, vec![a.seed], vec![]);
    let out = wd.join(&a.out_dir);
    write_world(&generate_world(&WorldConfig { seed: a.seed, ..WorldConfig::demo() })?, &out)?;
    rec.finish(&manifest_path(&out), vec![out.clone()])
}

fn load_data(dir: &Path) -> Result<(World, Vec<EngagementEvent>)> {
    let world = World::read_dir(dir).with_context(|| format!("reading world from {}", dir.display()))?;
    let events = read_jsonl(dir.join(EVENTS_FILE)).with_context(|| format!("reading {EVENTS_FILE}"))?;
    Ok((world, events))
}

fn build_features(wd: &Path, a: &BuildFeaturesArgs) -> Result<()> {
    let data = wd.join(&a.data_dir);
    let rec = Recorder::start("build-features", a, vec![], vec![data.clone()]);
    let (world, events) = load_data(&data)?;
    let cfg = TrainConfig { disable_imputation: a.no_imputation, disable_task_feature: a.no_task_feature, ..TrainConfig::default() };
    let ds = assemble_dataset(&events, &world.catalog, &cfg)?;
    let out = wd.join(&a.out_dir);
    ds.featurizer.save(&out)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        schema: &'a unirank::features::FeatureSchema,
        schema_hash: String,
        train_rows: usize,
        eval_rows: usize,
        count_window_end: i64,
        eval_start: i64,
    }
    let summary = Summary {
        schema: &ds.schema,
        schema_hash: ds.schema.hash(),
        train_rows: ds.train.len(),
        eval_rows: ds.eval.len(),
        count_window_end: ds.count_window_end,
        eval_start: ds.eval_start,
    };
    std::fs::write(out.join("features_summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    rec.finish(&manifest_path(&out), vec![out.clone()])
}

fn parse_mode(s: &str) -> Result<PersonalizationMode> {
    Ok(s.parse()?)
}

fn load_personalizer(mode: PersonalizationMode, dir: &Path) -> Result<Personalizer> {
    let clusters = dir.join(CLUSTERS_FILE);
    let repr = dir.join(REPR_FILE);
    let clusters = if clusters.exists() { Some(UserClusterModel::load(&clusters)?) } else { None };
    let repr = if repr.exists() { Some(PretrainedRepr::load(&repr)?) } else { None };
    Personalizer::new(mode, clusters, repr).with_context(|| format!("looking for artifacts in {}", dir.display()))
}

fn train(wd: &Path, a: &TrainArgs) -> Result<()> {
    let data = wd.join(&a.data_dir);
    let mut inputs = vec![data.clone()];
    let rec_flags = serde_json::to_value(a)?;
    let mode = a.mode.as_deref().map(parse_mode).transpose()?;
    let personalizer = match mode {
        Some(m) => {
            inputs.push(wd.join(&a.artifacts_dir));
            Some(load_personalizer(m, &wd.join(&a.artifacts_dir))?)
        }
        None => None,
    };
    let rec = Recorder::start("train", &rec_flags, vec![a.seed], inputs);
    let mut cfg = TrainConfig {
        seed: a.seed,
        task_filter: a.task.as_deref().map(str::parse::<TaskKind>).transpose()?,
        disable_task_feature: a.no_task_feature,
        disable_imputation: a.no_imputation,
        disable_crossing: a.no_crossing,
        ..TrainConfig::default()
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    let (world, events) = load_data(&data)?;
    let ds = assemble_dataset(&events, &world.catalog, &cfg)?;
    let model_cfg = ModelConfig { seed: a.seed, ..ModelConfig::default() };
    let (model, history) = train_ranker(&ds, &model_cfg, &cfg, personalizer)?;
    let out = wd.join(&a.out);
    model.save(&out)?;
    std::fs::write(out.join(HISTORY_FILE), serde_json::to_vec_pretty(&history)?)?;
    for e in &history.epochs {
        match (e.eval_loss, e.eval_auc) {
            (Some(l), Some(auc)) => {
                println!("epoch {:>3}  train_loss {:.5}  eval_loss {l:.5}  eval_auc {auc:.4}", e.epoch, e.train_loss)
            }
            _ => println!("epoch {:>3}  train_loss {:.5}", e.epoch, e.train_loss),
        }
    }
    println!("model {} written to {}", model.version(), out.display());
    rec.finish(&manifest_path(&out), vec![out.clone()])
}

/// Events of the count window of the default split, before any training row.
fn history(events: &[EngagementEvent]) -> Vec<EngagementEvent> {
    let (count_window_end, _) = split_boundaries(events, &TrainConfig::default());
    events.iter().filter(|e| e.timestamp < count_window_end).cloned().collect()
}

fn build_clusters(wd: &Path, a: &ClusterArgs) -> Result<()> {
    let data = wd.join(&a.data_dir);
    let out = wd.join(&a.out_dir);
    let rec = Recorder::start("personalize build-clusters", a, vec![a.seed], vec![data.clone()]);
    let (_, events) = load_data(&data)?;
    let history = history(&events);
    // Pretrained item vectors describe users better than raw counts.
    let repr_path = out.join(REPR_FILE);
    let repr = if repr_path.exists() { Some(PretrainedRepr::load(&repr_path)?) } else { None };
    let dim = repr.as_ref().map_or(PROFILE_DIM, PretrainedRepr::dim);
    let vectors = build_user_vectors(&history, repr.as_ref(), dim);
    let model = kmeans(&vectors, a.k, a.seed, 100, 1e-6)?;
    std::fs::create_dir_all(&out)?;
    let path = out.join(CLUSTERS_FILE);
    model.save(&path)?;
    println!(
        "{} users in {} clusters (inertia {:.4}, {} iterations) -> {}",
        model.assignment.len(),
        model.k,
        model.inertia(),
        model.inertia_history.len(),
        path.display()
    );
    rec.finish(&out.join("clusters.run_manifest.json"), vec![path])
}

fn pretrain(wd: &Path, a: &PretrainArgs) -> Result<()> {
    let data = wd.join(&a.data_dir);
    let out = wd.join(&a.out_dir);
    let rec = Recorder::start("personalize pretrain", a, vec![a.seed], vec![data.clone()]);
    let (world, events) = load_data(&data)?;
    let cfg = MfConfig { dim: a.dim, epochs: a.epochs, seed: a.seed, ..MfConfig::default() };
    let repr = pretrain_mf(&history(&events), &world.catalog, &cfg)?;
    std::fs::create_dir_all(&out)?;
    let path = out.join(REPR_FILE);
    repr.save(&path)?;
    println!(
        "{} users x {} items, dim {}, final loss {:.5} -> {}",
        repr.users.len(),
        repr.items.len(),
        repr.dim(),
        repr.loss_curve.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    rec.finish(&out.join("repr.run_manifest.json"), vec![path])
}

fn eval(wd: &Path, a: &EvalArgs) -> Result<()> {
    let data = wd.join(&a.data_dir);
    let ckpt = wd.join(&a.checkpoint);
    let rec = Recorder::start("eval", a, vec![], vec![data.clone(), ckpt.clone()]);
    let (world, events) = load_data(&data)?;
    let model = RankingModel::load(&ckpt)?;
    let ds = assemble_dataset(&events, &world.catalog, &TrainConfig::default())?;
    let (groups, stats) = build_eval_groups(&ds.eval);
    let report = model.evaluate(&groups, &world.catalog)?;
    print!("{}", report.table());
    println!(
        "groups kept {}, dropped {} (single candidate) and {} (no positive)",
        stats.kept, stats.dropped_too_small, stats.dropped_no_positive
    );
    let out = a.out.as_ref().map_or_else(|| ckpt.join("eval_report.json"), |p| wd.join(p));
    std::fs::write(&out, serde_json::to_vec_pretty(&report)?)?;
    rec.finish(&manifest_path(&out), vec![out.clone()])
}

fn experiment_config(a: &ExperimentArgs, ladder: bool) -> ExperimentConfig {
    let mut cfg = if ladder { ExperimentConfig::ladder() } else { ExperimentConfig::default() };
    cfg.seeds = a.seeds.clone();
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(n) = a.entities {
        cfg.world.n_entities = n;
    }
    if let Some(n) = a.users {
        cfg.world.n_users = n;
    }
    if let Some(x) = a.alpha {
        cfg.world.alpha = x;
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    cfg
}

fn experiment(wd: &Path, name: &str, a: &ExperimentArgs) -> Result<()> {
    if a.seeds.is_empty() {
        bail!("--seeds must list at least one seed");
    }
    let rec = Recorder::start(name, a, a.seeds.clone(), vec![]);
    let cfg = experiment_config(a, name == "ladder");
    let mut runner = ExperimentRunner::new(cfg.clone()).with_progress(|m| eprintln!("{m}"));
    let (table, json) = match name {
        "compare" => {
            let t = compare_unified_vs_specialists(&mut runner)?;
            (t.table(), serde_json::to_value(&t)?)
        }
        "ablate" => {
            let t = ablate_enablers(&mut runner)?;
            (t.table(), serde_json::to_value(&t)?)
        }
        _ => {
            let t = personalization_ladder(&mut runner)?;
            (t.table(), serde_json::to_value(&t)?)
        }
    };
    print!("{table}");
    let out: PathBuf = wd.join(a.out.clone().unwrap_or_else(|| PathBuf::from(format!("{name}.json"))));
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let doc = serde_json::json!({ "config": cfg, "table": json });
    std::fs::write(&out, serde_json::to_vec_pretty(&doc)?)?;
    rec.finish(&manifest_path(&out), vec![out.clone()])
}

fn serve(wd: &Path, a: &ServeArgs) -> Result<()> {
    let data = wd.join(&a.data_dir);
    let catalog = World::read_dir(&data).map(|w| w.catalog).or_else(|_| -> Result<_> {
        Ok(unirank::domain::Catalog::new(read_jsonl(data.join("catalog.jsonl"))?)?)
    })?;
    let config = ServeConfig {
        max_candidates: a.max_candidates,
        cache_size: a.cache_size,
        cache_ttl: Duration::from_secs(a.cache_ttl_secs),
        mode: a.mode.as_deref().map(parse_mode).transpose()?,
    };
    let ranker = Ranker::new(catalog, config);
    if let Some(ckpt) = &a.checkpoint {
        let version = ranker.swap_model(&wd.join(ckpt))?;
        eprintln!("serving model {version}");
    } else {
        eprintln!("no checkpoint loaded; POST /admin/swap to install one");
    }
    let addr: SocketAddr = format!("{}:{}", a.host, a.port).parse().context("bad --host/--port")?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    eprintln!("listening on http://{addr}");
    let mut app = unirank_serving::http::router(Arc::new(ranker));
    if let Some(dir) = &a.console_dir {
        app = unirank_serving::http::with_console(app, &wd.join(dir));
        eprintln!("console at http://{addr}/console/");
    }
    rt.block_on(unirank_serving::http::serve(app, addr))?;
    Ok(())
}
