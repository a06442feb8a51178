use std::path::PathBuf;

use clap::Parser;
use unirank::domain::{read_jsonl, Catalog};
use unirank_serving::loadgen::{run, sample_requests};

/// Replays a seeded request mix against a running ranking service.
#[derive(Parser)]
struct Args {
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    url: String,
    /// Directory holding catalog.jsonl and users.jsonl.
    #[arg(long)]
    world_dir: PathBuf,
    #[arg(long, default_value_t = 32)]
    clients: usize,
    #[arg(long, default_value_t = 2000)]
    requests: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[tokio::main]
async fn main() {
    let args = Args::parse();
    let load = || -> unirank::Result<_> {
        let catalog = Catalog::new(read_jsonl(args.world_dir.join("catalog.jsonl"))?)?;
        let users: Vec<unirank::domain::UserProfile> = read_jsonl(args.world_dir.join("users.jsonl"))?;
        Ok(sample_requests(&catalog, &users, args.requests, args.seed))
    };
    let requests = match load() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    };
    match run(&args.url, requests, args.clients).await {
        Ok(report) => println!("{}", serde_json::to_string_pretty(&report).expect("report")),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
