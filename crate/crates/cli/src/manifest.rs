use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub flags: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// SHA-256 of every produced file, keyed by path.
    pub artifact_hashes: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
}

pub struct Recorder {
    subcommand: String,
    flags: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<PathBuf>,
    start: Instant,
}

impl Recorder {
    pub fn start(subcommand: &str, flags: &impl Serialize, seeds: Vec<u64>, inputs: Vec<PathBuf>) -> Self {
        Recorder {
            subcommand: subcommand.to_owned(),
            flags: serde_json::to_value(flags).unwrap_or(serde_json::Value::Null),
            seeds,
            inputs,
            start: Instant::now(),
        }
    }

    /// Hashes `outputs` (files, or every file directly inside a directory)
    /// and writes the manifest to `path`.
    pub fn finish(self, path: &Path, outputs: Vec<PathBuf>) -> Result<()> {
        let mut artifact_hashes = BTreeMap::new();
        for out in &outputs {
            let files: Vec<PathBuf> = if out.is_dir() {
                let mut v: Vec<PathBuf> = std::fs::read_dir(out)?
                    .map(|e| e.map(|e| e.path()))
                    .collect::<std::io::Result<_>>()?;
                v.retain(|p| p.is_file() && !p.to_string_lossy().ends_with(MANIFEST_FILE));
                v.sort();
                v
            } else {
                vec![out.clone()]
            };
            for f in files {
                let digest = Sha256::digest(std::fs::read(&f)?);
                let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
                artifact_hashes.insert(f.display().to_string(), hex);
            }
        }
        let manifest = RunManifest {
            subcommand: self.subcommand,
            flags: self.flags,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs,
            artifact_hashes,
            wall_clock_secs: self.start.elapsed().as_secs_f64(),
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }
}

/// Manifest location for an output: inside a directory, or beside a file.
pub fn manifest_path(output: &Path) -> PathBuf {
    if output.extension().is_some() {
        let name = output.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        output.with_file_name(format!("{name}.{MANIFEST_FILE}"))
    } else {
        output.join(MANIFEST_FILE)
    }
}
