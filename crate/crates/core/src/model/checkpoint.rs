//! Versioned binary tensor container.
//!
//! ```text
//! magic  b"UNIRANK\0"          8 bytes
//! format u32 LE                currently 1
//! header u64 LE length + JSON  kind, metadata, tensor names and shapes
//! data   f64 LE, row-major     tensors in header order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSchema;
use crate::model::{ModelConfig, ModelParams, Tensor, Weights};

const MAGIC: &[u8; 8] = b"UNIRANK\0";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn write_container(path: &Path, kind: &str, meta: serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    let header = Header {
        kind: kind.to_owned(),
        meta,
        tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), rows: t.rows, cols: t.cols }).collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for (_, t) in tensors {
        for x in &t.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Returns the metadata and named tensors of a container of the given kind.
pub fn read_container(path: &Path, kind: &str) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Corrupt("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let format = u32::from_le_bytes(u32buf);
    if format != FORMAT {
        return Err(Error::Corrupt(format!("unsupported format version {format}")));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let len = u64::from_le_bytes(u64buf) as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    if header.kind != kind {
        return Err(Error::Corrupt(format!("expected a {kind} container, found {}", header.kind)));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let mut data = vec![0.0; entry.rows * entry.cols];
        for x in &mut data {
            r.read_exact(&mut u64buf)?;
            *x = f64::from_le_bytes(u64buf);
        }
        tensors.push((entry.name, Tensor { rows: entry.rows, cols: entry.cols, data }));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Corrupt(format!("{} trailing bytes", rest.len())));
    }
    Ok((header.meta, tensors))
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    schema: FeatureSchema,
    schema_hash: String,
    version: String,
}

impl ModelParams {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            schema: self.schema.clone(),
            schema_hash: self.schema.hash(),
            version: self.version.clone(),
        };
        write_container(path, "checkpoint", serde_json::to_value(meta)?, &self.weights.named())
    }

    /// Loads a checkpoint, refusing it if `expected_schema_hash` is given and
    /// differs from the stored one.
    pub fn load(path: &Path, expected_schema_hash: Option<&str>) -> Result<Self> {
        let (meta, tensors) = read_container(path, "checkpoint")?;
        let meta: CheckpointMeta = serde_json::from_value(meta)?;
        if meta.schema.hash() != meta.schema_hash {
            return Err(Error::Corrupt("stored schema hash does not match stored schema".into()));
        }
        if let Some(expected) = expected_schema_hash {
            if expected != meta.schema_hash {
                return Err(Error::SchemaMismatch { expected: expected.to_owned(), found: meta.schema_hash });
            }
        }
        // Build the expected layout, then fill it tensor by tensor.
        let mut params = ModelParams::init(meta.config, meta.schema)?;
        let names: Vec<String> = params.weights.named().into_iter().map(|(n, _)| n).collect();
        if names.len() != tensors.len() {
            return Err(Error::Corrupt(format!("expected {} tensors, found {}", names.len(), tensors.len())));
        }
        for ((slot, name), (stored_name, stored)) in params.weights.tensors_mut().into_iter().zip(&names).zip(tensors) {
            if *name != stored_name || !slot.same_shape(&stored) {
                return Err(Error::Corrupt(format!("tensor `{stored_name}` does not match expected `{name}`")));
            }
            *slot = stored;
        }
        if !params.weights.is_finite() {
            return Err(Error::Corrupt("non-finite weights".into()));
        }
        params.version = meta.version;
        Ok(params)
    }
}

impl Weights {
    pub fn total_len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{DENSE_LEN, QUERY_LEN};

    fn schema() -> FeatureSchema {
        FeatureSchema {
            user_rows: 5,
            country_rows: 3,
            task_rows: 5,
            entity_rows: 9,
            token_rows: 6,
            cluster_rows: Some(4),
            query_len: QUERY_LEN,
            dense_len: DENSE_LEN,
            extra_dense_len: 2,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig { embed_dim: 4, hidden_dim: 8, shared_entity_table: false, ..ModelConfig::default() };
        let params = ModelParams::init(cfg, schema()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        params.save(&path).unwrap();
        let back = ModelParams::load(&path, Some(&schema().hash())).unwrap();
        assert_eq!(back, params);
        for (a, b) in back.weights.tensors().iter().zip(params.weights.tensors()) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn schema_mismatch_is_refused() {
        let params = ModelParams::init(ModelConfig { embed_dim: 4, hidden_dim: 8, ..ModelConfig::default() }, schema()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        params.save(&path).unwrap();
        let other = FeatureSchema { entity_rows: 10, ..schema() };
        assert!(matches!(ModelParams::load(&path, Some(&other.hash())), Err(Error::SchemaMismatch { .. })));
    }

    #[test]
    fn garbage_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(ModelParams::load(&path, None), Err(Error::Corrupt(_))));
    }
}
