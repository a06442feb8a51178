use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{read_jsonl, write_jsonl};
use crate::error::{Error, Result};

/// Id of the null sentinel (a missing or imputed-as-null field).
pub const NULL_ID: u32 = 0;
/// Id shared by every token the vocabulary has not seen.
pub const OOV_ID: u32 = 1;
const FIRST_REAL_ID: u32 = 2;

/// Token-to-id map with reserved null and out-of-vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    name: String,
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabLine {
    token: String,
    id: u32,
}

impl Vocabulary {
    /// Builds a vocabulary from tokens; ids are assigned in sorted token order.
    pub fn build<S: AsRef<str>>(name: &str, tokens: impl IntoIterator<Item = S>) -> Self {
        let sorted: BTreeSet<String> = tokens.into_iter().map(|t| t.as_ref().to_owned()).collect();
        let tokens: Vec<String> = sorted.into_iter().collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32 + FIRST_REAL_ID)).collect();
        Vocabulary { name: name.to_owned(), tokens, ids }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of rows an embedding table for this vocabulary needs.
    pub fn size(&self) -> usize {
        self.tokens.len() + FIRST_REAL_ID as usize
    }

    pub fn lookup(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(OOV_ID)
    }

    /// `None` is the null sentinel.
    pub fn lookup_opt(&self, token: Option<&str>) -> u32 {
        token.map_or(NULL_ID, |t| self.lookup(t))
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        id.checked_sub(FIRST_REAL_ID).and_then(|i| self.tokens.get(i as usize)).map(String::as_str)
    }

    pub fn file_name(name: &str) -> String {
        format!("vocab.{name}.jsonl")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let lines: Vec<VocabLine> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| VocabLine { token: t.clone(), id: i as u32 + FIRST_REAL_ID })
            .collect();
        write_jsonl(dir.join(Self::file_name(&self.name)), &lines)
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let lines: Vec<VocabLine> = read_jsonl(dir.join(Self::file_name(name)))?;
        let mut tokens = Vec::with_capacity(lines.len());
        for (i, line) in lines.into_iter().enumerate() {
            if line.id != i as u32 + FIRST_REAL_ID {
                return Err(Error::InvalidValue(format!("vocab {name}: unexpected id {} at line {i}", line.id)));
            }
            tokens.push(line.token);
        }
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32 + FIRST_REAL_ID)).collect();
        Ok(Vocabulary { name: name.to_owned(), tokens, ids })
    }
}
