use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{KeyIndex, TabularLM, Token, Vocab};

/// On-disk model: logit rows keyed by comma-joined token ids, with the BOS
/// sentinel written as `vocab_size`. The order-0 model has the single key `""`.
///
/// ```json
/// {"vocab_size":2,"eos":0,"order":1,"temperature":1.0,
///  "rows":{"0":[0.0,0.0],"1":[1.0,-1.0],"2":[0.0,0.0]}}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub vocab_size: usize,
    pub eos: Token,
    pub order: usize,
    pub temperature: f64,
    pub rows: BTreeMap<String, Vec<f64>>,
}

fn key_string(key: &[Token]) -> String {
    key.iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_key(s: &str) -> Result<Vec<Token>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<Token>()
                .map_err(|_| Error::Config(format!("bad context key {s:?}")))
        })
        .collect()
}

impl From<&TabularLM> for ModelFile {
    fn from(m: &TabularLM) -> Self {
        let idx = m.key_index();
        let rows = (0..idx.num_rows())
            .map(|r| (key_string(idx.key(r)), m.row_logits(r).to_vec()))
            .collect();
        Self {
            vocab_size: m.vocab().size(),
            eos: m.vocab().eos(),
            order: m.order(),
            temperature: m.temperature(),
            rows,
        }
    }
}

impl From<TabularLM> for ModelFile {
    fn from(m: TabularLM) -> Self {
        Self::from(&m)
    }
}

impl TryFrom<ModelFile> for TabularLM {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        let vocab = Vocab::new(f.vocab_size, f.eos)?;
        let idx = KeyIndex::new(&vocab, f.order)?;
        if f.rows.len() != idx.num_rows() {
            return Err(Error::Config(format!(
                "expected {} rows, found {}",
                idx.num_rows(),
                f.rows.len()
            )));
        }
        let v = vocab.size();
        let mut params = vec![0.0; idx.num_rows() * v];
        let mut seen = vec![false; idx.num_rows()];
        for (k, logits) in &f.rows {
            let row = idx.row_of_key(&parse_key(k)?)?;
            if seen[row] {
                return Err(Error::Config(format!("duplicate row for key {k:?}")));
            }
            if logits.len() != v {
                return Err(Error::Config(format!(
                    "row {k:?} has {} logits",
                    logits.len()
                )));
            }
            seen[row] = true;
            params[row * v..(row + 1) * v].copy_from_slice(logits);
        }
        TabularLM::new(vocab, f.order, params)?.with_temperature(f.temperature)
    }
}

impl TabularLM {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelFile::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str::<ModelFile>(s)?.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
