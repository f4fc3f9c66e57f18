use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Document, EntityDictionary, EntityType, Source, Vocab};

/// One corpus line: `{"id": 7, "text": "...", "source": "A"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDocument {
    pub id: u64,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Source>,
}

#[derive(Debug, Deserialize)]
struct RawEntity {
    entity_id: u64,
    surface: String,
    #[serde(rename = "type")]
    entity_type: String,
}

fn parse_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads a JSONL corpus. Duplicate ids are rejected.
pub fn read_documents(path: &Path) -> Result<Vec<RawDocument>, CorpusError> {
    let docs: Vec<RawDocument> = parse_lines(path)?;
    let mut seen = std::collections::HashSet::new();
    for d in &docs {
        if !seen.insert(d.id) {
            return Err(CorpusError::Parse {
                path: path.display().to_string(),
                line: 0,
                msg: format!("duplicate document id {}", d.id),
            });
        }
    }
    Ok(docs)
}

/// Reads a JSONL entity list (`entity_id`, `surface`, `type`) and tokenizes it under `vocab`.
pub fn read_entities(path: &Path, vocab: &Vocab) -> Result<EntityDictionary, CorpusError> {
    let raw: Vec<RawEntity> = parse_lines(path)?;
    let mut dict = EntityDictionary::new();
    for (i, r) in raw.into_iter().enumerate() {
        let ty = EntityType::parse(&r.entity_type).ok_or_else(|| CorpusError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: format!("unknown entity type {:?}", r.entity_type),
        })?;
        dict.insert(r.entity_id, &r.surface, ty, vocab)?;
    }
    Ok(dict)
}

/// Writes fully tagged documents as JSONL.
pub fn write_documents(path: &Path, docs: &[Document]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in docs {
        serde_json::to_writer(&mut w, d).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
