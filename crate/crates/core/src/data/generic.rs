//! Line-delimited JSON inputs for datasets that do not ship MIND files.
//!
//! Interactions: `{"user": "...", "history": [ids], "candidates": [{"id": "...", "label": 0|1}]}`
//! (optional `"id"` and `"time"`). Articles: `{"id": "...", "title": "...", "entities": [ids]}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{Candidate, Impression, RawArticle};
use super::mind::ParseLimits;
use super::vocab::tokenize;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct InteractionRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    user: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time: Option<String>,
    #[serde(default)]
    history: Vec<String>,
    candidates: Vec<Candidate>,
}

#[derive(Deserialize)]
struct NewsRow {
    id: String,
    title: String,
    #[serde(default)]
    entities: Vec<String>,
}

fn lines(path: &Path) -> Result<impl Iterator<Item = (usize, Result<String>)> + '_> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(f)
        .lines()
        .enumerate()
        .map(move |(i, l)| (i + 1, l.map_err(|e| Error::io(path, e))))
        .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty())))
}

pub fn read_interactions_jsonl(path: &Path) -> Result<Vec<Impression>> {
    let mut out = Vec::new();
    for (lineno, line) in lines(path)? {
        let row: InteractionRow = serde_json::from_str(&line?)
            .map_err(|e| Error::Data(format!("{}:{lineno}: {e}", path.display())))?;
        if let Some(c) = row.candidates.iter().find(|c| c.label > 1) {
            return Err(Error::Data(format!(
                "{}:{lineno}: candidate {} has label {}",
                path.display(),
                c.id,
                c.label
            )));
        }
        if row.candidates.is_empty() {
            continue;
        }
        out.push(Impression {
            id: row.id.unwrap_or_else(|| lineno.to_string()),
            user: row.user,
            time: row.time,
            history: row.history,
            candidates: row.candidates,
        });
    }
    Ok(out)
}

pub fn write_interactions_jsonl(path: &Path, impressions: &[Impression]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for imp in impressions {
        let row = InteractionRow {
            id: Some(imp.id.clone()),
            user: imp.user.clone(),
            time: imp.time.clone(),
            history: imp.history.clone(),
            candidates: imp.candidates.clone(),
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_news_jsonl(path: &Path, limits: ParseLimits) -> Result<Vec<RawArticle>> {
    let mut out = Vec::new();
    for (lineno, line) in lines(path)? {
        let row: NewsRow = serde_json::from_str(&line?)
            .map_err(|e| Error::Data(format!("{}:{lineno}: {e}", path.display())))?;
        let mut tokens = tokenize(&row.title);
        if tokens.is_empty() {
            log::warn!("{}:{lineno}: empty title, skipped", path.display());
            continue;
        }
        tokens.truncate(limits.max_title_len);
        let mut entities = row.entities;
        entities.truncate(limits.max_entities);
        out.push(RawArticle {
            id: row.id,
            tokens,
            entities,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interactions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        std::fs::write(
            &p,
            "{\"user\":\"u\",\"history\":[\"a\",\"a\"],\"candidates\":[{\"id\":\"b\",\"label\":1}]}\n\n",
        )
        .unwrap();
        let imps = read_interactions_jsonl(&p).unwrap();
        assert_eq!(imps[0].history, vec!["a", "a"]);
        assert_eq!(imps[0].id, "1");
        let q = dir.path().join("y.jsonl");
        write_interactions_jsonl(&q, &imps).unwrap();
        assert_eq!(read_interactions_jsonl(&q).unwrap(), imps);
    }

    #[test]
    fn bad_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        std::fs::write(
            &p,
            "{\"user\":\"u\",\"candidates\":[{\"id\":\"b\",\"label\":3}]}\n",
        )
        .unwrap();
        assert!(matches!(read_interactions_jsonl(&p), Err(Error::Data(_))));
    }
}
