//! Format detection for input files: `.jsonl`/`.json` is the generic
//! interaction format, anything else MIND TSV.

use std::path::Path;

use super::dataset::{Impression, RawArticle};
use super::generic::{read_interactions_jsonl, read_news_jsonl};
use super::mind::{parse_behaviors_tsv, parse_news_tsv, ParseLimits};
use crate::error::{Error, Result};

fn is_jsonl(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e == "jsonl" || e == "json")
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ))
    }
}

pub fn load_news(path: &Path, limits: ParseLimits) -> Result<Vec<RawArticle>> {
    require_file(path)?;
    if is_jsonl(path) {
        return read_news_jsonl(path, limits);
    }
    let (articles, stats) = parse_news_tsv(path, limits)?;
    log::info!("{}: {stats:?}", path.display());
    Ok(articles)
}

pub fn load_behaviors(path: &Path) -> Result<Vec<Impression>> {
    require_file(path)?;
    if is_jsonl(path) {
        return read_interactions_jsonl(path);
    }
    let (imps, stats) = parse_behaviors_tsv(path)?;
    log::info!("{}: {stats:?}", path.display());
    Ok(imps)
}
