//! MIND-format TSV files: `news.tsv` and `behaviors.tsv`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use super::dataset::{Candidate, Impression, RawArticle};
use super::vocab::tokenize;
use crate::error::{Error, Result};

/// Truncation applied while reading articles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParseLimits {
    pub max_title_len: usize,
    pub max_entities: usize,
}

impl Default for ParseLimits {
    fn default() -> Self {
        Self {
            max_title_len: 20,
            max_entities: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NewsStats {
    pub rows: usize,
    pub kept: usize,
    pub malformed: usize,
    pub empty_titles: usize,
    pub duplicates: usize,
    pub bad_entity_json: usize,
    pub truncated_titles: usize,
    pub truncated_entities: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BehaviorStats {
    pub rows: usize,
    pub kept: usize,
    pub malformed: usize,
    pub bad_labels: usize,
    pub empty_impressions: usize,
}

#[derive(Deserialize)]
struct EntityAnnotation {
    #[serde(rename = "WikidataId", default)]
    wikidata_id: Option<String>,
    #[serde(rename = "Label", default)]
    label: Option<String>,
    #[serde(rename = "SurfaceForms", default)]
    surface_forms: Vec<String>,
}

impl EntityAnnotation {
    fn key(self) -> Option<String> {
        self.wikidata_id
            .filter(|s| !s.is_empty())
            .or(self.surface_forms.into_iter().find(|s| !s.is_empty()))
            .or(self.label.filter(|s| !s.is_empty()))
    }
}

/// Entity identifiers in annotation order; `None` if the field is not valid
/// JSON.
fn parse_entities(field: &str) -> Option<Vec<String>> {
    let field = field.trim();
    if field.is_empty() {
        return Some(Vec::new());
    }
    let anns: Vec<EntityAnnotation> = serde_json::from_str(field).ok()?;
    let mut out: Vec<String> = Vec::new();
    for key in anns.into_iter().filter_map(EntityAnnotation::key) {
        if !out.contains(&key) {
            out.push(key);
        }
    }
    Some(out)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Reads `news.tsv` (id, category, subcategory, title, abstract, url,
/// title entities, abstract entities). Rows without an id or title are
/// skipped; unparseable entity JSON leaves the article without entities.
pub fn parse_news_tsv(path: &Path, limits: ParseLimits) -> Result<(Vec<RawArticle>, NewsStats)> {
    let mut stats = NewsStats::default();
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for line in open(path)?.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        stats.rows += 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 || cols[0].trim().is_empty() {
            stats.malformed += 1;
            continue;
        }
        let id = cols[0].trim().to_string();
        let mut tokens = tokenize(cols[3]);
        if tokens.is_empty() {
            stats.empty_titles += 1;
            continue;
        }
        if !seen.insert(id.clone()) {
            stats.duplicates += 1;
            continue;
        }
        if tokens.len() > limits.max_title_len {
            tokens.truncate(limits.max_title_len);
            stats.truncated_titles += 1;
        }
        let mut entities = match cols.get(6).map(|f| parse_entities(f)) {
            Some(Some(e)) => e,
            Some(None) => {
                stats.bad_entity_json += 1;
                Vec::new()
            }
            None => Vec::new(),
        };
        if entities.len() > limits.max_entities {
            entities.truncate(limits.max_entities);
            stats.truncated_entities += 1;
        }
        out.push(RawArticle {
            id,
            tokens,
            entities,
        });
        stats.kept += 1;
    }
    if stats.malformed + stats.bad_entity_json > 0 {
        log::warn!(
            "{}: {} malformed rows, {} rows with unreadable entity annotations",
            path.display(),
            stats.malformed,
            stats.bad_entity_json
        );
    }
    Ok((out, stats))
}

/// Parses `N1-1 N2-0`. Labels other than 0 or 1 are an error.
pub fn parse_candidates(field: &str) -> Result<Vec<Candidate>> {
    field
        .split_whitespace()
        .map(|item| {
            let (id, label) = item
                .rsplit_once('-')
                .ok_or_else(|| Error::Data(format!("candidate `{item}` has no label suffix")))?;
            let label = match label {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::Data(format!(
                        "candidate `{id}` has label `{other}`, expected 0 or 1"
                    )))
                }
            };
            if id.is_empty() {
                return Err(Error::Data(format!("candidate `{item}` has no id")));
            }
            Ok(Candidate {
                id: id.to_string(),
                label,
            })
        })
        .collect()
}

pub fn format_candidates(cands: &[Candidate]) -> String {
    cands
        .iter()
        .map(|c| format!("{}-{}", c.id, c.label))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Reads `behaviors.tsv` (impression id, user, time, history, impressions).
pub fn parse_behaviors_tsv(path: &Path) -> Result<(Vec<Impression>, BehaviorStats)> {
    let mut stats = BehaviorStats::default();
    let mut out = Vec::new();
    for line in open(path)?.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        stats.rows += 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 5 {
            stats.malformed += 1;
            continue;
        }
        let candidates = match parse_candidates(cols[4]) {
            Ok(c) => c,
            Err(e) => {
                log::debug!("{}: {e}", path.display());
                stats.bad_labels += 1;
                continue;
            }
        };
        if candidates.is_empty() {
            stats.empty_impressions += 1;
            continue;
        }
        let time = cols[2].trim();
        out.push(Impression {
            id: cols[0].trim().to_string(),
            user: cols[1].trim().to_string(),
            time: (!time.is_empty()).then(|| time.to_string()),
            history: cols[3].split_whitespace().map(str::to_string).collect(),
            candidates,
        });
        stats.kept += 1;
    }
    if stats.malformed + stats.bad_labels > 0 {
        log::warn!(
            "{}: {} malformed rows, {} rows with bad labels",
            path.display(),
            stats.malformed,
            stats.bad_labels
        );
    }
    Ok((out, stats))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes articles as `news.tsv`. `categories` supplies the category column
/// per article (empty when absent). Titles are the space-joined tokens.
pub fn write_news_tsv(path: &Path, articles: &[RawArticle], categories: &[String]) -> Result<()> {
    let mut w = create(path)?;
    for (i, a) in articles.iter().enumerate() {
        let ents: Vec<serde_json::Value> = a
            .entities
            .iter()
            .map(|e| {
                serde_json::json!({
                    "Label": e,
                    "Type": "O",
                    "WikidataId": e,
                    "Confidence": 1.0,
                    "OccurrenceOffsets": [],
                    "SurfaceForms": [e],
                })
            })
            .collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t\t\t{}\t[]",
            a.id,
            categories.get(i).map(String::as_str).unwrap_or(""),
            categories.get(i).map(String::as_str).unwrap_or(""),
            a.tokens.join(" "),
            serde_json::Value::Array(ents)
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_behaviors_tsv(path: &Path, impressions: &[Impression]) -> Result<()> {
    let mut w = create(path)?;
    for imp in impressions {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            imp.id,
            imp.user,
            imp.time.as_deref().unwrap_or(""),
            imp.history.join(" "),
            format_candidates(&imp.candidates)
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn candidates_round_trip() {
        let c = parse_candidates("N1-1 N2-0 N-3-0").unwrap();
        assert_eq!(c[2].id, "N-3");
        assert_eq!(format_candidates(&c), "N1-1 N2-0 N-3-0");
        assert!(parse_candidates("N1-2").is_err());
        assert!(parse_candidates("N1").is_err());
    }

    #[test]
    fn entity_json_uses_wikidata_ids_in_order() {
        let field = r#"[{"Label": "B", "WikidataId": "Q2", "SurfaceForms": ["b"]},
                        {"Label": "A", "WikidataId": "Q1"}, {"Label": "B", "WikidataId": "Q2"}]"#;
        assert_eq!(parse_entities(field).unwrap(), vec!["Q2", "Q1"]);
        assert_eq!(parse_entities("").unwrap(), Vec::<String>::new());
        assert!(parse_entities("[{oops").is_none());
    }

    #[test]
    fn news_rows_are_validated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("news.tsv");
        let long = (0..25)
            .map(|i| format!("w{i}"))
            .collect::<Vec<_>>()
            .join(" ");
        std::fs::write(
            &p,
            format!(
                "N1\tc\ts\tHello world\t\t\t[]\t[]\n\
                 bad row\n\
                 N2\tc\ts\t{long}\t\t\t{{not json\t[]\n\
                 N3\tc\ts\t   \t\t\t[]\t[]\n\
                 N1\tc\ts\tDup\t\t\t[]\t[]\n"
            ),
        )
        .unwrap();
        let (arts, stats) = parse_news_tsv(&p, ParseLimits::default()).unwrap();
        assert_eq!(arts.len(), 2);
        assert_eq!(arts[1].tokens.len(), 20);
        assert!(arts[1].entities.is_empty());
        assert_eq!(stats.malformed, 1);
        assert_eq!(stats.bad_entity_json, 1);
        assert_eq!(stats.empty_titles, 1);
        assert_eq!(stats.duplicates, 1);
        assert_eq!(stats.truncated_titles, 1);
    }

    #[test]
    fn behaviors_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("behaviors.tsv");
        std::fs::write(
            &p,
            "1\tU1\t11/11/2019 9:05:58 AM\tN1 N2\tN3-1 N4-0\n2\tU2\t\t\tN3-7\n3\tU3\t\t\t\n",
        )
        .unwrap();
        let (imps, stats) = parse_behaviors_tsv(&p).unwrap();
        assert_eq!(imps.len(), 1);
        assert_eq!(stats.bad_labels, 1);
        assert_eq!(stats.empty_impressions, 1);
        let out = dir.path().join("out.tsv");
        write_behaviors_tsv(&out, &imps).unwrap();
        let (again, _) = parse_behaviors_tsv(&out).unwrap();
        assert_eq!(again, imps);
    }
}
