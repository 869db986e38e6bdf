//! Test-set evaluation and report files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::data::{Dataset, Impression};
use crate::error::{Error, Result};
use crate::metrics::{impression_metrics, MetricReport};
use crate::params::ParameterStore;
use crate::ranker::Recommender;
use crate::tensor::Real;

/// Metrics over all scorable impressions (`unfiltered`, history ≥ 1) and
/// over those meeting the training history minimum (`filtered`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub filtered: MetricReport,
    pub unfiltered: MetricReport,
    /// Impressions skipped because they reference unknown articles.
    pub unknown_references: usize,
    /// Impressions skipped because no history remains.
    pub empty_history: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ImpressionRow {
    pub impression_id: String,
    pub user: String,
    pub history_len: usize,
    pub candidates: usize,
    pub filtered: bool,
    pub auc: Option<f64>,
    pub mrr: Option<f64>,
    pub ndcg5: Option<f64>,
    pub ndcg10: Option<f64>,
    /// Candidate scores in impression order, space separated.
    pub scores: String,
}

/// Scores every test impression and aggregates metrics. Histories longer
/// than `data.max_history` keep their most recent clicks.
pub fn evaluate_dataset<T: Real>(
    model: &Recommender,
    store: &ParameterStore<T>,
    ds: &Dataset,
    data: &DataConfig,
) -> Result<(EvalReport, Vec<ImpressionRow>)> {
    if ds.impressions.is_empty() {
        return Err(Error::Data("test set has no impressions".into()));
    }
    let mut report = EvalReport::default();
    let mut kept: Vec<Impression> = Vec::new();
    let mut original_len = Vec::new();
    for imp in &ds.impressions {
        let refs_known = imp.history.iter().all(|id| ds.contains(id))
            && imp.candidates.iter().all(|c| ds.contains(&c.id));
        if !refs_known {
            report.unknown_references += 1;
            continue;
        }
        if imp.history.is_empty() {
            report.empty_history += 1;
            continue;
        }
        let mut imp = imp.clone();
        original_len.push(imp.history.len());
        if imp.history.len() > data.max_history {
            imp.history.drain(..imp.history.len() - data.max_history);
        }
        kept.push(imp);
    }
    if report.unknown_references > 0 {
        log::warn!(
            "{} impressions reference unknown articles",
            report.unknown_references
        );
    }
    if kept.is_empty() {
        return Err(Error::Data("no test impression can be scored".into()));
    }
    let scores = model.score_impressions(store, ds, &kept)?;
    let labels: Vec<Vec<u8>> = kept
        .iter()
        .map(|i| i.candidates.iter().map(|c| c.label).collect())
        .collect();
    let filtered: Vec<bool> = original_len
        .iter()
        .map(|&l| l >= data.min_history)
        .collect();
    report.unfiltered = MetricReport::from_impressions(
        scores
            .iter()
            .zip(&labels)
            .map(|(s, l)| (s.as_slice(), l.as_slice())),
    );
    report.filtered = MetricReport::from_impressions(
        scores
            .iter()
            .zip(&labels)
            .zip(&filtered)
            .filter(|(_, &f)| f)
            .map(|((s, l), _)| (s.as_slice(), l.as_slice())),
    );
    let rows = kept
        .iter()
        .enumerate()
        .map(|(i, imp)| {
            let m = impression_metrics(&scores[i], &labels[i]);
            ImpressionRow {
                impression_id: imp.id.clone(),
                user: imp.user.clone(),
                history_len: original_len[i],
                candidates: imp.candidates.len(),
                filtered: filtered[i],
                auc: m.map(|m| m.auc),
                mrr: m.map(|m| m.mrr),
                ndcg5: m.map(|m| m.ndcg5),
                ndcg10: m.map(|m| m.ndcg10),
                scores: scores[i]
                    .iter()
                    .map(|s| s.to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
            }
        })
        .collect();
    Ok((report, rows))
}

impl EvalReport {
    /// Aligned-column text table.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<12} {:>8} {:>8} {:>8} {:>8} {:>12} {:>8}\n",
            "subset", "AUC", "MRR", "nDCG@5", "nDCG@10", "impressions", "skipped"
        );
        for (name, m) in [
            ("filtered", &self.filtered),
            ("unfiltered", &self.unfiltered),
        ] {
            out.push_str(&format!(
                "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>12} {:>8}\n",
                name, m.auc, m.mrr, m.ndcg5, m.ndcg10, m.impressions, m.skipped
            ));
        }
        if self.unknown_references + self.empty_history > 0 {
            out.push_str(&format!(
                "not scored: {} with unknown articles, {} without history\n",
                self.unknown_references, self.empty_history
            ));
        }
        out
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join("report.txt");
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))
    }
}

pub fn write_impression_csv(path: &Path, rows: &[ImpressionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
