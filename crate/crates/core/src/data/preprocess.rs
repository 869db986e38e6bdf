use super::dataset::{Dataset, Impression};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PreprocessStats {
    pub input: usize,
    pub kept: usize,
    pub short_history: usize,
    pub truncated_history: usize,
    pub unknown_history_ids: usize,
    pub unknown_candidates: usize,
    pub no_candidates: usize,
}

/// Drops unknown article references, then impressions whose history is
/// shorter than `min_history`, and keeps the `max_history` most recent
/// clicks. Idempotent.
pub fn preprocess(
    ds: &Dataset,
    min_history: usize,
    max_history: usize,
) -> (Dataset, PreprocessStats) {
    let mut stats = PreprocessStats {
        input: ds.impressions.len(),
        ..Default::default()
    };
    let mut kept = Vec::with_capacity(ds.impressions.len());
    for imp in &ds.impressions {
        let mut history: Vec<String> = imp.history.clone();
        let before = history.len();
        history.retain(|id| ds.contains(id));
        stats.unknown_history_ids += before - history.len();
        let mut candidates = imp.candidates.clone();
        let before = candidates.len();
        candidates.retain(|c| ds.contains(&c.id));
        stats.unknown_candidates += before - candidates.len();
        if candidates.is_empty() {
            stats.no_candidates += 1;
            continue;
        }
        if history.len() < min_history {
            stats.short_history += 1;
            continue;
        }
        if history.len() > max_history {
            history.drain(..history.len() - max_history);
            stats.truncated_history += 1;
        }
        kept.push(Impression {
            history,
            candidates,
            ..imp.clone()
        });
    }
    stats.kept = kept.len();
    (ds.with_impressions(kept), stats)
}

/// Splits off the last `fraction` of impressions by time (file order when
/// times are missing or unparseable) as a validation set.
pub fn split_validation(
    impressions: &[Impression],
    fraction: f64,
) -> (Vec<Impression>, Vec<Impression>) {
    let mut order: Vec<usize> = (0..impressions.len()).collect();
    let times: Vec<Option<chrono::NaiveDateTime>> = impressions
        .iter()
        .map(|i| i.time.as_deref().and_then(parse_time))
        .collect();
    if times.iter().all(Option::is_some) {
        order.sort_by_key(|&i| times[i]);
    }
    let n_val = ((impressions.len() as f64) * fraction).round() as usize;
    let n_val = n_val.min(impressions.len());
    let cut = impressions.len() - n_val;
    let train = order[..cut]
        .iter()
        .map(|&i| impressions[i].clone())
        .collect();
    let val = order[cut..]
        .iter()
        .map(|&i| impressions[i].clone())
        .collect();
    (train, val)
}

/// MIND timestamps look like `11/15/2019 10:22:32 AM`.
fn parse_time(s: &str) -> Option<chrono::NaiveDateTime> {
    chrono::NaiveDateTime::parse_from_str(s, "%m/%d/%Y %I:%M:%S %p")
        .or_else(|_| chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S"))
        .ok()
}
