use std::collections::HashSet;

use rand::seq::index;

use super::dataset::{Candidate, Impression};
use crate::rng::SeedStream;

/// One user's clicks, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ClickLog {
    pub user: String,
    pub clicks: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NegativeSamplingStats {
    pub impressions: usize,
    pub short_pools: usize,
}

/// One impression per click: the clicked article labeled 1 plus `n`
/// uniformly sampled articles from `pool` that the user never clicked. The
/// history is every earlier click. If fewer than `n` eligible articles
/// exist, all of them are used.
pub fn adressa_style_negatives(
    logs: &[ClickLog],
    pool: &[String],
    n: usize,
    rng: &mut SeedStream,
) -> (Vec<Impression>, NegativeSamplingStats) {
    let mut stats = NegativeSamplingStats::default();
    let mut out = Vec::new();
    for log in logs {
        let clicked: HashSet<&str> = log.clicks.iter().map(String::as_str).collect();
        let eligible: Vec<&String> = pool
            .iter()
            .filter(|a| !clicked.contains(a.as_str()))
            .collect();
        for (pos, click) in log.clicks.iter().enumerate() {
            let take = n.min(eligible.len());
            if take < n {
                stats.short_pools += 1;
            }
            let mut candidates = vec![Candidate {
                id: click.clone(),
                label: 1,
            }];
            for i in index::sample(rng.rng(), eligible.len(), take) {
                candidates.push(Candidate {
                    id: eligible[i].clone(),
                    label: 0,
                });
            }
            out.push(Impression {
                id: format!("{}-{pos}", log.user),
                user: log.user.clone(),
                time: None,
                history: log.clicks[..pos].to_vec(),
                candidates,
            });
        }
    }
    stats.impressions = out.len();
    if stats.short_pools > 0 {
        log::warn!(
            "{} impressions got fewer than {n} negatives: pool too small",
            stats.short_pools
        );
    }
    (out, stats)
}
