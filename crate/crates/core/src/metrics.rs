//! Per-impression ranking metrics and their averages.
//!
//! AUC gives tied positive/negative pairs half credit. MRR and nDCG rank
//! tied candidates in their original list order.

use serde::{Deserialize, Serialize};

/// Indices of `scores` grouped into blocks of equal score, best first.
fn tie_blocks(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match blocks.last_mut() {
            Some(b) if scores[b[0]] == scores[i] => b.push(i),
            _ => blocks.push(vec![i]),
        }
    }
    blocks
}

fn counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l > 0).count();
    (pos, labels.len() - pos)
}

/// Area under the ROC curve via the rank-sum formula with midranks.
/// `None` unless both labels are present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let (p, n) = counts(labels);
    if p == 0 || n == 0 || scores.len() != labels.len() {
        return None;
    }
    // Ascending midranks, 1-based.
    let mut rank_sum = 0.0;
    let mut seen = 0usize;
    for block in tie_blocks(scores).iter().rev() {
        let mid = seen as f64 + (block.len() as f64 + 1.0) / 2.0;
        rank_sum += mid * block.iter().filter(|&&i| labels[i] > 0).count() as f64;
        seen += block.len();
    }
    Some((rank_sum - (p * (p + 1)) as f64 / 2.0) / (p * n) as f64)
}

/// Zero-based rank of each candidate: descending score, ties in list order.
fn stable_ranks(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ranks = vec![0; scores.len()];
    for (r, i) in order.into_iter().enumerate() {
        ranks[i] = r;
    }
    ranks
}

/// Mean reciprocal rank of the clicked items.
pub fn mrr(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let (p, _) = counts(labels);
    if p == 0 || scores.len() != labels.len() {
        return None;
    }
    let ranks = stable_ranks(scores);
    let rr: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l > 0)
        .map(|(_, &r)| 1.0 / (r + 1) as f64)
        .sum();
    Some(rr / p as f64)
}

fn dcg_discount(rank: usize, k: usize) -> f64 {
    if rank < k {
        1.0 / ((rank + 2) as f64).log2()
    } else {
        0.0
    }
}

/// nDCG truncated at `k` with gain `2^label − 1`.
pub fn ndcg_at_k(scores: &[f64], labels: &[u8], k: usize) -> Option<f64> {
    if scores.len() != labels.len() || labels.iter().all(|&l| l == 0) {
        return None;
    }
    let gain = |l: u8| 2f64.powi(l as i32) - 1.0;
    let ranks = stable_ranks(scores);
    let dcg: f64 = labels
        .iter()
        .zip(&ranks)
        .map(|(&l, &r)| gain(l) * dcg_discount(r, k))
        .sum();
    let mut ideal: Vec<u8> = labels.to_vec();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .enumerate()
        .map(|(r, &l)| gain(l) * dcg_discount(r, k))
        .sum();
    Some(dcg / idcg)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    /// Impressions with both labels, the ones averaged over.
    pub impressions: usize,
    /// Impressions without both labels.
    pub skipped: usize,
}

/// Per-impression metrics; `None` when the impression lacks either label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ImpressionMetrics {
    pub auc: f64,
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

pub fn impression_metrics(scores: &[f64], labels: &[u8]) -> Option<ImpressionMetrics> {
    Some(ImpressionMetrics {
        auc: auc(scores, labels)?,
        mrr: mrr(scores, labels)?,
        ndcg5: ndcg_at_k(scores, labels, 5)?,
        ndcg10: ndcg_at_k(scores, labels, 10)?,
    })
}

impl MetricReport {
    /// Averages over impressions given as `(scores, labels)`.
    pub fn from_impressions<'a, I>(items: I) -> Self
    where
        I: IntoIterator<Item = (&'a [f64], &'a [u8])>,
    {
        let mut r = MetricReport::default();
        for (s, l) in items {
            match impression_metrics(s, l) {
                Some(m) => {
                    r.auc += m.auc;
                    r.mrr += m.mrr;
                    r.ndcg5 += m.ndcg5;
                    r.ndcg10 += m.ndcg10;
                    r.impressions += 1;
                }
                None => r.skipped += 1,
            }
        }
        if r.impressions > 0 {
            let n = r.impressions as f64;
            r.auc /= n;
            r.mrr /= n;
            r.ndcg5 /= n;
            r.ndcg10 /= n;
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_reversed() {
        let s = [0.9, 0.1, 0.5];
        assert_eq!(auc(&s, &[1, 0, 0]), Some(1.0));
        assert_eq!(auc(&s, &[0, 1, 0]), Some(0.0));
        assert_eq!(mrr(&s, &[1, 0, 0]), Some(1.0));
        assert_eq!(mrr(&s, &[0, 0, 1]), Some(0.5));
        assert_eq!(ndcg_at_k(&s, &[1, 0, 0], 5), Some(1.0));
    }

    #[test]
    fn all_tied_is_chance() {
        let s = [0.3; 4];
        assert_eq!(auc(&s, &[1, 0, 0, 0]), Some(0.5));
        assert_eq!(auc(&s, &[0, 0, 1, 1]), Some(0.5));
        assert_eq!(mrr(&s, &[0, 0, 1, 0]), Some(1.0 / 3.0));
        assert_eq!(mrr(&s, &[1, 1, 0, 0]), Some(0.75));
    }

    #[test]
    fn single_label_impressions_are_skipped() {
        assert_eq!(auc(&[0.1, 0.2], &[1, 1]), None);
        let r = MetricReport::from_impressions([
            (&[0.1, 0.2][..], &[1u8, 1][..]),
            (&[0.9, 0.2][..], &[1u8, 0][..]),
        ]);
        assert_eq!(r.impressions, 1);
        assert_eq!(r.skipped, 1);
        assert_eq!(r.auc, 1.0);
    }

    #[test]
    fn pairwise_example() {
        assert_eq!(auc(&[0.2, 0.5, 0.1], &[1, 0, 0]), Some(0.5));
        let v = ndcg_at_k(&[0.5, 0.9, 0.1], &[1, 0, 0], 5).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((v - 0.6309).abs() < 1e-4);
    }

    #[test]
    fn ndcg_cutoff() {
        // Positive ranked 6th of 6 falls outside the top 5.
        let s = [6.0, 5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(ndcg_at_k(&s, &[0, 0, 0, 0, 0, 1], 5), Some(0.0));
        let v = ndcg_at_k(&s, &[0, 0, 0, 0, 0, 1], 10).unwrap();
        assert!((v - 1.0 / 7f64.log2()).abs() < 1e-15);
    }
}
