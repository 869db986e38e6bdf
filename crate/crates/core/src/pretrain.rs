//! Stage 1: signature-entity / title contrastive pre-training of the news
//! encoder.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::config::PretrainConfig;
use crate::data::NewsArticle;
use crate::error::{Error, Result};
use crate::news::NewsEncoder;
use crate::optim::AdamW;
use crate::params::ParameterStore;
use crate::rng::SeedStream;
use crate::tensor::{Real, Tensor};
use crate::train_log::TrainingLog;

/// Mean InfoNCE over rows: row `i` of `targets` is the positive for anchor
/// `i`, every other row a negative. Similarity is cosine divided by `tau`.
pub fn info_nce<T: Real>(tape: &mut Tape<T>, anchors: Var, targets: Var, tau: f64) -> Result<Var> {
    let v = tape.value(anchors).rows();
    if v < 2 {
        return Err(Error::Usage(format!(
            "contrastive batch of {v} rows; need at least 2"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let a = tape.l2_normalize_rows(anchors)?;
    let t = tape.l2_normalize_rows(targets)?;
    let sim = tape.matmul_nt(a, t)?;
    let logits = tape.scale(sim, 1.0 / tau);
    let labels: Vec<usize> = (0..v).collect();
    tape.softmax_xent(logits, &labels)
}

/// [`info_nce`] on plain tensors.
pub fn info_nce_value<T: Real>(anchors: &Tensor<T>, targets: &Tensor<T>, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(anchors.clone());
    let t = tape.constant(targets.clone());
    let l = info_nce(&mut tape, a, t, tau)?;
    Ok(tape.value(l).data()[0].as_f64())
}

/// Dropout-perturbed copy of `x` with a fresh mask per call.
pub fn mirror_batch<T: Real>(x: &Tensor<T>, rate: f64, rng: &mut SeedStream) -> Result<Tensor<T>> {
    let mut tape = Tape::training(SeedStream::new(rand::RngCore::next_u64(rng)));
    let v = tape.constant(x.clone());
    let m = tape.dropout(v, rate)?;
    Ok(tape.value(m).clone())
}

/// Combined loss and its unweighted components.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub entity_title: f64,
    pub title_mirror: f64,
    pub entity_mirror: f64,
}

/// `α·L(e, h) + β·L(h, h⁺) + δ·L(e, e⁺)` with mirrors drawn on `tape`.
pub fn combined_loss<T: Real>(
    tape: &mut Tape<T>,
    e: Var,
    h: Var,
    cfg: &PretrainConfig,
) -> Result<LossBreakdown> {
    let (alpha, beta, delta) = cfg.weights();
    let l_et = info_nce(tape, e, h, cfg.tau_et)?;
    let h_plus = tape.dropout(h, cfg.mirror_dropout)?;
    let l_hh = info_nce(tape, h, h_plus, cfg.tau_hh)?;
    let e_plus = tape.dropout(e, cfg.mirror_dropout)?;
    let l_ee = info_nce(tape, e, e_plus, cfg.tau_ee)?;
    let a = tape.scale(l_et, alpha);
    let b = tape.scale(l_hh, beta);
    let c = tape.scale(l_ee, delta);
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    let value = |tape: &Tape<T>, v: Var| tape.value(v).data()[0].as_f64();
    Ok(LossBreakdown {
        total,
        entity_title: value(tape, l_et),
        title_mirror: value(tape, l_hh),
        entity_mirror: value(tape, l_ee),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainStep {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub entity_title: f64,
    pub title_mirror: f64,
    pub entity_mirror: f64,
    pub lr: f64,
    pub wall: f64,
}

#[derive(Clone, Debug, Default)]
pub struct PretrainReport {
    pub steps: Vec<PretrainStep>,
}

impl PretrainReport {
    /// Mean total loss over the first and last `window` steps.
    pub fn loss_window(&self, window: usize) -> (f64, f64) {
        let n = self.steps.len();
        let w = window.min(n).max(1);
        let mean =
            |s: &[PretrainStep]| s.iter().map(|x| x.loss).sum::<f64>() / s.len().max(1) as f64;
        (
            mean(&self.steps[..w.min(n)]),
            mean(&self.steps[n.saturating_sub(w)..]),
        )
    }
}

/// Mini-batches per epoch: shuffled without replacement; a trailing batch
/// with a single article is dropped because it has no negatives.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut SeedStream) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng.rng());
    order
        .chunks(batch)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Trains every news-encoder parameter in `store` on `corpus`.
pub fn pretrain<T: Real>(
    encoder: &NewsEncoder,
    store: &mut ParameterStore<T>,
    corpus: &[NewsArticle],
    cfg: &PretrainConfig,
    rng: &SeedStream,
    log: &mut TrainingLog,
) -> Result<PretrainReport> {
    cfg.validate()?;
    if corpus.len() < 2 {
        return Err(Error::Usage(format!(
            "pre-training needs at least 2 articles, got {}",
            corpus.len()
        )));
    }
    if cfg.epochs == 0 {
        return Ok(PretrainReport::default());
    }
    let per_epoch = epoch_batches(corpus.len(), cfg.batch_size, &mut SeedStream::new(0)).len();
    let mut opt = AdamW::new(cfg.optimizer.clone(), (per_epoch * cfg.epochs) as u64)?;
    let mut order_rng = rng.derive("pretrain-order");
    let mut dropout_rng = rng.derive("pretrain-dropout");
    let mut report = PretrainReport::default();
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(corpus.len(), cfg.batch_size, &mut order_rng) {
            let arts: Vec<&NewsArticle> = batch.iter().map(|&i| &corpus[i]).collect();
            let mut tape =
                Tape::training(SeedStream::new(rand::RngCore::next_u64(&mut dropout_rng)));
            let nb = encoder.encode(&mut tape, store, &arts)?;
            let loss = combined_loss(&mut tape, nb.e, nb.h, cfg)?;
            let total = tape.value(loss.total).data()[0].as_f64();
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "pre-training loss became {total} at step {}",
                    opt.step_count()
                )));
            }
            tape.backward(loss.total)?;
            store.zero_grads();
            tape.accumulate_into(store)?;
            let lr = opt.current_lr("");
            opt.step(store)?;
            let rec = PretrainStep {
                step: opt.step_count(),
                epoch,
                loss: total,
                entity_title: loss.entity_title,
                title_mirror: loss.title_mirror,
                entity_mirror: loss.entity_mirror,
                lr,
                wall: log.elapsed(),
            };
            log.record(&rec)?;
            report.steps.push(rec);
        }
        if let Some(last) = report.steps.last() {
            log::info!("pretrain epoch {epoch}: loss {:.4}", last.loss);
        }
    }
    log.flush()?;
    Ok(report)
}

/// Entity→title retrieval and collapse diagnostics over fixed batches.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ProbeReport {
    pub batches: usize,
    pub top1_rate: f64,
    /// `1 / batch size`, averaged over batches.
    pub chance: f64,
    pub mean_cosine_h: f64,
    pub mean_cosine_e: f64,
}

fn unit_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// For each batch of `batch` consecutive articles, ranks all titles by
/// cosine to each article's entity embedding and counts exact top-1 hits.
pub fn retrieval_probe<T: Real>(
    encoder: &NewsEncoder,
    store: &ParameterStore<T>,
    articles: &[NewsArticle],
    batch: usize,
) -> Result<ProbeReport> {
    let mut rep = ProbeReport::default();
    let (mut hits, mut total, mut ch, mut ce) = (0usize, 0usize, 0.0, 0.0);
    for chunk in articles.chunks(batch).filter(|c| c.len() >= 2) {
        let refs: Vec<&NewsArticle> = chunk.iter().collect();
        let emb = encoder.embed(store, &refs)?;
        let h = unit_rows(
            &emb.iter()
                .map(|x| x.h.iter().map(|v| v.as_f64()).collect())
                .collect::<Vec<_>>(),
        );
        let e = unit_rows(
            &emb.iter()
                .map(|x| x.e.iter().map(|v| v.as_f64()).collect())
                .collect::<Vec<_>>(),
        );
        let n = chunk.len();
        for i in 0..n {
            let best = (0..n)
                .max_by(|&a, &b| {
                    cos(&e[i], &h[a])
                        .total_cmp(&cos(&e[i], &h[b]))
                        .then(b.cmp(&a))
                })
                .expect("non-empty batch");
            hits += usize::from(best == i);
        }
        total += n;
        let pairs = (n * (n - 1)) as f64;
        let mean_pairwise = |x: &[Vec<f64>]| {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        s += cos(&x[i], &x[j]);
                    }
                }
            }
            s / pairs
        };
        ch += mean_pairwise(&h);
        ce += mean_pairwise(&e);
        rep.chance += 1.0 / n as f64;
        rep.batches += 1;
    }
    if rep.batches == 0 {
        return Err(Error::Usage("probe needs at least 2 articles".into()));
    }
    let b = rep.batches as f64;
    rep.top1_rate = hits as f64 / total as f64;
    rep.chance /= b;
    rep.mean_cosine_h = ch / b;
    rep.mean_cosine_e = ce / b;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct evaluation of the mean InfoNCE by loops.
    fn oracle(a: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> f64 {
        let a = unit_rows(a);
        let t = unit_rows(t);
        let v = a.len();
        let mut total = 0.0;
        for i in 0..v {
            let denom: f64 = (0..v).map(|j| (cos(&a[i], &t[j]) / tau).exp()).sum();
            total += -((cos(&a[i], &t[i]) / tau).exp() / denom).ln();
        }
        total / v as f64
    }

    fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn duplicate_rows_give_log_v() {
        let rows = vec![vec![0.3, -1.0, 2.0]; 6];
        let l = info_nce_value(&tensor(&rows), &tensor(&rows), 0.1).unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn hand_evaluated_pair() {
        let a = tensor(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = info_nce_value(&a, &a, 1.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn matches_loop_oracle_on_random_rows() {
        let mut rng = SeedStream::new(5);
        let mut rows = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..4).map(|_| rng.uniform() - 0.5).collect())
                .collect()
        };
        let (a, t) = (rows(5), rows(5));
        let l = info_nce_value(&tensor(&a), &tensor(&t), 0.3).unwrap();
        assert!((l - oracle(&a, &t, 0.3)).abs() < 1e-12);
    }

    #[test]
    fn zero_row_is_reported() {
        let a = tensor(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        match info_nce_value(&a, &a, 0.1) {
            Err(Error::Numerical(msg)) => assert!(msg.contains('1')),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn small_temperature_drives_loss_to_zero() {
        let a = tensor(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        assert!(info_nce_value(&a, &a, 0.01).unwrap() < 1e-20);
    }

    #[test]
    fn mirror_is_fresh_and_unbiased() {
        let x = Tensor::<f64>::full([200, 50], 1.0);
        let mut rng = SeedStream::new(2);
        let a = mirror_batch(&x, 0.1, &mut rng).unwrap();
        let b = mirror_batch(&x, 0.1, &mut rng).unwrap();
        assert_ne!(a, b);
        let mean = a.data().iter().sum::<f64>() / a.numel() as f64;
        assert!((mean - 1.0).abs() < 0.02);
        assert_eq!(mirror_batch(&x, 0.0, &mut rng).unwrap(), x);
    }

    #[test]
    fn weights_combine_components() {
        let e_rows = [vec![1.0, 0.2], vec![0.1, 1.0], vec![0.5, 0.5]];
        let h_rows = [vec![0.9, 0.1], vec![0.3, 1.0], vec![-0.5, 0.5]];
        let run = |cfg: &PretrainConfig| {
            let mut tape = Tape::<f64>::training(SeedStream::new(1));
            let e = tape.constant(tensor(&e_rows));
            let h = tape.constant(tensor(&h_rows));
            let b = combined_loss(&mut tape, e, h, cfg).unwrap();
            (tape.value(b.total).data()[0], b)
        };
        let cfg = PretrainConfig {
            mirror_dropout: 0.0,
            ..Default::default()
        };
        let (total, b) = run(&cfg);
        let expected = 0.3 * b.entity_title + 0.2 * b.title_mirror + 0.2 * b.entity_mirror;
        assert!((total - expected).abs() < 1e-12);
        let only = PretrainConfig {
            alpha: 1.0,
            beta: 0.0,
            delta: 0.0,
            ..cfg
        };
        let direct = info_nce_value(&tensor(&e_rows), &tensor(&h_rows), 0.1).unwrap();
        assert!((run(&only).0 - direct).abs() < 1e-12);
    }

    #[test]
    fn equal_components_sum_to_point_seven() {
        let cfg = PretrainConfig {
            mirror_dropout: 0.0,
            ..Default::default()
        };
        let rows = vec![vec![0.4, 0.1]; 4];
        let mut tape = Tape::<f64>::training(SeedStream::new(1));
        let e = tape.constant(tensor(&rows));
        let h = tape.constant(tensor(&rows));
        let b = combined_loss(&mut tape, e, h, &cfg).unwrap();
        let c = 4f64.ln();
        assert!((tape.value(b.total).data()[0] - 0.7 * c).abs() < 1e-9);
    }

    #[test]
    fn batches_cover_corpus_once() {
        let b = epoch_batches(10, 4, &mut SeedStream::new(3));
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(
            epoch_batches(9, 4, &mut SeedStream::new(3)).concat().len(),
            8
        );
    }
}
