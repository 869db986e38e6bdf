//! Stage 2: click-prediction training and candidate ranking.

use std::collections::HashMap;
use std::rc::Rc;

use rand::seq::{index, SliceRandom};
use rand::RngCore;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{SeqLayout, Tape, Var};
use crate::config::{ModelConfig, NceMode, RecsysConfig};
use crate::data::{Dataset, Impression, NewsArticle};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::news::NewsEncoder;
use crate::optim::AdamW;
use crate::params::ParameterStore;
use crate::rng::SeedStream;
use crate::tensor::{Real, Tensor};
use crate::train_log::TrainingLog;
use crate::user::{HistoryBatch, UserModel};

/// News encoder plus user model.
#[derive(Clone, Debug)]
pub struct Recommender {
    pub news: NewsEncoder,
    pub user: UserModel,
}

/// One positive with `r` negatives from the same impression; all fields
/// index into the dataset's article list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingInstance {
    pub history: Vec<usize>,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

impl TrainingInstance {
    /// `[positive, negatives...]`.
    pub fn candidates(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.positive).chain(self.negatives.iter().copied())
    }
}

fn resolve(ds: &Dataset, ids: &[String]) -> Result<Vec<usize>> {
    let mut missing: Vec<&str> = ids
        .iter()
        .filter(|id| !ds.contains(id))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        missing.dedup();
        return Err(Error::Data(format!(
            "unknown article ids: {}",
            missing.join(", ")
        )));
    }
    Ok(ids
        .iter()
        .map(|id| ds.article_index(id).expect("checked"))
        .collect())
}

/// One instance per clicked candidate, each with `r` negatives drawn
/// uniformly from the impression's non-clicked candidates (with
/// replacement when fewer than `r` exist). Returns no instances for an
/// impression without clicks, non-clicks or history.
pub fn sample_negatives(
    ds: &Dataset,
    imp: &Impression,
    r: usize,
    rng: &mut SeedStream,
) -> Result<Vec<TrainingInstance>> {
    let pos: Vec<String> = imp.positives().map(str::to_string).collect();
    let neg: Vec<String> = imp.negatives().map(str::to_string).collect();
    if pos.is_empty() || neg.is_empty() || imp.history.is_empty() {
        return Ok(Vec::new());
    }
    let history = resolve(ds, &imp.history)?;
    let pos = resolve(ds, &pos)?;
    let neg = resolve(ds, &neg)?;
    Ok(pos
        .into_iter()
        .map(|positive| {
            let negatives = if neg.len() >= r {
                index::sample(rng.rng(), neg.len(), r)
                    .into_iter()
                    .map(|i| neg[i])
                    .collect()
            } else {
                (0..r).map(|_| neg[rng.below(neg.len())]).collect()
            };
            TrainingInstance {
                history: history.clone(),
                positive,
                negatives,
            }
        })
        .collect())
}

/// Raw dot-product scores of candidates against a user vector.
pub fn click_scores<T: Real>(u: &[T], candidates: &[Vec<T>]) -> Vec<T> {
    candidates
        .iter()
        .map(|c| u.iter().zip(c).map(|(&a, &b)| a * b).sum())
        .collect()
}

/// Mean NCE loss over score rows ordered `[positive, negatives...]`.
pub fn nce_loss<T: Real>(tape: &mut Tape<T>, scores: Var, mode: NceMode) -> Result<Var> {
    let n = tape.value(scores).rows();
    let logits = match mode {
        NceMode::Standard => scores,
        NceMode::Literal => {
            if let Some(i) = tape
                .value(scores)
                .data()
                .iter()
                .position(|v| !v.is_finite())
            {
                let cols = tape.value(scores).cols();
                return Err(Error::Numerical(format!(
                    "non-finite score in instance {}",
                    i / cols
                )));
            }
            tape.softmax_rows(scores)
        }
    };
    tape.softmax_xent(logits, &vec![0; n])
}

/// [`nce_loss`] on plain score rows.
pub fn nce_loss_value(scores: &[Vec<f64>], mode: NceMode) -> Result<f64> {
    let t = Tensor::from_rows(scores)?;
    let mut tape = Tape::new();
    let s = tape.constant(t);
    let l = nce_loss(&mut tape, s, mode)?;
    Ok(tape.value(l).data()[0])
}

#[derive(Clone, Debug, Serialize)]
pub struct RecsysStep {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub wall: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Validation {
    pub step: u64,
    pub epoch: usize,
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, Default)]
pub struct RecsysReport {
    pub steps: Vec<RecsysStep>,
    pub validations: Vec<Validation>,
    /// The validation whose parameters were kept, if any.
    pub best: Option<Validation>,
    pub instances_per_epoch: usize,
    pub skipped_impressions: usize,
}

impl RecsysReport {
    /// Mean loss over the first and last `window` steps.
    pub fn loss_window(&self, window: usize) -> (f64, f64) {
        let n = self.steps.len();
        let w = window.min(n).max(1);
        let mean = |s: &[RecsysStep]| s.iter().map(|x| x.loss).sum::<f64>() / s.len().max(1) as f64;
        (
            mean(&self.steps[..w.min(n)]),
            mean(&self.steps[n.saturating_sub(w)..]),
        )
    }
}

type ShardOutput<T> = (f64, Vec<(String, Tensor<T>)>);

impl Recommender {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            news: NewsEncoder::new(cfg)?,
            user: UserModel::new(cfg)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        self.news.config()
    }

    /// Fresh parameters; news and user parts draw from separate streams.
    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, rng: &SeedStream) -> Result<()> {
        self.news.init(store, &mut rng.derive("init-news"))?;
        self.user.init(store, &mut rng.derive("init-user"))
    }

    /// Mean NCE loss of `instances` on one tape.
    pub fn instance_loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        ds: &Dataset,
        instances: &[&TrainingInstance],
        mode: NceMode,
    ) -> Result<Var> {
        let per = instances
            .first()
            .map(|i| 1 + i.negatives.len())
            .ok_or_else(|| Error::Usage("empty training batch".into()))?;
        if instances.iter().any(|i| 1 + i.negatives.len() != per) {
            return Err(Error::Usage(
                "instances with differing negative counts".into(),
            ));
        }
        let mut unique: Vec<usize> = instances
            .iter()
            .flat_map(|i| i.history.iter().copied().chain(i.candidates()))
            .collect();
        unique.sort_unstable();
        unique.dedup();
        let row: HashMap<usize, usize> = unique.iter().enumerate().map(|(r, &a)| (a, r)).collect();
        let arts: Vec<&NewsArticle> = unique.iter().map(|&a| &ds.articles[a]).collect();
        let nb = self.news.encode(tape, store, &arts)?;

        let hist_rows: Vec<usize> = instances
            .iter()
            .flat_map(|i| i.history.iter().map(|a| row[a]))
            .collect();
        let lengths: Vec<usize> = instances.iter().map(|i| i.history.len()).collect();
        let hist_rows = Rc::new(hist_rows);
        let hist = HistoryBatch {
            h: tape.gather(nb.h, hist_rows.clone())?,
            e: tape.gather(nb.e, hist_rows)?,
            layout: Rc::new(SeqLayout::from_lengths(&lengths)),
        };
        let users = self.user.encode_users(tape, store, &hist)?;

        let cand_rows: Rc<Vec<usize>> = Rc::new(
            instances
                .iter()
                .flat_map(|i| i.candidates().map(|a| row[&a]))
                .collect(),
        );
        let hc = tape.gather(nb.h, cand_rows.clone())?;
        let ec = tape.gather(nb.e, cand_rows)?;
        let c = self.user.encode_candidates(tape, store, hc, ec)?;
        let scores = tape.group_dot(users.u, c, per)?;
        nce_loss(tape, scores, mode)
    }

    fn shard_gradients<T: Real>(
        &self,
        store: &ParameterStore<T>,
        ds: &Dataset,
        shard: &[&TrainingInstance],
        weight: f64,
        mode: NceMode,
        rng: SeedStream,
    ) -> Result<ShardOutput<T>> {
        let mut tape = Tape::training(rng);
        let loss = self.instance_loss(&mut tape, store, ds, shard, mode)?;
        let value = tape.value(loss).data()[0].as_f64();
        let scaled = tape.scale(loss, weight);
        tape.backward(scaled)?;
        let grads = tape
            .param_grads()
            .map(|(n, g)| (n.to_string(), g.clone()))
            .collect();
        Ok((value * weight, grads))
    }

    /// Eval-mode click scores for every impression, candidates in order.
    pub fn score_impressions<T: Real>(
        &self,
        store: &ParameterStore<T>,
        ds: &Dataset,
        impressions: &[Impression],
    ) -> Result<Vec<Vec<f64>>> {
        let mut all_ids: Vec<String> = Vec::new();
        for imp in impressions {
            if imp.history.is_empty() {
                return Err(Error::Data(format!("impression {} has no history", imp.id)));
            }
            all_ids.extend(imp.history.iter().cloned());
            all_ids.extend(imp.candidates.iter().map(|c| c.id.clone()));
        }
        let mut needed = resolve(ds, &all_ids)?;
        needed.sort_unstable();
        needed.dedup();

        // Per-article (h, e, c), computed once.
        let d = self.config().dim;
        let chunks: Vec<&[usize]> = needed.chunks(256).collect();
        let encoded: Vec<Result<(Vec<T>, Vec<T>, Vec<T>)>> = chunks
            .par_iter()
            .map(|chunk| {
                let arts: Vec<&NewsArticle> = chunk.iter().map(|&a| &ds.articles[a]).collect();
                let mut tape = Tape::new();
                let nb = self.news.encode(&mut tape, store, &arts)?;
                let c = self.user.encode_candidates(&mut tape, store, nb.h, nb.e)?;
                Ok((
                    tape.value(nb.h).data().to_vec(),
                    tape.value(nb.e).data().to_vec(),
                    tape.value(c).data().to_vec(),
                ))
            })
            .collect();
        let mut slot = vec![usize::MAX; ds.articles.len()];
        let (mut h_all, mut e_all, mut c_all) = (Vec::new(), Vec::new(), Vec::new());
        for (chunk, enc) in chunks.iter().zip(encoded) {
            let (h, e, c) = enc?;
            for (k, &a) in chunk.iter().enumerate() {
                slot[a] = h_all.len() / d + k;
            }
            h_all.extend(h);
            e_all.extend(e);
            c_all.extend(c);
        }
        fn row<'a, T>(buf: &'a [T], slot: &[usize], d: usize, a: usize) -> &'a [T] {
            &buf[slot[a] * d..(slot[a] + 1) * d]
        }

        let idx = |id: &str| ds.article_index(id).expect("resolved above");
        let imp_chunks: Vec<&[Impression]> = impressions.chunks(128).collect();
        let scored: Vec<Result<Vec<Vec<f64>>>> = imp_chunks
            .par_iter()
            .map(|chunk| {
                let mut hd = Vec::new();
                let mut ed = Vec::new();
                let mut lengths = Vec::with_capacity(chunk.len());
                for imp in chunk.iter() {
                    for id in &imp.history {
                        hd.extend_from_slice(row(&h_all, &slot, d, idx(id)));
                        ed.extend_from_slice(row(&e_all, &slot, d, idx(id)));
                    }
                    lengths.push(imp.history.len());
                }
                let mut tape = Tape::new();
                let rows = hd.len() / d;
                let hist = HistoryBatch {
                    h: tape.constant(Tensor::new([rows, d], hd)?),
                    e: tape.constant(Tensor::new([rows, d], ed)?),
                    layout: Rc::new(SeqLayout::from_lengths(&lengths)),
                };
                let users = self.user.encode_users(&mut tape, store, &hist)?;
                let u = tape.value(users.u);
                Ok(chunk
                    .iter()
                    .enumerate()
                    .map(|(i, imp)| {
                        let ui = u.row(i);
                        imp.candidates
                            .iter()
                            .map(|c| {
                                let cv = row(&c_all, &slot, d, idx(&c.id));
                                ui.iter().zip(cv).map(|(&a, &b)| a * b).sum::<T>().as_f64()
                            })
                            .collect()
                    })
                    .collect())
            })
            .collect();
        let mut out = Vec::with_capacity(impressions.len());
        for s in scored {
            out.extend(s?);
        }
        Ok(out)
    }

    /// Ranking metrics of the current parameters on `impressions`.
    pub fn evaluate<T: Real>(
        &self,
        store: &ParameterStore<T>,
        ds: &Dataset,
        impressions: &[Impression],
    ) -> Result<MetricReport> {
        let scores = self.score_impressions(store, ds, impressions)?;
        let labels: Vec<Vec<u8>> = impressions
            .iter()
            .map(|i| i.candidates.iter().map(|c| c.label).collect())
            .collect();
        Ok(MetricReport::from_impressions(
            scores
                .iter()
                .zip(&labels)
                .map(|(s, l)| (s.as_slice(), l.as_slice())),
        ))
    }

    /// Candidates ranked by score, highest first; ties go to the smaller
    /// article id.
    pub fn recommend<T: Real>(
        &self,
        store: &ParameterStore<T>,
        ds: &Dataset,
        history: &[String],
        candidates: &[String],
        top_k: usize,
    ) -> Result<Vec<(String, f64)>> {
        if history.is_empty() {
            return Err(Error::Usage(
                "recommendation needs at least one history article".into(),
            ));
        }
        if candidates.is_empty() {
            return Err(Error::Usage("no candidates to rank".into()));
        }
        let mut all: Vec<String> = history.to_vec();
        all.extend(candidates.iter().cloned());
        resolve(ds, &all)?;
        let imp = Impression {
            id: "query".into(),
            user: String::new(),
            time: None,
            history: history.to_vec(),
            candidates: candidates
                .iter()
                .map(|id| crate::data::Candidate {
                    id: id.clone(),
                    label: 0,
                })
                .collect(),
        };
        let scores = self.score_impressions(store, ds, std::slice::from_ref(&imp))?;
        let mut ranked: Vec<(String, f64)> = candidates
            .iter()
            .cloned()
            .zip(scores[0].iter().copied())
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(top_k.max(1));
        Ok(ranked)
    }
}

/// Number of instances an epoch yields (independent of sampling).
fn count_instances(ds: &Dataset) -> (usize, usize) {
    let mut n = 0;
    let mut skipped = 0;
    for imp in &ds.impressions {
        let p = imp.positives().count();
        if p == 0 || imp.negatives().next().is_none() || imp.history.is_empty() {
            skipped += 1;
        } else {
            n += p;
        }
    }
    (n, skipped)
}

fn split_shards<'a>(
    batch: &[&'a TrainingInstance],
    shards: usize,
) -> Vec<Vec<&'a TrainingInstance>> {
    let k = shards.min(batch.len()).max(1);
    let base = batch.len() / k;
    let extra = batch.len() % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(batch[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Trains all trainable parameters in `store` on `train`, validating on
/// `validation` after each epoch (or every `validate_every` steps).
pub fn train_recsys<T: Real>(
    model: &Recommender,
    store: &mut ParameterStore<T>,
    train: &Dataset,
    validation: Option<&[Impression]>,
    cfg: &RecsysConfig,
    rng: &SeedStream,
    log: &mut TrainingLog,
) -> Result<RecsysReport> {
    cfg.validate()?;
    let (per_epoch, skipped) = count_instances(train);
    if per_epoch == 0 {
        return Err(Error::Data("no usable training impressions".into()));
    }
    let steps_per_epoch = per_epoch.div_ceil(cfg.batch_size);
    let mut opt = AdamW::new(
        cfg.optimizer.clone(),
        (steps_per_epoch * cfg.epochs.max(1)) as u64,
    )?;
    let mut report = RecsysReport {
        instances_per_epoch: per_epoch,
        skipped_impressions: skipped,
        ..Default::default()
    };
    let mut best_store: Option<ParameterStore<T>> = None;
    let mut dropout_rng = rng.derive("recsys-dropout");

    let mut validate = |store: &ParameterStore<T>,
                        step: u64,
                        epoch: usize,
                        report: &mut RecsysReport,
                        log: &mut TrainingLog|
     -> Result<()> {
        let Some(val) = validation.filter(|v| !v.is_empty()) else {
            return Ok(());
        };
        let metrics = model.evaluate(store, train, val)?;
        let v = Validation {
            step,
            epoch,
            metrics,
        };
        log.record(&serde_json::json!({"validation": &v}))?;
        log::info!("step {step}: validation AUC {:.4}", metrics.auc);
        if report
            .best
            .as_ref()
            .is_none_or(|b| metrics.auc > b.metrics.auc)
        {
            report.best = Some(v.clone());
            if cfg.select_best {
                best_store = Some(store.clone());
            }
        }
        report.validations.push(v);
        Ok(())
    };

    for epoch in 0..cfg.epochs {
        let mut neg_rng = rng.derive(&format!("negatives-{epoch}"));
        let mut instances = Vec::with_capacity(per_epoch);
        for imp in &train.impressions {
            instances.extend(sample_negatives(train, imp, cfg.negatives, &mut neg_rng)?);
        }
        instances.shuffle(rng.derive(&format!("order-{epoch}")).rng());
        let refs: Vec<&TrainingInstance> = instances.iter().collect();
        for batch in refs.chunks(cfg.batch_size) {
            let base = SeedStream::new(dropout_rng.next_u64());
            let shards = split_shards(batch, cfg.shards);
            let outputs: Vec<Result<ShardOutput<T>>> = {
                let store = &*store;
                shards
                    .par_iter()
                    .enumerate()
                    .map(|(i, shard)| {
                        let weight = shard.len() as f64 / batch.len() as f64;
                        model.shard_gradients(
                            store,
                            train,
                            shard,
                            weight,
                            cfg.nce_mode,
                            base.derive(&format!("shard-{i}")),
                        )
                    })
                    .collect()
            };
            store.zero_grads();
            let mut loss = 0.0;
            for out in outputs {
                let (l, grads) = out?;
                loss += l;
                for (name, g) in &grads {
                    store.accumulate_grad(name, g)?;
                }
            }
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "training loss became {loss} at step {}",
                    opt.step_count()
                )));
            }
            let grad_norm = store.clip_grad_norm(cfg.grad_clip);
            let lr = opt.current_lr("");
            opt.step(store)?;
            let rec = RecsysStep {
                step: opt.step_count(),
                epoch,
                loss,
                grad_norm,
                lr,
                wall: log.elapsed(),
            };
            log.record(&rec)?;
            report.steps.push(rec);
            if cfg.validate_every > 0 && opt.step_count() % cfg.validate_every as u64 == 0 {
                validate(store, opt.step_count(), epoch, &mut report, log)?;
            }
        }
        if cfg.validate_every == 0 {
            validate(store, opt.step_count(), epoch, &mut report, log)?;
        }
    }
    if cfg.epochs == 0 {
        validate(store, 0, 0, &mut report, log)?;
    }
    drop(validate);
    if let Some(best) = best_store {
        *store = best;
    }
    log.flush()?;
    Ok(report)
}
