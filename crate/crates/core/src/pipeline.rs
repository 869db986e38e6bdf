//! The two training stages wired together: pre-train the news encoder, hand
//! its weights to the recommender, train, evaluate.

use std::path::Path;

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::{ModelConfig, RunConfig, Variant};
use crate::data::{
    load_news, preprocess, split_validation, Dataset, Impression, ParseLimits, PreprocessStats,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, EvalReport};
use crate::news::NewsEncoder;
use crate::params::ParameterStore;
use crate::pretrain::{pretrain, PretrainReport};
use crate::ranker::{train_recsys, Recommender, RecsysReport};
use crate::rng::SeedStream;
use crate::tensor::Scalar;
use crate::train_log::TrainingLog;

/// Parameter-name prefix shared by every news-encoder tensor.
pub const NEWS_PREFIX: &str = "news.";

/// `base` with the vocabulary and entity-memory sizes of `ds`.
pub fn sized_for(base: &ModelConfig, ds: &Dataset) -> ModelConfig {
    ModelConfig {
        vocab_size: ds.vocab.len(),
        entity_count: ds.entities.len(),
        ..base.clone()
    }
}

/// Training impressions after preprocessing, split into fit and validation.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub train: Dataset,
    pub validation: Vec<Impression>,
    pub stats: PreprocessStats,
}

pub fn prepare_training(cfg: &RunConfig, ds: &Dataset) -> TrainingData {
    let (clean, stats) = preprocess(ds, cfg.data.min_history, cfg.data.max_history);
    let (fit, validation) = split_validation(&clean.impressions, cfg.recsys.validation_fraction);
    TrainingData {
        train: clean.with_impressions(fit),
        validation,
        stats,
    }
}

/// Stage one: a fresh news encoder trained contrastively on `corpus`'s
/// articles.
pub fn pretrain_stage(
    cfg: &RunConfig,
    corpus: &Dataset,
    log: &mut TrainingLog,
) -> Result<(NewsEncoder, ParameterStore<Scalar>, PretrainReport)> {
    let model = sized_for(&cfg.model, corpus);
    let encoder = NewsEncoder::new(&model)?;
    let root = SeedStream::new(cfg.seed);
    let mut store = ParameterStore::new();
    encoder.init(&mut store, &mut root.derive("pretrain-init"))?;
    let report = pretrain(
        &encoder,
        &mut store,
        &corpus.articles,
        &cfg.pretrain,
        &root.derive("pretrain"),
        log,
    )?;
    Ok((encoder, store, report))
}

/// Stage two: a recommender whose news encoder starts from `init` when
/// given (every `news.*` tensor is copied) and from scratch otherwise.
pub fn recsys_stage(
    cfg: &RunConfig,
    data: &TrainingData,
    init: Option<&ParameterStore<Scalar>>,
    log: &mut TrainingLog,
) -> Result<(Recommender, ParameterStore<Scalar>, RecsysReport)> {
    let model = Recommender::new(&sized_for(&cfg.model, &data.train))?;
    let root = SeedStream::new(cfg.seed);
    let mut store = ParameterStore::new();
    model.init(&mut store, &root.derive("recsys-init"))?;
    if let Some(src) = init {
        copy_prefix(src, &mut store, NEWS_PREFIX)?;
    }
    let report = train_recsys(
        &model,
        &mut store,
        &data.train,
        Some(&data.validation),
        &cfg.recsys,
        &root.derive("recsys"),
        log,
    )?;
    Ok((model, store, report))
}

/// Copies every tensor under `prefix` from `src` into `dst`, which must
/// already hold a tensor of the same shape under each name.
pub fn copy_prefix(
    src: &ParameterStore<Scalar>,
    dst: &mut ParameterStore<Scalar>,
    prefix: &str,
) -> Result<usize> {
    let mut n = 0;
    for (name, p) in src.iter().filter(|(n, _)| n.starts_with(prefix)) {
        dst.set_value(name, p.value.clone())?;
        n += 1;
    }
    Ok(n)
}

#[derive(Clone, Debug)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub pretrain: Option<PretrainReport>,
    pub recsys: RecsysReport,
    pub test: EvalReport,
}

/// Runs one ablation variant end to end and evaluates it on `test`.
pub fn run_variant(
    cfg: &RunConfig,
    variant: Variant,
    data: &TrainingData,
    test: &Dataset,
) -> Result<VariantOutcome> {
    let cfg = cfg.with_variant(variant);
    let mut log = TrainingLog::disabled();
    let (pre_store, pre_report) = if variant.uses_pretraining() {
        let (_, store, report) = pretrain_stage(&cfg, &data.train, &mut log)?;
        (Some(store), Some(report))
    } else {
        (None, None)
    };
    let (model, store, recsys) = recsys_stage(&cfg, data, pre_store.as_ref(), &mut log)?;
    let (test, _) = evaluate_dataset(&model, &store, test, &cfg.data)?;
    Ok(VariantOutcome {
        variant,
        pretrain: pre_report,
        recsys,
        test,
    })
}

/// A trained recommender with the articles it can score.
pub struct Scorer {
    pub model: Recommender,
    pub checkpoint: Checkpoint,
    pub news: Dataset,
}

impl Scorer {
    /// Loads a stage-two checkpoint and maps `news` through its registries.
    pub fn open(checkpoint: &Path, news: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(checkpoint)?;
        if ckpt.stage != Stage::Recsys {
            return Err(Error::Usage(format!(
                "{} is a pre-training checkpoint; scoring needs a trained recommender",
                checkpoint.display()
            )));
        }
        let limits = ParseLimits {
            max_title_len: ckpt.config.max_title_len,
            max_entities: ckpt.config.max_entities,
        };
        let raw = load_news(news, limits)?;
        let ds =
            Dataset::with_registries(raw, Vec::new(), ckpt.vocab.clone(), ckpt.entities.clone());
        let model = Recommender::new(&ckpt.config)?;
        Ok(Self {
            model,
            checkpoint: ckpt,
            news: ds,
        })
    }

    pub fn recommend(
        &self,
        history: &[String],
        candidates: &[String],
        top_k: usize,
    ) -> Result<Vec<(String, f64)>> {
        self.model.recommend(
            &self.checkpoint.store,
            &self.news,
            history,
            candidates,
            top_k,
        )
    }
}
