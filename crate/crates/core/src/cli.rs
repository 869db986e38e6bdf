//! The `entrec` command line: data synthesis, both training stages,
//! evaluation and ad-hoc recommendation.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::{RunConfig, Variant};
use crate::data::{load_behaviors, load_news, synth_generate, Dataset, ParseLimits, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, write_impression_csv};
use crate::news::NewsEncoder;
use crate::params::ParameterStore;
use crate::pipeline::{prepare_training, sized_for, Scorer, NEWS_PREFIX};
use crate::pretrain::{pretrain, retrieval_probe};
use crate::ranker::{train_recsys, Recommender};
use crate::rng::SeedStream;
use crate::train_log::TrainingLog;

#[derive(Debug, Parser)]
#[command(
    name = "entrec",
    version,
    about = "Entity-aware neural news recommendation"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML or JSON run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set recsys.epochs=2` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-interest synthetic dataset in MIND format.
    Synth {
        /// JSON generator spec; defaults are used when omitted.
        #[arg(long, value_name = "FILE")]
        spec: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Stage one: contrastive pre-training of the news encoder.
    Pretrain {
        /// News file (MIND `news.tsv` or `.jsonl`).
        #[arg(long, value_name = "FILE")]
        news: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Loss-term ablation applied during pre-training.
        #[arg(long, default_value = "full")]
        variant: Variant,
    },
    /// Stage two: train the recommender on click behaviours.
    Train {
        #[arg(long, value_name = "FILE")]
        news: PathBuf,
        /// Behaviours file (MIND `behaviors.tsv` or `.jsonl`).
        #[arg(long, value_name = "FILE")]
        behaviors: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Pre-trained encoder; without it training starts from scratch.
        #[arg(long, value_name = "FILE")]
        init_checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "full")]
        variant: Variant,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a test set and write metric reports.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Directory holding `news.tsv` and `behaviors.tsv`.
        #[arg(long, value_name = "DIR", required_unless_present_all = ["news", "behaviors"])]
        data: Option<PathBuf>,
        #[arg(long, value_name = "FILE", conflicts_with = "data")]
        news: Option<PathBuf>,
        #[arg(long, value_name = "FILE", conflicts_with = "data")]
        behaviors: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Also write per-impression metrics and scores as CSV.
        #[arg(long)]
        per_impression: bool,
    },
    /// Rank candidates for one reading history; prints JSON.
    Recommend {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        news: PathBuf,
        /// Comma-separated article ids, oldest first.
        #[arg(long, value_delimiter = ',', required = true)]
        history: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        candidates: Vec<String>,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
}

/// Parses arguments, runs the command, and maps the outcome to an exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn effective_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &global.overrides {
        cfg.set(o)?;
    }
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(t) = global.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads(n: usize) {
    if n > 0 {
        // A second call in the same process (tests) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Command::Synth { spec, out } = &cli.command {
        return cmd_synth(spec.as_deref(), out, cli.global.seed);
    }
    let cfg = effective_config(&cli.global)?;
    configure_threads(cfg.threads);
    match cli.command {
        Command::Synth { .. } => unreachable!("handled above"),
        Command::Pretrain {
            news,
            out,
            epochs,
            variant,
        } => cmd_pretrain(cfg, &news, &out, epochs, variant),
        Command::Train {
            news,
            behaviors,
            out,
            init_checkpoint,
            variant,
            epochs,
        } => cmd_train(
            cfg,
            &news,
            &behaviors,
            &out,
            init_checkpoint.as_deref(),
            variant,
            epochs,
        ),
        Command::Eval {
            checkpoint,
            data,
            news,
            behaviors,
            out,
            per_impression,
        } => {
            let (news, behaviors) = match data {
                Some(d) => (d.join("news.tsv"), d.join("behaviors.tsv")),
                None => (
                    news.expect("clap requires --news"),
                    behaviors.expect("clap requires --behaviors"),
                ),
            };
            cmd_eval(cfg, &checkpoint, &news, &behaviors, &out, per_impression)
        }
        Command::Recommend {
            checkpoint,
            news,
            history,
            candidates,
            top_k,
        } => cmd_recommend(&checkpoint, &news, &history, &candidates, top_k),
    }
}

fn limits(cfg: &RunConfig) -> ParseLimits {
    ParseLimits {
        max_title_len: cfg.model.max_title_len,
        max_entities: cfg.model.max_entities,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the effective configuration as `config.toml` into `dir`.
pub fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn cmd_synth(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = match spec {
        Some(p) => SyntheticSpec::load(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = synth_generate(&spec)?;
    data.write_mind(out)?;
    log::info!(
        "wrote {} articles, {} train and {} test impressions to {}",
        data.articles.len(),
        data.train.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_pretrain(
    mut cfg: RunConfig,
    news: &Path,
    out: &Path,
    epochs: Option<usize>,
    variant: Variant,
) -> Result<()> {
    if let Some(e) = epochs {
        cfg.pretrain.epochs = e;
    }
    let cfg = cfg.with_variant(variant);
    let raw = load_news(news, limits(&cfg))?;
    let ds = Dataset::build(raw, Vec::new(), cfg.data.min_token_freq);
    if ds.articles.len() < 2 {
        return Err(Error::Data(format!(
            "{}: pre-training needs at least 2 articles",
            news.display()
        )));
    }
    create_dir(out)?;
    echo_config(&cfg, out)?;
    let model = sized_for(&cfg.model, &ds);
    let encoder = NewsEncoder::new(&model)?;
    let root = SeedStream::new(cfg.seed);
    let mut store = ParameterStore::new();
    encoder.init(&mut store, &mut root.derive("pretrain-init"))?;
    let mut log = TrainingLog::create(&out.join("pretrain_log.jsonl"))?;
    let report = pretrain(
        &encoder,
        &mut store,
        &ds.articles,
        &cfg.pretrain,
        &root.derive("pretrain"),
        &mut log,
    )?;
    // Validation pass: retrieval and collapse diagnostics on the corpus.
    let probe = retrieval_probe(&encoder, &store, &ds.articles, cfg.pretrain.batch_size)?;
    log::info!(
        "probe: top-1 {:.4} (chance {:.4}), cosine h {:.3} e {:.3}",
        probe.top1_rate,
        probe.chance,
        probe.mean_cosine_h,
        probe.mean_cosine_e
    );
    write_json(&out.join("probe.json"), &probe)?;
    let ckpt = Checkpoint {
        stage: Stage::Pretrain,
        config: model,
        store,
        vocab: ds.vocab.clone(),
        entities: ds.entities.clone(),
    };
    ckpt.save(&out.join("encoder.ckpt"))?;
    log::info!(
        "{} pre-training steps, checkpoint in {}",
        report.steps.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    mut cfg: RunConfig,
    news: &Path,
    behaviors: &Path,
    out: &Path,
    init: Option<&Path>,
    variant: Variant,
    epochs: Option<usize>,
) -> Result<()> {
    if let Some(e) = epochs {
        cfg.recsys.epochs = e;
    }
    let cfg = cfg.with_variant(variant);
    if variant == Variant::NoIntra && init.is_some() {
        return Err(Error::Usage(
            "variant no_intra trains without a pre-trained encoder; drop --init-checkpoint".into(),
        ));
    }
    let raw = load_news(news, limits(&cfg))?;
    let imps = load_behaviors(behaviors)?;
    let init = init.map(Checkpoint::load).transpose()?;
    let ds = match &init {
        Some(c) => Dataset::with_registries(raw, imps, c.vocab.clone(), c.entities.clone()),
        None => {
            if variant.uses_pretraining() {
                log::info!(
                    "no --init-checkpoint: the encoder starts from scratch (same as no_intra)"
                );
            }
            Dataset::build(raw, imps, cfg.data.min_token_freq)
        }
    };
    let data = prepare_training(&cfg, &ds);
    log::info!("preprocessing: {:?}", data.stats);
    if data.train.impressions.is_empty() {
        return Err(Error::Data(format!(
            "{}: no training impressions survive preprocessing",
            behaviors.display()
        )));
    }
    create_dir(out)?;
    echo_config(&cfg, out)?;
    let model_cfg = sized_for(&cfg.model, &data.train);
    let model = Recommender::new(&model_cfg)?;
    let root = SeedStream::new(cfg.seed);
    let mut store = ParameterStore::new();
    model.init(&mut store, &root.derive("recsys-init"))?;
    if let Some(c) = &init {
        c.copy_into(&mut store, NEWS_PREFIX)?;
    }
    let mut log = TrainingLog::create(&out.join("train_log.jsonl"))?;
    let report = train_recsys(
        &model,
        &mut store,
        &data.train,
        Some(&data.validation),
        &cfg.recsys,
        &root.derive("recsys"),
        &mut log,
    )?;
    write_json(&out.join("validation.json"), &report.validations)?;
    if let Some(best) = &report.best {
        log::info!(
            "kept step {} with validation AUC {:.4}",
            best.step,
            best.metrics.auc
        );
    }
    Checkpoint {
        stage: Stage::Recsys,
        config: model_cfg,
        store,
        vocab: data.train.vocab.clone(),
        entities: data.train.entities.clone(),
    }
    .save(&out.join("model.ckpt"))
}

fn cmd_eval(
    cfg: RunConfig,
    checkpoint: &Path,
    news: &Path,
    behaviors: &Path,
    out: &Path,
    per_impression: bool,
) -> Result<()> {
    let imps = load_behaviors(behaviors)?;
    let scorer = Scorer::open(checkpoint, news)?;
    let ds = scorer.news.with_impressions(imps);
    if ds.impressions.is_empty() {
        return Err(Error::Data(format!(
            "{}: no impressions to evaluate",
            behaviors.display()
        )));
    }
    let (report, rows) = evaluate_dataset(&scorer.model, &scorer.checkpoint.store, &ds, &cfg.data)?;
    create_dir(out)?;
    echo_config(&cfg, out)?;
    report.write(out)?;
    if per_impression {
        write_impression_csv(&out.join("impressions.csv"), &rows)?;
    }
    print!("{}", report.to_text());
    Ok(())
}

#[derive(Serialize)]
struct Ranked {
    rank: usize,
    id: String,
    score: f64,
}

fn cmd_recommend(
    checkpoint: &Path,
    news: &Path,
    history: &[String],
    candidates: &[String],
    top_k: usize,
) -> Result<()> {
    let ranked = Scorer::open(checkpoint, news)?.recommend(history, candidates, top_k)?;
    let out: Vec<Ranked> = ranked
        .into_iter()
        .enumerate()
        .map(|(i, (id, score))| Ranked {
            rank: i + 1,
            id,
            score,
        })
        .collect();
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}
