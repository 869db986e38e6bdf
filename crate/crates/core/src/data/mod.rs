//! News/behavior ingestion, preprocessing rules and synthetic data.

mod adressa;
mod dataset;
mod generic;
mod load;
mod mind;
mod preprocess;
mod synth;
mod vocab;

pub use adressa::{adressa_style_negatives, ClickLog, NegativeSamplingStats};
pub use dataset::{Candidate, Dataset, Impression, NewsArticle, RawArticle};
pub use generic::{read_interactions_jsonl, read_news_jsonl, write_interactions_jsonl};
pub use load::{load_behaviors, load_news};
pub use mind::{
    format_candidates, parse_behaviors_tsv, parse_candidates, parse_news_tsv, write_behaviors_tsv,
    write_news_tsv, BehaviorStats, NewsStats, ParseLimits,
};
pub use preprocess::{preprocess, split_validation, PreprocessStats};
pub use synth::{synth_generate, SyntheticData, SyntheticSpec};
pub use vocab::{tokenize, EntityRegistry, TokenVocab, ENTITY_HANDLE, ENTITY_UNK, TOKEN_UNK};
