use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::vocab::{EntityRegistry, TokenVocab};

/// Article as read from disk, before registry lookup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawArticle {
    pub id: String,
    pub tokens: Vec<String>,
    /// Entity identifiers in annotation order.
    pub entities: Vec<String>,
}

/// Article with tokens and entities mapped to registry ids.
#[derive(Clone, Debug, PartialEq)]
pub struct NewsArticle {
    pub id: String,
    pub tokens: Vec<u32>,
    pub entities: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub id: String,
    pub user: String,
    #[serde(default)]
    pub time: Option<String>,
    /// Clicked article ids, oldest first.
    pub history: Vec<String>,
    pub candidates: Vec<Candidate>,
}

impl Impression {
    pub fn positives(&self) -> impl Iterator<Item = &str> {
        self.candidates
            .iter()
            .filter(|c| c.label == 1)
            .map(|c| c.id.as_str())
    }

    pub fn negatives(&self) -> impl Iterator<Item = &str> {
        self.candidates
            .iter()
            .filter(|c| c.label == 0)
            .map(|c| c.id.as_str())
    }

    pub fn has_both_labels(&self) -> bool {
        self.positives().next().is_some() && self.negatives().next().is_some()
    }
}

/// Articles (sorted by id), impressions and the registries used to map them.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub articles: Vec<NewsArticle>,
    pub impressions: Vec<Impression>,
    pub vocab: TokenVocab,
    pub entities: EntityRegistry,
    index: HashMap<String, usize>,
}

impl Dataset {
    /// Builds fresh registries from `raw` (token vocab keeps tokens seen at
    /// least `min_token_freq` times).
    pub fn build(
        mut raw: Vec<RawArticle>,
        impressions: Vec<Impression>,
        min_token_freq: usize,
    ) -> Self {
        raw.sort_by(|a, b| a.id.cmp(&b.id));
        let vocab = TokenVocab::build(raw.iter().map(|a| a.tokens.as_slice()), min_token_freq);
        let entities = EntityRegistry::build(raw.iter().map(|a| a.entities.as_slice()));
        Self::with_registries(raw, impressions, vocab, entities)
    }

    /// Maps `raw` through existing registries; unseen tokens and entities
    /// fall back to the reserved unknown ids.
    pub fn with_registries(
        mut raw: Vec<RawArticle>,
        impressions: Vec<Impression>,
        vocab: TokenVocab,
        entities: EntityRegistry,
    ) -> Self {
        raw.sort_by(|a, b| a.id.cmp(&b.id));
        raw.dedup_by(|a, b| a.id == b.id);
        let articles: Vec<NewsArticle> = raw
            .into_iter()
            .map(|a| NewsArticle {
                tokens: a.tokens.iter().map(|t| vocab.id(t)).collect(),
                entities: a.entities.iter().map(|e| entities.id(e)).collect(),
                id: a.id,
            })
            .collect();
        let index = articles
            .iter()
            .enumerate()
            .map(|(i, a)| (a.id.clone(), i))
            .collect();
        Self {
            articles,
            impressions,
            vocab,
            entities,
            index,
        }
    }

    pub fn with_impressions(&self, impressions: Vec<Impression>) -> Self {
        Self {
            articles: self.articles.clone(),
            impressions,
            vocab: self.vocab.clone(),
            entities: self.entities.clone(),
            index: self.index.clone(),
        }
    }

    pub fn article_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn article(&self, id: &str) -> Option<&NewsArticle> {
        self.article_index(id).map(|i| &self.articles[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    /// Ids referenced by impressions that have no article, deduplicated and
    /// sorted.
    pub fn missing_references(&self) -> Vec<String> {
        let mut missing: Vec<String> = self
            .impressions
            .iter()
            .flat_map(|imp| {
                imp.history
                    .iter()
                    .chain(imp.candidates.iter().map(|c| &c.id))
            })
            .filter(|id| !self.contains(id))
            .cloned()
            .collect();
        missing.sort();
        missing.dedup();
        missing
    }
}
