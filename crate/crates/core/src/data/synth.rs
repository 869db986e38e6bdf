//! Planted-interest synthetic corpus.
//!
//! Each topic owns a pool of entities and title words. An article picks a
//! topic, draws entities (occasionally from another topic) and a title made
//! of entity name mentions, words describing those entities, topic words and
//! shared filler. Users carry a
//! topic mixture; a candidate is clicked with probability
//! `click_base + click_gain · (user mixture · entity-topic profile)`.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dataset::{Candidate, Dataset, Impression, RawArticle};
use super::mind::{write_behaviors_tsv, write_news_tsv};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub topics: usize,
    pub entities_per_topic: usize,
    pub words_per_topic: usize,
    pub shared_words: usize,
    pub articles: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    /// Probability that an article has no entities at all.
    pub zero_entity_rate: f64,
    pub min_title_len: usize,
    pub max_title_len: usize,
    /// Probability that each entity's name token appears in the title.
    pub mention_rate: f64,
    /// Descriptor words owned by each entity.
    pub words_per_entity: usize,
    /// Share of non-mention title words drawn from the article entities'
    /// descriptors.
    pub entity_word_rate: f64,
    /// Share of non-mention title words drawn from the topic pool (the rest
    /// are shared filler).
    pub topic_word_rate: f64,
    /// Probability that an entity or topic word comes from a random topic.
    pub cross_topic_noise: f64,
    pub users: usize,
    /// Upper bound on the number of topics in a user's mixture.
    pub topics_per_user: usize,
    pub impressions: usize,
    pub candidates: usize,
    pub min_history: usize,
    pub max_history: usize,
    pub click_base: f64,
    pub click_gain: f64,
    pub test_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            topics: 4,
            entities_per_topic: 50,
            words_per_topic: 40,
            shared_words: 60,
            articles: 1000,
            min_entities: 1,
            max_entities: 3,
            zero_entity_rate: 0.05,
            min_title_len: 6,
            max_title_len: 12,
            mention_rate: 0.8,
            words_per_entity: 3,
            entity_word_rate: 0.4,
            topic_word_rate: 0.5,
            cross_topic_noise: 0.1,
            users: 2000,
            topics_per_user: 2,
            impressions: 20_000,
            candidates: 8,
            min_history: 5,
            max_history: 15,
            click_base: 0.05,
            click_gain: 0.6,
            test_fraction: 0.2,
        }
    }
}

impl SyntheticSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                problems.push(msg.to_string());
            }
        };
        check(self.topics >= 1, "topics must be at least 1");
        check(self.articles >= 2, "articles must be at least 2");
        check(self.users >= 1, "users must be at least 1");
        check(self.impressions >= 1, "impressions must be at least 1");
        check(self.candidates >= 2, "candidates must be at least 2");
        check(
            self.min_entities <= self.max_entities,
            "min_entities exceeds max_entities",
        );
        check(
            self.entities_per_topic >= self.max_entities,
            "entities_per_topic must cover max_entities distinct entities",
        );
        check(
            self.entities_per_topic >= 1,
            "entities_per_topic must be at least 1",
        );
        check(self.min_title_len >= 1, "min_title_len must be at least 1");
        check(
            self.min_title_len <= self.max_title_len,
            "min_title_len exceeds max_title_len",
        );
        check(
            self.max_title_len >= self.max_entities,
            "max_title_len must leave room for entity mentions",
        );
        check(
            self.words_per_topic >= 1 || self.topic_word_rate == 0.0,
            "words_per_topic is 0 but topic_word_rate > 0",
        );
        check(
            self.words_per_entity >= 1 || self.entity_word_rate == 0.0,
            "words_per_entity is 0 but entity_word_rate > 0",
        );
        check(
            self.shared_words >= 1 || self.topic_word_rate == 1.0,
            "shared_words is 0 but topic_word_rate < 1",
        );
        check(
            (1..=self.topics).contains(&self.topics_per_user),
            "topics_per_user must be in 1..=topics",
        );
        check(
            self.min_history <= self.max_history,
            "min_history exceeds max_history",
        );
        check(
            self.max_history + self.candidates <= self.articles,
            "articles must exceed max_history + candidates",
        );
        for (name, v) in [
            ("zero_entity_rate", self.zero_entity_rate),
            ("mention_rate", self.mention_rate),
            ("entity_word_rate", self.entity_word_rate),
            ("topic_word_rate", self.topic_word_rate),
            ("cross_topic_noise", self.cross_topic_noise),
            ("click_base", self.click_base),
        ] {
            check(
                (0.0..=1.0).contains(&v),
                &format!("{name} must be in [0, 1]"),
            );
        }
        check(
            self.click_gain >= 0.0 && self.click_base + self.click_gain <= 1.0,
            "click_base + click_gain must be in [0, 1]",
        );
        check(
            self.click_base + self.click_gain > 0.0,
            "click model never clicks",
        );
        check(self.click_base < 1.0, "click model always clicks");
        check(
            (0.0..1.0).contains(&self.test_fraction),
            "test_fraction must be in [0, 1)",
        );
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid synthetic spec: {}",
                problems.join("; ")
            )))
        }
    }
}

/// Generated corpus plus the ground truth it was drawn from.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub articles: Vec<RawArticle>,
    pub article_topic: Vec<usize>,
    /// Per article, the topic distribution of its entities (the article's
    /// own topic when it has none).
    pub article_profile: Vec<Vec<f64>>,
    /// Per user, the topic mixture.
    pub user_mix: Vec<Vec<f64>>,
    pub train: Vec<Impression>,
    pub test: Vec<Impression>,
    article_index: HashMap<String, usize>,
}

fn entity_name(t: usize, j: usize) -> String {
    format!("Q{}", 100_000 + t * 1000 + j)
}

fn mention_token(t: usize, j: usize) -> String {
    format!("e{t}x{j}")
}

fn user_name(u: usize) -> String {
    format!("U{}", u + 1)
}

impl SyntheticData {
    pub fn click_probability(&self, user: usize, article: usize) -> f64 {
        let aff: f64 = self.user_mix[user]
            .iter()
            .zip(&self.article_profile[article])
            .map(|(a, b)| a * b)
            .sum();
        (self.spec.click_base + self.spec.click_gain * aff).clamp(0.0, 1.0)
    }

    /// True click probability for an impression's user and an article id.
    pub fn oracle_score(&self, imp: &Impression, article_id: &str) -> Option<f64> {
        let u: usize = imp
            .user
            .strip_prefix('U')?
            .parse::<usize>()
            .ok()?
            .checked_sub(1)?;
        let a = *self.article_index.get(article_id)?;
        (u < self.user_mix.len()).then(|| self.click_probability(u, a))
    }

    pub fn categories(&self) -> Vec<String> {
        self.article_topic
            .iter()
            .map(|t| format!("topic{t}"))
            .collect()
    }

    /// Train and test datasets sharing registries built from the articles.
    pub fn to_datasets(&self, min_token_freq: usize) -> (Dataset, Dataset) {
        let train = Dataset::build(self.articles.clone(), self.train.clone(), min_token_freq);
        let test = train.with_impressions(self.test.clone());
        (train, test)
    }

    /// Writes `train/` and `test/` MIND directories plus the spec echo.
    pub fn write_mind(&self, dir: &Path) -> Result<()> {
        let cats = self.categories();
        for (split, imps) in [("train", &self.train), ("test", &self.test)] {
            let d = dir.join(split);
            write_news_tsv(&d.join("news.tsv"), &self.articles, &cats)?;
            write_behaviors_tsv(&d.join("behaviors.tsv"), imps)?;
        }
        let spec = serde_json::to_string_pretty(&self.spec)?;
        let p = dir.join("synthetic_spec.json");
        std::fs::write(&p, spec).map_err(|e| Error::io(&p, e))
    }
}

fn range(rng: &mut SeedStream, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn pick_topic(rng: &mut SeedStream, own: usize, topics: usize, noise: f64) -> usize {
    if rng.uniform() < noise {
        rng.below(topics)
    } else {
        own
    }
}

/// Index drawn proportionally to `weights` (not all zero).
fn weighted(rng: &mut SeedStream, weights: &[f64], total: f64) -> usize {
    let mut x = rng.uniform() * total;
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

pub fn synth_generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let root = SeedStream::new(spec.seed);
    let k = spec.topics;

    let mut rng = root.derive("articles");
    let mut articles = Vec::with_capacity(spec.articles);
    let mut article_topic = Vec::with_capacity(spec.articles);
    let mut article_profile = Vec::with_capacity(spec.articles);
    let width = spec.articles.to_string().len();
    for i in 0..spec.articles {
        let topic = rng.below(k);
        let n_ent = if rng.uniform() < spec.zero_entity_rate {
            0
        } else {
            range(&mut rng, spec.min_entities, spec.max_entities)
        };
        let mut picked: Vec<(usize, usize)> = Vec::with_capacity(n_ent);
        while picked.len() < n_ent {
            let t = pick_topic(&mut rng, topic, k, spec.cross_topic_noise);
            let e = (t, rng.below(spec.entities_per_topic));
            if !picked.contains(&e) {
                picked.push(e);
            }
        }
        let len = range(&mut rng, spec.min_title_len, spec.max_title_len);
        let mut title: Vec<String> = picked
            .iter()
            .filter(|_| rng.uniform() < spec.mention_rate)
            .map(|&(t, j)| mention_token(t, j))
            .collect();
        while title.len() < len {
            if !picked.is_empty() && rng.uniform() < spec.entity_word_rate {
                let (t, j) = picked[rng.below(picked.len())];
                title.push(format!(
                    "{}d{}",
                    mention_token(t, j),
                    rng.below(spec.words_per_entity)
                ));
            } else if rng.uniform() < spec.topic_word_rate {
                let t = pick_topic(&mut rng, topic, k, spec.cross_topic_noise);
                title.push(format!("w{t}k{}", rng.below(spec.words_per_topic)));
            } else {
                title.push(format!("s{}", rng.below(spec.shared_words)));
            }
        }
        title.shuffle(rng.rng());
        let mut profile = vec![0.0; k];
        if picked.is_empty() {
            profile[topic] = 1.0;
        } else {
            for &(t, _) in &picked {
                profile[t] += 1.0 / picked.len() as f64;
            }
        }
        articles.push(RawArticle {
            id: format!("N{:0width$}", i + 1),
            tokens: title,
            entities: picked.iter().map(|&(t, j)| entity_name(t, j)).collect(),
        });
        article_topic.push(topic);
        article_profile.push(profile);
    }

    let mut rng = root.derive("users");
    let mut user_mix = Vec::with_capacity(spec.users);
    for _ in 0..spec.users {
        let n = range(&mut rng, 1, spec.topics_per_user);
        let mut topics: Vec<usize> = (0..k).collect();
        topics.shuffle(rng.rng());
        let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.uniform()).ln()).collect();
        let total: f64 = raw.iter().sum();
        let mut mix = vec![0.0; k];
        for (t, w) in topics.into_iter().zip(raw) {
            mix[t] = w / total;
        }
        user_mix.push(mix);
    }

    let mut data = SyntheticData {
        spec: spec.clone(),
        article_index: articles
            .iter()
            .enumerate()
            .map(|(i, a)| (a.id.clone(), i))
            .collect(),
        articles,
        article_topic,
        article_profile,
        user_mix,
        train: Vec::new(),
        test: Vec::new(),
    };

    // Histories are fixed per user and drawn from the click model.
    let mut rng = root.derive("histories");
    let mut histories: Vec<Vec<usize>> = Vec::with_capacity(spec.users);
    for u in 0..spec.users {
        let mut w: Vec<f64> = (0..spec.articles)
            .map(|a| data.click_probability(u, a))
            .collect();
        let len = range(&mut rng, spec.min_history, spec.max_history);
        let mut hist = Vec::with_capacity(len);
        for _ in 0..len {
            let total: f64 = w.iter().sum();
            let a = if total > 0.0 {
                weighted(&mut rng, &w, total)
            } else {
                rng.below(spec.articles)
            };
            w[a] = 0.0;
            hist.push(a);
        }
        histories.push(hist);
    }

    let mut rng = root.derive("impressions");
    let start = chrono::NaiveDate::from_ymd_opt(2019, 11, 9)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    let mut impressions = Vec::with_capacity(spec.impressions);
    let mut attempts = 0usize;
    while impressions.len() < spec.impressions {
        attempts += 1;
        if attempts > spec.impressions * 200 {
            return Err(Error::Config(
                "click model rarely yields impressions with both clicks and non-clicks".into(),
            ));
        }
        let u = rng.below(spec.users);
        let hist = &histories[u];
        let mut cands: Vec<usize> = Vec::with_capacity(spec.candidates);
        while cands.len() < spec.candidates {
            let a = rng.below(spec.articles);
            if !hist.contains(&a) && !cands.contains(&a) {
                cands.push(a);
            }
        }
        let labels: Vec<u8> = cands
            .iter()
            .map(|&a| u8::from(rng.uniform() < data.click_probability(u, a)))
            .collect();
        if !labels.contains(&0) || !labels.contains(&1) {
            continue;
        }
        let n = impressions.len();
        let time = start + chrono::Duration::seconds(30 * n as i64);
        impressions.push(Impression {
            id: (n + 1).to_string(),
            user: user_name(u),
            time: Some(time.format("%m/%d/%Y %-I:%M:%S %p").to_string()),
            history: hist.iter().map(|&a| data.articles[a].id.clone()).collect(),
            candidates: cands
                .iter()
                .zip(labels)
                .map(|(&a, label)| Candidate {
                    id: data.articles[a].id.clone(),
                    label,
                })
                .collect(),
        });
    }
    let n_test = ((spec.impressions as f64) * spec.test_fraction).round() as usize;
    data.test = impressions.split_off(spec.impressions - n_test);
    data.train = impressions;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            articles: 200,
            users: 50,
            impressions: 300,
            ..Default::default()
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let a = synth_generate(&small()).unwrap();
        let b = synth_generate(&small()).unwrap();
        assert_eq!(a.articles, b.articles);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = synth_generate(&SyntheticSpec { seed: 8, ..small() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn mixtures_and_profiles_are_normalized() {
        let d = synth_generate(&small()).unwrap();
        for m in d.user_mix.iter().chain(&d.article_profile) {
            assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(d.train.len() + d.test.len(), 300);
        assert_eq!(d.test.len(), 60);
        assert!(d.train.iter().all(|i| i.has_both_labels()));
    }

    #[test]
    fn inconsistent_pools_are_rejected() {
        let bad = SyntheticSpec {
            entities_per_topic: 2,
            max_entities: 3,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = SyntheticSpec {
            topics_per_user: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn written_files_parse_back() {
        let d = synth_generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write_mind(dir.path()).unwrap();
        let (arts, _) = crate::data::parse_news_tsv(
            &dir.path().join("train/news.tsv"),
            crate::data::ParseLimits {
                max_title_len: 20,
                max_entities: 10,
            },
        )
        .unwrap();
        assert_eq!(arts, d.articles);
        let (imps, _) =
            crate::data::parse_behaviors_tsv(&dir.path().join("test/behaviors.tsv")).unwrap();
        assert_eq!(imps, d.test);
    }
}
