use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Reserved entity-memory row for the `[ent]` handle.
pub const ENTITY_HANDLE: u32 = 0;
/// Reserved entity-memory row for entities unseen at registry build time.
pub const ENTITY_UNK: u32 = 1;
/// Reserved token id for out-of-vocabulary words.
pub const TOKEN_UNK: u32 = 0;

/// Lowercases and splits on whitespace; every punctuation character becomes
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Dense string → id registry; ids follow first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
struct Registry {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Registry {
    fn from(names: Vec<String>) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as u32))
            .collect();
        Self { names, index }
    }
}

impl From<Registry> for Vec<String> {
    fn from(r: Registry) -> Self {
        r.names
    }
}

impl Registry {
    fn add(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenVocab(Registry);

impl TokenVocab {
    pub const UNK: &'static str = "[UNK]";

    /// Keeps tokens seen at least `min_freq` times. `titles` must come in a
    /// deterministic order (articles sorted by id).
    pub fn build<'a, I>(titles: I, min_freq: usize) -> Self
    where
        I: IntoIterator<Item = &'a [String]> + Clone,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in titles.clone() {
            for tok in t {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut reg = Registry::from(vec![Self::UNK.to_string()]);
        for t in titles {
            for tok in t {
                if counts[tok.as_str()] >= min_freq {
                    reg.add(tok);
                }
            }
        }
        TokenVocab(reg)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        TokenVocab(Registry::from(tokens))
    }

    pub fn id(&self, token: &str) -> u32 {
        self.0.index.get(token).copied().unwrap_or(TOKEN_UNK)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.0.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.0.names.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.names.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.0.names
    }
}

/// Entity string → memory row. Row 0 is the `[ent]` handle, row 1 the
/// unknown entity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityRegistry(Registry);

impl Default for EntityRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl EntityRegistry {
    pub const HANDLE: &'static str = "[ent]";
    pub const UNK: &'static str = "[unk]";

    pub fn new() -> Self {
        EntityRegistry(Registry::from(vec![
            Self::HANDLE.to_string(),
            Self::UNK.to_string(),
        ]))
    }

    pub fn build<'a, I>(entity_lists: I) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut r = Self::new();
        for list in entity_lists {
            for e in list {
                r.0.add(e);
            }
        }
        r
    }

    pub fn from_names(names: Vec<String>) -> Self {
        EntityRegistry(Registry::from(names))
    }

    pub fn id(&self, entity: &str) -> u32 {
        self.0.index.get(entity).copied().unwrap_or(ENTITY_UNK)
    }

    pub fn get(&self, entity: &str) -> Option<u32> {
        self.0.index.get(entity).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.0.names.get(id as usize).map(String::as_str)
    }

    /// Rows in the entity memory, `d_c`.
    pub fn len(&self) -> usize {
        self.0.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.0.names
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(
            tokenize("Trump's  deal, DONE!"),
            vec!["trump", "'", "s", "deal", ",", "done", "!"]
        );
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn vocab_respects_min_freq_and_first_seen_order() {
        let titles: Vec<Vec<String>> = vec![
            vec!["b".into(), "a".into()],
            vec!["a".into(), "c".into(), "b".into()],
        ];
        let v = TokenVocab::build(titles.iter().map(|t| t.as_slice()), 2);
        assert_eq!(v.tokens(), &["[UNK]", "b", "a"]);
        assert_eq!(v.id("c"), TOKEN_UNK);
    }

    #[test]
    fn entity_registry_reserves_handle_and_unk() {
        let lists: Vec<Vec<String>> = vec![vec!["Q1".into(), "Q2".into()], vec!["Q1".into()]];
        let r = EntityRegistry::build(lists.iter().map(|l| l.as_slice()));
        assert_eq!(r.len(), 4);
        assert_eq!(r.id("Q1"), 2);
        assert_eq!(r.id("Q404"), ENTITY_UNK);
        let json = serde_json::to_string(&r).unwrap();
        let back: EntityRegistry = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
