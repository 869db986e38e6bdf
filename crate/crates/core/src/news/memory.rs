//! Entity-memory snapshots and pretrained-embedding import.
//!
//! File format: one row per line, `key<TAB>v1 v2 ... v_n`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::encoder::{ENTITY_MEMORY, TOKEN_EMBEDDING};
use crate::data::{EntityRegistry, TokenVocab, ENTITY_HANDLE};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Real, Scalar, Tensor};

/// Parses an embedding file, requiring every row to have `dim` values.
pub fn read_embedding_file(path: &Path, dim: usize) -> Result<Vec<(String, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, values) = line.split_once('\t').ok_or_else(|| {
            Error::Format(format!(
                "{}:{}: expected `key<TAB>values`",
                path.display(),
                i + 1
            ))
        })?;
        let values: Vec<f64> = values
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>().map_err(|_| {
                    Error::Format(format!("{}:{}: bad number `{v}`", path.display(), i + 1))
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::Format(format!(
                "{}:{}: {} values, expected dimension {dim}",
                path.display(),
                i + 1,
                values.len()
            )));
        }
        rows.push((key.to_string(), values));
    }
    Ok(rows)
}

/// Coverage of an embedding import.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EmbeddingImport {
    /// Registry rows overwritten from the file.
    pub matched: usize,
    /// Registry rows left at their random initialization.
    pub missing: usize,
    /// File rows with no registry entry.
    pub unused: usize,
}

fn overwrite_rows<T: Real>(
    store: &mut ParameterStore<T>,
    name: &str,
    rows: Vec<(String, Vec<f64>)>,
    lookup: impl Fn(&str) -> Option<u32>,
    protected: &[u32],
) -> Result<EmbeddingImport> {
    let mut table = store.value(name)?.clone();
    let mut report = EmbeddingImport::default();
    let mut seen = vec![false; table.rows()];
    for (key, values) in rows {
        match lookup(&key) {
            Some(id) if !protected.contains(&id) => {
                for (dst, v) in table.row_mut(id as usize).iter_mut().zip(values) {
                    *dst = T::lit(v);
                }
                if !seen[id as usize] {
                    seen[id as usize] = true;
                    report.matched += 1;
                }
            }
            _ => report.unused += 1,
        }
    }
    report.missing = seen.len() - protected.len() - report.matched;
    store.set_value(name, table)?;
    Ok(report)
}

/// Overwrites memory rows for entities present in `path`. The handle and
/// unknown rows are never taken from the file.
pub fn import_entity_embeddings<T: Real>(
    store: &mut ParameterStore<T>,
    registry: &EntityRegistry,
    path: &Path,
) -> Result<EmbeddingImport> {
    let dim = store.value(ENTITY_MEMORY)?.cols();
    let rows = read_embedding_file(path, dim)?;
    overwrite_rows(
        store,
        ENTITY_MEMORY,
        rows,
        |k| registry.get(k),
        &[ENTITY_HANDLE, crate::data::ENTITY_UNK],
    )
}

pub fn import_token_embeddings<T: Real>(
    store: &mut ParameterStore<T>,
    vocab: &TokenVocab,
    path: &Path,
) -> Result<EmbeddingImport> {
    let dim = store.value(TOKEN_EMBEDDING)?.cols();
    let rows = read_embedding_file(path, dim)?;
    overwrite_rows(
        store,
        TOKEN_EMBEDDING,
        rows,
        |k| vocab.get(k),
        &[crate::data::TOKEN_UNK],
    )
}

/// The entity table together with the registry that indexes it.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityMemory {
    pub table: Tensor<Scalar>,
    pub registry: EntityRegistry,
}

impl EntityMemory {
    pub fn from_store(store: &ParameterStore<Scalar>, registry: &EntityRegistry) -> Result<Self> {
        let table = store.value(ENTITY_MEMORY)?.clone();
        if table.rows() != registry.len() {
            return Err(Error::Config(format!(
                "entity memory has {} rows, registry {}",
                table.rows(),
                registry.len()
            )));
        }
        Ok(Self {
            table,
            registry: registry.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    /// Row for an entity string (unknown entities get the unknown row).
    pub fn row(&self, entity: &str) -> &[Scalar] {
        self.table.row(self.registry.id(entity) as usize)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, name) in self.registry.names().iter().enumerate() {
            if name.contains(['\t', '\n', '\r']) {
                return Err(Error::Format(format!(
                    "entity `{name:?}` cannot be written"
                )));
            }
            out.push_str(name);
            out.push('\t');
            for (j, v) in self.table.row(i).iter().enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                // Display prints the shortest representation that parses back exactly.
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a table written by [`EntityMemory::save`]: all rows, in order.
    pub fn load(path: &Path, dim: usize) -> Result<Self> {
        let rows = read_embedding_file(path, dim)?;
        let mut names = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        let mut seen = HashMap::new();
        for (name, values) in rows {
            if seen.insert(name.clone(), ()).is_some() {
                return Err(Error::Format(format!("duplicate entity `{name}`")));
            }
            names.push(name);
            data.extend(values.into_iter().map(|v| v as Scalar));
        }
        if names.first().map(String::as_str) != Some(EntityRegistry::HANDLE) {
            return Err(Error::Format("first row must be the handle".into()));
        }
        Ok(Self {
            table: Tensor::new([names.len(), dim], data)?,
            registry: EntityRegistry::from_names(names),
        })
    }

    pub fn apply(&self, store: &mut ParameterStore<Scalar>) -> Result<()> {
        store.set_value(ENTITY_MEMORY, self.table.clone())
    }
}
