//! Checkpoint container: magic bytes, a length-prefixed JSON header and a
//! little-endian `f32` payload.
//!
//! ```text
//! "ENTRECK1" | header length (u64 LE) | header JSON | payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{EntityRegistry, TokenVocab};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Real, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"ENTRECK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Recsys,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    stage: Stage,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    vocab: TokenVocab,
    entities: EntityRegistry,
}

/// A loaded (or about to be written) model snapshot.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    pub config: ModelConfig,
    pub store: ParameterStore<Scalar>,
    pub vocab: TokenVocab,
    pub entities: EntityRegistry,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::with_capacity(self.store.len());
        let mut payload: Vec<u8> = Vec::new();
        for (name, p) in self.store.iter() {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: p.value.shape().to_vec(),
                offset: payload.len() as u64,
                trainable: p.trainable,
            });
            for &v in p.value.data() {
                payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            stage: self.stage,
            config: self.config.clone(),
            tensors,
            vocab: self.vocab.clone(),
            entities: self.entities.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut write = |bytes: &[u8]| f.write_all(bytes).map_err(|e| Error::io(path, e));
        write(MAGIC)?;
        write(&(json.len() as u64).to_le_bytes())?;
        write(&json)?;
        write(&payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + len)
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        header
            .config
            .validate()
            .map_err(|e| bad(format!("config: {e}")))?;
        let payload = &bytes[16 + len..];
        let mut store = ParameterStore::new();
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let start = t.offset as usize;
            let raw = payload
                .get(start..start + 4 * n)
                .ok_or_else(|| bad(format!("tensor `{}` exceeds payload", t.name)))?;
            let data: Vec<Scalar> = raw
                .chunks_exact(4)
                .map(|c| Scalar::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect();
            store.insert(t.name.clone(), Tensor::new(t.shape.clone(), data)?)?;
            if !t.trainable {
                store.freeze(&t.name)?;
            }
        }
        if header.config.entity_count != header.entities.len()
            || header.config.vocab_size != header.vocab.len()
        {
            return Err(bad("registry sizes disagree with the config".into()));
        }
        Ok(Self {
            stage: header.stage,
            config: header.config,
            store,
            vocab: header.vocab,
            entities: header.entities,
        })
    }

    /// Copies every tensor whose name starts with `prefix` into `target`,
    /// which must already hold a tensor of the same shape under that name.
    pub fn copy_into<T: Real>(
        &self,
        target: &mut ParameterStore<T>,
        prefix: &str,
    ) -> Result<usize> {
        let mut copied = 0;
        for (name, p) in self.store.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let dst = target.get(name).map_err(|_| {
                Error::Checkpoint(format!(
                    "checkpoint tensor `{name}` has no counterpart in the model"
                ))
            })?;
            if dst.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}`: checkpoint shape {:?}, model shape {:?}",
                    p.value.shape(),
                    dst.value.shape()
                )));
            }
            target.set_value(name, p.value.cast())?;
            copied += 1;
        }
        for name in target.names().filter(|n| n.starts_with(prefix)) {
            if !self.store.contains(name) {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` missing from checkpoint"
                )));
            }
        }
        Ok(copied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use crate::rng::SeedStream;

    fn sample() -> Checkpoint {
        let mut store = ParameterStore::new();
        let mut rng = SeedStream::new(1);
        store
            .init("news.a", &[3, 2], Init::Normal(1.0), &mut rng)
            .unwrap();
        store
            .init("user.b", &[4], Init::Normal(1.0), &mut rng)
            .unwrap();
        store.freeze("user.b").unwrap();
        Checkpoint {
            stage: Stage::Pretrain,
            config: ModelConfig {
                vocab_size: 1,
                entity_count: 2,
                ..Default::default()
            },
            store,
            vocab: TokenVocab::from_tokens(vec!["[UNK]".into()]),
            entities: EntityRegistry::new(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.stage, Stage::Pretrain);
        assert_eq!(back.config, ck.config);
        for (name, param) in ck.store.iter() {
            let other = back.store.get(name).unwrap();
            assert_eq!(other.value, param.value);
            assert_eq!(other.trainable, param.trainable);
        }
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let ck = sample();
        let mut target = ParameterStore::<Scalar>::new();
        target.insert("news.a", Tensor::zeros([2, 3])).unwrap();
        match ck.copy_into(&mut target, "news.") {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("news.a")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, b"hello world, definitely not a model").unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Checkpoint(_))));
    }
}
