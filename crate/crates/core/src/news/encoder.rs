use std::rc::Rc;

use crate::autodiff::{AttnLayout, SeqLayout, Tape, Var};
use crate::config::{ModelConfig, ProjectionKind};
use crate::data::{NewsArticle, ENTITY_HANDLE};
use crate::error::{Error, Result};
use crate::nn::{
    sinusoidal_pe, AdditivePool, Linear, MultiHeadAttention, ResidualNorm, TransformerLayer,
};
use crate::params::{Init, ParameterStore};
use crate::rng::SeedStream;
use crate::tensor::{Real, Scalar, Tensor};

pub const TOKEN_EMBEDDING: &str = "news.title.tok_emb";
pub const ENTITY_MEMORY: &str = "news.entity.memory";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Title,
    Entity,
}

/// Projected `(h, e)` rows for a batch of articles, both `[n × d]`.
#[derive(Clone, Copy, Debug)]
pub struct NewsBatch {
    pub h: Var,
    pub e: Var,
}

/// One article's `(h, e)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct NewsEmbedding<T: Real = Scalar> {
    pub h: Vec<T>,
    pub e: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct NewsEncoder {
    cfg: ModelConfig,
    title_layers: Vec<TransformerLayer>,
    title_attn: MultiHeadAttention,
    title_norm: ResidualNorm,
    title_pool: AdditivePool,
    see_layers: Vec<TransformerLayer>,
    proj_title: Vec<Linear>,
    proj_entity: Vec<Linear>,
    title_pe: Tensor<f64>,
    entity_pe: Tensor<f64>,
}

fn projection_stack(prefix: &str, in_dim: usize, cfg: &ModelConfig) -> Vec<Linear> {
    match cfg.projection {
        ProjectionKind::Identity => Vec::new(),
        ProjectionKind::AffineTanh => (0..cfg.projection_layers.max(1))
            .map(|i| {
                let input = if i == 0 { in_dim } else { cfg.dim };
                Linear::new(&format!("{prefix}.{i}"), input, cfg.dim, true)
            })
            .collect(),
    }
}

impl NewsEncoder {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, de) = (cfg.dim, cfg.entity_dim);
        let layer = |prefix: String, dim: usize, heads: usize| {
            TransformerLayer::new(
                &prefix,
                dim,
                heads,
                cfg.ffn_dim,
                cfg.dropout,
                cfg.layer_norm_eps,
                cfg.layer_norm_affine,
            )
        };
        Ok(Self {
            title_layers: (0..cfg.title_layers)
                .map(|i| layer(format!("news.title.layer{i}"), d, cfg.title_heads))
                .collect::<Result<_>>()?,
            title_attn: MultiHeadAttention::new("news.title.attn", d, cfg.title_heads)?,
            title_norm: ResidualNorm::new(
                "news.title.norm",
                d,
                cfg.layer_norm_eps,
                cfg.layer_norm_affine,
            ),
            title_pool: AdditivePool::new("news.title.pool", d, cfg.pool_hidden),
            see_layers: (0..cfg.see_layers)
                .map(|i| layer(format!("news.entity.layer{i}"), de, cfg.see_heads))
                .collect::<Result<_>>()?,
            proj_title: projection_stack("news.proj.title", d, cfg),
            proj_entity: projection_stack("news.proj.entity", de, cfg),
            title_pe: sinusoidal_pe(cfg.max_title_len, d)?,
            entity_pe: sinusoidal_pe(cfg.max_entities + 1, de)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Registers every news-encoder parameter with a fresh initialization.
    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut SeedStream) -> Result<()> {
        let cfg = &self.cfg;
        store.init(
            TOKEN_EMBEDDING,
            &[cfg.vocab_size, cfg.dim],
            Init::Normal(cfg.embedding_std),
            rng,
        )?;
        if cfg.freeze_token_embeddings {
            store.freeze(TOKEN_EMBEDDING)?;
        }
        for l in &self.title_layers {
            l.init(store, rng)?;
        }
        self.title_attn.init(store, rng)?;
        self.title_norm.init(store, rng)?;
        self.title_pool.init(store, rng)?;
        store.init(
            ENTITY_MEMORY,
            &[cfg.entity_count, cfg.entity_dim],
            Init::Normal(cfg.embedding_std),
            rng,
        )?;
        for l in &self.see_layers {
            l.init(store, rng)?;
        }
        for l in self.proj_title.iter().chain(&self.proj_entity) {
            l.init(store, rng)?;
        }
        Ok(())
    }

    fn check_ids(&self, articles: &[&NewsArticle]) -> Result<()> {
        for a in articles {
            if a.tokens.is_empty() {
                return Err(Error::Data(format!("article {} has an empty title", a.id)));
            }
            if a.tokens.len() > self.cfg.max_title_len {
                return Err(Error::Data(format!(
                    "article {} has {} tokens, limit {}",
                    a.id,
                    a.tokens.len(),
                    self.cfg.max_title_len
                )));
            }
            if let Some(t) = a
                .tokens
                .iter()
                .find(|&&t| t as usize >= self.cfg.vocab_size)
            {
                return Err(Error::Data(format!(
                    "article {}: token id {t} outside vocabulary of {}",
                    a.id, self.cfg.vocab_size
                )));
            }
            if a.entities.len() > self.cfg.max_entities {
                return Err(Error::Data(format!(
                    "article {} has {} entities, limit {}",
                    a.id,
                    a.entities.len(),
                    self.cfg.max_entities
                )));
            }
            if let Some(e) = a
                .entities
                .iter()
                .find(|&&e| e as usize >= self.cfg.entity_count)
            {
                return Err(Error::Data(format!(
                    "article {}: entity id {e} outside memory of {} rows",
                    a.id, self.cfg.entity_count
                )));
            }
        }
        Ok(())
    }

    /// Pooled title vectors `[n × d]` before projection.
    pub fn encode_title<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        articles: &[&NewsArticle],
    ) -> Result<Var> {
        self.check_ids(articles)?;
        let lengths: Vec<usize> = articles.iter().map(|a| a.tokens.len()).collect();
        let ids: Vec<usize> = articles
            .iter()
            .flat_map(|a| a.tokens.iter().map(|&t| t as usize))
            .collect();
        let emb = tape.param(store, TOKEN_EMBEDDING)?;
        let mut x = tape.gather(emb, Rc::new(ids))?;
        if self.cfg.title_positions {
            x = self.add_positions(tape, x, &lengths, &self.title_pe)?;
        }
        let seqs = Rc::new(SeqLayout::from_lengths(&lengths));
        let attn = Rc::new(AttnLayout::within(&seqs));
        for l in &self.title_layers {
            x = l.forward(tape, store, x, attn.clone())?;
        }
        let a = self.title_attn.forward(tape, store, x, x, x, attn)?;
        let a = tape.dropout(a, self.cfg.dropout)?;
        let x = self.title_norm.forward(tape, store, x, a)?;
        self.title_pool.forward(tape, store, x, seqs)
    }

    /// Signature entity vectors `[n × d_e]`: the handle position's output of
    /// the entity transformer, before projection.
    pub fn encode_entities<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        articles: &[&NewsArticle],
    ) -> Result<Var> {
        self.check_ids(articles)?;
        let lengths: Vec<usize> = articles.iter().map(|a| a.entities.len() + 1).collect();
        let mut ids = Vec::with_capacity(lengths.iter().sum());
        let mut handles = Vec::with_capacity(articles.len());
        for a in articles {
            handles.push(ids.len());
            ids.push(ENTITY_HANDLE as usize);
            ids.extend(a.entities.iter().map(|&e| e as usize));
        }
        let memory = tape.param(store, ENTITY_MEMORY)?;
        let mut x = tape.gather(memory, Rc::new(ids))?;
        if self.cfg.entity_positions {
            x = self.add_positions(tape, x, &lengths, &self.entity_pe)?;
        }
        if !self.see_layers.is_empty() {
            let attn = Rc::new(AttnLayout::within(&SeqLayout::from_lengths(&lengths)));
            for l in &self.see_layers {
                x = l.forward(tape, store, x, attn.clone())?;
            }
        }
        tape.gather(x, Rc::new(handles))
    }

    /// Casts one side into the shared dimension `d`.
    pub fn project<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        x: Var,
        side: Side,
    ) -> Result<Var> {
        let stack = match side {
            Side::Title => &self.proj_title,
            Side::Entity => &self.proj_entity,
        };
        let mut x = x;
        for l in stack {
            x = l.forward(tape, store, x)?;
            x = tape.tanh(x);
        }
        Ok(x)
    }

    /// Projected `(h, e)` for each article.
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        articles: &[&NewsArticle],
    ) -> Result<NewsBatch> {
        let t = self.encode_title(tape, store, articles)?;
        let h = self.project(tape, store, t, Side::Title)?;
        let s = self.encode_entities(tape, store, articles)?;
        let e = self.project(tape, store, s, Side::Entity)?;
        Ok(NewsBatch { h, e })
    }

    /// Eval-mode embeddings, computed in chunks.
    pub fn embed<T: Real>(
        &self,
        store: &ParameterStore<T>,
        articles: &[&NewsArticle],
    ) -> Result<Vec<NewsEmbedding<T>>> {
        let mut out = Vec::with_capacity(articles.len());
        for chunk in articles.chunks(256) {
            let mut tape = Tape::new();
            let b = self.encode(&mut tape, store, chunk)?;
            let (h, e) = (tape.value(b.h), tape.value(b.e));
            for i in 0..chunk.len() {
                out.push(NewsEmbedding {
                    h: h.row(i).to_vec(),
                    e: e.row(i).to_vec(),
                });
            }
        }
        Ok(out)
    }

    fn add_positions<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        lengths: &[usize],
        table: &Tensor<f64>,
    ) -> Result<Var> {
        let width = table.cols();
        let mut data = Vec::with_capacity(lengths.iter().sum::<usize>() * width);
        for &len in lengths {
            for p in 0..len {
                data.extend(table.row(p).iter().map(|&v| T::lit(v)));
            }
        }
        let pe = tape.constant(Tensor::new([data.len() / width, width], data)?);
        tape.add(x, pe)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            dim: 8,
            entity_dim: 6,
            title_layers: 1,
            title_heads: 2,
            see_layers: 1,
            see_heads: 2,
            user_heads: 2,
            ffn_dim: 8,
            pool_hidden: 4,
            vocab_size: 10,
            entity_count: 6,
            dropout: 0.0,
            ..Default::default()
        }
    }

    fn art(tokens: &[u32], entities: &[u32]) -> NewsArticle {
        NewsArticle {
            id: "a".into(),
            tokens: tokens.to_vec(),
            entities: entities.to_vec(),
        }
    }

    fn setup(c: &ModelConfig) -> (NewsEncoder, ParameterStore<f64>) {
        let enc = NewsEncoder::new(c).unwrap();
        let mut store = ParameterStore::new();
        enc.init(&mut store, &mut SeedStream::new(3)).unwrap();
        (enc, store)
    }

    #[test]
    fn outputs_are_bounded_and_deterministic() {
        let (enc, store) = setup(&cfg());
        let a = art(&[1, 2, 3], &[2, 3]);
        let b = art(&[4], &[]);
        let x = enc.embed(&store, &[&a, &b, &a]).unwrap();
        assert_eq!(x[0], x[2]);
        for v in x.iter().flat_map(|n| n.h.iter().chain(&n.e)) {
            assert!(v.abs() < 1.0);
        }
    }

    #[test]
    fn batching_matches_single_articles() {
        let (enc, store) = setup(&cfg());
        let arts = [
            art(&[1, 2, 3], &[2, 3]),
            art(&[4, 5], &[]),
            art(&[9], &[5, 4, 3]),
        ];
        let refs: Vec<&NewsArticle> = arts.iter().collect();
        let batch = enc.embed(&store, &refs).unwrap();
        for (i, a) in arts.iter().enumerate() {
            let one = enc.embed(&store, &[a]).unwrap();
            for (x, y) in one[0].h.iter().zip(&batch[i].h) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in one[0].e.iter().zip(&batch[i].e) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_ids_are_data_errors() {
        let (enc, store) = setup(&cfg());
        assert!(matches!(
            enc.embed(&store, &[&art(&[10], &[])]),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            enc.embed(&store, &[&art(&[1], &[6])]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn stack_free_identity_returns_handle_plus_position_zero() {
        let c = ModelConfig {
            see_layers: 0,
            entity_dim: 8,
            projection: ProjectionKind::Identity,
            ..cfg()
        };
        let (enc, store) = setup(&c);
        let out = enc.embed(&store, &[&art(&[1], &[2, 3])]).unwrap();
        let handle = store.value(ENTITY_MEMORY).unwrap().row(0);
        for (j, (&o, &m)) in out[0].e.iter().zip(handle).enumerate() {
            let pe0 = if j % 2 == 0 { 0.0 } else { 1.0 };
            assert!((o - (m + pe0)).abs() < 1e-12);
        }
    }

    #[test]
    fn entity_order_matters_only_through_positions() {
        let c = ModelConfig {
            entity_positions: false,
            ..cfg()
        };
        let (enc, store) = setup(&c);
        let a = enc.embed(&store, &[&art(&[1], &[2, 3, 4])]).unwrap();
        let b = enc.embed(&store, &[&art(&[1], &[4, 2, 3])]).unwrap();
        for (x, y) in a[0].e.iter().zip(&b[0].e) {
            assert!((x - y).abs() < 1e-5);
        }
        let (enc, store) = setup(&cfg());
        let a = enc.embed(&store, &[&art(&[1], &[2, 3, 4])]).unwrap();
        let b = enc.embed(&store, &[&art(&[1], &[4, 2, 3])]).unwrap();
        let diff: f64 = a[0]
            .e
            .iter()
            .zip(&b[0].e)
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        assert!(diff.sqrt() > 1e-6);
    }

    #[test]
    fn token_order_changes_title_with_positions() {
        let (enc, store) = setup(&cfg());
        let a = enc.embed(&store, &[&art(&[1, 2, 3, 4], &[])]).unwrap();
        let b = enc.embed(&store, &[&art(&[4, 3, 2, 1], &[])]).unwrap();
        let diff: f64 = a[0]
            .h
            .iter()
            .zip(&b[0].h)
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        assert!(diff.sqrt() >= 1e-4);
    }
}
