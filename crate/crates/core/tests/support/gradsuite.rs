//! Finite-difference cases shared by the gradient tests and the acceptance
//! runner: every tape op, the layer building blocks, and both full losses on
//! micro configurations.

#![allow(dead_code)]

use std::rc::Rc;

use entrec::autodiff::{AttnGroup, AttnLayout, SeqLayout, Tape, Var};
use entrec::config::{ModelConfig, NceMode, PretrainConfig};
use entrec::data::{Dataset, RawArticle};
use entrec::gradcheck::{check_gradients, CheckOptions, GradReport, Objective};
use entrec::news::NewsEncoder;
use entrec::nn::{
    AdditivePool, FeedForward, Linear, MultiHeadAttention, ResidualNorm, TransformerLayer,
};
use entrec::params::{Init, ParameterStore};
use entrec::pretrain::{combined_loss, info_nce};
use entrec::ranker::{nce_loss, Recommender, TrainingInstance};
use entrec::rng::SeedStream;
use entrec::{Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    MatMul,
    MatMulNt,
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    MulCol,
    Affine,
    Tanh,
    Sigmoid,
    Gelu,
    LayerNorm,
    Gather,
    ConcatCols,
    L2Normalize,
    SoftmaxRows,
    SoftmaxXent,
    Sum,
    Mean,
    Dropout,
    GroupDot,
    Attention,
    Pool,
    Linear,
    ResidualNorm,
    MultiHead,
    AdditivePool,
    FeedForward,
    Transformer,
    InfoNce,
    NceStandard,
    NceLiteral,
}

pub const OPS: [Op; 33] = [
    Op::MatMul,
    Op::MatMulNt,
    Op::Add,
    Op::Sub,
    Op::Mul,
    Op::AddRow,
    Op::MulRow,
    Op::MulCol,
    Op::Affine,
    Op::Tanh,
    Op::Sigmoid,
    Op::Gelu,
    Op::LayerNorm,
    Op::Gather,
    Op::ConcatCols,
    Op::L2Normalize,
    Op::SoftmaxRows,
    Op::SoftmaxXent,
    Op::Sum,
    Op::Mean,
    Op::Dropout,
    Op::GroupDot,
    Op::Attention,
    Op::Pool,
    Op::Linear,
    Op::ResidualNorm,
    Op::MultiHead,
    Op::AdditivePool,
    Op::FeedForward,
    Op::Transformer,
    Op::InfoNce,
    Op::NceStandard,
    Op::NceLiteral,
];

pub struct OpCase {
    pub op: Op,
    pub store: ParameterStore<f64>,
    weights: Tensor<f64>,
}

fn shapes(op: Op) -> Vec<(&'static str, Vec<usize>)> {
    use Op::*;
    match op {
        MatMul => vec![("x", vec![3, 4]), ("y", vec![4, 2])],
        MatMulNt => vec![("x", vec![3, 4]), ("y", vec![5, 4])],
        Add | Sub | Mul => vec![("x", vec![3, 4]), ("y", vec![3, 4])],
        AddRow | MulRow => vec![("x", vec![3, 4]), ("y", vec![4])],
        MulCol => vec![("x", vec![3, 4]), ("y", vec![3, 1])],
        Affine | Tanh | Sigmoid | Gelu | LayerNorm | L2Normalize | SoftmaxRows | Sum | Mean
        | Dropout => vec![("x", vec![3, 4])],
        Gather => vec![("x", vec![4, 3])],
        ConcatCols => vec![("x", vec![3, 2]), ("y", vec![3, 3])],
        SoftmaxXent => vec![("x", vec![3, 4])],
        GroupDot => vec![("x", vec![2, 4]), ("y", vec![6, 4])],
        Attention => vec![("q", vec![3, 4]), ("k", vec![5, 4]), ("v", vec![5, 6])],
        Pool => vec![("x", vec![5, 3]), ("s", vec![5, 1])],
        Linear | ResidualNorm | MultiHead | AdditivePool | FeedForward | Transformer => {
            vec![("x", vec![4, 8])]
        }
        InfoNce => vec![("x", vec![4, 6]), ("y", vec![4, 6])],
        NceStandard | NceLiteral => vec![("x", vec![2, 5])],
    }
}

impl OpCase {
    pub fn new(op: Op, seed: u64) -> Result<Self> {
        let mut rng = SeedStream::new(seed);
        let mut store = ParameterStore::new();
        for (name, shape) in shapes(op) {
            store.init(name, &shape, Init::Normal(0.8), &mut rng)?;
        }
        match op {
            Op::Linear => Linear::new("l", 8, 8, true).init(&mut store, &mut rng)?,
            Op::ResidualNorm => {
                store.init("y", &[4, 8], Init::Normal(0.8), &mut rng)?;
                ResidualNorm::new("rn", 8, 1e-5, true).init(&mut store, &mut rng)?;
                // Move gain and bias off their trivial initial values.
                for n in ["rn.gain", "rn.bias"] {
                    let p = store.get_mut(n)?;
                    for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                        *v += 0.1 * (i as f64 - 3.5);
                    }
                }
            }
            Op::MultiHead => MultiHeadAttention::new("mha", 8, 2)?.init(&mut store, &mut rng)?,
            Op::AdditivePool => AdditivePool::new("ap", 8, 5).init(&mut store, &mut rng)?,
            Op::FeedForward => FeedForward::new("ff", 8, 12).init(&mut store, &mut rng)?,
            Op::Transformer => transformer().init(&mut store, &mut rng)?,
            _ => {}
        }
        let out_shape = match op {
            Op::MatMul => vec![3, 2],
            Op::MatMulNt => vec![3, 5],
            Op::Gather => vec![5, 3],
            Op::ConcatCols => vec![3, 5],
            Op::GroupDot => vec![2, 3],
            Op::Attention => vec![3, 6],
            Op::Pool => vec![2, 3],
            Op::AdditivePool => vec![2, 8],
            Op::Linear | Op::ResidualNorm | Op::MultiHead | Op::FeedForward | Op::Transformer => {
                vec![4, 8]
            }
            Op::SoftmaxXent
            | Op::Sum
            | Op::Mean
            | Op::InfoNce
            | Op::NceStandard
            | Op::NceLiteral => {
                vec![]
            }
            _ => vec![3, 4],
        };
        let mut w = ParameterStore::new();
        let n: usize = out_shape.iter().product::<usize>().max(1);
        w.init("w", &[n], Init::Normal(1.0), &mut rng)?;
        let weights = Tensor::new(out_shape, w.value("w")?.data().to_vec())?;
        Ok(Self { op, store, weights })
    }

    pub fn needs_dropout(&self) -> bool {
        matches!(self.op, Op::Dropout | Op::Transformer)
    }
}

fn transformer() -> TransformerLayer {
    TransformerLayer::new("tl", 8, 2, 12, 0.2, 1e-5, true).expect("valid layer")
}

fn two_seqs() -> Rc<SeqLayout> {
    Rc::new(SeqLayout::from_lengths(&[1, 3]))
}

impl Objective for OpCase {
    fn loss<T: Real>(&self, tape: &mut Tape<T>, store: &ParameterStore<T>) -> Result<Var> {
        let p = |tape: &mut Tape<T>, n: &str| tape.param(store, n);
        let x = p(
            tape,
            match self.op {
                Op::Attention => "q",
                _ => "x",
            },
        )?;
        let out = match self.op {
            Op::MatMul => {
                let y = p(tape, "y")?;
                tape.matmul(x, y)?
            }
            Op::MatMulNt => {
                let y = p(tape, "y")?;
                tape.matmul_nt(x, y)?
            }
            Op::Add => {
                let y = p(tape, "y")?;
                tape.add(x, y)?
            }
            Op::Sub => {
                let y = p(tape, "y")?;
                tape.sub(x, y)?
            }
            Op::Mul => {
                let y = p(tape, "y")?;
                tape.mul(x, y)?
            }
            Op::AddRow => {
                let y = p(tape, "y")?;
                tape.add_row(x, y)?
            }
            Op::MulRow => {
                let y = p(tape, "y")?;
                tape.mul_row(x, y)?
            }
            Op::MulCol => {
                let y = p(tape, "y")?;
                tape.mul_col(x, y)?
            }
            Op::Affine => tape.affine(x, -1.7, 0.3),
            Op::Tanh => tape.tanh(x),
            Op::Sigmoid => tape.sigmoid(x),
            Op::Gelu => tape.gelu(x),
            Op::LayerNorm => tape.layer_norm(x, 1e-5),
            Op::Gather => tape.gather(x, Rc::new(vec![2, 0, 2, 3, 2]))?,
            Op::ConcatCols => {
                let y = p(tape, "y")?;
                tape.concat_cols(&[x, y])?
            }
            Op::L2Normalize => tape.l2_normalize_rows(x)?,
            Op::SoftmaxRows => tape.softmax_rows(x),
            Op::SoftmaxXent => return tape.softmax_xent(x, &[1, 0, 3]),
            Op::Sum => {
                let t = tape.tanh(x);
                return Ok(tape.sum(t));
            }
            Op::Mean => {
                let t = tape.tanh(x);
                return Ok(tape.mean(t));
            }
            Op::Dropout => tape.dropout(x, 0.3)?,
            Op::GroupDot => {
                let y = p(tape, "y")?;
                tape.group_dot(x, y, 3)?
            }
            Op::Attention => {
                let k = p(tape, "k")?;
                let v = p(tape, "v")?;
                let layout = AttnLayout {
                    groups: vec![
                        AttnGroup {
                            q_start: 0,
                            q_len: 2,
                            k_start: 0,
                            k_len: 3,
                        },
                        AttnGroup {
                            q_start: 2,
                            q_len: 1,
                            k_start: 3,
                            k_len: 2,
                        },
                    ],
                    key_mask: Some(vec![true, false, true, true, true]),
                };
                tape.attention(x, k, v, 2, Rc::new(layout))?
            }
            Op::Pool => {
                let s = p(tape, "s")?;
                let layout =
                    SeqLayout::from_lengths(&[2, 3]).with_mask(vec![true, true, true, false, true]);
                tape.pool(x, s, Rc::new(layout))?
            }
            Op::Linear => Linear::new("l", 8, 8, true).forward(tape, store, x)?,
            Op::ResidualNorm => {
                let y = p(tape, "y")?;
                ResidualNorm::new("rn", 8, 1e-5, true).forward(tape, store, x, y)?
            }
            Op::MultiHead => {
                let layout = Rc::new(AttnLayout::within(&two_seqs()));
                MultiHeadAttention::new("mha", 8, 2)?.forward(tape, store, x, x, x, layout)?
            }
            Op::AdditivePool => {
                AdditivePool::new("ap", 8, 5).forward(tape, store, x, two_seqs())?
            }
            Op::FeedForward => FeedForward::new("ff", 8, 12).forward(tape, store, x)?,
            Op::Transformer => {
                let layout = Rc::new(AttnLayout::within(&two_seqs()));
                transformer().forward(tape, store, x, layout)?
            }
            Op::InfoNce => {
                let y = p(tape, "y")?;
                return info_nce(tape, x, y, 0.5);
            }
            Op::NceStandard => return nce_loss(tape, x, NceMode::Standard),
            Op::NceLiteral => return nce_loss(tape, x, NceMode::Literal),
        };
        let w = tape.constant(self.weights.cast());
        let prod = tape.mul(out, w)?;
        Ok(tape.sum(prod))
    }
}

/// Micro corpus: five articles, one with no entities.
pub fn micro_articles() -> Vec<RawArticle> {
    let art = |id: &str, toks: &[&str], ents: &[&str]| RawArticle {
        id: id.into(),
        tokens: toks.iter().map(|s| s.to_string()).collect(),
        entities: ents.iter().map(|s| s.to_string()).collect(),
    };
    vec![
        art("A", &["red", "fox", "runs"], &["Q1", "Q2"]),
        art("B", &["blue", "whale", "dives", "deep"], &["Q3"]),
        art("C", &["fox", "meets", "whale"], &["Q1", "Q3", "Q4"]),
        art("D", &["quiet", "day"], &[]),
        art("E", &["red", "day", "runs", "late", "again"], &["Q2", "Q4"]),
        art("F", &["deep", "blue"], &["Q4"]),
    ]
}

pub fn micro_model_config(ds: &Dataset) -> ModelConfig {
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
        max_title_len: 8,
        max_entities: 4,
        dropout: 0.1,
        embedding_std: 0.5,
        vocab_size: ds.vocab.len(),
        entity_count: ds.entities.len(),
        ..ModelConfig::default()
    }
}

/// The full pre-training loss on a batch of `v = 4` articles.
pub struct PretrainCase {
    pub encoder: NewsEncoder,
    pub store: ParameterStore<f64>,
    ds: Dataset,
    cfg: PretrainConfig,
}

impl PretrainCase {
    pub fn new() -> Result<Self> {
        let ds = Dataset::build(micro_articles(), vec![], 1);
        let encoder = NewsEncoder::new(&micro_model_config(&ds))?;
        let mut store = ParameterStore::new();
        encoder.init(&mut store, &mut SeedStream::new(11))?;
        let cfg = PretrainConfig {
            tau_et: 0.5,
            tau_hh: 0.5,
            tau_ee: 0.5,
            ..PretrainConfig::default()
        };
        Ok(Self {
            encoder,
            store,
            ds,
            cfg,
        })
    }
}

impl Objective for PretrainCase {
    fn loss<T: Real>(&self, tape: &mut Tape<T>, store: &ParameterStore<T>) -> Result<Var> {
        let batch: Vec<_> = [0usize, 1, 2, 3]
            .iter()
            .map(|&i| &self.ds.articles[i])
            .collect();
        let nb = self.encoder.encode(tape, store, &batch)?;
        Ok(combined_loss(tape, nb.e, nb.h, &self.cfg)?.total)
    }
}

/// The full ranking loss on one instance with `r = 4` negatives.
pub struct RecsysCase {
    pub model: Recommender,
    pub store: ParameterStore<f64>,
    ds: Dataset,
    instance: TrainingInstance,
    mode: NceMode,
}

impl RecsysCase {
    pub fn new(mode: NceMode) -> Result<Self> {
        let ds = Dataset::build(micro_articles(), vec![], 1);
        let mut cfg = micro_model_config(&ds);
        cfg.see_layers = 1;
        let model = Recommender::new(&cfg)?;
        let mut store = ParameterStore::new();
        model.init(&mut store, &SeedStream::new(5))?;
        let instance = TrainingInstance {
            history: vec![0, 3, 2],
            positive: 4,
            negatives: vec![1, 5, 2, 0],
        };
        Ok(Self {
            model,
            store,
            ds,
            instance,
            mode,
        })
    }
}

impl Objective for RecsysCase {
    fn loss<T: Real>(&self, tape: &mut Tape<T>, store: &ParameterStore<T>) -> Result<Var> {
        self.model
            .instance_loss(tape, store, &self.ds, &[&self.instance], self.mode)
    }
}

pub const F32_TOL: f64 = 1e-3;
pub const F64_TOL: f64 = 1e-6;

pub fn f32_options(dropout: bool) -> CheckOptions {
    CheckOptions {
        step: 1e-3,
        dropout_seed: dropout.then_some(99),
        max_entries: None,
    }
}

pub fn f64_options(dropout: bool) -> CheckOptions {
    CheckOptions {
        step: 1e-5,
        ..f32_options(dropout)
    }
}

/// Every case at both precisions: `(name, f32 error, f64 error)`.
pub fn run_all() -> Result<Vec<(String, f64, f64)>> {
    let mut out = Vec::new();
    let mut run = |name: String, r32: GradReport, r64: GradReport| {
        out.push((name, r32.max_rel_error(), r64.max_rel_error()));
    };
    for (i, op) in OPS.iter().enumerate() {
        let case = OpCase::new(*op, 100 + i as u64)?;
        let d = case.needs_dropout();
        run(
            format!("{op:?}"),
            check_gradients::<f32, _>(&case, &case.store, &f32_options(d))?,
            check_gradients::<f64, _>(&case, &case.store, &f64_options(d))?,
        );
    }
    let pre = PretrainCase::new()?;
    run(
        "pretrain combined loss".into(),
        check_gradients::<f32, _>(&pre, &pre.store, &f32_options(true))?,
        check_gradients::<f64, _>(&pre, &pre.store, &f64_options(true))?,
    );
    for mode in [NceMode::Standard, NceMode::Literal] {
        let rec = RecsysCase::new(mode)?;
        run(
            format!("ranking loss ({mode:?})"),
            check_gradients::<f32, _>(&rec, &rec.store, &f32_options(true))?,
            check_gradients::<f64, _>(&rec, &rec.store, &f64_options(true))?,
        );
    }
    Ok(out)
}
