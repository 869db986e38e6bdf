//! Dual-tower user encoder and gated aggregation for users and candidates.

use std::rc::Rc;

use crate::autodiff::{AttnLayout, SeqLayout, Tape, Var};
use crate::config::{Aggregation, ModelConfig, TowerAttention};
use crate::error::{Error, Result};
use crate::nn::{AdditivePool, Linear, MultiHeadAttention, ResidualNorm};
use crate::params::ParameterStore;
use crate::rng::SeedStream;
use crate::tensor::{Real, Scalar, Tensor};

/// Packed histories: `h` and `e` are `[rows × d]`, row-aligned, with one
/// sequence per user in `layout` (masked rows are padding).
#[derive(Clone, Debug)]
pub struct HistoryBatch {
    pub h: Var,
    pub e: Var,
    pub layout: Rc<SeqLayout>,
}

/// Tape handles for a batch of encoded users.
#[derive(Clone, Copy, Debug)]
pub struct UserVars {
    pub u: Var,
    pub u_h: Var,
    pub u_e: Var,
    /// `[users × 1]` gate values; absent under concatenation.
    pub eta: Option<Var>,
}

/// One user's embedding with its diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct UserEmbedding<T: Real = Scalar> {
    pub u: Vec<T>,
    pub u_h: Vec<T>,
    pub u_e: Vec<T>,
    pub eta: Option<T>,
}

#[derive(Clone, Debug)]
struct Tower {
    attn: MultiHeadAttention,
    norm: ResidualNorm,
    pool: AdditivePool,
}

impl Tower {
    fn new(prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&format!("{prefix}.attn"), cfg.dim, cfg.user_heads)?,
            norm: ResidualNorm::new(
                &format!("{prefix}.norm"),
                cfg.dim,
                cfg.layer_norm_eps,
                cfg.layer_norm_affine,
            ),
            pool: AdditivePool::new(&format!("{prefix}.pool"), cfg.dim, cfg.pool_hidden),
        })
    }

    fn init<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut SeedStream) -> Result<()> {
        self.attn.init(store, rng)?;
        self.norm.init(store, rng)?;
        self.pool.init(store, rng)
    }

    /// `pool(norm(q + MHA(q, k, q)))`.
    #[allow(clippy::too_many_arguments)]
    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        q: Var,
        k: Var,
        layout: &Rc<SeqLayout>,
        attn: &Rc<AttnLayout>,
        dropout: f64,
    ) -> Result<Var> {
        let a = self.attn.forward(tape, store, q, k, q, attn.clone())?;
        let a = tape.dropout(a, dropout)?;
        let x = self.norm.forward(tape, store, q, a)?;
        self.pool.forward(tape, store, x, layout.clone())
    }
}

#[derive(Clone, Debug)]
pub struct UserModel {
    cfg: ModelConfig,
    semantic: Tower,
    entity: Tower,
    gate: Linear,
    cand_gate: Option<Linear>,
    concat_proj: Linear,
    gate_override: Option<f64>,
}

impl UserModel {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            semantic: Tower::new("user.semantic", cfg)?,
            entity: Tower::new("user.entity", cfg)?,
            gate: Linear::new("user.gate", 2 * cfg.dim, 1, true),
            cand_gate: (!cfg.tie_gates)
                .then(|| Linear::new("user.cand_gate", 2 * cfg.dim, 1, true)),
            concat_proj: Linear::new("user.concat_proj", 2 * cfg.dim, cfg.dim, true),
            gate_override: None,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Forces the user gate to a constant (1 keeps only the title tower).
    pub fn with_gate_override(mut self, eta: Option<f64>) -> Self {
        self.gate_override = eta;
        self
    }

    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut SeedStream) -> Result<()> {
        self.semantic.init(store, rng)?;
        self.entity.init(store, rng)?;
        match self.cfg.aggregation {
            Aggregation::Gate => {
                self.gate.init(store, rng)?;
                if let Some(g) = &self.cand_gate {
                    g.init(store, rng)?;
                }
            }
            Aggregation::Concat => {
                self.concat_proj.init(store, rng)?;
                store.freeze(&self.concat_proj.weight)?;
                if let Some(b) = &self.concat_proj.bias {
                    store.freeze(b)?;
                }
            }
        }
        Ok(())
    }

    /// `η = σ([a; b] W + b)` as a `[n × 1]` column.
    pub fn gate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        a: Var,
        b: Var,
        candidate: bool,
    ) -> Result<Var> {
        let lin = match (&self.cand_gate, candidate) {
            (Some(g), true) => g,
            _ => &self.gate,
        };
        let ab = tape.concat_cols(&[a, b])?;
        let z = lin.forward(tape, store, ab)?;
        Ok(tape.sigmoid(z))
    }

    /// `η·a + (1 − η)·b`, or the frozen projection of `[a; b]`.
    fn aggregate<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        a: Var,
        b: Var,
        candidate: bool,
    ) -> Result<(Var, Option<Var>)> {
        match self.cfg.aggregation {
            Aggregation::Concat => {
                let ab = tape.concat_cols(&[a, b])?;
                Ok((self.concat_proj.forward(tape, store, ab)?, None))
            }
            Aggregation::Gate => {
                let eta = match (self.gate_override, candidate) {
                    (Some(v), false) => {
                        let n = tape.value(a).rows();
                        tape.constant(Tensor::full([n, 1], T::lit(v)))
                    }
                    _ => self.gate(tape, store, a, b, candidate)?,
                };
                let diff = tape.sub(a, b)?;
                let scaled = tape.mul_col(diff, eta)?;
                Ok((tape.add(b, scaled)?, Some(eta)))
            }
        }
    }

    /// Title-side tower output `u_h` for each user.
    pub fn semantic_tower<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        hist: &HistoryBatch,
    ) -> Result<Var> {
        let attn = Rc::new(AttnLayout::within(&hist.layout));
        let key = match self.cfg.tower_attention {
            TowerAttention::Cross => hist.e,
            TowerAttention::SelfOnly => hist.h,
        };
        self.semantic.forward(
            tape,
            store,
            hist.h,
            key,
            &hist.layout,
            &attn,
            self.cfg.dropout,
        )
    }

    /// Entity-side tower output `u_e` for each user.
    pub fn entity_tower<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        hist: &HistoryBatch,
    ) -> Result<Var> {
        let attn = Rc::new(AttnLayout::within(&hist.layout));
        let key = match self.cfg.tower_attention {
            TowerAttention::Cross => hist.h,
            TowerAttention::SelfOnly => hist.e,
        };
        self.entity.forward(
            tape,
            store,
            hist.e,
            key,
            &hist.layout,
            &attn,
            self.cfg.dropout,
        )
    }

    pub fn encode_users<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        hist: &HistoryBatch,
    ) -> Result<UserVars> {
        if hist.layout.seqs.iter().any(|&(_, l)| l == 0) {
            return Err(Error::Usage("user history of length 0".into()));
        }
        if tape.value(hist.h).shape() != tape.value(hist.e).shape() {
            return Err(Error::Shape(format!(
                "history title rows {:?} vs entity rows {:?}",
                tape.value(hist.h).shape(),
                tape.value(hist.e).shape()
            )));
        }
        let u_h = self.semantic_tower(tape, store, hist)?;
        let u_e = self.entity_tower(tape, store, hist)?;
        let (u, eta) = self.aggregate(tape, store, u_h, u_e, false)?;
        Ok(UserVars { u, u_h, u_e, eta })
    }

    /// Candidate vectors `[n × d]` from projected `(h, e)` rows.
    pub fn encode_candidates<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        h: Var,
        e: Var,
    ) -> Result<Var> {
        Ok(self.aggregate(tape, store, h, e, true)?.0)
    }

    /// Eval-mode encoding of single users from `(h, e)` rows.
    pub fn embed_users<T: Real>(
        &self,
        store: &ParameterStore<T>,
        histories: &[(Tensor<T>, Tensor<T>)],
    ) -> Result<Vec<UserEmbedding<T>>> {
        let mut tape = Tape::new();
        let lengths: Vec<usize> = histories.iter().map(|(h, _)| h.rows()).collect();
        let stack = |pick: fn(&(Tensor<T>, Tensor<T>)) -> &Tensor<T>| -> Result<Tensor<T>> {
            let d = self.cfg.dim;
            let mut data = Vec::new();
            for pair in histories {
                let t = pick(pair);
                if t.cols() != d {
                    return Err(Error::Shape(format!("history width {} != {d}", t.cols())));
                }
                data.extend_from_slice(t.data());
            }
            Tensor::new([data.len() / d, d], data)
        };
        let h = tape.constant(stack(|p| &p.0)?);
        let e = tape.constant(stack(|p| &p.1)?);
        let hist = HistoryBatch {
            h,
            e,
            layout: Rc::new(SeqLayout::from_lengths(&lengths)),
        };
        let vars = self.encode_users(&mut tape, store, &hist)?;
        let row = |v: Var, i: usize| tape.value(v).row(i).to_vec();
        Ok((0..histories.len())
            .map(|i| UserEmbedding {
                u: row(vars.u, i),
                u_h: row(vars.u_h, i),
                u_e: row(vars.u_e, i),
                eta: vars.eta.map(|v| tape.value(v).data()[i]),
            })
            .collect())
    }
}
