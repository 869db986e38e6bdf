use std::rc::Rc;

use super::join;
use crate::autodiff::{AttnLayout, SeqLayout, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParameterStore};
use crate::rng::SeedStream;
use crate::tensor::Real;

/// `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            weight: join(prefix, "w"),
            bias: bias.then(|| join(prefix, "b")),
            in_dim,
            out_dim,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut SeedStream) -> Result<()> {
        store.init(
            &self.weight,
            &[self.in_dim, self.out_dim],
            Init::Xavier,
            rng,
        )?;
        if let Some(b) = &self.bias {
            store.init(b, &[self.out_dim], Init::Zeros, rng)?;
        }
        Ok(())
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, &self.weight)?;
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.param(store, b)?;
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// `layernorm(x + delta)`, optionally followed by a learnable gain and bias.
#[derive(Clone, Debug)]
pub struct ResidualNorm {
    pub gain: Option<String>,
    pub bias: Option<String>,
    pub dim: usize,
    pub eps: f64,
}

impl ResidualNorm {
    pub fn new(prefix: &str, dim: usize, eps: f64, affine: bool) -> Self {
        Self {
            gain: affine.then(|| join(prefix, "gain")),
            bias: affine.then(|| join(prefix, "bias")),
            dim,
            eps,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut SeedStream) -> Result<()> {
        if let (Some(g), Some(b)) = (&self.gain, &self.bias) {
            store.init(g, &[self.dim], Init::Ones, rng)?;
            store.init(b, &[self.dim], Init::Zeros, rng)?;
        }
        Ok(())
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        x: Var,
        delta: Var,
    ) -> Result<Var> {
        let sum = tape.add(x, delta)?;
        let mut y = tape.layer_norm(sum, self.eps);
        if let (Some(g), Some(b)) = (&self.gain, &self.bias) {
            let g = tape.param(store, g)?;
            let b = tape.param(store, b)?;
            y = tape.mul_row(y, g)?;
            y = tape.add_row(y, b)?;
        }
        Ok(y)
    }
}

/// Multi-head attention: per-head projections packed column-wise into
/// `W^Q`, `W^K`, `W^V`, followed by the output projection `W^O`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{prefix}: dimension {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(&join(prefix, "wq"), dim, dim, false),
            key: Linear::new(&join(prefix, "wk"), dim, dim, false),
            value: Linear::new(&join(prefix, "wv"), dim, dim, false),
            output: Linear::new(&join(prefix, "wo"), dim, dim, false),
            heads,
        })
    }

    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut SeedStream) -> Result<()> {
        for l in [&self.query, &self.key, &self.value, &self.output] {
            l.init(store, rng)?;
        }
        Ok(())
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        q: Var,
        k: Var,
        v: Var,
        layout: Rc<AttnLayout>,
    ) -> Result<Var> {
        let qp = self.query.forward(tape, store, q)?;
        let kp = self.key.forward(tape, store, k)?;
        let vp = self.value.forward(tape, store, v)?;
        let heads = tape.attention(qp, kp, vp, self.heads, layout)?;
        self.output.forward(tape, store, heads)
    }
}

/// Additive attention pooling: `a_i = W2 · tanh(W1 · x_i + b1) + b2`,
/// output `Σ softmax(a)_i x_i` per sequence.
#[derive(Clone, Debug)]
pub struct AdditivePool {
    pub hidden: Linear,
    pub score: Linear,
}

impl AdditivePool {
    pub fn new(prefix: &str, dim: usize, hidden: usize) -> Self {
        Self {
            hidden: Linear::new(&join(prefix, "w1"), dim, hidden, true),
            score: Linear::new(&join(prefix, "w2"), hidden, 1, true),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut SeedStream) -> Result<()> {
        self.hidden.init(store, rng)?;
        self.score.init(store, rng)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        x: Var,
        layout: Rc<SeqLayout>,
    ) -> Result<Var> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.tanh(h);
        let a = self.score.forward(tape, store, h)?;
        tape.pool(x, a, layout)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(prefix: &str, dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(&join(prefix, "up"), dim, hidden, true),
            down: Linear::new(&join(prefix, "down"), hidden, dim, true),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut SeedStream) -> Result<()> {
        self.up.init(store, rng)?;
        self.down.init(store, rng)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        x: Var,
    ) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, store, h)
    }
}

/// Post-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn: MultiHeadAttention,
    pub attn_norm: ResidualNorm,
    pub ffn: FeedForward,
    pub ffn_norm: ResidualNorm,
    pub dropout: f64,
}

impl TransformerLayer {
    pub fn new(
        prefix: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        dropout: f64,
        eps: f64,
        affine_norm: bool,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&join(prefix, "attn"), dim, heads)?,
            attn_norm: ResidualNorm::new(&join(prefix, "attn_norm"), dim, eps, affine_norm),
            ffn: FeedForward::new(&join(prefix, "ffn"), dim, ffn_dim),
            ffn_norm: ResidualNorm::new(&join(prefix, "ffn_norm"), dim, eps, affine_norm),
            dropout,
        })
    }

    pub fn init<T: Real>(&self, store: &mut ParameterStore<T>, rng: &mut SeedStream) -> Result<()> {
        self.attn.init(store, rng)?;
        self.attn_norm.init(store, rng)?;
        self.ffn.init(store, rng)?;
        self.ffn_norm.init(store, rng)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        x: Var,
        layout: Rc<AttnLayout>,
    ) -> Result<Var> {
        let a = self.attn.forward(tape, store, x, x, x, layout)?;
        let a = tape.dropout(a, self.dropout)?;
        let x = self.attn_norm.forward(tape, store, x, a)?;
        let f = self.ffn.forward(tape, store, x)?;
        let f = tape.dropout(f, self.dropout)?;
        self.ffn_norm.forward(tape, store, x, f)
    }
}
