//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Values live on the
//! tape; [`Var`] is an index into it. Sequence-level operations (attention,
//! additive pooling) work on *packed* matrices: many variable-length
//! sequences stacked row-wise and described by a [`SeqLayout`], so one tape
//! node covers a whole mini-batch.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::params::ParameterStore;
use crate::rng::SeedStream;
use crate::tensor::{dot, matmul, matmul_nt, matmul_tn, softmax_in_place, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Stacked variable-length sequences: `(start_row, len)` per sequence plus
/// an optional per-row validity mask (false rows are padding).
#[derive(Clone, Debug, PartialEq)]
pub struct SeqLayout {
    pub seqs: Vec<(usize, usize)>,
    pub mask: Option<Vec<bool>>,
}

impl SeqLayout {
    /// Layout for sequences of the given lengths stored back to back.
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut start = 0;
        let seqs = lengths
            .iter()
            .map(|&l| {
                let s = (start, l);
                start += l;
                s
            })
            .collect();
        Self { seqs, mask: None }
    }

    pub fn single(len: usize) -> Self {
        Self::from_lengths(&[len])
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn total_rows(&self) -> usize {
        self.seqs.iter().map(|&(s, l)| s + l).max().unwrap_or(0)
    }

    fn valid(&self, row: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[row])
    }
}

/// Pairs of query/key row ranges attended within, one per sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnLayout {
    pub groups: Vec<AttnGroup>,
    /// Keys marked false receive zero attention weight.
    pub key_mask: Option<Vec<bool>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnGroup {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl AttnLayout {
    pub fn single(q_len: usize, k_len: usize) -> Self {
        Self {
            groups: vec![AttnGroup {
                q_start: 0,
                q_len,
                k_start: 0,
                k_len,
            }],
            key_mask: None,
        }
    }

    /// Attention within each sequence, queries and keys sharing the layout.
    pub fn within(seqs: &SeqLayout) -> Self {
        Self {
            groups: seqs
                .seqs
                .iter()
                .map(|&(s, l)| AttnGroup {
                    q_start: s,
                    q_len: l,
                    k_start: s,
                    k_len: l,
                })
                .collect(),
            key_mask: seqs.mask.clone(),
        }
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Affine(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Gather {
        x: Var,
        idx: Rc<Vec<usize>>,
    },
    ConcatCols(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<AttnLayout>,
        probs: Vec<T>,
    },
    Pool {
        x: Var,
        scores: Var,
        layout: Rc<SeqLayout>,
        weights: Vec<T>,
    },
    L2NormRows {
        x: Var,
        norms: Vec<T>,
    },
    SoftmaxRows(Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    GroupDot {
        u: Var,
        c: Var,
        per: usize,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    grads: Vec<Option<Tensor<T>>>,
    mode: Mode,
    rng: Option<SeedStream>,
    done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mat<T: Real>(shape: [usize; 2], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("internal shape bookkeeping")
}

impl<T: Real> Tape<T> {
    /// An inference tape: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grads: Vec::new(),
            mode: Mode::Eval,
            rng: None,
            done: false,
        }
    }

    /// A training tape whose dropout masks come from `rng`.
    pub fn training(rng: SeedStream) -> Self {
        Self {
            mode: Mode::Train,
            rng: Some(rng),
            ..Self::new()
        }
    }

    pub fn with_mode(mode: Mode, rng: SeedStream) -> Self {
        match mode {
            Mode::Train => Self::training(rng),
            Mode::Eval => Self::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// An input that gradients are not tracked for.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is wanted after [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Brings a stored parameter onto the tape (once per name).
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.get(name)?;
        let v = self.push(p.value.clone(), Op::Param, p.trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every trainable parameter used on this tape.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(name, v)| self.grad(*v).map(|g| (name.as_str(), g)))
    }

    /// Adds this tape's parameter gradients into the store's grad slots.
    pub fn accumulate_into(&self, store: &mut ParameterStore<T>) -> Result<()> {
        for (name, g) in self.param_grads() {
            store.accumulate_grad(name, g)?;
        }
        Ok(())
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    // ---- elementwise and linear algebra -------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(shape_err!("matmul {n}x{k} by {k2}x{m}"));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        let ng = self.needs(&[a, b]);
        Ok(self.push(mat([n, m], out), Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (m, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err!("matmul_nt {n}x{k} by ({m}x{k2})ᵀ"));
        }
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), n, k, m);
        let ng = self.needs(&[a, b]);
        Ok(self.push(mat([n, m], out), Op::MatMulNT(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        if self.value(row).numel() != m {
            return Err(shape_err!(
                "add_row: {m} columns vs bias of {}",
                self.value(row).numel()
            ));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..n {
            for (o, &b) in out[i * m..(i + 1) * m].iter_mut().zip(r) {
                *o = *o + b;
            }
        }
        let ng = self.needs(&[a, row]);
        Ok(self.push(mat([n, m], out), Op::AddRow(a, row), ng))
    }

    /// Multiplies every row of `a` elementwise by a row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        if self.value(row).numel() != m {
            return Err(shape_err!(
                "mul_row: {m} columns vs {}",
                self.value(row).numel()
            ));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..n {
            for (o, &b) in out[i * m..(i + 1) * m].iter_mut().zip(r) {
                *o = *o * b;
            }
        }
        let ng = self.needs(&[a, row]);
        Ok(self.push(mat([n, m], out), Op::MulRow(a, row), ng))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        if self.value(col).numel() != n {
            return Err(shape_err!(
                "mul_col: {n} rows vs {}",
                self.value(col).numel()
            ));
        }
        let c = self.value(col).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..n {
            for o in out[i * m..(i + 1) * m].iter_mut() {
                *o = *o * c[i];
            }
        }
        let ng = self.needs(&[a, col]);
        Ok(self.push(mat([n, m], out), Op::MulCol(a, col), ng))
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (s, b) = (T::lit(scale), T::lit(shift));
        let t = self.value(a);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&x| s * x + b).collect(),
        )
        .expect("same shape");
        let ng = self.needs(&[a]);
        self.push(out, Op::Affine(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, T::tanh);
        let ng = self.needs(&[a]);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| T::one() / (T::one() + (-x).exp()));
        let ng = self.needs(&[a]);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| {
            let u = T::lit(GELU_C) * (x + T::lit(0.044715) * x * x * x);
            T::lit(0.5) * x * (T::one() + u.tanh())
        });
        let ng = self.needs(&[a]);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Row-wise `(x - mean) / sqrt(var + eps)`, no learnable gain or bias.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let (n, m) = self.dims(a);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); n * m];
        let mut inv_std = Vec::with_capacity(n);
        let mf = T::lit(m as f64);
        for i in 0..n {
            let row = &x[i * m..(i + 1) * m];
            let mean = row.iter().copied().sum::<T>() / mf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let is = T::one() / (var + T::lit(eps)).sqrt();
            for (o, &v) in out[i * m..(i + 1) * m].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.needs(&[a]);
        self.push(mat([n, m], out), Op::LayerNorm { x: a, inv_std }, ng)
    }

    /// Selects rows of `a` by index (rows may repeat).
    pub fn gather(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let (n, m) = self.dims(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(shape_err!("gather index {bad} out of range for {n} rows"));
        }
        if idx.is_empty() {
            return Err(shape_err!("gather with no indices"));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx.iter() {
            out.extend_from_slice(&x[i * m..(i + 1) * m]);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(mat([idx.len(), m], out), Op::Gather { x: a, idx }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != n) {
            return Err(shape_err!("concat_cols with differing row counts"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(mat([n, total], out), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); n * m];
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let row = &x[i * m..(i + 1) * m];
            let norm = dot(row, row).sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(Error::Numerical(format!(
                    "row {i} has zero or non-finite norm"
                )));
            }
            for (o, &v) in out[i * m..(i + 1) * m].iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(mat([n, m], out), Op::L2NormRows { x: a, norms }, ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (n, m) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(m) {
            softmax_in_place(row);
        }
        let ng = self.needs(&[a]);
        self.push(mat([n, m], out), Op::SoftmaxRows(a), ng)
    }

    /// Mean over rows of `-log softmax(logits_i)[targets_i]`.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, m) = self.dims(logits);
        if targets.len() != n {
            return Err(shape_err!("{} targets for {n} rows", targets.len()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= m) {
            return Err(shape_err!("target {t} out of range for {m} classes"));
        }
        let x = self.value(logits).data();
        let mut probs = x.to_vec();
        let mut loss = T::zero();
        for (i, row) in probs.chunks_mut(m).enumerate() {
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite logit at row {i}, column {j}"
                )));
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss = loss + lse - row[targets[i]];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = loss / T::lit(n as f64);
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let ng = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.numel() as f64);
        let ng = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let n = self.value(a).numel();
        let keep = T::lit(1.0 / (1.0 - rate));
        let rng = self
            .rng
            .as_mut()
            .ok_or_else(|| Error::Usage("training tape without a seed stream".into()))?;
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.rng().random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let t = self.value(a);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().zip(&mask).map(|(&x, &k)| x * k).collect(),
        )
        .expect("same shape");
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Dropout { x: a, mask }, ng))
    }

    /// Row-wise dot products between `u[i]` and its `per` partners
    /// `c[i*per .. (i+1)*per]`; returns an `n × per` matrix.
    pub fn group_dot(&mut self, u: Var, c: Var, per: usize) -> Result<Var> {
        let (n, d) = self.dims(u);
        let (nc, d2) = self.dims(c);
        if d != d2 || nc != n * per {
            return Err(shape_err!("group_dot {n}x{d} with {nc}x{d2}, per={per}"));
        }
        let (ud, cd) = (self.value(u).data(), self.value(c).data());
        let mut out = Vec::with_capacity(n * per);
        for i in 0..n {
            for j in 0..per {
                let r = i * per + j;
                out.push(dot(&ud[i * d..(i + 1) * d], &cd[r * d..(r + 1) * d]));
            }
        }
        let ng = self.needs(&[u, c]);
        Ok(self.push(mat([n, per], out), Op::GroupDot { u, c, per }, ng))
    }

    // ---- sequence operations --------------------------------------------

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q` and `k` are already-projected `[rows × heads·d_k]` matrices and
    /// `v` is `[rows × heads·d_v]`; the result is the concatenation of the
    /// per-head outputs, `[q_rows × heads·d_v]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<AttnLayout>,
    ) -> Result<Var> {
        let (nq, dq) = self.dims(q);
        let (nk, dk_total) = self.dims(k);
        let (nv, dv) = self.dims(v);
        if heads == 0 || dq % heads != 0 || dv % heads != 0 {
            return Err(Error::Config(format!(
                "width {dq}/{dv} not divisible by {heads} heads"
            )));
        }
        if dq != dk_total || nk != nv {
            return Err(shape_err!(
                "attention q {nq}x{dq}, k {nk}x{dk_total}, v {nv}x{dv}"
            ));
        }
        if let Some(m) = &layout.key_mask {
            if m.len() != nk {
                return Err(shape_err!("key mask of {} for {nk} keys", m.len()));
            }
        }
        for g in &layout.groups {
            if g.q_start + g.q_len > nq || g.k_start + g.k_len > nk {
                return Err(shape_err!("attention group {g:?} outside {nq}/{nk} rows"));
            }
        }
        let dh = dq / heads;
        let dvh = dv / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![T::zero(); nq * dv];
        let total: usize = layout
            .groups
            .iter()
            .map(|g| heads * g.q_len * g.k_len)
            .sum();
        let mut probs = Vec::with_capacity(total);
        for g in &layout.groups {
            for h in 0..heads {
                for qi in g.q_start..g.q_start + g.q_len {
                    let qrow = &qd[qi * dq + h * dh..qi * dq + (h + 1) * dh];
                    let base = probs.len();
                    for kj in g.k_start..g.k_start + g.k_len {
                        let masked = layout.key_mask.as_ref().is_some_and(|m| !m[kj]);
                        probs.push(if masked {
                            T::neg_infinity()
                        } else {
                            dot(qrow, &kd[kj * dq + h * dh..kj * dq + (h + 1) * dh]) * scale
                        });
                    }
                    softmax_in_place(&mut probs[base..]);
                    let orow = &mut out[qi * dv + h * dvh..qi * dv + (h + 1) * dvh];
                    for (j, kj) in (g.k_start..g.k_start + g.k_len).enumerate() {
                        let p = probs[base + j];
                        if p == T::zero() {
                            continue;
                        }
                        let vrow = &vd[kj * dv + h * dvh..kj * dv + (h + 1) * dvh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o = *o + p * x;
                        }
                    }
                }
            }
        }
        let ng = self.needs(&[q, k, v]);
        Ok(self.push(
            mat([nq, dv], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            ng,
        ))
    }

    /// Softmax-weighted sum of rows per sequence; `scores` holds one logit
    /// per row. Masked rows get zero weight.
    pub fn pool(&mut self, x: Var, scores: Var, layout: Rc<SeqLayout>) -> Result<Var> {
        let (n, d) = self.dims(x);
        if self.value(scores).numel() != n {
            return Err(shape_err!(
                "pool: {} scores for {n} rows",
                self.value(scores).numel()
            ));
        }
        if layout.total_rows() > n || layout.mask.as_ref().is_some_and(|m| m.len() != n) {
            return Err(shape_err!("pool layout does not fit {n} rows"));
        }
        let (xd, sd) = (self.value(x).data(), self.value(scores).data());
        let g = layout.seqs.len();
        let mut out = vec![T::zero(); g * d];
        let mut weights = Vec::with_capacity(n);
        for (gi, &(start, len)) in layout.seqs.iter().enumerate() {
            let base = weights.len();
            for r in start..start + len {
                weights.push(if layout.valid(r) {
                    sd[r]
                } else {
                    T::neg_infinity()
                });
            }
            softmax_in_place(&mut weights[base..]);
            let orow = &mut out[gi * d..(gi + 1) * d];
            for (j, r) in (start..start + len).enumerate() {
                let w = weights[base + j];
                if w == T::zero() {
                    continue;
                }
                for (o, &v) in orow.iter_mut().zip(&xd[r * d..(r + 1) * d]) {
                    *o = *o + w * v;
                }
            }
        }
        let ng = self.needs(&[x, scores]);
        Ok(self.push(
            mat([g, d], out),
            Op::Pool {
                x,
                scores,
                layout,
                weights,
            },
            ng,
        ))
    }

    /// Attention probabilities recorded by an attention node, flattened as
    /// group → head → query → key.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Probabilities of the most recently recorded attention node.
    pub fn last_attention_probs(&self) -> Option<&[T]> {
        self.nodes.iter().rev().find_map(|n| match &n.op {
            Op::Attention { probs, .. } => Some(probs.as_slice()),
            _ => None,
        })
    }

    /// Pooling weights recorded by a pool node, in row order per sequence.
    pub fn pool_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Pool { weights, .. } => Some(weights),
            _ => None,
        }
    }

    // ---- reverse pass ---------------------------------------------------

    /// Fills gradients of every tracked value reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.done {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.done = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![T::one()],
        )?);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, data: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(data) {
                        *a = *a + b;
                    }
                }
                slot @ None => {
                    let shape = self.nodes[v.0].value.shape().to_vec();
                    *slot = Some(Tensor::new(shape, data).expect("grad shape"));
                }
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (n, k) = (val(*a).rows(), val(*a).cols());
                let m = val(*b).cols();
                if want(*a) {
                    acc(*a, matmul_nt(gd, val(*b).data(), n, m, k));
                }
                if want(*b) {
                    acc(*b, matmul_tn(val(*a).data(), gd, n, k, m));
                }
            }
            Op::MatMulNT(a, b) => {
                let (n, k) = (val(*a).rows(), val(*a).cols());
                let m = val(*b).rows();
                if want(*a) {
                    acc(*a, matmul(gd, val(*b).data(), n, m, k));
                }
                if want(*b) {
                    acc(*b, matmul_tn(gd, val(*a).data(), n, m, k));
                }
            }
            Op::Add(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gd.to_vec());
                acc(*b, gd.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    acc(
                        *a,
                        gd.iter()
                            .zip(val(*b).data())
                            .map(|(&x, &y)| x * y)
                            .collect(),
                    );
                }
                if want(*b) {
                    acc(
                        *b,
                        gd.iter()
                            .zip(val(*a).data())
                            .map(|(&x, &y)| x * y)
                            .collect(),
                    );
                }
            }
            Op::AddRow(a, r) => {
                acc(*a, gd.to_vec());
                if want(*r) {
                    let m = val(*a).cols();
                    let mut gr = vec![T::zero(); m];
                    for row in gd.chunks(m) {
                        for (s, &x) in gr.iter_mut().zip(row) {
                            *s = *s + x;
                        }
                    }
                    acc(*r, gr);
                }
            }
            Op::MulRow(a, r) => {
                let m = val(*a).cols();
                let rv = val(*r).data();
                if want(*a) {
                    let ga = gd
                        .chunks(m)
                        .flat_map(|row| row.iter().zip(rv).map(|(&x, &y)| x * y))
                        .collect();
                    acc(*a, ga);
                }
                if want(*r) {
                    let mut gr = vec![T::zero(); m];
                    for (grow, arow) in gd.chunks(m).zip(val(*a).data().chunks(m)) {
                        for ((s, &x), &y) in gr.iter_mut().zip(grow).zip(arow) {
                            *s = *s + x * y;
                        }
                    }
                    acc(*r, gr);
                }
            }
            Op::MulCol(a, c) => {
                let m = val(*a).cols();
                let cv = val(*c).data();
                if want(*a) {
                    let ga = gd
                        .chunks(m)
                        .zip(cv)
                        .flat_map(|(row, &s)| row.iter().map(move |&x| x * s))
                        .collect();
                    acc(*a, ga);
                }
                if want(*c) {
                    let gc = gd
                        .chunks(m)
                        .zip(val(*a).data().chunks(m))
                        .map(|(grow, arow)| dot(grow, arow))
                        .collect();
                    acc(*c, gc);
                }
            }
            Op::Affine(a, s) => acc(*a, gd.iter().map(|&x| x * *s).collect()),
            Op::Tanh(a) => acc(
                *a,
                gd.iter()
                    .zip(node.value.data())
                    .map(|(&x, &y)| x * (T::one() - y * y))
                    .collect(),
            ),
            Op::Sigmoid(a) => acc(
                *a,
                gd.iter()
                    .zip(node.value.data())
                    .map(|(&x, &y)| x * y * (T::one() - y))
                    .collect(),
            ),
            Op::Gelu(a) => {
                let c = T::lit(GELU_C);
                let k = T::lit(0.044715);
                let half = T::lit(0.5);
                let ga = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gx, &x)| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let d = half * (T::one() + t)
                            + half
                                * x
                                * (T::one() - t * t)
                                * c
                                * (T::one() + T::lit(3.0) * k * x * x);
                        gx * d
                    })
                    .collect();
                acc(*a, ga);
            }
            Op::LayerNorm { x, inv_std } => {
                let m = node.value.cols();
                let mf = T::lit(m as f64);
                let mut gx = Vec::with_capacity(gd.len());
                for ((grow, yrow), &is) in
                    gd.chunks(m).zip(node.value.data().chunks(m)).zip(inv_std)
                {
                    let mg = grow.iter().copied().sum::<T>() / mf;
                    let mgy = dot(grow, yrow) / mf;
                    gx.extend(
                        grow.iter()
                            .zip(yrow)
                            .map(|(&gv, &yv)| is * (gv - mg - yv * mgy)),
                    );
                }
                acc(*x, gx);
            }
            Op::Gather { x, idx } => {
                let m = node.value.cols();
                let mut gx = vec![T::zero(); val(*x).numel()];
                for (row, &src) in gd.chunks(m).zip(idx.iter()) {
                    for (s, &v) in gx[src * m..(src + 1) * m].iter_mut().zip(row) {
                        *s = *s + v;
                    }
                }
                acc(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if want(p) {
                        let gp = gd
                            .chunks(total)
                            .flat_map(|row| row[off..off + w].iter().copied())
                            .collect();
                        acc(p, gp);
                    }
                    off += w;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let dq = qv.cols();
                let dv = vv.cols();
                let dh = dq / heads;
                let dvh = dv / heads;
                let scale = T::lit(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
                let mut gq = vec![T::zero(); qd.len()];
                let mut gk = vec![T::zero(); kd.len()];
                let mut gv = vec![T::zero(); vd.len()];
                let mut dp = Vec::new();
                let mut off = 0;
                for grp in &layout.groups {
                    for h in 0..*heads {
                        for qi in grp.q_start..grp.q_start + grp.q_len {
                            let p = &probs[off..off + grp.k_len];
                            off += grp.k_len;
                            let go = &gd[qi * dv + h * dvh..qi * dv + (h + 1) * dvh];
                            dp.clear();
                            for (j, kj) in (grp.k_start..grp.k_start + grp.k_len).enumerate() {
                                let vrow = kj * dv + h * dvh;
                                dp.push(dot(go, &vd[vrow..vrow + dvh]));
                                if p[j] != T::zero() {
                                    for (s, &x) in gv[vrow..vrow + dvh].iter_mut().zip(go) {
                                        *s = *s + p[j] * x;
                                    }
                                }
                            }
                            let inner = dot(p, &dp);
                            let qrow = qi * dq + h * dh;
                            for (j, kj) in (grp.k_start..grp.k_start + grp.k_len).enumerate() {
                                let ds = p[j] * (dp[j] - inner) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let krow = kj * dq + h * dh;
                                for t in 0..dh {
                                    gq[qrow + t] = gq[qrow + t] + ds * kd[krow + t];
                                    gk[krow + t] = gk[krow + t] + ds * qd[qrow + t];
                                }
                            }
                        }
                    }
                }
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gv);
            }
            Op::Pool {
                x,
                scores,
                layout,
                weights,
            } => {
                let d = val(*x).cols();
                let xd = val(*x).data();
                let mut gx = vec![T::zero(); xd.len()];
                let mut gs = vec![T::zero(); val(*scores).numel()];
                let mut off = 0;
                for (gi, &(start, len)) in layout.seqs.iter().enumerate() {
                    let go = &gd[gi * d..(gi + 1) * d];
                    let w = &weights[off..off + len];
                    off += len;
                    let da: Vec<T> = (start..start + len)
                        .map(|r| dot(&xd[r * d..(r + 1) * d], go))
                        .collect();
                    let inner = dot(w, &da);
                    for (j, r) in (start..start + len).enumerate() {
                        if w[j] == T::zero() {
                            continue;
                        }
                        for (s, &v) in gx[r * d..(r + 1) * d].iter_mut().zip(go) {
                            *s = *s + w[j] * v;
                        }
                        gs[r] = gs[r] + w[j] * (da[j] - inner);
                    }
                }
                acc(*x, gx);
                acc(*scores, gs);
            }
            Op::L2NormRows { x, norms } => {
                let m = node.value.cols();
                let mut gx = Vec::with_capacity(gd.len());
                for ((grow, yrow), &n) in gd.chunks(m).zip(node.value.data().chunks(m)).zip(norms) {
                    let yg = dot(yrow, grow);
                    gx.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| (gv - yv * yg) / n));
                }
                acc(*x, gx);
            }
            Op::SoftmaxRows(x) => {
                let m = node.value.cols();
                let mut gx = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks(m).zip(node.value.data().chunks(m)) {
                    let inner = dot(grow, yrow);
                    gx.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| yv * (gv - inner)));
                }
                acc(*x, gx);
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let m = val(*logits).cols();
                let n = targets.len();
                let s = gd[0] / T::lit(n as f64);
                let mut gx: Vec<T> = probs.iter().map(|&p| p * s).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gx[i * m + t] = gx[i * m + t] - s;
                }
                acc(*logits, gx);
            }
            Op::Sum(a) => acc(*a, vec![gd[0]; val(*a).numel()]),
            Op::Mean(a) => {
                let n = val(*a).numel();
                acc(*a, vec![gd[0] / T::lit(n as f64); n]);
            }
            Op::Dropout { x, mask } => {
                acc(*x, gd.iter().zip(mask).map(|(&gv, &k)| gv * k).collect())
            }
            Op::GroupDot { u, c, per } => {
                let d = val(*u).cols();
                let (ud, cd) = (val(*u).data(), val(*c).data());
                let n = val(*u).rows();
                if want(*u) {
                    let mut gu = vec![T::zero(); ud.len()];
                    for i in 0..n {
                        for j in 0..*per {
                            let r = i * per + j;
                            let w = gd[r];
                            for (s, &x) in gu[i * d..(i + 1) * d]
                                .iter_mut()
                                .zip(&cd[r * d..(r + 1) * d])
                            {
                                *s = *s + w * x;
                            }
                        }
                    }
                    acc(*u, gu);
                }
                if want(*c) {
                    let mut gc = vec![T::zero(); cd.len()];
                    for i in 0..n {
                        for j in 0..*per {
                            let r = i * per + j;
                            let w = gd[r];
                            for (s, &x) in gc[r * d..(r + 1) * d]
                                .iter_mut()
                                .zip(&ud[i * d..(i + 1) * d])
                            {
                                *s = *s + w * x;
                            }
                        }
                    }
                    acc(*c, gc);
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
