//! Central finite-difference checks of tape gradients.
//!
//! The analytic side runs at any precision `T`; the numeric side always runs
//! at `f64`, so an `f32` check compares against a reference with plenty of
//! headroom. Training tapes are reseeded identically for every evaluation,
//! which freezes dropout masks across the perturbed forward passes.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::rng::SeedStream;
use crate::tensor::Real;

/// A scalar function of the parameters in a store.
pub trait Objective {
    fn loss<T: Real>(&self, tape: &mut Tape<T>, store: &ParameterStore<T>) -> Result<Var>;
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Seed for the training tape; `None` uses an eval tape.
    pub dropout_seed: Option<u64>,
    /// Check at most this many entries per tensor (spread evenly).
    pub max_entries: Option<usize>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            dropout_seed: None,
            max_entries: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute difference when both
    /// norms are below `1e-6`.
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |t| t.rel_error)
    }
}

fn tape_for<T: Real>(opts: &CheckOptions) -> Tape<T> {
    match opts.dropout_seed {
        Some(s) => Tape::training(SeedStream::new(s)),
        None => Tape::new(),
    }
}

fn eval_f64<O: Objective>(
    obj: &O,
    store: &ParameterStore<f64>,
    opts: &CheckOptions,
) -> Result<f64> {
    let mut tape = tape_for::<f64>(opts);
    let l = obj.loss(&mut tape, store)?;
    Ok(tape.value(l).data()[0])
}

fn picked(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
        _ => (0..n).collect(),
    }
}

/// Compares analytic gradients at precision `T` against central differences
/// at `f64` for every trainable tensor of `store`.
pub fn check_gradients<T: Real, O: Objective>(
    obj: &O,
    store: &ParameterStore<f64>,
    opts: &CheckOptions,
) -> Result<GradReport> {
    let low = store.cast::<T>();
    let mut tape = tape_for::<T>(opts);
    let l = obj.loss(&mut tape, &low)?;
    tape.backward(l)?;
    let analytic: std::collections::BTreeMap<String, Vec<f64>> = tape
        .param_grads()
        .map(|(n, g)| (n.to_string(), g.to_f64_vec()))
        .collect();

    let mut work = store.clone();
    let mut tensors = Vec::new();
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    for name in names {
        let n = store.value(&name)?.numel();
        let idx = picked(n, opts.max_entries);
        let full = analytic.get(&name);
        let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let orig = work.value(&name)?.data()[i];
            work.get_mut(&name)?.value.data_mut()[i] = orig + opts.step;
            let plus = eval_f64(obj, &work, opts)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig - opts.step;
            let minus = eval_f64(obj, &work, opts)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig;
            let num = (plus - minus) / (2.0 * opts.step);
            let a = full.map_or(0.0, |g| g[i]);
            if !num.is_finite() || !a.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for `{name}`[{i}]"
                )));
            }
            diff += (a - num) * (a - num);
            an += a * a;
            nn += num * num;
        }
        let (diff, an, nn) = (diff.sqrt(), an.sqrt(), nn.sqrt());
        let scale = an.max(nn);
        tensors.push(TensorCheck {
            name,
            entries: idx.len(),
            analytic_norm: an,
            numeric_norm: nn,
            rel_error: if scale < 1e-6 { diff } else { diff / scale },
        });
    }
    Ok(GradReport { tensors })
}
