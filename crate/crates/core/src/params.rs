//! Named, shaped, trainable tensors with gradient slots.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{shape_err, Error, Result};
use crate::rng::SeedStream;
use crate::tensor::{Real, Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Param<T: Real = Scalar> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    /// Frozen entries are stored and checkpointed but never updated.
    pub trainable: bool,
}

/// Initialization scheme for a freshly registered parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Xavier/Glorot uniform over the last two dimensions.
    Xavier,
    Normal(f64),
    Zeros,
    Ones,
}

/// Parameters keyed by unique name; iteration is lexicographic.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore<T: Real = Scalar> {
    entries: BTreeMap<String, Param<T>>,
    pub step_count: u64,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            step_count: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(
            name,
            Param {
                value,
                grad: None,
                trainable: true,
            },
        );
        Ok(())
    }

    /// Registers a parameter initialized from `rng`.
    pub fn init(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut SeedStream,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| T::lit(dist.sample(rng.rng()))).collect()
            }
            Init::Xavier => {
                let (fan_in, fan_out) = match shape {
                    [a] => (*a, 1),
                    [.., a, b] => (*a, *b),
                    [] => (1, 1),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound)
                    .map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| T::lit(dist.sample(rng.rng()))).collect()
            }
        };
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn freeze(&mut self, name: &str) -> Result<()> {
        self.get_mut(name)?.trainable = false;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    /// Overwrites a value, keeping its registered shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(shape_err!(
                "parameter `{name}` has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// Adds `grad` into the slot for `name`.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor<T>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != grad.shape() {
            return Err(shape_err!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                grad.shape(),
                p.value.shape()
            ));
        }
        match &mut p.grad {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a = *a + b;
                }
            }
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter().map(|v| v.as_f64() * v.as_f64()))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = T::lit(max_norm / norm);
            for g in self.entries.values_mut().filter_map(|p| p.grad.as_mut()) {
                g.data_mut().iter_mut().for_each(|v| *v = *v * s);
            }
        }
        norm
    }

    /// Copy of the store in another precision (gradients dropped).
    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: None,
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
            step_count: self.step_count,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_sorted() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("b", Tensor::zeros([2])).unwrap();
        s.insert("a", Tensor::zeros([2])).unwrap();
        assert!(s.insert("a", Tensor::zeros([2])).is_err());
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn init_is_reproducible() {
        let build = || {
            let mut s = ParameterStore::<f32>::new();
            let mut rng = SeedStream::new(3);
            s.init("w", &[4, 4], Init::Xavier, &mut rng).unwrap();
            s.init("e", &[3, 4], Init::Normal(0.02), &mut rng).unwrap();
            s
        };
        let (a, b) = (build(), build());
        assert_eq!(a.value("w").unwrap(), b.value("w").unwrap());
        let bound = (6.0f32 / 8.0).sqrt();
        assert!(a
            .value("w")
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() <= bound));
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut s = ParameterStore::<f64>::new();
        s.insert("a", Tensor::zeros([2])).unwrap();
        s.accumulate_grad("a", &Tensor::vector(vec![3.0, 4.0]))
            .unwrap();
        assert_eq!(s.clip_grad_norm(1.0), 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
    }
}
