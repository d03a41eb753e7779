use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::derive_seed_str;

/// Named learnable tensors in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Uniform initialization bound `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("param store", format!("duplicate parameter '{name}'")));
        }
        self.entries.push((name.clone(), value));
        self.index.insert(name, self.entries.len() - 1);
        Ok(self.entries.len() - 1)
    }

    /// Inserts a tensor drawn uniformly from `±bound`.
    ///
    /// Each parameter gets its own stream keyed by `(seed, name)`, so layers
    /// shared between architectures start from identical values.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], bound: f64, seed: u64) -> Result<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_str(seed, name));
        let t = Tensor::from_fn(shape.to_vec(), |_| {
            T::from_f64_lossy(bound * (2.0 * rng.random::<f64>() - 1.0))
        });
        self.insert(name, t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every parameter in `graph`, as gradient leaves when `trainable`.
    pub fn register(&self, graph: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    graph.leaf(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect()
    }

    /// Gradients for the vars returned by [`ParamStore::register`]; unreachable ones are zero.
    pub fn gradients(&self, graph: &Graph<T>, vars: &[Var]) -> Vec<Tensor<T>> {
        self.entries
            .iter()
            .zip(vars)
            .map(|((_, t), &v)| {
                graph
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// FNV-1a over names, shapes and raw value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in &self.entries {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::zeros(vec![2])).unwrap();
        assert!(store.insert("a", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn uniform_init_is_bounded_and_seeded() {
        let mut a = ParamStore::<f64>::new();
        let mut b = ParamStore::<f64>::new();
        let bound = glorot_bound(9, 18);
        a.insert_uniform("w", &[2, 1, 3, 3], bound, 7).unwrap();
        b.insert_uniform("w", &[2, 1, 3, 3], bound, 7).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert!(a.get("w").unwrap().data().iter().all(|v| v.abs() <= bound));
        let mut c = ParamStore::<f64>::new();
        c.insert_uniform("w", &[2, 1, 3, 3], bound, 8).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }
}
