//! Named parameter collections and their binding into a [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Grads, Graph, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// SHA-256 over names, shapes and little-endian `f64` images of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Inserts every tensor as a graph leaf; `trainable == false` makes them constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Panics on unknown names: a network referencing a parameter it never
    /// initialized is a construction bug, not a runtime condition.
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Per-parameter gradients; parameters the output does not depend on get zeros.
    pub fn gradients<T: Scalar>(&self, grads: &mut Grads<T>, store: &ParamStore<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, &v) in &self.vars {
            let g = grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(store.get(name).expect("bound from store").shape().to_vec()));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Parameter initializers used by the network builders.
pub(crate) struct Init<'a, R: Rng> {
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                T::lit(z * std)
            })
            .collect();
        Tensor::from_vec(shape.to_vec(), data).expect("consistent shape")
    }

    /// He-style init for a conv weight `[out, in, k, k]`, scaled by `gain`.
    pub fn conv<T: Scalar>(&mut self, out: usize, inp: usize, k: usize, gain: f64) -> Tensor<T> {
        let fan_in = (inp * k * k) as f64;
        self.normal(&[out, inp, k, k], gain * (2.0 / fan_in).sqrt())
    }

    pub fn linear<T: Scalar>(&mut self, out: usize, inp: usize, gain: f64) -> Tensor<T> {
        self.normal(&[out, inp], gain * (1.0 / inp as f64).sqrt())
    }
}
