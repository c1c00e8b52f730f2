//! Named parameter storage shared by every component of a model.

use std::collections::HashMap;
use std::ops::Index;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{fnv1a64, stream};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    pub init: Init,
}

impl<T: Scalar> Param<T> {
    fn draw(&mut self, seed: u64) {
        match self.init {
            Init::Zeros => self.value.data_mut().fill(T::zero()),
            Init::Ones => self.value.data_mut().fill(T::one()),
            Init::Normal(std) => {
                let mut rng = stream(seed, &self.name, 0);
                let normal = Normal::new(0.0, std).expect("finite std");
                for x in self.value.data_mut() {
                    *x = T::of(normal.sample(&mut rng));
                }
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter and draws its initial value from the stream
    /// keyed by `(seed, name)`.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let mut p = Param {
            name: name.to_owned(),
            value: Tensor::zeros(shape),
            grad: vec![T::zero(); shape.iter().product()],
            init,
        };
        p.draw(seed);
        let id = ParamId(self.params.len());
        self.params.push(p);
        self.by_name.insert(name.to_owned(), id);
        Ok(id)
    }

    pub fn reinit(&mut self, id: ParamId, seed: u64) {
        self.params[id.0].draw(seed);
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_owned()))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over parameters whose name satisfies `pred`.
    pub fn count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|p| pred(&p.name))
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn num_elements(&self) -> usize {
        self.count_where(|_| true)
    }

    /// Puts every parameter on the tape; only those accepted by `trainable`
    /// request gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable(&p.name)))
            .collect();
        Binding { vars }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn accumulate_grads(&mut self, tape: &Tape<T>, binding: &Binding) {
        for (p, &v) in self.params.iter_mut().zip(&binding.vars) {
            if let Some(g) = tape.grad(v) {
                p.grad.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
    }

    /// FNV-1a over names and `f32` little-endian bytes of the selected
    /// parameters, in registration order.
    pub fn hash_where(&self, pred: impl Fn(&str) -> bool) -> u64 {
        let mut bytes = Vec::new();
        for p in self.params.iter().filter(|p| pred(&p.name)) {
            bytes.extend_from_slice(p.name.as_bytes());
            for &x in p.value.data() {
                bytes.extend_from_slice(&(x.f64() as f32).to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: vec![U::zero(); p.grad.len()],
                    init: p.init,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Overwrites a parameter's value, checking the shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name)?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name_and_seed() {
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        let x = a.add("x", &[3, 4], Init::Normal(0.02), 5).unwrap();
        b.add("other", &[2], Init::Zeros, 5).unwrap();
        let y = b.add("x", &[3, 4], Init::Normal(0.02), 5).unwrap();
        assert_eq!(a.value(x), b.value(y));
        assert!(a.add("x", &[1], Init::Zeros, 0).is_err());
    }

    #[test]
    fn hash_tracks_selected_values_only() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a.w", &[2], Init::Normal(1.0), 1).unwrap();
        s.add("b.w", &[2], Init::Normal(1.0), 1).unwrap();
        let hb = s.hash_where(|n| n.starts_with("b."));
        let ha = s.hash_where(|n| n.starts_with("a."));
        s.get_mut(a).value.data_mut()[0] += 1.0;
        assert_eq!(hb, s.hash_where(|n| n.starts_with("b.")));
        assert_ne!(ha, s.hash_where(|n| n.starts_with("a.")));
    }
}
