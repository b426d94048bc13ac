use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::tape::{Grads, Tape, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Which optimizer group a parameter belongs to (separate learning rates).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    /// Non-trainable state such as normalization running statistics.
    Buffer,
}

/// Index of a parameter inside a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
struct Entry<F> {
    tensor: Tensor<F>,
    group: ParamGroup,
}

/// Named, shaped parameters in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<F> {
    entries: IndexMap<String, Entry<F>>,
}

impl<F: Real> Default for ParameterStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<F>, group: ParamGroup) -> Result<ParamId> {
        if self.entries.contains_key(name) {
            return Err(Error::Contract(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let tensor = if group == ParamGroup::Buffer {
            let mut t = tensor;
            t.set_requires_grad(false);
            t
        } else {
            tensor.with_grad()
        };
        let (idx, _) = self
            .entries
            .insert_full(name.to_string(), Entry { tensor, group });
        Ok(ParamId(idx))
    }

    /// Glorot-uniform weight of shape `[fan_in, fan_out]`.
    pub fn insert_glorot(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.insert_uniform(name, vec![fan_in, fan_out], -bound, bound, group, rng)
    }

    pub fn insert_uniform(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        lo: f64,
        hi: f64,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let dist = Uniform::new(lo, hi).map_err(|e| Error::Parameter(e.to_string()))?;
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::from_f64(shape, &data)?, group)
    }

    pub fn insert_constant(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        value: f64,
        group: ParamGroup,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        self.insert(name, Tensor::from_f64(shape, &vec![value; n])?, group)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries
            .get_index(id.0)
            .map(|(k, _)| k.as_str())
            .unwrap()
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>, ParamGroup)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), &e.tensor, e.group))
    }

    /// Freezes or unfreezes every parameter in a group.
    pub fn set_group_trainable(&mut self, group: ParamGroup, on: bool) {
        for e in self.entries.values_mut().filter(|e| e.group == group) {
            e.tensor.set_requires_grad(on);
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.tensor.requires_grad())
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Records every parameter on the tape; trainable ones as gradient leaves.
    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        let vars = self
            .entries
            .values()
            .map(|e| {
                if e.tensor.requires_grad() {
                    tape.param(&e.tensor)
                } else {
                    tape.constant(&e.tensor)
                }
            })
            .collect();
        Bound { vars }
    }

    /// Adds the tape gradients of every bound trainable parameter into its
    /// accumulator. Calling twice without [`zero_grad`](Self::zero_grad)
    /// sums both passes.
    pub fn accumulate(&mut self, tape: &Tape<F>, grads: &Grads<F>, bound: &Bound) {
        for (e, &v) in self.entries.values_mut().zip(&bound.vars) {
            if let (Some(acc), Some(g)) = (e.tensor.grad_mut(), grads.get(v)) {
                debug_assert_eq!(acc.len(), tape.value(v).len());
                acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Copies data (not gradients) from `other`, which must hold the same
    /// names and shapes.
    pub fn load_values(&mut self, other: &ParameterStore<F>) -> Result<()> {
        for (name, e) in self.entries.iter_mut() {
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if src.shape() != e.tensor.shape() {
                return Err(Error::shape("load_values", e.tensor.shape(), src.shape()));
            }
            e.tensor.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|e| e.tensor.data().iter().all(|v| v.is_finite()))
    }
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
