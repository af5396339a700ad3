use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
///
/// Insertion order is the canonical order for checkpoints, optimizer state
/// and gradient accumulation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Replaces every tensor by name from `other`, requiring identical names
    /// and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            let src = other.get(src);
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    src.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = src.clone();
        }
        Ok(())
    }

    /// Records every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        self.bind_with(tape, true)
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bindings {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, requires_grad: bool) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        Bindings { vars }
    }
}

/// Tape variables for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Glorot-uniform initialisation for a `[fan_out, fan_in]` matrix.
pub fn glorot(rng: &mut impl Rng, fan_out: usize, fan_in: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, &[fan_out, fan_in], limit)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], limit: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(-limit, limit);
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}
